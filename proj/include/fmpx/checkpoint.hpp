#pragma once

#include <stdexcept>
#include <string>

#include "fmpx/model.hpp"

namespace fmpx {

// Checkpoint file layout (all integers little-endian):
//   magic "FMPX" | format version u32 | config fingerprint u64 |
//   tensor count u32 | per tensor: name length u16, UTF-8 name, rank u8,
//   dims u32 each, raw float32 payload.
// Parameters and batch-norm running statistics are both stored, so a
// round-trip restores inference behavior bitwise.

enum class CheckpointErrorCode {
    BadMagic,
    BadVersion,
    FingerprintMismatch,
    BadTensorCount,
    BadTensorName,
    ShapeMismatch,
    Truncated,
    Io,
};

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrorCode code, const std::string& msg)
        : std::runtime_error(msg), code_(code) {}
    CheckpointErrorCode code() const { return code_; }

private:
    CheckpointErrorCode code_;
};

constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const FastMpoxModel& model, const std::string& path);

// Rebuilds a model from `config` and overwrites every parameter and running
// stat from the file. The file's fingerprint must match config's.
FastMpoxModel load_checkpoint(const std::string& path, const ModelConfig& config);

}  // namespace fmpx
