#include "fmpx/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

namespace fmpx {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'P', 'X'};

template <typename T>
void write_le(std::ofstream& out, T value) {
    // x86 is little-endian; serialize the in-memory representation directly.
    static_assert(std::is_integral_v<T>);
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in)
        throw CheckpointError(CheckpointErrorCode::Truncated,
                              "checkpoint: file ends mid-record");
    return value;
}

void write_tensor(std::ofstream& out, const std::string& name, const Tensor& t) {
    if (name.size() > 0xffff)
        throw CheckpointError(CheckpointErrorCode::BadTensorName,
                              "checkpoint: tensor name too long: " + name);
    write_le<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<uint8_t>(out, static_cast<uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_le<uint32_t>(out, static_cast<uint32_t>(t.dim(i)));
    auto d = t.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const FastMpoxModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw CheckpointError(CheckpointErrorCode::Io, "checkpoint: cannot open " + path +
                                                           " for writing");
    out.write(kMagic, 4);
    write_le<uint32_t>(out, kCheckpointVersion);
    write_le<uint64_t>(out, model.config.fingerprint());
    const auto& params = model.parameters();
    const auto& buffers = model.buffers();
    write_le<uint32_t>(out, static_cast<uint32_t>(params.size() + buffers.size()));
    for (const auto& [name, t] : params) write_tensor(out, name, t);
    for (const auto& [name, t] : buffers) write_tensor(out, name, t);
    out.flush();
    if (!out)
        throw CheckpointError(CheckpointErrorCode::Io, "checkpoint: write failed for " + path);
}

FastMpoxModel load_checkpoint(const std::string& path, const ModelConfig& config) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError(CheckpointErrorCode::Io, "checkpoint: cannot open " + path);

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError(CheckpointErrorCode::BadMagic,
                              "checkpoint: bad magic bytes in " + path);
    const auto version = read_le<uint32_t>(in);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointErrorCode::BadVersion,
                              "checkpoint: unsupported format version " +
                                  std::to_string(version));
    const auto fingerprint = read_le<uint64_t>(in);
    if (fingerprint != config.fingerprint())
        throw CheckpointError(CheckpointErrorCode::FingerprintMismatch,
                              "checkpoint: config fingerprint mismatch (file was saved for a "
                              "different configuration)");

    FastMpoxModel model = build_model(config, 0);
    std::unordered_map<std::string, Tensor> slots;
    for (const auto& [name, t] : model.parameters()) slots.emplace(name, t);
    for (const auto& [name, t] : model.buffers()) slots.emplace(name, t);

    const auto count = read_le<uint32_t>(in);
    if (count != slots.size())
        throw CheckpointError(CheckpointErrorCode::BadTensorCount,
                              "checkpoint: file holds " + std::to_string(count) +
                                  " tensors, model expects " + std::to_string(slots.size()));

    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_le<uint16_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in)
            throw CheckpointError(CheckpointErrorCode::Truncated,
                                  "checkpoint: file ends mid-record");
        auto it = slots.find(name);
        if (it == slots.end())
            throw CheckpointError(CheckpointErrorCode::BadTensorName,
                                  "checkpoint: unknown tensor " + name);
        const auto rank = read_le<uint8_t>(in);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_le<uint32_t>(in));
        Tensor dst = it->second;
        if (shape != dst.shape())
            throw CheckpointError(CheckpointErrorCode::ShapeMismatch,
                                  "checkpoint: tensor " + name + " has shape " +
                                      shape_str(shape) + ", model expects " +
                                      shape_str(dst.shape()));
        auto d = dst.data();
        in.read(reinterpret_cast<char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(float)));
        if (!in)
            throw CheckpointError(CheckpointErrorCode::Truncated,
                                  "checkpoint: file ends inside payload of " + name);
        slots.erase(it);
    }
    return model;
}

}  // namespace fmpx
