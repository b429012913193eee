#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fmpx {

// Extents, outermost first. Activations are N x C x H x W, conv weights are
// OutC x InC/groups x KH x KW, per-channel vectors are C.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

class Tensor;

// One node of the reverse-mode tape. backward_fn reads the output tensor's
// gradient and accumulates vector-Jacobian products into the inputs' grads.
struct GradNode {
    std::vector<Tensor> inputs;
    std::function<void(Tensor& out)> backward_fn;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first needed; same length as data after
    bool requires_grad = false;
    std::shared_ptr<GradNode> node;  // null for leaves
};

// Dense float32 tensor with value-semantics handle (copies share storage).
// Ops never mutate their inputs' data; only grad buffers are written during
// backward and parameter data during optimizer steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, float value);
    static Tensor from_data(const Shape& shape, std::vector<float> values,
                            bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return impl_->data.size(); }

    std::span<float> data() { return impl_->data; }
    std::span<const float> data() const { return impl_->data; }
    float item() const;  // value of a one-element tensor

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<float> grad();              // allocates zeros on first use
    std::span<const float> grad() const;  // requires has_grad()
    void zero_grad();

    // Reverse pass from a scalar. Populates grad on every reachable tensor
    // with requires_grad; repeated calls accumulate until zero_grad.
    void backward();

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    TensorImpl* impl() const { return impl_.get(); }

    // Used by op kernels to attach tape nodes.
    static Tensor make_result(Shape shape, std::vector<float> data,
                              std::vector<Tensor> inputs,
                              std::function<void(Tensor&)> backward_fn);

private:
    std::shared_ptr<TensorImpl> impl_;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
};

// Disables tape recording for the current scope (inference paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Number of threads op kernels may use for independent output elements.
// Results are bitwise identical for any setting.
void set_num_threads(int n);
int num_threads();

// ---- elementwise ops ----------------------------------------------------
// add/mul accept equal shapes, or a broadcast operand b of shape C x 1 x 1
// (against N x C x H x W) or N x C x 1 x 1. Gradients sum over broadcast
// axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor one_minus(const Tensor& a);  // 1 - a

Tensor sum(const Tensor& a);                      // scalar
Tensor pick(const Tensor& a, size_t flat_index);  // scalar a[flat_index]
Tensor reshape(const Tensor& a, const Shape& new_shape);

// Throws if any element of data (and grad, if present) is not finite.
void check_finite(const Tensor& t, const std::string& what);

// Max over elements of |analytic - central difference| / (|analytic| + 1e-8)
// for the derivative of sum(w . f(x)) with fixed pseudo-random weights w.
// f may return any shape; differences are accumulated element-by-element in
// double so outputs untouched by a perturbation cancel bitwise. f is
// evaluated twice on identical input first; a mismatch (non-deterministic f)
// is rejected. Linear-in-x ops can pass a larger h (central differences are
// exact for them) to shrink float32 rounding noise in the quotient.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-3);

}  // namespace fmpx
