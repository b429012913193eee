#include "fmpx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "fmpx/rng.hpp"

namespace fmpx {

namespace {

thread_local bool g_grad_enabled = true;
int g_num_threads = 1;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<float> data) {
    if (shape.empty() || shape.size() > 4)
        throw std::invalid_argument("tensor rank must be 1..4, got " + shape_str(shape));
    for (int e : shape)
        if (e <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(shape));
    if (data.size() != shape_numel(shape))
        throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int e : s) n *= static_cast<size_t>(e);
    return n;
}

Tensor Tensor::make_result(Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                           std::function<void(Tensor&)> backward_fn) {
    Tensor t(new_impl(std::move(shape), std::move(data)));
    if (!backward_fn) return t;
    bool needs = false;
    if (g_grad_enabled)
        for (const Tensor& in : inputs)
            if (in.requires_grad()) needs = true;
    if (needs) {
        t.impl_->requires_grad = true;
        auto node = std::make_shared<GradNode>();
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(backward_fn);
        t.impl_->node = std::move(node);
    }
    return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    Tensor t(new_impl(shape, std::vector<float>(shape_numel(shape), 0.0f)));
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0f); }

Tensor Tensor::full(const Shape& shape, float value) {
    return Tensor(new_impl(shape, std::vector<float>(shape_numel(shape), value)));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> values, bool requires_grad) {
    Tensor t(new_impl(shape, std::move(values)));
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

float Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

std::span<float> Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

std::span<const float> Tensor::grad() const {
    if (impl_->grad.empty()) throw std::runtime_error("grad read before backward");
    return impl_->grad;
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::backward() {
    if (numel() != 1)
        throw std::invalid_argument("backward() needs a scalar, got shape " + shape_str(shape()));

    // Post-order DFS over the tape, then replay in reverse. The graph is
    // acyclic by construction (ops only consume already-built tensors).
    std::vector<Tensor> order;
    std::unordered_set<TensorImpl*> seen;
    struct Frame {
        Tensor t;
        size_t next_child = 0;
    };
    std::vector<Frame> stack;
    if (seen.insert(impl_.get()).second) stack.push_back({*this});
    while (!stack.empty()) {
        Frame& f = stack.back();
        GradNode* node = f.t.impl()->node.get();
        const size_t n_children = node ? node->inputs.size() : 0;
        if (f.next_child < n_children) {
            Tensor child = node->inputs[f.next_child++];
            if (seen.insert(child.impl()).second) stack.push_back({child});
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }

    grad()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor& t = *it;
        if (t.impl()->node && t.has_grad()) t.impl()->node->backward_fn(t);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }
int num_threads() { return g_num_threads; }

// ---- broadcast plumbing ---------------------------------------------------

namespace {

enum class Bcast { Same, ChannelOverNCHW, SampleChannelOverNCHW };

Bcast classify_broadcast(const Shape& a, const Shape& b) {
    if (a == b) return Bcast::Same;
    if (a.size() == 4) {
        if (b.size() == 3 && b[0] == a[1] && b[1] == 1 && b[2] == 1)
            return Bcast::ChannelOverNCHW;
        if (b.size() == 4 && b[0] == a[0] && b[1] == a[1] && b[2] == 1 && b[3] == 1)
            return Bcast::SampleChannelOverNCHW;
    }
    throw std::invalid_argument("shapes not compatible for elementwise op: " + shape_str(a) +
                                " vs " + shape_str(b));
}

// Calls fn(ai, bi) for every output element, ai indexing a and bi indexing b.
template <typename Fn>
void for_broadcast(const Shape& a, Bcast kind, Fn&& fn) {
    const size_t n = shape_numel(a);
    if (kind == Bcast::Same) {
        for (size_t i = 0; i < n; ++i) fn(i, i);
        return;
    }
    const size_t batch = static_cast<size_t>(a[0]);
    const size_t channels = static_cast<size_t>(a[1]);
    const size_t spatial = static_cast<size_t>(a[2]) * static_cast<size_t>(a[3]);
    size_t i = 0;
    for (size_t nidx = 0; nidx < batch; ++nidx)
        for (size_t c = 0; c < channels; ++c) {
            const size_t bi = kind == Bcast::ChannelOverNCHW ? c : nidx * channels + c;
            for (size_t s = 0; s < spatial; ++s, ++i) fn(i, bi);
        }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Bcast kind = classify_broadcast(a.shape(), b.shape());
    std::vector<float> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for_broadcast(a.shape(), kind, [&](size_t i, size_t bi) { out[i] = ad[i] + bd[bi]; });
    Tensor av = a, bv = b;
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [av, bv, kind](Tensor& o) mutable {
        auto g = o.grad();
        if (av.requires_grad()) {
            auto ga = av.grad();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (bv.requires_grad()) {
            auto gb = bv.grad();
            for_broadcast(av.shape(), kind, [&](size_t i, size_t bi) { gb[bi] += g[i]; });
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Bcast kind = classify_broadcast(a.shape(), b.shape());
    std::vector<float> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for_broadcast(a.shape(), kind, [&](size_t i, size_t bi) { out[i] = ad[i] * bd[bi]; });
    Tensor av = a, bv = b;
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [av, bv, kind](Tensor& o) mutable {
        auto g = o.grad();
        auto ad2 = av.data();
        auto bd2 = bv.data();
        if (av.requires_grad()) {
            auto ga = av.grad();
            for_broadcast(av.shape(), kind, [&](size_t i, size_t bi) { ga[i] += g[i] * bd2[bi]; });
        }
        if (bv.requires_grad()) {
            auto gb = bv.grad();
            for_broadcast(av.shape(), kind, [&](size_t i, size_t bi) { gb[bi] += g[i] * ad2[i]; });
        }
    });
}

Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.numel());
    auto ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
    Tensor av = a;
    return Tensor::make_result(a.shape(), std::move(out), {a}, [av, s](Tensor& o) mutable {
        if (!av.requires_grad()) return;
        auto g = o.grad();
        auto ga = av.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
    });
}

Tensor one_minus(const Tensor& a) {
    std::vector<float> out(a.numel());
    auto ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0f - ad[i];
    Tensor av = a;
    return Tensor::make_result(a.shape(), std::move(out), {a}, [av](Tensor& o) mutable {
        if (!av.requires_grad()) return;
        auto g = o.grad();
        auto ga = av.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] -= g[i];
    });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;  // fixed-order accumulation, double to tame cancellation
    for (float v : a.data()) acc += v;
    Tensor av = a;
    return Tensor::make_result({1}, {static_cast<float>(acc)}, {a}, [av](Tensor& o) mutable {
        if (!av.requires_grad()) return;
        const float g = o.grad()[0];
        auto ga = av.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Tensor pick(const Tensor& a, size_t flat_index) {
    if (flat_index >= a.numel())
        throw std::invalid_argument("pick index " + std::to_string(flat_index) + " out of range");
    Tensor av = a;
    return Tensor::make_result({1}, {a.data()[flat_index]}, {a}, [av, flat_index](Tensor& o) mutable {
        if (!av.requires_grad()) return;
        av.grad()[flat_index] += o.grad()[0];
    });
}

Tensor reshape(const Tensor& a, const Shape& new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " +
                                    shape_str(new_shape) + " changes element count");
    std::vector<float> out(a.data().begin(), a.data().end());
    Tensor av = a;
    return Tensor::make_result(new_shape, std::move(out), {a}, [av](Tensor& o) mutable {
        if (!av.requires_grad()) return;
        auto g = o.grad();
        auto ga = av.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
}

void check_finite(const Tensor& t, const std::string& what) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw std::runtime_error("non-finite value in " + what);
    if (t.has_grad())
        for (float v : t.impl()->grad)
            if (!std::isfinite(v)) throw std::runtime_error("non-finite gradient in " + what);
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h) {
    if (h <= 0) throw std::invalid_argument("finite_difference_check: h must be positive");

    // Determinism probe: two forward passes on the same input must agree
    // bitwise, otherwise central differences are meaningless.
    Shape out_shape;
    {
        NoGradGuard ng;
        Tensor y1 = f(x);
        Tensor y2 = f(x);
        if (y1.shape() != y2.shape())
            throw std::runtime_error("finite_difference_check: f is not deterministic");
        auto d1 = y1.data();
        auto d2 = y2.data();
        for (size_t i = 0; i < d1.size(); ++i)
            if (d1[i] != d2[i])
                throw std::runtime_error("finite_difference_check: f is not deterministic");
        out_shape = y1.shape();
    }

    // Fixed reduction weights; misplaced gradient entries can't cancel the
    // way they would under a plain sum.
    Rng wrng(0x5eedULL);
    std::vector<float> w(shape_numel(out_shape));
    for (auto& v : w) v = wrng.uniform(0.25f, 1.75f);

    Tensor leaf = Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
    Tensor y = f(leaf);
    Tensor loss = sum(mul(y, Tensor::from_data(out_shape, w)));
    std::vector<float> analytic(x.numel(), 0.0f);
    if (loss.requires_grad()) {
        loss.backward();
        if (leaf.has_grad()) {
            auto g = leaf.grad();
            analytic.assign(g.begin(), g.end());
        }
    }

    std::vector<float> base(x.data().begin(), x.data().end());
    double worst = 0.0;
    for (size_t i = 0; i < base.size(); ++i) {
        NoGradGuard ng;
        const double orig = base[i];
        std::vector<float> probe = base;
        probe[i] = static_cast<float>(orig + h);
        const double stepped_up = probe[i];
        Tensor yp = f(Tensor::from_data(x.shape(), probe));
        probe[i] = static_cast<float>(orig - h);
        const double stepped_down = probe[i];
        Tensor ym = f(Tensor::from_data(x.shape(), probe));
        auto pd = yp.data();
        auto md = ym.data();
        double diff = 0.0;  // identical outputs cancel exactly here
        for (size_t j = 0; j < pd.size(); ++j)
            diff += static_cast<double>(w[j]) *
                    (static_cast<double>(pd[j]) - static_cast<double>(md[j]));
        const double fd = diff / (stepped_up - stepped_down);  // actual float32 step
        if (!std::isfinite(fd) || !std::isfinite(static_cast<double>(analytic[i])))
            throw std::runtime_error("finite_difference_check: non-finite value at element " +
                                     std::to_string(i));
        const double err = std::abs(static_cast<double>(analytic[i]) - fd) /
                           (std::abs(static_cast<double>(analytic[i])) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace fmpx
