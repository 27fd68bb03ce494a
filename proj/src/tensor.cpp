#include "tsrep/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tsrep/errors.hpp"

namespace tsrep {

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<float>& Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->data.assign(1, 0.0f); }

Tensor::Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from_data({}, {value}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, float stddev, bool requires_grad) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = dist(rng);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, float lo, float hi, bool requires_grad) {
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = dist(rng);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return node_->shape[axis];
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
}

std::vector<float> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<float>(numel(), 0.0f);
    return node_->grad;
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad());
    return t;
}

Tape Tape::record(const Tensor& root) {
    Tape tape;
    tape.root_ = root.node();
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::backward() {
    if (!root_ || root_->data.size() != 1) {
        throw ContractError("backward: loss must be a scalar");
    }
    // Interior gradients are per-pass; leaves accumulate.
    for (Node* n : order_) {
        if (!n->is_leaf()) n->grad.clear();
    }
    root_->ensure_grad()[0] += 1.0f;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

void Tensor::backward() const {
    if (numel() != 1) throw ContractError("backward: loss of shape " + shape_str(shape()) + " is not a scalar");
    if (!requires_grad()) return;
    Tape::record(*this).backward();
}

Tensor make_result(const char* op, Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node());
        node->backward_fn = std::move(backward);
    }
    return Tensor(std::move(node));
}

void accumulate(Node& node, std::span<const float> g) {
    if (!node.requires_grad) return;
    auto& buf = node.ensure_grad();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

void check_finite(const Tensor& t, const std::string& context) {
    if (!all_finite(t.data())) throw NumericError("non-finite value in " + context);
}

namespace ops {

namespace {

struct Broadcast {
    Shape out;
    std::size_t na, nb, n;
};

bool is_scalar(const Tensor& t) { return t.numel() == 1 && t.rank() <= 1; }

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
    Broadcast bc{};
    bc.na = a.numel();
    bc.nb = b.numel();
    if (a.shape() == b.shape()) {
        bc.out = a.shape();
    } else if (is_scalar(b) || (is_suffix(b.shape(), a.shape()) && b.rank() > 0)) {
        bc.out = a.shape();
    } else if (is_scalar(a) || (is_suffix(a.shape(), b.shape()) && a.rank() > 0)) {
        bc.out = b.shape();
    } else {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not conform");
    }
    bc.n = shape_numel(bc.out);
    return bc;
}

// Reduce a full-size gradient onto an operand of `count` elements tiled
// across it, using double accumulators.
std::vector<float> reduce_tiled(const std::vector<float>& full, std::size_t count) {
    if (full.size() == count) return full;
    std::vector<double> acc(count, 0.0);
    for (std::size_t i = 0; i < full.size(); ++i) acc[i % count] += full[i];
    return std::vector<float>(acc.begin(), acc.end());
}

template <typename Fwd, typename Da, typename Db>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    const Broadcast bc = broadcast(a, b, name);
    const auto& x = a.data();
    const auto& y = b.data();
    std::vector<float> out(bc.n);
    for (std::size_t i = 0; i < bc.n; ++i) out[i] = fwd(x[i % bc.na], y[i % bc.nb]);
    return make_result(name, bc.out, std::move(out), {a, b}, [bc, da, db](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const auto& g = self.grad;
        if (na.requires_grad) {
            std::vector<float> ga(bc.n);
            for (std::size_t i = 0; i < bc.n; ++i)
                ga[i] = g[i] * da(na.data[i % bc.na], nb.data[i % bc.nb], self.data[i]);
            accumulate(na, reduce_tiled(ga, bc.na));
        }
        if (nb.requires_grad) {
            std::vector<float> gb(bc.n);
            for (std::size_t i = 0; i < bc.n; ++i)
                gb[i] = g[i] * db(na.data[i % bc.na], nb.data[i % bc.nb], self.data[i]);
            accumulate(nb, reduce_tiled(gb, bc.nb));
        }
    });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto& x = a.data();
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
    return make_result(name, a.shape(), std::move(out), {a}, [deriv](Node& self) {
        Node& in = *self.inputs[0];
        std::vector<float> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * deriv(in.data[i], self.data[i]);
        accumulate(in, g);
    });
}

struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
    Shape out = shape;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return out;
}

std::size_t last_dim(const Tensor& a, const char* op) {
    if (a.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1");
    return a.shape().back();
}

// C[m, n] += A[m, k] * B[k, n] with optional transposes, double-free inner
// loops ordered for contiguous access.
void gemm_nn(const float* A, const float* B, float* C, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        float* c = C + i * N;
        const float* arow = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const float av = arow[k];
            if (av == 0.0f) continue;
            const float* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[m, k] += G[m, n] * B[k, n]^T
void gemm_nt(const float* G, const float* B, float* C, std::size_t M, std::size_t N, std::size_t K) {
    for (std::size_t i = 0; i < M; ++i) {
        const float* g = G + i * N;
        float* c = C + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const float* b = B + k * N;
            float s = 0.0f;
            for (std::size_t j = 0; j < N; ++j) s += g[j] * b[j];
            c[k] += s;
        }
    }
}

// C[k, n] += A[m, k]^T * G[m, n]
void gemm_tn(const float* A, const float* G, float* C, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const float* a = A + i * K;
        const float* g = G + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const float av = a[k];
            if (av == 0.0f) continue;
            float* c = C + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * g[j];
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](float x, float y) { return x + y; }, [](float, float, float) { return 1.0f; },
        [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](float x, float y) { return x - y; }, [](float, float, float) { return 1.0f; },
        [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](float x, float y) { return x * y; }, [](float, float y, float) { return y; },
        [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (float v : b.data()) {
        if (v == 0.0f) throw DomainError("div: division by zero");
    }
    return binary(
        "div", a, b, [](float x, float y) { return x / y; }, [](float, float y, float) { return 1.0f / y; },
        [](float, float y, float out) { return -out / y; });
}

Tensor add_scalar(const Tensor& a, float s) {
    return unary(
        "add_scalar", a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& a, float s) {
    return unary(
        "mul_scalar", a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](float x) { return std::exp(x); }, [](float, float out) { return out; });
}

Tensor log(const Tensor& a) {
    for (float v : a.data()) {
        if (!(v > 0.0f)) throw DomainError("log: non-positive argument " + std::to_string(v));
    }
    return unary(
        "log", a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor sqrt(const Tensor& a) {
    for (float v : a.data()) {
        if (v < 0.0f || std::isnan(v)) throw DomainError("sqrt: negative argument " + std::to_string(v));
    }
    return unary(
        "sqrt", a, [](float x) { return std::sqrt(x); },
        [](float, float out) { return out > 0.0f ? 0.5f / out : 0.0f; });
}

Tensor tanh(const Tensor& a) {
    return unary(
        "tanh", a, [](float x) { return std::tanh(x); }, [](float, float out) { return 1.0f - out * out; });
}

Tensor square(const Tensor& a) {
    return unary(
        "square", a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor cos(const Tensor& a) {
    return unary(
        "cos", a, [](float x) { return std::cos(x); }, [](float x, float) { return -std::sin(x); });
}

Tensor sin(const Tensor& a) {
    return unary(
        "sin", a, [](float x) { return std::sin(x); }, [](float x, float) { return std::cos(x); });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary(
        "gelu", a,
        [](float x) { return static_cast<float>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2))); },
        [](float x, float) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * double(x) * x);
            return static_cast<float>(cdf + x * pdf);
        });
}

Tensor relu(const Tensor& a) {
    return unary(
        "relu", a, [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
    const std::size_t M = a.shape()[a.rank() - 2];
    const std::size_t K = a.shape().back();
    const std::size_t Kb = b.shape()[b.rank() - 2];
    const std::size_t N = b.shape().back();
    if (K != Kb) {
        throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const bool shared = b.rank() == 2;
    std::size_t batch = a.numel() / (M * K);
    if (!shared) {
        if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            throw ShapeError("matmul: batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
    } else {
        // Shared weight: fold batch into rows.
        batch = 1;
    }
    const std::size_t rows = shared ? a.numel() / K : M;
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<float> out(shape_numel(out_shape), 0.0f);
    const float* A = a.data().data();
    const float* B = b.data().data();
    for (std::size_t p = 0; p < batch; ++p) {
        gemm_nn(A + p * rows * K, B + (shared ? 0 : p * K * N), out.data() + p * rows * N, rows, K, N);
    }
    return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                       [batch, rows, K, N, shared](Node& self) {
                           Node& na = *self.inputs[0];
                           Node& nb = *self.inputs[1];
                           const float* G = self.grad.data();
                           if (na.requires_grad) {
                               std::vector<float> ga(na.data.size(), 0.0f);
                               for (std::size_t p = 0; p < batch; ++p)
                                   gemm_nt(G + p * rows * N, nb.data.data() + (shared ? 0 : p * K * N),
                                           ga.data() + p * rows * K, rows, N, K);
                               accumulate(na, ga);
                           }
                           if (nb.requires_grad) {
                               std::vector<float> gb(nb.data.size(), 0.0f);
                               for (std::size_t p = 0; p < batch; ++p)
                                   gemm_tn(na.data.data() + p * rows * K, G + p * rows * N,
                                           gb.data() + (shared ? 0 : p * K * N), rows, K, N);
                               accumulate(nb, gb);
                           }
                       });
}

namespace {

// Source flat index for each destination element of a two-axis swap.
std::vector<std::size_t> swap_index(const Shape& in, std::size_t a0, std::size_t a1) {
    const std::size_t r = in.size();
    Shape out = in;
    std::swap(out[a0], out[a1]);
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    std::vector<std::size_t> stride = in_stride;
    std::swap(stride[a0], stride[a1]);
    const std::size_t n = shape_numel(in);
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n; ++i) {
        src[i] = offset;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            offset += stride[d];
            if (idx[d] < out[d]) break;
            offset -= stride[d] * out[d];
            idx[d] = 0;
        }
    }
    return src;
}

}  // namespace

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
    if (axis0 >= a.rank() || axis1 >= a.rank()) {
        throw ShapeError("transpose: axes out of range for " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    std::swap(out_shape[axis0], out_shape[axis1]);
    if (axis0 == axis1) return reshape(a, out_shape);
    auto src = std::make_shared<std::vector<std::size_t>>(swap_index(a.shape(), axis0, axis1));
    std::vector<float> out(a.numel());
    const auto& x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*src)[i]];
    return make_result("transpose", std::move(out_shape), std::move(out), {a}, [src](Node& self) {
        std::vector<float> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[(*src)[i]] = self.grad[i];
        accumulate(*self.inputs[0], g);
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<float> out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {a},
                       [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t end) {
    const AxisSplit s = split_axis(a.shape(), axis, "slice");
    if (start > end || end > s.n) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = end - start;
    const std::size_t len = end - start;
    std::vector<float> out(s.outer * len * s.inner);
    const auto& x = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner), len * s.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
    return make_result("slice", std::move(out_shape), std::move(out), {a}, [s, start, len](Node& self) {
        std::vector<float> g(self.inputs[0]->data.size(), 0.0f);
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(self.grad.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                        g.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner));
        accumulate(*self.inputs[0], g);
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    std::vector<std::size_t> lens;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
        if (!ok) throw ShapeError("concat: " + shape_str(s) + " does not conform to " + shape_str(ref));
        lens.push_back(s[axis]);
        total += s[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    AxisSplit s = split_axis(out_shape, axis, "concat");
    std::vector<float> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& x = parts[p].data();
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * lens[p] * s.inner), lens[p] * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * s.inner));
        offset += lens[p];
    }
    return make_result("concat", std::move(out_shape), std::move(out), parts, [s, lens, total](Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < lens.size(); ++p) {
            Node& in = *self.inputs[p];
            if (in.requires_grad) {
                std::vector<float> g(in.data.size());
                for (std::size_t o = 0; o < s.outer; ++o)
                    std::copy_n(self.grad.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * s.inner),
                                lens[p] * s.inner, g.begin() + static_cast<std::ptrdiff_t>(o * lens[p] * s.inner));
                accumulate(in, g);
            }
            offset += lens[p];
        }
    });
}

Tensor expand(const Tensor& a, const Shape& leading) {
    Shape out_shape = leading;
    out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
    const std::size_t reps = shape_numel(leading);
    const std::size_t n = a.numel();
    std::vector<float> out(reps * n);
    for (std::size_t r = 0; r < reps; ++r) std::copy(a.data().begin(), a.data().end(), out.begin() + r * n);
    return make_result("expand", std::move(out_shape), std::move(out), {a},
                       [n](Node& self) { accumulate(*self.inputs[0], reduce_tiled(self.grad, n)); });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    return make_result("sum", {}, {static_cast<float>(acc)}, {a}, [](Node& self) {
        std::vector<float> g(self.inputs[0]->data.size(), self.grad[0]);
        accumulate(*self.inputs[0], g);
    });
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
    const AxisSplit s = split_axis(a.shape(), axis, "sum");
    std::vector<double> acc(s.outer * s.inner, 0.0);
    const auto& x = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.n; ++k) {
            const float* row = x.data() + (o * s.n + k) * s.inner;
            double* dst = acc.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
        }
    std::vector<float> out(acc.begin(), acc.end());
    return make_result("sum_axis", reduced_shape(a.shape(), axis, keepdim), std::move(out), {a}, [s](Node& self) {
        std::vector<float> g(self.inputs[0]->data.size());
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.n; ++k)
                std::copy_n(self.grad.begin() + static_cast<std::ptrdiff_t>(o * s.inner), s.inner,
                            g.begin() + static_cast<std::ptrdiff_t>((o * s.n + k) * s.inner));
        accumulate(*self.inputs[0], g);
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return mul_scalar(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
    const std::size_t n = a.rank() > axis ? a.shape()[axis] : 0;
    if (n == 0) throw ShapeError("mean: empty axis");
    return mul_scalar(sum(a, axis, keepdim), 1.0f / static_cast<float>(n));
}

Tensor variance(const Tensor& a) {
    const std::size_t n = a.numel();
    if (n == 0) throw ShapeError("variance: empty tensor");
    double m = 0.0;
    for (float v : a.data()) m += v;
    m /= static_cast<double>(n);
    double acc = 0.0;
    for (float v : a.data()) acc += (v - m) * (v - m);
    const float mean_f = static_cast<float>(m);
    return make_result("variance", {}, {static_cast<float>(acc / static_cast<double>(n))}, {a},
                       [mean_f, n](Node& self) {
                           Node& in = *self.inputs[0];
                           std::vector<float> g(n);
                           const float scale = 2.0f * self.grad[0] / static_cast<float>(n);
                           for (std::size_t i = 0; i < n; ++i) g[i] = scale * (in.data[i] - mean_f);
                           accumulate(in, g);
                       });
}

Tensor variance(const Tensor& a, std::size_t axis, bool keepdim) {
    const AxisSplit s = split_axis(a.shape(), axis, "variance");
    if (s.n == 0) throw ShapeError("variance: empty axis");
    const auto& x = a.data();
    auto means = std::make_shared<std::vector<float>>(s.outer * s.inner);
    std::vector<float> out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            double m = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) m += x[(o * s.n + k) * s.inner + i];
            m /= static_cast<double>(s.n);
            double acc = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) {
                const double d = x[(o * s.n + k) * s.inner + i] - m;
                acc += d * d;
            }
            (*means)[o * s.inner + i] = static_cast<float>(m);
            out[o * s.inner + i] = static_cast<float>(acc / static_cast<double>(s.n));
        }
    return make_result("variance_axis", reduced_shape(a.shape(), axis, keepdim), std::move(out), {a},
                       [s, means](Node& self) {
                           Node& in = *self.inputs[0];
                           std::vector<float> g(in.data.size());
                           const float scale = 2.0f / static_cast<float>(s.n);
                           for (std::size_t o = 0; o < s.outer; ++o)
                               for (std::size_t k = 0; k < s.n; ++k)
                                   for (std::size_t i = 0; i < s.inner; ++i) {
                                       const std::size_t r = o * s.inner + i;
                                       const std::size_t j = (o * s.n + k) * s.inner + i;
                                       g[j] = scale * self.grad[r] * (in.data[j] - (*means)[r]);
                                   }
                           accumulate(in, g);
                       });
}

Tensor softmax(const Tensor& a) {
    const std::size_t d = last_dim(a, "softmax");
    const std::size_t rows = a.numel() / d;
    std::vector<float> out(a.numel());
    const auto& x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = x.data() + r * d;
        float* o = out.data() + r * d;
        const float mx = *std::max_element(in, in + d);
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            o[i] = std::exp(in[i] - mx);
            z += o[i];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (std::size_t i = 0; i < d; ++i) o[i] *= inv;
    }
    return make_result("softmax", a.shape(), std::move(out), {a}, [d, rows](Node& self) {
        std::vector<float> g(self.grad.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.data.data() + r * d;
            const float* gy = self.grad.data() + r * d;
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += double(gy[i]) * y[i];
            for (std::size_t i = 0; i < d; ++i) g[r * d + i] = y[i] * (gy[i] - static_cast<float>(dot));
        }
        accumulate(*self.inputs[0], g);
    });
}

Tensor log_softmax(const Tensor& a) {
    const std::size_t d = last_dim(a, "log_softmax");
    const std::size_t rows = a.numel() / d;
    std::vector<float> out(a.numel());
    const auto& x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = x.data() + r * d;
        float* o = out.data() + r * d;
        const float mx = *std::max_element(in, in + d);
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i) z += std::exp(double(in[i]) - mx);
        const float lse = mx + static_cast<float>(std::log(z));
        for (std::size_t i = 0; i < d; ++i) o[i] = in[i] - lse;
    }
    return make_result("log_softmax", a.shape(), std::move(out), {a}, [d, rows](Node& self) {
        std::vector<float> g(self.grad.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.data.data() + r * d;
            const float* gy = self.grad.data() + r * d;
            double total = 0.0;
            for (std::size_t i = 0; i < d; ++i) total += gy[i];
            for (std::size_t i = 0; i < d; ++i)
                g[r * d + i] = gy[i] - std::exp(y[i]) * static_cast<float>(total);
        }
        accumulate(*self.inputs[0], g);
    });
}

Tensor layer_norm(const Tensor& a, float eps) {
    const std::size_t d = last_dim(a, "layer_norm");
    const std::size_t rows = a.numel() / d;
    std::vector<float> out(a.numel());
    auto inv_std = std::make_shared<std::vector<float>>(rows);
    const auto& x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = x.data() + r * d;
        double m = 0.0;
        for (std::size_t i = 0; i < d; ++i) m += in[i];
        m /= static_cast<double>(d);
        double v = 0.0;
        for (std::size_t i = 0; i < d; ++i) v += (in[i] - m) * (in[i] - m);
        v /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(v + eps);
        (*inv_std)[r] = static_cast<float>(is);
        for (std::size_t i = 0; i < d; ++i) out[r * d + i] = static_cast<float>((in[i] - m) * is);
    }
    return make_result("layer_norm", a.shape(), std::move(out), {a}, [d, rows, inv_std](Node& self) {
        std::vector<float> g(self.grad.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.data.data() + r * d;
            const float* gy = self.grad.data() + r * d;
            double mg = 0.0, mgy = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                mg += gy[i];
                mgy += double(gy[i]) * y[i];
            }
            mg /= static_cast<double>(d);
            mgy /= static_cast<double>(d);
            const float is = (*inv_std)[r];
            for (std::size_t i = 0; i < d; ++i)
                g[r * d + i] = is * static_cast<float>(gy[i] - mg - y[i] * mgy);
        }
        accumulate(*self.inputs[0], g);
    });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t V = table.shape()[0];
    const std::size_t D = table.shape()[1];
    auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
    std::vector<float> out(idx->size() * D);
    for (std::size_t r = 0; r < idx->size(); ++r) {
        if ((*idx)[r] >= V) throw ShapeError("gather_rows: index " + std::to_string((*idx)[r]) + " >= " + std::to_string(V));
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>((*idx)[r] * D), D,
                    out.begin() + static_cast<std::ptrdiff_t>(r * D));
    }
    return make_result("gather_rows", {idx->size(), D}, std::move(out), {table}, [idx, D](Node& self) {
        Node& in = *self.inputs[0];
        std::vector<double> acc(in.data.size(), 0.0);
        for (std::size_t r = 0; r < idx->size(); ++r)
            for (std::size_t j = 0; j < D; ++j) acc[(*idx)[r] * D + j] += self.grad[r * D + j];
        accumulate(in, std::vector<float>(acc.begin(), acc.end()));
    });
}

Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, float value) {
    const std::size_t n = a.numel();
    const std::size_t nm = mask.size();
    if (nm == 0 || n % nm != 0) {
        throw ShapeError("masked_fill: mask of " + std::to_string(nm) + " entries does not tile " + shape_str(a.shape()));
    }
    auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
    std::vector<float> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < n; ++i)
        if ((*m)[i % nm]) out[i] = value;
    return make_result("masked_fill", a.shape(), std::move(out), {a}, [m](Node& self) {
        std::vector<float> g(self.grad);
        const std::size_t nm = m->size();
        for (std::size_t i = 0; i < g.size(); ++i)
            if ((*m)[i % nm]) g[i] = 0.0f;
        accumulate(*self.inputs[0], g);
    });
}

Tensor dropout(const Tensor& a, float p, std::mt19937_64& rng) {
    if (p < 0.0f || p >= 1.0f) throw ContractError("dropout: p must be in [0, 1)");
    if (p == 0.0f) return a;
    auto keep = std::make_shared<std::vector<float>>(a.numel());
    std::bernoulli_distribution bern(1.0 - p);
    const float scale = 1.0f / (1.0f - p);
    for (auto& k : *keep) k = bern(rng) ? scale : 0.0f;
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * (*keep)[i];
    return make_result("dropout", a.shape(), std::move(out), {a}, [keep](Node& self) {
        std::vector<float> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * (*keep)[i];
        accumulate(*self.inputs[0], g);
    });
}

}  // namespace ops

double grad_check(const TensorFn& f, const Tensor& x, float epsilon) {
    if (!(epsilon > 0.0f)) throw ContractError("grad_check: epsilon must be positive");
    Tensor leaf = x.detach();
    leaf.set_requires_grad(true);
    Tensor y = f(leaf);
    if (y.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    y.backward();
    const std::vector<float> analytic = leaf.grad();

    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
        Tensor probe = x.detach();
        const float base = probe.data()[i];
        const float hi = base + epsilon;
        const float lo = base - epsilon;
        probe.mutable_data()[i] = hi;
        const double f_hi = f(probe).item();
        probe.mutable_data()[i] = lo;
        const double f_lo = f(probe).item();
        // Use the realized float step so input rounding does not bias the slope.
        const double fd = (f_hi - f_lo) / (double(hi) - double(lo));
        const double err = std::abs(double(analytic[i]) - fd) / std::max(1.0, std::abs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace tsrep
