#pragma once

// Dense float32 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a Node. Operations on tensors that require
// gradients record their inputs and a backward closure on the output node;
// the recorded graph is the tape for one training step and is released with
// the last handle to the loss.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tsrep {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return inputs.empty(); }
    std::vector<float>& ensure_grad();
};

class Tensor {
public:
    Tensor();
    explicit Tensor(std::shared_ptr<Node> node);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value);
    static Tensor randn(Shape shape, std::mt19937_64& rng, float stddev = 1.0f,
                        bool requires_grad = false);
    static Tensor uniform(Shape shape, std::mt19937_64& rng, float lo, float hi,
                          bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return node_->data.size(); }

    std::span<const float> data() const { return node_->data; }
    // In-place access for parameter updates and test fixtures. Never use on a
    // tensor whose value was captured by a recorded operation.
    std::span<float> mutable_data() { return node_->data; }
    float item() const;
    float operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }
    bool has_grad() const { return !node_->grad.empty(); }
    // Zero-filled view when no gradient has been accumulated.
    std::vector<float> grad() const;
    std::span<float> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    // Populate d(this)/d(leaf) for every requires-grad leaf reachable from
    // this scalar. Leaf gradients accumulate across calls.
    void backward() const;

    Tensor detach() const;
    Tensor clone() const;
    const char* op_name() const { return node_->op; }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Topologically ordered view of the recorded operations reachable from a
// root. Inputs always precede the operations that consume them.
class Tape {
public:
    static Tape record(const Tensor& root);
    const std::vector<Node*>& nodes() const { return order_; }
    void backward();

private:
    std::vector<Node*> order_;
    std::shared_ptr<Node> root_;
};

bool grad_enabled();

// Disables recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Build an operation result. `backward` receives the output node, whose grad
// is populated, and accumulates into the inputs' grads. Recording happens
// only when gradients are enabled and some input requires them.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   const std::vector<Tensor>& inputs, std::function<void(Node&)> backward);

// Adds `g` into the node's gradient buffer if the node participates.
void accumulate(Node& node, std::span<const float> g);

// Throws NumericError naming `context` if any element is NaN or Inf.
void check_finite(const Tensor& t, const std::string& context);
bool all_finite(std::span<const float> values);

namespace ops {

// Elementwise binary ops. Shapes must be equal, one operand may be a scalar
// (one element), or the smaller operand's shape may be a trailing suffix of
// the larger's (leading-batch broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor relu(const Tensor& a);

// a: [..., M, K]; b: [K, N] shared across the batch, or [..., K, N] with
// identical leading extents.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Prepend `leading` extents by repetition.
Tensor expand(const Tensor& a, const Shape& leading);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
// Population variance.
Tensor variance(const Tensor& a);
Tensor variance(const Tensor& a, std::size_t axis, bool keepdim = false);

Tensor softmax(const Tensor& a);      // last axis
Tensor log_softmax(const Tensor& a);  // last axis
Tensor layer_norm(const Tensor& a, float eps = 1e-5f);  // last axis, no affine

// Rows of a rank-2 table selected by index (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);
// mask has a.numel() entries or tiles a's trailing suffix; nonzero = fill.
Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, float value);
Tensor dropout(const Tensor& a, float p, std::mt19937_64& rng);

}  // namespace ops

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return ops::div(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return ops::mul_scalar(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return ops::mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, float s) { return ops::add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return ops::neg(a); }

using TensorFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |autodiff - central difference| / max(1, |central difference|).
double grad_check(const TensorFn& f, const Tensor& x, float epsilon);

}  // namespace tsrep
