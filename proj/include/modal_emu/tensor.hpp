#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace modal_emu {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's precondition (not a shape issue).
class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

/// Raised on NaN/Inf where finite values are required.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;
    const char* op = "leaf";

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode differentiation.
///
/// A Tensor is a handle: copies share storage and graph position, the same
/// way parameters are shared between the inference and emulation passes.
/// Use clone() for an independent copy of the values.
class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const { return node_->data.size(); }

    std::span<double> data() { return node_->data; }
    std::span<const double> data() const { return node_->data; }
    const std::vector<double>& values() const { return node_->data; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient values; zeros if nothing has been accumulated yet.
    std::span<const double> grad() const;
    std::vector<double>& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();

    /// Deep copy of the values, detached from any graph.
    Tensor clone() const;
    /// Same values (shared), no graph history, no grad tracking.
    Tensor detach() const;

    const char* op_name() const { return node_->op; }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    // Internal: used by operation implementations.
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<detail::Node> node_;
};

/// Whether new operations record a differentiation graph on this thread.
bool grad_enabled();

class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

/// When on, every operation checks its output for NaN/Inf and throws
/// NumericError naming the operation.
void set_check_finite(bool on);
bool check_finite_enabled();

/// Accumulates dLoss/dT into every requires_grad leaf reachable from loss.
/// Non-leaf gradients are reset on each call so repeated calls over shared
/// sub-graphs never double count.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// s must hold a single element; returns s * x.
Tensor scalar_mul(const Tensor& s, const Tensor& x);
/// x[N x D] + bias[D] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);

/// Softmax over the last axis, max-subtracted.
Tensor softmax_rows(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Euclidean norm of the flattened tensor; subgradient 0 at the origin.
Tensor l2_norm(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// out.flat[i] = x.flat[index[i]]; backward scatter-adds.
Tensor gather(const Tensor& x, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> index);

/// Cross-correlation of x[C x H x W] with kernels[C' x C x kh x kw]; bias[C'] optional.
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding);
/// Non-overlapping max pooling with window = stride = factor.
Tensor maxpool2d(const Tensor& x, std::size_t factor);

/// Inverted dropout. Identity (same handle) when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64* rng);

}  // namespace modal_emu
