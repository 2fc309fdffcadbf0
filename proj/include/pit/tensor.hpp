#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pit {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_size(const Shape& shape);

namespace detail {

// One node of the define-by-run graph. The graph is rebuilt on every forward
// pass: each operation records its inputs and a closure that propagates the
// output gradient into them. backward() walks the recorded nodes once, in
// reverse topological order, then drops the edges so intermediates free up
// while parameters keep their accumulated grads.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::string label;

    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad();
};

} // namespace detail

// Dense n-d double tensor with reverse-mode autodiff. Value-semantics handle
// to a shared node; copying a Tensor aliases the same storage. Tensors are
// immutable after construction except for grad accumulation and explicit
// in-place parameter updates between training steps (raw()).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t rank() const;
    std::int64_t size() const;
    // axis may be negative (from the end)
    std::int64_t dim(std::int64_t axis) const;

    std::span<const double> values() const;
    // Mutable storage access, for parameter init and optimizer updates only.
    std::span<double> raw();
    // Scalar convenience accessor; throws ShapeError on non-scalars.
    double value() const;

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_raw();
    void zero_grad();

    // Runs reverse-mode differentiation from this (scalar) tensor. Every
    // reachable requires_grad tensor receives accumulated gradients. Graph
    // edges are released afterwards; a second backward() on the same graph
    // is an error.
    void backward() const;

    Tensor& set_label(std::string label);
    const std::string& label() const;

    // Detached deep copy (no graph history, shares nothing).
    Tensor clone() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Disables graph recording for the current thread while alive. Used for
// validation and autoregressive decoding, where gradients are not needed.
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

// ---- operations ----
//
// add/sub/mul broadcast in the numpy style restricted to what the model
// needs: shapes are right-aligned and each dimension pair must match or be 1
// on one side (covers bias add, the causal mask, scalar gates and per-window
// normalization columns).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);

// Batched matrix product: a [..., m, k] x b [..., k, n]; leading dimensions
// broadcast. Gradients dA = dC.B^T, dB = A^T.dC (summed over broadcasts).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
// Natural log; input must be strictly positive.
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
// Subgradient at 0 is defined as 0 (the MASE loss needs |.| at exact zeros).
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Numerically stable softmax along `axis` (max-subtraction). Rows sum to 1;
// non-finite input is an error.
Tensor softmax(const Tensor& a, std::int64_t axis);

// Normalizes over the last axis to zero mean / unit variance, then applies
// gain and bias (both shaped [last_dim]). Gradient flows to x, gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t start, std::int64_t length);
// Swaps two axes (materialized copy).
Tensor transpose(const Tensor& a, std::int64_t axis0, std::int64_t axis1);
Tensor reshape(const Tensor& a, Shape shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

bool all_finite(std::span<const double> values);

} // namespace pit
