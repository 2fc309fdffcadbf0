#include "pit/tensor.hpp"

#include "pit/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace pit {

namespace {

thread_local bool g_grad_enabled = true;

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

// Output node of an operation. Gradients are recorded only while grad mode
// is enabled and at least one input needs them.
NodePtr make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                    std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    for (const auto& p : parents) {
        needs = needs || p->requires_grad;
    }
    if (needs && g_grad_enabled) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return node;
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
    const std::int64_t n = axis < 0 ? axis + rank : axis;
    if (n < 0 || n >= rank) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    }
    return n;
}

// ---- broadcasting ----

struct BinPlan {
    Shape out_shape;
    std::vector<std::int64_t> a_strides; // per out axis, 0 where broadcast
    std::vector<std::int64_t> b_strides;
    std::int64_t total = 0;
    bool same_shape = false;
    // When b (resp. a) is a dense trailing block of the output, elements map
    // as out[i] <-> small[i % block]; -1 when the fast path does not apply.
    std::int64_t b_block = -1;
    std::int64_t a_block = -1;
};

BinPlan make_bin_plan(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    BinPlan plan;
    plan.out_shape.assign(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        }
        plan.out_shape[rank - 1 - i] = std::max(da, db);
    }
    plan.total = shape_size(plan.out_shape);
    plan.same_shape = (a == b);

    auto dense_strides = [](const Shape& s) {
        std::vector<std::int64_t> st(s.size(), 0);
        std::int64_t acc = 1;
        for (std::size_t i = s.size(); i-- > 0;) {
            st[i] = acc;
            acc *= s[i];
        }
        return st;
    };
    const auto a_dense = dense_strides(a);
    const auto b_dense = dense_strides(b);
    plan.a_strides.assign(rank, 0);
    plan.b_strides.assign(rank, 0);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t out_ax = rank - 1 - i;
        if (i < a.size() && a[a.size() - 1 - i] == plan.out_shape[out_ax]) {
            plan.a_strides[out_ax] = a_dense[a.size() - 1 - i];
        }
        if (i < b.size() && b[b.size() - 1 - i] == plan.out_shape[out_ax]) {
            plan.b_strides[out_ax] = b_dense[b.size() - 1 - i];
        }
    }

    // trailing-block fast paths (bias add, causal mask, scalars)
    auto is_trailing_block = [&](const Shape& small) {
        if (shape_size(small) == 1) {
            return true;
        }
        if (small.size() > rank) {
            return false;
        }
        for (std::size_t i = 0; i < small.size(); ++i) {
            if (small[small.size() - 1 - i] != plan.out_shape[rank - 1 - i]) {
                return false;
            }
        }
        return true;
    };
    auto fills_output = [&](const Shape& s) { return s.size() == rank && s == plan.out_shape; };
    if (fills_output(a) && is_trailing_block(b)) {
        plan.b_block = shape_size(b);
    } else if (fills_output(b) && is_trailing_block(a)) {
        plan.a_block = shape_size(a);
    }
    return plan;
}

// Walks all output positions of a broadcast pair, yielding the flat output
// index plus the mapped input offsets.
template <class F>
void for_each_bin(const BinPlan& plan, F&& fn) {
    if (plan.total == 0) {
        return;
    }
    const std::size_t rank = plan.out_shape.size();
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t ao = 0;
    std::int64_t bo = 0;
    for (std::int64_t t = 0;;) {
        fn(t, ao, bo);
        if (++t == plan.total) {
            break;
        }
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            ao += plan.a_strides[ax];
            bo += plan.b_strides[ax];
            if (idx[ax] < plan.out_shape[ax]) {
                break;
            }
            ao -= plan.a_strides[ax] * plan.out_shape[ax];
            bo -= plan.b_strides[ax] * plan.out_shape[ax];
            idx[ax] = 0;
        }
    }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary_op(const Tensor& ta, const Tensor& tb, BinOp op, const char* name) {
    const NodePtr a = ta.node();
    const NodePtr b = tb.node();
    BinPlan plan = make_bin_plan(a->shape, b->shape, name);
    std::vector<double> out(static_cast<std::size_t>(plan.total));
    const auto* pa = a->data.data();
    const auto* pb = b->data.data();

    auto apply = [op](double x, double y) {
        switch (op) {
        case BinOp::Add: return x + y;
        case BinOp::Sub: return x - y;
        default: return x * y;
        }
    };

    if (plan.same_shape) {
        for (std::int64_t i = 0; i < plan.total; ++i) {
            out[i] = apply(pa[i], pb[i]);
        }
    } else if (plan.b_block >= 0) {
        const std::int64_t bs = plan.b_block;
        for (std::int64_t i = 0; i < plan.total; ++i) {
            out[i] = apply(pa[i], pb[i % bs]);
        }
    } else if (plan.a_block >= 0) {
        const std::int64_t as = plan.a_block;
        for (std::int64_t i = 0; i < plan.total; ++i) {
            out[i] = apply(pa[i % as], pb[i]);
        }
    } else {
        for_each_bin(plan, [&](std::int64_t t, std::int64_t ao, std::int64_t bo) {
            out[t] = apply(pa[ao], pb[bo]);
        });
    }

    Shape out_shape = plan.same_shape ? a->shape : plan.out_shape;
    auto backward = [plan = std::move(plan), op](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        TensorNode& nb = *self.parents[1];
        const auto* g = self.grad.data();
        const bool wa = na.requires_grad;
        const bool wb = nb.requires_grad;
        if (wa) {
            na.ensure_grad();
        }
        if (wb) {
            nb.ensure_grad();
        }
        auto accum = [&](std::int64_t t, std::int64_t ao, std::int64_t bo) {
            const double gt = g[t];
            switch (op) {
            case BinOp::Add:
                if (wa) na.grad[ao] += gt;
                if (wb) nb.grad[bo] += gt;
                break;
            case BinOp::Sub:
                if (wa) na.grad[ao] += gt;
                if (wb) nb.grad[bo] -= gt;
                break;
            case BinOp::Mul:
                if (wa) na.grad[ao] += gt * nb.data[bo];
                if (wb) nb.grad[bo] += gt * na.data[ao];
                break;
            }
        };
        if (plan.same_shape) {
            for (std::int64_t i = 0; i < plan.total; ++i) {
                accum(i, i, i);
            }
        } else if (plan.b_block >= 0) {
            for (std::int64_t i = 0; i < plan.total; ++i) {
                accum(i, i, i % plan.b_block);
            }
        } else if (plan.a_block >= 0) {
            for (std::int64_t i = 0; i < plan.total; ++i) {
                accum(i, i % plan.a_block, i);
            }
        } else {
            for_each_bin(plan, accum);
        }
    };
    return Tensor(make_result(std::move(out_shape), std::move(out), {a, b}, std::move(backward)));
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& ta, Fwd&& fwd, Bwd&& bwd) {
    const NodePtr a = ta.node();
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(a->data[i]);
    }
    auto backward = [bwd](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            na.grad[i] += self.grad[i] * bwd(na.data[i], self.data[i]);
        }
    };
    return Tensor(make_result(a->shape, std::move(out), {a}, std::move(backward)));
}

} // namespace

namespace detail {

void TensorNode::ensure_grad() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), 0.0);
    }
}

} // namespace detail

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? "x" : "");
    }
    os << "]";
    return os.str();
}

std::int64_t shape_size(const Shape& shape) {
    std::int64_t total = 1;
    for (const auto d : shape) {
        if (d <= 0) {
            throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
        }
        total *= d;
    }
    return total;
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                            requires_grad));
}

Tensor Tensor::ones(Shape shape) {
    return full(std::move(shape), 1.0);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_size(shape);
    return Tensor(make_leaf(std::move(shape),
                            std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf({1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(node_->shape.size()); }

std::int64_t Tensor::size() const { return node_->size(); }

std::int64_t Tensor::dim(std::int64_t axis) const {
    return node_->shape[normalize_axis(axis, rank(), "dim")];
}

std::span<const double> Tensor::values() const { return node_->data; }

std::span<double> Tensor::raw() { return node_->data; }

double Tensor::value() const {
    if (size() != 1) {
        throw ShapeError("value(): tensor has shape " + shape_str(shape()));
    }
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (node_->grad.empty()) {
        throw NumericError("grad(): no gradient populated for tensor " +
                           (node_->label.empty() ? shape_str(node_->shape) : node_->label));
    }
    return node_->grad;
}

std::span<double> Tensor::grad_raw() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor& Tensor::set_label(std::string label) {
    node_->label = std::move(label);
    return *this;
}

const std::string& Tensor::label() const { return node_->label; }

Tensor Tensor::clone() const {
    return Tensor(make_leaf(node_->shape, node_->data, node_->requires_grad));
}

void Tensor::backward() const {
    if (!node_) {
        throw ShapeError("backward: undefined tensor");
    }
    if (node_->size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(node_->shape));
    }

    // Reverse topological order via iterative DFS; only requires_grad nodes
    // can contribute gradient, so the walk is pruned to them.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    if (node_->requires_grad) {
        visited.insert(node_.get());
        stack.push_back({node_.get(), 0});
    }
    while (!stack.empty()) {
        Frame& frame = stack.back();
        if (frame.next < frame.node->parents.size()) {
            TensorNode* parent = frame.node->parents[frame.next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.push_back({parent, 0});
            }
        } else {
            order.push_back(frame.node);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;

    for (std::size_t i = order.size(); i-- > 0;) {
        TensorNode* node = order[i];
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
    // Release the recorded graph; parameters keep their grads.
    for (TensorNode* node : order) {
        node->parents.clear();
        node->backward_fn = nullptr;
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add, "add"); }

Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul, "mul"); }

Tensor scalar_mul(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (const double v : a.values()) {
        if (!(v > 0.0)) {
            throw DomainError("log: input must be strictly positive, got " + std::to_string(v));
        }
    }
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---- reductions ----

Tensor sum(const Tensor& ta) {
    const NodePtr a = ta.node();
    double total = 0.0;
    for (const double v : a->data) {
        total += v;
    }
    auto backward = [](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        const double g = self.grad[0];
        for (auto& v : na.grad) {
            v += g;
        }
    };
    return Tensor(make_result({1}, {total}, {a}, std::move(backward)));
}

Tensor mean(const Tensor& ta) {
    const NodePtr a = ta.node();
    const double n = static_cast<double>(a->size());
    double total = 0.0;
    for (const double v : a->data) {
        total += v;
    }
    auto backward = [n](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        const double g = self.grad[0] / n;
        for (auto& v : na.grad) {
            v += g;
        }
    };
    return Tensor(make_result({1}, {total / n}, {a}, std::move(backward)));
}

// ---- matmul ----

Tensor matmul(const Tensor& ta, const Tensor& tb) {
    const NodePtr a = ta.node();
    const NodePtr b = tb.node();
    const auto& sa = a->shape;
    const auto& sb = b->shape;
    if (sa.size() < 2 || sb.size() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
                         shape_str(sb));
    }
    const std::int64_t m = sa[sa.size() - 2];
    const std::int64_t k = sa[sa.size() - 1];
    const std::int64_t kb = sb[sb.size() - 2];
    const std::int64_t n = sb[sb.size() - 1];
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(sa) + " x " +
                         shape_str(sb));
    }

    const Shape lead_a(sa.begin(), sa.end() - 2);
    const Shape lead_b(sb.begin(), sb.end() - 2);
    BinPlan batch = make_bin_plan(lead_a.empty() ? Shape{1} : lead_a,
                                  lead_b.empty() ? Shape{1} : lead_b, "matmul");
    // Leading strides are in element units of the leading shapes; convert to
    // buffer offsets by the per-matrix block sizes.
    const std::int64_t a_block = m * k;
    const std::int64_t b_block = k * n;
    const std::int64_t out_block = m * n;

    // Shape{1} padding of empty leads must not leak a spurious leading 1.
    Shape out_shape;
    if (!lead_a.empty() || !lead_b.empty()) {
        out_shape = batch.out_shape;
    }
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<double> out(static_cast<std::size_t>(batch.total * out_block));
    {
        std::int64_t t = 0;
        for_each_bin(batch, [&](std::int64_t, std::int64_t ao, std::int64_t bo) {
            MutMap c(out.data() + t * out_block, m, n);
            ConstMap ma(a->data.data() + ao * a_block, m, k);
            ConstMap mb(b->data.data() + bo * b_block, k, n);
            c.noalias() = ma * mb;
            ++t;
        });
    }

    auto backward = [batch = std::move(batch), m, k, n, a_block, b_block,
                     out_block](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        TensorNode& nb = *self.parents[1];
        const bool wa = na.requires_grad;
        const bool wb = nb.requires_grad;
        if (wa) {
            na.ensure_grad();
        }
        if (wb) {
            nb.ensure_grad();
        }
        std::int64_t t = 0;
        for_each_bin(batch, [&](std::int64_t, std::int64_t ao, std::int64_t bo) {
            ConstMap g(self.grad.data() + t * out_block, m, n);
            if (wa) {
                MutMap da(na.grad.data() + ao * a_block, m, k);
                ConstMap mb(nb.data.data() + bo * b_block, k, n);
                da.noalias() += g * mb.transpose();
            }
            if (wb) {
                MutMap db(nb.grad.data() + bo * b_block, k, n);
                ConstMap ma(na.data.data() + ao * a_block, m, k);
                db.noalias() += ma.transpose() * g;
            }
            ++t;
        });
    };
    return Tensor(make_result(std::move(out_shape), std::move(out), {a, b}, std::move(backward)));
}

// ---- softmax ----

Tensor softmax(const Tensor& ta, std::int64_t axis) {
    const NodePtr a = ta.node();
    const std::int64_t rank = static_cast<std::int64_t>(a->shape.size());
    const std::int64_t ax = normalize_axis(axis, rank, "softmax");
    if (!all_finite(a->data)) {
        throw NumericError("softmax: non-finite input");
    }
    const std::int64_t len = a->shape[ax];
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (std::int64_t i = 0; i < ax; ++i) {
        outer *= a->shape[i];
    }
    for (std::int64_t i = ax + 1; i < rank; ++i) {
        inner *= a->shape[i];
    }

    std::vector<double> out(a->data.size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            double mx = a->data[base];
            for (std::int64_t j = 1; j < len; ++j) {
                mx = std::max(mx, a->data[base + j * inner]);
            }
            double denom = 0.0;
            for (std::int64_t j = 0; j < len; ++j) {
                const double e = std::exp(a->data[base + j * inner] - mx);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::int64_t j = 0; j < len; ++j) {
                out[base + j * inner] /= denom;
            }
        }
    }

    auto backward = [outer, inner, len](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::int64_t j = 0; j < len; ++j) {
                    const std::int64_t idx = base + j * inner;
                    dot += self.data[idx] * self.grad[idx];
                }
                for (std::int64_t j = 0; j < len; ++j) {
                    const std::int64_t idx = base + j * inner;
                    na.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        }
    };
    return Tensor(make_result(a->shape, std::move(out), {a}, std::move(backward)));
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& tx, const Tensor& tgain, const Tensor& tbias, double eps) {
    const NodePtr x = tx.node();
    const NodePtr gain = tgain.node();
    const NodePtr bias = tbias.node();
    if (x->shape.empty()) {
        throw ShapeError("layer_norm: input must have rank >= 1");
    }
    if (eps <= 0.0) {
        throw ConfigError("layer_norm: eps must be positive");
    }
    const std::int64_t d = x->shape.back();
    if (gain->shape != Shape{d} || bias->shape != Shape{d}) {
        throw ShapeError("layer_norm: gain/bias must be shaped [" + std::to_string(d) + "], got " +
                         shape_str(gain->shape) + " and " + shape_str(bias->shape));
    }
    const std::int64_t rows = x->size() / d;

    std::vector<double> out(x->data.size());
    std::vector<double> xhat(x->data.size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = x->data.data() + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::int64_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain->data[j] + bias->data[j];
        }
    }

    auto backward = [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& self) {
        TensorNode& nx = *self.parents[0];
        TensorNode& ng = *self.parents[1];
        TensorNode& nb = *self.parents[2];
        if (nx.requires_grad) {
            nx.ensure_grad();
        }
        if (ng.requires_grad) {
            ng.ensure_grad();
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
        }
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * d;
            const double* h = xhat.data() + r * d;
            if (ng.requires_grad || nb.requires_grad) {
                for (std::int64_t j = 0; j < d; ++j) {
                    if (ng.requires_grad) {
                        ng.grad[j] += g[j] * h[j];
                    }
                    if (nb.requires_grad) {
                        nb.grad[j] += g[j];
                    }
                }
            }
            if (nx.requires_grad) {
                double m1 = 0.0;
                double m2 = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double dh = g[j] * ng.data[j];
                    m1 += dh;
                    m2 += dh * h[j];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                for (std::int64_t j = 0; j < d; ++j) {
                    const double dh = g[j] * ng.data[j];
                    nx.grad[r * d + j] += inv_std[r] * (dh - m1 - h[j] * m2);
                }
            }
        }
    };
    return Tensor(make_result(x->shape, std::move(out), {x, gain, bias}, std::move(backward)));
}

// ---- shape ops ----

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const auto& first = parts.front().shape();
    const std::int64_t rank = static_cast<std::int64_t>(first.size());
    const std::int64_t ax = normalize_axis(axis, rank, "concat");
    Shape out_shape = first;
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (static_cast<std::int64_t>(s.size()) != rank) {
            throw ShapeError("concat: rank mismatch, " + shape_str(first) + " vs " + shape_str(s));
        }
        for (std::int64_t i = 0; i < rank; ++i) {
            if (i != ax && s[i] != first[i]) {
                throw ShapeError("concat: shape mismatch off axis, " + shape_str(first) + " vs " +
                                 shape_str(s));
            }
        }
        out_shape[ax] += s[ax];
    }

    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (std::int64_t i = 0; i < ax; ++i) {
        outer *= first[i];
    }
    for (std::int64_t i = ax + 1; i < rank; ++i) {
        inner *= first[i];
    }

    std::vector<double> out(static_cast<std::size_t>(shape_size(out_shape)));
    const std::int64_t out_row = out_shape[ax] * inner;
    std::int64_t col_base = 0;
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) {
        const NodePtr node = p.node();
        nodes.push_back(node);
        const std::int64_t block = node->shape[ax] * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(node->data.data() + o * block, block, out.data() + o * out_row + col_base);
        }
        col_base += block;
    }

    auto backward = [outer, inner, ax, out_row](TensorNode& self) {
        std::int64_t col = 0;
        for (const auto& parent : self.parents) {
            const std::int64_t block = parent->shape[ax] * inner;
            if (parent->requires_grad) {
                parent->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = self.grad.data() + o * out_row + col;
                    double* dst = parent->grad.data() + o * block;
                    for (std::int64_t j = 0; j < block; ++j) {
                        dst[j] += src[j];
                    }
                }
            }
            col += block;
        }
    };
    return Tensor(make_result(std::move(out_shape), std::move(out), std::move(nodes),
                              std::move(backward)));
}

Tensor slice(const Tensor& ta, std::int64_t axis, std::int64_t start, std::int64_t length) {
    const NodePtr a = ta.node();
    const std::int64_t rank = static_cast<std::int64_t>(a->shape.size());
    const std::int64_t ax = normalize_axis(axis, rank, "slice");
    if (start < 0 || length <= 0 || start + length > a->shape[ax]) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for axis size " +
                         std::to_string(a->shape[ax]));
    }
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (std::int64_t i = 0; i < ax; ++i) {
        outer *= a->shape[i];
    }
    for (std::int64_t i = ax + 1; i < rank; ++i) {
        inner *= a->shape[i];
    }
    Shape out_shape = a->shape;
    out_shape[ax] = length;

    const std::int64_t in_row = a->shape[ax] * inner;
    const std::int64_t out_block = length * inner;
    std::vector<double> out(static_cast<std::size_t>(outer * out_block));
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(a->data.data() + o * in_row + start * inner, out_block,
                    out.data() + o * out_block);
    }

    auto backward = [outer, inner, start, in_row, out_block](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * out_block;
            double* dst = na.grad.data() + o * in_row + start * inner;
            for (std::int64_t j = 0; j < out_block; ++j) {
                dst[j] += src[j];
            }
        }
    };
    return Tensor(make_result(std::move(out_shape), std::move(out), {a}, std::move(backward)));
}

namespace {

std::vector<std::int64_t> dense_strides_of(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 0);
    std::int64_t acc = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[i] = acc;
        acc *= shape[i];
    }
    return strides;
}

void permuted_copy(const Shape& out_shape, const std::vector<std::int64_t>& src_strides,
                   const double* src, double* dst, bool accumulate) {
    const std::size_t rank = out_shape.size();
    const std::int64_t total = shape_size(out_shape);
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t so = 0;
    for (std::int64_t t = 0;;) {
        if (accumulate) {
            dst[so] += src[t];
        } else {
            dst[t] = src[so];
        }
        if (++t == total) {
            break;
        }
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            so += src_strides[ax];
            if (idx[ax] < out_shape[ax]) {
                break;
            }
            so -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

} // namespace

Tensor transpose(const Tensor& ta, std::int64_t axis0, std::int64_t axis1) {
    const NodePtr a = ta.node();
    const std::int64_t rank = static_cast<std::int64_t>(a->shape.size());
    const std::int64_t ax0 = normalize_axis(axis0, rank, "transpose");
    const std::int64_t ax1 = normalize_axis(axis1, rank, "transpose");
    Shape out_shape = a->shape;
    std::swap(out_shape[ax0], out_shape[ax1]);

    auto src_strides = dense_strides_of(a->shape);
    std::swap(src_strides[ax0], src_strides[ax1]);

    std::vector<double> out(a->data.size());
    permuted_copy(out_shape, src_strides, a->data.data(), out.data(), false);

    auto backward = [out_shape, src_strides](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        // self.grad laid out in out_shape; scatter back through the same
        // stride permutation.
        permuted_copy(out_shape, src_strides, self.grad.data(), na.grad.data(), true);
    };
    return Tensor(make_result(std::move(out_shape), std::move(out), {a}, std::move(backward)));
}

Tensor reshape(const Tensor& ta, Shape shape) {
    const NodePtr a = ta.node();
    if (shape_size(shape) != a->size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " + shape_str(shape));
    }
    std::vector<double> out = a->data;
    auto backward = [](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) {
            return;
        }
        na.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            na.grad[i] += self.grad[i];
        }
    };
    return Tensor(make_result(std::move(shape), std::move(out), {a}, std::move(backward)));
}

} // namespace pit
