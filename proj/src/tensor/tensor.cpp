#include "modal_emu/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "gemm.hpp"

namespace modal_emu {

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;
bool g_check_finite = false;

using NodePtr = std::shared_ptr<Node>;

NodePtr new_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

void check_output(const Node& n) {
    if (!g_check_finite) return;
    for (double v : n.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + n.op + " " +
                               shape_str(n.shape));
        }
    }
}

// Wires a freshly computed result into the graph when any input tracks gradients.
Tensor finish(NodePtr out, const char* op, std::initializer_list<Tensor> inputs,
              std::function<void(Node&)> bw) {
    out->op = op;
    check_output(*out);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        if (any) {
            out->requires_grad = true;
            for (const auto& t : inputs) out->inputs.push_back(t.node());
            out->backward = std::move(bw);
        }
    }
    return Tensor(std::move(out));
}

void require(bool cond, const std::string& what) {
    if (!cond) throw DimensionError(what);
}

void accumulate(Node& target, const std::vector<double>& delta) {
    if (!target.requires_grad) return;
    auto& g = target.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (auto e : shape) require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
    const auto n = shape_numel(shape);
    auto node = new_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto e : shape) require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
    require(shape_numel(shape) == values.size(),
            "shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
    auto node = new_node(std::move(shape), std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v), requires_grad);
}

std::size_t Tensor::size(std::size_t axis) const {
    if (axis >= dim()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return shape()[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

std::span<const double> Tensor::grad() const {
    return node_->ensure_grad();
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    auto n = new_node(node_->shape, node_->data);
    n->requires_grad = node_->requires_grad;
    return Tensor(n);
}

Tensor Tensor::detach() const {
    auto n = new_node(node_->shape, node_->data);
    return Tensor(n);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_check_finite(bool on) { g_check_finite = on; }
bool check_finite_enabled() { return g_check_finite; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    Node* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->backward) n->grad.assign(n->data.size(), 0.0);
    }
    root->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.dim() == 2 && b.dim() == 2 && a.shape()[1] == b.shape()[0],
            "matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    return finish(new_node({m, n}, std::move(out)), "matmul", {a, b}, [m, k, n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (na.requires_grad) kernels::gemm_nt(m, k, n, self.grad.data(), nb.data.data(), na.ensure_grad().data());
        if (nb.requires_grad) kernels::gemm_tn(k, n, m, na.data.data(), self.grad.data(), nb.ensure_grad().data());
    });
}

Tensor transpose(const Tensor& x) {
    require(x.dim() == 2, "transpose needs a 2-D tensor, got " + shape_str(x.shape()));
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    const auto in = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
    return finish(new_node({c, r}, std::move(out)), "transpose", {x}, [r, c](Node& self) {
        Node& nx = *self.inputs[0];
        auto& g = nx.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return finish(new_node(a.shape(), std::move(out)), "add", {a, b}, [](Node& self) {
        accumulate(*self.inputs[0], self.grad);
        accumulate(*self.inputs[1], self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return finish(new_node(a.shape(), std::move(out)), "sub", {a, b}, [](Node& self) {
        accumulate(*self.inputs[0], self.grad);
        Node& nb = *self.inputs[1];
        if (nb.requires_grad) {
            auto& g = nb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same(a, b, "hadamard");
    std::vector<double> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return finish(new_node(a.shape(), std::move(out)), "hadamard", {a, b}, [](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (na.requires_grad) {
            auto& g = na.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.data[i];
        }
        if (nb.requires_grad) {
            auto& g = nb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.data[i];
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * factor;
    return finish(new_node(x.shape(), std::move(out)), "scale", {x}, [factor](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

Tensor add_scalar(const Tensor& x, double value) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + value;
    return finish(new_node(x.shape(), std::move(out)), "add_scalar", {x},
                  [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

Tensor scalar_mul(const Tensor& s, const Tensor& x) {
    require(s.numel() == 1, "scalar_mul needs a one-element scale, got " + shape_str(s.shape()));
    const double sv = s.data()[0];
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * in[i];
    return finish(new_node(x.shape(), std::move(out)), "scalar_mul", {s, x}, [](Node& self) {
        Node& ns = *self.inputs[0];
        Node& nx = *self.inputs[1];
        if (ns.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < nx.data.size(); ++i) acc += self.grad[i] * nx.data[i];
            ns.ensure_grad()[0] += acc;
        }
        if (nx.requires_grad) {
            auto& g = nx.ensure_grad();
            const double sv = ns.data[0];
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv;
        }
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require(x.dim() == 2 && bias.numel() == x.shape()[1],
            "add_row_bias mismatch: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<double> out(x.numel());
    const auto in = x.data(), b = bias.data();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = in[i * cols + j] + b[j];
    return finish(new_node(x.shape(), std::move(out)), "add_row_bias", {x, bias}, [rows, cols](Node& self) {
        accumulate(*self.inputs[0], self.grad);
        Node& nb = *self.inputs[1];
        if (nb.requires_grad) {
            auto& g = nb.ensure_grad();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[i * cols + j];
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    return finish(new_node(x.shape(), std::move(out)), "relu", {x}, [](Node& self) {
        Node& nx = *self.inputs[0];
        auto& g = nx.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (nx.data[i] > 0.0) g[i] += self.grad[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    // Largest double below 1: keeps the output strictly inside (0, 1).
    static const double kUpper = std::nextafter(1.0, 0.0);
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = in[i];
        const double y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        out[i] = std::min(y, kUpper);
    }
    return finish(new_node(x.shape(), std::move(out)), "sigmoid", {x}, [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.data[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor abs(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(in[i]);
    return finish(new_node(x.shape(), std::move(out)), "abs", {x}, [](Node& self) {
        Node& nx = *self.inputs[0];
        auto& g = nx.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = nx.data[i];
            g[i] += self.grad[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    require(x.dim() >= 1 && x.shape().back() >= 1, "softmax_rows needs a non-empty last axis");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * n;
        double* o = out.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(row[j] - mx);
            z += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    return finish(new_node(x.shape(), std::move(out)), "softmax_rows", {x}, [rows, n](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * n;
            const double* gy = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return finish(new_node({1}, {acc}), "sum", {x}, [](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const double gy = self.grad[0];
        for (auto& v : g) v += gy;
    });
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    return finish(new_node({1}, {acc * inv}), "mean", {x}, [inv](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const double gy = self.grad[0] * inv;
        for (auto& v : g) v += gy;
    });
}

Tensor l2_norm(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v * v;
    const double norm = std::sqrt(acc);
    return finish(new_node({1}, {norm}), "l2_norm", {x}, [norm](Node& self) {
        if (norm == 0.0) return;
        Node& nx = *self.inputs[0];
        auto& g = nx.ensure_grad();
        const double f = self.grad[0] / norm;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * nx.data[i];
    });
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
    require(shape_numel(shape) == x.numel(),
            "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    for (auto e : shape) require(e > 0, "reshape target has a zero extent: " + shape_str(shape));
    return finish(new_node(std::move(shape), x.values()), "reshape", {x},
                  [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

namespace {

// View a tensor as [outer, axis, inner] around the given axis.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit a;
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    a.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    require(!parts.empty(), "concat of zero tensors");
    const Shape& ref = parts.front().shape();
    require(axis < ref.size(), "concat axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        bool ok = p.dim() == ref.size();
        for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = (i == axis) || p.shape()[i] == ref[i];
        require(ok, "concat shape mismatch: " + shape_str(ref) + " vs " + shape_str(p.shape()));
        out_shape[axis] += p.shape()[axis];
    }
    if (parts.size() == 1) return parts.front();

    const AxisSplit total = split_at(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const AxisSplit s = split_at(p.shape(), axis);
        const auto in = p.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(in.data() + o * s.extent * s.inner, s.extent * s.inner,
                        out.data() + (o * total.extent + offset) * total.inner);
        }
        offset += s.extent;
    }

    auto node = new_node(out_shape, std::move(out));
    node->op = "concat";
    check_output(*node);
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (g_grad_enabled && any) {
        node->requires_grad = true;
        for (const auto& p : parts) node->inputs.push_back(p.node());
        node->backward = [total, offsets, axis](Node& self) {
            for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                Node& in = *self.inputs[k];
                if (!in.requires_grad) continue;
                const AxisSplit s = split_at(in.shape, axis);
                auto& g = in.ensure_grad();
                for (std::size_t o = 0; o < s.outer; ++o) {
                    const double* src = self.grad.data() + (o * total.extent + offsets[k]) * total.inner;
                    double* dst = g.data() + o * s.extent * s.inner;
                    for (std::size_t i = 0; i < s.extent * s.inner; ++i) dst[i] += src[i];
                }
            }
        };
    }
    return Tensor(node);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    require(axis < x.dim(), "slice axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    require(length > 0 && start + length <= x.shape()[axis],
            "slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside axis " +
                std::to_string(axis) + " of " + shape_str(x.shape()));
    const AxisSplit s = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<double> out(shape_numel(out_shape));
    const auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in.data() + (o * s.extent + start) * s.inner, length * s.inner,
                    out.data() + o * length * s.inner);
    }
    return finish(new_node(std::move(out_shape), std::move(out)), "slice", {x}, [s, start, length](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
            const double* src = self.grad.data() + o * length * s.inner;
            double* dst = g.data() + (o * s.extent + start) * s.inner;
            for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor gather(const Tensor& x, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> index) {
    require(index && index->size() == shape_numel(out_shape),
            "gather index length does not match output shape " + shape_str(out_shape));
    const auto in = x.data();
    std::vector<double> out(index->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t src = (*index)[i];
        require(src < in.size(), "gather index " + std::to_string(src) + " outside " + shape_str(x.shape()));
        out[i] = in[src];
    }
    return finish(new_node(std::move(out_shape), std::move(out)), "gather", {x}, [index](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

struct ConvGeometry {
    std::size_t c, h, w, co, kh, kw, stride, pad, oh, ow;
    std::size_t patch() const { return c * kh * kw; }
    std::size_t positions() const { return oh * ow; }
};

// cols[(ci*kh + dy)*kw + dx][oy*ow + ox]
void im2col(const ConvGeometry& g, const double* x, double* cols) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t dy = 0; dy < g.kh; ++dy)
            for (std::size_t dx = 0; dx < g.kw; ++dx) {
                double* row = cols + ((ci * g.kh + dy) * g.kw + dx) * g.positions();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + dy) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + dx) - static_cast<long>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                            ix < static_cast<long>(g.w);
                        row[oy * g.ow + ox] = inside ? x[(ci * g.h + iy) * g.w + ix] : 0.0;
                    }
                }
            }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx_out) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t dy = 0; dy < g.kh; ++dy)
            for (std::size_t dx = 0; dx < g.kw; ++dx) {
                const double* row = cols + ((ci * g.kh + dy) * g.kw + dx) * g.positions();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + dy) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + dx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        dx_out[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
    require(x.dim() == 3 && kernels.dim() == 4 && kernels.shape()[1] == x.shape()[0],
            "conv2d mismatch: input " + shape_str(x.shape()) + ", kernels " + shape_str(kernels.shape()));
    require(stride >= 1, "conv2d stride must be >= 1");
    ConvGeometry g{};
    g.c = x.shape()[0];
    g.h = x.shape()[1];
    g.w = x.shape()[2];
    g.co = kernels.shape()[0];
    g.kh = kernels.shape()[2];
    g.kw = kernels.shape()[3];
    g.stride = stride;
    g.pad = padding;
    require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw,
            "conv2d kernel " + shape_str(kernels.shape()) + " larger than padded input " + shape_str(x.shape()));
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias) require(bias.numel() == g.co, "conv2d bias " + shape_str(bias.shape()) + " for " + std::to_string(g.co) + " kernels");

    auto cols = std::make_shared<std::vector<double>>(g.patch() * g.positions());
    im2col(g, x.data().data(), cols->data());
    std::vector<double> out(g.co * g.positions(), 0.0);
    if (has_bias) {
        const auto b = bias.data();
        for (std::size_t o = 0; o < g.co; ++o) std::fill_n(out.data() + o * g.positions(), g.positions(), b[o]);
    }
    kernels::gemm_nn(g.co, g.positions(), g.patch(), kernels.data().data(), cols->data(), out.data());

    auto node = new_node({g.co, g.oh, g.ow}, std::move(out));
    auto backward_fn = [g, cols, has_bias](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nk = *self.inputs[1];
        if (nk.requires_grad)
            kernels::gemm_nt(g.co, g.patch(), g.positions(), self.grad.data(), cols->data(), nk.ensure_grad().data());
        if (nx.requires_grad) {
            std::vector<double> dcols(g.patch() * g.positions(), 0.0);
            kernels::gemm_tn(g.patch(), g.positions(), g.co, nk.data.data(), self.grad.data(), dcols.data());
            col2im(g, dcols.data(), nx.ensure_grad().data());
        }
        if (has_bias) {
            Node& nb = *self.inputs[2];
            if (nb.requires_grad) {
                auto& gb = nb.ensure_grad();
                for (std::size_t o = 0; o < g.co; ++o) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < g.positions(); ++p) acc += self.grad[o * g.positions() + p];
                    gb[o] += acc;
                }
            }
        }
    };
    if (has_bias) return finish(std::move(node), "conv2d", {x, kernels, bias}, std::move(backward_fn));
    return finish(std::move(node), "conv2d", {x, kernels}, std::move(backward_fn));
}

Tensor maxpool2d(const Tensor& x, std::size_t factor) {
    require(x.dim() == 3 && factor >= 1, "maxpool2d needs C x H x W input, got " + shape_str(x.shape()));
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    require(h % factor == 0 && w % factor == 0,
            "maxpool2d factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
    const std::size_t oh = h / factor, ow = w / factor;
    std::vector<double> out(c * oh * ow);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const auto in = x.data();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (ci * h + oy * factor) * w + ox * factor;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx) {
                        const std::size_t idx = (ci * h + oy * factor + dy) * w + ox * factor + dx;
                        if (in[idx] > in[best]) best = idx;
                    }
                const std::size_t o = (ci * oh + oy) * ow + ox;
                out[o] = in[best];
                (*argmax)[o] = best;
            }
    return finish(new_node({c, oh, ow}, std::move(out)), "maxpool2d", {x}, [argmax](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
    });
}

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64* rng) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    if (rng == nullptr) throw ContractError("dropout in training mode needs a random generator");
    std::bernoulli_distribution keep(1.0 - rate);
    const double inv = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(x.numel());
    for (auto& m : *mask) m = keep(*rng) ? inv : 0.0;
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * (*mask)[i];
    return finish(new_node(x.shape(), std::move(out)), "dropout", {x}, [mask](Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
}

}  // namespace modal_emu
