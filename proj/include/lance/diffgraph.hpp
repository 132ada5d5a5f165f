#pragma once

// Minimal reverse-mode differentiation over small dense tensors.
//
// The graph is define-by-run: every op computes its forward value when it is
// recorded, and backward() walks the tape in reverse creation order. Because
// inputs are always recorded before the ops that consume them, reverse
// creation order is a valid reverse topological order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lance/errors.hpp"

namespace lance::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major real tensor.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size()) throw ContractError("tensor: shape does not match data length");
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
    }
};

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Mse,
    Relu,
    Exp,
    Clamp,
    Dense,
    Conv2d,
    Concat,
    ConcatCols,
    SliceCols,
    Reshape,
    GatherContext,
    Upsample2x,
    LinearResample,
    SoftRound,
    SteRound,
    MedSoft,
    MedHardSte,
    LaplaceRate,
};

/// Handle to a node recorded in a Graph.
struct Var {
    std::size_t id = 0;
};

class Graph;

/// Backward callback: reads the node's gradient and accumulates into its inputs.
using BackwardFn = std::function<void(Graph&, std::size_t self)>;

struct GraphNode {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
};

class Graph {
public:
    Var leaf(Tensor value, bool requires_grad = true) {
        GraphNode n;
        n.kind = OpKind::Leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records an op node. `backward` may be empty when no input needs gradients.
    Var record(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
        GraphNode n;
        n.kind = kind;
        for (Var v : inputs) {
            check(v);
            n.inputs.push_back(v.id);
            n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
        }
        n.value = std::move(value);
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    const Tensor& value(Var v) const {
        check(v);
        return nodes_[v.id].value;
    }
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

    /// Gradient of the last backward() root with respect to `v`.
    const Tensor& grad(Var v) const {
        check(v);
        if (!has_backward_) throw StateError("graph: gradient requested before backward()");
        return nodes_[v.id].grad;
    }

    /// Mutable gradient buffer used by backward callbacks.
    Tensor& grad_buffer(std::size_t id) {
        GraphNode& n = nodes_[id];
        if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape, 0.0);
        return n.grad;
    }
    const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

    void backward(Var loss) {
        check(loss);
        if (nodes_[loss.id].value.size() != 1) throw ContractError("graph: backward requires a scalar loss");
        for (GraphNode& n : nodes_) n.grad = Tensor(n.value.shape, 0.0);
        nodes_[loss.id].grad.data[0] = 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            GraphNode& n = nodes_[id];
            if (n.requires_grad && n.backward) n.backward(*this, id);
        }
        has_backward_ = true;
    }

    bool has_backward() const { return has_backward_; }

private:
    void check(Var v) const {
        if (v.id >= nodes_.size()) throw ContractError("graph: unknown variable");
    }

    std::vector<GraphNode> nodes_;
    bool has_backward_ = false;
};

// ---------------------------------------------------------------------------
// Plain kernels. The inference path of the codec calls these directly so the
// decoder and the encoder-side reconstruction share one implementation.
// ---------------------------------------------------------------------------
namespace kernel {

/// y[p, i] = b[i] + sum_j W[i, j] x[p, j]   (x: rows x n, W: m x n)
inline void dense(std::span<const double> x, std::size_t rows, std::size_t n, std::span<const double> w,
                  std::span<const double> b, std::size_t m, std::span<double> y) {
    for (std::size_t p = 0; p < rows; ++p) {
        const double* xr = x.data() + p * n;
        double* yr = y.data() + p * m;
        for (std::size_t i = 0; i < m; ++i) {
            const double* wr = w.data() + i * n;
            double acc = b[i];
            for (std::size_t j = 0; j < n; ++j) acc += wr[j] * xr[j];
            yr[i] = acc;
        }
    }
}

/// Same-size cross-correlation with zero padding; k in {1, 3}.
inline void conv2d(std::span<const double> in, std::size_t cin, std::size_t h, std::size_t w,
                   std::span<const double> k, std::size_t cout, std::size_t ksize, std::span<const double> bias,
                   std::span<double> out) {
    const std::size_t plane = h * w;
    const long half = static_cast<long>(ksize / 2);
    for (std::size_t co = 0; co < cout; ++co) {
        double* o = out.data() + co * plane;
        std::fill(o, o + plane, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* src = in.data() + ci * plane;
            for (std::size_t ky = 0; ky < ksize; ++ky) {
                for (std::size_t kx = 0; kx < ksize; ++kx) {
                    const double wv = k[((co * cin + ci) * ksize + ky) * ksize + kx];
                    if (wv == 0.0) continue;
                    const long dy = static_cast<long>(ky) - half;
                    const long dx = static_cast<long>(kx) - half;
                    const long y0 = std::max(0L, -dy), y1 = std::min(static_cast<long>(h), static_cast<long>(h) - dy);
                    const long x0 = std::max(0L, -dx), x1 = std::min(static_cast<long>(w), static_cast<long>(w) - dx);
                    for (long y = y0; y < y1; ++y) {
                        double* orow = o + y * static_cast<long>(w);
                        const double* srow = src + (y + dy) * static_cast<long>(w) + dx;
                        for (long x = x0; x < x1; ++x) orow[x] += wv * srow[x];
                    }
                }
            }
        }
    }
}

/// One output sample of a 1-D linear operator: sum of weight * input[index].
struct Contribution {
    std::size_t index;
    double weight;
};

/// Sparse 1-D linear operator (out_size rows, each a short list of taps).
struct LinearOperator1d {
    std::size_t in_size = 0;
    std::size_t out_size = 0;
    std::vector<std::vector<Contribution>> rows;
};

/// Separable application: out = R_rows * x * R_cols^T (horizontal pass first).
inline void apply_separable(std::span<const double> x, const LinearOperator1d& rows, const LinearOperator1d& cols,
                            std::span<double> out, std::vector<double>& scratch) {
    const std::size_t h = rows.in_size, w = cols.in_size, oh = rows.out_size, ow = cols.out_size;
    scratch.assign(h * ow, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (const Contribution& t : cols.rows[c]) acc += t.weight * x[r * w + t.index];
            scratch[r * ow + c] = acc;
        }
    }
    for (std::size_t r = 0; r < oh; ++r) {
        double* orow = out.data() + r * ow;
        std::fill(orow, orow + ow, 0.0);
        for (const Contribution& t : rows.rows[r]) {
            const double* srow = scratch.data() + t.index * ow;
            for (std::size_t c = 0; c < ow; ++c) orow[c] += t.weight * srow[c];
        }
    }
}

/// Tap indices of a x2 upsampler built from a symmetric 8-tap kernel
/// [h3 h2 h1 h0 h0 h1 h2 h3]. Output 2i samples input coordinate i - 1/4,
/// output 2i+1 samples i + 1/4. Borders replicate the edge sample.
struct UpsampleTap {
    std::size_t index;
    std::size_t tap;
};

inline std::vector<std::array<UpsampleTap, 4>> upsample_taps(std::size_t in_size, std::size_t out_size) {
    if (out_size > 2 * in_size || out_size + 1 < 2 * in_size)
        throw ContractError("upsample: output size must be 2*input or 2*input-1");
    auto clampi = [in_size](long i) {
        return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(in_size) - 1));
    };
    std::vector<std::array<UpsampleTap, 4>> out(out_size);
    for (std::size_t o = 0; o < out_size; ++o) {
        const long i = static_cast<long>(o / 2);
        if (o % 2 == 0) {
            out[o] = {UpsampleTap{clampi(i - 2), 3}, UpsampleTap{clampi(i - 1), 1}, UpsampleTap{clampi(i), 0},
                      UpsampleTap{clampi(i + 1), 2}};
        } else {
            out[o] = {UpsampleTap{clampi(i - 1), 2}, UpsampleTap{clampi(i), 0}, UpsampleTap{clampi(i + 1), 1},
                      UpsampleTap{clampi(i + 2), 3}};
        }
    }
    return out;
}

inline void upsample2x(std::span<const double> x, std::size_t h, std::size_t w, std::span<const double> taps,
                       std::size_t oh, std::size_t ow, std::span<double> out, std::vector<double>& scratch) {
    const auto tx = upsample_taps(w, ow);
    const auto ty = upsample_taps(h, oh);
    scratch.assign(h * ow, 0.0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (const UpsampleTap& t : tx[c]) acc += taps[t.tap] * x[r * w + t.index];
            scratch[r * ow + c] = acc;
        }
    for (std::size_t r = 0; r < oh; ++r) {
        double* orow = out.data() + r * ow;
        std::fill(orow, orow + ow, 0.0);
        for (const UpsampleTap& t : ty[r]) {
            const double* srow = scratch.data() + t.index * ow;
            const double wv = taps[t.tap];
            for (std::size_t c = 0; c < ow; ++c) orow[c] += wv * srow[c];
        }
    }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) throw ContractError(std::string(op) + ": shape mismatch");
}

inline void accumulate(Graph& g, std::size_t id, std::span<const double> delta) {
    if (!g.requires_grad(id)) return;
    Tensor& gb = g.grad_buffer(id);
    for (std::size_t i = 0; i < delta.size(); ++i) gb.data[i] += delta[i];
}

/// (rows, cols) view of a rank-1 or rank-2 tensor.
inline std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t, const char* op) {
    if (t.rank() == 1) return {1, t.shape[0]};
    if (t.rank() == 2) return {t.shape[0], t.shape[1]};
    throw ContractError(std::string(op) + ": expected rank-1 or rank-2 tensor");
}

}  // namespace detail

inline Var add(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    detail::require_same_shape(av, bv, "add");
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return g.record(OpKind::Add, {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        detail::accumulate(gr, a.id, go);
        detail::accumulate(gr, b.id, go);
    });
}

inline Var sub(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    detail::require_same_shape(av, bv, "sub");
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return g.record(OpKind::Sub, {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        detail::accumulate(gr, a.id, go);
        if (gr.requires_grad(b.id)) {
            Tensor& gb = gr.grad_buffer(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
}

inline Var mul(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    detail::require_same_shape(av, bv, "mul");
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return g.record(OpKind::Mul, {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& av2 = gr.value(a.id).data;
        const auto& bv2 = gr.value(b.id).data;
        if (gr.requires_grad(a.id)) {
            Tensor& ga = gr.grad_buffer(a.id);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
        }
        if (gr.requires_grad(b.id)) {
            Tensor& gb = gr.grad_buffer(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av2[i];
        }
    });
}

inline Var scale(Graph& g, Var a, double k) {
    Tensor out = g.value(a);
    for (double& v : out.data) v *= k;
    return g.record(OpKind::Scale, {a}, std::move(out), [a, k](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        Tensor& ga = gr.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += k * go[i];
    });
}

inline Var add_scalar(Graph& g, Var a, double k) {
    Tensor out = g.value(a);
    for (double& v : out.data) v += k;
    return g.record(OpKind::AddScalar, {a}, std::move(out), [a](Graph& gr, std::size_t self) {
        detail::accumulate(gr, a.id, gr.grad_of(self).data);
    });
}

inline Var sum(Graph& g, Var a) {
    const Tensor& av = g.value(a);
    double s = 0.0;
    for (double v : av.data) s += v;
    return g.record(OpKind::Sum, {a}, Tensor({1}, {s}), [a](Graph& gr, std::size_t self) {
        const double go = gr.grad_of(self)[0];
        Tensor& ga = gr.grad_buffer(a.id);
        for (double& v : ga.data) v += go;
    });
}

/// Mean squared error against a constant target.
inline Var mse(Graph& g, Var a, const Tensor& target) {
    const Tensor& av = g.value(a);
    detail::require_same_shape(av, target, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - target[i];
        s += d * d;
    }
    const double n = static_cast<double>(av.size());
    return g.record(OpKind::Mse, {a}, Tensor({1}, {s / n}), [a, target, n](Graph& gr, std::size_t self) {
        const double go = gr.grad_of(self)[0];
        const auto& av2 = gr.value(a.id).data;
        Tensor& ga = gr.grad_buffer(a.id);
        for (std::size_t i = 0; i < av2.size(); ++i) ga[i] += go * 2.0 * (av2[i] - target[i]) / n;
    });
}

inline Var relu(Graph& g, Var a) {
    Tensor out = g.value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return g.record(OpKind::Relu, {a}, std::move(out), [a](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& av = gr.value(a.id).data;
        Tensor& ga = gr.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (av[i] > 0.0) ga[i] += go[i];
    });
}

inline Var exp(Graph& g, Var a) {
    Tensor out = g.value(a);
    for (double& v : out.data) v = std::exp(v);
    return g.record(OpKind::Exp, {a}, std::move(out), [a](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& ov = gr.value(self).data;
        Tensor& ga = gr.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ov[i];
    });
}

/// Clamp to [lo, hi]; saturated elements pass no gradient.
inline Var clamp(Graph& g, Var a, double lo, double hi) {
    Tensor out = g.value(a);
    for (double& v : out.data) v = std::clamp(v, lo, hi);
    return g.record(OpKind::Clamp, {a}, std::move(out), [a, lo, hi](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& av = gr.value(a.id).data;
        Tensor& ga = gr.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (av[i] >= lo && av[i] <= hi) ga[i] += go[i];
    });
}

/// Fully connected layer applied row-wise: x is [n] or [P x n], W is [m x n], b is [m].
inline Var dense(Graph& g, Var x, Var w, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    const Tensor& bv = g.value(b);
    const auto [rows, n] = detail::as_matrix(xv, "dense");
    if (wv.rank() != 2 || wv.shape[1] != n) throw ContractError("dense: weight columns must match input size");
    const std::size_t m = wv.shape[0];
    if (bv.rank() != 1 || bv.shape[0] != m) throw ContractError("dense: bias size must match output size");
    Tensor out(xv.rank() == 1 ? Shape{m} : Shape{rows, m});
    kernel::dense(xv.data, rows, n, wv.data, bv.data, m, out.data);
    return g.record(OpKind::Dense, {x, w, b}, std::move(out), [x, w, b, rows, n, m](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& xd = gr.value(x.id).data;
        const auto& wd = gr.value(w.id).data;
        if (gr.requires_grad(x.id)) {
            Tensor& gx = gr.grad_buffer(x.id);
            for (std::size_t p = 0; p < rows; ++p)
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = go[p * m + i];
                    if (gi == 0.0) continue;
                    const double* wr = wd.data() + i * n;
                    double* gxr = gx.data.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gxr[j] += gi * wr[j];
                }
        }
        if (gr.requires_grad(w.id)) {
            Tensor& gw = gr.grad_buffer(w.id);
            for (std::size_t p = 0; p < rows; ++p)
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = go[p * m + i];
                    if (gi == 0.0) continue;
                    const double* xr = xd.data() + p * n;
                    double* gwr = gw.data.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) gwr[j] += gi * xr[j];
                }
        }
        if (gr.requires_grad(b.id)) {
            Tensor& gb = gr.grad_buffer(b.id);
            for (std::size_t p = 0; p < rows; ++p)
                for (std::size_t i = 0; i < m; ++i) gb[i] += go[p * m + i];
        }
    });
}

/// Same-size 2-D convolution: x [Cin x H x W], k [Cout x Cin x K x K], b [Cout], K in {1, 3}.
inline Var conv2d(Graph& g, Var x, Var k, Var b) {
    const Tensor& xv = g.value(x);
    const Tensor& kv = g.value(k);
    const Tensor& bv = g.value(b);
    if (xv.rank() != 3 || kv.rank() != 4) throw ContractError("conv2d: expected [C,H,W] input and [Co,Ci,K,K] kernel");
    const std::size_t ksize = kv.shape[2];
    if (kv.shape[3] != ksize || (ksize != 1 && ksize != 3))
        throw ConfigError("conv2d: only 1x1 and 3x3 kernels are supported");
    const std::size_t cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2], cout = kv.shape[0];
    if (kv.shape[1] != cin) throw ContractError("conv2d: kernel input channels mismatch");
    if (bv.rank() != 1 || bv.shape[0] != cout) throw ContractError("conv2d: bias size mismatch");
    Tensor out({cout, h, wd});
    kernel::conv2d(xv.data, cin, h, wd, kv.data, cout, ksize, bv.data, out.data);
    return g.record(OpKind::Conv2d, {x, k, b}, std::move(out),
                    [x, k, b, cin, h, wd, cout, ksize](Graph& gr, std::size_t self) {
                        const auto& go = gr.grad_of(self).data;
                        const auto& xd = gr.value(x.id).data;
                        const auto& kd = gr.value(k.id).data;
                        const std::size_t plane = h * wd;
                        const long half = static_cast<long>(ksize / 2);
                        const bool need_x = gr.requires_grad(x.id), need_k = gr.requires_grad(k.id);
                        Tensor* gx = need_x ? &gr.grad_buffer(x.id) : nullptr;
                        Tensor* gk = need_k ? &gr.grad_buffer(k.id) : nullptr;
                        for (std::size_t co = 0; co < cout; ++co) {
                            const double* gop = go.data() + co * plane;
                            for (std::size_t ci = 0; ci < cin; ++ci) {
                                const double* src = xd.data() + ci * plane;
                                for (std::size_t ky = 0; ky < ksize; ++ky)
                                    for (std::size_t kx = 0; kx < ksize; ++kx) {
                                        const std::size_t kidx = ((co * cin + ci) * ksize + ky) * ksize + kx;
                                        const double wv = kd[kidx];
                                        const long dy = static_cast<long>(ky) - half;
                                        const long dx = static_cast<long>(kx) - half;
                                        const long y0 = std::max(0L, -dy);
                                        const long y1 = std::min(static_cast<long>(h), static_cast<long>(h) - dy);
                                        const long x0 = std::max(0L, -dx);
                                        const long x1 = std::min(static_cast<long>(wd), static_cast<long>(wd) - dx);
                                        double acc = 0.0;
                                        for (long y = y0; y < y1; ++y) {
                                            const double* grow = gop + y * static_cast<long>(wd);
                                            const long soff = (y + dy) * static_cast<long>(wd) + dx;
                                            if (need_k)
                                                for (long xx = x0; xx < x1; ++xx) acc += grow[xx] * src[soff + xx];
                                            if (need_x && wv != 0.0) {
                                                double* gxrow = gx->data.data() + ci * plane + soff;
                                                for (long xx = x0; xx < x1; ++xx) gxrow[xx] += wv * grow[xx];
                                            }
                                        }
                                        if (need_k) gk->data[kidx] += acc;
                                    }
                            }
                        }
                        if (gr.requires_grad(b.id)) {
                            Tensor& gb = gr.grad_buffer(b.id);
                            for (std::size_t co = 0; co < cout; ++co) {
                                double s = 0.0;
                                for (std::size_t i = 0; i < plane; ++i) s += go[co * plane + i];
                                gb[co] += s;
                            }
                        }
                    });
}

/// Flat concatenation of the inputs' data, reshaped to `shape`.
inline Var concat(Graph& g, const std::vector<Var>& parts, Shape shape) {
    Tensor out;
    out.shape = std::move(shape);
    std::vector<std::size_t> offsets;
    for (Var p : parts) {
        offsets.push_back(out.data.size());
        const auto& d = g.value(p).data;
        out.data.insert(out.data.end(), d.begin(), d.end());
    }
    if (numel(out.shape) != out.data.size()) throw ContractError("concat: shape does not match total size");
    return g.record(OpKind::Concat, parts, std::move(out), [parts, offsets](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (!gr.requires_grad(parts[k].id)) continue;
            Tensor& gp = gr.grad_buffer(parts[k].id);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[offsets[k] + i];
        }
    });
}

inline Var reshape(Graph& g, Var a, Shape shape) { return concat(g, {a}, std::move(shape)); }

/// Column-wise concatenation of [P x n_k] matrices (rank-1 inputs count as [P x 1]).
inline Var concat_cols(Graph& g, const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t rows = g.value(parts[0]).shape[0];
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (Var p : parts) {
        const Tensor& t = g.value(p);
        const std::size_t wdt = t.rank() == 1 ? 1 : t.shape[1];
        if (t.shape[0] != rows || t.rank() > 2) throw ContractError("concat_cols: row count mismatch");
        widths.push_back(wdt);
        total += wdt;
    }
    Tensor out({rows, total});
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& d = g.value(parts[k]).data;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) out[r * total + col + c] = d[r * widths[k] + c];
        col += widths[k];
    }
    return g.record(OpKind::ConcatCols, parts, std::move(out), [parts, widths, rows, total](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        std::size_t c0 = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (gr.requires_grad(parts[k].id)) {
                Tensor& gp = gr.grad_buffer(parts[k].id);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += go[r * total + c0 + c];
            }
            c0 += widths[k];
        }
    });
}

/// Columns [c0, c1) of a [P x n] matrix; a single column comes back as rank-1 [P].
inline Var slice_cols(Graph& g, Var a, std::size_t c0, std::size_t c1) {
    const Tensor& av = g.value(a);
    if (av.rank() != 2 || c0 >= c1 || c1 > av.shape[1]) throw ContractError("slice_cols: bad range");
    const std::size_t rows = av.shape[0], n = av.shape[1], wdt = c1 - c0;
    Tensor out(wdt == 1 ? Shape{rows} : Shape{rows, wdt});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < wdt; ++c) out[r * wdt + c] = av[r * n + c0 + c];
    return g.record(OpKind::SliceCols, {a}, std::move(out), [a, rows, n, c0, wdt](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        Tensor& ga = gr.grad_buffer(a.id);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < wdt; ++c) ga[r * n + c0 + c] += go[r * wdt + c];
    });
}

/// Causal neighbourhood gather: grid [H x W] -> [H*W x N]. Out-of-bounds taps read 0.
inline Var gather_context(Graph& g, Var grid, const std::vector<std::pair<int, int>>& offsets) {
    const Tensor& gv = g.value(grid);
    if (gv.rank() != 2) throw ContractError("gather_context: expected [H,W] grid");
    const long h = static_cast<long>(gv.shape[0]), w = static_cast<long>(gv.shape[1]);
    const std::size_t n = offsets.size();
    // Flat source index per (position, tap), or -1 when out of bounds.
    std::vector<long> src(static_cast<std::size_t>(h * w) * n);
    Tensor out({static_cast<std::size_t>(h * w), n});
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j)
            for (std::size_t k = 0; k < n; ++k) {
                const long r = i + offsets[k].first, c = j + offsets[k].second;
                const std::size_t o = static_cast<std::size_t>(i * w + j) * n + k;
                if (r < 0 || r >= h || c < 0 || c >= w) {
                    src[o] = -1;
                } else {
                    src[o] = r * w + c;
                    out[o] = gv[static_cast<std::size_t>(r * w + c)];
                }
            }
    return g.record(OpKind::GatherContext, {grid}, std::move(out), [grid, src](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        Tensor& gg = gr.grad_buffer(grid.id);
        for (std::size_t o = 0; o < src.size(); ++o)
            if (src[o] >= 0) gg[static_cast<std::size_t>(src[o])] += go[o];
    });
}

/// x2 separable upsampling of [h x w] to [oh x ow] with learnable half-kernel taps [4].
inline Var upsample2x(Graph& g, Var x, Var taps, std::size_t oh, std::size_t ow) {
    const Tensor& xv = g.value(x);
    const Tensor& tv = g.value(taps);
    if (xv.rank() != 2 || tv.size() != 4) throw ContractError("upsample2x: expected [H,W] input and 4 taps");
    const std::size_t h = xv.shape[0], w = xv.shape[1];
    Tensor out({oh, ow});
    std::vector<double> scratch;
    kernel::upsample2x(xv.data, h, w, tv.data, oh, ow, out.data, scratch);
    return g.record(OpKind::Upsample2x, {x, taps}, std::move(out), [x, taps, h, w, oh, ow](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const auto& xd = gr.value(x.id).data;
        const auto& td = gr.value(taps.id).data;
        const auto tx = kernel::upsample_taps(w, ow);
        const auto ty = kernel::upsample_taps(h, oh);
        std::vector<double> tmp(h * ow, 0.0);  // horizontal-pass output
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < ow; ++c)
                for (const auto& t : tx[c]) tmp[r * ow + c] += td[t.tap] * xd[r * w + t.index];
        std::array<double, 4> gt{};
        std::vector<double> gtmp(h * ow, 0.0);
        for (std::size_t r = 0; r < oh; ++r)
            for (const auto& t : ty[r])
                for (std::size_t c = 0; c < ow; ++c) {
                    const double gv = go[r * ow + c];
                    gtmp[t.index * ow + c] += td[t.tap] * gv;
                    gt[t.tap] += gv * tmp[t.index * ow + c];
                }
        const bool need_x = gr.requires_grad(x.id);
        Tensor* gx = need_x ? &gr.grad_buffer(x.id) : nullptr;
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < ow; ++c) {
                const double gv = gtmp[r * ow + c];
                for (const auto& t : tx[c]) {
                    if (need_x) gx->data[r * w + t.index] += td[t.tap] * gv;
                    gt[t.tap] += gv * xd[r * w + t.index];
                }
            }
        if (gr.requires_grad(taps.id)) {
            Tensor& gtp = gr.grad_buffer(taps.id);
            for (std::size_t k = 0; k < 4; ++k) gtp[k] += gt[k];
        }
    });
}

/// Fixed separable linear resampling of [h x w] through (rows, cols) operators.
inline Var linear_resample(Graph& g, Var x, const kernel::LinearOperator1d& rows, const kernel::LinearOperator1d& cols) {
    const Tensor& xv = g.value(x);
    if (xv.rank() != 2 || xv.shape[0] != rows.in_size || xv.shape[1] != cols.in_size)
        throw ContractError("linear_resample: operator does not match input shape");
    Tensor out({rows.out_size, cols.out_size});
    std::vector<double> scratch;
    kernel::apply_separable(xv.data, rows, cols, out.data, scratch);
    return g.record(OpKind::LinearResample, {x}, std::move(out), [x, rows, cols](Graph& gr, std::size_t self) {
        const auto& go = gr.grad_of(self).data;
        const std::size_t h = rows.in_size, w = cols.in_size, oh = rows.out_size, ow = cols.out_size;
        std::vector<double> gtmp(h * ow, 0.0);
        for (std::size_t r = 0; r < oh; ++r)
            for (const auto& t : rows.rows[r])
                for (std::size_t c = 0; c < ow; ++c) gtmp[t.index * ow + c] += t.weight * go[r * ow + c];
        Tensor& gx = gr.grad_buffer(x.id);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < ow; ++c)
                for (const auto& t : cols.rows[c]) gx[r * w + t.index] += t.weight * gtmp[r * ow + c];
    });
}

}  // namespace lance::diff
