#pragma once

// Dense 64-bit tensor engine with reverse-mode automatic differentiation.
//
// Values are computed eagerly as nodes are appended to a Tape. backward()
// fills numeric gradients in one reverse sweep. For the gradient-penalty
// path, Tape::grad() builds the gradient of a scalar with respect to a node
// *as new tape nodes*, so a later backward() differentiates through it.
// That graph-building path is implemented only for the op subset the
// discriminator uses; anything else raises UnsupportedOpError.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <limits>
#include <memory>
#include <ostream>

#include "daft/core.hpp"
#include "daft/mask.hpp"

namespace daft {

enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Abs,
    Power,
    Sqrt,
    SumAll,
    SumAxis,
    MeanAll,
    Conv2d,
    ConvDX,   // gradient of conv w.r.t. its input, as a first-class op
    ConvDW,   // gradient of conv w.r.t. its weight, as a first-class op
    MaxPool2d,
    Linear,
    Softmax,
    Upsample2x,
    Concat,
    SliceAxis,
    Reshape,
    Transpose2d,
    BroadcastScalar,
    BroadcastAxis,
    ReplicateSpatial,
    EmbedRows,
    MaskMul,
    RegionStd,
    ChannelAffine,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ScalarMul: return "scalar_mul";
        case Op::Relu: return "relu";
        case Op::LeakyRelu: return "leaky_relu";
        case Op::Tanh: return "tanh";
        case Op::Sigmoid: return "sigmoid";
        case Op::Abs: return "abs";
        case Op::Power: return "power";
        case Op::Sqrt: return "sqrt";
        case Op::SumAll: return "sum";
        case Op::SumAxis: return "sum_axis";
        case Op::MeanAll: return "mean";
        case Op::Conv2d: return "conv2d";
        case Op::ConvDX: return "conv2d_grad_input";
        case Op::ConvDW: return "conv2d_grad_weight";
        case Op::MaxPool2d: return "max_pool2d";
        case Op::Linear: return "linear";
        case Op::Softmax: return "softmax";
        case Op::Upsample2x: return "upsample_nearest2x";
        case Op::Concat: return "concat";
        case Op::SliceAxis: return "slice_axis";
        case Op::Reshape: return "reshape";
        case Op::Transpose2d: return "transpose2d";
        case Op::BroadcastScalar: return "broadcast_scalar";
        case Op::BroadcastAxis: return "broadcast_axis";
        case Op::ReplicateSpatial: return "replicate_spatial";
        case Op::EmbedRows: return "embed_rows";
        case Op::MaskMul: return "mask_mul";
        case Op::RegionStd: return "region_standardize";
        case Op::ChannelAffine: return "channel_affine";
    }
    return "?";
}

struct Node {
    Op op = Op::Leaf;
    Shape shape;
    std::vector<int> inputs;
    std::vector<double> value;
    std::vector<double> grad;  // allocated by backward() for requires-grad nodes
    bool requires_grad = false;

    // op attributes (meaning depends on op)
    int a0 = 0, a1 = 0, a2 = 0;
    double s0 = 0.0;
    std::vector<int32_t> extra;               // argmax / token indices
    std::shared_ptr<const MaskGrid> mask;     // MaskMul / RegionStd
    std::vector<double> saved;                // RegionStd per-group inv-std
};

class Tensor;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Node& node(int id) { return nodes_[size_t(id)]; }
    const Node& node(int id) const { return nodes_[size_t(id)]; }
    int size() const { return int(nodes_.size()); }

    Tensor leaf(const Shape& shape, std::vector<double> data, bool requires_grad);
    Tensor leaf(const Shape& shape, bool requires_grad);  // zero-filled
    Tensor constant(const Shape& shape, std::vector<double> data);
    Tensor scalar(double v);
    Tensor full(const Shape& shape, double v);

    void backward(const Tensor& loss);
    Tensor grad(const Tensor& scalar_out, const Tensor& wrt);
    void zero_grad();

    // one record per line: output id, op, input ids, shape
    void dump(std::ostream& os) const;

    int push(Node&& n) {
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

private:
    // deque: references to nodes stay valid while new nodes are appended
    std::deque<Node> nodes_;
    bool backward_done_ = false;

    void backward_node(int id);
    Tensor vjp(int id, int input_pos, const Tensor& cot);
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Tape* t, int id) : tape_(t), id_(id) {}

    bool valid() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }

    const Shape& shape() const { return tape_->node(id_).shape; }
    int64_t numel() const { return daft::numel(shape()); }
    const std::vector<double>& value() const { return tape_->node(id_).value; }
    const std::vector<double>& grad() const {
        const Node& n = tape_->node(id_);
        if (n.grad.empty()) throw ContractError("gradient not populated; call backward() first");
        return n.grad;
    }
    bool requires_grad() const { return tape_->node(id_).requires_grad; }

    double item() const {
        if (numel() != 1) throw ContractError("item() requires a one-element tensor");
        return value()[0];
    }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// ---------------------------------------------------------------------------
// Leaf / constant creation
// ---------------------------------------------------------------------------

inline Tensor Tape::leaf(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (int64_t(data.size()) != numel(shape))
        throw ShapeError("leaf data has " + std::to_string(data.size()) + " elements, shape " +
                         shape_str(shape) + " needs " + std::to_string(numel(shape)));
    Node n;
    n.op = Op::Leaf;
    n.shape = shape;
    n.value = std::move(data);
    n.requires_grad = requires_grad;
    return Tensor(this, push(std::move(n)));
}

inline Tensor Tape::leaf(const Shape& shape, bool requires_grad) {
    return leaf(shape, std::vector<double>(size_t(numel(shape)), 0.0), requires_grad);
}

inline Tensor Tape::constant(const Shape& shape, std::vector<double> data) {
    return leaf(shape, std::move(data), false);
}

inline Tensor Tape::scalar(double v) { return constant(Shape{}, {v}); }

inline Tensor Tape::full(const Shape& shape, double v) {
    return constant(shape, std::vector<double>(size_t(numel(shape)), v));
}

// ---------------------------------------------------------------------------
// Builder helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Tape* common_tape(const Tensor& a, const Tensor& b) {
    if (a.tape() != b.tape()) throw ContractError("operands belong to different tapes");
    return a.tape();
}

inline bool is_scalar_like(const Tensor& t) { return t.numel() == 1; }

inline int make_node(Tape& tape, Op op, Shape shape, std::vector<int> inputs,
                     std::vector<double> value) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    for (int in : n.inputs)
        if (tape.node(in).requires_grad) n.requires_grad = true;
    return tape.push(std::move(n));
}

// conv geometry
inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline void check_conv_geometry(int H, int W, int k, int stride, int pad) {
    if (k <= 0 || stride <= 0 || pad < 0)
        throw ContractError("conv/pool parameters must satisfy k>0, stride>0, pad>=0");
    if (H + 2 * pad < k || W + 2 * pad < k)
        throw ShapeError("window " + std::to_string(k) + " exceeds padded input " +
                         std::to_string(H) + "x" + std::to_string(W) + " (pad " +
                         std::to_string(pad) + ")");
}

// out[co,oy,ox] += sum_{ci,ky,kx} x[ci, oy*s+ky-p, ox*s+kx-p] * w[co,ci,ky,kx]
inline void conv_fwd_acc(const double* x, int Cin, int H, int W, const double* w, int Cout, int k,
                         int stride, int pad, double* out, int Ho, int Wo) {
    for (int co = 0; co < Cout; ++co) {
        double* outc = out + size_t(co) * Ho * Wo;
        for (int ci = 0; ci < Cin; ++ci) {
            const double* xc = x + size_t(ci) * H * W;
            const double* wc = w + (size_t(co) * Cin + ci) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    double wv = wc[ky * k + kx];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        const double* xrow = xc + size_t(iy) * W;
                        double* orow = outc + size_t(oy) * Wo;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

// dx[ci,iy,ix] += sum_{co,ky,kx} u[co,oy,ox] * w[co,ci,ky,kx]
inline void conv_dx_acc(const double* u, int Cout, int Ho, int Wo, const double* w, int Cin, int k,
                        int stride, int pad, double* dx, int H, int W) {
    for (int co = 0; co < Cout; ++co) {
        const double* uc = u + size_t(co) * Ho * Wo;
        for (int ci = 0; ci < Cin; ++ci) {
            double* dxc = dx + size_t(ci) * H * W;
            const double* wc = w + (size_t(co) * Cin + ci) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    double wv = wc[ky * k + kx];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        const double* urow = uc + size_t(oy) * Wo;
                        double* dxrow = dxc + size_t(iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            dxrow[ix] += wv * urow[ox];
                        }
                    }
                }
            }
        }
    }
}

// dw[co,ci,ky,kx] += sum_{oy,ox} u[co,oy,ox] * x[ci, oy*s+ky-p, ox*s+kx-p]
inline void conv_dw_acc(const double* x, int Cin, int H, int W, const double* u, int Cout, int Ho,
                        int Wo, int k, int stride, int pad, double* dw) {
    for (int co = 0; co < Cout; ++co) {
        const double* uc = u + size_t(co) * Ho * Wo;
        for (int ci = 0; ci < Cin; ++ci) {
            const double* xc = x + size_t(ci) * H * W;
            double* dwc = dw + (size_t(co) * Cin + ci) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        const double* urow = uc + size_t(oy) * Wo;
                        const double* xrow = xc + size_t(iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            acc += urow[ox] * xrow[ix];
                        }
                    }
                    dwc[ky * k + kx] += acc;
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

namespace detail {
inline Tensor binary_op(Op op, const Tensor& a, const Tensor& b) {
    Tape* t = common_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    bool as = is_scalar_like(a), bs = is_scalar_like(b);
    if (!as && !bs && !same_shape(a.shape(), b.shape()))
        throw ShapeError(std::string(op_name(op)) + " operands " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + " (only scalar broadcast is supported)");
    const Shape& shape = as ? b.shape() : a.shape();
    size_t n = size_t(numel(shape));
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        double x = av[as ? 0 : i];
        double y = bv[bs ? 0 : i];
        out[i] = (op == Op::Add) ? x + y : (op == Op::Sub) ? x - y : x * y;
    }
    return Tensor(t, make_node(*t, op, shape, {a.id(), b.id()}, std::move(out)));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(Op::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(Op::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(Op::Mul, a, b); }

inline Tensor scalar_mul(const Tensor& a, double c) {
    std::vector<double> out(a.value());
    for (double& v : out) v *= c;
    int id = detail::make_node(*a.tape(), Op::ScalarMul, a.shape(), {a.id()}, std::move(out));
    a.tape()->node(id).s0 = c;
    return Tensor(a.tape(), id);
}

inline Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

namespace detail {
template <typename F>
Tensor unary_op(Op op, const Tensor& a, F f, double s0 = 0.0) {
    std::vector<double> out(a.value().size());
    const auto& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    int id = make_node(*a.tape(), op, a.shape(), {a.id()}, std::move(out));
    a.tape()->node(id).s0 = s0;
    return Tensor(a.tape(), id);
}
}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(Op::Relu, a, [](double x) { return x > 0 ? x : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.2) {
    return detail::unary_op(Op::LeakyRelu, a, [=](double x) { return x > 0 ? x : slope * x; },
                            slope);
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(Op::Tanh, a, [](double x) { return std::tanh(x); });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(Op::Sigmoid, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(Op::Abs, a, [](double x) { return std::fabs(x); });
}

// For p < 0 the value at x == 0 is defined as 0. The only place a negative
// exponent arises is the gradient graph of sqrt/norm terms, where the true
// composite derivative vanishes at that point.
inline Tensor power(const Tensor& a, double p) {
    return detail::unary_op(Op::Power, a,
                            [=](double x) {
                                if (x == 0.0 && p < 0.0) return 0.0;
                                return std::pow(x, p);
                            },
                            p);
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(Op::Sqrt, a, [](double x) { return std::sqrt(x); });
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.value()) acc += v;
    return Tensor(a.tape(), detail::make_node(*a.tape(), Op::SumAll, Shape{}, {a.id()}, {acc}));
}

inline Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.value()) acc += v;
    return Tensor(a.tape(), detail::make_node(*a.tape(), Op::MeanAll, Shape{}, {a.id()},
                                              {acc / double(a.numel())}));
}

inline Tensor square_norm(const Tensor& a) { return sum(mul(a, a)); }

namespace detail {
// iteration pattern shared by axis reductions / softmax / broadcast:
// shape = outer x n x inner, where n is the extent along `axis`
struct AxisSplit {
    int64_t outer = 1, n = 1, inner = 1;
};
inline AxisSplit axis_split(const Shape& s, int axis) {
    if (axis < 0 || axis >= int(s.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) sp.outer *= s[i];
    sp.n = s[axis];
    for (int i = axis + 1; i < int(s.size()); ++i) sp.inner *= s[i];
    return sp;
}
}  // namespace detail

inline Tensor sum_axis(const Tensor& a, int axis) {
    auto sp = detail::axis_split(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    std::vector<double> out(size_t(sp.outer * sp.inner), 0.0);
    const auto& av = a.value();
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < sp.n; ++j)
            for (int64_t i = 0; i < sp.inner; ++i)
                out[size_t(o * sp.inner + i)] += av[size_t((o * sp.n + j) * sp.inner + i)];
    int id = detail::make_node(*a.tape(), Op::SumAxis, out_shape, {a.id()}, std::move(out));
    a.tape()->node(id).a0 = axis;
    return Tensor(a.tape(), id);
}

inline Tensor mean_axis(const Tensor& a, int axis) {
    int n = a.shape()[size_t(axis)];
    return scalar_mul(sum_axis(a, axis), 1.0 / double(n));
}

inline Tensor softmax(const Tensor& a, int axis) {
    auto sp = detail::axis_split(a.shape(), axis);
    std::vector<double> out(a.value().size());
    const auto& av = a.value();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < sp.n; ++j)
                mx = std::max(mx, av[size_t((o * sp.n + j) * sp.inner + i)]);
            double z = 0.0;
            for (int64_t j = 0; j < sp.n; ++j) {
                size_t ix = size_t((o * sp.n + j) * sp.inner + i);
                out[ix] = std::exp(av[ix] - mx);
                z += out[ix];
            }
            for (int64_t j = 0; j < sp.n; ++j) out[size_t((o * sp.n + j) * sp.inner + i)] /= z;
        }
    }
    int id = detail::make_node(*a.tape(), Op::Softmax, a.shape(), {a.id()}, std::move(out));
    a.tape()->node(id).a0 = axis;
    return Tensor(a.tape(), id);
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    if (numel(shape) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    return Tensor(a.tape(),
                  detail::make_node(*a.tape(), Op::Reshape, shape, {a.id()}, a.value()));
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("transpose2d expects rank 2, got " + shape_str(a.shape()));
    int r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(size_t(r) * c);
    const auto& av = a.value();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[size_t(j) * r + i] = av[size_t(i) * c + j];
    return Tensor(a.tape(),
                  detail::make_node(*a.tape(), Op::Transpose2d, Shape{c, r}, {a.id()}, std::move(out)));
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat of an empty list");
    Tape* t = xs[0].tape();
    const Shape& ref = xs[0].shape();
    if (axis < 0 || axis >= int(ref.size()))
        throw ShapeError("concat axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    int total = 0;
    for (const Tensor& x : xs) {
        if (x.tape() != t) throw ContractError("concat operands belong to different tapes");
        if (x.shape().size() != ref.size())
            throw ShapeError("concat rank mismatch: " + shape_str(x.shape()) + " vs " + shape_str(ref));
        for (int d = 0; d < int(ref.size()); ++d)
            if (d != axis && x.shape()[size_t(d)] != ref[size_t(d)])
                throw ShapeError("concat non-axis dimension mismatch: " + shape_str(x.shape()) +
                                 " vs " + shape_str(ref) + " on axis " + std::to_string(axis));
        total += x.shape()[size_t(axis)];
    }
    Shape out_shape = ref;
    out_shape[size_t(axis)] = total;
    auto sp = detail::axis_split(out_shape, axis);
    std::vector<double> out(size_t(numel(out_shape)));
    std::vector<int> ids;
    int64_t off = 0;
    for (const Tensor& x : xs) {
        int64_t nx = x.shape()[size_t(axis)];
        const auto& xv = x.value();
        for (int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(out.data() + (o * sp.n + off) * sp.inner,
                        xv.data() + o * nx * sp.inner, size_t(nx * sp.inner) * sizeof(double));
        off += nx;
        ids.push_back(x.id());
    }
    int id = detail::make_node(*t, Op::Concat, out_shape, std::move(ids), std::move(out));
    t->node(id).a0 = axis;
    return Tensor(t, id);
}

inline Tensor slice_axis(const Tensor& a, int axis, int start, int len) {
    auto sp = detail::axis_split(a.shape(), axis);
    if (start < 0 || len <= 0 || start + len > sp.n)
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis length " + std::to_string(sp.n));
    Shape out_shape = a.shape();
    out_shape[size_t(axis)] = len;
    std::vector<double> out(size_t(sp.outer * len * sp.inner));
    const auto& av = a.value();
    for (int64_t o = 0; o < sp.outer; ++o)
        std::memcpy(out.data() + o * len * sp.inner,
                    av.data() + (o * sp.n + start) * sp.inner,
                    size_t(len * sp.inner) * sizeof(double));
    int id = detail::make_node(*a.tape(), Op::SliceAxis, out_shape, {a.id()}, std::move(out));
    Node& nd = a.tape()->node(id);
    nd.a0 = axis;
    nd.a1 = start;
    nd.a2 = len;
    return Tensor(a.tape(), id);
}

inline Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
    if (s.numel() != 1) throw ShapeError("broadcast_scalar expects a one-element tensor");
    std::vector<double> out(size_t(numel(shape)), s.value()[0]);
    return Tensor(s.tape(),
                  detail::make_node(*s.tape(), Op::BroadcastScalar, shape, {s.id()}, std::move(out)));
}

// insert a replicated axis of length n at position `axis`
inline Tensor broadcast_axis(const Tensor& a, int axis, int n) {
    if (axis < 0 || axis > int(a.shape().size()))
        throw ShapeError("broadcast_axis position out of range");
    Shape out_shape = a.shape();
    out_shape.insert(out_shape.begin() + axis, n);
    auto sp = detail::axis_split(out_shape, axis);
    std::vector<double> out(size_t(numel(out_shape)));
    const auto& av = a.value();
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < n; ++j)
            std::memcpy(out.data() + (o * n + j) * sp.inner, av.data() + o * sp.inner,
                        size_t(sp.inner) * sizeof(double));
    int id = detail::make_node(*a.tape(), Op::BroadcastAxis, out_shape, {a.id()}, std::move(out));
    Node& nd = a.tape()->node(id);
    nd.a0 = axis;
    nd.a1 = n;
    return Tensor(a.tape(), id);
}

// v[d] -> [d, H, W], every spatial location holding v
inline Tensor replicate_spatial(const Tensor& v, int H, int W) {
    if (v.shape().size() != 1)
        throw ShapeError("replicate_spatial expects a rank-1 tensor, got " + shape_str(v.shape()));
    int d = v.shape()[0];
    std::vector<double> out(size_t(d) * H * W);
    const auto& vv = v.value();
    for (int c = 0; c < d; ++c)
        std::fill_n(out.begin() + size_t(c) * H * W, size_t(H) * W, vv[size_t(c)]);
    int id = detail::make_node(*v.tape(), Op::ReplicateSpatial, Shape{d, H, W}, {v.id()},
                               std::move(out));
    Node& nd = v.tape()->node(id);
    nd.a0 = H;
    nd.a1 = W;
    return Tensor(v.tape(), id);
}

inline Tensor embed_rows(const Tensor& table, const std::vector<int32_t>& indices) {
    if (table.shape().size() != 2)
        throw ShapeError("embed_rows expects a rank-2 table, got " + shape_str(table.shape()));
    if (indices.empty()) throw ContractError("embed_rows requires at least one index");
    int V = table.shape()[0], d = table.shape()[1];
    std::vector<double> out(indices.size() * size_t(d));
    const auto& tv = table.value();
    for (size_t r = 0; r < indices.size(); ++r) {
        int32_t ix = indices[r];
        if (ix < 0 || ix >= V)
            throw ContractError("embed index " + std::to_string(ix) + " out of range [0," +
                                std::to_string(V) + ")");
        std::memcpy(out.data() + r * size_t(d), tv.data() + size_t(ix) * d, size_t(d) * sizeof(double));
    }
    int id = detail::make_node(*table.tape(), Op::EmbedRows, Shape{int(indices.size()), d},
                               {table.id()}, std::move(out));
    table.tape()->node(id).extra = indices;
    return Tensor(table.tape(), id);
}

// ---------------------------------------------------------------------------
// Structured ops
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    Tape* t = detail::common_tape(x, w);
    detail::common_tape(x, b);
    if (x.shape().size() != 3 || w.shape().size() != 4)
        throw ShapeError("conv2d expects x [C,H,W] and weight [Co,Ci,k,k], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    int Cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int Cout = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != Cin)
        throw ShapeError("conv2d input has " + std::to_string(Cin) + " channels but weight expects " +
                         std::to_string(w.shape()[1]));
    if (w.shape()[3] != k) throw ShapeError("conv2d kernel must be square, got " + shape_str(w.shape()));
    if (b.shape() != Shape{Cout})
        throw ShapeError("conv2d bias must be [Cout]=" + std::to_string(Cout) + ", got " +
                         shape_str(b.shape()));
    detail::check_conv_geometry(H, W, k, stride, pad);
    int Ho = detail::conv_out_dim(H, k, stride, pad);
    int Wo = detail::conv_out_dim(W, k, stride, pad);
    std::vector<double> out(size_t(Cout) * Ho * Wo, 0.0);
    detail::conv_fwd_acc(x.value().data(), Cin, H, W, w.value().data(), Cout, k, stride, pad,
                         out.data(), Ho, Wo);
    const auto& bv = b.value();
    for (int co = 0; co < Cout; ++co) {
        double bias = bv[size_t(co)];
        if (bias != 0.0)
            for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) out[size_t(co) * Ho * Wo + i] += bias;
    }
    int id = detail::make_node(*t, Op::Conv2d, Shape{Cout, Ho, Wo}, {x.id(), w.id(), b.id()},
                               std::move(out));
    Node& nd = t->node(id);
    nd.a0 = stride;
    nd.a1 = pad;
    return Tensor(t, id);
}

// gradient of conv2d w.r.t. its input, exposed as an op so the MA-GP graph can
// be differentiated again by the plain backward pass
inline Tensor conv2d_grad_input(const Tensor& u, const Tensor& w, int stride, int pad, int H, int W) {
    Tape* t = detail::common_tape(u, w);
    int Cout = u.shape()[0], Ho = u.shape()[1], Wo = u.shape()[2];
    int Cin = w.shape()[1], k = w.shape()[2];
    if (w.shape()[0] != Cout) throw ShapeError("conv2d_grad_input channel mismatch");
    std::vector<double> out(size_t(Cin) * H * W, 0.0);
    detail::conv_dx_acc(u.value().data(), Cout, Ho, Wo, w.value().data(), Cin, k, stride, pad,
                        out.data(), H, W);
    int id = detail::make_node(*t, Op::ConvDX, Shape{Cin, H, W}, {u.id(), w.id()}, std::move(out));
    Node& nd = t->node(id);
    nd.a0 = stride;
    nd.a1 = pad;
    return Tensor(t, id);
}

inline Tensor conv2d_grad_weight(const Tensor& x, const Tensor& u, int stride, int pad, int k) {
    Tape* t = detail::common_tape(x, u);
    int Cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int Cout = u.shape()[0], Ho = u.shape()[1], Wo = u.shape()[2];
    std::vector<double> out(size_t(Cout) * Cin * k * k, 0.0);
    detail::conv_dw_acc(x.value().data(), Cin, H, W, u.value().data(), Cout, Ho, Wo, k, stride,
                        pad, out.data());
    int id = detail::make_node(*t, Op::ConvDW, Shape{Cout, Cin, k, k}, {x.id(), u.id()},
                               std::move(out));
    Node& nd = t->node(id);
    nd.a0 = stride;
    nd.a1 = pad;
    return Tensor(t, id);
}

inline Tensor max_pool2d(const Tensor& x, int k, int stride, int pad) {
    if (x.shape().size() != 3)
        throw ShapeError("max_pool2d expects [C,H,W], got " + shape_str(x.shape()));
    if (k <= 0 || stride <= 0) throw ContractError("max_pool2d requires k > 0 and stride > 0");
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    detail::check_conv_geometry(H, W, k, stride, pad);
    int Ho = detail::conv_out_dim(H, k, stride, pad);
    int Wo = detail::conv_out_dim(W, k, stride, pad);
    std::vector<double> out(size_t(C) * Ho * Wo);
    std::vector<int32_t> arg(out.size());
    const auto& xv = x.value();
    for (int c = 0; c < C; ++c) {
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                int32_t best_ix = -1;
                // padding has -inf semantics; ties go to the first window
                // element in row-major order (strict > keeps the first hit)
                for (int ky = 0; ky < k; ++ky) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        double v = xv[(size_t(c) * H + iy) * W + ix];
                        if (v > best) {
                            best = v;
                            best_ix = int32_t((size_t(c) * H + iy) * W + ix);
                        }
                    }
                }
                size_t oix = (size_t(c) * Ho + oy) * Wo + ox;
                out[oix] = best;
                arg[oix] = best_ix;
            }
        }
    }
    int id = detail::make_node(*x.tape(), Op::MaxPool2d, Shape{C, Ho, Wo}, {x.id()}, std::move(out));
    Node& nd = x.tape()->node(id);
    nd.a0 = k;
    nd.a1 = stride;
    nd.a2 = pad;
    nd.extra = std::move(arg);
    return Tensor(x.tape(), id);
}

// affine map over the trailing axis; x rank 1 ([n] -> [m]) or rank 2 ([B,n] -> [B,m])
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tape* t = detail::common_tape(x, w);
    if (w.shape().size() != 2)
        throw ShapeError("linear weight must be rank 2 [m,n], got " + shape_str(w.shape()));
    int m = w.shape()[0], n = w.shape()[1];
    int rank = int(x.shape().size());
    if (rank != 1 && rank != 2)
        throw ShapeError("linear input must be rank 1 or 2, got " + shape_str(x.shape()));
    int xn = x.shape()[size_t(rank - 1)];
    if (xn != n)
        throw ShapeError("linear trailing dimension " + std::to_string(xn) +
                         " does not match weight width " + std::to_string(n));
    bool has_bias = b.valid();
    if (has_bias) {
        detail::common_tape(x, b);
        if (b.shape() != Shape{m})
            throw ShapeError("linear bias must be [m]=" + std::to_string(m) + ", got " +
                             shape_str(b.shape()));
    }
    int B = rank == 2 ? x.shape()[0] : 1;
    std::vector<double> out(size_t(B) * m, 0.0);
    const auto& xv = x.value();
    const auto& wv = w.value();
    for (int r = 0; r < B; ++r) {
        const double* xr = xv.data() + size_t(r) * n;
        double* orow = out.data() + size_t(r) * m;
        for (int j = 0; j < m; ++j) {
            const double* wr = wv.data() + size_t(j) * n;
            double acc = has_bias ? b.value()[size_t(j)] : 0.0;
            for (int i = 0; i < n; ++i) acc += xr[i] * wr[i];
            orow[j] = acc;
        }
    }
    Shape out_shape = rank == 2 ? Shape{B, m} : Shape{m};
    std::vector<int> ins = {x.id(), w.id()};
    if (has_bias) ins.push_back(b.id());
    return Tensor(t, detail::make_node(*t, Op::Linear, out_shape, std::move(ins), std::move(out)));
}

inline Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor()); }

inline Tensor upsample_nearest2x(const Tensor& x) {
    if (x.shape().size() != 3)
        throw ShapeError("upsample_nearest2x expects [C,H,W], got " + shape_str(x.shape()));
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    std::vector<double> out(size_t(C) * 4 * H * W);
    const auto& xv = x.value();
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int x2 = 0; x2 < 2 * W; ++x2)
                out[(size_t(c) * 2 * H + y) * 2 * W + x2] = xv[(size_t(c) * H + y / 2) * W + x2 / 2];
    return Tensor(x.tape(), detail::make_node(*x.tape(), Op::Upsample2x, Shape{C, 2 * H, 2 * W},
                                              {x.id()}, std::move(out)));
}

// x[C,H,W] * indicator(M == which), broadcast over channels; the mask is data,
// not a differentiable node
inline Tensor mask_mul(const Tensor& x, const MaskGrid& m, bool keep_invalid) {
    if (x.shape().size() != 3)
        throw ShapeError("mask_mul expects [C,H,W], got " + shape_str(x.shape()));
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (m.h != H || m.w != W)
        throw ShapeError("mask " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                         " does not match feature " + std::to_string(H) + "x" + std::to_string(W));
    std::vector<double> out(x.value().size(), 0.0);
    const auto& xv = x.value();
    uint8_t want = keep_invalid ? 1 : 0;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i)
            if (m.cells[size_t(i)] == want) out[size_t(c) * H * W + i] = xv[size_t(c) * H * W + i];
    int id = detail::make_node(*x.tape(), Op::MaskMul, x.shape(), {x.id()}, std::move(out));
    Node& nd = x.tape()->node(id);
    nd.mask = std::make_shared<MaskGrid>(m);
    nd.a0 = keep_invalid ? 1 : 0;
    return Tensor(x.tape(), id);
}

// Per channel, standardize valid positions by valid-only statistics and
// invalid positions by invalid-only statistics. Empty or (numerically) zero
// variance regions output 0. Population variance, no epsilon.
inline Tensor region_standardize(const Tensor& x, const MaskGrid& m) {
    if (x.shape().size() != 3)
        throw ShapeError("region_standardize expects [C,H,W], got " + shape_str(x.shape()));
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (m.h != H || m.w != W)
        throw ShapeError("mask " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                         " does not match feature " + std::to_string(H) + "x" + std::to_string(W));
    constexpr double kTinyVar = 1e-24;
    std::vector<double> out(x.value().size(), 0.0);
    std::vector<double> inv_std(size_t(C) * 2, 0.0);
    const auto& xv = x.value();
    int64_t hw = int64_t(H) * W;
    for (int c = 0; c < C; ++c) {
        for (int region = 0; region < 2; ++region) {
            double s = 0.0;
            int64_t n = 0;
            for (int64_t i = 0; i < hw; ++i)
                if (m.cells[size_t(i)] == region) {
                    s += xv[size_t(c) * hw + i];
                    ++n;
                }
            if (n == 0) continue;
            double mu = s / double(n);
            double var = 0.0;
            for (int64_t i = 0; i < hw; ++i)
                if (m.cells[size_t(i)] == region) {
                    double d = xv[size_t(c) * hw + i] - mu;
                    var += d * d;
                }
            var /= double(n);
            if (var <= kTinyVar) continue;  // region output stays 0
            double is = 1.0 / std::sqrt(var);
            inv_std[size_t(c) * 2 + region] = is;
            for (int64_t i = 0; i < hw; ++i)
                if (m.cells[size_t(i)] == region)
                    out[size_t(c) * hw + i] = (xv[size_t(c) * hw + i] - mu) * is;
        }
    }
    int id = detail::make_node(*x.tape(), Op::RegionStd, x.shape(), {x.id()}, std::move(out));
    Node& nd = x.tape()->node(id);
    nd.mask = std::make_shared<MaskGrid>(m);
    nd.saved = std::move(inv_std);
    return Tensor(x.tape(), id);
}

// y[c,h,w] = x[c,h,w] * gamma[c] + beta[c]
inline Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    Tape* t = detail::common_tape(x, gamma);
    detail::common_tape(x, beta);
    if (x.shape().size() != 3)
        throw ShapeError("channel_affine expects [C,H,W], got " + shape_str(x.shape()));
    int C = x.shape()[0];
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("channel_affine scale/shift must be [C]=" + std::to_string(C));
    int64_t hw = int64_t(x.shape()[1]) * x.shape()[2];
    std::vector<double> out(x.value().size());
    const auto& xv = x.value();
    for (int c = 0; c < C; ++c) {
        double g = gamma.value()[size_t(c)], b = beta.value()[size_t(c)];
        for (int64_t i = 0; i < hw; ++i) out[size_t(c) * hw + i] = xv[size_t(c) * hw + i] * g + b;
    }
    return Tensor(t, detail::make_node(*t, Op::ChannelAffine, x.shape(),
                                       {x.id(), gamma.id(), beta.id()}, std::move(out)));
}

// ---------------------------------------------------------------------------
// Numeric backward
// ---------------------------------------------------------------------------

inline void Tape::backward(const Tensor& loss) {
    if (loss.tape() != this) throw ContractError("loss belongs to a different tape");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " +
                                               shape_str(loss.shape()));
    if (backward_done_)
        throw ContractError("backward called twice on one tape without zero_grad()");
    backward_done_ = true;
    for (Node& n : nodes_)
        if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
    Node& ln = node(loss.id());
    if (!ln.requires_grad) return;  // loss does not depend on any gradient-tracked leaf
    ln.grad[0] = 1.0;
    for (int id = loss.id(); id >= 0; --id) {
        Node& n = node(id);
        if (!n.requires_grad || n.op == Op::Leaf) continue;
        bool any = false;
        for (double g : n.grad)
            if (g != 0.0) {
                any = true;
                break;
            }
        if (any) backward_node(id);
    }
}

inline void Tape::zero_grad() {
    for (Node& n : nodes_) n.grad.clear();
    backward_done_ = false;
}

namespace detail {
inline void add_into(std::vector<double>& dst, const double* src, size_t n, double scale = 1.0) {
    for (size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
}
}  // namespace detail

inline void Tape::backward_node(int id) {
    Node& n = node(id);
    const std::vector<double>& g = n.grad;
    auto in = [&](int pos) -> Node& { return node(n.inputs[size_t(pos)]); };
    auto rg = [&](int pos) { return in(pos).requires_grad; };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add:
        case Op::Sub: {
            double sgn = n.op == Op::Sub ? -1.0 : 1.0;
            for (int pos = 0; pos < 2; ++pos) {
                if (!rg(pos)) continue;
                Node& i = in(pos);
                double s = pos == 0 ? 1.0 : sgn;
                if (i.value.size() == g.size()) {
                    detail::add_into(i.grad, g.data(), g.size(), s);
                } else {  // scalar operand
                    double acc = 0.0;
                    for (double gv : g) acc += gv;
                    i.grad[0] += s * acc;
                }
            }
            break;
        }
        case Op::Mul: {
            Node& a = in(0);
            Node& b = in(1);
            bool as = a.value.size() == 1 && g.size() != 1;
            bool bs = b.value.size() == 1 && g.size() != 1;
            if (a.requires_grad) {
                if (as) {
                    double acc = 0.0;
                    for (size_t i = 0; i < g.size(); ++i) acc += g[i] * b.value[bs ? 0 : i];
                    a.grad[0] += acc;
                } else {
                    for (size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * b.value[bs ? 0 : i];
                }
            }
            if (b.requires_grad) {
                if (bs) {
                    double acc = 0.0;
                    for (size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value[as ? 0 : i];
                    b.grad[0] += acc;
                } else {
                    for (size_t i = 0; i < g.size(); ++i) b.grad[i] += g[i] * a.value[as ? 0 : i];
                }
            }
            break;
        }
        case Op::ScalarMul:
            if (rg(0)) detail::add_into(in(0).grad, g.data(), g.size(), n.s0);
            break;
        case Op::Relu:
            if (rg(0)) {
                Node& a = in(0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (a.value[i] > 0) a.grad[i] += g[i];
            }
            break;
        case Op::LeakyRelu:
            if (rg(0)) {
                Node& a = in(0);
                for (size_t i = 0; i < g.size(); ++i)
                    a.grad[i] += g[i] * (a.value[i] > 0 ? 1.0 : n.s0);
            }
            break;
        case Op::Tanh:
            if (rg(0))
                for (size_t i = 0; i < g.size(); ++i)
                    in(0).grad[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
            break;
        case Op::Sigmoid:
            if (rg(0))
                for (size_t i = 0; i < g.size(); ++i)
                    in(0).grad[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
            break;
        case Op::Abs:
            if (rg(0)) {
                Node& a = in(0);
                for (size_t i = 0; i < g.size(); ++i) {
                    double s = a.value[i] > 0 ? 1.0 : (a.value[i] < 0 ? -1.0 : 0.0);
                    a.grad[i] += g[i] * s;
                }
            }
            break;
        case Op::Power:
            if (rg(0)) {
                Node& a = in(0);
                for (size_t i = 0; i < g.size(); ++i) {
                    double x = a.value[i];
                    if (x == 0.0 && n.s0 < 1.0) continue;  // see power() note
                    a.grad[i] += g[i] * n.s0 * std::pow(x, n.s0 - 1.0);
                }
            }
            break;
        case Op::Sqrt:
            if (rg(0)) {
                Node& a = in(0);
                // derivative taken as 0 at x == 0 so composites like
                // (||grad||)^p with p > 1 differentiate to their true value
                for (size_t i = 0; i < g.size(); ++i)
                    if (a.value[i] != 0.0) a.grad[i] += g[i] * 0.5 / n.value[i];
            }
            break;
        case Op::SumAll:
            if (rg(0)) {
                Node& a = in(0);
                for (double& gv : a.grad) gv += g[0];
            }
            break;
        case Op::MeanAll:
            if (rg(0)) {
                Node& a = in(0);
                double s = g[0] / double(a.value.size());
                for (double& gv : a.grad) gv += s;
            }
            break;
        case Op::SumAxis: {
            if (!rg(0)) break;
            Node& a = in(0);
            auto sp = detail::axis_split(a.shape, n.a0);
            for (int64_t o = 0; o < sp.outer; ++o)
                for (int64_t j = 0; j < sp.n; ++j)
                    for (int64_t i = 0; i < sp.inner; ++i)
                        a.grad[size_t((o * sp.n + j) * sp.inner + i)] +=
                            g[size_t(o * sp.inner + i)];
            break;
        }
        case Op::Softmax: {
            if (!rg(0)) break;
            Node& a = in(0);
            auto sp = detail::axis_split(n.shape, n.a0);
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < sp.n; ++j) {
                        size_t ix = size_t((o * sp.n + j) * sp.inner + i);
                        dot += g[ix] * n.value[ix];
                    }
                    for (int64_t j = 0; j < sp.n; ++j) {
                        size_t ix = size_t((o * sp.n + j) * sp.inner + i);
                        a.grad[ix] += n.value[ix] * (g[ix] - dot);
                    }
                }
            }
            break;
        }
        case Op::Conv2d: {
            int Cin = in(0).shape[0], H = in(0).shape[1], W = in(0).shape[2];
            int Cout = n.shape[0], Ho = n.shape[1], Wo = n.shape[2];
            int k = in(1).shape[2];
            if (rg(0))
                detail::conv_dx_acc(g.data(), Cout, Ho, Wo, in(1).value.data(), Cin, k, n.a0, n.a1,
                                    in(0).grad.data(), H, W);
            if (rg(1))
                detail::conv_dw_acc(in(0).value.data(), Cin, H, W, g.data(), Cout, Ho, Wo, k, n.a0,
                                    n.a1, in(1).grad.data());
            if (n.inputs.size() > 2 && rg(2)) {
                for (int co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) acc += g[size_t(co) * Ho * Wo + i];
                    in(2).grad[size_t(co)] += acc;
                }
            }
            break;
        }
        case Op::ConvDX: {
            // n = conv_dx(u, w); cotangent g has the conv input's shape
            Node& u = in(0);
            Node& w = in(1);
            int Cout = u.shape[0], Ho = u.shape[1], Wo = u.shape[2];
            int Cin = n.shape[0], H = n.shape[1], W = n.shape[2];
            int k = w.shape[2];
            if (rg(0))
                detail::conv_fwd_acc(g.data(), Cin, H, W, w.value.data(), Cout, k, n.a0, n.a1,
                                     u.grad.data(), Ho, Wo);
            if (rg(1))
                detail::conv_dw_acc(g.data(), Cin, H, W, u.value.data(), Cout, Ho, Wo, k, n.a0,
                                    n.a1, w.grad.data());
            break;
        }
        case Op::ConvDW: {
            // n = conv_dw(x, u); cotangent g has the weight's shape
            Node& x = in(0);
            Node& u = in(1);
            int Cin = x.shape[0], H = x.shape[1], W = x.shape[2];
            int Cout = u.shape[0], Ho = u.shape[1], Wo = u.shape[2];
            int k = n.shape[2];
            if (rg(0))
                detail::conv_dx_acc(u.value.data(), Cout, Ho, Wo, g.data(), Cin, k, n.a0, n.a1,
                                    x.grad.data(), H, W);
            if (rg(1))
                detail::conv_fwd_acc(x.value.data(), Cin, H, W, g.data(), Cout, k, n.a0, n.a1,
                                     u.grad.data(), Ho, Wo);
            break;
        }
        case Op::MaxPool2d:
            if (rg(0)) {
                Node& a = in(0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (n.extra[i] >= 0) a.grad[size_t(n.extra[i])] += g[i];
            }
            break;
        case Op::Linear: {
            Node& x = in(0);
            Node& w = in(1);
            int m = w.shape[0], nn = w.shape[1];
            int B = x.shape.size() == 2 ? x.shape[0] : 1;
            if (rg(0)) {
                for (int r = 0; r < B; ++r)
                    for (int j = 0; j < m; ++j) {
                        double gv = g[size_t(r) * m + j];
                        if (gv == 0.0) continue;
                        const double* wr = w.value.data() + size_t(j) * nn;
                        double* xg = x.grad.data() + size_t(r) * nn;
                        for (int i = 0; i < nn; ++i) xg[i] += gv * wr[i];
                    }
            }
            if (rg(1)) {
                for (int r = 0; r < B; ++r)
                    for (int j = 0; j < m; ++j) {
                        double gv = g[size_t(r) * m + j];
                        if (gv == 0.0) continue;
                        const double* xr = x.value.data() + size_t(r) * nn;
                        double* wg = w.grad.data() + size_t(j) * nn;
                        for (int i = 0; i < nn; ++i) wg[i] += gv * xr[i];
                    }
            }
            if (n.inputs.size() > 2 && rg(2)) {
                for (int r = 0; r < B; ++r)
                    for (int j = 0; j < m; ++j) in(2).grad[size_t(j)] += g[size_t(r) * m + j];
            }
            break;
        }
        case Op::Upsample2x: {
            if (!rg(0)) break;
            Node& a = in(0);
            int C = a.shape[0], H = a.shape[1], W = a.shape[2];
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int x2 = 0; x2 < 2 * W; ++x2)
                        a.grad[(size_t(c) * H + y / 2) * W + x2 / 2] +=
                            g[(size_t(c) * 2 * H + y) * 2 * W + x2];
            break;
        }
        case Op::Concat: {
            auto sp = detail::axis_split(n.shape, n.a0);
            int64_t off = 0;
            for (size_t pos = 0; pos < n.inputs.size(); ++pos) {
                Node& a = in(int(pos));
                int64_t na = a.shape[size_t(n.a0)];
                if (a.requires_grad)
                    for (int64_t o = 0; o < sp.outer; ++o)
                        for (int64_t i = 0; i < na * sp.inner; ++i)
                            a.grad[size_t(o * na * sp.inner + i)] +=
                                g[size_t((o * sp.n + off) * sp.inner + i)];
                off += na;
            }
            break;
        }
        case Op::SliceAxis: {
            if (!rg(0)) break;
            Node& a = in(0);
            auto sp = detail::axis_split(a.shape, n.a0);
            for (int64_t o = 0; o < sp.outer; ++o)
                for (int64_t i = 0; i < int64_t(n.a2) * sp.inner; ++i)
                    a.grad[size_t((o * sp.n + n.a1) * sp.inner + i)] +=
                        g[size_t(o * n.a2 * sp.inner + i)];
            break;
        }
        case Op::Reshape:
            if (rg(0)) detail::add_into(in(0).grad, g.data(), g.size());
            break;
        case Op::Transpose2d: {
            if (!rg(0)) break;
            Node& a = in(0);
            int r = a.shape[0], c = a.shape[1];
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) a.grad[size_t(i) * c + j] += g[size_t(j) * r + i];
            break;
        }
        case Op::BroadcastScalar:
            if (rg(0)) {
                double acc = 0.0;
                for (double gv : g) acc += gv;
                in(0).grad[0] += acc;
            }
            break;
        case Op::BroadcastAxis: {
            if (!rg(0)) break;
            Node& a = in(0);
            auto sp = detail::axis_split(n.shape, n.a0);
            for (int64_t o = 0; o < sp.outer; ++o)
                for (int64_t j = 0; j < sp.n; ++j)
                    for (int64_t i = 0; i < sp.inner; ++i)
                        a.grad[size_t(o * sp.inner + i)] += g[size_t((o * sp.n + j) * sp.inner + i)];
            break;
        }
        case Op::ReplicateSpatial: {
            if (!rg(0)) break;
            Node& a = in(0);
            int64_t hw = int64_t(n.a0) * n.a1;
            for (int c = 0; c < n.shape[0]; ++c) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += g[size_t(c) * hw + i];
                a.grad[size_t(c)] += acc;
            }
            break;
        }
        case Op::EmbedRows: {
            if (!rg(0)) break;
            Node& table = in(0);
            int d = table.shape[1];
            for (size_t r = 0; r < n.extra.size(); ++r)
                for (int i = 0; i < d; ++i)
                    table.grad[size_t(n.extra[r]) * d + i] += g[r * size_t(d) + i];
            break;
        }
        case Op::MaskMul: {
            if (!rg(0)) break;
            Node& a = in(0);
            int64_t hw = int64_t(n.shape[1]) * n.shape[2];
            uint8_t want = n.a0 ? 1 : 0;
            for (int c = 0; c < n.shape[0]; ++c)
                for (int64_t i = 0; i < hw; ++i)
                    if (n.mask->cells[size_t(i)] == want)
                        a.grad[size_t(c) * hw + i] += g[size_t(c) * hw + i];
            break;
        }
        case Op::RegionStd: {
            if (!rg(0)) break;
            Node& a = in(0);
            int C = n.shape[0];
            int64_t hw = int64_t(n.shape[1]) * n.shape[2];
            for (int c = 0; c < C; ++c) {
                for (int region = 0; region < 2; ++region) {
                    double is = n.saved[size_t(c) * 2 + region];
                    if (is == 0.0) continue;  // empty or degenerate region: flat zero output
                    double gbar = 0.0, gy = 0.0;
                    int64_t cnt = 0;
                    for (int64_t i = 0; i < hw; ++i)
                        if (n.mask->cells[size_t(i)] == region) {
                            size_t ix = size_t(c) * hw + i;
                            gbar += g[ix];
                            gy += g[ix] * n.value[ix];
                            ++cnt;
                        }
                    gbar /= double(cnt);
                    gy /= double(cnt);
                    for (int64_t i = 0; i < hw; ++i)
                        if (n.mask->cells[size_t(i)] == region) {
                            size_t ix = size_t(c) * hw + i;
                            a.grad[ix] += is * (g[ix] - gbar - n.value[ix] * gy);
                        }
                }
            }
            break;
        }
        case Op::ChannelAffine: {
            Node& x = in(0);
            Node& gamma = in(1);
            Node& beta = in(2);
            int C = n.shape[0];
            int64_t hw = int64_t(n.shape[1]) * n.shape[2];
            for (int c = 0; c < C; ++c) {
                double gc = gamma.value[size_t(c)];
                double dgamma = 0.0, dbeta = 0.0;
                for (int64_t i = 0; i < hw; ++i) {
                    size_t ix = size_t(c) * hw + i;
                    if (x.requires_grad) x.grad[ix] += g[ix] * gc;
                    dgamma += g[ix] * x.value[ix];
                    dbeta += g[ix];
                }
                if (gamma.requires_grad) gamma.grad[size_t(c)] += dgamma;
                if (beta.requires_grad) beta.grad[size_t(c)] += dbeta;
            }
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient-as-graph (double backward support)
// ---------------------------------------------------------------------------

inline Tensor Tape::vjp(int id, int input_pos, const Tensor& cot) {
    Node& n = node(id);
    Tensor self(this, id);
    auto input = [&](int pos) { return Tensor(this, n.inputs[size_t(pos)]); };
    switch (n.op) {
        case Op::Add:
        case Op::Sub: {
            double sgn = (n.op == Op::Sub && input_pos == 1) ? -1.0 : 1.0;
            Tensor c = sgn == 1.0 ? cot : scalar_mul(cot, -1.0);
            // scalar operand gets the reduced cotangent
            if (input(input_pos).numel() == 1 && cot.numel() != 1)
                return reshape(sum(c), input(input_pos).shape());
            return c;
        }
        case Op::Mul: {
            Tensor other = input(1 - input_pos);
            Tensor c = mul(cot, other);
            if (input(input_pos).numel() == 1 && c.numel() != 1)
                return reshape(sum(c), input(input_pos).shape());
            return c;
        }
        case Op::ScalarMul:
            return scalar_mul(cot, n.s0);
        case Op::LeakyRelu:
        case Op::Relu: {
            // the {1, slope} mask is locally constant, so it enters the grad
            // graph as data
            double slope = n.op == Op::Relu ? 0.0 : n.s0;
            const Node& a = node(n.inputs[0]);
            std::vector<double> mask(a.value.size());
            for (size_t i = 0; i < mask.size(); ++i) mask[i] = a.value[i] > 0 ? 1.0 : slope;
            Tensor m = constant(a.shape, std::move(mask));
            return mul(cot, m);
        }
        case Op::Power: {
            Tensor x = input(0);
            return scalar_mul(mul(cot, power(x, n.s0 - 1.0)), n.s0);
        }
        case Op::Sqrt: {
            Tensor x = input(0);
            return scalar_mul(mul(cot, power(x, -0.5)), 0.5);
        }
        case Op::SumAll:
            return broadcast_scalar(cot, node(n.inputs[0]).shape);
        case Op::MeanAll:
            return scalar_mul(broadcast_scalar(cot, node(n.inputs[0]).shape),
                              1.0 / double(node(n.inputs[0]).value.size()));
        case Op::SumAxis:
            return broadcast_axis(cot, n.a0, node(n.inputs[0]).shape[size_t(n.a0)]);
        case Op::Conv2d: {
            Tensor x = input(0), w = input(1);
            int H = x.shape()[1], W = x.shape()[2];
            if (input_pos == 0) return conv2d_grad_input(cot, w, n.a0, n.a1, H, W);
            if (input_pos == 1) return conv2d_grad_weight(x, cot, n.a0, n.a1, w.shape()[2]);
            // bias: sum the cotangent over spatial positions
            int Cout = n.shape[0];
            return sum_axis(reshape(cot, Shape{Cout, n.shape[1] * n.shape[2]}), 1);
        }
        case Op::Linear: {
            Tensor x = input(0), w = input(1);
            bool vec = x.shape().size() == 1;
            Tensor c2 = vec ? reshape(cot, Shape{1, w.shape()[0]}) : cot;
            Tensor x2 = vec ? reshape(x, Shape{1, w.shape()[1]}) : x;
            if (input_pos == 0) {
                Tensor dx = linear(c2, transpose2d(w));
                return vec ? reshape(dx, x.shape()) : dx;
            }
            if (input_pos == 1) return linear(transpose2d(c2), transpose2d(x2));
            return sum_axis(c2, 0);
        }
        case Op::Concat: {
            auto sp = detail::axis_split(n.shape, n.a0);
            (void)sp;
            int start = 0;
            for (int pos = 0; pos < input_pos; ++pos)
                start += node(n.inputs[size_t(pos)]).shape[size_t(n.a0)];
            int len = node(n.inputs[size_t(input_pos)]).shape[size_t(n.a0)];
            return slice_axis(cot, n.a0, start, len);
        }
        case Op::Reshape:
            return reshape(cot, node(n.inputs[0]).shape);
        case Op::Transpose2d:
            return transpose2d(cot);
        case Op::BroadcastScalar:
            return reshape(sum(cot), node(n.inputs[0]).shape);
        case Op::BroadcastAxis:
            return sum_axis(cot, n.a0);
        case Op::ReplicateSpatial: {
            int d = n.shape[0];
            return sum_axis(reshape(cot, Shape{d, n.a0 * n.a1}), 1);
        }
        default:
            throw UnsupportedOpError(std::string(op_name(n.op)) +
                                     " has no double-backward rule; the gradient-penalty path "
                                     "supports conv2d, linear, leaky_relu, add, mul, sum, power, "
                                     "sqrt, concat and shape plumbing only");
    }
}

inline Tensor Tape::grad(const Tensor& scalar_out, const Tensor& wrt) {
    if (scalar_out.tape() != this || wrt.tape() != this)
        throw ContractError("grad() arguments belong to a different tape");
    if (scalar_out.numel() != 1)
        throw ContractError("grad() requires a scalar output, got shape " +
                            shape_str(scalar_out.shape()));
    int top = scalar_out.id();
    int target = wrt.id();
    if (target > top) return full(wrt.shape(), 0.0);

    // nodes that can reach the target backwards (i.e. depend on wrt)
    std::vector<char> reach(size_t(top) + 1, 0);
    reach[size_t(target)] = 1;
    for (int id = target + 1; id <= top; ++id)
        for (int inp : node(id).inputs)
            if (inp <= top && reach[size_t(inp)]) {
                reach[size_t(id)] = 1;
                break;
            }
    if (!reach[size_t(top)]) return full(wrt.shape(), 0.0);

    std::vector<int> cot(size_t(top) + 1, -1);
    cot[size_t(top)] = scalar(1.0).id();
    for (int id = top; id > target; --id) {
        if (cot[size_t(id)] < 0 || !reach[size_t(id)]) continue;
        Tensor c(this, cot[size_t(id)]);
        Node& n = node(id);
        if (c.numel() != int64_t(n.value.size()))
            throw ContractError("internal cotangent shape mismatch in grad()");
        for (size_t pos = 0; pos < n.inputs.size(); ++pos) {
            int inp = n.inputs[pos];
            if (!reach[size_t(inp)]) continue;
            Tensor contrib = vjp(id, int(pos), c);
            int& slot = cot[size_t(inp)];
            slot = slot < 0 ? contrib.id() : add(Tensor(this, slot), contrib).id();
        }
    }
    if (cot[size_t(target)] < 0) return full(wrt.shape(), 0.0);
    Tensor out(this, cot[size_t(target)]);
    if (out.shape() != wrt.shape()) out = reshape(out, wrt.shape());
    return out;
}

inline void Tape::dump(std::ostream& os) const {
    for (int id = 0; id < size(); ++id) {
        const Node& n = node(id);
        os << id << " " << op_name(n.op) << " in=[";
        for (size_t i = 0; i < n.inputs.size(); ++i) {
            if (i) os << ",";
            os << n.inputs[i];
        }
        os << "] shape=" << shape_str(n.shape);
        if (n.requires_grad) os << " rg";
        os << "\n";
    }
}

}  // namespace daft
