#include "memdist/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "memdist/kernels.hpp"

namespace memdist {

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::constant: return "constant";
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::add_bias: return "add_bias";
        case OpKind::add_channel_bias: return "add_channel_bias";
        case OpKind::scalar_mul: return "scalar_mul";
        case OpKind::elementwise_mul: return "elementwise_mul";
        case OpKind::relu: return "relu";
        case OpKind::relu_mask: return "relu_mask";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::reciprocal: return "reciprocal";
        case OpKind::rsqrt_eps: return "rsqrt_eps";
        case OpKind::stop_gradient: return "stop_gradient";
        case OpKind::conv2d: return "conv2d";
        case OpKind::conv2d_input_grad: return "conv2d_input_grad";
        case OpKind::conv2d_weight_grad: return "conv2d_weight_grad";
        case OpKind::spatial_mean: return "spatial_mean";
        case OpKind::avg_pool2d: return "avg_pool2d";
        case OpKind::avg_unpool2x: return "avg_unpool2x";
        case OpKind::bilinear_upsample2x: return "bilinear_upsample2x";
        case OpKind::bilinear_upsample2x_adj: return "bilinear_upsample2x_adj";
        case OpKind::reshape: return "reshape";
        case OpKind::index_select: return "index_select";
        case OpKind::index_scatter_add: return "index_scatter_add";
        case OpKind::concat: return "concat";
        case OpKind::slice_rows: return "slice_rows";
        case OpKind::row_sum: return "row_sum";
        case OpKind::row_max: return "row_max";
        case OpKind::bcast_col: return "bcast_col";
        case OpKind::col_sum: return "col_sum";
        case OpKind::bcast_row: return "bcast_row";
        case OpKind::channel_sum: return "channel_sum";
        case OpKind::bcast_channel: return "bcast_channel";
        case OpKind::select_labels: return "select_labels";
        case OpKind::scatter_labels: return "scatter_labels";
        case OpKind::sum_all: return "sum_all";
        case OpKind::bcast_fill: return "bcast_fill";
        case OpKind::augment: return "augment";
        case OpKind::augment_adj: return "augment_adj";
        case OpKind::flatten: return "flatten";
        case OpKind::instance_norm: return "instance_norm";
        case OpKind::softmax_cross_entropy_mean: return "softmax_cross_entropy_mean";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_fail(OpKind op, const std::vector<const std::vector<int>*>& shapes,
                             const std::string& why) {
    std::string msg = std::string(op_name(op)) + ": " + why + " (shapes:";
    for (auto* s : shapes) msg += " " + shape_str(*s);
    msg += ")";
    throw ShapeError(msg);
}

void require(bool ok, OpKind op, const std::vector<const std::vector<int>*>& shapes, const std::string& why) {
    if (!ok) shape_fail(op, shapes, why);
}

struct Hw {
    int bc, h, w;
};

// Spatial dims for rank-3 (C,H,W) or rank-4 (B,C,H,W) tensors.
Hw spatial_dims(const std::vector<int>& s) {
    if (s.size() == 4) return {s[0] * s[1], s[2], s[3]};
    return {s[0], s[1], s[2]};
}

}  // namespace

NodeId Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::constant(Tensor v) {
    Node n;
    n.op = OpKind::constant;
    n.value = std::move(v);
    n.requires_grad = false;
    return push(std::move(n));
}

NodeId Tape::leaf(Tensor v, const std::string& name) {
    Node n;
    n.op = OpKind::leaf;
    n.value = std::move(v);
    n.requires_grad = true;
    const NodeId id = push(std::move(n));
    if (!name.empty()) params_[name] = id;
    return id;
}

void Tape::check_shapes(OpKind op, const std::vector<NodeId>& inputs, const Attrs& attrs) const {
    std::vector<const std::vector<int>*> ss;
    ss.reserve(inputs.size());
    for (NodeId i : inputs) ss.push_back(&shape(i));
    auto rank = [&](size_t i) { return static_cast<int>(ss[i]->size()); };

    switch (op) {
        case OpKind::matmul: {
            require(inputs.size() == 2 && rank(0) == 2 && rank(1) == 2, op, ss, "expects two rank-2 inputs");
            const int ak = attrs.ta ? (*ss[0])[0] : (*ss[0])[1];
            const int bk = attrs.tb ? (*ss[1])[1] : (*ss[1])[0];
            require(ak == bk, op, ss, "inner dimensions differ");
            break;
        }
        case OpKind::add:
        case OpKind::sub:
        case OpKind::elementwise_mul:
            require(inputs.size() == 2 && *ss[0] == *ss[1], op, ss, "expects two identically shaped inputs");
            break;
        case OpKind::add_bias:
            require(inputs.size() == 2 && rank(0) == 2 && rank(1) == 1 && (*ss[0])[1] == (*ss[1])[0], op, ss,
                    "expects [B,F] plus [F]");
            break;
        case OpKind::add_channel_bias:
            require(inputs.size() == 2 && rank(0) == 4 && rank(1) == 1 && (*ss[0])[1] == (*ss[1])[0], op, ss,
                    "expects [B,C,H,W] plus [C]");
            break;
        case OpKind::scalar_mul:
        case OpKind::relu:
        case OpKind::relu_mask:
        case OpKind::exp:
        case OpKind::log:
        case OpKind::reciprocal:
        case OpKind::rsqrt_eps:
        case OpKind::stop_gradient:
            require(inputs.size() == 1, op, ss, "expects one input");
            break;
        case OpKind::conv2d:
            require(inputs.size() == 2 && rank(0) == 4 && rank(1) == 4 && (*ss[1])[1] == (*ss[0])[1] &&
                        (*ss[1])[2] == 3 && (*ss[1])[3] == 3,
                    op, ss, "expects x[B,Cin,H,W] and w[Cout,Cin,3,3]");
            break;
        case OpKind::conv2d_input_grad:
            require(inputs.size() == 2 && rank(0) == 4 && rank(1) == 4 && (*ss[1])[0] == (*ss[0])[1] &&
                        (*ss[1])[2] == 3 && (*ss[1])[3] == 3,
                    op, ss, "expects gy[B,Cout,H,W] and w[Cout,Cin,3,3]");
            break;
        case OpKind::conv2d_weight_grad:
            require(inputs.size() == 2 && rank(0) == 4 && rank(1) == 4 && (*ss[0])[0] == (*ss[1])[0] &&
                        (*ss[0])[2] == (*ss[1])[2] && (*ss[0])[3] == (*ss[1])[3],
                    op, ss, "expects x[B,Cin,H,W] and gy[B,Cout,H,W]");
            break;
        case OpKind::spatial_mean:
            require(inputs.size() == 1 && rank(0) == 4, op, ss, "expects rank-4 input");
            break;
        case OpKind::avg_pool2d:
            require(inputs.size() == 1 && (rank(0) == 3 || rank(0) == 4), op, ss, "expects image tensor");
            {
                const Hw d = spatial_dims(*ss[0]);
                require(d.h >= 2 && d.w >= 2, op, ss, "spatial dims must be >= 2");
            }
            break;
        case OpKind::avg_unpool2x:
            require(inputs.size() == 1 && (rank(0) == 3 || rank(0) == 4) && attrs.i0 / 2 == (*ss[0])[ss[0]->size() - 2] &&
                        attrs.i1 / 2 == (*ss[0])[ss[0]->size() - 1],
                    op, ss, "pooled dims must match target dims");
            break;
        case OpKind::bilinear_upsample2x:
            require(inputs.size() == 1 && (rank(0) == 3 || rank(0) == 4), op, ss, "expects image tensor");
            break;
        case OpKind::bilinear_upsample2x_adj:
            require(inputs.size() == 1 && (rank(0) == 3 || rank(0) == 4), op, ss, "expects image tensor");
            {
                const Hw d = spatial_dims(*ss[0]);
                require(d.h % 2 == 0 && d.w % 2 == 0, op, ss, "spatial dims must be even");
            }
            break;
        case OpKind::reshape:
            require(inputs.size() == 1 && shape_numel(attrs.shape) == shape_numel(*ss[0]), op, ss,
                    "element count must match target " + shape_str(attrs.shape));
            break;
        case OpKind::index_select: {
            require(inputs.size() == 1 && rank(0) >= 1 && !attrs.indices.empty(), op, ss,
                    "expects rows and nonempty indices");
            for (int r : attrs.indices)
                require(r >= 0 && r < (*ss[0])[0], op, ss, "row index out of range");
            break;
        }
        case OpKind::index_scatter_add: {
            require(inputs.size() == 1 && rank(0) >= 1 &&
                        static_cast<int>(attrs.indices.size()) == (*ss[0])[0] && attrs.i0 >= 1,
                    op, ss, "expects one index per input row");
            for (int r : attrs.indices) require(r >= 0 && r < attrs.i0, op, ss, "target row out of range");
            break;
        }
        case OpKind::concat: {
            require(!inputs.empty(), op, ss, "expects at least one input");
            for (size_t i = 1; i < ss.size(); ++i) {
                require(rank(i) == rank(0), op, ss, "rank mismatch");
                for (size_t d = 1; d < ss[0]->size(); ++d)
                    require((*ss[i])[d] == (*ss[0])[d], op, ss, "trailing dims differ");
            }
            break;
        }
        case OpKind::slice_rows:
            require(inputs.size() == 1 && attrs.i0 >= 0 && attrs.i1 >= 1 &&
                        attrs.i0 + attrs.i1 <= (*ss[0])[0],
                    op, ss, "slice out of range");
            break;
        case OpKind::row_sum:
        case OpKind::row_max:
        case OpKind::col_sum:
            require(inputs.size() == 1 && rank(0) == 2, op, ss, "expects rank-2 input");
            break;
        case OpKind::bcast_col:
        case OpKind::bcast_row:
            require(inputs.size() == 1 && rank(0) == 1 && attrs.i0 >= 1, op, ss, "expects vector input");
            break;
        case OpKind::channel_sum:
            require(inputs.size() == 1 && rank(0) == 4, op, ss, "expects rank-4 input");
            break;
        case OpKind::bcast_channel:
            require(inputs.size() == 1 && rank(0) == 1 && attrs.i0 >= 1 && attrs.i1 >= 1 && attrs.i2 >= 1,
                    op, ss, "expects [C] plus B,H,W attrs");
            break;
        case OpKind::select_labels:
            require(inputs.size() == 1 && rank(0) == 2 &&
                        static_cast<int>(attrs.indices.size()) == (*ss[0])[0],
                    op, ss, "expects one label per row");
            for (int l : attrs.indices)
                require(l >= 0 && l < (*ss[0])[1], op, ss, "label out of range");
            break;
        case OpKind::scatter_labels:
            require(inputs.size() == 1 && rank(0) == 1 &&
                        static_cast<int>(attrs.indices.size()) == (*ss[0])[0] && attrs.i0 >= 1,
                    op, ss, "expects one label per value");
            for (int l : attrs.indices) require(l >= 0 && l < attrs.i0, op, ss, "label out of range");
            break;
        case OpKind::sum_all:
            require(inputs.size() == 1, op, ss, "expects one input");
            break;
        case OpKind::bcast_fill:
            require(inputs.size() == 1 && value(inputs[0]).numel() == 1 && !attrs.shape.empty(), op, ss,
                    "expects scalar input and target shape");
            break;
        case OpKind::augment:
        case OpKind::augment_adj:
            require(inputs.size() == 1 && rank(0) == 4 &&
                        static_cast<int>(attrs.angles.size()) == (*ss[0])[0] &&
                        static_cast<int>(attrs.flips.size()) == (*ss[0])[0],
                    op, ss, "expects one transform per sample");
            break;
        default:
            throw ShapeError(std::string(op_name(op)) + ": not a primitive op");
    }
}

Tensor Tape::compute(OpKind op, const std::vector<NodeId>& inputs, const Attrs& attrs) const {
    namespace k = kernels;
    auto in = [&](size_t i) -> const Tensor& { return value(inputs[i]); };

    switch (op) {
        case OpKind::matmul: {
            const auto& sa = in(0).shape();
            const auto& sb = in(1).shape();
            const int m = attrs.ta ? sa[1] : sa[0];
            const int kk = attrs.ta ? sa[0] : sa[1];
            const int n = attrs.tb ? sb[0] : sb[1];
            Tensor out = Tensor::zeros({m, n});
            k::matmul(in(0).data(), in(1).data(), out.data(), m, kk, n, attrs.ta, attrs.tb);
            return out;
        }
        case OpKind::add: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vadd(in(0).data(), in(1).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::sub: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vsub(in(0).data(), in(1).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::add_bias: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::add_bias(in(0).data(), in(1).data(), out.data(), in(0).dim(0), in(0).dim(1));
            return out;
        }
        case OpKind::add_channel_bias: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::add_channel_bias(in(0).data(), in(1).data(), out.data(), in(0).dim(0), in(0).dim(1),
                                in(0).dim(2) * in(0).dim(3));
            return out;
        }
        case OpKind::scalar_mul: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vscale(in(0).data(), out.data(), out.numel(), attrs.scalar);
            return out;
        }
        case OpKind::elementwise_mul: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vmul(in(0).data(), in(1).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::relu: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::relu(in(0).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::relu_mask: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::relu_mask(in(0).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::exp: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vexp(in(0).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::log: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vlog(in(0).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::reciprocal: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vrecip(in(0).data(), out.data(), out.numel());
            return out;
        }
        case OpKind::rsqrt_eps: {
            Tensor out = Tensor::zeros(in(0).shape());
            k::vrsqrt_eps(in(0).data(), out.data(), out.numel(), attrs.eps);
            return out;
        }
        case OpKind::stop_gradient:
            return in(0);
        case OpKind::conv2d: {
            const auto& sx = in(0).shape();
            const int Cout = in(1).dim(0);
            Tensor out = Tensor::zeros({sx[0], Cout, sx[2], sx[3]});
            k::conv2d_fwd(in(0).data(), in(1).data(), out.data(), sx[0], sx[1], sx[2], sx[3], Cout);
            return out;
        }
        case OpKind::conv2d_input_grad: {
            const auto& sg = in(0).shape();
            const int Cin = in(1).dim(1);
            Tensor out = Tensor::zeros({sg[0], Cin, sg[2], sg[3]});
            k::conv2d_igrad(in(0).data(), in(1).data(), out.data(), sg[0], Cin, sg[2], sg[3], sg[1]);
            return out;
        }
        case OpKind::conv2d_weight_grad: {
            const auto& sx = in(0).shape();
            const int Cout = in(1).dim(1);
            Tensor out = Tensor::zeros({Cout, sx[1], 3, 3});
            k::conv2d_wgrad(in(0).data(), in(1).data(), out.data(), sx[0], sx[1], sx[2], sx[3], Cout);
            return out;
        }
        case OpKind::spatial_mean: {
            const auto& s = in(0).shape();
            Tensor out = Tensor::zeros(s);
            k::spatial_mean_bcast(in(0).data(), out.data(), s[0] * s[1], s[2] * s[3]);
            return out;
        }
        case OpKind::avg_pool2d: {
            auto s = in(0).shape();
            const Hw d = spatial_dims(s);
            s[s.size() - 2] = d.h / 2;
            s[s.size() - 1] = d.w / 2;
            Tensor out = Tensor::zeros(s);
            k::avg_pool2x(in(0).data(), out.data(), d.bc, d.h, d.w);
            return out;
        }
        case OpKind::avg_unpool2x: {
            auto s = in(0).shape();
            const Hw d = spatial_dims(s);
            s[s.size() - 2] = attrs.i0;
            s[s.size() - 1] = attrs.i1;
            Tensor out = Tensor::zeros(s);
            k::avg_unpool2x(in(0).data(), out.data(), d.bc, attrs.i0, attrs.i1);
            return out;
        }
        case OpKind::bilinear_upsample2x: {
            auto s = in(0).shape();
            const Hw d = spatial_dims(s);
            s[s.size() - 2] = 2 * d.h;
            s[s.size() - 1] = 2 * d.w;
            Tensor out = Tensor::zeros(s);
            k::bilinear_up2x(in(0).data(), out.data(), d.bc, d.h, d.w);
            return out;
        }
        case OpKind::bilinear_upsample2x_adj: {
            auto s = in(0).shape();
            const Hw d = spatial_dims(s);
            s[s.size() - 2] = d.h / 2;
            s[s.size() - 1] = d.w / 2;
            Tensor out = Tensor::zeros(s);
            k::bilinear_up2x_adj(in(0).data(), out.data(), d.bc, d.h / 2, d.w / 2);
            return out;
        }
        case OpKind::reshape:
            return in(0).reshaped(attrs.shape);
        case OpKind::index_select: {
            auto s = in(0).shape();
            const std::int64_t row = in(0).numel() / s[0];
            s[0] = static_cast<int>(attrs.indices.size());
            Tensor out = Tensor::zeros(s);
            k::index_select_rows(in(0).data(), out.data(), attrs.indices.data(),
                                 static_cast<int>(attrs.indices.size()), row);
            return out;
        }
        case OpKind::index_scatter_add: {
            auto s = in(0).shape();
            const std::int64_t row = in(0).numel() / s[0];
            const int n_idx = s[0];
            s[0] = attrs.i0;
            Tensor out = Tensor::zeros(s);
            k::index_scatter_add_rows(in(0).data(), out.data(), attrs.indices.data(), n_idx, row);
            return out;
        }
        case OpKind::concat: {
            auto s = in(0).shape();
            int rows = 0;
            for (size_t i = 0; i < inputs.size(); ++i) rows += value(inputs[i]).dim(0);
            s[0] = rows;
            Tensor out = Tensor::zeros(s);
            std::int64_t off = 0;
            for (size_t i = 0; i < inputs.size(); ++i) {
                const Tensor& x = value(inputs[i]);
                std::copy(x.data(), x.data() + x.numel(), out.data() + off);
                off += x.numel();
            }
            return out;
        }
        case OpKind::slice_rows: {
            auto s = in(0).shape();
            const std::int64_t row = in(0).numel() / s[0];
            s[0] = attrs.i1;
            Tensor out = Tensor::zeros(s);
            std::copy(in(0).data() + attrs.i0 * row, in(0).data() + (attrs.i0 + attrs.i1) * row, out.data());
            return out;
        }
        case OpKind::row_sum: {
            Tensor out = Tensor::zeros({in(0).dim(0)});
            k::row_sum(in(0).data(), out.data(), in(0).dim(0), in(0).dim(1));
            return out;
        }
        case OpKind::row_max: {
            Tensor out = Tensor::zeros({in(0).dim(0)});
            k::row_max(in(0).data(), out.data(), in(0).dim(0), in(0).dim(1));
            return out;
        }
        case OpKind::bcast_col: {
            Tensor out = Tensor::zeros({in(0).dim(0), attrs.i0});
            k::bcast_col(in(0).data(), out.data(), in(0).dim(0), attrs.i0);
            return out;
        }
        case OpKind::col_sum: {
            Tensor out = Tensor::zeros({in(0).dim(1)});
            k::col_sum(in(0).data(), out.data(), in(0).dim(0), in(0).dim(1));
            return out;
        }
        case OpKind::bcast_row: {
            Tensor out = Tensor::zeros({attrs.i0, in(0).dim(0)});
            k::bcast_row(in(0).data(), out.data(), attrs.i0, in(0).dim(0));
            return out;
        }
        case OpKind::channel_sum: {
            const auto& s = in(0).shape();
            Tensor out = Tensor::zeros({s[1]});
            k::channel_sum(in(0).data(), out.data(), s[0], s[1], s[2] * s[3]);
            return out;
        }
        case OpKind::bcast_channel: {
            const int C = in(0).dim(0);
            Tensor out = Tensor::zeros({attrs.i0, C, attrs.i1, attrs.i2});
            k::bcast_channel(in(0).data(), out.data(), attrs.i0, C, attrs.i1 * attrs.i2);
            return out;
        }
        case OpKind::select_labels: {
            Tensor out = Tensor::zeros({in(0).dim(0)});
            k::select_labels(in(0).data(), out.data(), attrs.indices.data(), in(0).dim(0), in(0).dim(1));
            return out;
        }
        case OpKind::scatter_labels: {
            Tensor out = Tensor::zeros({in(0).dim(0), attrs.i0});
            k::scatter_labels(in(0).data(), out.data(), attrs.indices.data(), in(0).dim(0), attrs.i0);
            return out;
        }
        case OpKind::sum_all:
            return Tensor::scalar(k::sum_all(in(0).data(), in(0).numel()));
        case OpKind::bcast_fill:
            return Tensor::full(attrs.shape, in(0)[0]);
        case OpKind::augment: {
            const auto& s = in(0).shape();
            Tensor out = Tensor::zeros(s);
            k::rot_flip(in(0).data(), out.data(), s[0], s[1], s[2], s[3], attrs.angles.data(),
                        attrs.flips.data());
            return out;
        }
        case OpKind::augment_adj: {
            const auto& s = in(0).shape();
            Tensor out = Tensor::zeros(s);
            k::rot_flip_adj(in(0).data(), out.data(), s[0], s[1], s[2], s[3], attrs.angles.data(),
                            attrs.flips.data());
            return out;
        }
        default:
            throw ShapeError(std::string(op_name(op)) + ": not a primitive op");
    }
}

NodeId Tape::apply(OpKind op, const std::vector<NodeId>& inputs, Attrs attrs) {
    // Composite kinds expand into primitives.
    switch (op) {
        case OpKind::flatten: {
            if (inputs.size() != 1 || value(inputs[0]).rank() < 2)
                throw ShapeError("flatten: expects one input of rank >= 2");
            const auto& s = shape(inputs[0]);
            const int rest = static_cast<int>(value(inputs[0]).numel() / s[0]);
            Attrs a;
            a.shape = {s[0], rest};
            return apply(OpKind::reshape, inputs, a);
        }
        case OpKind::instance_norm: {
            if (inputs.size() != 1 || value(inputs[0]).rank() != 4)
                throw ShapeError("instance_norm: expects one rank-4 input");
            const NodeId x = inputs[0];
            const NodeId mu = apply(OpKind::spatial_mean, {x});
            const NodeId cen = apply(OpKind::sub, {x, mu});
            const NodeId var = apply(OpKind::spatial_mean, {apply(OpKind::elementwise_mul, {cen, cen})});
            Attrs ra;
            ra.eps = attrs.eps;
            const NodeId inv = apply(OpKind::rsqrt_eps, {var}, ra);
            return apply(OpKind::elementwise_mul, {cen, inv});
        }
        case OpKind::softmax_cross_entropy_mean: {
            if (inputs.size() != 1 || value(inputs[0]).rank() != 2)
                throw ShapeError("softmax_cross_entropy_mean: expects rank-2 logits");
            const auto& s = shape(inputs[0]);
            if (static_cast<int>(attrs.indices.size()) != s[0])
                throw ShapeError("softmax_cross_entropy_mean: one label per row required, got " +
                                 std::to_string(attrs.indices.size()) + " labels for " +
                                 std::to_string(s[0]) + " rows");
            const NodeId z = inputs[0];
            const int B = s[0], C = s[1];
            // Stable logsumexp with the row max detached: the max shift is
            // constant under differentiation, so gradients stay exact.
            const NodeId m = apply(OpKind::stop_gradient, {apply(OpKind::row_max, {z})});
            Attrs bc;
            bc.i0 = C;
            const NodeId zc = apply(OpKind::sub, {z, apply(OpKind::bcast_col, {m}, bc)});
            const NodeId se = apply(OpKind::row_sum, {apply(OpKind::exp, {zc})});
            const NodeId lse = apply(OpKind::add, {apply(OpKind::log, {se}), m});
            Attrs sel;
            sel.indices = attrs.indices;
            const NodeId picked = apply(OpKind::select_labels, {z}, sel);
            const NodeId diff = apply(OpKind::sub, {lse, picked});
            Attrs sc;
            sc.scalar = 1.0 / B;
            return apply(OpKind::scalar_mul, {apply(OpKind::sum_all, {diff})}, sc);
        }
        default:
            break;
    }

    check_shapes(op, inputs, attrs);
    Tensor v = compute(op, inputs, attrs);
    if (!v.all_finite())
        throw NumericError(std::string(op_name(op)) + ": non-finite output (input shapes " +
                           [&] {
                               std::string s;
                               for (NodeId i : inputs) s += shape_str(shape(i)) + " ";
                               return s;
                           }() +
                           ")");

    bool rg = false;
    if (!suppress_grad_ && op != OpKind::stop_gradient && op != OpKind::relu_mask && op != OpKind::row_max) {
        for (NodeId i : inputs)
            if (nodes_[static_cast<size_t>(i)].requires_grad) {
                rg = true;
                break;
            }
    }

    Node n;
    n.op = op;
    n.inputs = inputs;
    n.attrs = std::move(attrs);
    n.value = std::move(v);
    n.requires_grad = rg;
    return push(std::move(n));
}

void Tape::emit_vjp(NodeId id, NodeId g, std::vector<NodeId>& adj, std::vector<std::uint8_t>& queued,
                    std::vector<NodeId>& pending) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const auto& in = n.inputs;

    auto contribute = [&](NodeId input, NodeId c) {
        if (!nodes_[static_cast<size_t>(input)].requires_grad) return;
        if (adj[static_cast<size_t>(input)] < 0)
            adj[static_cast<size_t>(input)] = c;
        else
            adj[static_cast<size_t>(input)] = apply(OpKind::add, {adj[static_cast<size_t>(input)], c});
        if (!queued[static_cast<size_t>(input)]) {
            queued[static_cast<size_t>(input)] = 1;
            pending.push_back(input);
            std::push_heap(pending.begin(), pending.end());
        }
    };
    auto mm = [&](NodeId a, NodeId b, bool ta, bool tb) {
        Attrs at;
        at.ta = ta;
        at.tb = tb;
        return apply(OpKind::matmul, {a, b}, at);
    };
    auto neg = [&](NodeId x) {
        Attrs at;
        at.scalar = -1.0;
        return apply(OpKind::scalar_mul, {x}, at);
    };
    auto mul = [&](NodeId a, NodeId b) { return apply(OpKind::elementwise_mul, {a, b}); };

    switch (n.op) {
        case OpKind::constant:
        case OpKind::leaf:
        case OpKind::stop_gradient:
        case OpKind::relu_mask:
        case OpKind::row_max:
            return;
        case OpKind::matmul: {
            const bool ta = n.attrs.ta, tb = n.attrs.tb;
            if (!ta && !tb) {
                contribute(in[0], mm(g, in[1], false, true));
                contribute(in[1], mm(in[0], g, true, false));
            } else if (ta && !tb) {
                contribute(in[0], mm(in[1], g, false, true));
                contribute(in[1], mm(in[0], g, false, false));
            } else if (!ta && tb) {
                contribute(in[0], mm(g, in[1], false, false));
                contribute(in[1], mm(g, in[0], true, false));
            } else {
                contribute(in[0], mm(in[1], g, true, true));
                contribute(in[1], mm(g, in[0], true, true));
            }
            return;
        }
        case OpKind::add:
            contribute(in[0], g);
            contribute(in[1], g);
            return;
        case OpKind::sub:
            contribute(in[0], g);
            contribute(in[1], neg(g));
            return;
        case OpKind::add_bias:
            contribute(in[0], g);
            contribute(in[1], apply(OpKind::col_sum, {g}));
            return;
        case OpKind::add_channel_bias:
            contribute(in[0], g);
            contribute(in[1], apply(OpKind::channel_sum, {g}));
            return;
        case OpKind::scalar_mul: {
            Attrs at;
            at.scalar = n.attrs.scalar;
            contribute(in[0], apply(OpKind::scalar_mul, {g}, at));
            return;
        }
        case OpKind::elementwise_mul:
            contribute(in[0], mul(g, in[1]));
            contribute(in[1], mul(g, in[0]));
            return;
        case OpKind::relu:
            contribute(in[0], mul(g, apply(OpKind::relu_mask, {in[0]})));
            return;
        case OpKind::exp:
            contribute(in[0], mul(g, id));
            return;
        case OpKind::log:
            contribute(in[0], mul(g, apply(OpKind::reciprocal, {in[0]})));
            return;
        case OpKind::reciprocal:
            contribute(in[0], neg(mul(g, mul(id, id))));
            return;
        case OpKind::rsqrt_eps: {
            Attrs at;
            at.scalar = -0.5;
            contribute(in[0], apply(OpKind::scalar_mul, {mul(g, mul(id, mul(id, id)))}, at));
            return;
        }
        case OpKind::conv2d:
            contribute(in[0], apply(OpKind::conv2d_input_grad, {g, in[1]}));
            contribute(in[1], apply(OpKind::conv2d_weight_grad, {in[0], g}));
            return;
        case OpKind::conv2d_input_grad:
            contribute(in[0], apply(OpKind::conv2d, {g, in[1]}));
            contribute(in[1], apply(OpKind::conv2d_weight_grad, {g, in[0]}));
            return;
        case OpKind::conv2d_weight_grad:
            contribute(in[0], apply(OpKind::conv2d_input_grad, {in[1], g}));
            contribute(in[1], apply(OpKind::conv2d, {in[0], g}));
            return;
        case OpKind::spatial_mean:
            contribute(in[0], apply(OpKind::spatial_mean, {g}));
            return;
        case OpKind::avg_pool2d: {
            const auto& s = shape(in[0]);
            Attrs at;
            at.i0 = s[s.size() - 2];
            at.i1 = s[s.size() - 1];
            contribute(in[0], apply(OpKind::avg_unpool2x, {g}, at));
            return;
        }
        case OpKind::avg_unpool2x:
            contribute(in[0], apply(OpKind::avg_pool2d, {g}));
            return;
        case OpKind::bilinear_upsample2x:
            contribute(in[0], apply(OpKind::bilinear_upsample2x_adj, {g}));
            return;
        case OpKind::bilinear_upsample2x_adj:
            contribute(in[0], apply(OpKind::bilinear_upsample2x, {g}));
            return;
        case OpKind::reshape: {
            Attrs at;
            at.shape = shape(in[0]);
            contribute(in[0], apply(OpKind::reshape, {g}, at));
            return;
        }
        case OpKind::index_select: {
            Attrs at;
            at.indices = n.attrs.indices;
            at.i0 = shape(in[0])[0];
            contribute(in[0], apply(OpKind::index_scatter_add, {g}, at));
            return;
        }
        case OpKind::index_scatter_add: {
            Attrs at;
            at.indices = n.attrs.indices;
            contribute(in[0], apply(OpKind::index_select, {g}, at));
            return;
        }
        case OpKind::concat: {
            int off = 0;
            for (NodeId i : in) {
                const int rows = shape(i)[0];
                if (nodes_[static_cast<size_t>(i)].requires_grad) {
                    Attrs at;
                    at.i0 = off;
                    at.i1 = rows;
                    contribute(i, apply(OpKind::slice_rows, {g}, at));
                }
                off += rows;
            }
            return;
        }
        case OpKind::slice_rows: {
            Attrs at;
            at.i0 = shape(in[0])[0];
            at.indices.resize(static_cast<size_t>(n.attrs.i1));
            std::iota(at.indices.begin(), at.indices.end(), n.attrs.i0);
            contribute(in[0], apply(OpKind::index_scatter_add, {g}, at));
            return;
        }
        case OpKind::row_sum: {
            Attrs at;
            at.i0 = shape(in[0])[1];
            contribute(in[0], apply(OpKind::bcast_col, {g}, at));
            return;
        }
        case OpKind::bcast_col:
            contribute(in[0], apply(OpKind::row_sum, {g}));
            return;
        case OpKind::col_sum: {
            Attrs at;
            at.i0 = shape(in[0])[0];
            contribute(in[0], apply(OpKind::bcast_row, {g}, at));
            return;
        }
        case OpKind::bcast_row:
            contribute(in[0], apply(OpKind::col_sum, {g}));
            return;
        case OpKind::channel_sum: {
            const auto& s = shape(in[0]);
            Attrs at;
            at.i0 = s[0];
            at.i1 = s[2];
            at.i2 = s[3];
            contribute(in[0], apply(OpKind::bcast_channel, {g}, at));
            return;
        }
        case OpKind::bcast_channel:
            contribute(in[0], apply(OpKind::channel_sum, {g}));
            return;
        case OpKind::select_labels: {
            Attrs at;
            at.indices = n.attrs.indices;
            at.i0 = shape(in[0])[1];
            contribute(in[0], apply(OpKind::scatter_labels, {g}, at));
            return;
        }
        case OpKind::scatter_labels: {
            Attrs at;
            at.indices = n.attrs.indices;
            contribute(in[0], apply(OpKind::select_labels, {g}, at));
            return;
        }
        case OpKind::sum_all: {
            Attrs at;
            at.shape = shape(in[0]);
            contribute(in[0], apply(OpKind::bcast_fill, {g}, at));
            return;
        }
        case OpKind::bcast_fill:
            contribute(in[0], apply(OpKind::sum_all, {g}));
            return;
        case OpKind::augment: {
            Attrs at;
            at.angles = n.attrs.angles;
            at.flips = n.attrs.flips;
            contribute(in[0], apply(OpKind::augment_adj, {g}, at));
            return;
        }
        case OpKind::augment_adj: {
            Attrs at;
            at.angles = n.attrs.angles;
            at.flips = n.attrs.flips;
            contribute(in[0], apply(OpKind::augment, {g}, at));
            return;
        }
        default:
            throw ShapeError(std::string(op_name(n.op)) + ": missing vjp rule");
    }
}

std::vector<NodeId> Tape::backward(NodeId loss, const std::vector<NodeId>& wrt, bool create_graph,
                                   bool stop_at_wrt) {
    if (value(loss).numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(shape(loss)));
    for (NodeId w : wrt)
        if (w < 0 || w >= node_count()) throw ShapeError("backward: wrt node not on this tape");

    const size_t frontier = nodes_.size();
    std::vector<NodeId> adj(frontier, -1);
    std::vector<std::uint8_t> queued(frontier, 0);
    std::vector<std::uint8_t> is_wrt(frontier, 0);
    for (NodeId w : wrt) is_wrt[static_cast<size_t>(w)] = 1;

    const bool saved = suppress_grad_;
    suppress_grad_ = !create_graph;

    std::vector<NodeId> pending;
    if (nodes_[static_cast<size_t>(loss)].requires_grad || is_wrt[static_cast<size_t>(loss)]) {
        adj[static_cast<size_t>(loss)] = constant(Tensor::scalar(1.0));
        queued[static_cast<size_t>(loss)] = 1;
        pending.push_back(loss);
    }

    while (!pending.empty()) {
        std::pop_heap(pending.begin(), pending.end());
        const NodeId id = pending.back();
        pending.pop_back();
        if (stop_at_wrt && is_wrt[static_cast<size_t>(id)]) continue;
        emit_vjp(id, adj[static_cast<size_t>(id)], adj, queued, pending);
    }

    suppress_grad_ = saved;

    std::vector<NodeId> out;
    out.reserve(wrt.size());
    for (NodeId w : wrt) {
        const NodeId a = adj[static_cast<size_t>(w)];
        out.push_back(a >= 0 ? a : constant(Tensor::zeros(shape(w))));
    }
    return out;
}

// --- convenience builders ---------------------------------------------------

NodeId matmul(Tape& t, NodeId a, NodeId b, bool ta, bool tb) {
    Attrs at;
    at.ta = ta;
    at.tb = tb;
    return t.apply(OpKind::matmul, {a, b}, at);
}
NodeId add(Tape& t, NodeId a, NodeId b) { return t.apply(OpKind::add, {a, b}); }
NodeId sub(Tape& t, NodeId a, NodeId b) { return t.apply(OpKind::sub, {a, b}); }
NodeId add_bias(Tape& t, NodeId x, NodeId b) { return t.apply(OpKind::add_bias, {x, b}); }
NodeId add_channel_bias(Tape& t, NodeId x, NodeId b) { return t.apply(OpKind::add_channel_bias, {x, b}); }
NodeId scalar_mul(Tape& t, NodeId x, double c) {
    Attrs at;
    at.scalar = c;
    return t.apply(OpKind::scalar_mul, {x}, at);
}
NodeId elementwise_mul(Tape& t, NodeId a, NodeId b) { return t.apply(OpKind::elementwise_mul, {a, b}); }
NodeId relu(Tape& t, NodeId x) { return t.apply(OpKind::relu, {x}); }
NodeId stop_gradient(Tape& t, NodeId x) { return t.apply(OpKind::stop_gradient, {x}); }
NodeId conv2d(Tape& t, NodeId x, NodeId w) { return t.apply(OpKind::conv2d, {x, w}); }
NodeId instance_norm(Tape& t, NodeId x, double eps) {
    Attrs at;
    at.eps = eps;
    return t.apply(OpKind::instance_norm, {x}, at);
}
NodeId avg_pool2d(Tape& t, NodeId x) { return t.apply(OpKind::avg_pool2d, {x}); }
NodeId bilinear_upsample2x(Tape& t, NodeId x) { return t.apply(OpKind::bilinear_upsample2x, {x}); }
NodeId flatten(Tape& t, NodeId x) { return t.apply(OpKind::flatten, {x}); }
NodeId reshape(Tape& t, NodeId x, std::vector<int> shape) {
    Attrs at;
    at.shape = std::move(shape);
    return t.apply(OpKind::reshape, {x}, at);
}
NodeId index_select(Tape& t, NodeId x, std::vector<int> rows) {
    Attrs at;
    at.indices = std::move(rows);
    return t.apply(OpKind::index_select, {x}, at);
}
NodeId concat(Tape& t, const std::vector<NodeId>& xs) { return t.apply(OpKind::concat, xs); }
NodeId sum_all(Tape& t, NodeId x) { return t.apply(OpKind::sum_all, {x}); }
NodeId softmax_cross_entropy_mean(Tape& t, NodeId logits, std::vector<int> labels) {
    Attrs at;
    at.indices = std::move(labels);
    return t.apply(OpKind::softmax_cross_entropy_mean, {logits}, at);
}
NodeId augment_images(Tape& t, NodeId x, std::vector<double> angles, std::vector<std::uint8_t> flips) {
    Attrs at;
    at.angles = std::move(angles);
    at.flips = std::move(flips);
    return t.apply(OpKind::augment, {x}, at);
}

std::vector<double> finite_diff_oracle(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& x, double h) {
    if (!(h > 0.0)) throw NumericError("finite_diff_oracle: h must be positive");
    std::vector<double> g(x.size());
    std::vector<double> xp = x;
    for (size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + h;
        const double fp = f(xp);
        xp[i] = x[i] - h;
        const double fm = f(xp);
        xp[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_oracle: non-finite evaluation at coordinate " + std::to_string(i));
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace memdist
