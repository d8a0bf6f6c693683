#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "memdist/tensor.hpp"

namespace memdist {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
    // leaves
    constant,
    leaf,
    // primitives
    matmul,
    add,
    sub,
    add_bias,
    add_channel_bias,
    scalar_mul,
    elementwise_mul,
    relu,
    relu_mask,
    exp,
    log,
    reciprocal,
    rsqrt_eps,
    stop_gradient,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    spatial_mean,
    avg_pool2d,
    avg_unpool2x,
    bilinear_upsample2x,
    bilinear_upsample2x_adj,
    reshape,
    index_select,
    index_scatter_add,
    concat,
    slice_rows,
    row_sum,
    row_max,
    bcast_col,
    col_sum,
    bcast_row,
    channel_sum,
    bcast_channel,
    select_labels,
    scatter_labels,
    sum_all,
    bcast_fill,
    augment,
    augment_adj,
    // composites, expanded by apply() into primitives
    flatten,
    instance_norm,
    softmax_cross_entropy_mean,
};

const char* op_name(OpKind k);

struct Attrs {
    bool ta = false, tb = false;          // matmul transposes
    double scalar = 0.0;                  // scalar_mul
    double eps = 1e-5;                    // rsqrt_eps / instance_norm
    int i0 = 0, i1 = 0, i2 = 0;           // op-specific ints (dims, offsets)
    std::vector<int> shape;               // reshape / bcast_fill target
    std::vector<int> indices;             // index_select rows, class labels
    std::vector<double> angles;           // augment rotation, radians
    std::vector<std::uint8_t> flips;      // augment horizontal flip mask
};

struct Node {
    OpKind op = OpKind::constant;
    std::vector<NodeId> inputs;
    Attrs attrs;
    Tensor value;
    bool requires_grad = false;
};

// Reverse-mode tape. Nodes are appended in topological (creation) order.
// backward() emits the vector-Jacobian products as new tape nodes, so with
// create_graph=true the returned gradients are themselves differentiable;
// with create_graph=false they are constants. A Tape is single-owner:
// distinct tapes may run concurrently, one tape must not.
class Tape {
  public:
    NodeId constant(Tensor v);
    NodeId leaf(Tensor v, const std::string& name = "");

    // Generic entry point: validates shapes, computes the value, returns the
    // node. Composite kinds (flatten, instance_norm,
    // softmax_cross_entropy_mean) expand into primitive nodes.
    NodeId apply(OpKind op, const std::vector<NodeId>& inputs, Attrs attrs = {});

    // d(loss)/d(wrt) for a scalar loss. One gradient node per wrt entry,
    // shape-matched; wrt nodes unreachable from loss yield zero tensors.
    // stop_at_wrt treats the wrt nodes as frontier leaves: the sweep does not
    // continue into their ancestors (the semantics of a per-step d L/d theta
    // inside an unrolled loop).
    std::vector<NodeId> backward(NodeId loss, const std::vector<NodeId>& wrt, bool create_graph,
                                 bool stop_at_wrt = false);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    const std::vector<int>& shape(NodeId id) const { return value(id).shape(); }
    bool requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    std::int64_t node_count() const { return static_cast<std::int64_t>(nodes_.size()); }

    const std::map<std::string, NodeId>& params() const { return params_; }

  private:
    NodeId push(Node n);
    Tensor compute(OpKind op, const std::vector<NodeId>& inputs, const Attrs& attrs) const;
    void check_shapes(OpKind op, const std::vector<NodeId>& inputs, const Attrs& attrs) const;
    // Appends the vjp contribution of `adj` through node `id` into each input.
    void emit_vjp(NodeId id, NodeId adj, std::vector<NodeId>& contrib_of,
                  std::vector<std::uint8_t>& has_contrib, std::vector<NodeId>& pending);

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> params_;
    bool suppress_grad_ = false;  // set while emitting create_graph=false vjps
};

// --- convenience builders -------------------------------------------------

NodeId matmul(Tape& t, NodeId a, NodeId b, bool ta = false, bool tb = false);
NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId add_bias(Tape& t, NodeId x, NodeId b);
NodeId add_channel_bias(Tape& t, NodeId x, NodeId b);
NodeId scalar_mul(Tape& t, NodeId x, double c);
NodeId elementwise_mul(Tape& t, NodeId a, NodeId b);
NodeId relu(Tape& t, NodeId x);
NodeId stop_gradient(Tape& t, NodeId x);
NodeId conv2d(Tape& t, NodeId x, NodeId w);
NodeId instance_norm(Tape& t, NodeId x, double eps = 1e-5);
NodeId avg_pool2d(Tape& t, NodeId x);
NodeId bilinear_upsample2x(Tape& t, NodeId x);
NodeId flatten(Tape& t, NodeId x);
NodeId reshape(Tape& t, NodeId x, std::vector<int> shape);
NodeId index_select(Tape& t, NodeId x, std::vector<int> rows);
NodeId concat(Tape& t, const std::vector<NodeId>& xs);
NodeId sum_all(Tape& t, NodeId x);
NodeId softmax_cross_entropy_mean(Tape& t, NodeId logits, std::vector<int> labels);
NodeId augment_images(Tape& t, NodeId x, std::vector<double> angles, std::vector<std::uint8_t> flips);

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / (2h).
// f must be a deterministic scalar function of the flat parameter vector.
std::vector<double> finite_diff_oracle(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& x, double h);

}  // namespace memdist
