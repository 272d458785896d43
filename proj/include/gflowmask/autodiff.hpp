#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gflowmask/tensor.hpp"

namespace gfm {

// A named parameter tensor with a persistent gradient buffer. Parameters
// live outside any tape; each forward pass binds them as tape leaves and
// backward() accumulates into `grad`.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { grad.fill(0.0); }
};

using NodeId = int;

// Reverse-mode tape. Nodes are recorded in creation order, which is a
// topological order by construction. One backward traversal per tape;
// calling backward twice is an error.
class Tape {
public:
    // Leaves.
    NodeId constant(Tensor v);
    NodeId param(Parameter& p); // same Parameter re-binds to the same node

    // Elementwise / arithmetic.
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId square(NodeId a);
    NodeId log(NodeId a);
    NodeId relu(NodeId a);
    NodeId gelu(NodeId a);
    NodeId logistic(NodeId a);
    NodeId clamp(NodeId a, double lo, double hi);

    // Linear algebra.
    NodeId matmul(NodeId a, NodeId b);    // [m,k]x[k,n] -> [m,n]
    NodeId matmul_nt(NodeId a, NodeId b); // [m,k] x [n,k]^T -> [m,n]
    NodeId matvec(NodeId w, NodeId x);    // [m,n]x[n] -> [m]
    NodeId transpose(NodeId a);           // [m,n] -> [n,m]

    // Convolution, x[C,H,W], w[O,C,kh,kw], b[O].
    NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad);

    // Rows-of-matrix ops ([T,D] layouts).
    NodeId add_row_vector(NodeId x, NodeId b); // [T,D] + [D]
    NodeId mul_cols(NodeId x, NodeId m);       // [T,D] * m[D] broadcast
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta); // per row, eps 1e-5
    NodeId softmax_rows(NodeId x);
    NodeId row_mean(NodeId x);                 // [T,D] -> [D]
    NodeId slice_cols(NodeId x, std::size_t c0, std::size_t c1);
    NodeId concat_cols(std::span<const NodeId> xs);

    // Channel ops ([C,H,W] layouts).
    NodeId channel_mean(NodeId x);       // [C,H,W] -> [C]
    NodeId mul_channels(NodeId x, NodeId m); // [C,H,W] * m[C] broadcast

    // Vectors and scalars.
    NodeId concat_vec(NodeId a, NodeId b);
    NodeId sum_all(NodeId a);            // -> scalar
    NodeId mean_all(NodeId a);
    NodeId mean_scalars(std::span<const NodeId> xs);
    NodeId pick(NodeId v, std::size_t index); // v[index] -> scalar

    // -log softmax(logits)[label], max-stabilized. logits [C].
    NodeId cross_entropy(NodeId logits, int label);

    // Image [3,S,S] -> patch rows [n_patches, 3*ps*ps].
    NodeId patchify(NodeId x, int patch);

    NodeId stop_gradient(NodeId a) { return constant(value(a)); }

    void backward(NodeId loss);
    bool backward_run() const { return backward_done_; }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back; // empty for leaves
        Parameter* bound = nullptr;
    };

    NodeId push(Tensor value);
    Node& node(NodeId id) { return nodes_[id]; }

    std::vector<Node> nodes_;
    std::unordered_map<Parameter*, NodeId> param_nodes_;
    bool backward_done_ = false;
};

} // namespace gfm
