#pragma once

#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "gflowmask/autodiff.hpp"

namespace gfm {

// Owns parameters and guarantees stable addresses and unique names. Snapshot
// I/O and optimizers address parameters through this registry.
class ParamRegistry {
public:
    Parameter& add(const std::string& name, Tensor init);
    Parameter* find(const std::string& name) const;
    std::vector<Parameter*> pointers() const;
    std::size_t total_size() const;

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

// Kaiming-uniform: U(-bound, bound), bound = sqrt(6 / fan_in).
Tensor kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                       std::mt19937_64& rng);
Tensor normal_init(std::vector<std::size_t> shape, double stdev, std::mt19937_64& rng);

// Plain-value math shared by training, metrics, and the reward.
std::vector<double> softmax_values(const std::vector<double>& logits);
double cross_entropy_value(const std::vector<double>& logits, int label);
std::size_t argmax_index(const std::vector<double>& v); // ties -> lowest index

// y = Wx + b with W stored [out, in].
struct DenseLayer {
    Parameter* w = nullptr;
    Parameter* b = nullptr;

    DenseLayer() = default;
    DenseLayer(ParamRegistry& reg, const std::string& prefix, std::size_t out,
               std::size_t in, std::mt19937_64& rng);

    NodeId apply(Tape& t, NodeId x) const;      // x [in] -> [out]
    NodeId apply_rows(Tape& t, NodeId X) const; // X [T,in] -> [T,out]
};

struct ConvLayer {
    Parameter* w = nullptr; // [out_ch, in_ch, k, k]
    Parameter* b = nullptr; // [out_ch]
    int stride = 1;
    int pad = 0;

    ConvLayer() = default;
    ConvLayer(ParamRegistry& reg, const std::string& prefix, std::size_t out_ch,
              std::size_t in_ch, int k, int stride, int pad, std::mt19937_64& rng);

    NodeId apply(Tape& t, NodeId x) const;
};

// Basic residual block: relu(conv2(relu(conv1(x))) + shortcut(x)).
// 3x3 convs, pad 1; shortcut is identity unless stride != 1 or channel
// counts differ, in which case it is a strided 1x1 conv.
struct ResidualBlock {
    ConvLayer conv1, conv2, skip;
    bool projected_skip = false;

    ResidualBlock() = default;
    ResidualBlock(ParamRegistry& reg, const std::string& prefix, std::size_t in_ch,
                  std::size_t out_ch, int stride, std::mt19937_64& rng);

    NodeId apply(Tape& t, NodeId x) const;
};

// Pre-LN transformer block: x + Wo(MHSA(LN1(x))), then h + MLP(LN2(h)).
struct AttentionBlock {
    std::size_t dim = 0;
    std::size_t heads = 1;
    Parameter *ln1_g = nullptr, *ln1_b = nullptr;
    Parameter *ln2_g = nullptr, *ln2_b = nullptr;
    DenseLayer wq, wk, wv, wo;
    DenseLayer fc1, fc2;

    AttentionBlock() = default;
    AttentionBlock(ParamRegistry& reg, const std::string& prefix, std::size_t dim,
                   std::size_t heads, std::size_t mlp_dim, std::mt19937_64& rng);

    // Multi-head softmax(QK^T/sqrt(dh))V on an already-normalized input,
    // before the output projection. Exposed for direct numeric checks.
    NodeId attend(Tape& t, NodeId xn) const;

    NodeId apply(Tape& t, NodeId x) const;
};

} // namespace gfm
