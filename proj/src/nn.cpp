#include "gflowmask/nn.hpp"

#include <cmath>

namespace gfm {

Parameter& ParamRegistry::add(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw Error("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    Parameter* p = params_.back().get();
    by_name_.emplace(name, p);
    return *p;
}

Parameter* ParamRegistry::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

std::vector<Parameter*> ParamRegistry::pointers() const {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

std::size_t ParamRegistry::total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

Tensor kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                       std::mt19937_64& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

Tensor normal_init(std::vector<std::size_t> shape, double stdev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stdev);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

std::vector<double> softmax_values(const std::vector<double>& logits) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    std::vector<double> out(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        s += out[i];
    }
    for (double& v : out) v /= s;
    return out;
}

double cross_entropy_value(const std::vector<double>& logits, int label) {
    if (label < 0 || (std::size_t)label >= logits.size())
        throw ShapeError("cross_entropy_value: label out of range");
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double s = 0.0;
    for (double v : logits) s += std::exp(v - m);
    return m + std::log(s) - logits[label];
}

std::size_t argmax_index(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

DenseLayer::DenseLayer(ParamRegistry& reg, const std::string& prefix, std::size_t out,
                       std::size_t in, std::mt19937_64& rng)
    : w(&reg.add(prefix + ".w", kaiming_uniform({out, in}, in, rng))),
      b(&reg.add(prefix + ".b", Tensor({out}))) {}

NodeId DenseLayer::apply(Tape& t, NodeId x) const {
    return t.add(t.matvec(t.param(*w), x), t.param(*b));
}

NodeId DenseLayer::apply_rows(Tape& t, NodeId X) const {
    return t.add_row_vector(t.matmul_nt(X, t.param(*w)), t.param(*b));
}

ConvLayer::ConvLayer(ParamRegistry& reg, const std::string& prefix, std::size_t out_ch,
                     std::size_t in_ch, int k, int stride, int pad, std::mt19937_64& rng)
    : w(&reg.add(prefix + ".w",
                 kaiming_uniform({out_ch, in_ch, (std::size_t)k, (std::size_t)k},
                                 in_ch * (std::size_t)k * (std::size_t)k, rng))),
      b(&reg.add(prefix + ".b", Tensor({out_ch}))),
      stride(stride),
      pad(pad) {}

NodeId ConvLayer::apply(Tape& t, NodeId x) const {
    return t.conv2d(x, t.param(*w), t.param(*b), stride, pad);
}

ResidualBlock::ResidualBlock(ParamRegistry& reg, const std::string& prefix,
                             std::size_t in_ch, std::size_t out_ch, int stride,
                             std::mt19937_64& rng)
    : conv1(reg, prefix + ".conv1", out_ch, in_ch, 3, stride, 1, rng),
      conv2(reg, prefix + ".conv2", out_ch, out_ch, 3, 1, 1, rng),
      projected_skip(stride != 1 || in_ch != out_ch) {
    if (projected_skip) skip = ConvLayer(reg, prefix + ".skip", out_ch, in_ch, 1, stride, 0, rng);
}

NodeId ResidualBlock::apply(Tape& t, NodeId x) const {
    NodeId y = conv2.apply(t, t.relu(conv1.apply(t, x)));
    NodeId sc = projected_skip ? skip.apply(t, x) : x;
    return t.relu(t.add(y, sc));
}

AttentionBlock::AttentionBlock(ParamRegistry& reg, const std::string& prefix,
                               std::size_t dim, std::size_t heads, std::size_t mlp_dim,
                               std::mt19937_64& rng)
    : dim(dim),
      heads(heads),
      ln1_g(&reg.add(prefix + ".ln1.g", Tensor({dim}, 1.0))),
      ln1_b(&reg.add(prefix + ".ln1.b", Tensor({dim}))),
      ln2_g(&reg.add(prefix + ".ln2.g", Tensor({dim}, 1.0))),
      ln2_b(&reg.add(prefix + ".ln2.b", Tensor({dim}))),
      wq(reg, prefix + ".attn.wq", dim, dim, rng),
      wk(reg, prefix + ".attn.wk", dim, dim, rng),
      wv(reg, prefix + ".attn.wv", dim, dim, rng),
      wo(reg, prefix + ".attn.wo", dim, dim, rng),
      fc1(reg, prefix + ".mlp.fc1", mlp_dim, dim, rng),
      fc2(reg, prefix + ".mlp.fc2", dim, mlp_dim, rng) {
    if (dim % heads != 0) throw ConfigError("attention dim not divisible by heads");
}

NodeId AttentionBlock::attend(Tape& t, NodeId xn) const {
    const std::size_t dh = dim / heads;
    NodeId q = wq.apply_rows(t, xn);
    NodeId k = wk.apply_rows(t, xn);
    NodeId v = wv.apply_rows(t, xn);
    std::vector<NodeId> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        NodeId qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        NodeId kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        NodeId vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        NodeId scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt((double)dh));
        head_out.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    return t.concat_cols(head_out);
}

NodeId AttentionBlock::apply(Tape& t, NodeId x) const {
    NodeId xn = t.layer_norm(x, t.param(*ln1_g), t.param(*ln1_b));
    NodeId h = t.add(x, wo.apply_rows(t, attend(t, xn)));
    NodeId hn = t.layer_norm(h, t.param(*ln2_g), t.param(*ln2_b));
    NodeId m = fc2.apply_rows(t, t.gelu(fc1.apply_rows(t, hn)));
    return t.add(h, m);
}

} // namespace gfm
