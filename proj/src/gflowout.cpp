#include "gflowmask/gflowout.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gflowmask/rng.hpp"

namespace gfm {

namespace {
constexpr double kProbClamp = 1e-4; // keep-probability clamp band
} // namespace

MaskMode parse_mask_mode(const std::string& s) {
    if (s == "none") return MaskMode::none;
    if (s == "random") return MaskMode::random;
    if (s == "bottomup") return MaskMode::bottomup;
    if (s == "topdown") return MaskMode::topdown;
    throw ConfigError("unknown mask mode '" + s +
                      "' (expected none|random|bottomup|topdown)");
}

const char* to_string(MaskMode m) {
    switch (m) {
        case MaskMode::none: return "none";
        case MaskMode::random: return "random";
        case MaskMode::bottomup: return "bottomup";
        case MaskMode::topdown: return "topdown";
    }
    return "?";
}

void GFlowOutConfig::validate() const {
    if (!(pi_prior > 0.0 && pi_prior <= 1.0))
        throw ConfigError("pi_prior must be in (0, 1]");
    if (policy_hidden < 1) throw ConfigError("policy_hidden must be >= 1");
    if (logz_hidden < 1) throw ConfigError("logz_hidden must be >= 1");
}

RewardComponents reward(const Tensor& logits, int label,
                        const std::vector<DropoutMask>& masks, double pi_prior) {
    RewardComponents rc;
    rc.log_likelihood = -cross_entropy_value(logits.data, label);
    rc.log_prior = 0.0;
    for (const DropoutMask& m : masks)
        for (double bit : m.keep) {
            double p = bit > 0.5 ? pi_prior : 1.0 - pi_prior;
            rc.log_prior += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
        }
    rc.log_r = rc.log_likelihood + rc.log_prior;
    return rc;
}

double tb_loss_value(double log_z, double log_q, double log_r) {
    double d = log_z + log_q - log_r;
    return d * d;
}

GFlowOut::GFlowOut(const Backbone& bb, GFlowOutConfig cfg, std::uint64_t seed)
    : cfg_(cfg) {
    cfg_.validate();
    for (const DropoutSiteInfo& s : bb.sites()) {
        site_units_.push_back(s.units);
        site_names_.push_back(s.name);
    }
    if (cfg_.mode == MaskMode::none) return;

    auto rng = substream(seed, Stream::init, 1);
    const std::size_t xd = bb.x_embed_dim();
    if (cfg_.mode == MaskMode::bottomup || cfg_.mode == MaskMode::topdown) {
        // Final-layer bias starts at the prior log-odds so the initial
        // policy samples roughly like the Bernoulli(pi) prior.
        const double p0 = std::clamp(cfg_.pi_prior, kProbClamp, 1.0 - kProbClamp);
        const double bias0 = std::log(p0 / (1.0 - p0));
        for (std::size_t i = 0; i < site_units_.size(); ++i) {
            const std::size_t in_dim =
                (cfg_.mode == MaskMode::bottomup ? xd : 0) + site_units_[i];
            SitePolicy sp;
            const std::string prefix = "gflowout/site" + std::to_string(i);
            sp.fc1 = DenseLayer(params, prefix + ".fc1",
                                (std::size_t)cfg_.policy_hidden, in_dim, rng);
            sp.fc2 = DenseLayer(params, prefix + ".fc2", site_units_[i],
                                (std::size_t)cfg_.policy_hidden, rng);
            sp.fc2.b->value.fill(bias0);
            site_policies_.push_back(sp);
        }
    }
    if (cfg_.mode == MaskMode::bottomup) {
        logz_fc1_ = DenseLayer(params, "gflowout/logz.fc1",
                               (std::size_t)cfg_.logz_hidden, xd, rng);
        logz_fc2_ = DenseLayer(params, "gflowout/logz.fc2", 1,
                               (std::size_t)cfg_.logz_hidden, rng);
    } else {
        logz_scalar_ = &params.add("gflowout/logz", Tensor({1}));
    }
}

NodeId GFlowOut::keep_probs(Tape& t, std::size_t site, NodeId x_embed, NodeId h) const {
    if (cfg_.mode != MaskMode::bottomup && cfg_.mode != MaskMode::topdown)
        throw Error("keep_probs: no policy in mode " + std::string(to_string(cfg_.mode)));
    NodeId in = cfg_.mode == MaskMode::bottomup
                    ? t.concat_vec(t.stop_gradient(x_embed), t.stop_gradient(h))
                    : t.stop_gradient(h);
    const SitePolicy& sp = site_policies_.at(site);
    NodeId hidden = t.relu(sp.fc1.apply(t, in));
    return t.clamp(t.logistic(sp.fc2.apply(t, hidden)), kProbClamp, 1.0 - kProbClamp);
}

NodeId GFlowOut::log_z(Tape& t, NodeId x_embed) const {
    switch (cfg_.mode) {
        case MaskMode::none:
            return t.constant(Tensor::scalar(0.0));
        case MaskMode::random:
        case MaskMode::topdown:
            return t.param(*logz_scalar_);
        case MaskMode::bottomup:
            return logz_fc2_.apply(
                t, t.relu(logz_fc1_.apply(t, t.stop_gradient(x_embed))));
    }
    throw Error("log_z: bad mode");
}

// ---------------------------------------------------------------------------

SamplingHook::SamplingHook(const GFlowOut& g, std::mt19937_64& rng, bool training,
                           double explore)
    : g_(g), rng_(rng), training_(training), explore_(explore) {}

void SamplingHook::begin(Tape& t, NodeId x_embed) {
    x_embed_ = x_embed;
    log_z_ = g_.log_z(t, x_embed);
}

NodeId SamplingHook::site_mask(Tape& t, std::size_t site, NodeId h) {
    const std::size_t units = g_.site_units(site);
    const MaskMode mode = g_.config().mode;
    DropoutMask dm{g_.site_name(site), std::vector<double>(units, 1.0)};

    if (mode == MaskMode::none) {
        traj_.masks.push_back(std::move(dm));
        traj_.site_log_q.push_back(0.0);
        return kNoMask;
    }

    std::uniform_real_distribution<double> uni(0.0, 1.0);
    if (mode == MaskMode::random) {
        const double pi = g_.config().pi_prior;
        Tensor mask_values({units});
        double lq = 0.0;
        for (std::size_t i = 0; i < units; ++i) {
            const bool keep = uni(rng_) < pi;
            dm.keep[i] = keep ? 1.0 : 0.0;
            mask_values[i] = keep ? (training_ ? 1.0 / pi : 1.0) : 0.0;
            const double p = keep ? pi : 1.0 - pi;
            lq += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
        }
        const_log_q_ += lq;
        traj_.masks.push_back(std::move(dm));
        traj_.site_log_q.push_back(lq);
        traj_.log_q += lq;
        return t.constant(std::move(mask_values));
    }

    // bottomup / topdown: sample from the (exploration-mixed) policy, apply
    // the raw bits, and record log q under the policy itself.
    NodeId p = g_.keep_probs(t, site, x_embed_, h);
    const Tensor& pv = t.value(p);
    Tensor bits({units});
    for (std::size_t i = 0; i < units; ++i) {
        const double ps = (1.0 - explore_) * pv[i] + explore_ * 0.5;
        bits[i] = uni(rng_) < ps ? 1.0 : 0.0;
        dm.keep[i] = bits[i];
    }
    NodeId b = t.constant(bits);
    NodeId ones = t.constant(Tensor({units}, 1.0));
    NodeId lq_node = t.sum_all(t.add(t.mul(b, t.log(p)),
                                     t.mul(t.sub(ones, b), t.log(t.sub(ones, p)))));
    site_log_q_nodes_.push_back(lq_node);
    const double lq = t.value(lq_node).item();
    traj_.masks.push_back(std::move(dm));
    traj_.site_log_q.push_back(lq);
    traj_.log_q += lq;
    return b;
}

NodeId SamplingHook::log_q_node(Tape& t) const {
    if (g_.config().mode == MaskMode::none) return t.constant(Tensor::scalar(0.0));
    if (g_.config().mode == MaskMode::random)
        return t.constant(Tensor::scalar(const_log_q_));
    NodeId sum = site_log_q_nodes_.at(0);
    for (std::size_t i = 1; i < site_log_q_nodes_.size(); ++i)
        sum = t.add(sum, site_log_q_nodes_[i]);
    return sum;
}

// ---------------------------------------------------------------------------

ForcedHook::ForcedHook(std::vector<DropoutMask> masks, const GFlowOut* g)
    : masks_(std::move(masks)), g_(g) {
    for (const DropoutMask& m : masks_)
        for (double b : m.keep)
            if (b != 0.0 && b != 1.0)
                throw ShapeError("forced mask entries must be 0 or 1");
}

void ForcedHook::begin(Tape&, NodeId x_embed) { x_embed_ = x_embed; }

NodeId ForcedHook::site_mask(Tape& t, std::size_t site, NodeId h) {
    if (site >= masks_.size())
        throw ShapeError("missing mask for site " + std::to_string(site));
    const DropoutMask& m = masks_[site];
    NodeId b = t.constant(Tensor::vec(m.keep));
    const MaskMode mode = g_ ? g_->config().mode : MaskMode::none;
    if (g_ && (mode == MaskMode::bottomup || mode == MaskMode::topdown)) {
        NodeId p = g_->keep_probs(t, site, x_embed_, h);
        const Tensor& pv = t.value(p);
        double lq = 0.0;
        for (std::size_t i = 0; i < pv.size(); ++i)
            lq += m.keep[i] > 0.5 ? std::log(pv[i]) : std::log(1.0 - pv[i]);
        site_log_q_values_.push_back(lq);
    } else if (g_ && mode == MaskMode::random) {
        const double pi = g_->config().pi_prior;
        double lq = 0.0;
        for (double bit : m.keep) {
            const double p = bit > 0.5 ? pi : 1.0 - pi;
            lq += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
        }
        site_log_q_values_.push_back(lq);
    }
    return b;
}

// ---------------------------------------------------------------------------

void ExpectedHook::begin(Tape&, NodeId x_embed) { x_embed_ = x_embed; }

NodeId ExpectedHook::site_mask(Tape& t, std::size_t site, NodeId h) {
    const MaskMode mode = g_.config().mode;
    if (mode == MaskMode::bottomup || mode == MaskMode::topdown)
        return g_.keep_probs(t, site, x_embed_, h);
    // none: identity by definition; random: inverted dropout has expectation
    // 1, so the deterministic pass is also the identity.
    return kNoMask;
}

// ---------------------------------------------------------------------------

Tensor apply_mask_values(const Tensor& act, const DropoutMask& mask, MaskMode mode,
                         bool training, double pi) {
    const std::size_t units = mask.keep.size();
    const std::size_t lead = act.rank() >= 1 ? act.shape[0] : 0;
    const std::size_t expect = act.rank() == 2 ? act.shape[1] : lead;
    if ((act.rank() <= 1 && units != act.size()) ||
        (act.rank() == 2 && units != expect) || (act.rank() == 3 && units != lead))
        throw ShapeError("apply_mask: mask length " + std::to_string(units) +
                         " does not match activation " + act.shape_str());
    const double scale = (mode == MaskMode::random && training) ? 1.0 / pi : 1.0;
    Tensor out = act;
    if (act.rank() == 3) {
        const std::size_t hw = act.shape[1] * act.shape[2];
        for (std::size_t c = 0; c < units; ++c) {
            const double m = mask.keep[c] * scale;
            for (std::size_t i = 0; i < hw; ++i) out.data[c * hw + i] *= m;
        }
    } else if (act.rank() == 2) {
        for (std::size_t r = 0; r < act.shape[0]; ++r)
            for (std::size_t d = 0; d < units; ++d)
                out.data[r * units + d] *= mask.keep[d] * scale;
    } else {
        for (std::size_t i = 0; i < units; ++i) out.data[i] *= mask.keep[i] * scale;
    }
    return out;
}

std::pair<std::vector<DropoutMask>, double> sample_masks(const Backbone& bb,
                                                         const GFlowOut& g,
                                                         const Tensor& x,
                                                         std::mt19937_64& rng,
                                                         bool training) {
    Tape t;
    SamplingHook hook(g, rng, training);
    bb.forward(t, x, &hook);
    return {hook.trajectory().masks, hook.trajectory().log_q};
}

Tensor forward_with_masks(const Backbone& bb, const Tensor& x,
                          const std::vector<DropoutMask>& masks) {
    if (masks.size() != bb.sites().size())
        throw ShapeError("expected " + std::to_string(bb.sites().size()) +
                         " masks, got " + std::to_string(masks.size()));
    for (std::size_t i = 0; i < masks.size(); ++i)
        if (masks[i].keep.size() != bb.sites()[i].units)
            throw ShapeError("mask length mismatch at site " + std::to_string(i));
    Tape t;
    ForcedHook hook(masks);
    ForwardResult fr = bb.forward(t, x, &hook);
    return t.value(fr.logits);
}

// ---------------------------------------------------------------------------

StepLosses train_step(const Backbone& bb, const GFlowOut& g,
                      const std::vector<const Tensor*>& xs, const std::vector<int>& ys,
                      Adam& opt_model, Adam* opt_gfn, double lambda,
                      std::mt19937_64& mask_rng) {
    if (xs.empty() || xs.size() != ys.size())
        throw ConfigError("train_step: empty or mismatched batch");
    const MaskMode mode = g.config().mode;
    Tape t;
    std::vector<NodeId> ce_nodes, tb_nodes;
    ce_nodes.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        SamplingHook hook(g, mask_rng, /*training=*/true);
        ForwardResult fr = bb.forward(t, *xs[i], &hook);
        ce_nodes.push_back(t.cross_entropy(fr.logits, ys[i]));
        if (mode != MaskMode::none) {
            RewardComponents rc = reward(t.value(fr.logits), ys[i],
                                         hook.trajectory().masks, g.config().pi_prior);
            NodeId lhs = t.add(hook.log_z_node(), hook.log_q_node(t));
            tb_nodes.push_back(
                t.square(t.sub(lhs, t.constant(Tensor::scalar(rc.log_r)))));
        }
    }
    NodeId ce_mean = t.mean_scalars(ce_nodes);
    StepLosses losses;
    losses.ce = t.value(ce_mean).item();
    NodeId total = ce_mean;
    if (!tb_nodes.empty()) {
        NodeId tb_mean = t.mean_scalars(tb_nodes);
        losses.tb = t.value(tb_mean).item();
        total = t.add(ce_mean, t.scale(tb_mean, lambda));
    }
    if (!std::isfinite(losses.ce) || !std::isfinite(losses.tb))
        throw NumericError("non-finite training loss (ce=" + std::to_string(losses.ce) +
                           ", tb=" + std::to_string(losses.tb) + ")");
    t.backward(total);
    opt_model.step();
    if (opt_gfn) opt_gfn->step();
    return losses;
}

double train_tb_only(const Backbone& bb, const GFlowOut& g, const Tensor& x, int y,
                     int steps, int batch, double lr, double explore,
                     std::uint64_t seed) {
    Adam opt(g.params.pointers(), lr);
    auto rng = substream(seed, Stream::mask);
    double last = 0.0;
    for (int s = 0; s < steps; ++s) {
        Tape t;
        std::vector<NodeId> tb_nodes;
        tb_nodes.reserve((std::size_t)batch);
        for (int b = 0; b < batch; ++b) {
            SamplingHook hook(g, rng, /*training=*/true, explore);
            ForwardResult fr = bb.forward(t, x, &hook);
            RewardComponents rc =
                reward(t.value(fr.logits), y, hook.trajectory().masks, g.config().pi_prior);
            NodeId lhs = t.add(hook.log_z_node(), hook.log_q_node(t));
            tb_nodes.push_back(
                t.square(t.sub(lhs, t.constant(Tensor::scalar(rc.log_r)))));
        }
        NodeId tb_mean = t.mean_scalars(tb_nodes);
        last = t.value(tb_mean).item();
        if (!std::isfinite(last)) throw NumericError("non-finite TB loss");
        t.backward(tb_mean);
        opt.step();
    }
    return last;
}

FlowCheck brute_force_mask_distribution(const Backbone& bb, const GFlowOut& g,
                                        const Tensor& x, int y) {
    if (g.config().mode == MaskMode::none)
        throw Error("brute force oracle requires a stochastic mask mode");
    const auto& sites = bb.sites();
    const std::size_t n_sites = sites.size();
    std::size_t n_bits = 0;
    for (const auto& s : sites) n_bits += s.units;
    if (n_bits > 16)
        throw Error("brute force oracle limited to 16 mask units, got " +
                    std::to_string(n_bits));

    FlowCheck fc;
    const std::size_t n_masks = std::size_t{1} << n_bits;
    fc.rewards.resize(n_masks);
    fc.q.resize(n_masks);
    std::vector<std::vector<double>> site_lq(n_masks); // conditional log q per site

    for (std::size_t z = 0; z < n_masks; ++z) {
        std::vector<DropoutMask> masks;
        std::size_t pos = 0;
        for (std::size_t s = 0; s < n_sites; ++s) {
            DropoutMask m{sites[s].name, std::vector<double>(sites[s].units)};
            for (std::size_t u = 0; u < sites[s].units; ++u, ++pos)
                m.keep[u] = (z >> pos) & 1u ? 1.0 : 0.0;
            masks.push_back(std::move(m));
        }
        Tape t;
        ForcedHook hook(masks, &g);
        ForwardResult fr = bb.forward(t, x, &hook);
        RewardComponents rc = reward(t.value(fr.logits), y, masks, g.config().pi_prior);
        fc.rewards[z] = std::exp(rc.log_r);
        site_lq[z] = hook.site_log_q();
        double lq = 0.0;
        for (double v : site_lq[z]) lq += v;
        fc.q[z] = std::exp(lq);
    }

    for (double r : fc.rewards) fc.z_exact += r;
    fc.target.resize(n_masks);
    for (std::size_t z = 0; z < n_masks; ++z) fc.target[z] = fc.rewards[z] / fc.z_exact;
    for (std::size_t z = 0; z < n_masks; ++z) {
        fc.q_total += fc.q[z];
        fc.tv += std::abs(fc.q[z] - fc.target[z]);
    }
    fc.tv *= 0.5;

    {
        Tape t;
        ForwardResult fr = bb.forward(t, x, nullptr);
        fc.log_z_learned = t.value(g.log_z(t, fr.x_embed)).item();
    }

    // Policy-induced flows: F(prefix of t sites) = Z_theta * prod of the
    // prefix's conditional probabilities; actions at site t are its 2^u
    // masks. Representative completions fill remaining sites with zeros.
    const double z_theta = std::exp(fc.log_z_learned);
    std::vector<std::size_t> site_bit_offset(n_sites, 0);
    for (std::size_t s = 1; s < n_sites; ++s)
        site_bit_offset[s] = site_bit_offset[s - 1] + sites[s - 1].units;
    std::vector<std::size_t> prefix_masks; // bit patterns of assigned prefixes
    prefix_masks.push_back(0);
    for (std::size_t s = 0; s < n_sites; ++s) {
        std::vector<std::size_t> next;
        const std::size_t actions = std::size_t{1} << sites[s].units;
        for (std::size_t prefix : prefix_masks) {
            double f_prefix = z_theta;
            for (std::size_t i = 0; i < s; ++i)
                f_prefix *= std::exp(site_lq[prefix][i]);
            double inflow_sum = 0.0;
            for (std::size_t a = 0; a < actions; ++a) {
                const std::size_t child = prefix | (a << site_bit_offset[s]);
                inflow_sum += f_prefix * std::exp(site_lq[child][s]);
                next.push_back(child);
            }
            fc.max_flow_gap = std::max(fc.max_flow_gap, std::abs(f_prefix - inflow_sum));
        }
        prefix_masks = std::move(next);
    }
    return fc;
}

Tensor predictive_passes(const Backbone& bb, const GFlowOut& g, const Tensor& x,
                         int K, std::mt19937_64& rng) {
    if (K < 1) throw ConfigError("predictive_passes: K must be >= 1");
    const std::size_t C = (std::size_t)bb.config().n_classes;
    Tensor out({(std::size_t)K, C});
    for (int k = 0; k < K; ++k) {
        Tape t;
        SamplingHook hook(g, rng, /*training=*/true);
        ForwardResult fr = bb.forward(t, x, &hook);
        std::vector<double> probs = softmax_values(t.value(fr.logits).data);
        for (std::size_t c = 0; c < C; ++c) out.at((std::size_t)k, c) = probs[c];
    }
    return out;
}

std::vector<double> expected_pass_probs(const Backbone& bb, const GFlowOut& g,
                                        const Tensor& x) {
    Tape t;
    ExpectedHook hook(g);
    ForwardResult fr = bb.forward(t, x, &hook);
    return softmax_values(t.value(fr.logits).data);
}

} // namespace gfm
