#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gflowmask/backbone.hpp"
#include "gflowmask/optim.hpp"

namespace gfm {

enum class MaskMode { none, random, bottomup, topdown };

MaskMode parse_mask_mode(const std::string& s);
const char* to_string(MaskMode m);

struct DropoutMask {
    std::string site;
    std::vector<double> keep; // entries in {0,1}
};

// One GFlowNet trajectory: the ordered per-site mask actions and their log
// policy probabilities. log_q = sum(site_log_q) <= 0.
struct MaskTrajectory {
    std::vector<DropoutMask> masks;
    std::vector<double> site_log_q;
    double log_q = 0.0;
};

struct GFlowOutConfig {
    MaskMode mode = MaskMode::bottomup;
    double pi_prior = 0.9;
    int policy_hidden = 16;
    int logz_hidden = 8;

    void validate() const;
};

struct RewardComponents {
    double log_likelihood = 0.0; // log p(y|x,z)
    double log_prior = 0.0;      // log p(z), independent Bernoulli(pi) keep-prior
    double log_r = 0.0;
};

// R(z;x,y) = p(y|x,z) * p(z), in log domain. logits must come from a forward
// pass with exactly these masks; the value is treated as a constant (no
// gradient flows into the classifier through the reward).
RewardComponents reward(const Tensor& logits, int label,
                        const std::vector<DropoutMask>& masks, double pi_prior);

double tb_loss_value(double log_z, double log_q, double log_r);

// Mask policies + partition estimator for one backbone. Owns the per-site
// policy MLPs (bottomup/topdown) and log Z (per-sample MLP for bottomup,
// single scalar for topdown/random). All parameter names carry the
// "gflowout/" prefix.
class GFlowOut {
public:
    GFlowOut(const Backbone& bb, GFlowOutConfig cfg, std::uint64_t seed);

    const GFlowOutConfig& config() const { return cfg_; }

    // Clamped keep-probabilities for one site. x_embed/h are detached
    // internally: the policy never backpropagates into the classifier.
    NodeId keep_probs(Tape& t, std::size_t site, NodeId x_embed, NodeId h) const;

    // log Z node; constant 0 for mode none.
    NodeId log_z(Tape& t, NodeId x_embed) const;

    const std::string& site_name(std::size_t site) const { return site_names_[site]; }
    std::size_t site_count() const { return site_units_.size(); }
    std::size_t site_units(std::size_t site) const { return site_units_[site]; }

    ParamRegistry params;

private:
    struct SitePolicy {
        DenseLayer fc1, fc2;
    };
    GFlowOutConfig cfg_;
    std::vector<SitePolicy> site_policies_;
    std::vector<std::size_t> site_units_;
    std::vector<std::string> site_names_;
    DenseLayer logz_fc1_, logz_fc2_; // bottomup
    Parameter* logz_scalar_ = nullptr; // topdown / random
};

// Samples a mask per site as the forward pass reaches it, accumulating the
// trajectory and its log_q on the tape. One instance per forward pass.
// `training` controls random-mode inverted-dropout scaling. `explore`
// mixes the sampling distribution toward uniform (off-policy TB); log_q
// always measures the policy itself.
class SamplingHook final : public MaskHook {
public:
    SamplingHook(const GFlowOut& g, std::mt19937_64& rng, bool training,
                 double explore = 0.0);
    void begin(Tape& t, NodeId x_embed) override;
    NodeId site_mask(Tape& t, std::size_t site, NodeId h) override;

    // Valid after the forward pass completes.
    NodeId log_q_node(Tape& t) const;
    NodeId log_z_node() const { return log_z_; }
    const MaskTrajectory& trajectory() const { return traj_; }

private:
    const GFlowOut& g_;
    std::mt19937_64& rng_;
    bool training_;
    double explore_;
    NodeId x_embed_ = -1;
    NodeId log_z_ = -1;
    std::vector<NodeId> site_log_q_nodes_;
    double const_log_q_ = 0.0; // random mode: no trainable policy terms
    MaskTrajectory traj_;
};

// Applies externally supplied masks verbatim (no rescaling). With a policy
// attached, also records the policy's log-probability of those masks
// (enumeration oracle).
class ForcedHook final : public MaskHook {
public:
    explicit ForcedHook(std::vector<DropoutMask> masks, const GFlowOut* g = nullptr);
    void begin(Tape& t, NodeId x_embed) override;
    NodeId site_mask(Tape& t, std::size_t site, NodeId h) override;

    const std::vector<double>& site_log_q() const { return site_log_q_values_; }

private:
    std::vector<DropoutMask> masks_;
    const GFlowOut* g_;
    NodeId x_embed_ = -1;
    std::vector<double> site_log_q_values_;
};

// Deterministic point-prediction pass: multiplies by keep-probabilities for
// the policy modes, identity for none/random.
class ExpectedHook final : public MaskHook {
public:
    explicit ExpectedHook(const GFlowOut& g) : g_(g) {}
    void begin(Tape& t, NodeId x_embed) override;
    NodeId site_mask(Tape& t, std::size_t site, NodeId h) override;

private:
    const GFlowOut& g_;
    NodeId x_embed_ = -1;
};

// Value-level mask application (broadcast over spatial/token axes):
// rank-3 activations mask per channel, rank-2 per column, rank-1 per entry.
Tensor apply_mask_values(const Tensor& act, const DropoutMask& mask, MaskMode mode,
                         bool training, double pi);

// One full-trajectory sample without keeping the tape: (masks, log_q).
std::pair<std::vector<DropoutMask>, double> sample_masks(const Backbone& bb,
                                                         const GFlowOut& g,
                                                         const Tensor& x,
                                                         std::mt19937_64& rng,
                                                         bool training);

// Forward pass under externally supplied masks (one per site, in site
// order, binary entries). Returns logits values.
Tensor forward_with_masks(const Backbone& bb, const Tensor& x,
                          const std::vector<DropoutMask>& masks);

struct StepLosses {
    double ce = 0.0;
    double tb = 0.0;
};

// One optimizer step on a batch: mean cross-entropy trains the classifier,
// lambda * mean TB loss trains policy + logZ. opt_gfn may be null for mode
// none. Throws NumericError on non-finite loss.
StepLosses train_step(const Backbone& bb, const GFlowOut& g,
                      const std::vector<const Tensor*>& xs, const std::vector<int>& ys,
                      Adam& opt_model, Adam* opt_gfn, double lambda,
                      std::mt19937_64& mask_rng);

// TB-only training against a single fixed (x, y): the policy and logZ move,
// the classifier is frozen. Returns the final-step mean TB loss.
double train_tb_only(const Backbone& bb, const GFlowOut& g, const Tensor& x, int y,
                     int steps, int batch, double lr, double explore,
                     std::uint64_t seed);

// Exhaustive oracle over all 2^n masks (n = total mask units <= 16).
struct FlowCheck {
    std::vector<double> rewards;  // R(z), enumeration order: site-major bits
    double z_exact = 0.0;         // sum of rewards
    std::vector<double> target;   // R(z) / Z
    std::vector<double> q;        // exact policy probability of each z
    double q_total = 0.0;
    double tv = 0.0;              // total variation distance TV(q, target)
    double log_z_learned = 0.0;
    double max_flow_gap = 0.0;    // max |F(s) - sum_a F(s,a)|, policy-induced flows
};

FlowCheck brute_force_mask_distribution(const Backbone& bb, const GFlowOut& g,
                                        const Tensor& x, int y);

// K stochastic forward passes; rows are softmax probability vectors.
// Masks are sampled and applied exactly as during training.
Tensor predictive_passes(const Backbone& bb, const GFlowOut& g, const Tensor& x,
                         int K, std::mt19937_64& rng);

// Deterministic expected-mask class probabilities.
std::vector<double> expected_pass_probs(const Backbone& bb, const GFlowOut& g,
                                        const Tensor& x);

} // namespace gfm
