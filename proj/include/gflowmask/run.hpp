#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gflowmask/backbone.hpp"
#include "gflowmask/data.hpp"
#include "gflowmask/gflowout.hpp"
#include "gflowmask/metrics.hpp"

namespace gfm {

struct TrainParams {
    int epochs = 30;
    int batch_size = 32;
    double lr = 1e-3;
    double gfn_lr = 1e-3;
    double lambda_tb = 1.0;

    void validate() const;
};

struct EvalParams {
    int passes = 5; // five forward passes
    int ece_bins = 10;
    NoiseSpec noise;

    void validate() const;
};

// One JSON config drives every subcommand; unknown keys are rejected and
// the seed is mandatory (no wall-clock seeding anywhere).
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir;
    std::string data_dir;
    SyntheticConfig dataset;
    PreprocessConfig preprocess;
    BackboneConfig backbone;
    GFlowOutConfig gflowout;
    TrainParams train;
    EvalParams eval;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path); // parse errors -> ConfigError
nlohmann::json run_config_to_json(const RunConfig& c);

// "kind" or "kind:param", e.g. "none", "gaussian:0.1".
NoiseSpec parse_noise_spec(const std::string& s);
std::string noise_spec_to_string(const NoiseSpec& n);

// dataset dirs under cfg.out_dir plus a provenance copy of the config
void cmd_gen_data(const RunConfig& cfg);

// cfg.data_dir/{train,test} -> cfg.out_dir/{snapshot.gfmk, model.json,
// train_log.csv, config.json}
void cmd_train(const RunConfig& cfg);

// A snapshot plus the model.json sitting next to it.
struct LoadedModel {
    BackboneConfig backbone_cfg;
    GFlowOutConfig gflowout_cfg;
    PreprocessConfig preprocess;
    std::uint64_t train_seed = 0;
    std::unique_ptr<Backbone> bb;
    std::unique_ptr<GFlowOut> g;
};

LoadedModel load_model(const std::string& snapshot_path);

// Per-sample predictive distributions for one dataset split: point
// probabilities from the expected-mask pass, K stochastic rows, optional
// noise injected on the normalized tensor. Sample i draws from
// substream(seed, noise, i) and substream(seed, mask, i, 1) so results do
// not depend on evaluation order; GFLOWMASK_THREADS shards the compute.
std::vector<PredictiveDistribution> evaluate_split(const LoadedModel& m,
                                                   const std::string& split_dir,
                                                   const NoiseSpec& noise, int passes,
                                                   std::uint64_t seed);

// report.json + bins.csv under cfg.out_dir
MetricsReport cmd_eval(const RunConfig& cfg, const std::string& snapshot_path,
                       const std::string& split_dir);

// comparison.json + entropy.csv (one row per sample across both splits)
OodComparison cmd_ood(const RunConfig& cfg, const std::string& snapshot_path,
                      const std::string& id_dir, const std::string& ood_dir);

// Heatmap + overlay for the top_n lowest- and highest-entropy samples
// (PGM/PPM, filenames embed sample id and entropy) plus an index JSON.
// site < 0 means the last dropout site.
void cmd_saliency(const RunConfig& cfg, const std::string& snapshot_path,
                  const std::string& split_dir, int top_n, int site);

} // namespace gfm
