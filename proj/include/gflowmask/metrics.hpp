#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gflowmask/tensor.hpp"

namespace gfm {

// K stochastic passes plus the deterministic expected-mask distribution for
// one sample. Point metrics (accuracy, P/R/F1, AUROC, ECE) read point_probs;
// uncertainty reads the K-pass matrix.
struct PredictiveDistribution {
    Tensor probs; // [K, C], rows sum to 1
    std::vector<double> point_probs;
    int label = 0;
    std::string id;
};

// H(p) = -sum p_i ln p_i with 0 ln 0 := 0. Rejects negative entries and
// vectors whose sum strays from 1 by more than 1e-6.
double entropy(const std::vector<double>& p);

struct EntropyStats {
    double min = 0.0, max = 0.0, mean = 0.0, std = 0.0; // across samples
    std::string argmin_id, argmax_id; // ties -> first sample in input order
    // mean over samples of the per-sample std of per-pass entropies: the
    // "across passes" reading of a +/- column
    double mean_std_across_passes = 0.0;
};

// Per-sample entropy is H(mean over K rows) — predictive entropy.
EntropyStats entropy_summary(const std::vector<PredictiveDistribution>& preds);

struct CalibrationBins {
    int M = 10;
    std::size_t n = 0;
    std::vector<std::size_t> count;   // per bin
    std::vector<double> conf_sum;     // sum of confidences
    std::vector<double> correct_sum;  // sum of correctness indicators
};

// Confidence = max(point_probs); prediction = argmax (ties -> lowest class).
// Bin m in 1..M covers ((m-1)/M, m/M]; confidence 0 lands in bin 1.
std::pair<double, CalibrationBins> ece(const std::vector<PredictiveDistribution>& preds,
                                       int M = 10);

struct Prf {
    double precision = 0.0, recall = 0.0, f1 = 0.0; // support-weighted, in [0,1]
    double accuracy = 0.0;                          // fraction in [0,1]
};

// Per-class P/R/F1 with 0/0 := 0, weighted by true-class support.
Prf weighted_prf(const std::vector<int>& labels, const std::vector<int>& preds,
                 int n_classes);

// One-vs-rest AUC per class via the Mann-Whitney rank statistic (ties count
// one half), support-weighted over classes that have both positives and
// negatives. Throws when every class is degenerate.
double auroc_weighted_ovr(const std::vector<std::vector<double>>& scores,
                          const std::vector<int>& labels, int n_classes);

struct MetricsReport {
    int n_classes = 0;
    std::size_t n_samples = 0;
    double accuracy_pct = 0.0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    double auroc = 0.0;
    EntropyStats entropy;
    double ece = 0.0;
    CalibrationBins bins;
    nlohmann::json config_echo;
};

MetricsReport compute_report(const std::vector<PredictiveDistribution>& preds,
                             int n_classes, int ece_bins = 10);

nlohmann::json report_to_json(const MetricsReport& r);

// Columns: bin_low, bin_high, count, avg_conf, accuracy, gap.
void write_bins_csv(const std::string& path, const CalibrationBins& bins);

struct OodComparison {
    double entropy_mean_id = 0.0, entropy_mean_ood = 0.0, entropy_delta = 0.0;
    double ece_id = 0.0, ece_ood = 0.0, ece_delta = 0.0;
    bool entropy_ood_higher = false; // recorded, never asserted
    bool ece_ood_higher = false;
};

OodComparison compare_ood(const MetricsReport& id_report,
                          const MetricsReport& ood_report);

nlohmann::json comparison_to_json(const OodComparison& c);

} // namespace gfm
