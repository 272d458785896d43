#include "gflowmask/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gflowmask/errors.hpp"
#include "gflowmask/nn.hpp"

namespace gfm {

double entropy(const std::vector<double>& p) {
    double sum = 0.0, h = 0.0;
    for (double v : p) {
        if (v < 0.0) throw NumericError("entropy: negative probability");
        sum += v;
        if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw NumericError("entropy: probabilities sum to " + std::to_string(sum));
    return h;
}

namespace {

std::vector<double> mean_row(const Tensor& probs) {
    const std::size_t K = probs.shape[0], C = probs.shape[1];
    std::vector<double> m(C, 0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) m[c] += probs.at(k, c);
    for (double& v : m) v /= (double)K;
    return m;
}

std::vector<double> row(const Tensor& probs, std::size_t k) {
    const std::size_t C = probs.shape[1];
    std::vector<double> r(C);
    for (std::size_t c = 0; c < C; ++c) r[c] = probs.at(k, c);
    return r;
}

double population_std(const std::vector<double>& xs, double mean) {
    if (xs.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / (double)xs.size());
}

} // namespace

EntropyStats entropy_summary(const std::vector<PredictiveDistribution>& preds) {
    if (preds.empty()) throw ConfigError("entropy_summary: empty input");
    EntropyStats st;
    std::vector<double> hs(preds.size());
    std::vector<double> pass_stds(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const Tensor& probs = preds[i].probs;
        if (probs.rank() != 2 || probs.shape[0] < 1)
            throw ShapeError("predictive probs must be K x C with K >= 1");
        hs[i] = entropy(mean_row(probs));
        std::vector<double> per_pass(probs.shape[0]);
        for (std::size_t k = 0; k < probs.shape[0]; ++k)
            per_pass[k] = entropy(row(probs, k));
        const double pm =
            std::accumulate(per_pass.begin(), per_pass.end(), 0.0) /
            (double)per_pass.size();
        pass_stds[i] = population_std(per_pass, pm);
    }
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < hs.size(); ++i) {
        if (hs[i] < hs[lo]) lo = i;
        if (hs[i] > hs[hi]) hi = i;
    }
    st.min = hs[lo];
    st.max = hs[hi];
    st.argmin_id = preds[lo].id;
    st.argmax_id = preds[hi].id;
    st.mean = std::accumulate(hs.begin(), hs.end(), 0.0) / (double)hs.size();
    st.std = population_std(hs, st.mean);
    st.mean_std_across_passes =
        std::accumulate(pass_stds.begin(), pass_stds.end(), 0.0) /
        (double)pass_stds.size();
    return st;
}

std::pair<double, CalibrationBins> ece(const std::vector<PredictiveDistribution>& preds,
                                       int M) {
    if (M < 1) throw ConfigError("ece: M must be >= 1");
    CalibrationBins bins;
    bins.M = M;
    bins.n = preds.size();
    bins.count.assign((std::size_t)M, 0);
    bins.conf_sum.assign((std::size_t)M, 0.0);
    bins.correct_sum.assign((std::size_t)M, 0.0);
    for (const auto& pd : preds) {
        if (pd.point_probs.empty()) throw ShapeError("ece: missing point_probs");
        const std::size_t pred = argmax_index(pd.point_probs);
        const double conf = pd.point_probs[pred];
        // smallest m with conf <= m/M; conf 0 falls into bin 1
        int m = 1;
        while (m < M && conf > (double)m / (double)M) ++m;
        const std::size_t b = (std::size_t)(m - 1);
        bins.count[b] += 1;
        bins.conf_sum[b] += conf;
        bins.correct_sum[b] += (int)pred == pd.label ? 1.0 : 0.0;
    }
    double score = 0.0;
    for (std::size_t b = 0; b < (std::size_t)M; ++b) {
        if (bins.count[b] == 0) continue;
        const double cnt = (double)bins.count[b];
        score += cnt / (double)bins.n *
                 std::abs(bins.correct_sum[b] / cnt - bins.conf_sum[b] / cnt);
    }
    return {score, bins};
}

Prf weighted_prf(const std::vector<int>& labels, const std::vector<int>& preds,
                 int n_classes) {
    if (labels.size() != preds.size() || labels.empty())
        throw ConfigError("weighted_prf: label/prediction size mismatch");
    std::vector<double> tp((std::size_t)n_classes, 0.0),
        fp((std::size_t)n_classes, 0.0), fn((std::size_t)n_classes, 0.0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= n_classes || preds[i] < 0 ||
            preds[i] >= n_classes)
            throw ConfigError("weighted_prf: class index out of range");
        if (labels[i] == preds[i]) {
            tp[(std::size_t)labels[i]] += 1.0;
            ++correct;
        } else {
            fn[(std::size_t)labels[i]] += 1.0;
            fp[(std::size_t)preds[i]] += 1.0;
        }
    }
    Prf out;
    const double n = (double)labels.size();
    for (int c = 0; c < n_classes; ++c) {
        const std::size_t ci = (std::size_t)c;
        const double support = tp[ci] + fn[ci];
        if (support == 0.0) continue; // absent class carries no weight
        const double p = tp[ci] + fp[ci] > 0.0 ? tp[ci] / (tp[ci] + fp[ci]) : 0.0;
        const double r = tp[ci] / support;
        const double f = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        out.precision += support / n * p;
        out.recall += support / n * r;
        out.f1 += support / n * f;
    }
    out.accuracy = (double)correct / n;
    return out;
}

double auroc_weighted_ovr(const std::vector<std::vector<double>>& scores,
                          const std::vector<int>& labels, int n_classes) {
    if (scores.size() != labels.size() || scores.empty())
        throw ConfigError("auroc: score/label size mismatch");
    const std::size_t n = scores.size();
    double weighted = 0.0, weight_total = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        std::size_t n_pos = 0;
        for (int l : labels) n_pos += l == c;
        const std::size_t n_neg = n - n_pos;
        if (n_pos == 0 || n_neg == 0) continue; // degenerate class: skipped

        // average ranks (1-based) with ties sharing their midrank
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) {
                             return scores[a][(std::size_t)c] < scores[b][(std::size_t)c];
                         });
        std::vector<double> rank(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && scores[order[j + 1]][(std::size_t)c] ==
                                    scores[order[i]][(std::size_t)c])
                ++j;
            const double mid = ((double)i + (double)j) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
            i = j + 1;
        }
        double rank_sum = 0.0;
        for (std::size_t s = 0; s < n; ++s)
            if (labels[s] == c) rank_sum += rank[s];
        const double auc =
            (rank_sum - (double)n_pos * ((double)n_pos + 1.0) / 2.0) /
            ((double)n_pos * (double)n_neg);
        weighted += (double)n_pos * auc;
        weight_total += (double)n_pos;
    }
    if (weight_total == 0.0)
        throw NumericError("auroc: every class is degenerate");
    return weighted / weight_total;
}

MetricsReport compute_report(const std::vector<PredictiveDistribution>& preds,
                             int n_classes, int ece_bins) {
    if (preds.empty()) throw ConfigError("compute_report: empty input");
    MetricsReport r;
    r.n_classes = n_classes;
    r.n_samples = preds.size();
    std::vector<int> labels, point_preds;
    std::vector<std::vector<double>> scores;
    for (const auto& pd : preds) {
        labels.push_back(pd.label);
        point_preds.push_back((int)argmax_index(pd.point_probs));
        scores.push_back(pd.point_probs);
    }
    const Prf prf = weighted_prf(labels, point_preds, n_classes);
    r.accuracy_pct = prf.accuracy * 100.0;
    r.precision = prf.precision;
    r.recall = prf.recall;
    r.f1 = prf.f1;
    r.auroc = auroc_weighted_ovr(scores, labels, n_classes);
    r.entropy = entropy_summary(preds);
    auto [score, bins] = ece(preds, ece_bins);
    r.ece = score;
    r.bins = std::move(bins);
    return r;
}

nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json bins = nlohmann::json::array();
    for (std::size_t b = 0; b < (std::size_t)r.bins.M; ++b) {
        const double cnt = (double)r.bins.count[b];
        bins.push_back({
            {"bin_low", (double)b / (double)r.bins.M},
            {"bin_high", (double)(b + 1) / (double)r.bins.M},
            {"count", r.bins.count[b]},
            {"avg_conf", cnt > 0.0 ? r.bins.conf_sum[b] / cnt : 0.0},
            {"accuracy", cnt > 0.0 ? r.bins.correct_sum[b] / cnt : 0.0},
        });
    }
    return {
        {"n_classes", r.n_classes},
        {"n_samples", r.n_samples},
        {"accuracy_pct", r.accuracy_pct},
        {"precision", r.precision},
        {"recall", r.recall},
        {"f1", r.f1},
        {"auroc", r.auroc},
        {"entropy",
         {{"min", r.entropy.min},
          {"max", r.entropy.max},
          {"mean", r.entropy.mean},
          {"std", r.entropy.std},
          {"argmin_id", r.entropy.argmin_id},
          {"argmax_id", r.entropy.argmax_id},
          {"mean_std_across_passes", r.entropy.mean_std_across_passes}}},
        {"ece", r.ece},
        {"calibration_bins", bins},
        {"config", r.config_echo.is_null() ? nlohmann::json::object() : r.config_echo},
    };
}

void write_bins_csv(const std::string& path, const CalibrationBins& bins) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "bin_low,bin_high,count,avg_conf,accuracy,gap\n";
    for (std::size_t b = 0; b < (std::size_t)bins.M; ++b) {
        const double cnt = (double)bins.count[b];
        const double conf = cnt > 0.0 ? bins.conf_sum[b] / cnt : 0.0;
        const double acc = cnt > 0.0 ? bins.correct_sum[b] / cnt : 0.0;
        f << (double)b / (double)bins.M << ',' << (double)(b + 1) / (double)bins.M
          << ',' << bins.count[b] << ',' << conf << ',' << acc << ','
          << std::abs(acc - conf) << '\n';
    }
}

OodComparison compare_ood(const MetricsReport& id_report,
                          const MetricsReport& ood_report) {
    if (id_report.n_classes != ood_report.n_classes)
        throw ConfigError("compare_ood: class count mismatch");
    OodComparison c;
    c.entropy_mean_id = id_report.entropy.mean;
    c.entropy_mean_ood = ood_report.entropy.mean;
    c.entropy_delta = c.entropy_mean_ood - c.entropy_mean_id;
    c.ece_id = id_report.ece;
    c.ece_ood = ood_report.ece;
    c.ece_delta = c.ece_ood - c.ece_id;
    c.entropy_ood_higher = c.entropy_delta > 0.0;
    c.ece_ood_higher = c.ece_delta >= 0.0;
    return c;
}

nlohmann::json comparison_to_json(const OodComparison& c) {
    return {
        {"entropy_mean_id", c.entropy_mean_id},
        {"entropy_mean_ood", c.entropy_mean_ood},
        {"entropy_delta", c.entropy_delta},
        {"ece_id", c.ece_id},
        {"ece_ood", c.ece_ood},
        {"ece_delta", c.ece_delta},
        {"entropy_ood_higher", c.entropy_ood_higher},
        {"ece_ood_higher", c.ece_ood_higher},
    };
}

} // namespace gfm
