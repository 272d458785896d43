#include "gflowmask/run.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "gflowmask/errors.hpp"
#include "gflowmask/rng.hpp"
#include "gflowmask/saliency.hpp"
#include "gflowmask/snapshot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gfm {

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// shortest decimal that parses back to exactly v (for config echoes)
std::string fmt_shortest(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Typo safety: every config object enumerates its legal keys.
void check_keys(const json& j, const char* where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw ConfigError(std::string("config: ") + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) { known = true; break; }
        if (!known)
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

void parse_backbone(const json& j, BackboneConfig& c) {
    check_keys(j, "backbone",
               {"kind", "input_size", "n_classes", "channels", "patch_size",
                "embed_dim", "n_layers", "n_heads", "mlp_dim"});
    read_field(j, "kind", c.kind);
    read_field(j, "input_size", c.input_size);
    read_field(j, "n_classes", c.n_classes);
    read_field(j, "channels", c.channels);
    read_field(j, "patch_size", c.patch_size);
    read_field(j, "embed_dim", c.embed_dim);
    read_field(j, "n_layers", c.n_layers);
    read_field(j, "n_heads", c.n_heads);
    read_field(j, "mlp_dim", c.mlp_dim);
}

json backbone_to_json(const BackboneConfig& c) {
    return {{"kind", c.kind},           {"input_size", c.input_size},
            {"n_classes", c.n_classes}, {"channels", c.channels},
            {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
            {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
            {"mlp_dim", c.mlp_dim}};
}

void parse_gflowout(const json& j, GFlowOutConfig& c) {
    check_keys(j, "gflowout", {"mode", "pi_prior", "policy_hidden", "logz_hidden"});
    if (j.contains("mode")) {
        std::string mode;
        read_field(j, "mode", mode);
        c.mode = parse_mask_mode(mode);
    }
    read_field(j, "pi_prior", c.pi_prior);
    read_field(j, "policy_hidden", c.policy_hidden);
    read_field(j, "logz_hidden", c.logz_hidden);
}

json gflowout_to_json(const GFlowOutConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"pi_prior", c.pi_prior},
            {"policy_hidden", c.policy_hidden},
            {"logz_hidden", c.logz_hidden}};
}

void parse_preprocess(const json& j, PreprocessConfig& c) {
    check_keys(j, "preprocess", {"crop", "mean", "std"});
    read_field(j, "crop", c.crop);
    read_field(j, "mean", c.mean);
    read_field(j, "std", c.std);
}

json preprocess_to_json(const PreprocessConfig& c) {
    return {{"crop", c.crop}, {"mean", c.mean}, {"std", c.std}};
}

void parse_dataset(const json& j, SyntheticConfig& c) {
    // seed intentionally absent: dataset generation draws from the run seed
    check_keys(j, "dataset",
               {"n_classes", "per_class", "image_size", "test_fraction",
                "ood_fraction", "ood_shift"});
    read_field(j, "n_classes", c.n_classes);
    read_field(j, "per_class", c.per_class);
    read_field(j, "image_size", c.image_size);
    read_field(j, "test_fraction", c.test_fraction);
    read_field(j, "ood_fraction", c.ood_fraction);
    read_field(j, "ood_shift", c.ood_shift);
}

json dataset_to_json(const SyntheticConfig& c) {
    return {{"n_classes", c.n_classes},         {"per_class", c.per_class},
            {"image_size", c.image_size},       {"test_fraction", c.test_fraction},
            {"ood_fraction", c.ood_fraction},   {"ood_shift", c.ood_shift}};
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << body;
    if (!f) throw IoError("short write: " + path);
}

void write_json_file(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

int env_threads() {
    const char* e = std::getenv("GFLOWMASK_THREADS");
    if (!e || !*e) return 1;
    int t = std::atoi(e);
    return std::clamp(t, 1, 64);
}

double split_accuracy(const Backbone& bb, const GFlowOut& g,
                      const std::vector<Tensor>& xs, const std::vector<int>& ys) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < xs.size(); ++i)
        if ((int)argmax_index(expected_pass_probs(bb, g, xs[i])) == ys[i]) ++correct;
    return xs.size() ? (double)correct / (double)xs.size() : 0.0;
}

struct Split {
    std::vector<Tensor> xs;
    std::vector<int> ys;
    std::vector<std::string> ids;
};

Split load_split(const std::string& dir, const PreprocessConfig& pp) {
    DatasetReader r(dir);
    Split s;
    s.xs.reserve(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        s.xs.push_back(preprocess(r.at(i), pp));
        s.ys.push_back(r.label(i));
        s.ids.push_back(r.id(i));
    }
    return s;
}

// Center crop with the same floor offsets the preprocessing pipeline uses;
// the overlay base image must line up with the model input.
ImageSample center_crop(const ImageSample& img, int crop) {
    const std::size_t H = img.pixels.shape[0], W = img.pixels.shape[1];
    const std::size_t oy = (H - (std::size_t)crop) / 2, ox = (W - (std::size_t)crop) / 2;
    ImageSample out;
    out.label = img.label;
    out.id = img.id;
    out.pixels = Tensor({(std::size_t)crop, (std::size_t)crop, 3});
    for (std::size_t y = 0; y < (std::size_t)crop; ++y)
        for (std::size_t x = 0; x < (std::size_t)crop; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                out.pixels.at(y, x, c) = img.pixels.at(oy + y, ox + x, c);
    return out;
}

double predictive_entropy(const PredictiveDistribution& p) {
    const std::size_t K = p.probs.shape[0], C = p.probs.shape[1];
    std::vector<double> mean(C, 0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) mean[c] += p.probs.at(k, c) / (double)K;
    return entropy(mean);
}

} // namespace

void TrainParams::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0.0) || !(gfn_lr > 0.0)) throw ConfigError("train learning rates must be > 0");
    if (lambda_tb < 0.0) throw ConfigError("train.lambda_tb must be >= 0");
}

void EvalParams::validate() const {
    if (passes < 1) throw ConfigError("eval.passes must be >= 1");
    if (ece_bins < 1) throw ConfigError("eval.ece_bins must be >= 1");
    noise.validate();
}

NoiseSpec parse_noise_spec(const std::string& s) {
    NoiseSpec n;
    const auto colon = s.find(':');
    n.kind = parse_noise_kind(s.substr(0, colon));
    if (colon != std::string::npos) {
        try {
            std::size_t used = 0;
            n.param = std::stod(s.substr(colon + 1), &used);
            if (colon + 1 + used != s.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("noise: bad parameter in '" + s + "'");
        }
    }
    n.validate();
    // zero-amplitude noise is exactly the identity; normalize so reports
    // echo (and compare) identically to a clean run
    if (n.param == 0.0) n.kind = NoiseKind::none;
    return n;
}

std::string noise_spec_to_string(const NoiseSpec& n) {
    if (n.kind == NoiseKind::none) return "none";
    return std::string(to_string(n.kind)) + ":" + fmt_shortest(n.param);
}

RunConfig parse_run_config(const json& j) {
    check_keys(j, "config",
               {"seed", "out_dir", "data_dir", "dataset", "preprocess", "backbone",
                "gflowout", "train", "eval"});
    if (!j.contains("seed"))
        throw ConfigError("config: 'seed' is mandatory (no wall-clock seeding)");
    RunConfig c;
    read_field(j, "seed", c.seed);
    read_field(j, "out_dir", c.out_dir);
    read_field(j, "data_dir", c.data_dir);
    if (j.contains("dataset")) parse_dataset(j.at("dataset"), c.dataset);
    if (j.contains("preprocess")) parse_preprocess(j.at("preprocess"), c.preprocess);
    if (j.contains("backbone")) parse_backbone(j.at("backbone"), c.backbone);
    if (j.contains("gflowout")) parse_gflowout(j.at("gflowout"), c.gflowout);
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train", {"epochs", "batch_size", "lr", "gfn_lr", "lambda_tb"});
        read_field(t, "epochs", c.train.epochs);
        read_field(t, "batch_size", c.train.batch_size);
        read_field(t, "lr", c.train.lr);
        read_field(t, "gfn_lr", c.train.gfn_lr);
        read_field(t, "lambda_tb", c.train.lambda_tb);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, "eval", {"passes", "ece_bins", "noise"});
        read_field(e, "passes", c.eval.passes);
        read_field(e, "ece_bins", c.eval.ece_bins);
        if (e.contains("noise")) {
            std::string s;
            read_field(e, "noise", s);
            c.eval.noise = parse_noise_spec(s);
        }
    }
    c.dataset.seed = c.seed;
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

json run_config_to_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"out_dir", c.out_dir},
            {"data_dir", c.data_dir},
            {"dataset", dataset_to_json(c.dataset)},
            {"preprocess", preprocess_to_json(c.preprocess)},
            {"backbone", backbone_to_json(c.backbone)},
            {"gflowout", gflowout_to_json(c.gflowout)},
            {"train",
             {{"epochs", c.train.epochs},
              {"batch_size", c.train.batch_size},
              {"lr", c.train.lr},
              {"gfn_lr", c.train.gfn_lr},
              {"lambda_tb", c.train.lambda_tb}}},
            {"eval",
             {{"passes", c.eval.passes},
              {"ece_bins", c.eval.ece_bins},
              {"noise", noise_spec_to_string(c.eval.noise)}}}};
}

void cmd_gen_data(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("gen-data: out_dir is required");
    generate_synthetic(cfg.dataset, cfg.out_dir);
    write_json_file((fs::path(cfg.out_dir) / "config.json").string(),
                    run_config_to_json(cfg));
}

void cmd_train(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("train: out_dir is required");
    if (cfg.data_dir.empty()) throw ConfigError("train: data_dir is required");
    cfg.train.validate();
    cfg.preprocess.validate();
    cfg.backbone.validate();
    cfg.gflowout.validate();

    Split train = load_split((fs::path(cfg.data_dir) / "train").string(), cfg.preprocess);
    Split test = load_split((fs::path(cfg.data_dir) / "test").string(), cfg.preprocess);

    auto bb = make_backbone(cfg.backbone, cfg.seed);
    GFlowOut g(*bb, cfg.gflowout, cfg.seed);
    Adam opt_model(bb->params.pointers(), cfg.train.lr);
    std::unique_ptr<Adam> opt_gfn;
    if (cfg.gflowout.mode != MaskMode::none)
        opt_gfn = std::make_unique<Adam>(g.params.pointers(), cfg.train.gfn_lr);

    // one serial mask stream across all of training
    auto mask_rng = substream(cfg.seed, Stream::mask);

    std::string log = "epoch,ce_loss,tb_loss,train_acc,test_acc\n";
    std::vector<std::size_t> order(train.xs.size());
    std::iota(order.begin(), order.end(), (std::size_t)0);
    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        auto order_rng = substream(cfg.seed, Stream::data_order, (std::uint64_t)epoch);
        std::shuffle(order.begin(), order.end(), order_rng);
        double ce_sum = 0.0, tb_sum = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += (std::size_t)cfg.train.batch_size) {
            const std::size_t stop =
                std::min(order.size(), start + (std::size_t)cfg.train.batch_size);
            std::vector<const Tensor*> xs;
            std::vector<int> ys;
            for (std::size_t k = start; k < stop; ++k) {
                xs.push_back(&train.xs[order[k]]);
                ys.push_back(train.ys[order[k]]);
            }
            StepLosses l = train_step(*bb, g, xs, ys, opt_model, opt_gfn.get(),
                                      cfg.train.lambda_tb, mask_rng);
            ce_sum += l.ce * (double)xs.size();
            tb_sum += l.tb * (double)xs.size();
        }
        const double n = (double)train.xs.size();
        log += std::to_string(epoch) + "," + fmt17(ce_sum / n) + "," +
               fmt17(tb_sum / n) + "," + fmt17(split_accuracy(*bb, g, train.xs, train.ys)) +
               "," + fmt17(split_accuracy(*bb, g, test.xs, test.ys)) + "\n";
    }

    fs::create_directories(cfg.out_dir);
    write_text((fs::path(cfg.out_dir) / "train_log.csv").string(), log);
    std::vector<Parameter*> all = bb->params.pointers();
    for (Parameter* p : g.params.pointers()) all.push_back(p);
    save_snapshot((fs::path(cfg.out_dir) / "snapshot.gfmk").string(), all);
    write_json_file((fs::path(cfg.out_dir) / "model.json").string(),
                    json{{"backbone", backbone_to_json(cfg.backbone)},
                         {"gflowout", gflowout_to_json(cfg.gflowout)},
                         {"preprocess", preprocess_to_json(cfg.preprocess)},
                         {"seed", cfg.seed}});
    write_json_file((fs::path(cfg.out_dir) / "config.json").string(),
                    run_config_to_json(cfg));
}

LoadedModel load_model(const std::string& snapshot_path) {
    const fs::path model_path = fs::path(snapshot_path).parent_path() / "model.json";
    std::ifstream f(model_path);
    if (!f)
        throw SnapshotError("model.json not found next to snapshot: " +
                            model_path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: " + model_path.string() + " is not valid JSON: " +
                          e.what());
    }
    check_keys(j, "model", {"backbone", "gflowout", "preprocess", "seed"});
    LoadedModel m;
    if (j.contains("backbone")) parse_backbone(j.at("backbone"), m.backbone_cfg);
    if (j.contains("gflowout")) parse_gflowout(j.at("gflowout"), m.gflowout_cfg);
    if (j.contains("preprocess")) parse_preprocess(j.at("preprocess"), m.preprocess);
    read_field(j, "seed", m.train_seed);

    m.bb = make_backbone(m.backbone_cfg, m.train_seed);
    m.g = std::make_unique<GFlowOut>(*m.bb, m.gflowout_cfg, m.train_seed);
    std::vector<Parameter*> all = m.bb->params.pointers();
    for (Parameter* p : m.g->params.pointers()) all.push_back(p);
    load_snapshot(snapshot_path, all);
    return m;
}

std::vector<PredictiveDistribution> evaluate_split(const LoadedModel& m,
                                                   const std::string& split_dir,
                                                   const NoiseSpec& noise, int passes,
                                                   std::uint64_t seed) {
    if (passes < 1) throw ConfigError("eval.passes must be >= 1");
    DatasetReader r(split_dir);
    const std::size_t n = r.size();
    std::vector<Tensor> xs;
    xs.reserve(n);
    std::vector<int> ys(n);
    std::vector<std::string> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor x = preprocess(r.at(i), m.preprocess);
        if (noise.kind != NoiseKind::none) {
            auto rng = substream(seed, Stream::noise, (std::uint64_t)i);
            x = apply_noise_normalized(x, noise, m.preprocess, rng);
        }
        xs.push_back(std::move(x));
        ys[i] = r.label(i);
        ids[i] = r.id(i);
    }

    std::vector<PredictiveDistribution> preds(n);
    auto worker = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            PredictiveDistribution& p = preds[i];
            p.point_probs = expected_pass_probs(*m.bb, *m.g, xs[i]);
            auto rng = substream(seed, Stream::mask, (std::uint64_t)i, 1);
            p.probs = predictive_passes(*m.bb, *m.g, xs[i], passes, rng);
            p.label = ys[i];
            p.id = ids[i];
        }
    };
    const std::size_t T = std::min<std::size_t>((std::size_t)env_threads(), std::max<std::size_t>(n, 1));
    if (T <= 1) {
        worker(0, n);
    } else {
        // contiguous shards; per-sample substreams make the merge order-free
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t lo = n * t / T, hi = n * (t + 1) / T;
            pool.emplace_back(worker, lo, hi);
        }
        for (auto& th : pool) th.join();
    }
    return preds;
}

MetricsReport cmd_eval(const RunConfig& cfg, const std::string& snapshot_path,
                       const std::string& split_dir) {
    if (cfg.out_dir.empty()) throw ConfigError("eval: out_dir is required");
    cfg.eval.validate();
    LoadedModel m = load_model(snapshot_path);
    auto preds =
        evaluate_split(m, split_dir, cfg.eval.noise, cfg.eval.passes, cfg.seed);
    MetricsReport rep =
        compute_report(preds, m.backbone_cfg.n_classes, cfg.eval.ece_bins);
    rep.config_echo = {{"snapshot", snapshot_path},
                       {"data", split_dir},
                       {"noise", noise_spec_to_string(cfg.eval.noise)},
                       {"passes", cfg.eval.passes},
                       {"seed", cfg.seed}};
    fs::create_directories(cfg.out_dir);
    write_json_file((fs::path(cfg.out_dir) / "report.json").string(),
                    report_to_json(rep));
    write_bins_csv((fs::path(cfg.out_dir) / "bins.csv").string(), rep.bins);
    return rep;
}

OodComparison cmd_ood(const RunConfig& cfg, const std::string& snapshot_path,
                      const std::string& id_dir, const std::string& ood_dir) {
    if (cfg.out_dir.empty()) throw ConfigError("ood: out_dir is required");
    cfg.eval.validate();
    LoadedModel m = load_model(snapshot_path);
    const NoiseSpec clean; // the OOD study never injects synthetic noise
    auto id_preds = evaluate_split(m, id_dir, clean, cfg.eval.passes, cfg.seed);
    auto ood_preds = evaluate_split(m, ood_dir, clean, cfg.eval.passes, cfg.seed);
    MetricsReport id_rep =
        compute_report(id_preds, m.backbone_cfg.n_classes, cfg.eval.ece_bins);
    MetricsReport ood_rep =
        compute_report(ood_preds, m.backbone_cfg.n_classes, cfg.eval.ece_bins);
    OodComparison cmp = compare_ood(id_rep, ood_rep);

    json j = comparison_to_json(cmp);
    j["id"] = report_to_json(id_rep);
    j["ood"] = report_to_json(ood_rep);
    j["config"] = {{"snapshot", snapshot_path}, {"id_data", id_dir},
                   {"ood_data", ood_dir},       {"passes", cfg.eval.passes},
                   {"seed", cfg.seed}};
    fs::create_directories(cfg.out_dir);
    write_json_file((fs::path(cfg.out_dir) / "comparison.json").string(), j);

    std::string csv = "split,id,entropy\n";
    for (const auto& p : id_preds)
        csv += "id," + p.id + "," + fmt17(predictive_entropy(p)) + "\n";
    for (const auto& p : ood_preds)
        csv += "ood," + p.id + "," + fmt17(predictive_entropy(p)) + "\n";
    write_text((fs::path(cfg.out_dir) / "entropy.csv").string(), csv);
    return cmp;
}

void cmd_saliency(const RunConfig& cfg, const std::string& snapshot_path,
                  const std::string& split_dir, int top_n, int site) {
    if (cfg.out_dir.empty()) throw ConfigError("saliency: out_dir is required");
    if (top_n < 1) throw ConfigError("saliency: --top must be >= 1");
    cfg.eval.validate();
    LoadedModel m = load_model(snapshot_path);
    const std::size_t n_sites = m.bb->sites().size();
    const std::size_t s = site < 0 ? n_sites - 1 : (std::size_t)site;
    if (s >= n_sites) throw ConfigError("saliency: site out of range");

    const NoiseSpec clean;
    auto preds = evaluate_split(m, split_dir, clean, cfg.eval.passes, cfg.seed);
    if (preds.empty()) throw ConfigError("saliency: empty dataset");
    std::vector<double> ent(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) ent[i] = predictive_entropy(preds[i]);

    std::vector<std::size_t> by_lo(preds.size()), by_hi(preds.size());
    std::iota(by_lo.begin(), by_lo.end(), (std::size_t)0);
    by_hi = by_lo;
    std::stable_sort(by_lo.begin(), by_lo.end(),
                     [&](std::size_t a, std::size_t b) { return ent[a] < ent[b]; });
    std::stable_sort(by_hi.begin(), by_hi.end(),
                     [&](std::size_t a, std::size_t b) { return ent[a] > ent[b]; });
    const std::size_t N = std::min((std::size_t)top_n, preds.size());

    DatasetReader r(split_dir);
    fs::create_directories(cfg.out_dir);
    json index = json::array();
    auto emit = [&](const char* tag, std::size_t rank, std::size_t i) {
        ImageSample base = center_crop(r.at(i), m.preprocess.crop);
        Tensor x = preprocess(r.at(i), m.preprocess);
        const int cls = (int)argmax_index(preds[i].point_probs);
        Heatmap hm = grad_cam(*m.bb, *m.g, x, cls, s);
        char ebuf[32];
        std::snprintf(ebuf, sizeof ebuf, "%.4f", ent[i]);
        const std::string stem = std::string(tag) + std::to_string(rank) + "_" +
                                 preds[i].id + "_e" + ebuf;
        const std::string heat = (fs::path(cfg.out_dir) / (stem + "_heatmap.pgm")).string();
        const std::string over = (fs::path(cfg.out_dir) / (stem + "_overlay.ppm")).string();
        write_pgm(heat, hm.values);
        write_ppm(over, overlay(hm, base).pixels);
        index.push_back({{"id", preds[i].id},
                         {"entropy", ent[i]},
                         {"class", cls},
                         {"site", hm.source_site},
                         {"heatmap", stem + "_heatmap.pgm"},
                         {"overlay", stem + "_overlay.ppm"}});
    };
    for (std::size_t k = 0; k < N; ++k) emit("min", k, by_lo[k]);
    for (std::size_t k = 0; k < N; ++k) emit("max", k, by_hi[k]);
    write_json_file((fs::path(cfg.out_dir) / "saliency.json").string(), index);
}

} // namespace gfm
