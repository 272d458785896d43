#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "gflowmask/errors.hpp"
#include "gflowmask/run.hpp"

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const gfm::ConfigError*>(&e)) return gfm::kExitBadConfig;
    if (dynamic_cast<const gfm::NumericError*>(&e)) return gfm::kExitNumeric;
    if (dynamic_cast<const gfm::SnapshotError*>(&e)) return gfm::kExitSnapshotMismatch;
    return gfm::kExitFailure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GFlowNet-trained dropout masks in miniature image classifiers"};
    app.require_subcommand(1);

    std::string config_path, snapshot, data_dir, id_dir, ood_dir, out_dir, noise;
    int passes = -1, top_n = 1, site = -1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config")->required();
        sub->add_option("--out", out_dir, "override config out_dir");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    add_common(gen);

    CLI::App* train = app.add_subcommand("train", "train a model");
    add_common(train);
    train->add_option("--data", data_dir, "override config data_dir");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a snapshot on one split");
    add_common(eval);
    eval->add_option("--snapshot", snapshot, "model snapshot")->required();
    eval->add_option("--data", data_dir, "dataset split directory")->required();
    eval->add_option("--noise", noise, "noise spec, e.g. gaussian:0.1");
    eval->add_option("--passes", passes, "stochastic forward passes");

    CLI::App* ood = app.add_subcommand("ood", "compare ID vs OOD uncertainty");
    add_common(ood);
    ood->add_option("--snapshot", snapshot, "model snapshot")->required();
    ood->add_option("--id", id_dir, "in-distribution split")->required();
    ood->add_option("--ood", ood_dir, "out-of-distribution split")->required();
    ood->add_option("--passes", passes, "stochastic forward passes");

    CLI::App* sal = app.add_subcommand("saliency", "export Grad-CAM maps");
    add_common(sal);
    sal->add_option("--snapshot", snapshot, "model snapshot")->required();
    sal->add_option("--data", data_dir, "dataset split directory")->required();
    sal->add_option("--top", top_n, "lowest/highest-entropy samples per side");
    sal->add_option("--site", site, "dropout site index (-1 = last)");

    CLI11_PARSE(app, argc, argv);

    try {
        gfm::RunConfig cfg = gfm::load_run_config(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!data_dir.empty() && train->parsed()) cfg.data_dir = data_dir;
        if (passes > 0) cfg.eval.passes = passes;
        if (!noise.empty()) cfg.eval.noise = gfm::parse_noise_spec(noise);

        if (gen->parsed()) {
            gfm::cmd_gen_data(cfg);
        } else if (train->parsed()) {
            gfm::cmd_train(cfg);
        } else if (eval->parsed()) {
            gfm::cmd_eval(cfg, snapshot, data_dir);
        } else if (ood->parsed()) {
            gfm::cmd_ood(cfg, snapshot, id_dir, ood_dir);
        } else if (sal->parsed()) {
            gfm::cmd_saliency(cfg, snapshot, data_dir, top_n, site);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "gflowmask: %s\n", e.what());
        return exit_code_for(e);
    }
    return gfm::kExitOk;
}
