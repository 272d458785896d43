// Python bindings: the pipeline entry points on config JSON plus the metric
// and data math on numpy arrays. Heavy state (models, tapes) stays native;
// everything crossing the boundary is a value copy.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>

#include "gflowmask/data.hpp"
#include "gflowmask/metrics.hpp"
#include "gflowmask/rng.hpp"
#include "gflowmask/run.hpp"

namespace py = pybind11;
using namespace gfm;
using nlohmann::json;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<std::size_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[(std::size_t)i] = (std::size_t)a.shape(i);
    Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> a(shape);
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

RunConfig config_from_str(const std::string& s) { return parse_run_config(json::parse(s)); }

// numpy rows -> PredictiveDistribution list with K=1 (point == single pass)
std::vector<PredictiveDistribution> preds_from_rows(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
    const std::vector<int>& labels) {
    if (probs.ndim() != 2 || (std::size_t)probs.shape(0) != labels.size())
        throw ConfigError("probs must be [n, C] with one label per row");
    const std::size_t n = (std::size_t)probs.shape(0), C = (std::size_t)probs.shape(1);
    std::vector<PredictiveDistribution> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].probs = Tensor({1, C});
        out[i].point_probs.resize(C);
        for (std::size_t c = 0; c < C; ++c) {
            const double v = probs.at((py::ssize_t)i, (py::ssize_t)c);
            out[i].probs.at((std::size_t)0, c) = v;
            out[i].point_probs[c] = v;
        }
        out[i].label = labels[i];
        out[i].id = "r" + std::to_string(i);
    }
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "learnable dropout masks with a GFlowNet sampler: core pipeline";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<SnapshotError>(m, "SnapshotError", PyExc_RuntimeError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    // ---- pipeline ----------------------------------------------------------
    m.def("gen_data", [](const std::string& cfg) { cmd_gen_data(config_from_str(cfg)); },
          py::arg("config_json"),
          "Generate the synthetic dataset described by a run-config JSON string.");
    m.def("train", [](const std::string& cfg) { cmd_train(config_from_str(cfg)); },
          py::arg("config_json"),
          "Train a model; writes snapshot + train_log.csv under out_dir.");
    m.def(
        "evaluate",
        [](const std::string& cfg, const std::string& snapshot, const std::string& data) {
            return report_to_json(cmd_eval(config_from_str(cfg), snapshot, data)).dump(2);
        },
        py::arg("config_json"), py::arg("snapshot"), py::arg("data"),
        "Evaluate a snapshot on a dataset split; returns the report as a JSON string.");
    m.def(
        "ood_compare",
        [](const std::string& cfg, const std::string& snapshot, const std::string& id_dir,
           const std::string& ood_dir) {
            const RunConfig rc = config_from_str(cfg);
            cmd_ood(rc, snapshot, id_dir, ood_dir);
            // return the written artifact verbatim: deltas plus both reports
            std::ifstream f(rc.out_dir + "/comparison.json", std::ios::binary);
            return std::string((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
        },
        py::arg("config_json"), py::arg("snapshot"), py::arg("id_data"), py::arg("ood_data"),
        "Compare ID vs OOD uncertainty; returns comparison.json's contents.");
    m.def(
        "saliency",
        [](const std::string& cfg, const std::string& snapshot, const std::string& data,
           int top_n, int site) {
            cmd_saliency(config_from_str(cfg), snapshot, data, top_n, site);
        },
        py::arg("config_json"), py::arg("snapshot"), py::arg("data"), py::arg("top_n") = 1,
        py::arg("site") = -1,
        "Export Grad-CAM heatmaps/overlays for extreme-entropy samples.");

    // ---- metrics -----------------------------------------------------------
    m.def("entropy", [](const std::vector<double>& p) { return entropy(p); }, py::arg("probs"),
          "Shannon entropy (nats) of one probability vector.");
    m.def(
        "ece",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
           const std::vector<int>& labels, int bins) {
            return ece(preds_from_rows(probs, labels), bins).first;
        },
        py::arg("probs"), py::arg("labels"), py::arg("bins") = 10,
        "Expected calibration error of [n, C] probability rows.");
    m.def(
        "weighted_prf",
        [](const std::vector<int>& y_true, const std::vector<int>& y_pred, int n_classes) {
            const Prf r = weighted_prf(y_true, y_pred, n_classes);
            py::dict d;
            d["precision"] = r.precision;
            d["recall"] = r.recall;
            d["f1"] = r.f1;
            d["accuracy"] = r.accuracy;
            return d;
        },
        py::arg("y_true"), py::arg("y_pred"), py::arg("n_classes"),
        "Support-weighted precision/recall/F1 plus plain accuracy.");
    m.def(
        "auroc",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& scores,
           const std::vector<int>& labels, int n_classes) {
            if (scores.ndim() != 2 || (std::size_t)scores.shape(0) != labels.size())
                throw ConfigError("scores must be [n, C] with one label per row");
            std::vector<std::vector<double>> rows((std::size_t)scores.shape(0));
            for (std::size_t i = 0; i < rows.size(); ++i) {
                rows[i].resize((std::size_t)scores.shape(1));
                for (std::size_t c = 0; c < rows[i].size(); ++c)
                    rows[i][c] = scores.at((py::ssize_t)i, (py::ssize_t)c);
            }
            return auroc_weighted_ovr(rows, labels, n_classes);
        },
        py::arg("scores"), py::arg("labels"), py::arg("n_classes"),
        "Support-weighted one-vs-rest AUROC (rank statistic, ties count half).");

    // ---- data --------------------------------------------------------------
    m.def(
        "preprocess",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& img,
           std::size_t crop) {
            ImageSample s;
            s.pixels = tensor_from_array(img);
            PreprocessConfig pp;
            pp.crop = crop;
            return array_from_tensor(preprocess(s, pp));
        },
        py::arg("image"), py::arg("crop") = 32,
        "Center crop [H, W, 3] pixels then normalize; returns [3, crop, crop].");
    m.def(
        "add_noise",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& img,
           const std::string& spec, std::uint64_t seed) {
            ImageSample s;
            s.pixels = tensor_from_array(img);
            const NoiseSpec ns = parse_noise_spec(spec);
            auto rng = substream(seed, Stream::noise);
            ImageSample out;
            switch (ns.kind) {
                case NoiseKind::none: out = s; break;
                case NoiseKind::gaussian: out = add_gaussian(s, ns.param, rng); break;
                case NoiseKind::salt_pepper: out = add_salt_pepper(s, ns.param, rng); break;
                case NoiseKind::speckle: out = add_speckle(s, ns.param, rng); break;
            }
            return array_from_tensor(out.pixels);
        },
        py::arg("image"), py::arg("spec"), py::arg("seed"),
        "Apply a noise spec like 'gaussian:0.1' to [H, W, 3] pixels in [0, 1].");
}
