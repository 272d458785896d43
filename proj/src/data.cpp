#include "gflowmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gflowmask/errors.hpp"
#include "gflowmask/rng.hpp"

namespace fs = std::filesystem;

namespace gfm {

void PreprocessConfig::validate() const {
    if (crop < 1) throw ConfigError("crop must be >= 1");
    for (double s : std)
        if (!(s > 0.0)) throw ConfigError("preprocess std entries must be > 0");
}

NoiseKind parse_noise_kind(const std::string& s) {
    if (s == "none") return NoiseKind::none;
    if (s == "gaussian") return NoiseKind::gaussian;
    if (s == "salt_pepper") return NoiseKind::salt_pepper;
    if (s == "speckle") return NoiseKind::speckle;
    throw ConfigError("unknown noise kind '" + s +
                      "' (expected none|gaussian|salt_pepper|speckle)");
}

const char* to_string(NoiseKind k) {
    switch (k) {
        case NoiseKind::none: return "none";
        case NoiseKind::gaussian: return "gaussian";
        case NoiseKind::salt_pepper: return "salt_pepper";
        case NoiseKind::speckle: return "speckle";
    }
    return "?";
}

void NoiseSpec::validate() const {
    if (param < 0.0) throw ConfigError("noise parameter must be >= 0");
    if (kind == NoiseKind::salt_pepper && param > 1.0)
        throw ConfigError("salt_pepper density must be in [0, 1]");
}

void SyntheticConfig::validate() const {
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (n_classes > 3)
        throw ConfigError("the synthetic generator defines 3 classes at most");
    if ((int)per_class.size() != n_classes)
        throw ConfigError("per_class must list one count per class");
    for (int c : per_class)
        if (c < 1) throw ConfigError("per-class count must be >= 1");
    if (image_size < 16) throw ConfigError("image_size must be >= 16");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0) ||
        !(ood_fraction >= 0.0 && ood_fraction < 1.0) ||
        test_fraction + ood_fraction >= 1.0)
        throw ConfigError("split fractions must satisfy test + ood < 1");
    if (ood_shift != "brightness_shift" && ood_shift != "texture_swap")
        throw ConfigError("ood_shift must be brightness_shift or texture_swap");
}

// ---------------------------------------------------------------------------
// Synthetic generator. Every sample is rendered from its own RNG substream,
// so the dataset is a pure function of (seed, sample index) regardless of
// generation order. The swap flag must not change the draw sequence: it only
// flips tone at stamping time, which is what keeps an OOD re-render
// geometrically identical to its ID counterpart.

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Stamp {
    // max-combined soft masks, one buffer per feature family
    Tensor vessel, blob, streak;
    explicit Stamp(std::size_t s)
        : vessel({s, s}), blob({s, s}), streak({s, s}) {}
};

void stamp_disc_and_background(Tensor& img, std::size_t S, std::mt19937_64& rng,
                               double& disc_cx, double& disc_cy) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double cx = (double)S / 2.0, cy = (double)S / 2.0;
    const double rmax = std::sqrt(2.0) * (double)S / 2.0;
    // background first: one noise draw per pixel, row-major
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double dx = (double)x - cx, dy = (double)y - cy;
            const double r = std::sqrt(dx * dx + dy * dy) / rmax;
            const double base = 0.58 - 0.16 * r * r + (uni(rng) - 0.5) * 0.04;
            img.at(y, x, (std::size_t)0) = base;
            img.at(y, x, (std::size_t)1) = base * 0.62;
            img.at(y, x, (std::size_t)2) = base * 0.40;
        }
    disc_cx = (0.30 + 0.40 * uni(rng)) * (double)S;
    disc_cy = (0.30 + 0.40 * uni(rng)) * (double)S;
    const double radius = (0.14 + 0.06 * uni(rng)) * (double)S;
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double dx = (double)x - disc_cx, dy = (double)y - disc_cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            const double t = std::clamp((d - (radius - 1.0)) / 2.0, 0.0, 1.0);
            const double factor = 0.45 + 0.55 * t; // dark disc
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) *= factor;
        }
}

void stamp_soft_point(Tensor& mask, double px, double py, double w) {
    const std::size_t S = mask.shape[0];
    const int lo_y = std::max(0, (int)std::floor(py - w));
    const int hi_y = std::min((int)S - 1, (int)std::ceil(py + w));
    const int lo_x = std::max(0, (int)std::floor(px - w));
    const int hi_x = std::min((int)S - 1, (int)std::ceil(px + w));
    for (int y = lo_y; y <= hi_y; ++y)
        for (int x = lo_x; x <= hi_x; ++x) {
            const double dx = (double)x - px, dy = (double)y - py;
            const double v = 1.0 - (dx * dx + dy * dy) / (w * w);
            if (v > 0.0) {
                double& m = mask.at((std::size_t)y, (std::size_t)x);
                m = std::max(m, v);
            }
        }
}

void stamp_vessels(Stamp& st, double cx, double cy, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> n_vessels(2, 4);
    const int nv = n_vessels(rng);
    for (int v = 0; v < nv; ++v) {
        double theta = uni(rng) * 2.0 * kPi;
        const double w = 0.8 + 0.5 * uni(rng);
        std::uniform_int_distribution<int> n_segs(9, 12);
        const int ns = n_segs(rng);
        double px = cx, py = cy;
        for (int s = 0; s < ns; ++s) {
            const double len = 2.2 + 1.2 * uni(rng);
            theta += (uni(rng) - 0.5) * 1.1;
            const double ex = px + len * std::cos(theta);
            const double ey = py + len * std::sin(theta);
            const int steps = std::max(2, (int)std::ceil(len / 0.4));
            for (int i = 0; i <= steps; ++i) {
                const double f = (double)i / (double)steps;
                stamp_soft_point(st.vessel, px + f * (ex - px), py + f * (ey - py), w);
            }
            px = ex, py = ey;
        }
    }
}

void stamp_blobs(Stamp& st, std::size_t S, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> n_blobs(2, 5);
    const int nb = n_blobs(rng);
    for (int b = 0; b < nb; ++b) {
        const double bx = 3.0 + uni(rng) * ((double)S - 6.0);
        const double by = 3.0 + uni(rng) * ((double)S - 6.0);
        const double sig = 1.3 + 0.9 * uni(rng);
        const double amp = 0.65 + 0.25 * uni(rng);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                const double dx = (double)x - bx, dy = (double)y - by;
                const double g = amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sig * sig));
                double& m = st.blob.at(y, x);
                m = std::max(m, g);
            }
    }
}

void stamp_streaks(Stamp& st, std::size_t S, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> n_streaks(2, 4);
    const int ns = n_streaks(rng);
    for (int k = 0; k < ns; ++k) {
        const double mx = 4.0 + uni(rng) * ((double)S - 8.0);
        const double my = 4.0 + uni(rng) * ((double)S - 8.0);
        const double theta = uni(rng) * kPi;
        const double half = 4.0 + 3.0 * uni(rng);
        const double w = 0.9 + 0.6 * uni(rng);
        const double ux = std::cos(theta), uy = std::sin(theta);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                const double rx = (double)x - mx, ry = (double)y - my;
                const double along = std::clamp(rx * ux + ry * uy, -half, half);
                const double dx = rx - along * ux, dy = ry - along * uy;
                const double v = 1.0 - (dx * dx + dy * dy) / (w * w);
                if (v > 0.0) {
                    double& m = st.streak.at(y, x);
                    m = std::max(m, v);
                }
            }
    }
}

Tensor render_sample(const SyntheticConfig& cfg, int label, std::uint64_t index,
                     bool swap) {
    const std::size_t S = (std::size_t)cfg.image_size;
    Tensor img({S, S, 3});
    auto rng = substream(cfg.seed, Stream::datagen, index);
    Stamp st(S);
    double cx = 0.0, cy = 0.0;
    stamp_disc_and_background(img, S, rng, cx, cy);
    // Per-sample lesion salience, bimodal: a strong majority keeps the task
    // separable while a faint tail keeps it from saturating, so calibration
    // and uncertainty comparisons stay meaningful. Both draws always happen
    // (the sequence must not depend on the branch).
    std::uniform_real_distribution<double> pick01(0.0, 1.0);
    std::uniform_real_distribution<double> faint(0.30, 0.50);
    std::uniform_real_distribution<double> strong(0.85, 1.0);
    const bool hard = pick01(rng) < 0.2;
    const double faint_amp = faint(rng), strong_amp = strong(rng);
    const double amp = hard ? faint_amp : strong_amp;
    stamp_vessels(st, cx, cy, rng);
    if (label == 1) stamp_blobs(st, S, rng);
    if (label == 2) stamp_streaks(st, S, rng);
    static constexpr double kVesselTint[3] = {0.26, 0.20, 0.10};
    static constexpr double kBlobTint[3] = {1.0, 0.92, 0.55};
    static constexpr double kStreakTint[3] = {0.30, 0.34, 0.20};
    // Texture swap: the feature families exchange tones (vessels invert,
    // blobs take the streak tone, streaks take the blob tone) and wash
    // toward the background. Class evidence becomes faint and contradicts
    // the ID tone-class pairing — the distribution shift the OOD split
    // exists to provide.
    const double wash = swap ? 0.5 : 1.0;
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double v = st.vessel.at(y, x);
            const double b = st.blob.at(y, x);
            const double s = st.streak.at(y, x);
            for (std::size_t c = 0; c < 3; ++c) {
                double& p = img.at(y, x, c);
                if (swap)
                    p += wash * (-kVesselTint[c] * v +
                                 amp * (-kStreakTint[c] * b + kBlobTint[c] * s));
                else
                    p += kVesselTint[c] * v +
                         amp * (kBlobTint[c] * b - kStreakTint[c] * s);
                p = std::clamp(p, 0.0, 1.0);
            }
        }
    return img;
}

// Largest-remainder apportionment of round(fraction * total) across classes.
std::vector<int> apportion(const std::vector<int>& counts, double fraction) {
    const int total = std::accumulate(counts.begin(), counts.end(), 0);
    const int want = (int)std::lround(fraction * (double)total);
    std::vector<int> base(counts.size());
    std::vector<std::pair<double, std::size_t>> rem;
    int got = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        const double t = fraction * (double)counts[c];
        base[c] = (int)std::floor(t);
        got += base[c];
        rem.push_back({-(t - std::floor(t)), c}); // sort ascending = largest first
    }
    std::stable_sort(rem.begin(), rem.end());
    for (int i = 0; i < want - got && i < (int)rem.size(); ++i)
        base[rem[(std::size_t)i].second] += 1;
    return base;
}

std::string sample_id(std::uint64_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%06llu", (unsigned long long)index);
    return buf;
}

struct SplitOut {
    fs::path dir;
    std::ofstream manifest;
};

void open_split(SplitOut& out, const fs::path& root, const char* name) {
    out.dir = root / name;
    fs::create_directories(out.dir / "images");
    out.manifest.open(out.dir / "manifest.csv", std::ios::binary);
    if (!out.manifest)
        throw IoError("cannot write " + (out.dir / "manifest.csv").string());
    out.manifest << "id,file,label\n";
}

void emit(SplitOut& out, const SyntheticConfig& cfg, int label, std::uint64_t index,
          bool swap, double brighten) {
    Tensor img = render_sample(cfg, label, index, swap);
    if (brighten != 0.0)
        for (double& p : img.data) p = std::clamp(p + brighten, 0.0, 1.0);
    const std::string id = sample_id(index);
    const std::string file = "images/" + id + ".ppm";
    write_ppm((out.dir / file).string(), img);
    out.manifest << id << ',' << file << ',' << label << '\n';
}

} // namespace

void generate_synthetic(const SyntheticConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    const fs::path root(out_dir);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir);

    SplitOut train, test, ood;
    open_split(train, root, "train");
    open_split(test, root, "test");
    open_split(ood, root, "ood");

    const std::vector<int> n_test = apportion(cfg.per_class, cfg.test_fraction);
    const std::vector<int> n_ood = apportion(cfg.per_class, cfg.ood_fraction);

    const bool swap_ood = cfg.ood_shift == "texture_swap";
    const double brighten_ood = swap_ood ? 0.0 : 0.3;

    std::uint64_t next_index = 0;
    for (int c = 0; c < cfg.n_classes; ++c) {
        std::vector<std::uint64_t> indices((std::size_t)cfg.per_class[(std::size_t)c]);
        for (auto& idx : indices) idx = next_index++;
        // seeded stratified assignment: shuffle, then carve test / ood / train
        auto shuffle_rng = substream(cfg.seed, Stream::datagen, 0xF00D + (std::uint64_t)c, 1);
        std::shuffle(indices.begin(), indices.end(), shuffle_rng);

        std::vector<std::uint64_t> test_idx(indices.begin(),
                                            indices.begin() + n_test[(std::size_t)c]);
        std::vector<std::uint64_t> ood_idx(
            indices.begin() + n_test[(std::size_t)c],
            indices.begin() + n_test[(std::size_t)c] + n_ood[(std::size_t)c]);
        std::vector<std::uint64_t> train_idx(
            indices.begin() + n_test[(std::size_t)c] + n_ood[(std::size_t)c],
            indices.end());
        std::sort(test_idx.begin(), test_idx.end());
        std::sort(ood_idx.begin(), ood_idx.end());
        std::sort(train_idx.begin(), train_idx.end());

        for (auto idx : train_idx) emit(train, cfg, c, idx, false, 0.0);
        for (auto idx : test_idx) emit(test, cfg, c, idx, false, 0.0);
        for (auto idx : ood_idx) emit(ood, cfg, c, idx, swap_ood, brighten_ood);
    }
}

// ---------------------------------------------------------------------------

Tensor preprocess(const ImageSample& img, const PreprocessConfig& cfg) {
    cfg.validate();
    if (img.pixels.rank() != 3 || img.pixels.shape[2] != 3)
        throw ShapeError("preprocess expects H x W x 3 pixels, got " +
                         img.pixels.shape_str());
    const std::size_t H = img.pixels.shape[0], W = img.pixels.shape[1];
    if (H < cfg.crop || W < cfg.crop)
        throw ShapeError("image " + std::to_string(W) + "x" + std::to_string(H) +
                         " smaller than crop " + std::to_string(cfg.crop));
    const std::size_t oy = (H - cfg.crop) / 2, ox = (W - cfg.crop) / 2;
    Tensor out({3, cfg.crop, cfg.crop});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < cfg.crop; ++y)
            for (std::size_t x = 0; x < cfg.crop; ++x)
                out.at(c, y, x) =
                    (img.pixels.at(oy + y, ox + x, c) - cfg.mean[c]) / cfg.std[c];
    return out;
}

ImageSample add_gaussian(const ImageSample& img, double sigma, std::mt19937_64& rng) {
    if (sigma < 0.0) throw ConfigError("gaussian sigma must be >= 0");
    ImageSample out = img;
    if (sigma == 0.0) return out;
    std::normal_distribution<double> n(0.0, sigma);
    for (double& p : out.pixels.data) p = std::clamp(p + n(rng), 0.0, 1.0);
    return out;
}

ImageSample add_salt_pepper(const ImageSample& img, double density,
                            std::mt19937_64& rng) {
    if (!(density >= 0.0 && density <= 1.0))
        throw ConfigError("salt_pepper density must be in [0, 1]");
    ImageSample out = img;
    if (density == 0.0) return out;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const std::size_t H = out.pixels.shape[0], W = out.pixels.shape[1];
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double u = uni(rng); // one draw per pixel, all channels move
            if (u < density / 2.0)
                for (std::size_t c = 0; c < 3; ++c) out.pixels.at(y, x, c) = 1.0;
            else if (u < density)
                for (std::size_t c = 0; c < 3; ++c) out.pixels.at(y, x, c) = 0.0;
        }
    return out;
}

ImageSample add_speckle(const ImageSample& img, double sigma, std::mt19937_64& rng) {
    if (sigma < 0.0) throw ConfigError("speckle sigma must be >= 0");
    ImageSample out = img;
    if (sigma == 0.0) return out;
    std::normal_distribution<double> n(0.0, sigma);
    for (double& p : out.pixels.data) p = std::clamp(p * (1.0 + n(rng)), 0.0, 1.0);
    return out;
}

Tensor apply_noise_normalized(const Tensor& x, const NoiseSpec& spec,
                              const PreprocessConfig& pp, std::mt19937_64& rng) {
    spec.validate();
    if (spec.kind == NoiseKind::none || spec.param == 0.0) return x;
    if (x.rank() != 3 || x.shape[0] != 3)
        throw ShapeError("normalized tensor must be 3 x H x W, got " + x.shape_str());
    const std::size_t H = x.shape[1], W = x.shape[2];
    ImageSample px;
    px.pixels = Tensor({H, W, 3});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t w = 0; w < W; ++w)
                px.pixels.at(y, w, c) =
                    std::clamp(x.at(c, y, w) * pp.std[c] + pp.mean[c], 0.0, 1.0);
    ImageSample noisy;
    switch (spec.kind) {
        case NoiseKind::gaussian: noisy = add_gaussian(px, spec.param, rng); break;
        case NoiseKind::salt_pepper: noisy = add_salt_pepper(px, spec.param, rng); break;
        case NoiseKind::speckle: noisy = add_speckle(px, spec.param, rng); break;
        case NoiseKind::none: noisy = px; break;
    }
    Tensor out({3, H, W});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t w = 0; w < W; ++w)
                out.at(c, y, w) = (noisy.pixels.at(y, w, c) - pp.mean[c]) / pp.std[c];
    return out;
}

// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& pixels) {
    if (pixels.rank() != 3 || pixels.shape[2] != 3)
        throw ShapeError("write_ppm expects H x W x 3, got " + pixels.shape_str());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    const std::size_t H = pixels.shape[0], W = pixels.shape[1];
    f << "P6\n" << W << ' ' << H << "\n255\n";
    std::vector<unsigned char> row(W * 3);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                row[x * 3 + c] = (unsigned char)std::lround(
                    std::clamp(pixels.at(y, x, c), 0.0, 1.0) * 255.0);
        f.write((const char*)row.data(), (std::streamsize)row.size());
    }
    if (!f) throw IoError("short write on " + path);
}

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("not a P6 PPM: " + path);
    long w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (!f || w < 1 || h < 1) throw IoError("corrupt PPM header: " + path);
    if (maxval != 255) throw IoError("unsupported PPM maxval in " + path);
    f.get(); // single whitespace before binary data
    std::vector<unsigned char> raw((std::size_t)(w * h * 3));
    f.read((char*)raw.data(), (std::streamsize)raw.size());
    if (f.gcount() != (std::streamsize)raw.size())
        throw IoError("truncated PPM data: " + path);
    Tensor out({(std::size_t)h, (std::size_t)w, 3});
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (double)raw[i] / 255.0;
    return out;
}

DatasetReader::DatasetReader(const std::string& dir) : dir_(dir) {
    const fs::path manifest = fs::path(dir) / "manifest.csv";
    std::ifstream f(manifest);
    if (!f) throw IoError("cannot open " + manifest.string());
    std::string line;
    if (!std::getline(f, line) || line.rfind("id,file,label", 0) != 0)
        throw IoError("bad manifest header in " + manifest.string());
    std::size_t line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        Row r;
        std::string label_s;
        if (!std::getline(ss, r.id, ',') || !std::getline(ss, r.file, ',') ||
            !std::getline(ss, label_s))
            throw IoError("malformed manifest row " + std::to_string(line_no) +
                          " in " + manifest.string());
        try {
            r.label = std::stoi(label_s);
        } catch (const std::exception&) {
            throw IoError("bad label on manifest row " + std::to_string(line_no) +
                          " in " + manifest.string());
        }
        if (r.label < 0)
            throw IoError("negative label on manifest row " + std::to_string(line_no));
        rows_.push_back(std::move(r));
    }
}

ImageSample DatasetReader::at(std::size_t i) const {
    if (i >= rows_.size()) throw ShapeError("dataset index out of range");
    ImageSample s;
    s.id = rows_[i].id;
    s.label = rows_[i].label;
    s.pixels = read_ppm((fs::path(dir_) / rows_[i].file).string());
    return s;
}

} // namespace gfm
