#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gflowmask/tensor.hpp"

namespace gfm {

// Pixels are H x W x 3 doubles in [0, 1]; 8-bit quantization happens only
// on disk (P6 PPM).
struct ImageSample {
    Tensor pixels;
    int label = 0;
    std::string id;
};

struct PreprocessConfig {
    std::size_t crop = 32;
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};

    void validate() const;
};

enum class NoiseKind { none, gaussian, salt_pepper, speckle };

NoiseKind parse_noise_kind(const std::string& s);
const char* to_string(NoiseKind k);

struct NoiseSpec {
    NoiseKind kind = NoiseKind::none;
    double param = 0.0; // sigma (gaussian/speckle) or density (salt_pepper)

    void validate() const;
};

struct SyntheticConfig {
    int n_classes = 3;
    // Generated pool per class; splits are carved out of the pool.
    std::vector<int> per_class = {334, 333, 333};
    int image_size = 40;
    double test_fraction = 0.2;
    double ood_fraction = 0.2;
    std::string ood_shift = "texture_swap"; // or brightness_shift
    std::uint64_t seed = 0;

    void validate() const;
};

// Writes train/, test/ and ood/ dataset directories under out_dir, each
// holding manifest.csv plus images/*.ppm. Byte-deterministic per config.
// The ood split re-renders (or shifts) held-out pool samples.
void generate_synthetic(const SyntheticConfig& cfg, const std::string& out_dir);

// Center crop with floor((H-crop)/2) offsets, then per-channel (x-mean)/std.
// Output is channel-first [3, crop, crop].
Tensor preprocess(const ImageSample& img, const PreprocessConfig& cfg);

// Noise in pixel space, clipped back to [0, 1]. Zero parameter is an exact
// identity (no RNG draws).
ImageSample add_gaussian(const ImageSample& img, double sigma, std::mt19937_64& rng);
ImageSample add_salt_pepper(const ImageSample& img, double density, std::mt19937_64& rng);
ImageSample add_speckle(const ImageSample& img, double sigma, std::mt19937_64& rng);

// Noise applied after preprocessing: the normalized tensor is mapped back
// to pixel space, corrupted, and renormalized, so clipping lands exactly on
// the normalized bounds [(0-mean)/std, (1-mean)/std] per channel. Identity
// (bit-for-bit) for kind none or zero parameter.
Tensor apply_noise_normalized(const Tensor& x, const NoiseSpec& spec,
                              const PreprocessConfig& pp, std::mt19937_64& rng);

// P6 PPM, maxval 255. Values are clipped then rounded on write.
void write_ppm(const std::string& path, const Tensor& pixels);
Tensor read_ppm(const std::string& path);

// One split directory: manifest.csv (id,file,label) + referenced images.
// The manifest is parsed eagerly; pixels load lazily per sample.
class DatasetReader {
public:
    explicit DatasetReader(const std::string& dir);

    std::size_t size() const { return rows_.size(); }
    const std::string& id(std::size_t i) const { return rows_[i].id; }
    int label(std::size_t i) const { return rows_[i].label; }
    ImageSample at(std::size_t i) const;

private:
    struct Row {
        std::string id, file;
        int label;
    };
    std::string dir_;
    std::vector<Row> rows_;
};

} // namespace gfm
