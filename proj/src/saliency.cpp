#include "gflowmask/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "gflowmask/errors.hpp"

namespace gfm {

namespace {

// Min-max normalization. A constant map cannot satisfy "min 0, max 1", so
// it collapses to all zeros (no signal) or all ones (uniform signal).
void normalize_map(Tensor& m) {
    double lo = m[0], hi = m[0];
    for (double v : m.data) lo = std::min(lo, v), hi = std::max(hi, v);
    if (hi - lo < 1e-300) {
        m.fill(hi > 0.0 ? 1.0 : 0.0);
        return;
    }
    for (double& v : m.data) v = (v - lo) / (hi - lo);
}

} // namespace

Heatmap grad_cam(const Backbone& bb, const GFlowOut& g, const Tensor& x,
                 int class_index, std::size_t site) {
    if (site >= bb.sites().size())
        throw ShapeError("grad_cam: no site " + std::to_string(site));
    if (class_index < 0 || class_index >= bb.config().n_classes)
        throw ConfigError("grad_cam: class index out of range");

    Tape t;
    ExpectedHook hook(g);
    ForwardResult fr = bb.forward(t, x, &hook);
    t.backward(t.pick(fr.logits, (std::size_t)class_index));
    const Tensor& act = t.value(fr.site_act[site]);
    const Tensor& grad = t.grad(fr.site_act[site]);
    // the saliency backward must not leak into a later optimizer step
    for (auto* p : bb.params.pointers()) p->zero_grad();
    for (auto* p : g.params.pointers()) p->zero_grad();

    const std::size_t grid = bb.site_grid(site);
    Tensor raw({grid, grid});
    if (act.rank() == 3) { // [C, h, w] feature maps
        const std::size_t C = act.shape[0], h = act.shape[1], w = act.shape[2];
        for (std::size_t k = 0; k < C; ++k) {
            double alpha = 0.0;
            for (std::size_t yy = 0; yy < h; ++yy)
                for (std::size_t xx = 0; xx < w; ++xx) alpha += grad.at(k, yy, xx);
            alpha /= (double)(h * w);
            for (std::size_t yy = 0; yy < h; ++yy)
                for (std::size_t xx = 0; xx < w; ++xx)
                    raw.at(yy, xx) += alpha * act.at(k, yy, xx);
        }
    } else { // [N, D] tokens on a grid x grid patch layout
        const std::size_t N = act.shape[0], D = act.shape[1];
        if (N != grid * grid)
            throw ShapeError("grad_cam: token count does not form a square grid");
        for (std::size_t k = 0; k < D; ++k) {
            double alpha = 0.0;
            for (std::size_t n = 0; n < N; ++n) alpha += grad.at(n, k);
            alpha /= (double)N;
            for (std::size_t n = 0; n < N; ++n)
                raw.at(n / grid, n % grid) += alpha * act.at(n, k);
        }
    }
    for (double& v : raw.data) v = std::max(v, 0.0);
    normalize_map(raw);

    Heatmap hm;
    hm.source_site = bb.sites()[site].name;
    hm.class_index = class_index;
    hm.values = upsample_bilinear(raw, x.shape[1], x.shape[2]);
    return hm;
}

Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 2) throw ShapeError("upsample expects a 2-d map");
    const std::size_t h = map.shape[0], w = map.shape[1];
    Tensor out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            const double sy = std::clamp(
                ((double)y + 0.5) * (double)h / (double)out_h - 0.5, 0.0,
                (double)h - 1.0);
            const double sx = std::clamp(
                ((double)x + 0.5) * (double)w / (double)out_w - 0.5, 0.0,
                (double)w - 1.0);
            const std::size_t y0 = (std::size_t)sy, x0 = (std::size_t)sx;
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double fy = sy - (double)y0, fx = sx - (double)x0;
            out.at(y, x) = (1.0 - fy) * ((1.0 - fx) * map.at(y0, x0) +
                                         fx * map.at(y0, x1)) +
                           fy * ((1.0 - fx) * map.at(y1, x0) + fx * map.at(y1, x1));
        }
    return out;
}

ImageSample overlay(const Heatmap& hm, const ImageSample& img) {
    const Tensor& px = img.pixels;
    if (px.rank() != 3 || px.shape[2] != 3 || hm.values.rank() != 2 ||
        hm.values.shape[0] != px.shape[0] || hm.values.shape[1] != px.shape[1])
        throw ShapeError("overlay: heatmap " + hm.values.shape_str() +
                         " does not match image " + px.shape_str());
    ImageSample out = img;
    for (std::size_t y = 0; y < px.shape[0]; ++y)
        for (std::size_t x = 0; x < px.shape[1]; ++x) {
            const double v = hm.values.at(y, x);
            const double cmap[3] = {v, 0.0, 1.0 - v};
            for (std::size_t c = 0; c < 3; ++c)
                out.pixels.at(y, x, c) = std::clamp(
                    0.5 * px.at(y, x, c) + 0.5 * cmap[c], 0.0, 1.0);
        }
    return out;
}

void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) throw ShapeError("write_pgm expects a 2-d map");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    const std::size_t H = gray.shape[0], W = gray.shape[1];
    f << "P5\n" << W << ' ' << H << "\n255\n";
    std::vector<unsigned char> row(W);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x)
            row[x] = (unsigned char)std::lround(
                std::clamp(gray.at(y, x), 0.0, 1.0) * 255.0);
        f.write((const char*)row.data(), (std::streamsize)row.size());
    }
    if (!f) throw IoError("short write on " + path);
}

} // namespace gfm
