#include "gflowmask/backbone.hpp"

#include "gflowmask/rng.hpp"

namespace gfm {

void BackboneConfig::validate() const {
    if (kind != "minires" && kind != "minivit")
        throw ConfigError("backbone.kind must be minires or minivit, got '" + kind + "'");
    if (input_size <= 0) throw ConfigError("backbone.input_size must be positive");
    if (n_classes < 2) throw ConfigError("backbone.n_classes must be >= 2");
    if (kind == "minires") {
        if (channels.empty()) throw ConfigError("backbone.channels must be non-empty");
        for (int c : channels)
            if (c <= 0) throw ConfigError("backbone.channels entries must be positive");
        int min_size = 1 << (static_cast<int>(channels.size()) - 1);
        if (input_size < min_size)
            throw ConfigError("backbone.input_size too small for the strided blocks");
    } else {
        if (patch_size <= 0 || input_size % patch_size != 0)
            throw ConfigError("backbone.input_size must be divisible by patch_size");
        if (embed_dim <= 0 || n_heads <= 0 || embed_dim % n_heads != 0)
            throw ConfigError("backbone.embed_dim must be divisible by n_heads");
        if (n_layers < 1) throw ConfigError("backbone.n_layers must be >= 1");
        if (mlp_dim < 1) throw ConfigError("backbone.mlp_dim must be >= 1");
    }
}

namespace {

class MiniRes final : public Backbone {
public:
    MiniRes(BackboneConfig cfg, std::uint64_t seed) : Backbone(std::move(cfg)) {
        auto rng = substream(seed, Stream::init);
        std::size_t c0 = (std::size_t)cfg_.channels[0];
        stem_ = ConvLayer(params, "stem", c0, 3, 3, 1, 1, rng);
        std::size_t in_ch = c0;
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            std::size_t out_ch = (std::size_t)cfg_.channels[i];
            int stride = i == 0 ? 1 : 2;
            blocks_.emplace_back(params, "block" + std::to_string(i), in_ch, out_ch,
                                 stride, rng);
            sites_.push_back({"block" + std::to_string(i), out_ch});
            in_ch = out_ch;
        }
        head_ = DenseLayer(params, "head", (std::size_t)cfg_.n_classes, in_ch, rng);
    }

    ForwardResult forward(Tape& t, const Tensor& img, MaskHook* hook) const override {
        if (img.shape != std::vector<std::size_t>{3, (std::size_t)cfg_.input_size,
                                                  (std::size_t)cfg_.input_size})
            throw ShapeError("minires: input must be [3," +
                             std::to_string(cfg_.input_size) + "," +
                             std::to_string(cfg_.input_size) + "], got " + img.shape_str());
        ForwardResult r;
        NodeId x = t.relu(stem_.apply(t, t.constant(img)));
        r.x_embed = t.channel_mean(x);
        if (hook) hook->begin(t, r.x_embed);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            x = blocks_[i].apply(t, x);
            NodeId h = t.channel_mean(x);
            r.site_h.push_back(h);
            if (hook) {
                NodeId m = hook->site_mask(t, i, h);
                if (m != MaskHook::kNoMask) x = t.mul_channels(x, m);
            }
            r.site_act.push_back(x);
        }
        r.logits = head_.apply(t, t.channel_mean(x));
        return r;
    }

    std::size_t x_embed_dim() const override { return (std::size_t)cfg_.channels[0]; }

    std::size_t site_grid(std::size_t site) const override {
        std::size_t g = (std::size_t)cfg_.input_size;
        for (std::size_t i = 1; i <= site; ++i) g = (g - 1) / 2 + 1;
        return g;
    }

private:
    ConvLayer stem_;
    std::vector<ResidualBlock> blocks_;
    DenseLayer head_;
};

class MiniViT final : public Backbone {
public:
    MiniViT(BackboneConfig cfg, std::uint64_t seed) : Backbone(std::move(cfg)) {
        auto rng = substream(seed, Stream::init);
        std::size_t dim = (std::size_t)cfg_.embed_dim;
        std::size_t pdim = 3u * (std::size_t)cfg_.patch_size * (std::size_t)cfg_.patch_size;
        std::size_t grid = (std::size_t)(cfg_.input_size / cfg_.patch_size);
        n_tokens_ = grid * grid;
        embed_ = DenseLayer(params, "embed", dim, pdim, rng);
        pos_ = &params.add("pos", normal_init({n_tokens_, dim}, 0.02, rng));
        for (int i = 0; i < cfg_.n_layers; ++i) {
            blocks_.emplace_back(params, "block" + std::to_string(i), dim,
                                 (std::size_t)cfg_.n_heads, (std::size_t)cfg_.mlp_dim, rng);
            sites_.push_back({"block" + std::to_string(i), dim});
        }
        head_ = DenseLayer(params, "head", (std::size_t)cfg_.n_classes, dim, rng);
    }

    ForwardResult forward(Tape& t, const Tensor& img, MaskHook* hook) const override {
        if (img.shape != std::vector<std::size_t>{3, (std::size_t)cfg_.input_size,
                                                  (std::size_t)cfg_.input_size})
            throw ShapeError("minivit: input must be [3," +
                             std::to_string(cfg_.input_size) + "," +
                             std::to_string(cfg_.input_size) + "], got " + img.shape_str());
        ForwardResult r;
        NodeId tokens = t.patchify(t.constant(img), cfg_.patch_size);
        NodeId x = t.add(embed_.apply_rows(t, tokens), t.param(*pos_));
        r.x_embed = t.row_mean(x);
        if (hook) hook->begin(t, r.x_embed);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            x = blocks_[i].apply(t, x);
            NodeId h = t.row_mean(x);
            r.site_h.push_back(h);
            if (hook) {
                NodeId m = hook->site_mask(t, i, h);
                if (m != MaskHook::kNoMask) x = t.mul_cols(x, m);
            }
            r.site_act.push_back(x);
        }
        r.logits = head_.apply(t, t.row_mean(x));
        return r;
    }

    std::size_t x_embed_dim() const override { return (std::size_t)cfg_.embed_dim; }

    std::size_t site_grid(std::size_t) const override {
        return (std::size_t)(cfg_.input_size / cfg_.patch_size);
    }

private:
    std::size_t n_tokens_ = 0;
    DenseLayer embed_;
    Parameter* pos_ = nullptr;
    std::vector<AttentionBlock> blocks_;
    DenseLayer head_;
};

} // namespace

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.kind == "minires") return std::make_unique<MiniRes>(cfg, seed);
    return std::make_unique<MiniViT>(cfg, seed);
}

} // namespace gfm
