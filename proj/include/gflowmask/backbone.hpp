#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gflowmask/nn.hpp"

namespace gfm {

struct BackboneConfig {
    std::string kind = "minires"; // minires | minivit
    int input_size = 32;
    int n_classes = 3;
    // minires: one residual block per entry; stride 1 for the first block,
    // 2 for the rest.
    std::vector<int> channels = {8, 16, 32};
    // minivit
    int patch_size = 8;
    int embed_dim = 32;
    int n_layers = 2;
    int n_heads = 2;
    int mlp_dim = 64;

    void validate() const;
};

struct DropoutSiteInfo {
    std::string name;
    std::size_t units; // channels (minires) or embedding dims (minivit)
};

// Supplies one keep-mask per dropout site during a forward pass. The
// returned node is broadcast-multiplied over the site's activation;
// kNoMask means identity (no multiply recorded at all).
class MaskHook {
public:
    static constexpr NodeId kNoMask = -1;
    virtual ~MaskHook() = default;
    // Called once per forward before any site; x_embed is the pooled input
    // embedding node (not detached — implementations detach as needed).
    virtual void begin(Tape& t, NodeId x_embed) { (void)t, (void)x_embed; }
    // h_pooled is the pooled activation entering site `site`.
    virtual NodeId site_mask(Tape& t, std::size_t site, NodeId h_pooled) = 0;
};

struct ForwardResult {
    NodeId logits = -1;
    NodeId x_embed = -1;              // pooled stem/patch embedding
    std::vector<NodeId> site_h;       // pooled pre-mask context per site
    std::vector<NodeId> site_act;     // post-mask activation per site (Grad-CAM target)
};

class Backbone {
public:
    explicit Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {}
    virtual ~Backbone() = default;

    // hook may be null: no mask multiplies are recorded (plain classifier).
    virtual ForwardResult forward(Tape& t, const Tensor& img, MaskHook* hook) const = 0;
    virtual std::size_t x_embed_dim() const = 0;
    // Side length of the site's spatial grid (feature map or patch grid).
    virtual std::size_t site_grid(std::size_t site) const = 0;

    const std::vector<DropoutSiteInfo>& sites() const { return sites_; }
    const BackboneConfig& config() const { return cfg_; }

    ParamRegistry params;

protected:
    BackboneConfig cfg_;
    std::vector<DropoutSiteInfo> sites_;
};

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& cfg, std::uint64_t seed);

} // namespace gfm
