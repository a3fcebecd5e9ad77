#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pemm {

enum class FusionMode { kConcat, kCa, kSca };
enum class AttnScale { kNone, kInvSqrtD };

struct FusionConfig {
    FusionMode mode = FusionMode::kSca;
    std::vector<std::size_t> stages{2, 3}; // ascending, unique
    AttnScale scale = AttnScale::kInvSqrtD;
    // Attend within the query modality instead of across modalities
    // (the degenerate reading of the dataflow; off by default).
    bool self_variant = false;

    void validate(std::size_t encoder_stages) const {
        if (mode != FusionMode::kConcat && stages.empty())
            throw ConfigError("fusion: attention fusion needs at least one stage");
        std::size_t prev = 0;
        bool first = true;
        for (std::size_t s : stages) {
            if (s >= encoder_stages)
                throw ConfigError("fusion: stage " + std::to_string(s) +
                                  " outside encoder's " +
                                  std::to_string(encoder_stages) + " stages");
            if (!first && s <= prev)
                throw ConfigError("fusion: stages must be ascending and unique");
            prev = s;
            first = false;
        }
    }
};

/// Query/key/value projection weights for one stage: three bias-free 1x1
/// convolutions, stored as [d x d] matrices applied to token rows.
struct AttentionProjections {
    Tensor w_q, w_k, w_v;

    static AttentionProjections init(std::size_t d, std::uint64_t seed) {
        Rng rng(seed);
        const double std_dev = std::sqrt(1.0 / static_cast<double>(d));
        auto draw = [&] {
            Tensor t = Tensor::zeros({d, d}, true);
            for (double& v : t.values()) v = std_dev * rng.normal();
            return t;
        };
        AttentionProjections p;
        p.w_q = draw();
        p.w_k = draw();
        p.w_v = draw();
        return p;
    }

    std::size_t dim() const { return w_q.dim(0); }
};

/// Residual cross-attention on token matrices: Q from xq, K/V from xkv
/// (or from xq itself in the self variant), attention map row-softmaxed,
/// optionally 1/sqrt(d)-scaled, and M·V added back onto xq.
inline Tensor cross_attend(const Tensor& xq, const Tensor& xkv,
                           const AttentionProjections& proj, AttnScale scale_mode,
                           bool self_variant = false) {
    if (xq.rank() != 2 || xkv.rank() != 2)
        throw ShapeError("cross_attend: token inputs must be rank-2, got " +
                         shape_str(xq.shape()) + " and " + shape_str(xkv.shape()));
    const std::size_t d = proj.dim();
    if (xq.dim(1) != d || xkv.dim(1) != d)
        throw ShapeError("cross_attend: token dim " + std::to_string(xq.dim(1)) +
                         "/" + std::to_string(xkv.dim(1)) +
                         " does not match projection dim " + std::to_string(d));
    const Tensor& src = self_variant ? xq : xkv;
    Tensor q = matmul(xq, proj.w_q);
    Tensor k = matmul(src, proj.w_k);
    Tensor v = matmul(src, proj.w_v);
    Tensor scores = matmul(q, transpose(k));
    if (scale_mode == AttnScale::kInvSqrtD)
        scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor m = softmax_rows(scores);
    return add(xq, matmul(m, v));
}

/// Projection sets for one fused stage. CA carries two independent sets
/// (primary refines the clinical-query direction, secondary the dermoscopy
/// one); SCA carries only primary, used for both directions.
struct RefineWeights {
    std::optional<AttentionProjections> primary;
    std::optional<AttentionProjections> secondary;
};

/// Refines a same-shape (C, D) stage pair per the configured mode, on
/// [C x H x W] features. Concat mode is the identity here — concatenation
/// happens at the fusion head.
inline std::pair<Tensor, Tensor> refine_pair(const Tensor& c, const Tensor& d,
                                             const FusionConfig& cfg,
                                             const RefineWeights& w) {
    if (c.shape() != d.shape())
        throw ShapeError("refine_pair: modality shapes differ: " +
                         shape_str(c.shape()) + " vs " + shape_str(d.shape()));
    switch (cfg.mode) {
    case FusionMode::kConcat:
        if (w.primary || w.secondary)
            throw ConfigError("refine_pair: concat mode takes no projections");
        return {c, d};
    case FusionMode::kSca:
        if (!w.primary || w.secondary)
            throw ConfigError("refine_pair: SCA takes exactly one projection set");
        break;
    case FusionMode::kCa:
        if (!w.primary || !w.secondary)
            throw ConfigError("refine_pair: CA takes two projection sets");
        break;
    }
    if (c.rank() != 3)
        throw ShapeError("refine_pair: expected [C x H x W] features, got " +
                         shape_str(c.shape()));
    const std::size_t h = c.dim(1), wd = c.dim(2);
    Tensor tc = tokens_from_chw(c);
    Tensor td = tokens_from_chw(d);
    const AttentionProjections& for_c = *w.primary;
    const AttentionProjections& for_d =
        cfg.mode == FusionMode::kCa ? *w.secondary : *w.primary;
    Tensor rc = cross_attend(tc, td, for_c, cfg.scale, cfg.self_variant);
    Tensor rd = cross_attend(td, tc, for_d, cfg.scale, cfg.self_variant);
    return {chw_from_tokens(rc, h, wd), chw_from_tokens(rd, h, wd)};
}

/// Exact projection-parameter count for a fusion configuration.
inline std::size_t count_fusion_params(const FusionConfig& cfg,
                                       const std::vector<std::size_t>& stage_channels) {
    cfg.validate(stage_channels.size());
    if (cfg.mode == FusionMode::kConcat) return 0;
    std::size_t per_set = 0;
    for (std::size_t s : cfg.stages)
        per_set += 3 * stage_channels[s] * stage_channels[s];
    return cfg.mode == FusionMode::kSca ? per_set : 2 * per_set;
}

/// All fusion weights of a model: one RefineWeights per fused stage.
class FusionModule {
public:
    static FusionModule build(const FusionConfig& cfg,
                              const std::vector<std::size_t>& stage_channels,
                              std::uint64_t seed) {
        cfg.validate(stage_channels.size());
        FusionModule fm;
        fm.cfg_ = cfg;
        if (cfg.mode == FusionMode::kConcat) return fm;
        for (std::size_t s : cfg.stages) {
            RefineWeights rw;
            rw.primary =
                AttentionProjections::init(stage_channels[s], mix_seed(seed, 2 * s));
            if (cfg.mode == FusionMode::kCa)
                rw.secondary = AttentionProjections::init(stage_channels[s],
                                                          mix_seed(seed, 2 * s + 1));
            fm.weights_.emplace(s, std::move(rw));
        }
        return fm;
    }

    const FusionConfig& config() const { return cfg_; }

    bool active_at(std::size_t stage) const {
        if (cfg_.mode == FusionMode::kConcat) return false;
        return weights_.count(stage) != 0;
    }

    std::pair<Tensor, Tensor> refine(std::size_t stage, const Tensor& c,
                                     const Tensor& d) const {
        auto it = weights_.find(stage);
        if (it == weights_.end())
            throw ContractError("fusion: no weights at stage " +
                                std::to_string(stage));
        return refine_pair(c, d, cfg_, it->second);
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [s, rw] : weights_) {
            (void)s;
            if (rw.primary) n += 3 * rw.primary->dim() * rw.primary->dim();
            if (rw.secondary) n += 3 * rw.secondary->dim() * rw.secondary->dim();
        }
        return n;
    }

    void collect_params(std::vector<std::pair<std::string, Tensor>>& out) const {
        for (const auto& [s, rw] : weights_) {
            const std::string base = "fusion.stage" + std::to_string(s) + ".";
            const bool shared = cfg_.mode == FusionMode::kSca;
            if (rw.primary) {
                const std::string p = base + (shared ? "shared." : "clinical.");
                out.emplace_back(p + "wq", rw.primary->w_q);
                out.emplace_back(p + "wk", rw.primary->w_k);
                out.emplace_back(p + "wv", rw.primary->w_v);
            }
            if (rw.secondary) {
                out.emplace_back(base + "derm.wq", rw.secondary->w_q);
                out.emplace_back(base + "derm.wk", rw.secondary->w_k);
                out.emplace_back(base + "derm.wv", rw.secondary->w_v);
            }
        }
    }

private:
    FusionConfig cfg_;
    std::map<std::size_t, RefineWeights> weights_;
};

} // namespace pemm
