#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "encoder.hpp"
#include "errors.hpp"
#include "fusion.hpp"
#include "heads.hpp"
#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pemm {

// ---------------------------------------------------------------------------
// Whole-model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    EncoderConfig encoder;
    FusionConfig fusion;
    HeadConfig heads;

    void validate() const {
        encoder.validate();
        fusion.validate(encoder.stage_channels.size());
        heads.validate();
    }

    /// Canonical key=value rendering; the checkpoint digest is computed over
    /// this text, so field order here is part of the on-disk format.
    std::string canonical_text() const {
        auto list = [](const std::vector<std::size_t>& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (i) s += ',';
                s += std::to_string(v[i]);
            }
            return s;
        };
        std::string s;
        s += "encoder.in_channels=" + std::to_string(encoder.in_channels) + "\n";
        s += "encoder.stage_channels=" + list(encoder.stage_channels) + "\n";
        s += "encoder.kernel=" + std::to_string(encoder.kernel) + "\n";
        s += std::string("encoder.sharing=") +
             (encoder.sharing == Sharing::kShared ? "shared" : "individual") + "\n";
        s += "encoder.input_size=" + std::to_string(encoder.input_size) + "\n";
        s += std::string("fusion.mode=") +
             (fusion.mode == FusionMode::kConcat ? "concat"
              : fusion.mode == FusionMode::kCa   ? "ca"
                                                 : "sca") + "\n";
        s += "fusion.stages=" + list(fusion.stages) + "\n";
        s += std::string("fusion.scale=") +
             (fusion.scale == AttnScale::kInvSqrtD ? "inv_sqrt_d" : "none") + "\n";
        s += std::string("fusion.self_variant=") +
             (fusion.self_variant ? "1" : "0") + "\n";
        s += "heads.tasks=" + list(heads.tasks) + "\n";
        s += std::string("heads.classifier_sharing=") +
             (heads.classifier_sharing == ClassifierSharing::kSharedCD
                  ? "shared_cd"
                  : "individual") + "\n";
        return s;
    }

    std::uint64_t digest() const { return fnv1a64(canonical_text()); }
};

// ---------------------------------------------------------------------------
// Assembled model
// ---------------------------------------------------------------------------

/// Width of the fusion-branch input: both modalities' pooled refined maps
/// across the declared fusion stages, or both final-stage pooled features in
/// concat mode.
inline std::size_t fused_feature_dim(const ModelConfig& cfg) {
    cfg.fusion.validate(cfg.encoder.stage_channels.size());
    if (cfg.fusion.mode == FusionMode::kConcat)
        return 2 * cfg.encoder.stage_channels.back();
    std::size_t d = 0;
    for (std::size_t s : cfg.fusion.stages)
        d += 2 * cfg.encoder.stage_channels[s];
    return d;
}

/// Weight values by parameter, in named_params order. Used for weight
/// averaging and best-epoch selection.
using WeightSnapshot = std::vector<std::vector<double>>;

inline constexpr char kCheckpointMagic[5] = "PEMW";
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Model {
public:
    static Model build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg_ = cfg;
        m.encoder_ = Encoder::build(cfg.encoder, mix_seed(seed, 101));
        m.fusion_ = FusionModule::build(cfg.fusion, cfg.encoder.stage_channels,
                                        mix_seed(seed, 102));
        m.heads_ = Heads::build(cfg.heads, cfg.encoder.stage_channels.back(),
                                fused_feature_dim(cfg), mix_seed(seed, 103));
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    const Encoder& encoder() const { return encoder_; }
    const FusionModule& fusion() const { return fusion_; }
    const Heads& heads() const { return heads_; }

    /// Everything one sample pair's forward pass produces: the pure
    /// per-modality pathway features, plus the pooled refined maps the
    /// fusion branch reads (one clinical/dermoscopy pair per declared
    /// fusion stage, stage-ascending; the final pooled pair itself in
    /// concat mode).
    struct SampleFeatures {
        Tensor clinical, derm;
        std::vector<Tensor> fusion_parts;
    };

    SampleFeatures sample_features(const Tensor& clinical,
                                   const Tensor& derm) const {
        check_image(clinical, "clinical");
        check_image(derm, "dermoscopy");
        SampleFeatures sf;
        Tensor xc = clinical, xd = derm;
        for (std::size_t s = 0; s < encoder_.stage_count(); ++s) {
            xc = encoder_.forward_stage(s, xc, Modality::kClinical);
            xd = encoder_.forward_stage(s, xd, Modality::kDermoscopy);
            if (fusion_.active_at(s)) {
                auto [rc, rd] = fusion_.refine(s, xc, xd);
                sf.fusion_parts.push_back(global_avg_pool(rc));
                sf.fusion_parts.push_back(global_avg_pool(rd));
            }
        }
        sf.clinical = global_avg_pool(xc);
        sf.derm = global_avg_pool(xd);
        if (cfg_.fusion.mode == FusionMode::kConcat) {
            sf.fusion_parts.push_back(sf.clinical);
            sf.fusion_parts.push_back(sf.derm);
        }
        return sf;
    }

    /// Pooled per-modality features for one pair. Attention refinement only
    /// reads the stage outputs — it never feeds back into the pathways — so
    /// each feature carries its own modality's pathway alone.
    std::pair<Tensor, Tensor> features(const Tensor& clinical,
                                       const Tensor& derm) const {
        SampleFeatures sf = sample_features(clinical, derm);
        return {std::move(sf.clinical), std::move(sf.derm)};
    }

    /// Batched three-branch forward: per-task clinical, dermoscopy, and
    /// fusion logits. The fusion branch reads the column-concatenation of
    /// the stacked refined pooled pairs (fused_feature_dim columns).
    BranchOutputs forward(const std::vector<Tensor>& clinical,
                          const std::vector<Tensor>& derm) const {
        if (clinical.empty() || clinical.size() != derm.size())
            throw ContractError("model: batch must pair every clinical image "
                                "with a dermoscopy image");
        std::vector<Tensor> fc, fd;
        std::vector<std::vector<Tensor>> parts;
        fc.reserve(clinical.size());
        fd.reserve(clinical.size());
        for (std::size_t i = 0; i < clinical.size(); ++i) {
            SampleFeatures sf = sample_features(clinical[i], derm[i]);
            if (parts.empty()) parts.resize(sf.fusion_parts.size());
            for (std::size_t p = 0; p < parts.size(); ++p)
                parts[p].push_back(std::move(sf.fusion_parts[p]));
            fc.push_back(std::move(sf.clinical));
            fd.push_back(std::move(sf.derm));
        }
        Tensor mf = stack_rows(parts[0]);
        for (std::size_t p = 1; p < parts.size(); ++p)
            mf = concat_cols(mf, stack_rows(parts[p]));
        BranchOutputs outs;
        outs.clinical = heads_.classify_clinical(stack_rows(fc));
        outs.derm = heads_.classify_derm(stack_rows(fd));
        outs.fusion = heads_.classify_fusion(mf);
        return outs;
    }

    /// Stable parameter listing: encoder, then fusion, then heads. Tied
    /// tensors appear exactly once.
    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        encoder_.collect_params(out);
        fusion_.collect_params(out);
        heads_.collect_params(out);
        return out;
    }

    struct ParamBreakdown {
        std::size_t encoder = 0, fusion = 0, heads = 0, total = 0;
    };

    ParamBreakdown param_breakdown() const {
        ParamBreakdown b;
        b.encoder = encoder_.param_count();
        b.fusion = fusion_.param_count();
        b.heads = heads_.param_count();
        b.total = b.encoder + b.fusion + b.heads;
        return b;
    }

    WeightSnapshot snapshot() const {
        WeightSnapshot snap;
        for (const auto& [name, t] : named_params()) {
            (void)name;
            snap.push_back(t.values());
        }
        return snap;
    }

    /// Writes values back into the live parameter tensors (handles, and thus
    /// any weight ties, are preserved).
    void restore(const WeightSnapshot& snap) const {
        auto params = named_params();
        if (snap.size() != params.size())
            throw ContractError("model: snapshot holds " +
                                std::to_string(snap.size()) + " tensors, model has " +
                                std::to_string(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& dst = params[i].second.values();
            if (snap[i].size() != dst.size())
                throw ContractError("model: snapshot size mismatch on " +
                                    params[i].first);
            dst = snap[i];
        }
    }

    void save_weights(const std::string& path) const {
        std::ofstream out = open_binary_out(path);
        write_magic(out, kCheckpointMagic);
        write_u32_le(out, kCheckpointVersion);
        write_u64_le(out, cfg_.digest());
        const auto params = named_params();
        write_u32_le(out, static_cast<std::uint32_t>(params.size()));
        for (const auto& [name, t] : params) {
            write_string(out, name);
            write_tensor(out, t);
        }
        if (!out) throw IoError("save_weights: write failed for " + path);
    }

    /// Loads a checkpoint produced by save_weights into this model. The
    /// stored config digest must match this model's configuration.
    void load_weights(const std::string& path) const {
        std::ifstream in = open_binary_in(path);
        expect_magic(in, kCheckpointMagic);
        const std::uint32_t version = read_u32_le(in);
        if (version != kCheckpointVersion)
            throw FormatError("checkpoint version " + std::to_string(version) +
                              " not supported");
        const std::uint64_t digest = read_u64_le(in);
        if (digest != cfg_.digest())
            throw MismatchError("checkpoint config digest " + hex_u64(digest) +
                                " does not match model config " +
                                hex_u64(cfg_.digest()));
        const std::uint32_t n = read_u32_le(in);
        auto params = named_params();
        if (n != params.size())
            throw MismatchError("checkpoint holds " + std::to_string(n) +
                                " tensors, model has " +
                                std::to_string(params.size()));
        for (auto& [name, t] : params) {
            const std::string stored = read_string(in);
            if (stored != name)
                throw MismatchError("checkpoint tensor '" + stored +
                                    "' where model expects '" + name + "'");
            const Tensor loaded = read_tensor(in);
            if (loaded.shape() != t.shape())
                throw MismatchError("checkpoint tensor '" + name + "' has shape " +
                                    shape_str(loaded.shape()) + ", model expects " +
                                    shape_str(t.shape()));
            t.values() = loaded.values();
        }
    }

private:
    void check_image(const Tensor& x, const char* which) const {
        const EncoderConfig& e = cfg_.encoder;
        if (x.rank() != 3 || x.dim(0) != e.in_channels ||
            x.dim(1) != e.input_size || x.dim(2) != e.input_size)
            throw ShapeError(std::string("model: ") + which + " image must be [" +
                             std::to_string(e.in_channels) + " x " +
                             std::to_string(e.input_size) + " x " +
                             std::to_string(e.input_size) + "], got " +
                             shape_str(x.shape()));
    }

    ModelConfig cfg_;
    Encoder encoder_;
    FusionModule fusion_;
    Heads heads_;
};

} // namespace pemm
