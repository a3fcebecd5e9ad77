#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pemm {

enum class Sharing { kIndividual, kShared };
enum class Modality { kClinical, kDermoscopy };

struct EncoderConfig {
    std::size_t in_channels = 3;
    std::vector<std::size_t> stage_channels{8, 16, 32, 64};
    std::size_t kernel = 3;
    Sharing sharing = Sharing::kShared;
    std::size_t input_size = 32;

    void validate() const {
        if (in_channels == 0)
            throw ConfigError("encoder: in_channels must be positive");
        if (stage_channels.empty())
            throw ConfigError("encoder: stage_channels must be non-empty");
        for (std::size_t c : stage_channels)
            if (c == 0) throw ConfigError("encoder: stage channel counts must be positive");
        if (kernel == 0 || kernel % 2 == 0)
            throw ConfigError("encoder: kernel must be odd, got " +
                              std::to_string(kernel));
        const std::size_t halvings = stage_channels.size();
        if (halvings >= 32 || input_size == 0 ||
            input_size % (std::size_t{1} << halvings) != 0)
            throw ConfigError("encoder: input_size " + std::to_string(input_size) +
                              " is not divisible by 2^" + std::to_string(halvings));
    }
};

/// One tensor per encoder stage; stage s is
/// [stage_channels[s] x input_size/2^(s+1) x input_size/2^(s+1)].
struct StageFeatures {
    std::vector<Tensor> stages;
};

/// Multi-stage CNN encoder. Shared mode keeps one weight set used for both
/// modalities (weight tying by shared tensors); Individual mode keeps two
/// disjoint sets. Each stage: conv(kernel, stride 1, pad kernel/2) -> bias ->
/// GELU -> 2x2 average pool.
class Encoder {
public:
    static Encoder build(const EncoderConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Encoder enc;
        enc.cfg_ = cfg;
        const std::size_t n_sets = cfg.sharing == Sharing::kShared ? 1 : 2;
        for (std::size_t set = 0; set < n_sets; ++set) {
            Rng rng(mix_seed(seed, set));
            WeightSet ws;
            std::size_t prev = cfg.in_channels;
            for (std::size_t c : cfg.stage_channels) {
                const std::size_t fan_in = prev * cfg.kernel * cfg.kernel;
                const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
                Tensor w = Tensor::zeros({c, prev, cfg.kernel, cfg.kernel}, true);
                for (double& v : w.values()) v = std_dev * rng.normal();
                ws.w.push_back(w);
                ws.b.push_back(Tensor::zeros({c}, true));
                prev = c;
            }
            enc.sets_.push_back(std::move(ws));
        }
        return enc;
    }

    const EncoderConfig& config() const { return cfg_; }
    std::size_t stage_count() const { return cfg_.stage_channels.size(); }

    /// Spatial side length of the stage-s output (after its pool).
    std::size_t stage_size(std::size_t s) const {
        return cfg_.input_size >> (s + 1);
    }

    /// Runs a single stage of the given modality's weight set.
    Tensor forward_stage(std::size_t stage, const Tensor& x, Modality m) const {
        if (stage >= stage_count())
            throw ContractError("encoder: stage " + std::to_string(stage) +
                                " out of range");
        const WeightSet& ws = set_for(m);
        Tensor h = conv2d(x, ws.w[stage], 1, cfg_.kernel / 2);
        h = add_channel_bias(h, ws.b[stage]);
        return avgpool2(gelu(h));
    }

    /// Full pass over both modalities, collecting per-stage features.
    std::pair<StageFeatures, StageFeatures> encode_pair(const Tensor& clinical,
                                                        const Tensor& derm) const {
        check_input(clinical, "clinical");
        check_input(derm, "dermoscopy");
        StageFeatures fc, fd;
        Tensor xc = clinical, xd = derm;
        for (std::size_t s = 0; s < stage_count(); ++s) {
            xc = forward_stage(s, xc, Modality::kClinical);
            xd = forward_stage(s, xd, Modality::kDermoscopy);
            fc.stages.push_back(xc);
            fd.stages.push_back(xd);
        }
        return {std::move(fc), std::move(fd)};
    }

    /// Scalar weight count; tied weights are counted once.
    std::size_t param_count() const {
        std::size_t per_set = 0;
        std::size_t prev = cfg_.in_channels;
        for (std::size_t c : cfg_.stage_channels) {
            per_set += prev * c * cfg_.kernel * cfg_.kernel + c;
            prev = c;
        }
        return per_set * sets_.size();
    }

    void collect_params(std::vector<std::pair<std::string, Tensor>>& out) const {
        static const char* kSetNames[2][2] = {{"shared", ""}, {"clinical", "derm"}};
        const bool individual = sets_.size() == 2;
        for (std::size_t set = 0; set < sets_.size(); ++set) {
            const std::string prefix =
                std::string("encoder.") + kSetNames[individual][set] + ".stage";
            for (std::size_t s = 0; s < sets_[set].w.size(); ++s) {
                out.emplace_back(prefix + std::to_string(s) + ".w", sets_[set].w[s]);
                out.emplace_back(prefix + std::to_string(s) + ".b", sets_[set].b[s]);
            }
        }
    }

private:
    struct WeightSet {
        std::vector<Tensor> w, b;
    };

    const WeightSet& set_for(Modality m) const {
        if (sets_.size() == 1) return sets_[0];
        return sets_[m == Modality::kClinical ? 0 : 1];
    }

    void check_input(const Tensor& x, const char* which) const {
        if (x.rank() != 3 || x.dim(0) != cfg_.in_channels ||
            x.dim(1) != cfg_.input_size || x.dim(2) != cfg_.input_size)
            throw ShapeError(std::string("encoder: ") + which + " input " +
                             shape_str(x.shape()) + " does not match [" +
                             std::to_string(cfg_.in_channels) + " x " +
                             std::to_string(cfg_.input_size) + " x " +
                             std::to_string(cfg_.input_size) + "]");
    }

    EncoderConfig cfg_;
    std::vector<WeightSet> sets_;
};

inline std::size_t count_params(const Encoder& enc) { return enc.param_count(); }

} // namespace pemm
