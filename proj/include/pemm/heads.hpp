#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pemm {

enum class ClassifierSharing { kIndividual, kSharedCD };

struct HeadConfig {
    std::vector<std::size_t> tasks; // class count per task
    ClassifierSharing classifier_sharing = ClassifierSharing::kIndividual;

    void validate() const {
        if (tasks.empty()) throw ConfigError("heads: at least one task required");
        for (std::size_t k : tasks)
            if (k < 2)
                throw ConfigError("heads: every task needs >= 2 classes, got " +
                                  std::to_string(k));
    }
};

/// Per-branch, per-task logits for one batch: each entry is [batch x K_t].
struct BranchOutputs {
    std::vector<Tensor> clinical, derm, fusion;

    std::size_t batch_size() const {
        if (clinical.empty()) throw ContractError("BranchOutputs: no tasks");
        return clinical[0].dim(0);
    }
    std::size_t task_count() const { return clinical.size(); }
};

/// Linear classifiers over pooled features: per-task heads for the clinical,
/// dermoscopy, and fusion branches. SharedCD ties the clinical and dermoscopy
/// heads (same tensors); the fusion head reads the separately sized fused
/// feature and always has its own weights.
class Heads {
public:
    static Heads build(const HeadConfig& cfg, std::size_t feature_dim,
                       std::size_t fusion_dim, std::uint64_t seed) {
        cfg.validate();
        if (feature_dim == 0 || fusion_dim == 0)
            throw ConfigError("heads: feature dimensions must be positive");
        Heads h;
        h.cfg_ = cfg;
        h.dim_ = feature_dim;
        h.fusion_dim_ = fusion_dim;
        h.clinical_ = init_group(cfg.tasks, feature_dim, mix_seed(seed, 0));
        h.derm_ = cfg.classifier_sharing == ClassifierSharing::kSharedCD
                      ? h.clinical_
                      : init_group(cfg.tasks, feature_dim, mix_seed(seed, 1));
        h.fusion_ = init_group(cfg.tasks, fusion_dim, mix_seed(seed, 2));
        return h;
    }

    const HeadConfig& config() const { return cfg_; }
    std::size_t feature_dim() const { return dim_; }
    std::size_t fusion_dim() const { return fusion_dim_; }

    std::vector<Tensor> classify_clinical(const Tensor& pooled) const {
        return apply(clinical_, pooled, dim_);
    }
    std::vector<Tensor> classify_derm(const Tensor& pooled) const {
        return apply(derm_, pooled, dim_);
    }
    /// Takes the fused feature matrix [B x fusion_dim].
    std::vector<Tensor> classify_fusion(const Tensor& fused) const {
        return apply(fusion_, fused, fusion_dim_);
    }

    std::size_t param_count() const {
        const bool tied = cfg_.classifier_sharing == ClassifierSharing::kSharedCD;
        std::size_t n = 0;
        for (std::size_t k : cfg_.tasks) {
            n += (tied ? 1 : 2) * (dim_ * k + k); // clinical (+ derm when untied)
            n += fusion_dim_ * k + k;             // fusion
        }
        return n;
    }

    void collect_params(std::vector<std::pair<std::string, Tensor>>& out) const {
        const bool tied = cfg_.classifier_sharing == ClassifierSharing::kSharedCD;
        collect_group(out, clinical_, tied ? "heads.cd." : "heads.clinical.");
        if (!tied) collect_group(out, derm_, "heads.derm.");
        collect_group(out, fusion_, "heads.fusion.");
    }

private:
    struct TaskHead {
        Tensor w, b; // w: [d_in x K], b: [K]
    };

    static std::vector<TaskHead> init_group(const std::vector<std::size_t>& tasks,
                                            std::size_t d_in, std::uint64_t seed) {
        Rng rng(seed);
        const double std_dev = std::sqrt(1.0 / static_cast<double>(d_in));
        std::vector<TaskHead> group;
        for (std::size_t k : tasks) {
            TaskHead th;
            th.w = Tensor::zeros({d_in, k}, true);
            for (double& v : th.w.values()) v = std_dev * rng.normal();
            th.b = Tensor::zeros({k}, true);
            group.push_back(std::move(th));
        }
        return group;
    }

    static std::vector<Tensor> apply(const std::vector<TaskHead>& group,
                                     const Tensor& x, std::size_t expect_dim) {
        if (x.rank() != 2 || x.dim(1) != expect_dim)
            throw ShapeError("heads: pooled features " + shape_str(x.shape()) +
                             " do not match input dim " +
                             std::to_string(expect_dim));
        std::vector<Tensor> logits;
        logits.reserve(group.size());
        for (const TaskHead& th : group)
            logits.push_back(add_rowvec(matmul(x, th.w), th.b));
        return logits;
    }

    static void collect_group(std::vector<std::pair<std::string, Tensor>>& out,
                              const std::vector<TaskHead>& group,
                              const std::string& prefix) {
        for (std::size_t t = 0; t < group.size(); ++t) {
            out.emplace_back(prefix + "task" + std::to_string(t) + ".w", group[t].w);
            out.emplace_back(prefix + "task" + std::to_string(t) + ".b", group[t].b);
        }
    }

    HeadConfig cfg_;
    std::size_t dim_ = 0;
    std::size_t fusion_dim_ = 0;
    std::vector<TaskHead> clinical_, derm_, fusion_;
};

// ---------------------------------------------------------------------------
// Prediction-level late fusion
// ---------------------------------------------------------------------------

struct FusionWeightTriple {
    double w_c = 1.0 / 3.0, w_d = 1.0 / 3.0, w_f = 1.0 / 3.0;

    void validate() const {
        if (w_c < 0 || w_d < 0 || w_f < 0 ||
            std::abs(w_c + w_d + w_f - 1.0) > 1e-9)
            throw ContractError("fusion weights must be nonnegative and sum to 1");
    }
};

/// Per task: p = w_C·softmax(C) + w_D·softmax(D) + w_F·softmax(F).
inline std::vector<Tensor> late_fuse(const BranchOutputs& outs,
                                     const FusionWeightTriple& w) {
    w.validate();
    if (outs.derm.size() != outs.clinical.size() ||
        outs.fusion.size() != outs.clinical.size())
        throw ShapeError("late_fuse: branch task counts differ");
    std::vector<Tensor> fused;
    fused.reserve(outs.clinical.size());
    for (std::size_t t = 0; t < outs.clinical.size(); ++t) {
        Tensor p = scale(softmax_rows(outs.clinical[t]), w.w_c);
        p = add(p, scale(softmax_rows(outs.derm[t]), w.w_d));
        p = add(p, scale(softmax_rows(outs.fusion[t]), w.w_f));
        fused.push_back(p);
    }
    return fused;
}

namespace detail {

inline std::size_t argmax_row(const std::vector<double>& v, std::size_t row,
                              std::size_t k) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
        if (v[row * k + j] > v[row * k + best]) best = j;
    return best;
}

} // namespace detail

/// Exhaustive simplex grid search for the late-fusion triple, maximizing mean
/// per-task accuracy on the given (validation) outputs. With every task
/// sharing the batch, mean accuracy is monotone in the total number of
/// correct predictions, so candidates are scored by that integer — making
/// comparisons and the documented tie-break (prefer higher w_F, then w_D,
/// then w_C) exact.
inline FusionWeightTriple search_fusion_weights(
    const BranchOutputs& outs, const std::vector<std::vector<int>>& labels_by_task,
    double step = 0.1) {
    if (!(step > 0.0) || step > 0.5)
        throw ContractError("search_fusion_weights: step must be in (0, 0.5]");
    const std::size_t tasks = outs.task_count();
    if (labels_by_task.size() != tasks)
        throw DataError("search_fusion_weights: label task count mismatch");
    const std::size_t n = outs.batch_size();
    if (n == 0) throw DataError("search_fusion_weights: empty validation set");
    for (const auto& l : labels_by_task)
        if (l.size() != n)
            throw DataError("search_fusion_weights: label count mismatch");

    // Per-branch probabilities once; candidates only reweight them.
    std::vector<std::vector<double>> pc(tasks), pd(tasks), pf(tasks);
    std::vector<std::size_t> ks(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
        pc[t] = softmax_rows(outs.clinical[t]).values();
        pd[t] = softmax_rows(outs.derm[t]).values();
        pf[t] = softmax_rows(outs.fusion[t]).values();
        ks[t] = outs.clinical[t].dim(1);
    }

    const long grid = std::lround(1.0 / step);
    long best_correct = -1;
    long bi = 0, bj = 0, bk = 0;
    std::vector<double> fused;
    for (long i = 0; i <= grid; ++i)             // w_C
        for (long j = 0; j <= grid - i; ++j) {   // w_D
            const long k = grid - i - j;         // w_F
            const double wc = static_cast<double>(i) / static_cast<double>(grid);
            const double wd = static_cast<double>(j) / static_cast<double>(grid);
            const double wf = static_cast<double>(k) / static_cast<double>(grid);
            long correct = 0;
            for (std::size_t t = 0; t < tasks; ++t) {
                const std::size_t kk = ks[t];
                fused.assign(n * kk, 0.0);
                for (std::size_t e = 0; e < n * kk; ++e)
                    fused[e] = wc * pc[t][e] + wd * pd[t][e] + wf * pf[t][e];
                for (std::size_t r = 0; r < n; ++r)
                    correct += detail::argmax_row(fused, r, kk) ==
                               static_cast<std::size_t>(labels_by_task[t][r]);
            }
            const bool better =
                correct > best_correct ||
                (correct == best_correct &&
                 std::tie(k, j, i) > std::tie(bk, bj, bi));
            if (better) {
                best_correct = correct;
                bi = i;
                bj = j;
                bk = k;
            }
        }
    FusionWeightTriple w;
    w.w_c = static_cast<double>(bi) / static_cast<double>(grid);
    w.w_d = static_cast<double>(bj) / static_cast<double>(grid);
    w.w_f = static_cast<double>(bk) / static_cast<double>(grid);
    return w;
}

} // namespace pemm
