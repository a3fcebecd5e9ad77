#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "heads.hpp"
#include "loss.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pemm {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Cosine annealing: lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2.
inline double cosine_lr(std::size_t t, std::size_t total, double lr_max,
                        double lr_min) {
    if (total == 0) throw ContractError("cosine_lr: schedule length must be positive");
    if (t > total)
        throw ContractError("cosine_lr: step " + std::to_string(t) +
                            " beyond schedule of " + std::to_string(total));
    constexpr double pi = 3.14159265358979323846;
    return lr_min + 0.5 * (lr_max - lr_min) *
                        (1.0 + std::cos(pi * static_cast<double>(t) /
                                        static_cast<double>(total)));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step_count = 0;
    std::vector<std::vector<double>> m, v; // per-parameter moment buffers

    static AdamState init(const std::vector<std::pair<std::string, Tensor>>& params) {
        AdamState st;
        for (const auto& [name, t] : params) {
            (void)name;
            st.m.emplace_back(t.size(), 0.0);
            st.v.emplace_back(t.size(), 0.0);
        }
        return st;
    }
};

/// Bias-corrected Adam over the model's live parameter tensors, reading the
/// gradients accumulated by the most recent backward pass.
inline void adam_step(const std::vector<std::pair<std::string, Tensor>>& params,
                      AdamState& st, double lr) {
    if (params.size() != st.m.size())
        throw ContractError("adam_step: state tracks " + std::to_string(st.m.size()) +
                            " tensors, got " + std::to_string(params.size()));
    ++st.step_count;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].second; // shared handle; updates hit the live weights
        if (!t.requires_grad() || t.grad().size() != t.size())
            throw ContractError("adam_step: parameter '" + params[i].first +
                                "' carries no gradient");
        auto& x = t.values();
        const auto& g = t.grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
            x[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + st.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Weight averaging
// ---------------------------------------------------------------------------

/// Running arithmetic mean of weight snapshots taken in the tail epochs.
struct SwaState {
    std::vector<std::vector<double>> sum;
    std::size_t count = 0;

    void accumulate(const WeightSnapshot& snap) {
        if (count == 0) {
            sum = snap;
        } else {
            if (snap.size() != sum.size())
                throw ContractError("weight averaging: snapshot arity changed");
            for (std::size_t i = 0; i < snap.size(); ++i) {
                if (snap[i].size() != sum[i].size())
                    throw ContractError("weight averaging: snapshot shape changed");
                for (std::size_t j = 0; j < snap[i].size(); ++j)
                    sum[i][j] += snap[i][j];
            }
        }
        ++count;
    }

    WeightSnapshot mean() const {
        if (count == 0)
            throw StateError("weight averaging: no snapshots accumulated");
        WeightSnapshot avg = sum;
        const double inv = 1.0 / static_cast<double>(count);
        for (auto& tensor : avg)
            for (double& v : tensor) v *= inv;
        return avg;
    }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 24;
    /// Desk-scale nets train from scratch, so the default is 1e-3; recipes
    /// tuned for large pretrained backbones (e.g. 3e-5) remain reachable
    /// through configuration.
    double lr_max = 1e-3;
    double lr_min = 0.0;
    std::uint64_t seed = 0;
    double loss_bias = 0.1;       // W: clinical weight; dermoscopy gets 0.5 - W
    bool equal_weighting = false; // plain (L_C + L_D + L_F) / 3 baseline
    double swa_start_fraction = 0.75;
    bool select_best_val = false; // pick best-val epoch instead of the SWA mean

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(lr_max > 0.0)) throw ConfigError("train: lr_max must be positive");
        if (!(lr_min >= 0.0) || lr_min > lr_max)
            throw ConfigError("train: need 0 <= lr_min <= lr_max");
        if (!(swa_start_fraction >= 0.0) || swa_start_fraction >= 1.0)
            throw ConfigError("train: swa_start_fraction must be in [0, 1)");
    }
};

struct EpochStats {
    std::size_t epoch = 0;
    double lr = 0;
    double loss_clinical = 0, loss_derm = 0, loss_fusion = 0, loss_total = 0;
    double val_avg_acc = 0, val_avg_auc = 0;
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,lr,L_C,L_D,L_F,L_total,val_avg_acc,val_avg_auc\n";
    for (const EpochStats& e : history) {
        out += std::to_string(e.epoch) + ',' + fmt_double(e.lr) + ',' +
               fmt_double(e.loss_clinical) + ',' + fmt_double(e.loss_derm) + ',' +
               fmt_double(e.loss_fusion) + ',' + fmt_double(e.loss_total) + ',' +
               fmt_double(e.val_avg_acc) + ',' + fmt_double(e.val_avg_auc) + '\n';
    }
    return out;
}

struct FitResult {
    std::vector<EpochStats> history;
    std::size_t swa_snapshots = 0;
    std::size_t best_epoch = 0; // meaningful when select_best_val is on
};

/// Gathers images/labels for the given sample indices.
inline std::pair<std::vector<Tensor>, std::vector<Tensor>> gather_images(
    const PairedDataset& ds, const std::vector<std::size_t>& indices) {
    std::vector<Tensor> c, d;
    c.reserve(indices.size());
    d.reserve(indices.size());
    for (std::size_t idx : indices) {
        if (idx >= ds.samples.size())
            throw ContractError("gather: sample index out of range");
        c.push_back(ds.samples[idx].clinical);
        d.push_back(ds.samples[idx].dermoscopy);
    }
    return {std::move(c), std::move(d)};
}

inline std::vector<std::vector<int>> gather_labels(
    const PairedDataset& ds, const std::vector<std::size_t>& indices) {
    std::vector<std::vector<int>> by_task(ds.task_count());
    for (std::size_t idx : indices)
        for (std::size_t t = 0; t < ds.task_count(); ++t)
            by_task[t].push_back(ds.samples[idx].labels[t]);
    return by_task;
}

/// Tape-free forward over a sample set: per-task logits for all branches.
inline BranchOutputs branch_outputs(const Model& model, const PairedDataset& ds,
                                    const std::vector<std::size_t>& indices) {
    auto [c, d] = gather_images(ds, indices);
    return model.forward(c, d);
}

/// Validation-style scoring: late-fused probabilities under the given triple,
/// reduced to the standard report.
inline MetricReport scored_report(const BranchOutputs& outs,
                                  const std::vector<std::vector<int>>& labels,
                                  const FusionWeightTriple& w) {
    return report(late_fuse(outs, w), labels);
}

inline FitResult fit(Model& model, const PairedDataset& ds,
                     const DatasetSplits& splits, const TrainConfig& cfg) {
    cfg.validate();
    if (splits.train.empty()) throw DataError("fit: empty training split");
    if (splits.val.empty()) throw DataError("fit: empty validation split");
    if (ds.task_count() != model.config().heads.tasks.size())
        throw ConfigError("fit: dataset task arity differs from model heads");
    for (std::size_t t = 0; t < ds.task_count(); ++t)
        if (ds.spec.tasks[t] != model.config().heads.tasks[t])
            throw ConfigError("fit: class count mismatch on task " + std::to_string(t));

    const auto params = model.named_params();
    AdamState adam = AdamState::init(params);
    SwaState swa;
    const std::size_t swa_start = static_cast<std::size_t>(std::floor(
        cfg.swa_start_fraction * static_cast<double>(cfg.epochs) + 1e-9));
    const LossWeights lw(cfg.loss_bias);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5f75f13eULL));

    FitResult result;
    double best_val = -1.0;
    WeightSnapshot best_snap;
    const std::size_t n_train = splits.train.size();
    const auto val_labels = gather_labels(ds, splits.val);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        const std::vector<std::size_t> perm = shuffled_indices(n_train, shuffle_rng);

        double sum_c = 0, sum_d = 0, sum_f = 0, sum_total = 0;
        for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
            const std::size_t stop = std::min(start + cfg.batch_size, n_train);
            std::vector<std::size_t> batch_idx;
            batch_idx.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i)
                batch_idx.push_back(splits.train[perm[i]]);

            for (const auto& [name, p] : params) {
                (void)name;
                p.zero_grad();
            }
            Tape tape;
            TapeScope tape_scope(tape);
            auto [bc, bd] = gather_images(ds, batch_idx);
            const auto labels = gather_labels(ds, batch_idx);
            const BranchOutputs outs = model.forward(bc, bd);
            BranchLosses losses;
            losses.clinical = multitask_ce(outs.clinical, labels);
            losses.derm = multitask_ce(outs.derm, labels);
            losses.fusion = multitask_ce(outs.fusion, labels);
            const Tensor total = cfg.equal_weighting ? equal_total(losses)
                                                     : biased_total(losses, lw);
            if (!std::isfinite(total.value()))
                throw TrainingDiverged("loss became non-finite at epoch " +
                                       std::to_string(epoch));
            backward(total);
            adam_step(params, adam, lr);

            const double n = static_cast<double>(stop - start);
            sum_c += losses.clinical.value() * n;
            sum_d += losses.derm.value() * n;
            sum_f += losses.fusion.value() * n;
            sum_total += total.value() * n;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        const double inv_n = 1.0 / static_cast<double>(n_train);
        stats.loss_clinical = sum_c * inv_n;
        stats.loss_derm = sum_d * inv_n;
        stats.loss_fusion = sum_f * inv_n;
        stats.loss_total = sum_total * inv_n;

        const BranchOutputs val_outs = branch_outputs(model, ds, splits.val);
        const MetricReport val_rep = scored_report(val_outs, val_labels, {});
        stats.val_avg_acc = val_rep.avg_acc;
        stats.val_avg_auc = val_rep.avg_auc;
        result.history.push_back(stats);

        if (epoch >= swa_start) {
            swa.accumulate(model.snapshot());
            ++result.swa_snapshots;
        }
        if (cfg.select_best_val && stats.val_avg_acc > best_val) {
            best_val = stats.val_avg_acc;
            best_snap = model.snapshot();
            result.best_epoch = epoch;
        }
    }

    if (cfg.select_best_val)
        model.restore(best_snap);
    else
        model.restore(swa.mean());
    return result;
}

} // namespace pemm
