#pragma once

#include <algorithm>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace pemm {

/// Scalar losses of the three branches for one batch.
struct BranchLosses {
    Tensor clinical, derm, fusion;
};

/// The branch-weighting triple, parameterized by the single weight factor W:
/// W_C = W, W_D = 0.5 - W, W_F = 0.5. Coefficients always sum to 1 and the
/// fusion share equals the two modality shares combined. W is clamped to
/// [0, 0.5]; the sweep over discrete W values lives in the comparison suite.
class LossWeights {
public:
    explicit LossWeights(double w) : w_(std::clamp(w, 0.0, 0.5)) {}

    double factor() const { return w_; }
    double w_c() const { return w_; }
    double w_d() const { return 0.5 - w_; }
    double w_f() const { return 0.5; }

private:
    double w_;
};

/// Mean over tasks of mean-over-batch softmax cross-entropy.
inline Tensor multitask_ce(const std::vector<Tensor>& per_task_logits,
                           const std::vector<std::vector<int>>& labels_by_task) {
    if (per_task_logits.empty())
        throw ContractError("multitask_ce: no tasks");
    if (labels_by_task.size() != per_task_logits.size())
        throw DataError("multitask_ce: " + std::to_string(labels_by_task.size()) +
                        " label sets for " +
                        std::to_string(per_task_logits.size()) + " tasks");
    Tensor total;
    for (std::size_t t = 0; t < per_task_logits.size(); ++t) {
        Tensor ce = softmax_cross_entropy(per_task_logits[t], labels_by_task[t]);
        total = t == 0 ? ce : add(total, ce);
    }
    return scale(total, 1.0 / static_cast<double>(per_task_logits.size()));
}

/// Fully general weighted combination of the three branch losses.
inline Tensor weighted_total(const BranchLosses& l, double wc, double wd,
                             double wf) {
    return add(add(scale(l.clinical, wc), scale(l.derm, wd)), scale(l.fusion, wf));
}

/// Biased combination: W·L_C + (0.5-W)·L_D + 0.5·L_F.
inline Tensor biased_total(const BranchLosses& l, const LossWeights& w) {
    return weighted_total(l, w.w_c(), w.w_d(), w.w_f());
}

/// Equal combination: (L_C + L_D + L_F) / 3.
inline Tensor equal_total(const BranchLosses& l) {
    return scale(add(add(l.clinical, l.derm), l.fusion), 1.0 / 3.0);
}

} // namespace pemm
