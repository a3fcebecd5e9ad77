#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "heads.hpp"
#include "tensor.hpp"

namespace pemm {

/// Shortest round-trip decimal form of a double (same renderer as the JSON
/// output, so CSV and JSON carry identical digits).
inline std::string fmt_double(double v) { return nlohmann::json(v).dump(); }

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// Mann-Whitney AUC with ties counted 1/2: the probability that a random
/// positive outscores a random negative. Computed via midranks; the numerator
/// is an exact multiple of 0.5, so the result is bit-identical to the
/// brute-force pairwise count.
inline double auc_binary(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ContractError("auc_binary: " + std::to_string(scores.size()) +
                            " scores for " + std::to_string(labels.size()) +
                            " labels");
    std::size_t pos = 0, neg = 0;
    for (int l : labels) (l != 0 ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw UndefinedMetricError("auc_binary: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });
    double pos_rank_sum = 0.0; // sum of positive midranks, exact in halves
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j); // (lo+hi)/2
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] != 0) pos_rank_sum += midrank;
        i = j;
    }
    const double u =
        pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct ConfusionMetrics {
    double precision = 0, sensitivity = 0, specificity = 0, accuracy = 0;
    bool zero_division = false; // some denominator was empty; that metric is 0
};

inline ConfusionMetrics confusion_metrics(const std::vector<int>& pred,
                                          const std::vector<int>& truth,
                                          int positive_class) {
    if (pred.size() != truth.size())
        throw ContractError("confusion_metrics: size mismatch");
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == positive_class;
        const bool t = truth[i] == positive_class;
        if (p && t) ++tp;
        else if (p && !t) ++fp;
        else if (!p && t) ++fn;
        else ++tn;
    }
    ConfusionMetrics m;
    auto ratio = [&m](std::size_t num, std::size_t den) {
        if (den == 0) {
            m.zero_division = true;
            return 0.0;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    m.precision = ratio(tp, tp + fp);
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    m.accuracy = ratio(tp + tn, pred.size());
    return m;
}

/// Non-interpolated average precision: mean of precision-at-k over the ranks
/// k holding positives, in descending score order; ties resolved by the
/// stable (score desc, original index asc) order.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ContractError("average_precision: size mismatch");
    std::size_t pos = 0;
    for (int l : labels) pos += l != 0;
    if (pos == 0)
        throw UndefinedMetricError("average_precision: no positive samples");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < order.size(); ++k)
        if (labels[order[k]] != 0) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    return sum / static_cast<double>(pos);
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

struct TaskMetrics {
    double accuracy = 0;
    std::vector<double> class_auc;               // one-vs-rest per class
    std::vector<ConfusionMetrics> class_confusion; // on argmax predictions
    std::optional<double> ap;                    // binary tasks: AP of class 1
};

struct MetricReport {
    std::vector<TaskMetrics> tasks;
    double avg_auc = 0; // mean over all per-class AUCs
    double avg_acc = 0; // mean over tasks
};

/// Builds the full report from per-task probability (or score) matrices
/// [n x K_t] and integer truth labels.
inline MetricReport report(const std::vector<Tensor>& probs_by_task,
                           const std::vector<std::vector<int>>& labels_by_task) {
    if (probs_by_task.empty() ||
        probs_by_task.size() != labels_by_task.size())
        throw ContractError("report: task count mismatch");
    MetricReport rep;
    double auc_sum = 0;
    std::size_t auc_count = 0;
    for (std::size_t t = 0; t < probs_by_task.size(); ++t) {
        const Tensor& probs = probs_by_task[t];
        const auto& truth = labels_by_task[t];
        if (probs.rank() != 2 || probs.dim(0) != truth.size())
            throw ContractError("report: probs/labels size mismatch on task " +
                                std::to_string(t));
        const std::size_t n = probs.dim(0), k = probs.dim(1);
        TaskMetrics tm;
        std::vector<int> pred(n);
        for (std::size_t r = 0; r < n; ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c)
                if (probs.at(r, c) > probs.at(r, best)) best = c;
            pred[r] = static_cast<int>(best);
        }
        std::size_t correct = 0;
        for (std::size_t r = 0; r < n; ++r) correct += pred[r] == truth[r];
        tm.accuracy = static_cast<double>(correct) / static_cast<double>(n);

        for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> scores(n);
            std::vector<int> binary(n);
            for (std::size_t r = 0; r < n; ++r) {
                scores[r] = probs.at(r, c);
                binary[r] = truth[r] == static_cast<int>(c);
            }
            tm.class_auc.push_back(auc_binary(scores, binary));
            tm.class_confusion.push_back(
                confusion_metrics(pred, truth, static_cast<int>(c)));
            auc_sum += tm.class_auc.back();
            ++auc_count;
        }
        if (k == 2) {
            std::vector<double> scores(n);
            std::vector<int> binary(n);
            for (std::size_t r = 0; r < n; ++r) {
                scores[r] = probs.at(r, 1);
                binary[r] = truth[r] == 1;
            }
            tm.ap = average_precision(scores, binary);
        }
        rep.tasks.push_back(std::move(tm));
    }
    double acc_sum = 0;
    for (const TaskMetrics& tm : rep.tasks) acc_sum += tm.accuracy;
    rep.avg_acc = acc_sum / static_cast<double>(rep.tasks.size());
    rep.avg_auc = auc_sum / static_cast<double>(auc_count);
    return rep;
}

// ---------------------------------------------------------------------------
// Serialization: JSON object and flat CSV with fixed orders
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json report_to_json(const MetricReport& rep) {
    nlohmann::ordered_json j;
    j["tasks"] = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < rep.tasks.size(); ++t) {
        const TaskMetrics& tm = rep.tasks[t];
        nlohmann::ordered_json tj;
        tj["task"] = t;
        tj["accuracy"] = tm.accuracy;
        tj["class_auc"] = tm.class_auc;
        nlohmann::ordered_json conf = nlohmann::ordered_json::array();
        for (const ConfusionMetrics& cm : tm.class_confusion) {
            conf.push_back({{"precision", cm.precision},
                            {"sensitivity", cm.sensitivity},
                            {"specificity", cm.specificity},
                            {"accuracy", cm.accuracy},
                            {"zero_division", cm.zero_division}});
        }
        tj["class_confusion"] = std::move(conf);
        if (tm.ap)
            tj["ap"] = *tm.ap;
        else
            tj["ap"] = nullptr;
        j["tasks"].push_back(std::move(tj));
    }
    j["avg_auc"] = rep.avg_auc;
    j["avg_acc"] = rep.avg_acc;
    return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport rep;
    for (const auto& tj : j.at("tasks")) {
        TaskMetrics tm;
        tm.accuracy = tj.at("accuracy").get<double>();
        tm.class_auc = tj.at("class_auc").get<std::vector<double>>();
        for (const auto& cj : tj.at("class_confusion")) {
            ConfusionMetrics cm;
            cm.precision = cj.at("precision").get<double>();
            cm.sensitivity = cj.at("sensitivity").get<double>();
            cm.specificity = cj.at("specificity").get<double>();
            cm.accuracy = cj.at("accuracy").get<double>();
            cm.zero_division = cj.at("zero_division").get<bool>();
            tm.class_confusion.push_back(cm);
        }
        if (!tj.at("ap").is_null()) tm.ap = tj.at("ap").get<double>();
        rep.tasks.push_back(std::move(tm));
    }
    rep.avg_auc = j.at("avg_auc").get<double>();
    rep.avg_acc = j.at("avg_acc").get<double>();
    return rep;
}

/// Flat CSV: header then one row per (task, class, metric), tasks ascending,
/// classes ascending, metrics in AUC, PRE, SEN, SPE order; per-task ACC and
/// AP rows carry an empty class column; averages come last.
inline std::string report_to_csv(const MetricReport& rep) {
    std::string out = "task,class,metric,value\n";
    for (std::size_t t = 0; t < rep.tasks.size(); ++t) {
        const TaskMetrics& tm = rep.tasks[t];
        const std::string ts = std::to_string(t);
        out += ts + ",,ACC," + fmt_double(tm.accuracy) + "\n";
        for (std::size_t c = 0; c < tm.class_auc.size(); ++c) {
            const std::string cs = std::to_string(c);
            const ConfusionMetrics& cm = tm.class_confusion[c];
            out += ts + "," + cs + ",AUC," + fmt_double(tm.class_auc[c]) + "\n";
            out += ts + "," + cs + ",PRE," + fmt_double(cm.precision) + "\n";
            out += ts + "," + cs + ",SEN," + fmt_double(cm.sensitivity) + "\n";
            out += ts + "," + cs + ",SPE," + fmt_double(cm.specificity) + "\n";
        }
        if (tm.ap) out += ts + ",,AP," + fmt_double(*tm.ap) + "\n";
    }
    out += ",,AVG_AUC," + fmt_double(rep.avg_auc) + "\n";
    out += ",,AVG_ACC," + fmt_double(rep.avg_acc) + "\n";
    return out;
}

} // namespace pemm
