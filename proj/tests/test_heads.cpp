#include "catch2/catch_amalgamated.hpp"

#include <cmath>

#include "pemm/gradcheck.hpp"
#include "pemm/heads.hpp"

#include "helpers.hpp"

using namespace pemm;
using testutil::rand_tensor;

namespace {

HeadConfig two_tasks(ClassifierSharing sharing = ClassifierSharing::kIndividual) {
    HeadConfig cfg;
    cfg.tasks = {2, 3};
    cfg.classifier_sharing = sharing;
    return cfg;
}

/// Logits whose softmax reproduces the given probability rows.
Tensor logits_for(std::initializer_list<std::initializer_list<double>> probs) {
    std::vector<std::vector<double>> rows;
    for (auto& r : probs) {
        std::vector<double> lr;
        for (double p : r) lr.push_back(std::log(p));
        rows.push_back(lr);
    }
    Shape shape{rows.size(), rows[0].size()};
    std::vector<double> flat;
    for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return Tensor::from(shape, flat);
}

/// Single-task BranchOutputs from explicit per-branch probability rows.
BranchOutputs outs_from_probs(
    std::initializer_list<std::initializer_list<double>> c,
    std::initializer_list<std::initializer_list<double>> d,
    std::initializer_list<std::initializer_list<double>> f) {
    BranchOutputs o;
    o.clinical.push_back(logits_for(c));
    o.derm.push_back(logits_for(d));
    o.fusion.push_back(logits_for(f));
    return o;
}

/// Independent brute-force re-scan: same objective and tie-break, written
/// against the documented contract rather than the implementation.
FusionWeightTriple oracle_scan(const BranchOutputs& outs,
                               const std::vector<std::vector<int>>& labels,
                               double step) {
    const long n = std::lround(1.0 / step);
    const std::size_t bsz = outs.batch_size();
    double best_acc = -1.0;
    long bc = -1, bd = -1, bf = -1;
    for (long i = 0; i <= n; ++i)
        for (long j = 0; j + i <= n; ++j) {
            const long k = n - i - j;
            FusionWeightTriple w{double(i) / n, double(j) / n, double(k) / n};
            auto fused = late_fuse(outs, w);
            long correct = 0;
            long total = 0;
            for (std::size_t t = 0; t < fused.size(); ++t) {
                const std::size_t kk = fused[t].dim(1);
                for (std::size_t r = 0; r < bsz; ++r) {
                    std::size_t arg = 0;
                    for (std::size_t cix = 1; cix < kk; ++cix)
                        if (fused[t].at(r, cix) > fused[t].at(r, arg)) arg = cix;
                    correct += arg == static_cast<std::size_t>(labels[t][r]);
                    ++total;
                }
            }
            double acc = double(correct) / double(total);
            bool better = acc > best_acc + 1e-12;
            if (!better && std::abs(acc - best_acc) <= 1e-12)
                better = std::tie(k, j, i) > std::tie(bf, bd, bc);
            if (better) {
                best_acc = acc;
                bc = i;
                bd = j;
                bf = k;
            }
        }
    return {double(bc) / n, double(bd) / n, double(bf) / n};
}

BranchOutputs random_outputs(std::uint64_t seed, std::size_t batch,
                             std::vector<std::size_t> tasks) {
    BranchOutputs o;
    std::uint64_t salt = 0;
    for (std::size_t k : tasks) {
        o.clinical.push_back(rand_tensor({batch, k}, mix_seed(seed, salt++), 2.0,
                                         false));
        o.derm.push_back(rand_tensor({batch, k}, mix_seed(seed, salt++), 2.0,
                                     false));
        o.fusion.push_back(rand_tensor({batch, k}, mix_seed(seed, salt++), 2.0,
                                       false));
    }
    return o;
}

} // namespace

TEST_CASE("head construction and parameter counts") {
    Heads h = Heads::build(two_tasks(), 4, 8, 1);
    // clinical 10+15, derm 10+15, fusion 18+27
    REQUIRE(h.param_count() == 95);
    Heads tied = Heads::build(two_tasks(ClassifierSharing::kSharedCD), 4, 8, 1);
    REQUIRE(tied.param_count() == 70);

    // The fusion width is independent of the modality feature width.
    Heads wide = Heads::build(two_tasks(), 4, 10, 1);
    REQUIRE(wide.fusion_dim() == 10);
    // clinical 10+15, derm 10+15, fusion 22+33
    REQUIRE(wide.param_count() == 105);

    HeadConfig bad;
    REQUIRE_THROWS_AS(Heads::build(bad, 4, 8, 1), ConfigError);
    bad.tasks = {1};
    REQUIRE_THROWS_AS(Heads::build(bad, 4, 8, 1), ConfigError);
}

TEST_CASE("classify produces hand-checked logits") {
    HeadConfig cfg;
    cfg.tasks = {2};
    Heads h = Heads::build(cfg, 2, 4, 3);
    std::vector<std::pair<std::string, Tensor>> named;
    h.collect_params(named);
    for (auto& [name, t] : named) {
        if (name == "heads.clinical.task0.w")
            t.values() = {1, 0, 0, 1}; // identity rows
        else
            std::fill(t.values().begin(), t.values().end(), 0.0);
    }
    Tensor pooled = Tensor::matrix({{1, 0}});
    auto logits = h.classify_clinical(pooled);
    REQUIRE(logits.size() == 1);
    REQUIRE(logits[0].values() == std::vector<double>{1, 0});

    // Zero weights and bias elsewhere -> uniform softmax.
    auto dlog = h.classify_derm(pooled);
    Tensor probs = softmax_rows(dlog[0]);
    REQUIRE(probs.at(0, 0) == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("SharedCD ties the two modality heads") {
    Heads h = Heads::build(two_tasks(ClassifierSharing::kSharedCD), 4, 8, 9);
    Tensor pooled = rand_tensor({3, 4}, 10, 1.0, false);
    auto lc = h.classify_clinical(pooled);
    auto ld = h.classify_derm(pooled);
    for (std::size_t t = 0; t < lc.size(); ++t)
        REQUIRE(lc[t].values() == ld[t].values());

    Heads untied = Heads::build(two_tasks(), 4, 8, 9);
    REQUIRE(untied.classify_clinical(pooled)[0].values() !=
            untied.classify_derm(pooled)[0].values());
}

TEST_CASE("classify dimension errors") {
    Heads h = Heads::build(two_tasks(), 4, 8, 2);
    Tensor wrong = rand_tensor({3, 5}, 11, 1.0, false);
    REQUIRE_THROWS_AS(h.classify_clinical(wrong), ShapeError);
    Tensor pooled = rand_tensor({3, 4}, 12, 1.0, false);
    REQUIRE_THROWS_AS(h.classify_fusion(pooled), ShapeError); // needs fusion_dim = 8
    REQUIRE(h.classify_fusion(concat_cols(pooled, pooled)).size() == 2);
}

TEST_CASE("head gradients pass finite-difference checks") {
    HeadConfig cfg;
    cfg.tasks = {3};
    Heads h = Heads::build(cfg, 4, 8, 77);
    Tensor pooled = rand_tensor({2, 4}, 78, 1.0, true);
    std::vector<int> labels{2, 0};
    auto f = [&] {
        auto logits = h.classify_clinical(pooled);
        return softmax_cross_entropy(logits[0], labels);
    };
    REQUIRE(grad_check(f, pooled) < 1e-4);
    std::vector<std::pair<std::string, Tensor>> named;
    h.collect_params(named);
    for (auto& [name, t] : named)
        if (name.rfind("heads.clinical.", 0) == 0)
            REQUIRE(grad_check(f, t) < 1e-4);
}

// ---------------------------------------------------------------------------
// Late fusion
// ---------------------------------------------------------------------------

TEST_CASE("late_fuse selects branches exactly at unit weights") {
    BranchOutputs o = random_outputs(20, 4, {2, 3});
    auto fused = late_fuse(o, {1, 0, 0});
    for (std::size_t t = 0; t < 2; ++t) {
        Tensor expect = softmax_rows(o.clinical[t]);
        REQUIRE(fused[t].values() == expect.values());
    }
}

TEST_CASE("late_fuse equals any branch when all branches agree") {
    Tensor logits = rand_tensor({3, 4}, 21, 1.0, false);
    BranchOutputs o;
    o.clinical = {logits};
    o.derm = {logits};
    o.fusion = {logits};
    auto fused = late_fuse(o, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    Tensor expect = softmax_rows(logits);
    for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE(fused[0].at(i) == Catch::Approx(expect.at(i)).margin(1e-15));
}

TEST_CASE("late_fuse hand oracle") {
    BranchOutputs o =
        outs_from_probs({{0.8, 0.2}}, {{0.4, 0.6}}, {{0.6, 0.4}});
    auto fused = late_fuse(o, {0.2, 0.3, 0.5});
    REQUIRE(fused[0].at(0, 0) == Catch::Approx(0.58).margin(1e-12));
    REQUIRE(fused[0].at(0, 1) == Catch::Approx(0.42).margin(1e-12));
}

TEST_CASE("late_fuse rows are distributions for random simplex triples") {
    BranchOutputs o = random_outputs(22, 6, {3});
    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        double a = rng.uniform(), b = rng.uniform() * (1 - a);
        FusionWeightTriple w{a, b, 1 - a - b};
        auto fused = late_fuse(o, w);
        for (std::size_t r = 0; r < 6; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                REQUIRE(fused[0].at(r, c) >= 0.0);
                s += fused[0].at(r, c);
            }
            REQUIRE(std::abs(s - 1.0) < 1e-9);
        }
    }
    REQUIRE_THROWS_AS(late_fuse(o, {0.5, 0.6, -0.1}), ContractError);
}

TEST_CASE("unit fusion weight reproduces fusion-branch argmax") {
    BranchOutputs o = random_outputs(24, 8, {4});
    auto fused = late_fuse(o, {0, 0, 1});
    Tensor direct = softmax_rows(o.fusion[0]);
    for (std::size_t r = 0; r < 8; ++r) {
        std::size_t a1 = 0, a2 = 0;
        for (std::size_t c = 1; c < 4; ++c) {
            if (fused[0].at(r, c) > fused[0].at(r, a1)) a1 = c;
            if (direct.at(r, c) > direct.at(r, a2)) a2 = c;
        }
        REQUIRE(a1 == a2);
    }
}

// ---------------------------------------------------------------------------
// Validation weight search
// ---------------------------------------------------------------------------

TEST_CASE("strictly dominant branch wins the search outright") {
    // Sample 1: dermoscopy confidently right, others confidently wrong.
    // Sample 2: dermoscopy barely right, others confidently wrong — only
    // w_D = 1 classifies both, making the unit weight the unique optimum.
    BranchOutputs o = outs_from_probs(
        {{0.01, 0.99}, {0.01, 0.99}},  // clinical
        {{0.99, 0.01}, {0.52, 0.48}},  // dermoscopy
        {{0.01, 0.99}, {0.01, 0.99}}); // fusion
    std::vector<std::vector<int>> labels{{0, 0}};
    FusionWeightTriple w = search_fusion_weights(o, labels, 0.1);
    REQUIRE(w.w_c == 0.0);
    REQUIRE(w.w_d == 1.0);
    REQUIRE(w.w_f == 0.0);
}

TEST_CASE("flat-accuracy ties resolve toward fusion, then dermoscopy") {
    // Every branch classifies everything correctly -> every grid point ties.
    BranchOutputs o = outs_from_probs({{0.9, 0.1}}, {{0.9, 0.1}}, {{0.9, 0.1}});
    std::vector<std::vector<int>> labels{{0}};
    FusionWeightTriple w = search_fusion_weights(o, labels, 0.1);
    REQUIRE(w.w_c == 0.0);
    REQUIRE(w.w_d == 0.0);
    REQUIRE(w.w_f == 1.0);
}

TEST_CASE("search equals the independent oracle scan") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        BranchOutputs o = random_outputs(1000 + seed, 12, {2, 3});
        std::vector<std::vector<int>> labels{
            testutil::rand_labels(12, 2, 2000 + seed),
            testutil::rand_labels(12, 3, 3000 + seed)};
        FusionWeightTriple got = search_fusion_weights(o, labels, 0.1);
        FusionWeightTriple want = oracle_scan(o, labels, 0.1);
        REQUIRE(got.w_c == want.w_c);
        REQUIRE(got.w_d == want.w_d);
        REQUIRE(got.w_f == want.w_f);
        got.validate();
    }
}

TEST_CASE("search preconditions") {
    BranchOutputs o = random_outputs(30, 4, {2});
    std::vector<std::vector<int>> labels{testutil::rand_labels(4, 2, 31)};
    REQUIRE_THROWS_AS(search_fusion_weights(o, labels, 0.0), ContractError);
    REQUIRE_THROWS_AS(search_fusion_weights(o, labels, 0.7), ContractError);
    std::vector<std::vector<int>> short_labels{testutil::rand_labels(3, 2, 31)};
    REQUIRE_THROWS_AS(search_fusion_weights(o, short_labels, 0.1), DataError);
}
