#include "catch2/catch_amalgamated.hpp"

#include <cmath>

#include "pemm/gradcheck.hpp"
#include "pemm/loss.hpp"

#include "helpers.hpp"

using namespace pemm;
using testutil::rand_tensor;

namespace {

BranchLosses losses(double c, double d, double f) {
    return {Tensor::scalar(c), Tensor::scalar(d), Tensor::scalar(f)};
}

const double kSweep[] = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};

} // namespace

TEST_CASE("loss weight derivation and clamping") {
    for (double w : kSweep) {
        LossWeights lw(w);
        REQUIRE(lw.w_c() == w);
        REQUIRE(lw.w_f() == 0.5);
        REQUIRE(lw.w_c() + lw.w_d() == lw.w_f()); // exact on the sweep grid
        REQUIRE(lw.w_c() + lw.w_d() + lw.w_f() == 1.0);
        REQUIRE(lw.w_d() >= 0.0);
    }
    REQUIRE(LossWeights(0.7).factor() == 0.5);
    REQUIRE(LossWeights(-0.2).factor() == 0.0);
}

TEST_CASE("multitask cross-entropy values") {
    Tensor uniform = Tensor::matrix({{0, 0}, {0, 0}});
    std::vector<std::vector<int>> labels{{0, 1}};
    std::vector<Tensor> logits{uniform};
    REQUIRE(multitask_ce(logits, labels).value() ==
            Catch::Approx(std::log(2.0)).margin(1e-15));

    Tensor confident = Tensor::matrix({{50, 0}, {0, 50}});
    std::vector<Tensor> sure{confident};
    REQUIRE(multitask_ce(sure, labels).value() < 1e-12);

    SECTION("mean over tasks") {
        std::vector<Tensor> two{uniform, Tensor::matrix({{0, 0, 0}, {0, 0, 0}})};
        std::vector<std::vector<int>> lab2{{0, 1}, {2, 0}};
        REQUIRE(multitask_ce(two, lab2).value() ==
                Catch::Approx((std::log(2.0) + std::log(3.0)) / 2).margin(1e-15));
    }
    SECTION("errors") {
        std::vector<Tensor> none;
        std::vector<std::vector<int>> nolabels;
        REQUIRE_THROWS_AS(multitask_ce(none, nolabels), ContractError);
        std::vector<std::vector<int>> wrong{{0, 5}};
        REQUIRE_THROWS_AS(multitask_ce(logits, wrong), DataError);
    }
}

TEST_CASE("multitask_ce gradient passes finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor l0 = rand_tensor({3, 2}, 100 + seed, 2.0, true);
        Tensor l1 = rand_tensor({3, 4}, 200 + seed, 2.0, true);
        std::vector<std::vector<int>> labels{
            testutil::rand_labels(3, 2, 300 + seed),
            testutil::rand_labels(3, 4, 400 + seed)};
        auto f = [&] {
            std::vector<Tensor> logits{l0, l1};
            return multitask_ce(logits, labels);
        };
        REQUIRE(grad_check(f, l0) < 1e-4);
        REQUIRE(grad_check(f, l1) < 1e-4);
    }
}

TEST_CASE("biased total worked values") {
    REQUIRE(biased_total(losses(1, 1, 1), LossWeights(0.1)).value() == 1.0);

    SECTION("symmetry point W=0.25") {
        Tensor t = biased_total(losses(2, 2, 5), LossWeights(0.25));
        REQUIRE(t.value() == Catch::Approx(0.25 * 2 + 0.25 * 2 + 0.5 * 5)
                                 .margin(1e-15));
    }
    SECTION("W=0.5 removes the dermoscopy branch") {
        Tensor t = biased_total(losses(3, 7, 1), LossWeights(0.5));
        REQUIRE(t.value() == Catch::Approx(0.5 * 3 + 0.5 * 1).margin(1e-15));
    }
}

TEST_CASE("equal total worked values and identity with one-third weights") {
    REQUIRE(equal_total(losses(3, 3, 3)).value() == 3.0);
    REQUIRE(equal_total(losses(0, 0, 3)).value() == 1.0);

    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        double a = rng.uniform() * 3, b = rng.uniform() * 3, c = rng.uniform() * 3;
        BranchLosses l = losses(a, b, c);
        double eq = equal_total(l).value();
        double w3 = weighted_total(l, 1.0 / 3, 1.0 / 3, 1.0 / 3).value();
        REQUIRE(eq == Catch::Approx(w3).margin(1e-12));
    }
}

TEST_CASE("biased total is monotone in every branch loss") {
    Rng rng(8);
    for (double w : kSweep) {
        LossWeights lw(w);
        double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
        double base = biased_total(losses(a, b, c), lw).value();
        REQUIRE(biased_total(losses(a + 0.5, b, c), lw).value() >= base);
        REQUIRE(biased_total(losses(a, b + 0.5, c), lw).value() >= base);
        REQUIRE(biased_total(losses(a, b, c + 0.5), lw).value() >= base);
    }
}

TEST_CASE("gradient linearity: weighted total decomposes per branch") {
    // One shared parameter feeds all three branch losses; the gradient of the
    // weighted combination must equal the weighted sum of per-branch
    // gradients obtained from three separate backward passes.
    for (double w : {0.0, 0.1, 0.25, 0.5}) {
        LossWeights lw(w);
        Tensor x = rand_tensor({6}, 900, 1.0, true);
        Tensor ca = rand_tensor({6}, 901, 1.0, false);
        Tensor cb = rand_tensor({6}, 902, 1.0, false);
        Tensor cc = rand_tensor({6}, 903, 1.0, false);
        auto branch = [&](const Tensor& coef) {
            return sum(mul(gelu(x), coef));
        };

        auto grad_of = [&](auto&& fn) {
            Tape tape;
            TapeScope scope(tape);
            x.zero_grad();
            tape.backward(fn());
            return x.grad();
        };
        auto gc = grad_of([&] { return branch(ca); });
        auto gd = grad_of([&] { return branch(cb); });
        auto gf = grad_of([&] { return branch(cc); });
        auto gtotal = grad_of([&] {
            BranchLosses l{branch(ca), branch(cb), branch(cc)};
            return biased_total(l, lw);
        });
        for (std::size_t i = 0; i < 6; ++i) {
            double expect = lw.w_c() * gc[i] + lw.w_d() * gd[i] + lw.w_f() * gf[i];
            REQUIRE(std::abs(gtotal[i] - expect) < 1e-10);
        }
    }
}
