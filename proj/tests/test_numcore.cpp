#include "catch2/catch_amalgamated.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "pemm/gradcheck.hpp"
#include "pemm/io.hpp"
#include "pemm/rng.hpp"
#include "pemm/tensor.hpp"

#include "helpers.hpp"

using namespace pemm;
using testutil::rand_tensor;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

/// Scalar probe: sum(out ⊙ coef) with a fixed gradient-free coefficient
/// tensor, so upstream gradients reaching the op under test are nontrivial.
Tensor probe(const Tensor& out, const Tensor& coef) {
    return sum(mul(out, coef));
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

TEST_CASE("tensor construction and invariants") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.shape() == Shape{2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.at(1, 2) == 6.0);
    REQUIRE_FALSE(t.requires_grad());
    REQUIRE(t.is_leaf());

    REQUIRE_THROWS_AS(Tensor::from({2, 3}, {1, 2}), ShapeError);
    REQUIRE_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
    REQUIRE_THROWS_AS(Tensor().values(), ContractError);

    Tensor g = Tensor::zeros({4}, true);
    REQUIRE(g.grad().size() == 4);
    Tensor plain = Tensor::zeros({4});
    REQUIRE_THROWS_AS(plain.grad(), ContractError);
}

TEST_CASE("matmul values") {
    Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor prod = matmul(eye, m);
    REQUIRE(prod.values() == m.values());

    Tensor a = Tensor::matrix({{1, 2}});
    Tensor b = Tensor::matrix({{3}, {4}});
    REQUIRE(matmul(a, b).value() == 11.0);

    Tensor bad = Tensor::matrix({{1, 2, 3}});
    REQUIRE_THROWS_MATCHES(matmul(a, bad), ShapeError,
                           MessageMatches(ContainsSubstring("[1 x 2]") &&
                                          ContainsSubstring("[1 x 3]")));
}

TEST_CASE("conv2d values and geometry errors") {
    SECTION("1x1 identity kernel") {
        Tensor x = rand_tensor({1, 4, 4}, 11, 1.0, false);
        Tensor w = Tensor::from({1, 1, 1, 1}, {1.0});
        REQUIRE(conv2d(x, w).values() == x.values());
    }
    SECTION("all-ones 3x3 on all-ones 3x3 input") {
        Tensor x = Tensor::ones({1, 3, 3});
        Tensor w = Tensor::ones({1, 1, 3, 3});
        Tensor y = conv2d(x, w);
        REQUIRE(y.shape() == Shape{1, 1, 1});
        REQUIRE(y.value() == 9.0);
    }
    SECTION("same padding preserves spatial dims") {
        Tensor x = rand_tensor({2, 6, 6}, 3, 1.0, false);
        Tensor w = rand_tensor({5, 2, 3, 3}, 4, 1.0, false);
        REQUIRE(conv2d(x, w, 1, 1).shape() == Shape{5, 6, 6});
    }
    SECTION("geometry rejections") {
        Tensor x = Tensor::ones({1, 6, 6});
        REQUIRE_THROWS_AS(conv2d(x, Tensor::ones({1, 1, 2, 2})), GeometryError);
        REQUIRE_THROWS_AS(conv2d(x, Tensor::ones({1, 1, 3, 3}), 2, 0),
                          GeometryError);
        REQUIRE_THROWS_AS(conv2d(x, Tensor::ones({1, 1, 7, 7})), GeometryError);
        REQUIRE_THROWS_AS(conv2d(x, Tensor::ones({1, 2, 3, 3})), ShapeError);
    }
}

TEST_CASE("softmax_rows values") {
    Tensor x = Tensor::matrix({{0, 0}, {1, 0}});
    Tensor y = softmax_rows(x);
    REQUIRE(y.at(0, 0) == Catch::Approx(0.5).margin(1e-15));
    const double e = std::exp(1.0);
    REQUIRE(y.at(1, 0) == Catch::Approx(e / (e + 1)).margin(1e-15));
    REQUIRE(y.at(1, 1) == Catch::Approx(1 / (e + 1)).margin(1e-15));

    SECTION("shift invariance") {
        Tensor a = rand_tensor({3, 5}, 7, 1.0, false);
        Tensor shifted = add(a, Tensor::full({3, 5}, 123.456));
        Tensor ya = softmax_rows(a);
        Tensor yb = softmax_rows(shifted);
        for (std::size_t i = 0; i < ya.size(); ++i)
            REQUIRE(ya.at(i) == Catch::Approx(yb.at(i)).margin(1e-12));
    }
    SECTION("stability at magnitude 1e3") {
        Tensor big = rand_tensor({8, 6}, 9, 1e3, false);
        Tensor y2 = softmax_rows(big);
        for (std::size_t r = 0; r < 8; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 6; ++c) {
                double p = y2.at(r, c);
                REQUIRE(p >= 0.0);
                s += p;
            }
            REQUIRE(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("gelu matches the exact normal-CDF form") {
    Tensor x = Tensor::vec({0.0, 1.0, -1.0});
    Tensor y = gelu(x);
    REQUIRE(y.at(0) == 0.0);
    REQUIRE(y.at(1) == Catch::Approx(0.8413447460685429).margin(1e-15));
    REQUIRE(y.at(2) == Catch::Approx(-0.15865525393145707).margin(1e-15));
}

TEST_CASE("pooling and layout ops") {
    Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    REQUIRE(avgpool2(x).value() == 2.5);
    REQUIRE(global_avg_pool(x).at(0) == 2.5);
    REQUIRE_THROWS_AS(avgpool2(Tensor::ones({1, 3, 4})), GeometryError);

    Tensor img = Tensor::from({2, 1, 2}, {1, 2, 3, 4}); // ch0=[1,2], ch1=[3,4]
    Tensor tok = tokens_from_chw(img);
    REQUIRE(tok.shape() == Shape{2, 2});
    REQUIRE(tok.values() == std::vector<double>{1, 3, 2, 4});
    Tensor back = chw_from_tokens(tok, 1, 2);
    REQUIRE(back.values() == img.values());
    REQUIRE_THROWS_AS(chw_from_tokens(tok, 3, 1), ShapeError);
}

TEST_CASE("batch assembly ops") {
    Tensor r0 = Tensor::vec({1, 2});
    Tensor r1 = Tensor::vec({3, 4});
    std::vector<Tensor> rows{r0, r1};
    Tensor stacked = stack_rows(rows);
    REQUIRE(stacked.shape() == Shape{2, 2});
    REQUIRE(stacked.values() == std::vector<double>{1, 2, 3, 4});

    Tensor a = Tensor::matrix({{1}, {2}});
    Tensor b = Tensor::matrix({{3}, {4}});
    REQUIRE(concat_cols(a, b).values() == std::vector<double>{1, 3, 2, 4});

    Tensor m = Tensor::matrix({{0, 0}, {1, 1}});
    Tensor bias = Tensor::vec({10, 20});
    REQUIRE(add_rowvec(m, bias).values() == std::vector<double>{10, 20, 11, 21});
}

TEST_CASE("softmax_cross_entropy values") {
    Tensor uniform = Tensor::matrix({{0, 0}});
    std::vector<int> lab{0};
    REQUIRE(softmax_cross_entropy(uniform, lab).value() ==
            Catch::Approx(std::log(2.0)).margin(1e-15));

    Tensor confident = Tensor::matrix({{100, 0}});
    REQUIRE(softmax_cross_entropy(confident, lab).value() < 1e-12);

    std::vector<int> bad{5};
    REQUIRE_THROWS_AS(softmax_cross_entropy(uniform, bad), DataError);
}

// ---------------------------------------------------------------------------
// Tape semantics
// ---------------------------------------------------------------------------

TEST_CASE("backward on sum gives ones; on sum(x*x) gives 2x") {
    Tensor x = rand_tensor({3, 4}, 21, 1.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(x));
    }
    for (double g : x.grad()) REQUIRE(g == 1.0);

    x.zero_grad();
    tape.clear();
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(x, x)));
    }
    for (std::size_t i = 0; i < x.size(); ++i)
        REQUIRE(x.grad()[i] == Catch::Approx(2 * x.at(i)).margin(1e-15));
}

TEST_CASE("leaf gradients accumulate; intermediates reset per backward") {
    Tensor x = rand_tensor({5}, 22, 1.0, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(mul(x, x));
    tape.backward(loss);
    std::vector<double> once = x.grad();
    tape.backward(loss);
    for (std::size_t i = 0; i < x.size(); ++i)
        REQUIRE(x.grad()[i] == Catch::Approx(2 * once[i]).margin(1e-12));

    x.zero_grad();
    for (double g : x.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("backward contract errors") {
    Tensor x = rand_tensor({2, 2}, 23, 1.0, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor nonscalar = mul(x, x);
    REQUIRE_THROWS_AS(tape.backward(nonscalar), ContractError);
    Tensor untracked = sum(rand_tensor({2}, 1, 1.0, false));
    REQUIRE_THROWS_AS(tape.backward(untracked), ContractError);
}

TEST_CASE("ops outside a tape scope do not track gradients") {
    Tensor x = rand_tensor({4}, 24, 1.0, true);
    Tensor y = mul(x, x);
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(pemm::active_tape() == nullptr);
    REQUIRE_THROWS_AS(pemm::backward(y), StateError);
}

TEST_CASE("forward evaluation is bit-identical across runs") {
    auto run = [](std::uint64_t seed) {
        Tensor x = rand_tensor({2, 6, 6}, seed, 1.0, false);
        Tensor w = rand_tensor({3, 2, 3, 3}, seed + 1, 0.5, false);
        Tensor h = gelu(conv2d(x, w, 1, 1));
        Tensor t = softmax_rows(tokens_from_chw(avgpool2(h)));
        return sum(t).value();
    };
    for (std::uint64_t s = 0; s < 5; ++s) {
        double a = run(s), b = run(s);
        REQUIRE(std::memcmp(&a, &b, sizeof a) == 0);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checks: every differentiable op, 10 seeds, <= 64 elements
// ---------------------------------------------------------------------------

TEST_CASE("grad_check: trivial and closed-form cases") {
    Tensor x = rand_tensor({4, 4}, 31, 1.0, true);
    REQUIRE(grad_check([&] { return sum(x); }, x) < 1e-8);
    REQUIRE(grad_check([&] { return sum(mul(x, x)); }, x) < 1e-8);
}

TEST_CASE("grad_check: all differentiable ops at rtol 1e-4") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        DYNAMIC_SECTION("seed " << seed) {
            const std::uint64_t s = seed * 1000;

            { // add / sub / mul / scale
                Tensor a = rand_tensor({3, 5}, s + 1);
                Tensor b = rand_tensor({3, 5}, s + 2);
                Tensor coef = rand_tensor({3, 5}, s + 3, 1.0, false);
                auto f = [&] {
                    Tensor y = add(mul(a, b), scale(sub(a, b), 0.7));
                    return probe(y, coef);
                };
                REQUIRE(grad_check(f, a) < 1e-4);
                REQUIRE(grad_check(f, b) < 1e-4);
            }
            { // matmul + transpose
                Tensor a = rand_tensor({4, 3}, s + 4);
                Tensor b = rand_tensor({3, 5}, s + 5);
                Tensor coef = rand_tensor({5, 4}, s + 6, 1.0, false);
                auto f = [&] { return probe(transpose(matmul(a, b)), coef); };
                REQUIRE(grad_check(f, a) < 1e-4);
                REQUIRE(grad_check(f, b) < 1e-4);
            }
            { // conv2d, padded and strided, both inputs
                Tensor x = rand_tensor({2, 5, 5}, s + 7);
                Tensor w = rand_tensor({2, 2, 3, 3}, s + 8, 0.5);
                Tensor coef = rand_tensor({2, 5, 5}, s + 9, 1.0, false);
                auto f = [&] { return probe(conv2d(x, w, 1, 1), coef); };
                REQUIRE(grad_check(f, x) < 1e-4);
                REQUIRE(grad_check(f, w) < 1e-4);
                Tensor coef2 = rand_tensor({2, 3, 3}, s + 10, 1.0, false);
                auto fs = [&] { return probe(conv2d(x, w, 2, 1), coef2); };
                REQUIRE(grad_check(fs, x) < 1e-4);
                REQUIRE(grad_check(fs, w) < 1e-4);
            }
            { // add_channel_bias + avgpool2 + global_avg_pool + gelu
                Tensor x = rand_tensor({3, 4, 4}, s + 11);
                Tensor bias = rand_tensor({3}, s + 12);
                Tensor coef = rand_tensor({3}, s + 13, 1.0, false);
                auto f = [&] {
                    Tensor y = gelu(add_channel_bias(x, bias));
                    return probe(global_avg_pool(avgpool2(y)), coef);
                };
                REQUIRE(grad_check(f, x) < 1e-4);
                REQUIRE(grad_check(f, bias) < 1e-4);
            }
            { // softmax_rows (through a non-uniform probe)
                Tensor x = rand_tensor({4, 6}, s + 14);
                Tensor coef = rand_tensor({4, 6}, s + 15, 1.0, false);
                auto f = [&] { return probe(softmax_rows(x), coef); };
                REQUIRE(grad_check(f, x) < 1e-4);
            }
            { // layout ops and concatenation
                Tensor img = rand_tensor({3, 2, 4}, s + 16);
                Tensor coefA = rand_tensor({8, 6}, s + 17, 1.0, false);
                auto f = [&] {
                    Tensor tok = tokens_from_chw(img);            // [8 x 3]
                    Tensor round = tokens_from_chw(chw_from_tokens(tok, 2, 4));
                    return probe(concat_cols(tok, round), coefA); // [8 x 6]
                };
                REQUIRE(grad_check(f, img) < 1e-4);
            }
            { // stack_rows + add_rowvec
                Tensor r0 = rand_tensor({4}, s + 18);
                Tensor r1 = rand_tensor({4}, s + 19);
                Tensor bias = rand_tensor({4}, s + 20);
                Tensor coef = rand_tensor({2, 4}, s + 21, 1.0, false);
                auto f = [&] {
                    std::vector<Tensor> rows{r0, r1};
                    return probe(add_rowvec(stack_rows(rows), bias), coef);
                };
                REQUIRE(grad_check(f, r0) < 1e-4);
                REQUIRE(grad_check(f, r1) < 1e-4);
                REQUIRE(grad_check(f, bias) < 1e-4);
            }
            { // softmax_cross_entropy
                Tensor logits = rand_tensor({4, 3}, s + 22, 2.0);
                std::vector<int> labels = testutil::rand_labels(4, 3, s + 23);
                auto f = [&] { return softmax_cross_entropy(logits, labels); };
                REQUIRE(grad_check(f, logits) < 1e-4);
            }
        }
    }
}

TEST_CASE("grad_check flags a corrupted gradient") {
    Tensor x = rand_tensor({3, 3}, 41, 1.0, true);
    auto wrong_double = [](const Tensor& in) {
        bool rg = active_tape() && in.requires_grad();
        Tensor out = Tensor::op_node(in.shape(), rg);
        for (std::size_t i = 0; i < in.size(); ++i)
            out.values()[i] = 2.0 * in.at(i);
        if (rg)
            active_tape()->record(out, [in, out]() mutable {
                auto& g = in.grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += 1.9 * out.grad()[i]; // deliberately wrong factor
            });
        return out;
    };
    double err = grad_check([&] { return sum(wrong_double(x)); }, x);
    REQUIRE(err > 1e-2);
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

TEST_CASE("rng streams are deterministic and well-ranged") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng r(7);
    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        REQUIRE(r.below(17) < 17);
    }
    REQUIRE_THROWS_AS(r.below(0), ContractError);

    double mean = 0, var = 0;
    const int n = 20000;
    Rng g(99);
    std::vector<double> zs(n);
    for (double& z : zs) {
        z = g.normal();
        mean += z;
    }
    mean /= n;
    for (double z : zs) var += (z - mean) * (z - mean);
    var /= n - 1;
    REQUIRE(std::abs(mean) < 0.05);
    REQUIRE(var == Catch::Approx(1.0).margin(0.06));
}

TEST_CASE("mix_seed separates streams; shuffle is a seeded permutation") {
    REQUIRE(mix_seed(1, 0) != mix_seed(1, 1));
    REQUIRE(mix_seed(1, 0) != mix_seed(2, 0));

    Rng r1(5), r2(5);
    auto p1 = shuffled_indices(50, r1);
    auto p2 = shuffled_indices(50, r2);
    REQUIRE(p1 == p2);
    std::vector<bool> seen(50, false);
    for (std::size_t v : p1) {
        REQUIRE(v < 50);
        REQUIRE_FALSE(seen[v]);
        seen[v] = true;
    }
}

// ---------------------------------------------------------------------------
// Binary tensor container and digests
// ---------------------------------------------------------------------------

TEST_CASE("tensor serialization round-trips bitwise") {
    Tensor t = rand_tensor({3, 4, 5}, 55, 3.0, false);
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::string bytes = os.str();
    REQUIRE(bytes.size() == tensor_file_size(t.shape()));
    REQUIRE(bytes.substr(0, 4) == "PEMT");

    std::istringstream is(bytes, std::ios::binary);
    Tensor u = read_tensor(is);
    REQUIRE(u.shape() == t.shape());
    REQUIRE(std::memcmp(u.values().data(), t.values().data(),
                        t.size() * sizeof(double)) == 0);
}

TEST_CASE("tensor deserialization rejects damage") {
    Tensor t = Tensor::ones({2, 2});
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::string bytes = os.str();

    std::string corrupted = bytes;
    corrupted[0] = 'X';
    std::istringstream bad(corrupted, std::ios::binary);
    REQUIRE_THROWS_AS(read_tensor(bad), FormatError);

    std::istringstream truncated(bytes.substr(0, bytes.size() - 3),
                                 std::ios::binary);
    REQUIRE_THROWS_AS(read_tensor(truncated), FormatError);
}

TEST_CASE("fnv-1a 64 matches published vectors") {
    REQUIRE(fnv1a64("") == 0xcbf29ce484222325ULL);
    REQUIRE(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    REQUIRE(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    REQUIRE(hex_u64(0xcbf29ce484222325ULL) == "cbf29ce484222325");
}
