#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "taskbias/adam.hpp"
#include "taskbias/ops.hpp"
#include "taskbias/tensor.hpp"
#include "testutil.hpp"

using namespace taskbias;
using testutil::check_gradients;
using testutil::random_tensor;
using testutil::weighted_sum;

TEST_CASE("tensor construction and invariants") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.dim(0) == 2);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DataError);
    CHECK_THROWS_AS(Tensor::from_data({3}, {1, 2, 3}).item(), NumericError);
    CHECK(Tensor::scalar(4.5).item() == 4.5);
    CHECK(t.all_finite());
    t.ptr()[0] = std::nan("");
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(t.check_finite("test tensor"), NumericError);
}

TEST_CASE("softmax examples") {
    Tensor a = ops::softmax(Tensor::from_data({2}, {0, 0}));
    CHECK(a.ptr()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(a.ptr()[1] == doctest::Approx(0.5).epsilon(1e-12));

    // shift invariance
    Tensor b = ops::softmax(Tensor::from_data({3}, {1, 2, 3}));
    Tensor c = ops::softmax(Tensor::from_data({3}, {11, 12, 13}));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(b.ptr()[i] - c.ptr()[i]) < 1e-12);

    Tensor d = ops::softmax(Tensor::from_data({2}, {std::log(2.0), 0.0}));
    CHECK(d.ptr()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(d.ptr()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // rows sum to one
    Rng rng(11);
    Tensor r = random_tensor({4, 7}, rng, -30, 30, false);
    Tensor s = ops::softmax(r);
    for (int row = 0; row < 4; ++row) {
        double acc = 0;
        for (int j = 0; j < 7; ++j) {
            acc += s.ptr()[row * 7 + j];
            CHECK(s.ptr()[row * 7 + j] >= 0.0);
        }
        CHECK(std::abs(acc - 1.0) < 1e-9);
    }

    CHECK_THROWS_AS(ops::softmax(Tensor::zeros({3, 0})), DataError);
}

TEST_CASE("softmax shift invariance property") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({5}, rng, -10, 10, false);
        Tensor shifted = ops::add_scalar(x, 3.25);
        Tensor a = ops::softmax(x);
        Tensor b = ops::softmax(shifted);
        for (int i = 0; i < 5; ++i) CHECK(std::abs(a.ptr()[i] - b.ptr()[i]) < 1e-12);
    }
}

TEST_CASE("cross_entropy examples") {
    CHECK(ops::cross_entropy(Tensor::from_data({2}, {0, 0}), 0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // stability at extreme logits
    const double v = ops::cross_entropy(Tensor::from_data({2}, {1000, 0}), 0).item();
    CHECK(v >= 0.0);
    CHECK(v < 1e-9);

    CHECK_THROWS_AS(ops::cross_entropy(Tensor::from_data({3}, {1, 2, 3}), 3), DataError);

    // direct-formula oracle in extended precision
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits = random_tensor({5}, rng, -20, 20, false);
        const std::size_t k = trial % 5;
        long double z = 0.0L;
        for (int j = 0; j < 5; ++j) z += std::exp(static_cast<long double>(logits.ptr()[j]));
        const long double expected = -(static_cast<long double>(logits.ptr()[k]) - std::log(z));
        const double got = ops::cross_entropy(logits, k).item();
        CHECK(std::abs(got - static_cast<double>(expected)) < 1e-9);
        CHECK(got >= 0.0);

        // consistency with log softmax
        Tensor sm = ops::softmax(logits);
        CHECK(std::abs(got + std::log(sm.ptr()[k])) < 1e-9);
    }
}

TEST_CASE("gradient_of basics") {
    SUBCASE("linear function") {
        Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
        GradientTape tape;
        TapeScope scope(tape);
        Tensor loss = ops::sum(p);
        auto grads = tape.gradients(loss, {p});
        for (int i = 0; i < 3; ++i) CHECK(grads[0].ptr()[i] == 1.0);
    }
    SUBCASE("quadratic") {
        Tensor p = Tensor::from_data({2}, {1, 2}, true);
        GradientTape tape;
        TapeScope scope(tape);
        Tensor loss = ops::sum(ops::mul(p, p));
        auto grads = tape.gradients(loss, {p});
        CHECK(grads[0].ptr()[0] == doctest::Approx(2.0));
        CHECK(grads[0].ptr()[1] == doctest::Approx(4.0));
    }
    SUBCASE("non-scalar loss rejected") {
        Tensor p = Tensor::from_data({2}, {1, 2}, true);
        GradientTape tape;
        TapeScope scope(tape);
        Tensor y = ops::mul(p, p);
        CHECK_THROWS_AS(tape.gradients(y, {p}), NumericError);
    }
    SUBCASE("detached tensor rejected") {
        Tensor p = Tensor::from_data({2}, {1, 2}, false);
        GradientTape tape;
        TapeScope scope(tape);
        Tensor loss = ops::sum(p);
        CHECK_THROWS_AS(tape.gradients(loss, {p}), DataError);
    }
    SUBCASE("off-path parameter gets zeros") {
        Tensor p = Tensor::from_data({2}, {1, 2}, true);
        Tensor q = Tensor::from_data({3}, {1, 1, 1}, true);
        GradientTape tape;
        TapeScope scope(tape);
        Tensor loss = ops::sum(p);
        auto grads = tape.gradients(loss, {p, q});
        for (int i = 0; i < 3; ++i) CHECK(grads[1].ptr()[i] == 0.0);
    }
}

TEST_CASE("results are bitwise identical across worker counts") {
    Rng rng(71);
    Tensor a = random_tensor({64, 48}, rng);
    Tensor b = random_tensor({48, 96}, rng);
    set_workers(1);
    GradientTape t1;
    Tensor g1a, g1b, out1;
    {
        TapeScope scope(t1);
        out1 = ops::matmul(a, b);
        auto g = t1.gradients(ops::mean(ops::gelu(out1)), {a, b});
        g1a = g[0];
        g1b = g[1];
    }
    set_workers(4);
    GradientTape t2;
    {
        TapeScope scope(t2);
        Tensor out2 = ops::matmul(a, b);
        CHECK(testutil::bits_equal(out1, out2));
        auto g = t2.gradients(ops::mean(ops::gelu(out2)), {a, b});
        CHECK(testutil::bits_equal(g1a, g[0]));
        CHECK(testutil::bits_equal(g1b, g[1]));
    }
    set_workers(1);
}

TEST_CASE("tape replay is bit-identical") {
    Rng rng(23);
    Tensor a = random_tensor({4, 5}, rng);
    Tensor w = random_tensor({5, 3}, rng);
    GradientTape tape;
    TapeScope scope(tape);
    Tensor loss = ops::mean(ops::gelu(ops::matmul(a, w)));
    auto g1 = tape.gradients(loss, {a, w});
    auto g2 = tape.gradients(loss, {a, w});
    CHECK(testutil::bits_equal(g1[0], g2[0]));
    CHECK(testutil::bits_equal(g1[1], g2[1]));
}

TEST_CASE("finite differences: elementwise and reductions") {
    Rng rng(31);
    SUBCASE("add/sub/mul") {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({3, 4}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::mul(ops::add(a, b), ops::sub(a, b)), w); }, {a, b});
    }
    SUBCASE("scalar variants") {
        Tensor a = random_tensor({6}, rng);
        Tensor w = random_tensor({6}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::mul_scalar(ops::add_scalar(a, 0.7), -1.3), w); }, {a});
    }
    SUBCASE("scale_by learnable scalar") {
        Tensor a = random_tensor({5}, rng);
        Tensor s = Tensor::from_data({1}, {1.7}, true);
        Tensor w = random_tensor({5}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::scale_by(a, s), w); }, {a, s});
    }
    SUBCASE("relu away from the kink") {
        Tensor a = random_tensor({8}, rng);
        for (double& v : a.data())
            if (std::abs(v) < 0.2) v += v >= 0 ? 0.3 : -0.3;
        Tensor w = random_tensor({8}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::relu(a), w); }, {a});
    }
    SUBCASE("gelu and exp") {
        Tensor a = random_tensor({7}, rng, -2, 2);
        Tensor w = random_tensor({7}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::gelu(a), w); }, {a});
        check_gradients([&] { return weighted_sum(ops::exp(a), w); }, {a});
    }
    SUBCASE("sum and mean") {
        Tensor a = random_tensor({9}, rng);
        check_gradients([&] { return ops::sum(ops::mul(a, a)); }, {a});
        check_gradients([&] { return ops::mean(ops::mul(a, a)); }, {a});
    }
}

TEST_CASE("finite differences: matmul family") {
    Rng rng(37);
    SUBCASE("matmul") {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        Tensor w = random_tensor({3, 2}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::matmul(a, b), w); }, {a, b});
    }
    SUBCASE("matmul_nt") {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({5, 4}, rng);
        Tensor w = random_tensor({3, 5}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::matmul_nt(a, b), w); }, {a, b});
    }
    SUBCASE("transpose") {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor w = random_tensor({4, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::transpose(a), w); }, {a});
    }
    SUBCASE("add_rowwise") {
        Tensor a = random_tensor({4, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor w = random_tensor({4, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::add_rowwise(a, b), w); }, {a, b});
    }
    SUBCASE("shape errors") {
        CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DataError);
        CHECK_THROWS_AS(ops::matmul_nt(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), DataError);
    }
}

TEST_CASE("finite differences: normalization and losses") {
    Rng rng(41);
    SUBCASE("layer_norm") {
        Tensor x = random_tensor({3, 6}, rng);
        Tensor g = random_tensor({6}, rng, 0.5, 1.5);
        Tensor b = random_tensor({6}, rng);
        Tensor w = random_tensor({3, 6}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::layer_norm(x, g, b), w); }, {x, g, b});
    }
    SUBCASE("l2_normalize_rows") {
        Tensor x = random_tensor({3, 5}, rng, 0.5, 1.5);
        Tensor w = random_tensor({3, 5}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::l2_normalize_rows(x), w); }, {x});
        CHECK_THROWS_AS(ops::l2_normalize_rows(Tensor::zeros({1, 4})), NumericError);
    }
    SUBCASE("softmax") {
        Tensor x = random_tensor({2, 5}, rng, -3, 3);
        Tensor w = random_tensor({2, 5}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::softmax(x), w); }, {x});
    }
    SUBCASE("cross_entropy") {
        Tensor x = random_tensor({6}, rng, -3, 3);
        check_gradients([&] { return ops::cross_entropy(x, 2); }, {x});
    }
    SUBCASE("cross_entropy_rows") {
        Tensor x = random_tensor({3, 4}, rng, -3, 3);
        check_gradients([&] { return ops::cross_entropy_rows(x, {1, 0, 3}); }, {x});
    }
}

TEST_CASE("finite differences: data movement") {
    Rng rng(43);
    SUBCASE("concat/slice/tile") {
        Tensor a = random_tensor({2, 3}, rng);
        Tensor b = random_tensor({3, 3}, rng);
        Tensor w = random_tensor({5, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::concat_rows({a, b}), w); }, {a, b});
        Tensor w2 = random_tensor({2, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::slice_rows(b, 1, 3), w2); }, {b});
        Tensor w3 = random_tensor({6, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::tile_rows(a, 3), w3); }, {a});
    }
    SUBCASE("concat_per_example and add_positional") {
        Tensor a = random_tensor({4, 3}, rng);  // 2 examples x 2 rows
        Tensor b = random_tensor({6, 3}, rng);  // 2 examples x 3 rows
        Tensor w = random_tensor({10, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::concat_per_example(a, b, 2, 3), w); }, {a, b});
        Tensor pos = random_tensor({3, 3}, rng);
        Tensor w2 = random_tensor({6, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::add_positional(b, pos, 2), w2); }, {b, pos});
    }
    SUBCASE("gather_rows") {
        Tensor x = random_tensor({5, 3}, rng);
        Tensor w = random_tensor({4, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::gather_rows(x, {0, 2, 2, 4}), w); }, {x});
        CHECK_THROWS_AS(ops::gather_rows(x, {5}), DataError);
    }
    SUBCASE("block_dot") {
        Tensor rows = random_tensor({3, 4}, rng);
        Tensor opts = random_tensor({6, 4}, rng);
        Tensor w = random_tensor({3, 2}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::block_dot(rows, opts, 2), w); }, {rows, opts});
    }
}

TEST_CASE("finite differences: attention pieces") {
    Rng rng(47);
    const std::size_t batch = 2, tokens = 3, heads = 2, dh = 2, width = heads * dh;
    Tensor x = random_tensor({batch * tokens, width}, rng);
    Tensor w = random_tensor({batch * heads, tokens, dh}, rng, -1, 1, false);
    check_gradients([&] { return weighted_sum(ops::split_heads(x, batch, tokens, heads), w); }, {x});

    Tensor q = random_tensor({batch * heads, tokens, dh}, rng);
    Tensor k = random_tensor({batch * heads, tokens, dh}, rng);
    Tensor v = random_tensor({batch * heads, tokens, dh}, rng);
    Tensor wp = random_tensor({batch * heads, tokens, tokens}, rng, -1, 1, false);
    SUBCASE("attention_probs unmasked") {
        check_gradients([&] { return weighted_sum(ops::attention_probs(q, k, 0.7, {}, heads), wp); }, {q, k});
    }
    SUBCASE("attention_probs masked") {
        check_gradients([&] { return weighted_sum(ops::attention_probs(q, k, 0.7, {3, 2}, heads), wp); }, {q, k});
    }
    SUBCASE("attention_apply and merge") {
        Tensor probs = ops::softmax(random_tensor({batch * heads, tokens, tokens}, rng));
        probs.set_requires_grad(true);
        Tensor wo = random_tensor({batch * tokens, width}, rng, -1, 1, false);
        check_gradients(
            [&] { return weighted_sum(ops::merge_heads(ops::attention_apply(probs, v), batch, tokens, heads), wo); },
            {probs, v});
    }
    SUBCASE("attention rows are stochastic") {
        Tensor probs = ops::attention_probs(q, k, 0.7, {3, 2}, heads);
        for (std::size_t g = 0; g < batch * heads; ++g)
            for (std::size_t t = 0; t < tokens; ++t) {
                double acc = 0;
                for (std::size_t u = 0; u < tokens; ++u) acc += probs.ptr()[(g * tokens + t) * tokens + u];
                CHECK(std::abs(acc - 1.0) < 1e-9);
            }
    }
}

TEST_CASE("finite differences: border prompt and conv blocks") {
    Rng rng(53);
    SUBCASE("add_border_clamped") {
        const std::size_t s = 6;
        Tensor img = random_tensor({2, s, s, 3}, rng, 0.25, 0.75, false);
        const std::size_t nb = ops::border_positions(s, 1).size();
        CHECK(nb == 4 * s - 4);
        Tensor phi = random_tensor({nb, 3}, rng, -0.05, 0.05);
        Tensor w = random_tensor({2, s, s, 3}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::add_border_clamped(img, phi, s, 1), w); }, {phi});
    }
    SUBCASE("im2col3x3 + matmul as convolution") {
        const std::size_t b = 1, h = 4, w = 4, c = 2, kout = 3;
        Tensor x = random_tensor({b * h * w, c}, rng);
        Tensor kernel = random_tensor({9 * c, kout}, rng);
        Tensor ww = random_tensor({b * h * w, kout}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::matmul(ops::im2col3x3(x, b, h, w, c), kernel), ww); },
                        {x, kernel});
    }
    SUBCASE("maxpool2x2") {
        Tensor x = random_tensor({1 * 4 * 4, 2}, rng);
        Tensor w = random_tensor({1 * 2 * 2, 2}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::maxpool2x2(x, 1, 4, 4, 2), w); }, {x});
    }
    SUBCASE("global_avg_pool") {
        Tensor x = random_tensor({1 * 9, 2}, rng);
        Tensor w = random_tensor({1, 2}, rng, -1, 1, false);
        check_gradients([&] { return weighted_sum(ops::global_avg_pool(x, 1, 9, 2), w); }, {x});
    }
}

TEST_CASE("adam optimizer") {
    SUBCASE("first step analytic") {
        Tensor p = Tensor::scalar(0.0, true);
        Tensor g = Tensor::scalar(1.0);
        AdamState st;
        st.lr = 1e-4;
        std::vector<Tensor> params{p}, grads{g};
        adam_step(params, grads, st);
        CHECK(std::abs(p.item() - (-1e-4)) < 1e-7);
        CHECK(st.t == 1);
    }
    SUBCASE("zero gradient is a fixed point") {
        Tensor p = Tensor::from_data({3}, {1, -2, 3}, true);
        Tensor g = Tensor::zeros({3});
        AdamState st;
        std::vector<Tensor> params{p}, grads{g};
        Tensor before = p.clone();
        for (int i = 0; i < 5; ++i) adam_step(params, grads, st);
        CHECK(testutil::bits_equal(p, before));
        CHECK(st.t == 5);
    }
    SUBCASE("descent on a scalar quadratic") {
        Tensor p = Tensor::scalar(1.0, true);
        AdamState st;
        st.lr = 1e-2;
        std::vector<Tensor> params{p};
        double prev = std::abs(p.item());
        for (int i = 0; i < 100; ++i) {
            GradientTape tape;
            TapeScope scope(tape);
            Tensor loss = ops::mul(p, p);
            auto grads = tape.gradients(ops::sum(loss), {p});
            adam_step(params, grads, st);
            const double cur = std::abs(p.item());
            CHECK(cur < prev);
            prev = cur;
        }
    }
    SUBCASE("shape mismatch and non-finite gradient rejected") {
        Tensor p = Tensor::from_data({2}, {1, 2}, true);
        AdamState st;
        std::vector<Tensor> params{p};
        std::vector<Tensor> bad_shape{Tensor::zeros({3})};
        CHECK_THROWS_AS(adam_step(params, bad_shape, st), DataError);
        std::vector<Tensor> bad_value{Tensor::from_data({2}, {1.0, std::nan("")})};
        CHECK_THROWS_AS(adam_step(params, bad_value, st), NumericError);
    }
}
