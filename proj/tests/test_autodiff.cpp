#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atdt/gradcheck.hpp>
#include <atdt/ops.hpp>
#include <atdt/tensor.hpp>

#include "oracles.hpp"

using namespace atdt;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("elementwise forward values") {
    Tape<double> tape;
    Tensor<double> x(std::vector<int>{3}, {-1.0, 0.0, 2.0});

    SUBCASE("relu") {
        Tensor<double> y = relu(tape, x);
        CHECK(y.data == std::vector<double>{0.0, 0.0, 2.0});
    }
    SUBCASE("add zero is bit-identical") {
        Tensor<double> z(std::vector<int>{3}, 0.0);
        Tensor<double> y = add(tape, x, z);
        CHECK(y.data == x.data);
    }
    SUBCASE("abs / square / sub / mul") {
        CHECK(abs_op(tape, x).data == std::vector<double>{1.0, 0.0, 2.0});
        CHECK(square(tape, x).data == std::vector<double>{1.0, 0.0, 4.0});
        Tensor<double> y(std::vector<int>{3}, {2.0, 3.0, 4.0});
        CHECK(sub(tape, y, x).data == std::vector<double>{3.0, 3.0, 2.0});
        CHECK(mul(tape, y, x).data == std::vector<double>{-2.0, 0.0, 8.0});
    }
    SUBCASE("scalar ops") {
        CHECK(add_scalar(tape, x, 1.5).data == std::vector<double>{0.5, 1.5, 3.5});
        CHECK(scalar_mul(tape, x, -2.0).data == std::vector<double>{2.0, -0.0, -4.0});
    }
    SUBCASE("shape mismatch rejected") {
        Tensor<double> y(std::vector<int>{2}, 0.0);
        CHECK_THROWS_AS((void)add(tape, x, y), Error);
    }
}

TEST_CASE("log and sqrt clamp near zero") {
    Tape<double> tape;
    Tensor<double> x(std::vector<int>{2}, {1e-30, 4.0});
    Tensor<double> l = log_op(tape, x);
    CHECK(l.data[0] == doctest::Approx(std::log(1e-12)));
    CHECK(l.data[1] == doctest::Approx(std::log(4.0)));
    Tensor<double> s = sqrt_op(tape, x);
    CHECK(s.data[1] == doctest::Approx(2.0));
}

TEST_CASE("backward basics") {
    SUBCASE("sum gradient is ones") {
        Tape<double> tape;
        Tensor<double> x = make_leaf(tape, {3}, {1.0, 2.0, 3.0});
        Tensor<double> s = sum(tape, x);
        tape.backward(s);
        CHECK(tape.grad(x.node) == std::vector<double>{1.0, 1.0, 1.0});
    }
    SUBCASE("unreachable leaf keeps zero gradient") {
        Tape<double> tape;
        Tensor<double> x = make_leaf(tape, {2}, {1.0, 2.0});
        Tensor<double> w = make_leaf(tape, {2}, {5.0, 6.0});
        Tensor<double> s = sum(tape, square(tape, x));
        tape.backward(s);
        CHECK(tape.grad(w.node) == std::vector<double>{0.0, 0.0});
        CHECK(tape.grad(x.node) == std::vector<double>{2.0, 4.0});
    }
    SUBCASE("backward twice without re-recording is an error") {
        Tape<double> tape;
        Tensor<double> x = make_leaf(tape, {2}, {1.0, 2.0});
        Tensor<double> s = sum(tape, x);
        tape.backward(s);
        CHECK_THROWS_AS(tape.backward(s), Error);
        tape.clear();
        CHECK(tape.size() == 0);
    }
    SUBCASE("non-scalar loss rejected") {
        Tape<double> tape;
        Tensor<double> x = make_leaf(tape, {2}, {1.0, 2.0});
        CHECK_THROWS_AS(tape.backward(x), Error);
    }
}

TEST_CASE("gradient checks for elementwise ops and reductions") {
    Rng rng(7);
    // sampled away from relu/abs kinks: magnitudes in [0.2, 1.2]
    Tensor<double> x(std::vector<int>{2, 3});
    for (auto& v : x.data) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 1.2);
    Tensor<double> y = random_tensor({2, 3}, rng, 0.3, 1.5);

    auto check_fn = [&](auto f, double tol = 1e-6) {
        auto rep = finite_difference_check(f, {{"x", &x}, {"y", &y}}, 1e-5, tol);
        CAPTURE(rep.max_rel_err);
        CHECK(rep.pass);
    };

    check_fn([&](Tape<double>& t) { return mean(t, mul(t, x, y)); });
    check_fn([&](Tape<double>& t) { return sum(t, square(t, sub(t, x, y))); });
    check_fn([&](Tape<double>& t) { return mean(t, relu(t, x)); });
    check_fn([&](Tape<double>& t) { return mean(t, abs_op(t, x)); });
    check_fn([&](Tape<double>& t) { return mean(t, log_op(t, y)); });
    check_fn([&](Tape<double>& t) { return mean(t, sqrt_op(t, y)); });
    check_fn([&](Tape<double>& t) { return mean(t, sigmoid(t, x)); });
    check_fn([&](Tape<double>& t) { return mean(t, softplus(t, x)); });
    check_fn([&](Tape<double>& t) { return scalar_mul(t, mean(t, add_scalar(t, x, 0.7)), 3.0); });
}

TEST_CASE("d/dx square(x) at x=3 is 6") {
    Tensor<double> x(std::vector<int>{1}, {3.0});
    auto rep = finite_difference_check(
        [&](Tape<double>& t) { return sum(t, square(t, x)); }, {{"x", &x}}, 1e-4, 1e-6);
    CHECK(rep.pass);
    Tape<double> tape;
    track(tape, x);
    Tensor<double> s = sum(tape, square(tape, x));
    tape.backward(s);
    CHECK(tape.grad(x.node)[0] == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("conv2d forward against hand values") {
    Tape<double> tape;
    SUBCASE("3x3 ones, padding 1: center sums 9") {
        Tensor<double> in(std::vector<int>{1, 1, 3, 3}, 1.0);
        Tensor<double> w(std::vector<int>{1, 1, 3, 3}, 1.0);
        Tensor<double> b(std::vector<int>{1}, 0.0);
        Tensor<double> y = conv2d(tape, in, w, b, 1, 1, 1);
        CHECK(y.shape == std::vector<int>{1, 1, 3, 3});
        CHECK(y.at4(0, 0, 1, 1) == doctest::Approx(9.0));
        CHECK(y.at4(0, 0, 0, 0) == doctest::Approx(4.0));
        CHECK(y.at4(0, 0, 0, 1) == doctest::Approx(6.0));
    }
    SUBCASE("identity kernel reproduces the input") {
        Rng rng(3);
        Tensor<double> in = random_tensor({2, 1, 4, 5}, rng);
        Tensor<double> w(std::vector<int>{1, 1, 3, 3}, 0.0);
        w.at4(0, 0, 1, 1) = 1.0;
        Tensor<double> b(std::vector<int>{1}, 0.0);
        Tensor<double> y = conv2d(tape, in, w, b, 1, 1, 1);
        for (std::size_t i = 0; i < in.numel(); ++i) CHECK(y.data[i] == doctest::Approx(in.data[i]));
    }
    SUBCASE("bias is added per output channel") {
        Tensor<double> in(std::vector<int>{1, 1, 3, 3}, 0.0);
        Tensor<double> w(std::vector<int>{2, 1, 1, 1}, 0.0);
        Tensor<double> b(std::vector<int>{2}, {1.5, -2.5});
        Tensor<double> y = conv2d(tape, in, w, b);
        CHECK(y.at4(0, 0, 0, 0) == 1.5);
        CHECK(y.at4(0, 1, 2, 2) == -2.5);
    }
    SUBCASE("bad shapes rejected") {
        Tensor<double> in(std::vector<int>{1, 2, 4, 4}, 1.0);
        Tensor<double> w_even(std::vector<int>{1, 2, 2, 2}, 1.0);
        Tensor<double> w_chan(std::vector<int>{1, 3, 3, 3}, 1.0);
        Tensor<double> b(std::vector<int>{1}, 0.0);
        CHECK_THROWS_AS((void)conv2d(tape, in, w_even, b), Error);
        CHECK_THROWS_AS((void)conv2d(tape, in, w_chan, b), Error);
    }
}

TEST_CASE("conv2d matches the naive oracle across configurations") {
    Rng rng(11);
    struct Cfg {
        int B, Cin, H, W, Cout, k, stride, dilation, padding;
    };
    const Cfg cfgs[] = {
        {1, 1, 6, 6, 1, 3, 1, 1, 1}, {2, 3, 8, 7, 4, 3, 1, 1, 0}, {2, 3, 8, 8, 4, 3, 2, 1, 1},
        {1, 2, 9, 9, 3, 3, 1, 2, 2}, {2, 2, 8, 8, 2, 5, 2, 1, 2}, {1, 4, 7, 5, 2, 3, 3, 1, 1},
    };
    for (const Cfg& c : cfgs) {
        CAPTURE(c.stride);
        CAPTURE(c.dilation);
        CAPTURE(c.padding);
        Tensor<double> in = random_tensor({c.B, c.Cin, c.H, c.W}, rng);
        Tensor<double> w = random_tensor({c.Cout, c.Cin, c.k, c.k}, rng);
        Tensor<double> b = random_tensor({c.Cout}, rng);
        Tape<double> tape;
        Tensor<double> y = conv2d(tape, in, w, b, c.stride, c.dilation, c.padding);
        int Ho = 0, Wo = 0;
        std::vector<double> ref = oracle::conv2d(in.data, c.B, c.Cin, c.H, c.W, w.data, c.Cout,
                                                 c.k, b.data, c.stride, c.dilation, c.padding,
                                                 &Ho, &Wo);
        REQUIRE(y.shape == std::vector<int>{c.B, c.Cout, Ho, Wo});
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(y.data[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d gradient check (stride, dilation, padding)") {
    Rng rng(13);
    Tensor<double> in = random_tensor({2, 3, 8, 8}, rng);
    Tensor<double> w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor<double> b = random_tensor({4}, rng, -0.2, 0.2);
    auto rep = finite_difference_check(
        [&](Tape<double>& t) {
            return mean(t, square(t, conv2d(t, in, w, b, 1, 2, 2)));
        },
        {{"in", &in}, {"w", &w}, {"b", &b}}, 1e-5, 1e-4, 40);
    CAPTURE(rep.max_rel_err);
    CHECK(rep.pass);

    auto rep2 = finite_difference_check(
        [&](Tape<double>& t) {
            return mean(t, square(t, conv2d(t, in, w, b, 2, 1, 1)));
        },
        {{"in", &in}, {"w", &w}, {"b", &b}}, 1e-5, 1e-4, 40);
    CAPTURE(rep2.max_rel_err);
    CHECK(rep2.pass);
}

TEST_CASE("batchnorm2d") {
    Rng rng(5);
    SUBCASE("train mode normalizes each channel") {
        Tensor<double> in = random_tensor({4, 3, 5, 5}, rng, -2.0, 3.0);
        Tensor<double> gamma(std::vector<int>{3}, 1.0), beta(std::vector<int>{3}, 0.0);
        BnState<double> st = BnState<double>::init(3);
        Tape<double> tape;
        Tensor<double> y = batchnorm2d(tape, in, gamma, beta, st, BnMode::Train);
        const std::size_t plane = 25;
        for (int c = 0; c < 3; ++c) {
            double m = 0, v = 0;
            for (int b = 0; b < 4; ++b)
                for (std::size_t i = 0; i < plane; ++i) m += y.data[(b * 3 + c) * plane + i];
            m /= 4 * plane;
            for (int b = 0; b < 4; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = y.data[(b * 3 + c) * plane + i] - m;
                    v += d * d;
                }
            v /= 4 * plane;
            CHECK(std::abs(m) < 1e-6);
            CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
        }
    }
    SUBCASE("eval mode with unit state is near identity") {
        Tensor<double> in = random_tensor({2, 2, 3, 3}, rng);
        Tensor<double> gamma(std::vector<int>{2}, 1.0), beta(std::vector<int>{2}, 0.0);
        BnState<double> st = BnState<double>::init(2);  // mean 0, var 1
        Tape<double> tape;
        Tensor<double> y = batchnorm2d(tape, in, gamma, beta, st, BnMode::Eval);
        for (std::size_t i = 0; i < in.numel(); ++i)
            CHECK(y.data[i] == doctest::Approx(in.data[i]).epsilon(1e-4));
    }
    SUBCASE("running stats update with momentum") {
        Tensor<double> in(std::vector<int>{1, 1, 2, 2}, {1.0, 1.0, 3.0, 3.0});  // mean 2, var 1
        Tensor<double> gamma(std::vector<int>{1}, 1.0), beta(std::vector<int>{1}, 0.0);
        BnState<double> st = BnState<double>::init(1);
        Tape<double> tape;
        (void)batchnorm2d(tape, in, gamma, beta, st, BnMode::Train, 0.1);
        CHECK(st.running_mean[0] == doctest::Approx(0.2));
        CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));
    }
    SUBCASE("train mode needs at least two values per channel") {
        Tensor<double> in(std::vector<int>{1, 1, 1, 1}, 1.0);
        Tensor<double> gamma(std::vector<int>{1}, 1.0), beta(std::vector<int>{1}, 0.0);
        BnState<double> st = BnState<double>::init(1);
        Tape<double> tape;
        CHECK_THROWS_AS((void)batchnorm2d(tape, in, gamma, beta, st, BnMode::Train), Error);
    }
    SUBCASE("gradient check, train and eval modes") {
        Tensor<double> in = random_tensor({3, 2, 4, 4}, rng);
        Tensor<double> gamma = random_tensor({2}, rng, 0.5, 1.5);
        Tensor<double> beta = random_tensor({2}, rng, -0.3, 0.3);
        for (BnMode mode : {BnMode::Train, BnMode::Eval}) {
            auto rep = finite_difference_check(
                [&](Tape<double>& t) {
                    BnState<double> st = BnState<double>::init(2);
                    st.running_mean = {0.1, -0.2};
                    st.running_var = {1.2, 0.8};
                    return mean(t, square(t, batchnorm2d(t, in, gamma, beta, st, mode)));
                },
                {{"in", &in}, {"gamma", &gamma}, {"beta", &beta}}, 1e-5, 1e-4, 30);
            CAPTURE(rep.max_rel_err);
            CHECK(rep.pass);
        }
    }
}

TEST_CASE("bilinear_upsample") {
    Tape<double> tape;
    SUBCASE("constant input stays constant") {
        Tensor<double> in(std::vector<int>{1, 2, 3, 3}, 0.75);
        Tensor<double> y = bilinear_upsample(tape, in, 2);
        CHECK(y.shape == std::vector<int>{1, 2, 6, 6});
        for (double v : y.data) CHECK(v == doctest::Approx(0.75));
    }
    SUBCASE("matches the naive sampling-formula oracle") {
        Rng rng(9);
        for (int f : {2, 4}) {
            Tensor<double> in = random_tensor({2, 3, 4, 5}, rng);
            Tensor<double> y = bilinear_upsample(tape, in, f);
            std::vector<double> ref = oracle::bilinear_upsample(in.data, 2, 3, 4, 5, f);
            REQUIRE(y.numel() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(y.data[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
    SUBCASE("2x2 fixture") {
        Tensor<double> in(std::vector<int>{1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
        Tensor<double> y = bilinear_upsample(tape, in, 2);
        std::vector<double> ref = oracle::bilinear_upsample(in.data, 1, 1, 2, 2, 2);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref[i]));
        CHECK(y.at4(0, 0, 0, 0) == doctest::Approx(1.0));  // corner clamps to source corner
        CHECK(y.at4(0, 0, 3, 3) == doctest::Approx(4.0));
    }
    SUBCASE("invalid factor") {
        Tensor<double> in(std::vector<int>{1, 1, 2, 2}, 1.0);
        CHECK_THROWS_AS((void)bilinear_upsample(tape, in, 3), Error);
    }
    SUBCASE("gradient check") {
        Rng rng(21);
        Tensor<double> in = random_tensor({1, 2, 3, 4}, rng);
        auto rep = finite_difference_check(
            [&](Tape<double>& t) { return mean(t, square(t, bilinear_upsample(t, in, 2))); },
            {{"in", &in}}, 1e-5, 1e-4);
        CAPTURE(rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("spatial_softmax_cross_entropy") {
    SUBCASE("saturated logits give near-zero loss") {
        Tensor<double> logits(std::vector<int>{1, 3, 2, 2}, 0.0);
        std::vector<int> labels = {0, 1, 2, 0};
        for (int i = 0; i < 4; ++i) logits.data[labels[i] * 4 + i] = 50.0;
        Tape<double> tape;
        Tensor<double> l = spatial_softmax_cross_entropy(tape, logits, labels, -1);
        CHECK(l.item() < 1e-3);
    }
    SUBCASE("uniform logits give ln K") {
        Tensor<double> logits(std::vector<int>{2, 4, 3, 3}, 0.3);
        std::vector<int> labels(18, 2);
        Tape<double> tape;
        Tensor<double> l = spatial_softmax_cross_entropy(tape, logits, labels, -1);
        CHECK(l.item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    }
    SUBCASE("ignore index excludes pixels") {
        Tensor<double> logits(std::vector<int>{1, 2, 1, 2}, 0.0);
        logits.data = {5.0, 0.0, 0.0, 5.0};  // pixel 0 favors class 0, pixel 1 favors class 1
        std::vector<int> labels = {1, -1};   // pixel 1 ignored
        Tape<double> tape;
        Tensor<double> l = spatial_softmax_cross_entropy(tape, logits, labels, -1);
        // only pixel 0 counts, and it is confidently wrong
        CHECK(l.item() == doctest::Approx(std::log(1.0 + std::exp(5.0))).epsilon(1e-9));
    }
    SUBCASE("all pixels ignored: zero loss plus flag") {
        Tensor<double> logits(std::vector<int>{1, 2, 1, 2}, 1.0);
        std::vector<int> labels = {-1, -1};
        Tape<double> tape;
        bool all_ignored = false;
        Tensor<double> l = spatial_softmax_cross_entropy(tape, logits, labels, -1, &all_ignored);
        CHECK(l.item() == 0.0);
        CHECK(all_ignored);
    }
    SUBCASE("label out of range rejected") {
        Tensor<double> logits(std::vector<int>{1, 2, 1, 1}, 1.0);
        std::vector<int> labels = {2};
        Tape<double> tape;
        CHECK_THROWS_AS((void)spatial_softmax_cross_entropy(tape, logits, labels, -1), Error);
    }
    SUBCASE("per-pixel gradient sums to zero over classes") {
        Rng rng(17);
        Tensor<double> logits(std::vector<int>{2, 5, 3, 3});
        for (auto& v : logits.data) v = rng.uniform(-2.0, 2.0);
        std::vector<int> labels(18);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, 4));
        labels[4] = -1;
        Tape<double> tape;
        track(tape, logits);
        Tensor<double> l = spatial_softmax_cross_entropy(tape, logits, labels, -1);
        tape.backward(l);
        const std::vector<double>& g = tape.grad(logits.node);
        for (int b = 0; b < 2; ++b)
            for (int p = 0; p < 9; ++p) {
                double s = 0;
                for (int k = 0; k < 5; ++k) s += g[(b * 5 + k) * 9 + p];
                CHECK(std::abs(s) < 1e-6);
            }
    }
    SUBCASE("gradient check") {
        Rng rng(19);
        Tensor<double> logits(std::vector<int>{1, 4, 3, 3});
        for (auto& v : logits.data) v = rng.uniform(-1.0, 1.0);
        std::vector<int> labels(9);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, 3));
        auto rep = finite_difference_check(
            [&](Tape<double>& t) {
                return spatial_softmax_cross_entropy(t, logits, labels, -1);
            },
            {{"logits", &logits}}, 1e-5, 1e-5);
        CAPTURE(rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("l1_loss") {
    Tape<double> tape;
    SUBCASE("hand values") {
        Tensor<double> p(std::vector<int>{2}, {1.0, 3.0});
        Tensor<double> t(std::vector<int>{2}, {2.0, 1.0});
        CHECK(l1_loss(tape, p, t).item() == doctest::Approx(1.5));
        CHECK(l1_loss(tape, p, p).item() == 0.0);
    }
    SUBCASE("mask restricts the mean") {
        Tensor<double> p(std::vector<int>{3}, {1.0, 10.0, 3.0});
        Tensor<double> t(std::vector<int>{3}, {2.0, 0.0, 1.0});
        std::vector<std::uint8_t> mask = {1, 0, 1};
        CHECK(l1_loss(tape, p, t, &mask).item() == doctest::Approx(1.5));
    }
    SUBCASE("empty mask rejected") {
        Tensor<double> p(std::vector<int>{2}, 1.0), t(std::vector<int>{2}, 2.0);
        std::vector<std::uint8_t> mask = {0, 0};
        CHECK_THROWS_AS((void)l1_loss(tape, p, t, &mask), Error);
    }
    SUBCASE("gradient check away from ties") {
        Rng rng(23);
        Tensor<double> p(std::vector<int>{2, 3});
        Tensor<double> t(std::vector<int>{2, 3});
        for (std::size_t i = 0; i < p.numel(); ++i) {
            t.data[i] = rng.uniform(-1.0, 1.0);
            p.data[i] = t.data[i] + (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.0);
        }
        auto rep = finite_difference_check(
            [&](Tape<double>& tp) { return l1_loss(tp, p, t); }, {{"p", &p}}, 1e-5, 1e-6);
        CAPTURE(rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("mse_loss") {
    Tape<double> tape;
    Tensor<double> p(std::vector<int>{2}, {0.0, 0.0});
    Tensor<double> t(std::vector<int>{2}, {1.0, 1.0});
    CHECK(mse_loss(tape, p, t).item() == doctest::Approx(1.0));
    CHECK(mse_loss(tape, t, t).item() == 0.0);

    Rng rng(29);
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({3, 4}, rng);
    auto rep = finite_difference_check(
        [&](Tape<double>& tp) { return mse_loss(tp, a, b); }, {{"a", &a}}, 1e-5, 1e-6);
    CHECK(rep.pass);
}

TEST_CASE("channel_l2_norm") {
    SUBCASE("one-hot channel vector of magnitude 5") {
        Tensor<double> f(std::vector<int>{1, 3, 1, 1}, 0.0);
        f.data[1] = 5.0;
        Tape<double> tape;
        Tensor<double> n = channel_l2_norm(tape, f);
        CHECK(n.shape == std::vector<int>{1, 1, 1});
        CHECK(n.data[0] == doctest::Approx(5.0));
    }
    SUBCASE("zeros give zeros with zero gradient") {
        Tensor<double> f(std::vector<int>{1, 2, 2, 2}, 0.0);
        Tape<double> tape;
        track(tape, f);
        Tensor<double> l = sum(tape, channel_l2_norm(tape, f));
        CHECK(l.item() == 0.0);
        tape.backward(l);
        for (double g : tape.grad(f.node)) CHECK(g == 0.0);
    }
    SUBCASE("matches the naive triple-loop oracle") {
        Rng rng(31);
        Tensor<double> f = random_tensor({2, 4, 3, 5}, rng);
        Tape<double> tape;
        Tensor<double> n = channel_l2_norm(tape, f);
        std::vector<double> ref = oracle::channel_l2_norm(f.data, 2, 4, 3, 5);
        REQUIRE(n.numel() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(n.data[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
    SUBCASE("positive homogeneity") {
        Rng rng(37);
        Tensor<double> f = random_tensor({1, 3, 4, 4}, rng);
        Tensor<double> cf = f;
        const double c = 2.75;
        for (auto& v : cf.data) v *= c;
        Tape<double> tape;
        Tensor<double> n1 = channel_l2_norm(tape, f);
        Tensor<double> n2 = channel_l2_norm(tape, cf);
        for (std::size_t i = 0; i < n1.numel(); ++i)
            CHECK(n2.data[i] == doctest::Approx(c * n1.data[i]).epsilon(1e-10));
    }
    SUBCASE("gradient check away from zero vectors") {
        Rng rng(41);
        Tensor<double> f(std::vector<int>{1, 3, 2, 2});
        for (auto& v : f.data) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.3, 1.0);
        auto rep = finite_difference_check(
            [&](Tape<double>& t) { return mean(t, channel_l2_norm(t, f)); }, {{"f", &f}}, 1e-5,
            1e-6);
        CAPTURE(rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("finite_difference_check harness") {
    SUBCASE("exact quadratic passes tightly") {
        Tensor<double> x(std::vector<int>{3}, {0.5, -1.0, 2.0});
        auto rep = finite_difference_check(
            [&](Tape<double>& t) { return sum(t, square(t, x)); }, {{"x", &x}}, 1e-4, 1e-8);
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-8);
    }
    SUBCASE("corrupted backward rule is caught") {
        Tensor<double> x(std::vector<int>{2}, {1.0, 2.0});
        // custom op y = x with a deliberately wrong backward (gradient 2x too big)
        auto broken_identity = [](Tape<double>& t, const Tensor<double>& a) {
            Tensor<double> out = a;
            if (a.tracked()) {
                out.node = t.record(out.numel(), {a.node});
                t.set_backward(out.node, [an = a.node, on = out.node](Tape<double>& tp) {
                    const auto& go = tp.grad(on);
                    auto& ga = tp.grad(an);
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += 2.0 * go[i];
                });
            }
            return out;
        };
        auto rep = finite_difference_check(
            [&](Tape<double>& t) { return sum(t, broken_identity(t, x)); }, {{"x", &x}}, 1e-4,
            1e-4);
        CHECK_FALSE(rep.pass);
    }
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
    Rng rng(43);
    Tensor<float> in(std::vector<int>{2, 3, 8, 8});
    Tensor<float> w(std::vector<int>{4, 3, 3, 3});
    Tensor<float> b(std::vector<int>{4});
    for (auto& v : in.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (auto& v : b.data) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    Tape<float> t1, t2;
    Tensor<float> y1 = conv2d(t1, in, w, b, 2, 1, 1);
    Tensor<float> y2 = conv2d(t2, in, w, b, 2, 1, 1);
    CHECK(y1.data == y2.data);
}
