#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <unistd.h>

#include <atdt/gradcheck.hpp>
#include <atdt/nn.hpp>
#include <atdt/optimizer.hpp>

using namespace atdt;
namespace fs = std::filesystem;

namespace {

// toy sizes keep the f64 gradient checks fast
EncoderSpec tiny_encoder() {
    EncoderSpec s;
    s.base_width = 4;
    s.feat_channels = 8;
    s.downsample = 4;
    return s;
}

DecoderSpec tiny_decoder() {
    DecoderSpec s;
    s.in_channels = 8;
    s.stages = {{8, 4}};
    s.num_classes = 6;
    return s;
}

template <class S>
Tensor<S> random_image(Rng& rng, int b, int c, int h, int w) {
    Tensor<S> t(std::vector<int>{b, c, h, w});
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(0.0, 1.0));
    return t;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("atdt_nn_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("parameter store basics") {
    ParameterStore<float> store;
    store.add("E1/w", Tensor<float>(std::vector<int>{2, 2}, 1.0f));
    store.add("E1/b", Tensor<float>(std::vector<int>{2}, 0.0f));
    store.add("G/w", Tensor<float>(std::vector<int>{3}, 2.0f));

    CHECK(store.at("E1/w").numel() == 4);
    CHECK_THROWS_AS((void)store.at("missing"), Error);
    CHECK_THROWS_AS(store.add("E1/w", Tensor<float>(std::vector<int>{1}, 0.0f)), Error);

    CHECK(store.trainable_count() == 9);
    store.freeze("E1/");
    CHECK(store.frozen("E1/w"));
    CHECK_FALSE(store.frozen("G/w"));
    CHECK(store.trainable_count() == 3);

    Tape<float> tape;
    store.track_trainable(tape);
    CHECK(store.at("E1/w").node == -1);
    CHECK(store.at("G/w").node >= 0);
    store.untrack();

    store.unfreeze("E1/");
    CHECK(store.trainable_count() == 9);
    CHECK_THROWS_AS(store.unfreeze("E1/"), Error);
    CHECK_THROWS_AS(store.freeze("nope/"), Error);
}

TEST_CASE("encoder shapes and determinism") {
    const EncoderSpec spec = tiny_encoder();
    Encoder<float> enc(spec, "E1");

    ParameterStore<float> a, b;
    enc.init(a, 123);
    enc.init(b, 123);
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, p] : a.params) CHECK(p.data == b.at(name).data);

    ParameterStore<float> c;
    enc.init(c, 124);
    bool any_diff = false;
    for (const auto& [name, p] : a.params)
        if (p.data != c.at(name).data) any_diff = true;
    CHECK(any_diff);

    Rng rng(1);
    Tensor<float> x = random_image<float>(rng, 2, 3, 16, 16);
    Tape<float> tape;
    Tensor<float> f = enc.forward(tape, a, x, BnMode::Train);
    CHECK(f.shape == std::vector<int>{2, spec.feat_channels, 4, 4});
    for (float v : f.data) CHECK(std::isfinite(v));

    Tensor<float> bad = random_image<float>(rng, 1, 3, 18, 18);  // not divisible by stride
    CHECK_THROWS_AS((void)enc.forward(tape, a, bad, BnMode::Train), Error);
}

TEST_CASE("default toy encoder: 64x64 -> [B,64,8,8]") {
    EncoderSpec spec;  // defaults: width 16, C=64, downsample 8
    Encoder<float> enc(spec, "E1");
    ParameterStore<float> store;
    enc.init(store, 7);
    Rng rng(2);
    Tensor<float> x = random_image<float>(rng, 2, 3, 64, 64);
    Tape<float> tape;
    Tensor<float> f = enc.forward(tape, store, x, BnMode::Eval);
    CHECK(f.shape == std::vector<int>{2, 64, 8, 8});
}

TEST_CASE("decoder heads: shapes and output ranges") {
    const DecoderSpec spec = tiny_decoder();
    Rng rng(3);
    Tensor<float> f = random_image<float>(rng, 2, spec.in_channels, 4, 4);
    for (auto& v : f.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));

    auto run_head = [&](Head h) {
        ParameterStore<float> store;
        Decoder<float> dec(spec, h, "D");
        dec.init(store, 11);
        Tape<float> tape;
        return dec.forward(tape, store, f, BnMode::Train);
    };

    Tensor<float> seg = run_head(Head::Semseg);
    CHECK(seg.shape == std::vector<int>{2, 6, 16, 16});

    Tensor<float> dep = run_head(Head::Depth);
    CHECK(dep.shape == std::vector<int>{2, 1, 16, 16});
    for (float v : dep.data) CHECK(v > 0.0f);  // softplus head

    Tensor<float> edge = run_head(Head::Edge);
    CHECK(edge.shape == std::vector<int>{2, 1, 16, 16});
    for (float v : edge.data) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }

    Tensor<float> rec = run_head(Head::Reconstruction);
    CHECK(rec.shape == std::vector<int>{2, 3, 16, 16});
}

TEST_CASE("transfer net: shape preservation and parameter count") {
    const TransferSpec spec{8, 6};
    TransferNet<float> g(spec, "G");
    ParameterStore<float> store;
    g.init(store, 5);

    // per pair: conv weight 9C^2 + conv bias C + gamma C + beta C
    const std::size_t expected = 6u * (9u * 8 * 8 + 8 + 8 + 8);
    CHECK(store.count_with_prefix("G/") == expected);

    Rng rng(4);
    Tensor<float> f = random_image<float>(rng, 2, 8, 4, 4);
    Tape<float> tape;
    Tensor<float> out = g.forward(tape, store, f, BnMode::Train);
    CHECK(out.shape == f.shape);

    Tensor<float> wrong = random_image<float>(rng, 1, 4, 4, 4);
    CHECK_THROWS_AS((void)g.forward(tape, store, wrong, BnMode::Train), Error);
}

TEST_CASE("identity-initialized transfer net is the identity in eval mode") {
    const TransferSpec spec{6, 6};
    TransferNet<float> g(spec, "G");
    ParameterStore<float> store;
    g.init(store, 5);
    g.init_identity(store);
    Rng rng(6);
    Tensor<float> f = random_image<float>(rng, 2, 6, 3, 3);
    Tape<float> tape;
    Tensor<float> out = g.forward(tape, store, f, BnMode::Eval);
    for (std::size_t i = 0; i < f.numel(); ++i)
        CHECK(out.data[i] == doctest::Approx(f.data[i]).epsilon(1e-4));
}

TEST_CASE("composed encoder-decoder gradient check at toy width") {
    EncoderSpec es;
    es.base_width = 3;
    es.feat_channels = 4;
    es.downsample = 2;
    DecoderSpec ds;
    ds.in_channels = 4;
    ds.stages = {{4, 2}};
    ds.num_classes = 3;

    ParameterStore<double> store;
    Encoder<double> enc(es, "E");
    Decoder<double> dec(ds, Head::Semseg, "D");
    enc.init(store, 31);
    dec.init(store, 32);

    Rng rng(7);
    Tensor<double> x(std::vector<int>{2, 3, 8, 8});
    for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
    std::vector<int> labels(2 * 8 * 8);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, 2));

    std::vector<std::pair<std::string, Tensor<double>*>> params;
    for (auto& [name, p] : store.params) params.push_back({name, &p});

    auto rep = finite_difference_check(
        [&](Tape<double>& t) {
            Tensor<double> f = enc.forward(t, store, x, BnMode::Train);
            Tensor<double> y = dec.forward(t, store, f, BnMode::Train);
            return spatial_softmax_cross_entropy(t, y, labels, -1);
        },
        params, 1e-4, 1e-3, 4);
    CAPTURE(rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("optimizer") {
    SUBCASE("zero gradients leave parameters unchanged") {
        ParameterStore<float> store;
        store.add("w", Tensor<float>(std::vector<int>{3}, 2.0f));
        const std::vector<float> before = store.at("w").data;
        Tape<float> tape;
        store.track_trainable(tape);
        Optimizer<float> opt;
        opt.step(store, tape);  // grads all zero
        CHECK(store.at("w").data == before);
        store.untrack();
    }
    SUBCASE("adam minimizes a scalar quadratic") {
        ParameterStore<float> store;
        store.add("w", Tensor<float>(std::vector<int>{1}, 3.0f));
        Optimizer<float> opt;
        opt.lr = 1e-2f;
        for (int i = 0; i < 2000; ++i) {
            Tape<float> tape;
            store.track_trainable(tape);
            Tensor<float> loss = sum(tape, square(tape, store.at("w")));
            tape.backward(loss);
            opt.step(store, tape);
            store.untrack();
        }
        const float w = store.at("w").data[0];
        CHECK(w * w < 1e-6f);
    }
    SUBCASE("frozen parameters are untouched and need no gradient") {
        ParameterStore<float> store;
        store.add("E1/w", Tensor<float>(std::vector<int>{2}, 1.0f));
        store.add("G/w", Tensor<float>(std::vector<int>{2}, 1.0f));
        store.freeze("E1/");
        const std::vector<float> before = store.at("E1/w").data;
        Tape<float> tape;
        store.track_trainable(tape);
        Tensor<float> loss = sum(tape, square(tape, store.at("G/w")));
        tape.backward(loss);
        Optimizer<float> opt;
        opt.lr = 0.1f;
        opt.step(store, tape);
        store.untrack();
        CHECK(store.at("E1/w").data == before);
        CHECK(store.at("G/w").data[0] != 1.0f);
    }
    SUBCASE("missing gradient for a trainable parameter is an error") {
        ParameterStore<float> store;
        store.add("w", Tensor<float>(std::vector<int>{1}, 1.0f));
        Tape<float> tape;  // never tracked
        Optimizer<float> opt;
        CHECK_THROWS_AS(opt.step(store, tape), Error);
    }
    SUBCASE("sgd momentum moves against the gradient") {
        ParameterStore<float> store;
        store.add("w", Tensor<float>(std::vector<int>{1}, 1.0f));
        Optimizer<float> opt;
        opt.kind = OptimKind::SgdMomentum;
        opt.lr = 0.1f;
        Tape<float> tape;
        store.track_trainable(tape);
        Tensor<float> loss = sum(tape, square(tape, store.at("w")));
        tape.backward(loss);
        opt.step(store, tape);
        store.untrack();
        CHECK(store.at("w").data[0] == doctest::Approx(1.0f - 0.1f * 2.0f));
    }
}

TEST_CASE("frozen encoder uses running statistics (identical across batches)") {
    const EncoderSpec spec = tiny_encoder();
    Encoder<float> enc(spec, "E1");
    ParameterStore<float> store;
    enc.init(store, 17);
    store.freeze("E1/");

    const auto stats_before = store.bn;
    Rng rng(8);
    Tensor<float> x1 = random_image<float>(rng, 2, 3, 8, 8);
    Tensor<float> x2 = random_image<float>(rng, 2, 3, 8, 8);
    Tape<float> tape;
    (void)enc.forward(tape, store, x1, BnMode::Train);  // frozen -> eval semantics
    (void)enc.forward(tape, store, x2, BnMode::Train);
    for (const auto& [name, st] : store.bn) {
        CHECK(st.running_mean == stats_before.at(name).running_mean);
        CHECK(st.running_var == stats_before.at(name).running_var);
    }
}

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
    const EncoderSpec spec = tiny_encoder();
    Encoder<float> enc(spec, "E1");
    TransferNet<float> g(TransferSpec{8, 6}, "G");
    ParameterStore<float> store;
    enc.init(store, 19);
    g.init(store, 20);

    // leave non-trivial running stats behind
    Rng rng(9);
    Tensor<float> x = random_image<float>(rng, 2, 3, 8, 8);
    Tape<float> tape;
    (void)enc.forward(tape, store, x, BnMode::Train);

    TempDir dir;
    store.save((dir.path / "ckpt").string());

    ParameterStore<float> loaded;
    loaded.load((dir.path / "ckpt").string());
    REQUIRE(loaded.params.size() == store.params.size());
    for (const auto& [name, p] : store.params) {
        CHECK(loaded.at(name).shape == p.shape);
        CHECK(loaded.at(name).data == p.data);
    }
    REQUIRE(loaded.bn.size() == store.bn.size());
    for (const auto& [name, st] : store.bn) {
        CHECK(loaded.bn.at(name).running_mean == st.running_mean);
        CHECK(loaded.bn.at(name).running_var == st.running_var);
    }
}
