// atdt: dataset generation, training runs, the experiment matrix, the
// verification suite and visual dumps. Exit codes: 0 ok, 1 config error,
// 2 training divergence, 3 verification failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "atdt/gradcheck.hpp"
#include "atdt/image_io.hpp"
#include "atdt/matrix.hpp"
#include "atdt/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitVerification = 3;

// ---------------------------------------------------------------------------
// gen

int cmd_gen(std::uint64_t seed, const std::string& out, int size, int train, int val, int test,
            bool force) {
    atdt::SplitCounts counts{train, val, test};
    for (const atdt::DomainConfig& d :
         {atdt::domain_a_default(), atdt::domain_b_default()}) {
        const std::uint64_t dseed =
            atdt::derive_seed(seed, d.tag == "A" ? 1001 : 1002);
        atdt::generate_dataset(out, d, counts, dseed, size, size, force);
        std::cout << "generated domain " << d.tag << " under " << out << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// run / matrix config assembly (file + flag overrides, resolved merge)

struct Overrides {
    std::string scenario, variant, aux, data_root, out_dir, transfer_reduction;
    int steps = -1, image_size = -1, train_count = -1, val_count = -1, test_count = -1,
        eval_every = -1, batch_size = -1;
    int nda = -1;     // -1 unset, 0 off, 1 on
    int proxy = -1;   // depth_proxy_noise
    double lr = -1.0;
};

atdt::ExperimentConfig resolve_config(const std::string& config_path, const Overrides& o) {
    atdt::ExperimentConfig c =
        config_path.empty() ? atdt::ExperimentConfig{} : atdt::load_config(config_path);
    if (!o.scenario.empty()) c.scenario = o.scenario;
    if (!o.variant.empty()) c.variant = o.variant;
    if (!o.aux.empty()) c.aux = o.aux;
    if (!o.data_root.empty()) c.data_root = o.data_root;
    if (!o.out_dir.empty()) c.out_dir = o.out_dir;
    if (!o.transfer_reduction.empty()) c.transfer_reduction = o.transfer_reduction;
    if (o.steps >= 0) c.steps_per_phase = o.steps;
    if (o.image_size >= 0) c.image_size = o.image_size;
    if (o.train_count >= 0) c.train_count = o.train_count;
    if (o.val_count >= 0) c.val_count = o.val_count;
    if (o.test_count >= 0) c.test_count = o.test_count;
    if (o.eval_every >= 0) c.eval_every = o.eval_every;
    if (o.batch_size >= 0) c.batch_size = o.batch_size;
    if (o.nda >= 0) c.nda = o.nda == 1;
    if (o.proxy >= 0) c.depth_proxy_noise = o.proxy == 1;
    if (o.lr > 0) c.lr = o.lr;
    c.validate();
    return c;
}

int cmd_run(const atdt::ExperimentConfig& cfg, std::uint64_t seed, std::string run_dir,
            bool force) {
    if (run_dir.empty())
        run_dir = (fs::path(cfg.out_dir) /
                   (cfg.scenario + "-" + cfg.variant + "-seed" + std::to_string(seed)))
                      .string();
    if (fs::exists(fs::path(run_dir) / "run.json") && !force) {
        std::cerr << "run directory already populated (use --force): " << run_dir << "\n";
        return kExitConfig;
    }
    atdt::RunResult r = atdt::run_variant(cfg, seed, run_dir);
    std::cout << "run complete: " << run_dir << "\n";
    if (r.test_report.seg)
        std::cout << "test mIoU " << r.test_report.seg->miou * 100.0 << "  Acc "
                  << r.test_report.seg->acc * 100.0 << "\n";
    if (r.test_report.depth)
        std::cout << "test Abs Rel " << r.test_report.depth->abs_rel << "  delta1 "
                  << r.test_report.depth->d1 << "\n";
    return kExitOk;
}

int cmd_matrix(const atdt::ExperimentConfig& cfg, const std::string& out, bool ablation) {
    const std::string out_dir = out.empty() ? (fs::path(cfg.out_dir) / "matrix").string() : out;
    const std::vector<atdt::MatrixCell> cells =
        ablation ? atdt::ablation_cells(cfg) : atdt::variant_cells(cfg);
    atdt::MatrixResult m = atdt::run_cells(cells, cfg.seeds, out_dir);
    atdt::write_matrix_outputs(m, out_dir);
    std::cout << atdt::render_matrix_table(m);

    bool any_fail = false;
    for (const auto& cell : m.cells)
        for (const auto& e : cell.errors)
            if (!e.empty()) {
                any_fail = true;
                std::cerr << "cell " << cell.name << " failed: " << e << "\n";
            }
    if (!ablation) {
        // headline ordering over cell means (higher-is-better score)
        auto score = [&](const atdt::CellOutcome& c) {
            return atdt::cell_aggregate(c, [](const atdt::MetricsReport& r) {
                return atdt::selection_score(r);
            }).mean;
        };
        const bool ordered = score(m.cells[0]) <= score(m.cells[1]) &&
                             score(m.cells[1]) <= score(m.cells[2]) &&
                             score(m.cells[2]) <= score(m.cells[3]);
        std::cout << "ordering baseline <= atdt <= transfer-oracle <= oracle: "
                  << (ordered ? "pass" : "FAIL") << "\n";
    }
    return any_fail ? kExitDivergence : kExitOk;
}

// ---------------------------------------------------------------------------
// render

int cmd_render(const std::string& data_root, const std::string& domain, const std::string& split,
               int index, const std::string& out, bool occurrence) {
    fs::create_directories(out);
    atdt::DatasetSplit ds(data_root, domain, split, nullptr);
    atdt::check(index >= 0 && static_cast<std::size_t>(index) < ds.size(),
                "render: index out of range");
    const fs::path o(out);
    atdt::write_ppm((o / "image.ppm").string(), ds.image(index));
    atdt::write_pgm((o / "depth.pgm").string(), ds.depth(index), 0.0f,
                    static_cast<float>(atdt::kDepthMax));
    atdt::write_pgm((o / "semseg.pgm").string(), ds.semseg_raw(index), 0.0f,
                    static_cast<float>(atdt::kNumClasses - 1));
    atdt::write_pgm((o / "edges.pgm").string(), ds.edges(index), 0.0f, 1.0f);
    if (occurrence) {
        std::vector<atdt::Tensor<float>> segs;
        for (std::size_t i = 0; i < ds.size(); ++i) segs.push_back(ds.semseg_raw(i));
        atdt::Tensor<float> maps = atdt::occurrence_maps(segs, atdt::kNumClasses);
        const int H = maps.shape[1], W = maps.shape[2];
        for (int c = 0; c < atdt::kNumClasses; ++c) {
            atdt::Tensor<float> plane(std::vector<int>{H, W});
            std::copy(maps.data.begin() + static_cast<std::size_t>(c) * H * W,
                      maps.data.begin() + static_cast<std::size_t>(c + 1) * H * W,
                      plane.data.begin());
            atdt::write_pgm((o / ("occurrence_" + std::string(atdt::kClassNames[c]) + ".pgm"))
                                .string(),
                            plane, 0.0f, 1.0f);
        }
    }
    std::cout << "rendered " << domain << "/" << split << "/" << index << " to " << out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// check: the verification suite. Every entry carries a stable invariant
// identifier; the summary is machine-readable JSON.

struct CheckEntry {
    std::string id;
    bool pass = false;
    std::string detail;
};

using atdt::Tape;
using atdt::Tensor;

Tensor<double> rand_tensor(atdt::Rng& rng, std::vector<int> shape, double lo = -1.0,
                           double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

void check_gradients(std::vector<CheckEntry>& out) {
    // composed network: conv -> bn -> relu -> upsample -> decoder-style head,
    // scored by each loss in turn
    atdt::Rng rng(123);
    Tensor<double> x = rand_tensor(rng, {2, 2, 8, 8});
    Tensor<double> w1 = rand_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
    Tensor<double> b1 = rand_tensor(rng, {3}, -0.1, 0.1);
    Tensor<double> g1 = rand_tensor(rng, {3}, 0.5, 1.5);
    Tensor<double> be1 = rand_tensor(rng, {3}, -0.1, 0.1);
    Tensor<double> w2 = rand_tensor(rng, {4, 3, 1, 1}, -0.5, 0.5);
    Tensor<double> b2 = rand_tensor(rng, {4}, -0.1, 0.1);
    std::vector<int> labels(2 * 16 * 16);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, 3));
    Tensor<double> target = rand_tensor(rng, {2, 4, 16, 16}, 0.1, 0.9);
    // the l1 case keeps its target far above the head's range so every
    // sampled point sits away from the |.| kink
    Tensor<double> far_target = rand_tensor(rng, {2, 4, 16, 16}, 10.0, 11.0);

    auto build = [&](Tape<double>& tape, int loss_kind) {
        atdt::BnState<double> bn = atdt::BnState<double>::init(3);
        Tensor<double> h = atdt::conv2d(tape, x, w1, b1, 1, 1, 1);
        h = atdt::batchnorm2d(tape, h, g1, be1, bn, atdt::BnMode::Train);
        h = atdt::relu(tape, h);
        h = atdt::bilinear_upsample(tape, h, 2);
        h = atdt::conv2d(tape, h, w2, b2, 1, 1, 0);
        switch (loss_kind) {
            case 0: return atdt::spatial_softmax_cross_entropy(tape, h, labels, -1);
            case 1: return atdt::mse_loss(tape, h, target);
            default: return atdt::l1_loss(tape, h, far_target);
        }
    };
    const char* names[3] = {"ce", "mse", "l1"};
    for (int k = 0; k < 3; ++k) {
        auto r = atdt::finite_difference_check(
            [&](Tape<double>& t) { return build(t, k); },
            {{"w1", &w1}, {"b1", &b1}, {"g1", &g1}, {"be1", &be1}, {"w2", &w2}, {"b2", &b2}},
            1e-4, k == 2 ? 1e-3 : 1e-4, 12, 5);
        out.push_back({std::string("autodiff.gradcheck.stack_") + names[k], r.pass,
                       "max_rel_err=" + std::to_string(r.max_rel_err)});
    }
    // nda path
    Tensor<double> fa = rand_tensor(rng, {2, 3, 4, 4});
    Tensor<double> fb = rand_tensor(rng, {2, 3, 4, 4});
    auto rn = atdt::finite_difference_check(
        [&](Tape<double>& t) { return atdt::loss_nda(t, fa, fb); }, {{"fa", &fa}, {"fb", &fb}},
        1e-5, 1e-4, 16, 6);
    out.push_back({"autodiff.gradcheck.nda", rn.pass,
                   "max_rel_err=" + std::to_string(rn.max_rel_err)});
}

void check_softmax_rowsum(std::vector<CheckEntry>& out) {
    atdt::Rng rng(7);
    Tensor<double> logits = rand_tensor(rng, {1, 5, 3, 3}, -2, 2);
    std::vector<int> labels(9);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, 4));
    Tape<double> tape;
    atdt::track(tape, logits);
    Tensor<double> loss = atdt::spatial_softmax_cross_entropy(tape, logits, labels, -1);
    tape.backward(loss);
    const auto& g = tape.grad(logits.node);
    double worst = 0;
    for (int p = 0; p < 9; ++p) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += g[static_cast<std::size_t>(c) * 9 + p];
        worst = std::max(worst, std::abs(s));
    }
    logits.node = -1;
    out.push_back({"autodiff.softmax.channel_grad_sum_zero", worst < 1e-6,
                   "max_abs_sum=" + std::to_string(worst)});
}

void check_metric_oracles(std::vector<CheckEntry>& out, bool inject_fault) {
    atdt::Rng rng(99);
    double worst_seg = 0, worst_depth = 0;
    for (int t = 0; t < 50; ++t) {
        const int K = 4, N = 16 * 16;
        std::vector<int> pred(N), gt(N);
        for (int i = 0; i < N; ++i) {
            pred[i] = static_cast<int>(rng.uniform_int(0, K - 1));
            gt[i] = static_cast<int>(rng.uniform_int(0, K - 1));
        }
        atdt::ConfusionMatrix cm(K);
        cm.accumulate(pred, gt, -1);
        atdt::SegMetrics m = atdt::miou_acc(cm);
        // naive straight-from-definition
        double iou_sum = 0;
        int iou_n = 0, correct = 0;
        for (int c = 0; c < K; ++c) {
            int tp = 0, fp = 0, fn = 0;
            for (int i = 0; i < N; ++i) {
                if (gt[i] == c && pred[i] == c) ++tp;
                if (gt[i] != c && pred[i] == c) ++fp;
                if (gt[i] == c && pred[i] != c) ++fn;
            }
            if (tp + fp + fn > 0) {
                iou_sum += static_cast<double>(tp) / (tp + fp + fn);
                ++iou_n;
            }
        }
        for (int i = 0; i < N; ++i) correct += pred[i] == gt[i];
        worst_seg = std::max(worst_seg, std::abs(m.miou - iou_sum / iou_n));
        worst_seg = std::max(worst_seg, std::abs(m.acc - static_cast<double>(correct) / N));

        std::vector<float> dp(N), dg(N);
        for (int i = 0; i < N; ++i) {
            dp[i] = static_cast<float>(rng.uniform(0.5, 60.0));
            dg[i] = static_cast<float>(rng.uniform(0.5, 60.0));
        }
        atdt::DepthAccumulator acc;
        acc.add_map(dp, dg);
        atdt::DepthMetrics dm = acc.finalize();
        double sar = 0, ssr = 0, ssq = 0, ssl = 0, n1 = 0, n2 = 0, n3 = 0;
        for (int i = 0; i < N; ++i) {
            const double p = dp[i], g = dg[i];
            sar += std::abs(p - g) / g;
            ssr += (p - g) * (p - g) / g;
            ssq += (p - g) * (p - g);
            ssl += (std::log(p) - std::log(g)) * (std::log(p) - std::log(g));
            const double r = std::max(p / g, g / p);
            n1 += r < 1.25;
            n2 += r < 1.5625;
            n3 += r < 1.953125;
        }
        worst_depth = std::max({worst_depth, std::abs(dm.abs_rel - sar / N),
                                std::abs(dm.sq_rel - ssr / N),
                                std::abs(dm.rmse - std::sqrt(ssq / N)),
                                std::abs(dm.rmse_log - std::sqrt(ssl / N)),
                                std::abs(dm.d1 - n1 / N), std::abs(dm.d2 - n2 / N),
                                std::abs(dm.d3 - n3 / N)});
    }
    if (inject_fault) worst_seg += 1.0;  // negative-control fixture
    out.push_back({"metrics.seg.naive_oracle", worst_seg < 1e-9,
                   "max_abs_err=" + std::to_string(worst_seg)});
    out.push_back({"metrics.depth.naive_oracle", worst_depth < 1e-9,
                   "max_abs_err=" + std::to_string(worst_depth)});
}

void check_nda(std::vector<CheckEntry>& out) {
    // constant norms 1 vs 3 -> exactly 2
    Tensor<float> fa(std::vector<int>{1, 4, 3, 3}, 0.5f);   // norm sqrt(4*0.25)=1
    Tensor<float> fb(std::vector<int>{1, 4, 3, 3}, 1.5f);   // norm 3
    Tape<float> tape;
    const double v = atdt::loss_nda(tape, fa, fb).item();
    out.push_back({"atdt.nda.eq3_constant_norms", std::abs(v - 2.0) < 1e-6,
                   "value=" + std::to_string(v)});

    atdt::Rng rng(11);
    double worst_sym = 0, worst_hom = 0;
    for (int t = 0; t < 100; ++t) {
        Tensor<float> a(std::vector<int>{1, 3, 4, 4}), b(std::vector<int>{1, 3, 4, 4});
        for (auto& x : a.data) x = static_cast<float>(rng.uniform(-1, 1));
        for (auto& x : b.data) x = static_cast<float>(rng.uniform(-1, 1));
        Tape<float> t1;
        const double ab = atdt::loss_nda(t1, a, b).item();
        const double ba = atdt::loss_nda(t1, b, a).item();
        worst_sym = std::max(worst_sym, std::abs(ab - ba));
        const float c = static_cast<float>(rng.uniform(0.1, 3.0));
        Tensor<float> ca = a, cb = b;
        for (auto& x : ca.data) x *= c;
        for (auto& x : cb.data) x *= c;
        const double scaled = atdt::loss_nda(t1, ca, cb).item();
        worst_hom = std::max(worst_hom, std::abs(scaled - c * ab));
    }
    out.push_back({"atdt.nda.symmetry", worst_sym < 1e-7,
                   "max_abs_err=" + std::to_string(worst_sym)});
    out.push_back({"atdt.nda.positive_homogeneity", worst_hom < 1e-5,
                   "max_abs_err=" + std::to_string(worst_hom)});
}

void check_eq4(std::vector<CheckEntry>& out) {
    atdt::ExperimentConfig cfg;
    cfg.image_size = 16;
    cfg.batch_size = 2;
    cfg.encoder_width = 4;
    cfg.feat_channels = 8;
    atdt::ModelBundle<float> m = atdt::build_models<float>(cfg, 5);
    atdt::Rng rng(3);
    auto mk_batch = [&]() {
        atdt::Batch b;
        b.image = Tensor<float>(std::vector<int>{2, 3, 16, 16});
        for (auto& v : b.image.data) v = static_cast<float>(rng.uniform(0, 1));
        b.depth = Tensor<float>(std::vector<int>{2, 1, 16, 16});
        for (auto& v : b.depth.data) v = static_cast<float>(rng.uniform(1, 50));
        b.depth_mask.assign(b.depth.numel(), 1);
        b.has_depth = true;
        b.labels.resize(2 * 16 * 16);
        for (auto& l : b.labels) l = static_cast<int>(rng.uniform_int(0, 5));
        b.has_labels = true;
        b.edges = Tensor<float>(std::vector<int>{2, 1, 16, 16});
        for (auto& v : b.edges.data) v = rng.bernoulli(0.2) ? 1.0f : 0.0f;
        b.has_edges = true;
        return b;
    };
    const atdt::Batch ba = mk_batch(), bb = mk_batch();
    Tape<float> tape;
    m.store.track_trainable(tape);
    atdt::Phase1Loss<float> loss = atdt::loss_total_phase1(tape, m, ba, bb, cfg);
    double recon = 0;
    for (int i = 0; i < atdt::kNumComponents; ++i) recon += loss.weight[i] * loss.value[i];
    const double total = loss.total.item();
    out.push_back({"atdt.eq4.weighted_sum_identity",
                   std::abs(recon - total) <= 1e-6 * std::max(1.0, std::abs(recon)),
                   "total=" + std::to_string(total) + " recon=" + std::to_string(recon)});

    // graph boundary: B-domain components never reach the second network
    std::set<int> e2, d2;
    for (const auto& [name, p] : m.store.params) {
        if (p.node < 0) continue;
        if (name.rfind("E2/", 0) == 0) e2.insert(p.node);
        if (name.rfind("D2/", 0) == 0) d2.insert(p.node);
    }
    bool clean = true;
    for (int i : {1, 4}) {
        for (int l : tape.reachable_leaves(loss.node[i]))
            if (e2.count(l) || d2.count(l)) clean = false;
    }
    out.push_back({"atdt.eq4.no_e2_on_b_term", clean, "components t1_b, aux1_b vs E2/D2"});
    m.store.untrack();
}

void check_phase2_boundary(std::vector<CheckEntry>& out) {
    atdt::ExperimentConfig cfg;
    cfg.image_size = 16;
    cfg.batch_size = 2;
    cfg.encoder_width = 4;
    cfg.feat_channels = 8;
    atdt::ModelBundle<float> m = atdt::build_models<float>(cfg, 9);
    for (const char* p : {"E1/", "E2/", "D1/", "D2/", "Daux/"}) m.store.freeze(p);
    Tensor<float> x(std::vector<int>{2, 3, 16, 16});
    atdt::Rng rng(4);
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(0, 1));
    Tape<float> tape;
    m.store.track_trainable(tape);
    Tensor<float> f1 = m.e1.forward(tape, m.store, x, atdt::BnMode::Eval);
    Tensor<float> f2 = m.e2.forward(tape, m.store, x, atdt::BnMode::Eval);
    Tensor<float> tr = m.g.forward(tape, m.store, f1, atdt::BnMode::Train);
    Tensor<float> loss = atdt::loss_transfer(tape, tr, f2);
    bool boundary = !f1.tracked() && !f2.tracked();
    std::size_t g_leaves = 0, other_leaves = 0;
    for (int l : tape.reachable_leaves(loss.node)) {
        bool is_g = false;
        for (const auto& [name, p] : m.store.params)
            if (p.node == l && name.rfind("G/", 0) == 0) is_g = true;
        (is_g ? g_leaves : other_leaves) += 1;
    }
    boundary = boundary && other_leaves == 0 && g_leaves > 0;
    out.push_back({"atdt.phase2.gradient_boundary", boundary,
                   "g_leaves=" + std::to_string(g_leaves) +
                       " other=" + std::to_string(other_leaves)});
    m.store.untrack();
}

void check_transfer_identity(std::vector<CheckEntry>& out) {
    atdt::TransferNet<float> g(atdt::TransferSpec{8, 6}, "G");
    atdt::ParameterStore<float> store;
    g.init(store, 1);
    g.init_identity(store);
    atdt::Rng rng(2);
    Tensor<float> f(std::vector<int>{1, 8, 4, 4});
    for (auto& v : f.data) v = static_cast<float>(rng.uniform(0.01, 1.0));  // relu-safe
    Tape<float> tape;
    Tensor<float> y = g.forward(tape, store, f, atdt::BnMode::Eval);
    double worst = 0;
    for (std::size_t i = 0; i < f.numel(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(y.data[i]) - f.data[i]));
    out.push_back({"nn.transfer.identity_passthrough", worst < 1e-4,
                   "max_abs_err=" + std::to_string(worst)});
}

void check_serialize(std::vector<CheckEntry>& out) {
    atdt::Rng rng(8);
    Tensor<float> t(std::vector<int>{3, 5, 7});
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-10, 10));
    std::stringstream ss;
    atdt::write_tnsr(ss, t);
    Tensor<float> back = atdt::read_tnsr<float>(ss);
    const bool ok = back.shape == t.shape && back.data == t.data;
    out.push_back({"serialize.tnsr.roundtrip_bit_exact", ok, "3x5x7 f32"});
}

void check_scenegen(std::vector<CheckEntry>& out) {
    bool ok = true;
    std::string detail = "ok";
    for (std::uint64_t s : {1ull, 2ull, 3ull}) {
        for (const atdt::DomainConfig& d :
             {atdt::domain_a_default(), atdt::domain_b_default()}) {
            atdt::SceneSpec spec = atdt::sample_scene_spec(s, d, 32, 32);
            atdt::SceneSample sample = atdt::render_scene(spec, d);
            for (float v : sample.image.data)
                if (v < 0.0f || v > 1.0f) ok = false, detail = "image out of [0,1]";
            for (float v : sample.depth.data)
                if (!(v > 0.0f && v <= atdt::kDepthMax)) ok = false, detail = "depth range";
            for (float v : sample.semseg.data)
                if (v < 0 || v >= atdt::kNumClasses || v != std::floor(v))
                    ok = false, detail = "semseg labels";
            for (float v : sample.edges.data)
                if (v != 0.0f && v != 1.0f) ok = false, detail = "edges not binary";
        }
    }
    out.push_back({"scenegen.sample.type_invariants", ok, detail});
}

int cmd_check(const std::string& out_path, bool inject_fault) {
    std::vector<CheckEntry> entries;
    check_gradients(entries);
    check_softmax_rowsum(entries);
    check_metric_oracles(entries, inject_fault);
    check_nda(entries);
    check_eq4(entries);
    check_phase2_boundary(entries);
    check_transfer_identity(entries);
    check_serialize(entries);
    check_scenegen(entries);

    bool all = true;
    json checks = json::array();
    for (const auto& e : entries) {
        all = all && e.pass;
        checks.push_back({{"id", e.id}, {"pass", e.pass}, {"detail", e.detail}});
        std::cout << (e.pass ? "pass " : "FAIL ") << e.id << "  (" << e.detail << ")\n";
    }
    json summary = {{"pass", all}, {"checks", checks}};
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << summary.dump(2) << "\n";
    }
    std::cout << (all ? "check: all invariants hold\n" : "check: FAILURES present\n");
    return all ? kExitOk : kExitVerification;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-task / cross-domain feature transfer workbench"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate the two-domain dataset");
    std::uint64_t gen_seed = 7;
    std::string gen_out = "data";
    int gen_size = 64, gen_train = 600, gen_val = 100, gen_test = 200;
    bool gen_force = false;
    gen->add_option("--seed", gen_seed, "dataset root seed");
    gen->add_option("--out", gen_out, "dataset root directory");
    gen->add_option("--size", gen_size, "image side length");
    gen->add_option("--train", gen_train, "train images per domain");
    gen->add_option("--val", gen_val, "val images per domain");
    gen->add_option("--test", gen_test, "test images per domain");
    gen->add_flag("--force", gen_force, "overwrite an existing dataset");

    // shared run/matrix options
    auto add_cfg_opts = [](CLI::App* cmd, std::string& config_path, Overrides& o) {
        cmd->add_option("--config", config_path, "JSON config file (flags override)");
        cmd->add_option("--scenario", o.scenario, "dep2sem | sem2dep");
        cmd->add_option("--aux", o.aux, "none | edge | reconstruction");
        cmd->add_option("--nda", o.nda, "0 | 1");
        cmd->add_option("--data", o.data_root, "dataset root");
        cmd->add_option("--steps", o.steps, "steps per phase");
        cmd->add_option("--image-size", o.image_size, "image side length");
        cmd->add_option("--train-count", o.train_count, "train images used");
        cmd->add_option("--val-count", o.val_count, "val images used");
        cmd->add_option("--test-count", o.test_count, "test images used");
        cmd->add_option("--eval-every", o.eval_every, "validation interval");
        cmd->add_option("--batch-size", o.batch_size, "batch size");
        cmd->add_option("--lr", o.lr, "learning rate");
        cmd->add_option("--proxy", o.proxy, "noisy depth proxy labels: 0 | 1");
        cmd->add_option("--transfer-reduction", o.transfer_reduction, "mean | sum | root-sum");
    };

    // run
    auto* run = app.add_subcommand("run", "one training run");
    std::string run_config, run_out;
    Overrides run_o;
    std::uint64_t run_seed = 1;
    bool run_force = false;
    add_cfg_opts(run, run_config, run_o);
    run->add_option("--variant", run_o.variant, "baseline | atdt | transfer-oracle | oracle");
    run->add_option("--seed", run_seed, "run seed");
    run->add_option("--out", run_out, "run directory (default derived)");
    run->add_flag("--force", run_force, "overwrite an existing run directory");

    // matrix
    auto* mat = app.add_subcommand("matrix", "the full comparison / ablation matrix");
    std::string mat_config, mat_out;
    Overrides mat_o;
    bool mat_ablation = false;
    add_cfg_opts(mat, mat_config, mat_o);
    mat->add_option("--out", mat_out, "matrix output directory");
    mat->add_flag("--ablation", mat_ablation, "run the aux x nda ablation grid");

    // check
    auto* chk = app.add_subcommand("check", "verification suite");
    std::string chk_out;
    bool chk_fault = false;
    chk->add_option("--out", chk_out, "write JSON summary here");
    chk->add_flag("--inject-fault", chk_fault, "negative control: corrupt one check");

    // render
    auto* ren = app.add_subcommand("render", "dump PPM/PGM visualizations");
    std::string ren_data = "data", ren_domain = "A", ren_split = "test", ren_out = "render";
    int ren_index = 0;
    bool ren_occ = false;
    ren->add_option("--data", ren_data, "dataset root");
    ren->add_option("--domain", ren_domain, "A | B");
    ren->add_option("--split", ren_split, "train | val | test");
    ren->add_option("--index", ren_index, "sample index");
    ren->add_option("--out", ren_out, "output directory");
    ren->add_flag("--occurrence", ren_occ, "also dump per-class occurrence maps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed())
            return cmd_gen(gen_seed, gen_out, gen_size, gen_train, gen_val, gen_test, gen_force);
        if (run->parsed())
            return cmd_run(resolve_config(run_config, run_o), run_seed, run_out, run_force);
        if (mat->parsed()) return cmd_matrix(resolve_config(mat_config, mat_o), mat_out, mat_ablation);
        if (chk->parsed()) return cmd_check(chk_out, chk_fault);
        if (ren->parsed())
            return cmd_render(ren_data, ren_domain, ren_split, ren_index, ren_out, ren_occ);
    } catch (const atdt::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n" << e.log_tail();
        return kExitDivergence;
    } catch (const atdt::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerification;
    }
    return kExitConfig;
}
