#ifndef ATDT_PIPELINE_HPP_
#define ATDT_PIPELINE_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "atdt/config.hpp"
#include "atdt/data.hpp"
#include "atdt/losses.hpp"
#include "atdt/metrics.hpp"
#include "atdt/nn.hpp"
#include "atdt/optimizer.hpp"
#include "atdt/scenegen.hpp"

// The two-phase transfer pipeline. Phase 1 trains both task networks jointly
// (task losses, shared auxiliary decoder, norm alignment); phase 2 trains the
// feature-transfer network on source-domain images with everything else
// frozen; target-domain inference decodes transferred features.

namespace atdt {

// ---------------------------------------------------------------------------
// scenario resolution

struct ScenarioTasks {
    TaskKind t1 = TaskKind::Depth;
    TaskKind t2 = TaskKind::Semseg;
    TaskKind aux = TaskKind::Edge;
    bool has_aux = true;
};

inline ScenarioTasks resolve_tasks(const ExperimentConfig& c) {
    ScenarioTasks t;
    if (c.scenario == "dep2sem") {
        t.t1 = TaskKind::Depth;
        t.t2 = TaskKind::Semseg;
    } else if (c.scenario == "sem2dep") {
        t.t1 = TaskKind::Semseg;
        t.t2 = TaskKind::Depth;
    } else {
        throw Error("unknown scenario: " + c.scenario);
    }
    // aux-as-source mode: the source task itself becomes an unsupervised /
    // self-contained one (edges, autoencoding) instead of depth or semseg
    if (c.t1_override == "edge") t.t1 = TaskKind::Edge;
    if (c.t1_override == "reconstruction") t.t1 = TaskKind::Reconstruction;
    check(t.t1 != t.t2, "scenario: source and target task coincide");
    if (c.aux == "none") {
        t.has_aux = false;
    } else {
        t.aux = c.aux == "edge" ? TaskKind::Edge : TaskKind::Reconstruction;
        check(t.aux != t.t1 && t.aux != t.t2, "scenario: aux task collides with a main task");
    }
    return t;
}

// Raised when the training loss goes non-finite; carries the recent log tail
// so the CLI can print context before exiting with the divergence code.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::string tail)
        : Error(what), log_tail_(std::move(tail)) {}
    const std::string& log_tail() const { return log_tail_; }

private:
    std::string log_tail_;
};

// ---------------------------------------------------------------------------
// model bundle

template <class S>
struct ModelBundle {
    ScenarioTasks tasks;
    Encoder<S> e1, e2;
    Decoder<S> d1, d2, daux;
    TransferNet<S> g;
    ParameterStore<S> store;
};

inline EncoderSpec encoder_spec_for(const ExperimentConfig& c) {
    EncoderSpec s;
    s.base_width = c.encoder_width;
    s.feat_channels = c.feat_channels;
    s.downsample = c.downsample;
    return s;
}

inline DecoderSpec decoder_spec_for(const ExperimentConfig& c) {
    DecoderSpec s;
    s.in_channels = c.feat_channels;
    s.num_classes = c.num_classes;
    s.stages.clear();
    // undo the encoder stride in (at most) factor-4 hops, halving the width
    int remaining = c.downsample, w = c.feat_channels;
    while (remaining > 1) {
        const int f = remaining % 4 == 0 ? 4 : 2;
        w = std::max(8, w / 2);
        s.stages.push_back({w, f});
        remaining /= f;
    }
    return s;
}

template <class S>
ModelBundle<S> build_models(const ExperimentConfig& c, std::uint64_t seed) {
    ModelBundle<S> m;
    m.tasks = resolve_tasks(c);
    const EncoderSpec es = encoder_spec_for(c);
    const DecoderSpec ds = decoder_spec_for(c);
    m.e1 = Encoder<S>(es, "E1");
    m.e2 = Encoder<S>(es, "E2");
    m.d1 = Decoder<S>(ds, head_for_task(m.tasks.t1), "D1");
    m.d2 = Decoder<S>(ds, head_for_task(m.tasks.t2), "D2");
    m.g = TransferNet<S>(TransferSpec{c.feat_channels, 6}, "G");
    m.e1.init(m.store, derive_seed(seed, 11));
    m.e2.init(m.store, derive_seed(seed, 12));
    m.d1.init(m.store, derive_seed(seed, 13));
    m.d2.init(m.store, derive_seed(seed, 14));
    if (m.tasks.has_aux) {
        m.daux = Decoder<S>(ds, head_for_task(m.tasks.aux), "Daux");
        m.daux.init(m.store, derive_seed(seed, 15));
    }
    m.g.init(m.store, derive_seed(seed, 16));
    return m;
}

// Structural fingerprint: multiset of parameter shapes plus the unordered
// task pair. Invariant under swapping source and target task, which pins the
// "same pipeline both directions" property.
template <class S>
std::uint64_t pipeline_fingerprint(const ModelBundle<S>& m) {
    std::vector<std::string> items;
    for (const auto& [name, p] : m.store.params) {
        std::string s = "shape:";
        for (int e : p.shape) s += std::to_string(e) + ",";
        items.push_back(s);
    }
    std::vector<std::string> pair = {task_name(m.tasks.t1), task_name(m.tasks.t2)};
    std::sort(pair.begin(), pair.end());
    items.push_back("tasks:" + pair[0] + "+" + pair[1]);
    if (m.tasks.has_aux) items.push_back("aux:" + task_name(m.tasks.aux));
    std::sort(items.begin(), items.end());
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& s : items)
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 1099511628211ULL;
        }
    return h;
}

// ---------------------------------------------------------------------------
// batches

struct Batch {
    Tensor<float> image;  // [B,3,H,W]
    Tensor<float> depth;  // [B,1,H,W]
    Tensor<float> edges;  // [B,1,H,W]
    std::vector<std::uint8_t> depth_mask;
    std::vector<int> labels;  // flat [B*H*W]
    bool has_depth = false, has_labels = false, has_edges = false;
};

struct BatchNeeds {
    bool depth = false, labels = false, edges = false;
};

inline void add_task_need(BatchNeeds& n, TaskKind t) {
    switch (t) {
        case TaskKind::Depth: n.depth = true; break;
        case TaskKind::Semseg: n.labels = true; break;
        case TaskKind::Edge: n.edges = true; break;
        case TaskKind::Reconstruction: break;  // target is the input image
    }
}

inline Batch draw_batch(const DatasetSplit& split, const std::vector<std::size_t>& idx,
                        const BatchNeeds& needs) {
    Batch b;
    std::vector<const Tensor<float>*> imgs, deps, edgs;
    for (std::size_t i : idx) imgs.push_back(&split.image(i));
    b.image = stack_batch(imgs);
    if (needs.depth) {
        for (std::size_t i : idx) deps.push_back(&split.depth(i));
        b.depth = stack_batch(deps);
        for (std::size_t i : idx) {
            const auto& m = split.depth_valid(i);
            b.depth_mask.insert(b.depth_mask.end(), m.begin(), m.end());
        }
        b.has_depth = true;
    }
    if (needs.labels) {
        for (std::size_t i : idx) {
            const auto& l = split.labels(i);
            b.labels.insert(b.labels.end(), l.begin(), l.end());
        }
        b.has_labels = true;
    }
    if (needs.edges) {
        for (std::size_t i : idx) edgs.push_back(&split.edges(i));
        b.edges = stack_batch(edgs);
        b.has_edges = true;
    }
    return b;
}

template <class S>
TaskTargets<S> targets_of(const Batch& b) {
    static_assert(std::is_same_v<S, float>, "training batches are f32");
    TaskTargets<S> t;
    if (b.has_depth) {
        t.depth = &b.depth;
        t.depth_mask = &b.depth_mask;
    }
    if (b.has_labels) t.labels = &b.labels;
    if (b.has_edges) t.edges = &b.edges;
    t.image = &b.image;
    return t;
}

inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t n, int batch) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    return idx;
}

// ---------------------------------------------------------------------------
// phase-1 loss: seven components, weighted sum

inline constexpr int kNumComponents = 7;
inline constexpr const char* kComponentNames[kNumComponents] = {
    "t1_a", "t1_b", "t2_a", "aux1_a", "aux1_b", "aux2_a", "nda"};

template <class S>
struct Phase1Loss {
    std::array<double, kNumComponents> value{};   // unweighted component values
    std::array<double, kNumComponents> weight{};  // effective weights
    std::array<int, kNumComponents> node{};       // tape node per component (-1 if absent)
    Tensor<S> total;                              // weighted sum, on tape
};

// Builds the full phase-1 graph on `tape`:
//   f1^A = E1(x^A), f1^B = E1(x^B), f2^A = E2(x^A)
// with task heads, the shared auxiliary decoder on all three feature maps and
// the norm-alignment term on f1^A vs f1^B. The second encoder never consumes
// a domain-B image, by construction. Components whose effective weight is
// zero are still evaluated and reported but are left out of the total's
// graph, so switched-off terms contribute no gradient anywhere.
template <class S>
Phase1Loss<S> loss_total_phase1(Tape<S>& tape, ModelBundle<S>& m, const Batch& batch_a,
                                const Batch& batch_b, const ExperimentConfig& cfg) {
    Phase1Loss<S> out;
    out.node.fill(-1);

    const Tensor<S> f1a = m.e1.forward(tape, m.store, batch_a.image, BnMode::Train);
    const Tensor<S> f1b = m.e1.forward(tape, m.store, batch_b.image, BnMode::Train);
    const Tensor<S> f2a = m.e2.forward(tape, m.store, batch_a.image, BnMode::Train);

    const TaskTargets<S> ta = targets_of<S>(batch_a);
    const TaskTargets<S> tb = targets_of<S>(batch_b);

    std::array<std::optional<Tensor<S>>, kNumComponents> comp;
    comp[0] = loss_task(tape, m.tasks.t1, m.d1.forward(tape, m.store, f1a, BnMode::Train), ta);
    comp[1] = loss_task(tape, m.tasks.t1, m.d1.forward(tape, m.store, f1b, BnMode::Train), tb);
    comp[2] = loss_task(tape, m.tasks.t2, m.d2.forward(tape, m.store, f2a, BnMode::Train), ta);
    if (m.tasks.has_aux) {
        comp[3] =
            loss_task(tape, m.tasks.aux, m.daux.forward(tape, m.store, f1a, BnMode::Train), ta);
        comp[4] =
            loss_task(tape, m.tasks.aux, m.daux.forward(tape, m.store, f1b, BnMode::Train), tb);
        comp[5] =
            loss_task(tape, m.tasks.aux, m.daux.forward(tape, m.store, f2a, BnMode::Train), ta);
    }
    comp[6] = loss_nda(tape, f1a, f1b);

    const double w_aux = (m.tasks.has_aux && cfg.aux_on) ? cfg.lambda_aux : 0.0;
    out.weight = {cfg.lambda_t1, cfg.lambda_t1, cfg.lambda_t2, w_aux,
                  w_aux,         w_aux,         cfg.nda ? cfg.lambda_nda : 0.0};

    std::optional<Tensor<S>> acc;
    for (int i = 0; i < kNumComponents; ++i) {
        if (!comp[i]) continue;
        out.value[i] = static_cast<double>(comp[i]->item());
        out.node[i] = comp[i]->node;
        if (out.weight[i] == 0.0) continue;
        Tensor<S> w = scalar_mul(tape, *comp[i], static_cast<S>(out.weight[i]));
        acc = acc ? add(tape, *acc, w) : w;
    }
    check(acc.has_value(), "phase1 loss: all components switched off");
    out.total = *acc;
    return out;
}

// ---------------------------------------------------------------------------
// evaluation

enum class EvalPath { N1, N2, Transfer };  // D1(E1(x)) | D2(E2(x)) | D2(G(E1(x)))

template <class S>
Tensor<S> forward_path(Tape<S>& tape, ModelBundle<S>& m, const Tensor<S>& images, EvalPath path,
                       const ExperimentConfig& cfg) {
    switch (path) {
        case EvalPath::N1:
            return m.d1.forward(tape, m.store, m.e1.forward(tape, m.store, images, BnMode::Eval),
                                BnMode::Eval);
        case EvalPath::N2:
            return m.d2.forward(tape, m.store, m.e2.forward(tape, m.store, images, BnMode::Eval),
                                BnMode::Eval);
        case EvalPath::Transfer: {
            const BnMode gmode =
                cfg.transfer_bn_infer == "train" ? BnMode::Train : BnMode::Eval;
            Tensor<S> f = m.e1.forward(tape, m.store, images, BnMode::Eval);
            return m.d2.forward(tape, m.store, m.g.forward(tape, m.store, f, gmode), BnMode::Eval);
        }
    }
    throw Error("forward_path: unknown path");
}

// Full-split evaluation of a depth or semseg head; bit-exact accumulators.
inline MetricsReport evaluate_model(ModelBundle<float>& m, const DatasetSplit& split,
                                    TaskKind task, EvalPath path, const ExperimentConfig& cfg,
                                    const std::string& name) {
    check(task == TaskKind::Semseg || task == TaskKind::Depth,
          "evaluate_model: only depth and semseg are scored");
    MetricsReport report;
    report.name = name;
    ConfusionMatrix cm(cfg.num_classes);
    DepthAccumulator depth_acc;
    const int bs = std::max(1, cfg.batch_size);
    for (std::size_t start = 0; start < split.size(); start += bs) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(split.size(), start + bs); ++i) idx.push_back(i);
        std::vector<const Tensor<float>*> imgs;
        for (std::size_t i : idx) imgs.push_back(&split.image(i));
        Tensor<float> images = stack_batch(imgs);
        Tape<float> tape;  // inference only; nothing is tracked
        Tensor<float> pred = forward_path(tape, m, images, path, cfg);
        const int B = pred.shape[0], C = pred.shape[1], H = pred.shape[2], W = pred.shape[3];
        for (int b = 0; b < B; ++b) {
            const std::size_t sample = idx[b];
            if (task == TaskKind::Semseg) {
                std::vector<int> hard(static_cast<std::size_t>(H) * W);
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        int best = 0;
                        float bv = pred.at4(b, 0, y, x);
                        for (int c = 1; c < C; ++c)
                            if (pred.at4(b, c, y, x) > bv) bv = pred.at4(b, best = c, y, x);
                        hard[static_cast<std::size_t>(y) * W + x] = best;
                    }
                cm.accumulate(hard, split.labels(sample), kIgnoreIndex);
                report.pixels += hard.size();
            } else {
                const Tensor<float>& gt = split.depth(sample);
                const auto& valid = split.depth_valid(sample);
                const std::vector<int>* lab = nullptr;
                if (cfg.exclude_sky_depth) lab = &split.labels(sample);
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const std::size_t p = static_cast<std::size_t>(y) * W + x;
                        if (!valid[p]) continue;
                        if (lab && (*lab)[p] == kClassSky) continue;
                        depth_acc.add(std::max(pred.at4(b, 0, y, x), 1e-3f), gt.data[p]);
                        ++report.pixels;
                    }
            }
        }
    }
    if (task == TaskKind::Semseg)
        report.seg = miou_acc(cm);
    else
        report.depth = depth_acc.finalize();
    report.validate();
    return report;
}

// Scalar used for best-checkpoint selection; higher is better.
inline double selection_score(const MetricsReport& r) {
    if (r.seg) return r.seg->miou;
    check(r.depth.has_value(), "selection_score: empty report");
    return -r.depth->abs_rel;
}

// ---------------------------------------------------------------------------
// training loops

struct LogRow {
    int phase = 1;
    int step = 0;
    std::array<double, kNumComponents> comp{};
    double total = 0.0;
    double val = std::numeric_limits<double>::quiet_NaN();
    bool has_val = false;
};

struct TrainSummary {
    std::vector<LogRow> log;
    double best_score = -std::numeric_limits<double>::infinity();
    int best_step = -1;
    double initial_total = 0.0, final_total = 0.0;
};

namespace detail {

inline std::string log_tail(const std::vector<LogRow>& log, std::size_t n = 5) {
    std::ostringstream os;
    for (std::size_t i = log.size() > n ? log.size() - n : 0; i < log.size(); ++i)
        os << "phase " << log[i].phase << " step " << log[i].step << " total " << log[i].total
           << "\n";
    return os.str();
}

inline void throw_divergence(int phase, int step, const std::vector<LogRow>& log) {
    throw DivergenceError("training diverged (non-finite loss) at phase " +
                              std::to_string(phase) + " step " + std::to_string(step),
                          log_tail(log));
}

template <class S>
Optimizer<S> make_optimizer(const ExperimentConfig& cfg) {
    Optimizer<S> opt;
    opt.kind = cfg.optimizer == "adam" ? OptimKind::Adam : OptimKind::SgdMomentum;
    opt.lr = static_cast<S>(cfg.lr);
    opt.beta1 = static_cast<S>(cfg.beta1);
    opt.beta2 = static_cast<S>(cfg.beta2);
    opt.weight_decay = static_cast<S>(cfg.weight_decay);
    return opt;
}

// leaf node ids of trainable parameters under `prefix` (after track_trainable)
template <class S>
std::set<int> param_leaves(const ParameterStore<S>& store, const std::string& prefix) {
    std::set<int> out;
    for (const auto& [name, p] : store.params)
        if (p.node >= 0 && name.rfind(prefix, 0) == 0) out.insert(p.node);
    return out;
}

template <class S>
bool component_touches(const Tape<S>& tape, int comp_node, const std::set<int>& leaves) {
    for (int l : tape.reachable_leaves(comp_node))
        if (leaves.count(l)) return true;
    return false;
}

}  // namespace detail

// Joint phase-1 training. `train_b` may alias `train_a` (the target-as-source
// oracle trains both streams on the same domain). Model selection runs N2 on
// `val` every eval_every steps; the best snapshot lands in checkpoints_dir.
// The first step additionally audits the tape: no B-domain loss component may
// reach a parameter of the second encoder or its task decoder.
inline TrainSummary train_phase1(ModelBundle<float>& m, const DatasetSplit& train_a,
                                 const DatasetSplit& train_b, const DatasetSplit& val,
                                 const ExperimentConfig& cfg, std::uint64_t seed,
                                 const std::string& checkpoints_dir) {
    TrainSummary out;
    Optimizer<float> opt = detail::make_optimizer<float>(cfg);
    Rng rng_a(derive_seed(seed, 21)), rng_b(derive_seed(seed, 22));

    BatchNeeds needs_a, needs_b;
    add_task_need(needs_a, m.tasks.t1);
    add_task_need(needs_a, m.tasks.t2);
    add_task_need(needs_b, m.tasks.t1);
    if (m.tasks.has_aux) {
        add_task_need(needs_a, m.tasks.aux);
        add_task_need(needs_b, m.tasks.aux);
    }

    ParameterStore<float> best;
    for (int step = 1; step <= cfg.steps_per_phase; ++step) {
        const Batch ba = draw_batch(train_a, sample_indices(rng_a, train_a.size(), cfg.batch_size),
                                    needs_a);
        const Batch bb = draw_batch(train_b, sample_indices(rng_b, train_b.size(), cfg.batch_size),
                                    needs_b);
        Tape<float> tape;
        m.store.track_trainable(tape);
        Phase1Loss<float> loss = loss_total_phase1(tape, m, ba, bb, cfg);

        LogRow row;
        row.phase = 1;
        row.step = step;
        row.comp = loss.value;
        row.total = static_cast<double>(loss.total.item());
        if (!std::isfinite(row.total)) {
            out.log.push_back(row);
            detail::throw_divergence(1, step, out.log);
        }
        if (step == 1) {
            out.initial_total = row.total;
            // hygiene on the graph itself: B-domain components must not touch
            // the second task network
            const std::set<int> e2 = detail::param_leaves(m.store, "E2/");
            const std::set<int> d2 = detail::param_leaves(m.store, "D2/");
            for (int i : {1, 4}) {  // t1_b, aux1_b
                if (loss.node[i] < 0) continue;
                check(!detail::component_touches(tape, loss.node[i], e2),
                      "phase1: B-domain component reaches E2");
                check(!detail::component_touches(tape, loss.node[i], d2),
                      "phase1: B-domain component reaches D2");
            }
        }
        // weighted-sum identity of the total loss
        double recon = 0.0;
        for (int i = 0; i < kNumComponents; ++i) recon += loss.weight[i] * loss.value[i];
        check(std::abs(recon - row.total) <= 1e-6 * std::max(1.0, std::abs(recon)),
              "phase1: total loss does not match its component decomposition");

        tape.backward(loss.total);
        opt.step(m.store, tape);
        m.store.untrack();
        out.final_total = row.total;

        if (step % cfg.eval_every == 0 || step == cfg.steps_per_phase) {
            MetricsReport r = evaluate_model(m, val, m.tasks.t2, EvalPath::N2, cfg, "val");
            row.val = selection_score(r);
            row.has_val = true;
            if (row.val > out.best_score) {
                out.best_score = row.val;
                out.best_step = step;
                best = m.store;
            }
        }
        out.log.push_back(row);
    }
    m.store = best;  // continue from the selected snapshot
    if (!checkpoints_dir.empty()) m.store.save(checkpoints_dir);
    return out;
}

// Single-network training (baseline and target-oracle): N2 on one domain,
// plain task loss. Logged in the t2_a component slot.
inline TrainSummary train_single(ModelBundle<float>& m, const DatasetSplit& train,
                                 const DatasetSplit& val, const ExperimentConfig& cfg,
                                 std::uint64_t seed, const std::string& checkpoints_dir) {
    TrainSummary out;
    Optimizer<float> opt = detail::make_optimizer<float>(cfg);
    Rng rng(derive_seed(seed, 21));
    BatchNeeds needs;
    add_task_need(needs, m.tasks.t2);

    ParameterStore<float> best;
    for (int step = 1; step <= cfg.steps_per_phase; ++step) {
        const Batch b = draw_batch(train, sample_indices(rng, train.size(), cfg.batch_size), needs);
        Tape<float> tape;
        m.store.track_trainable(tape);
        Tensor<float> f = m.e2.forward(tape, m.store, b.image, BnMode::Train);
        Tensor<float> pred = m.d2.forward(tape, m.store, f, BnMode::Train);
        Tensor<float> loss = loss_task(tape, m.tasks.t2, pred, targets_of<float>(b));

        LogRow row;
        row.phase = 1;
        row.step = step;
        row.comp[2] = static_cast<double>(loss.item());
        row.total = row.comp[2] * cfg.lambda_t2;
        if (!std::isfinite(row.total)) {
            out.log.push_back(row);
            detail::throw_divergence(1, step, out.log);
        }
        if (step == 1) out.initial_total = row.total;
        Tensor<float> weighted = scalar_mul(tape, loss, static_cast<float>(cfg.lambda_t2));
        tape.backward(weighted);
        opt.step(m.store, tape);
        m.store.untrack();
        out.final_total = row.total;

        if (step % cfg.eval_every == 0 || step == cfg.steps_per_phase) {
            MetricsReport r = evaluate_model(m, val, m.tasks.t2, EvalPath::N2, cfg, "val");
            row.val = selection_score(r);
            row.has_val = true;
            if (row.val > out.best_score) {
                out.best_score = row.val;
                out.best_step = step;
                best = m.store;
            }
        }
        out.log.push_back(row);
    }
    m.store = best;
    if (!checkpoints_dir.empty()) m.store.save(checkpoints_dir);
    return out;
}

// Mean transfer loss over a validation split (phase-2 model selection).
inline double transfer_val_loss(ModelBundle<float>& m, const DatasetSplit& val,
                                const ExperimentConfig& cfg) {
    const TrReduction red = tr_reduction_from_string(cfg.transfer_reduction);
    double acc = 0.0;
    std::size_t n = 0;
    const int bs = std::max(1, cfg.batch_size);
    for (std::size_t start = 0; start < val.size(); start += bs) {
        std::vector<const Tensor<float>*> imgs;
        for (std::size_t i = start; i < std::min(val.size(), start + bs); ++i)
            imgs.push_back(&val.image(i));
        Tensor<float> images = stack_batch(imgs);
        Tape<float> tape;
        Tensor<float> f1 = m.e1.forward(tape, m.store, images, BnMode::Eval);
        Tensor<float> f2 = m.e2.forward(tape, m.store, images, BnMode::Eval);
        Tensor<float> t = m.g.forward(tape, m.store, f1, BnMode::Eval);
        acc += static_cast<double>(loss_transfer(tape, t, f2, red).item());
        ++n;
    }
    check(n > 0, "transfer_val_loss: empty split");
    return acc / static_cast<double>(n);
}

// Phase 2: freeze everything except G and regress G(E1(x)) onto E2(x) on
// source-domain images. Frozen encoders run with eval batchnorm; their
// outputs never enter the tape, which doubles as the enforcement that no
// gradient can reach them.
inline TrainSummary train_phase2(ModelBundle<float>& m, const DatasetSplit& train,
                                 const DatasetSplit& val, const ExperimentConfig& cfg,
                                 std::uint64_t seed, const std::string& checkpoints_dir) {
    for (const char* p : {"E1/", "E2/", "D1/", "D2/"}) m.store.freeze(p);
    if (m.tasks.has_aux) m.store.freeze("Daux/");
    check(m.store.trainable_count() == m.store.count_with_prefix("G/"),
          "phase2: trainable set is not exactly the transfer network");

    const TrReduction red = tr_reduction_from_string(cfg.transfer_reduction);
    TrainSummary out;
    Optimizer<float> opt = detail::make_optimizer<float>(cfg);
    Rng rng(derive_seed(seed, 31));

    {
        // step-0 reference point for the "validation loss improves" contract
        LogRow row;
        row.phase = 2;
        row.step = 0;
        row.total = row.val = transfer_val_loss(m, val, cfg);
        row.has_val = true;
        out.log.push_back(row);
    }

    ParameterStore<float> best;
    for (int step = 1; step <= cfg.steps_per_phase; ++step) {
        const std::vector<std::size_t> idx = sample_indices(rng, train.size(), cfg.batch_size);
        std::vector<const Tensor<float>*> imgs;
        for (std::size_t i : idx) imgs.push_back(&train.image(i));
        Tensor<float> images = stack_batch(imgs);

        Tape<float> tape;
        m.store.track_trainable(tape);
        Tensor<float> f1 = m.e1.forward(tape, m.store, images, BnMode::Eval);
        Tensor<float> f2 = m.e2.forward(tape, m.store, images, BnMode::Eval);
        check(!f1.tracked() && !f2.tracked(), "phase2: frozen encoder output appeared on tape");
        Tensor<float> transferred = m.g.forward(tape, m.store, f1, BnMode::Train);
        Tensor<float> loss = loss_transfer(tape, transferred, f2, red);

        LogRow row;
        row.phase = 2;
        row.step = step;
        row.total = static_cast<double>(loss.item());
        if (!std::isfinite(row.total)) {
            out.log.push_back(row);
            detail::throw_divergence(2, step, out.log);
        }
        if (step == 1) out.initial_total = row.total;
        tape.backward(loss);
        opt.step(m.store, tape);
        m.store.untrack();
        out.final_total = row.total;

        if (step % cfg.eval_every == 0 || step == cfg.steps_per_phase) {
            const double v = transfer_val_loss(m, val, cfg);
            row.val = v;
            row.has_val = true;
            if (-v > out.best_score) {  // lower transfer loss is better
                out.best_score = -v;
                out.best_step = step;
                best = m.store;
            }
        }
        out.log.push_back(row);
    }
    m.store = best;
    if (!checkpoints_dir.empty()) m.store.save(checkpoints_dir);
    for (const char* p : {"E1/", "E2/", "D1/", "D2/"}) m.store.unfreeze(p);
    if (m.tasks.has_aux) m.store.unfreeze("Daux/");
    return out;
}

// ---------------------------------------------------------------------------
// run orchestration

struct RunResult {
    MetricsReport test_report;          // target-domain test metrics
    nlohmann::json report;              // full report.json content
    TrainSummary phase1, phase2;        // phase2 empty for baseline / oracle
    AccessAudit audit;
};

namespace detail {

inline void write_log_csv(const std::string& path, const std::vector<LogRow>& rows) {
    std::ofstream os(path);
    check(os.is_open(), "run: cannot write " + path);
    os << "phase,step";
    for (const char* n : kComponentNames) os << "," << n;
    os << ",total,val\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.phase << "," << r.step;
        for (double c : r.comp) os << "," << c;
        os << "," << r.total << ",";
        if (r.has_val) os << r.val;
        os << "\n";
    }
    check(os.good(), "run: failed writing " + path);
}

inline std::set<Field> fields_for_tasks(std::initializer_list<TaskKind> tasks) {
    std::set<Field> f = {Field::Image};
    for (TaskKind t : tasks) {
        switch (t) {
            case TaskKind::Depth: f.insert(Field::Depth); break;
            case TaskKind::Semseg: f.insert(Field::Semseg); break;
            case TaskKind::Edge: f.insert(Field::Edges); break;
            case TaskKind::Reconstruction: break;
        }
    }
    return f;
}

inline nlohmann::json audit_json(const AccessAudit& a) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : a.counts) j[k] = v;
    return j;
}

inline nlohmann::json summary_json(const TrainSummary& s) {
    nlohmann::json j;
    j["best_step"] = s.best_step;
    j["best_score"] = s.best_score;
    j["initial_total"] = s.initial_total;
    j["final_total"] = s.final_total;
    j["steps"] = s.log.size();
    return j;
}

}  // namespace detail

// One experiment cell: trains the requested variant end to end, evaluates on
// the domain-B test split and writes run.json / log.csv / report.json plus
// checkpoints into `run_dir`. Label-hygiene policies are installed on every
// training split before any file is read, and the access audit is persisted
// in the report.
inline RunResult run_variant(const ExperimentConfig& cfg, std::uint64_t seed,
                             const std::string& run_dir) {
    namespace fs = std::filesystem;
    cfg.validate();
    const ScenarioTasks tasks = resolve_tasks(cfg);
    fs::create_directories(fs::path(run_dir) / "checkpoints");

    {
        nlohmann::json run;
        run["config"] = config_json(cfg);
        run["config_hash"] = config_hash(cfg);
        run["seed"] = seed;
        std::ofstream os(fs::path(run_dir) / "run.json");
        os << run.dump(2) << "\n";
        check(os.good(), "run: cannot write run.json");
    }

    RunResult out;
    ModelBundle<float> m = build_models<float>(cfg, derive_seed(seed, 1));
    const std::string ckpt1 = (fs::path(run_dir) / "checkpoints" / "phase1_best").string();
    const std::string ckpt2 = (fs::path(run_dir) / "checkpoints" / "phase2_best").string();

    auto make_split = [&](const char* domain, const char* split) {
        return DatasetSplit(cfg.data_root, domain, split, &out.audit);
    };
    auto maybe_proxy = [&](DatasetSplit& s, std::uint64_t stream) {
        if (cfg.depth_proxy_noise)
            s.enable_depth_proxy(cfg.depth_proxy_amplitude, cfg.depth_proxy_invalid,
                                 derive_seed(seed, stream));
    };

    std::vector<LogRow> all_rows;

    if (cfg.variant == "baseline") {
        // supervised on A only; never constructs a B training split
        DatasetSplit train_a = make_split("A", "train"), val_a = make_split("A", "val");
        for (auto* s : {&train_a, &val_a}) s->set_allowed(detail::fields_for_tasks({tasks.t2}));
        maybe_proxy(train_a, 41);
        maybe_proxy(val_a, 42);
        out.phase1 = train_single(m, train_a, val_a, cfg, seed, ckpt1);
    } else if (cfg.variant == "oracle") {
        // upper bound: supervised on B; domain A is never opened
        DatasetSplit train_b = make_split("B", "train"), val_b = make_split("B", "val");
        for (auto* s : {&train_b, &val_b}) s->set_allowed(detail::fields_for_tasks({tasks.t2}));
        out.phase1 = train_single(m, train_b, val_b, cfg, seed, ckpt1);
    } else if (cfg.variant == "transfer-oracle") {
        // full two-phase pipeline with both streams on the target domain
        DatasetSplit train_b = make_split("B", "train"), val_b = make_split("B", "val");
        std::set<Field> fb = detail::fields_for_tasks({tasks.t1, tasks.t2});
        if (tasks.has_aux) {
            auto extra = detail::fields_for_tasks({tasks.aux});
            fb.insert(extra.begin(), extra.end());
        }
        for (auto* s : {&train_b, &val_b}) s->set_allowed(fb);
        out.phase1 = train_phase1(m, train_b, train_b, val_b, cfg, seed, ckpt1);
        DatasetSplit p2_train = make_split("B", "train"), p2_val = make_split("B", "val");
        for (auto* s : {&p2_train, &p2_val}) s->set_allowed({Field::Image});
        out.phase2 = train_phase2(m, p2_train, p2_val, cfg, seed, ckpt2);
    } else {  // atdt
        DatasetSplit train_a = make_split("A", "train"), val_a = make_split("A", "val");
        DatasetSplit train_b = make_split("B", "train");
        std::set<Field> fa = detail::fields_for_tasks({tasks.t1, tasks.t2});
        std::set<Field> fb = detail::fields_for_tasks({tasks.t1});  // no t2 labels on B, ever
        if (tasks.has_aux) {
            auto extra = detail::fields_for_tasks({tasks.aux});
            fa.insert(extra.begin(), extra.end());
            fb.insert(extra.begin(), extra.end());
        }
        train_a.set_allowed(fa);
        val_a.set_allowed(detail::fields_for_tasks({tasks.t2}));  // N2 model selection on A
        train_b.set_allowed(fb);
        maybe_proxy(train_a, 41);
        if (cfg.depth_proxy_noise && tasks.t1 == TaskKind::Depth) maybe_proxy(train_b, 43);
        out.phase1 = train_phase1(m, train_a, train_b, val_a, cfg, seed, ckpt1);
        DatasetSplit p2_train = make_split("A", "train"), p2_val = make_split("A", "val");
        for (auto* s : {&p2_train, &p2_val}) s->set_allowed({Field::Image});
        out.phase2 = train_phase2(m, p2_train, p2_val, cfg, seed, ckpt2);
    }

    all_rows = out.phase1.log;
    all_rows.insert(all_rows.end(), out.phase2.log.begin(), out.phase2.log.end());
    detail::write_log_csv((fs::path(run_dir) / "log.csv").string(), all_rows);

    // target-domain test evaluation; direct head for the supervised variants,
    // the transferred features otherwise
    const EvalPath test_path = (cfg.variant == "baseline" || cfg.variant == "oracle")
                                   ? EvalPath::N2
                                   : EvalPath::Transfer;
    DatasetSplit test_b(cfg.data_root, "B", "test", &out.audit);
    test_b.set_allowed(detail::fields_for_tasks({tasks.t2, TaskKind::Semseg}));
    out.test_report =
        evaluate_model(m, test_b, tasks.t2, test_path, cfg, cfg.variant);
    out.test_report.config_hash = config_hash(cfg);
    out.test_report.seed = seed;

    nlohmann::json report;
    report["variant"] = cfg.variant;
    report["scenario"] = cfg.scenario;
    report["seed"] = seed;
    report["config_hash"] = config_hash(cfg);
    report["fingerprint"] = pipeline_fingerprint(m);
    report["test"] = report_json(out.test_report);
    report["phase1"] = detail::summary_json(out.phase1);
    if (!out.phase2.log.empty()) report["phase2"] = detail::summary_json(out.phase2);

    if (cfg.variant == "atdt") {
        // source-domain sanity: transferred features decoded on A should land
        // near the direct second network on A
        DatasetSplit test_a(cfg.data_root, "A", "test", &out.audit);
        test_a.set_allowed(detail::fields_for_tasks({tasks.t2, TaskKind::Semseg}));
        MetricsReport direct =
            evaluate_model(m, test_a, tasks.t2, EvalPath::N2, cfg, "direct_a");
        MetricsReport via_g =
            evaluate_model(m, test_a, tasks.t2, EvalPath::Transfer, cfg, "transfer_a");
        report["sanity"] = {{"direct_a", report_json(direct)},
                            {"transfer_a", report_json(via_g)},
                            {"score_gap",
                             std::abs(selection_score(direct) - selection_score(via_g))}};
    }
    report["audit"] = detail::audit_json(out.audit);

    out.report = report;
    std::ofstream os(fs::path(run_dir) / "report.json");
    os << report.dump(2) << "\n";
    check(os.good(), "run: cannot write report.json");
    return out;
}

}  // namespace atdt

#endif  // ATDT_PIPELINE_HPP_
