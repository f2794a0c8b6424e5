#ifndef ATDT_TENSOR_HPP_
#define ATDT_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "atdt/common.hpp"

// Reverse-mode autodiff core: Tensor + Tape + elementwise ops and reductions.
// Heavier structured ops (conv, batchnorm, upsampling) live in ops.hpp.
//
// A Tensor is a plain row-major value; it participates in differentiation only
// when its `node` refers into the active Tape. A Tape and its Tensors form a
// single-owner unit; independent tapes may run in parallel.

namespace atdt {

template <class S>
struct Tensor {
    std::vector<int> shape;  // rank 0 (scalar) .. 4, conventionally [B,C,H,W]
    std::vector<S> data;
    int node = -1;

    Tensor() = default;
    explicit Tensor(std::vector<int> sh, S fill = S(0)) : shape(std::move(sh)) {
        data.assign(numel_of(shape), fill);
    }
    Tensor(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        check(data.size() == numel_of(shape), "tensor: shape/data size mismatch");
    }

    static std::size_t numel_of(const std::vector<int>& sh) {
        std::size_t n = 1;
        for (int e : sh) {
            check(e > 0, "tensor: non-positive extent");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool tracked() const { return node >= 0; }
    bool scalar() const { return data.size() == 1; }
    S item() const {
        check(scalar(), "tensor: item() on non-scalar");
        return data[0];
    }

    // 4-d accessor, used by the structured ops.
    S& at4(int b, int c, int y, int x) {
        return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    S at4(int b, int c, int y, int x) const {
        return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
};

template <class S>
inline bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
    return a.shape == b.shape;
}

template <class S>
inline void check_finite(const Tensor<S>& t, const char* op) {
    for (S v : t.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw Error(std::string("non-finite value after op: ") + op);
}

#ifdef ATDT_DEBUG_CHECKS
#define ATDT_FINITE(t, op) ::atdt::check_finite((t), (op))
#else
#define ATDT_FINITE(t, op) ((void)0)
#endif

template <class S>
class Tape {
public:
    int leaf(std::size_t n) {
        nodes_.push_back(Node{std::vector<S>(n, S(0)), {}, nullptr, true});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int record(std::size_t out_n, std::vector<int> parents) {
        for (int p : parents)
            check(p >= 0 && p < static_cast<int>(nodes_.size()),
                  "tape: parent recorded after consumer");
        nodes_.push_back(Node{std::vector<S>(out_n, S(0)), std::move(parents), nullptr, false});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_backward(int id, std::function<void(Tape<S>&)> bw) { nodes_[id].bw = std::move(bw); }

    std::vector<S>& grad(int id) { return nodes_[id].grad; }
    const std::vector<S>& grad(int id) const { return nodes_[id].grad; }

    // Reverse accumulation from a scalar loss. Nodes not reachable from the
    // loss keep zero gradient and their backward rules never run.
    void backward(const Tensor<S>& loss) {
        check(loss.scalar(), "backward: loss must be scalar");
        check(loss.tracked(), "backward: loss not on tape");
        check(!backward_done_, "backward: called twice without re-recording");
        backward_done_ = true;
        std::vector<char> needed(nodes_.size(), 0);
        mark_reachable(loss.node, needed);
        nodes_[loss.node].grad.assign(1, S(1));
        for (int i = loss.node; i >= 0; --i) {
            if (!needed[i] || nodes_[i].leaf) continue;
            if (nodes_[i].bw) nodes_[i].bw(*this);
        }
    }

    // Leaf node ids reachable (via recorded ops) from `node`.
    std::vector<int> reachable_leaves(int node) const {
        if (node < 0) return {};
        std::vector<char> needed(nodes_.size(), 0);
        mark_reachable(node, needed);
        std::vector<int> out;
        for (int i = 0; i < static_cast<int>(nodes_.size()); ++i)
            if (needed[i] && nodes_[i].leaf) out.push_back(i);
        return out;
    }

    std::size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

    void clear() {
        nodes_.clear();
        backward_done_ = false;
    }

private:
    struct Node {
        std::vector<S> grad;
        std::vector<int> parents;
        std::function<void(Tape<S>&)> bw;
        bool leaf;
    };

    void mark_reachable(int node, std::vector<char>& needed) const {
        std::vector<int> stack{node};
        while (!stack.empty()) {
            int n = stack.back();
            stack.pop_back();
            if (n < 0 || needed[n]) continue;
            needed[n] = 1;
            for (int p : nodes_[n].parents) stack.push_back(p);
        }
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

template <class S>
inline Tensor<S> make_leaf(Tape<S>& tape, std::vector<int> shape, std::vector<S> data) {
    Tensor<S> t(std::move(shape), std::move(data));
    t.node = tape.leaf(t.numel());
    return t;
}

// Attach an existing value to the tape as a leaf (in place).
template <class S>
inline void track(Tape<S>& tape, Tensor<S>& t) {
    t.node = tape.leaf(t.numel());
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

// y_i = fwd(a_i); da_i += bwd(a_i) * dy_i
template <class S, class Fwd, class Bwd>
Tensor<S> unary_op(Tape<S>& tape, const Tensor<S>& a, const char* name, Fwd fwd, Bwd bwd) {
    Tensor<S> out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = fwd(a.data[i]);
    ATDT_FINITE(out, name);
    if (a.tracked()) {
        out.node = tape.record(out.numel(), {a.node});
        tape.set_backward(out.node, [an = a.node, on = out.node, av = a.data, bwd](Tape<S>& tp) {
            const std::vector<S>& go = tp.grad(on);
            std::vector<S>& ga = tp.grad(an);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += bwd(av[i]) * go[i];
        });
    }
    return out;
}

// y_i = fwd(a_i, b_i) with per-input partials.
template <class S, class Fwd, class Da, class Db>
Tensor<S> binary_op(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b, const char* name,
                    Fwd fwd, Da da, Db db) {
    check(same_shape(a, b), std::string(name) + ": shape mismatch");
    Tensor<S> out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = fwd(a.data[i], b.data[i]);
    ATDT_FINITE(out, name);
    if (a.tracked() || b.tracked()) {
        std::vector<int> parents;
        if (a.tracked()) parents.push_back(a.node);
        if (b.tracked()) parents.push_back(b.node);
        out.node = tape.record(out.numel(), parents);
        tape.set_backward(out.node, [an = a.node, bn = b.node, on = out.node, av = a.data,
                                     bv = b.data, da, db](Tape<S>& tp) {
            const std::vector<S>& go = tp.grad(on);
            if (an >= 0) {
                std::vector<S>& ga = tp.grad(an);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += da(av[i], bv[i]) * go[i];
            }
            if (bn >= 0) {
                std::vector<S>& gb = tp.grad(bn);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += db(av[i], bv[i]) * go[i];
            }
        });
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        tape, a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
        [](S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        tape, a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
        [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        tape, a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; },
        [](S x, S) { return x; });
}

template <class S>
Tensor<S> add_scalar(Tape<S>& tape, const Tensor<S>& a, S c) {
    return detail::unary_op(
        tape, a, "add_scalar", [c](S x) { return x + c; }, [](S) { return S(1); });
}

template <class S>
Tensor<S> scalar_mul(Tape<S>& tape, const Tensor<S>& a, S c) {
    return detail::unary_op(
        tape, a, "scalar_mul", [c](S x) { return x * c; }, [c](S) { return c; });
}

template <class S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& a) {
    return detail::unary_op(
        tape, a, "relu", [](S x) { return x > S(0) ? x : S(0); },
        [](S x) { return x > S(0) ? S(1) : S(0); });
}

// subgradient at 0 is 0
template <class S>
Tensor<S> abs_op(Tape<S>& tape, const Tensor<S>& a) {
    return detail::unary_op(
        tape, a, "abs", [](S x) { return x < S(0) ? -x : x; },
        [](S x) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <class S>
Tensor<S> square(Tape<S>& tape, const Tensor<S>& a) {
    return detail::unary_op(
        tape, a, "square", [](S x) { return x * x; }, [](S x) { return S(2) * x; });
}

// inputs clamped to >= 1e-12; derivative 0 inside the clamped region
template <class S>
Tensor<S> log_op(Tape<S>& tape, const Tensor<S>& a) {
    constexpr S kEps = S(1e-12);
    return detail::unary_op(
        tape, a, "log", [](S x) { return std::log(x < kEps ? kEps : x); },
        [](S x) { return x < kEps ? S(0) : S(1) / x; });
}

template <class S>
Tensor<S> sqrt_op(Tape<S>& tape, const Tensor<S>& a) {
    constexpr S kEps = S(1e-12);
    return detail::unary_op(
        tape, a, "sqrt", [](S x) { return std::sqrt(x < kEps ? kEps : x); },
        [](S x) { return x < kEps ? S(0) : S(0.5) / std::sqrt(x); });
}

template <class S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& a) {
    return detail::unary_op(
        tape, a, "sigmoid",
        [](S x) { return S(1) / (S(1) + std::exp(-x)); },
        [](S x) {
            S s = S(1) / (S(1) + std::exp(-x));
            return s * (S(1) - s);
        });
}

// numerically stable softplus; output strictly positive
template <class S>
Tensor<S> softplus(Tape<S>& tape, const Tensor<S>& a) {
    return detail::unary_op(
        tape, a, "softplus",
        [](S x) { return x > S(20) ? x : std::log1p(std::exp(x)); },
        [](S x) { return S(1) / (S(1) + std::exp(-x)); });
}

template <class S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& a) {
    S acc = S(0);
    for (S v : a.data) acc += v;
    Tensor<S> out(std::vector<int>{}, std::vector<S>{acc});
    ATDT_FINITE(out, "sum");
    if (a.tracked()) {
        out.node = tape.record(1, {a.node});
        tape.set_backward(out.node, [an = a.node, on = out.node](Tape<S>& tp) {
            S g = tp.grad(on)[0];
            std::vector<S>& ga = tp.grad(an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

template <class S>
Tensor<S> mean(Tape<S>& tape, const Tensor<S>& a) {
    S acc = S(0);
    for (S v : a.data) acc += v;
    S n = static_cast<S>(a.numel());
    Tensor<S> out(std::vector<int>{}, std::vector<S>{acc / n});
    ATDT_FINITE(out, "mean");
    if (a.tracked()) {
        out.node = tape.record(1, {a.node});
        tape.set_backward(out.node, [an = a.node, on = out.node, n](Tape<S>& tp) {
            S g = tp.grad(on)[0] / n;
            std::vector<S>& ga = tp.grad(an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

// Per-location L2 norm over the channel axis: [B,C,H,W] -> [B,H,W].
// Gradient at an all-zero channel vector is defined as 0.
template <class S>
Tensor<S> channel_l2_norm(Tape<S>& tape, const Tensor<S>& f) {
    check(f.rank() == 4, "channel_l2_norm: expected [B,C,H,W]");
    const int B = f.shape[0], C = f.shape[1], H = f.shape[2], W = f.shape[3];
    Tensor<S> out(std::vector<int>{B, H, W});
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        const S* fb = f.data.data() + static_cast<std::size_t>(b) * C * hw;
        S* ob = out.data.data() + static_cast<std::size_t>(b) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            S acc = S(0);
            for (int c = 0; c < C; ++c) {
                S v = fb[static_cast<std::size_t>(c) * hw + p];
                acc += v * v;
            }
            ob[p] = std::sqrt(acc);
        }
    }
    ATDT_FINITE(out, "channel_l2_norm");
    if (f.tracked()) {
        out.node = tape.record(out.numel(), {f.node});
        tape.set_backward(out.node, [fn = f.node, on = out.node, fv = f.data, ov = out.data, B, C,
                                     hw](Tape<S>& tp) {
            const std::vector<S>& go = tp.grad(on);
            std::vector<S>& gf = tp.grad(fn);
            for (int b = 0; b < B; ++b) {
                const S* fb = fv.data() + static_cast<std::size_t>(b) * C * hw;
                S* gb = gf.data() + static_cast<std::size_t>(b) * C * hw;
                const S* ob = ov.data() + static_cast<std::size_t>(b) * hw;
                const S* gob = go.data() + static_cast<std::size_t>(b) * hw;
                for (std::size_t p = 0; p < hw; ++p) {
                    if (ob[p] <= S(0)) continue;
                    S scale = gob[p] / ob[p];
                    for (int c = 0; c < C; ++c)
                        gb[static_cast<std::size_t>(c) * hw + p] +=
                            scale * fb[static_cast<std::size_t>(c) * hw + p];
                }
            }
        });
    }
    return out;
}

}  // namespace atdt

#endif  // ATDT_TENSOR_HPP_
