#ifndef ATDT_OPTIMIZER_HPP_
#define ATDT_OPTIMIZER_HPP_

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "atdt/nn.hpp"

namespace atdt {

enum class OptimKind { Adam, SgdMomentum };

// Adam (default: lr 1e-4, betas 0.9/0.999, eps 1e-8) or SGD with momentum.
// step() is a pure function of (params, grads, state); frozen sub-stores are
// untouched. A trainable parameter without a tape node is an error.
template <class S>
class Optimizer {
public:
    OptimKind kind = OptimKind::Adam;
    S lr = S(1e-4);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    S momentum = S(0.9);
    S weight_decay = S(0);
    long step_count = 0;

    void step(ParameterStore<S>& store, Tape<S>& tape) {
        ++step_count;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), step_count));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), step_count));
        for (auto& [name, p] : store.params) {
            if (store.frozen(name)) continue;
            check(p.node >= 0, "optimizer: missing gradient for trainable parameter " + name);
            const std::vector<S>& g = tape.grad(p.node);
            if (kind == OptimKind::Adam) {
                auto& m = slot(m_, name, p.numel());
                auto& v = slot(v_, name, p.numel());
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    S gi = g[i] + weight_decay * p.data[i];
                    m[i] = beta1 * m[i] + (S(1) - beta1) * gi;
                    v[i] = beta2 * v[i] + (S(1) - beta2) * gi * gi;
                    const S mhat = m[i] / bc1;
                    const S vhat = v[i] / bc2;
                    p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                }
            } else {
                auto& m = slot(m_, name, p.numel());
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    S gi = g[i] + weight_decay * p.data[i];
                    m[i] = momentum * m[i] + gi;
                    p.data[i] -= lr * m[i];
                }
            }
        }
    }

private:
    static std::vector<S>& slot(std::map<std::string, std::vector<S>>& state,
                                const std::string& name, std::size_t n) {
        auto it = state.find(name);
        if (it == state.end()) it = state.emplace(name, std::vector<S>(n, S(0))).first;
        return it->second;
    }

    std::map<std::string, std::vector<S>> m_, v_;
};

}  // namespace atdt

#endif  // ATDT_OPTIMIZER_HPP_
