#ifndef ATDT_GRADCHECK_HPP_
#define ATDT_GRADCHECK_HPP_

#include <cmath>
#include <functional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "atdt/tensor.hpp"

// Central finite-difference verification of recorded gradients. Runs in
// 64-bit only: finite differences are unreliable at f32.

namespace atdt {

struct GradCheckParamReport {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t entries_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckParamReport> params;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

// f(tape) must rebuild the scalar loss from the current values of `params`
// (which carry tape node ids when tracked). `max_entries_per_param` < 0
// checks every entry; otherwise a deterministic subsample is used.
inline GradCheckReport finite_difference_check(
    const std::function<Tensor<double>(Tape<double>&)>& f,
    const std::vector<std::pair<std::string, Tensor<double>*>>& params, double step = 1e-4,
    double tolerance = 1e-4, int max_entries_per_param = -1, std::uint64_t seed = 17) {
    GradCheckReport report;
    report.tolerance = tolerance;

    // analytic pass
    Tape<double> tape;
    for (auto& [name, p] : params) track(tape, *p);
    Tensor<double> loss = f(tape);
    check(loss.scalar(), "finite_difference_check: loss must be scalar");
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) analytic.push_back(tape.grad(p->node));
    for (auto& [name, p] : params) p->node = -1;

    auto eval = [&]() {
        Tape<double> t;
        return f(t).item();
    };

    Rng rng(seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, p] = params[pi];
        GradCheckParamReport pr;
        pr.name = name;
        std::vector<std::size_t> idx;
        if (max_entries_per_param < 0 ||
            p->numel() <= static_cast<std::size_t>(max_entries_per_param)) {
            idx.resize(p->numel());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        } else {
            for (int i = 0; i < max_entries_per_param; ++i)
                idx.push_back(static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(p->numel()) - 1)));
        }
        for (std::size_t i : idx) {
            const double orig = p->data[i];
            p->data[i] = orig + step;
            const double fp = eval();
            p->data[i] = orig - step;
            const double fm = eval();
            p->data[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = analytic[pi][i];
            const double scale = std::max(std::abs(fd), std::abs(an));
            // absolute comparison below this scale: both gradients vanish
            const double err = scale < 1e-6 ? std::abs(fd - an) : std::abs(fd - an) / scale;
            pr.max_rel_err = std::max(pr.max_rel_err, err);
            ++pr.entries_checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, pr.max_rel_err);
        report.params.push_back(std::move(pr));
    }
    report.pass = report.max_rel_err < tolerance;
    return report;
}

}  // namespace atdt

#endif  // ATDT_GRADCHECK_HPP_
