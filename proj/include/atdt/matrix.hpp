#ifndef ATDT_MATRIX_HPP_
#define ATDT_MATRIX_HPP_

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "atdt/pipeline.hpp"

// Experiment-matrix runner: schedules independent (cell, seed) runs across a
// bounded worker pool and aggregates completed reports into mean +/- spread
// tables. Each run is internally sequential and owns its run directory; the
// only shared state is the job queue index.

namespace atdt {

inline int worker_count() {
    const char* env = std::getenv("ATDT_WORKERS");
    if (!env) return 1;
    const int n = std::atoi(env);
    check(n >= 1 && n <= 256, "ATDT_WORKERS out of range");
    return n;
}

struct MatrixCell {
    std::string name;        // row label, also the run-directory component
    ExperimentConfig config;
};

struct CellOutcome {
    std::string name;
    std::vector<std::uint64_t> seeds;
    std::vector<MetricsReport> reports;  // aligned with seeds; empty name = missing
    std::vector<std::string> errors;     // "" on success
};

struct MatrixResult {
    std::vector<CellOutcome> cells;  // in submission order
};

// Runs every cell x seed; failures are captured per run and aggregation
// proceeds over the completed ones.
inline MatrixResult run_cells(const std::vector<MatrixCell>& cells,
                              const std::vector<std::uint64_t>& seeds,
                              const std::string& out_dir) {
    MatrixResult result;
    for (const auto& c : cells) {
        CellOutcome o;
        o.name = c.name;
        o.seeds = seeds;
        o.reports.resize(seeds.size());
        o.errors.resize(seeds.size());
        result.cells.push_back(std::move(o));
    }

    struct Job {
        std::size_t cell, seed_idx;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back({c, s});

    std::atomic<std::size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const std::size_t j = next.fetch_add(1);
            if (j >= jobs.size()) return;
            const Job job = jobs[j];
            const MatrixCell& cell = cells[job.cell];
            const std::uint64_t seed = seeds[job.seed_idx];
            const std::string dir =
                (std::filesystem::path(out_dir) / cell.name / ("seed" + std::to_string(seed)))
                    .string();
            try {
                RunResult r = run_variant(cell.config, seed, dir);
                result.cells[job.cell].reports[job.seed_idx] = r.test_report;
            } catch (const std::exception& e) {
                result.cells[job.cell].errors[job.seed_idx] = e.what();
            }
        }
    };

    const int workers = std::min<int>(worker_count(), static_cast<int>(jobs.size()));
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return result;
}

// Fixed row order of the comparison table.
inline std::vector<MatrixCell> variant_cells(const ExperimentConfig& base) {
    std::vector<MatrixCell> cells;
    for (const char* v : {"baseline", "atdt", "transfer-oracle", "oracle"}) {
        ExperimentConfig c = base;
        c.variant = v;
        cells.push_back({v, c});
    }
    return cells;
}

// Ablation grid (auxiliary task x norm-alignment switch), all on the atdt
// variant with shared datasets and seeds.
inline std::vector<MatrixCell> ablation_cells(const ExperimentConfig& base) {
    std::vector<MatrixCell> cells;
    for (const char* aux : {"none", "edge", "reconstruction"})
        for (bool nda : {false, true}) {
            ExperimentConfig c = base;
            c.variant = "atdt";
            c.aux = aux;
            c.nda = nda;
            cells.push_back({std::string("aux-") + aux + (nda ? "_nda-on" : "_nda-off"), c});
        }
    return cells;
}

struct Aggregate {
    double mean = 0.0, spread = 0.0;  // spread = population standard deviation
    int n = 0;
};

inline Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    a.n = static_cast<int>(values.size());
    if (a.n == 0) return a;
    for (double v : values) a.mean += v;
    a.mean /= a.n;
    for (double v : values) a.spread += (v - a.mean) * (v - a.mean);
    a.spread = std::sqrt(a.spread / a.n);
    return a;
}

// per-cell aggregate of one metric; extractor pulls the scalar from a report
template <class F>
Aggregate cell_aggregate(const CellOutcome& cell, F extract) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < cell.reports.size(); ++i)
        if (cell.errors[i].empty()) vals.push_back(extract(cell.reports[i]));
    return aggregate(vals);
}

inline nlohmann::json matrix_json(const MatrixResult& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& cell : m.cells) {
        nlohmann::json row;
        row["name"] = cell.name;
        nlohmann::json per_seed = nlohmann::json::array();
        for (std::size_t i = 0; i < cell.seeds.size(); ++i) {
            nlohmann::json e;
            e["seed"] = cell.seeds[i];
            if (cell.errors[i].empty())
                e["report"] = report_json(cell.reports[i]);
            else
                e["error"] = cell.errors[i];
            per_seed.push_back(e);
        }
        row["runs"] = per_seed;
        bool any_seg = false, any_depth = false;
        for (std::size_t i = 0; i < cell.reports.size(); ++i)
            if (cell.errors[i].empty()) {
                any_seg |= cell.reports[i].seg.has_value();
                any_depth |= cell.reports[i].depth.has_value();
            }
        if (any_seg) {
            const Aggregate miou = cell_aggregate(cell, [](const MetricsReport& r) {
                return r.seg->miou;
            });
            const Aggregate acc = cell_aggregate(cell, [](const MetricsReport& r) {
                return r.seg->acc;
            });
            row["miou"] = {{"mean", miou.mean}, {"spread", miou.spread}, {"n", miou.n}};
            row["acc"] = {{"mean", acc.mean}, {"spread", acc.spread}, {"n", acc.n}};
        }
        if (any_depth) {
            const Aggregate ar = cell_aggregate(cell, [](const MetricsReport& r) {
                return r.depth->abs_rel;
            });
            const Aggregate d1 = cell_aggregate(cell, [](const MetricsReport& r) {
                return r.depth->d1;
            });
            row["abs_rel"] = {{"mean", ar.mean}, {"spread", ar.spread}, {"n", ar.n}};
            row["delta1"] = {{"mean", d1.mean}, {"spread", d1.spread}, {"n", d1.n}};
        }
        rows.push_back(row);
    }
    return nlohmann::json{{"rows", rows}};
}

// Text rendering: one row per cell, mean +/- spread of the headline metric
// plus per-seed values and any per-run failures.
inline std::string render_matrix_table(const MatrixResult& m) {
    std::ostringstream os;
    os << std::left << std::setw(22) << "Cell" << std::right << std::setw(20) << "metric"
       << std::setw(18) << "mean+/-spread" << "  per-seed\n";
    os << std::fixed;
    for (const auto& cell : m.cells) {
        bool seg = false;
        for (std::size_t i = 0; i < cell.reports.size(); ++i)
            if (cell.errors[i].empty() && cell.reports[i].seg) seg = true;
        const char* metric = seg ? "mIoU %" : "Abs Rel";
        auto extract = [seg](const MetricsReport& r) {
            return seg ? r.seg->miou * 100.0 : r.depth->abs_rel;
        };
        const Aggregate a = cell_aggregate(cell, extract);
        os << std::left << std::setw(22) << cell.name << std::right << std::setw(20) << metric;
        std::ostringstream ms;
        ms << std::fixed << std::setprecision(seg ? 2 : 4) << a.mean << "+/-"
           << std::setprecision(2) << a.spread;
        os << std::setw(18) << ms.str() << "  ";
        for (std::size_t i = 0; i < cell.seeds.size(); ++i) {
            if (i) os << " ";
            if (!cell.errors[i].empty())
                os << "FAIL(seed" << cell.seeds[i] << ")";
            else
                os << std::setprecision(seg ? 2 : 4) << extract(cell.reports[i]);
        }
        os << "\n";
    }
    return os.str();
}

inline void write_matrix_outputs(const MatrixResult& m, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream os(fs::path(out_dir) / "matrix.json");
        os << matrix_json(m).dump(2) << "\n";
        check(os.good(), "matrix: cannot write matrix.json");
    }
    {
        std::vector<MetricsReport> flat;
        for (const auto& cell : m.cells)
            for (std::size_t i = 0; i < cell.reports.size(); ++i)
                if (cell.errors[i].empty()) {
                    MetricsReport r = cell.reports[i];
                    r.name = cell.name;
                    flat.push_back(r);
                }
        std::ofstream os(fs::path(out_dir) / "matrix.csv");
        os << render_csv(flat);
        check(os.good(), "matrix: cannot write matrix.csv");
    }
    {
        std::ofstream os(fs::path(out_dir) / "matrix.txt");
        os << render_matrix_table(m);
        check(os.good(), "matrix: cannot write matrix.txt");
    }
}

}  // namespace atdt

#endif  // ATDT_MATRIX_HPP_
