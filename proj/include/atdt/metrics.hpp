#ifndef ATDT_METRICS_HPP_
#define ATDT_METRICS_HPP_

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atdt/common.hpp"

// Bit-exact evaluation: segmentation metrics from a pixel confusion matrix,
// the seven standard depth metrics, and report assembly.

namespace atdt {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes)
        : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {}

    int num_classes() const { return k_; }

    void add(int gt, int pred) {
        check(gt >= 0 && gt < k_ && pred >= 0 && pred < k_, "confusion: label out of range");
        ++counts_[static_cast<std::size_t>(gt) * k_ + pred];
    }

    // rows = ground truth, cols = prediction; ignore-index pixels skipped
    void accumulate(const std::vector<int>& pred, const std::vector<int>& gt, int ignore_index) {
        check(pred.size() == gt.size(), "confusion: size mismatch");
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (gt[i] == ignore_index) continue;
            add(gt[i], pred[i]);
        }
    }

    std::uint64_t at(int gt, int pred) const {
        return counts_[static_cast<std::size_t>(gt) * k_ + pred];
    }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }

    // partial matrices from parallel workers combine elementwise
    void merge(const ConfusionMatrix& other) {
        check(other.k_ == k_, "confusion: merge size mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    }

private:
    int k_;
    std::vector<std::uint64_t> counts_;
};

struct SegMetrics {
    std::vector<double> per_class_iou;  // NaN for classes absent from gt and pred
    double miou = 0.0;
    double acc = 0.0;
};

// IoU_k = TP/(TP+FP+FN); classes absent from both gt and pred are excluded
// from the mIoU mean. Acc = trace/total.
inline SegMetrics miou_acc(const ConfusionMatrix& cm) {
    check(cm.total() > 0, "miou_acc: empty confusion matrix");
    SegMetrics m;
    const int k = cm.num_classes();
    double iou_sum = 0.0;
    int iou_n = 0;
    std::uint64_t diag = 0;
    for (int c = 0; c < k; ++c) {
        std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
        for (int o = 0; o < k; ++o) {
            if (o == c) continue;
            fp += cm.at(o, c);
            fn += cm.at(c, o);
        }
        diag += tp;
        if (tp + fp + fn == 0) {
            m.per_class_iou.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        m.per_class_iou.push_back(iou);
        iou_sum += iou;
        ++iou_n;
    }
    m.miou = iou_sum / iou_n;
    m.acc = static_cast<double>(diag) / static_cast<double>(cm.total());
    return m;
}

struct DepthMetrics {
    double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
    double d1 = 0, d2 = 0, d3 = 0;
};

// Mergeable (sum, count) accumulator for the seven depth metrics.
class DepthAccumulator {
public:
    void add(double pred, double gt) {
        check(pred > 0 && gt > 0, "depth metrics: non-positive value");
        const double diff = pred - gt;
        sum_abs_rel_ += std::abs(diff) / gt;
        sum_sq_rel_ += diff * diff / gt;
        sum_sq_ += diff * diff;
        const double dl = std::log(pred) - std::log(gt);
        sum_sq_log_ += dl * dl;
        const double ratio = pred > gt ? pred / gt : gt / pred;
        if (ratio < 1.25) ++n_d1_;
        if (ratio < 1.25 * 1.25) ++n_d2_;
        if (ratio < 1.25 * 1.25 * 1.25) ++n_d3_;
        ++n_;
    }

    void add_map(const std::vector<float>& pred, const std::vector<float>& gt,
                 const std::vector<std::uint8_t>* mask = nullptr) {
        check(pred.size() == gt.size(), "depth metrics: size mismatch");
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (mask && !(*mask)[i]) continue;
            add(pred[i], gt[i]);
        }
    }

    void merge(const DepthAccumulator& o) {
        sum_abs_rel_ += o.sum_abs_rel_;
        sum_sq_rel_ += o.sum_sq_rel_;
        sum_sq_ += o.sum_sq_;
        sum_sq_log_ += o.sum_sq_log_;
        n_d1_ += o.n_d1_;
        n_d2_ += o.n_d2_;
        n_d3_ += o.n_d3_;
        n_ += o.n_;
    }

    std::uint64_t count() const { return n_; }

    DepthMetrics finalize() const {
        check(n_ > 0, "depth metrics: empty mask");
        DepthMetrics m;
        const double n = static_cast<double>(n_);
        m.abs_rel = sum_abs_rel_ / n;
        m.sq_rel = sum_sq_rel_ / n;
        m.rmse = std::sqrt(sum_sq_ / n);
        m.rmse_log = std::sqrt(sum_sq_log_ / n);
        m.d1 = n_d1_ / n;
        m.d2 = n_d2_ / n;
        m.d3 = n_d3_ / n;
        return m;
    }

private:
    double sum_abs_rel_ = 0, sum_sq_rel_ = 0, sum_sq_ = 0, sum_sq_log_ = 0;
    std::uint64_t n_d1_ = 0, n_d2_ = 0, n_d3_ = 0, n_ = 0;
};

struct MetricsReport {
    std::string name;
    std::optional<SegMetrics> seg;
    std::optional<DepthMetrics> depth;
    std::uint64_t pixels = 0;
    std::string config_hash;
    std::uint64_t seed = 0;

    void validate() const {
        if (depth) {
            check(depth->d1 <= depth->d2 + 1e-12 && depth->d2 <= depth->d3 + 1e-12,
                  "report: delta monotonicity violated");
            for (double d : {depth->d1, depth->d2, depth->d3})
                check(d >= 0.0 && d <= 1.0, "report: delta out of [0,1]");
        }
        if (seg) {
            check(seg->miou >= 0.0 && seg->miou <= 1.0, "report: mIoU out of [0,1]");
            check(seg->acc >= 0.0 && seg->acc <= 1.0, "report: Acc out of [0,1]");
        }
    }
};

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json j;
    j["name"] = r.name;
    j["pixels"] = r.pixels;
    j["config_hash"] = r.config_hash;
    j["seed"] = r.seed;
    if (r.seg) {
        auto iou = nlohmann::json::array();
        for (double v : r.seg->per_class_iou)
            iou.push_back(std::isnan(v) ? nlohmann::json() : nlohmann::json(v));
        j["seg"] = {{"per_class_iou", iou}, {"miou", r.seg->miou}, {"acc", r.seg->acc}};
    }
    if (r.depth) {
        j["depth"] = {{"abs_rel", r.depth->abs_rel},   {"sq_rel", r.depth->sq_rel},
                      {"rmse", r.depth->rmse},         {"rmse_log", r.depth->rmse_log},
                      {"delta1", r.depth->d1},         {"delta2", r.depth->d2},
                      {"delta3", r.depth->d3}};
    }
    return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.name = j.at("name").get<std::string>();
    r.pixels = j.at("pixels").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("seg")) {
        SegMetrics s;
        for (const auto& v : j["seg"]["per_class_iou"])
            s.per_class_iou.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                  : v.get<double>());
        s.miou = j["seg"]["miou"].get<double>();
        s.acc = j["seg"]["acc"].get<double>();
        r.seg = s;
    }
    if (j.contains("depth")) {
        DepthMetrics d;
        d.abs_rel = j["depth"]["abs_rel"].get<double>();
        d.sq_rel = j["depth"]["sq_rel"].get<double>();
        d.rmse = j["depth"]["rmse"].get<double>();
        d.rmse_log = j["depth"]["rmse_log"].get<double>();
        d.d1 = j["depth"]["delta1"].get<double>();
        d.d2 = j["depth"]["delta2"].get<double>();
        d.d3 = j["depth"]["delta3"].get<double>();
        r.depth = d;
    }
    return r;
}

// Fixed-width text table mirroring the usual benchmark layout: per-class IoU
// columns, then mIoU / Acc, or the seven depth columns. Values are rendered
// as percentages for segmentation.
inline std::string render_seg_table(const std::vector<MetricsReport>& rows,
                                    const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "Method";
    for (const auto& c : class_names) os << std::right << std::setw(10) << c;
    os << std::right << std::setw(10) << "mIoU" << std::setw(10) << "Acc" << "\n";
    os << std::fixed << std::setprecision(2);
    for (const auto& r : rows) {
        if (!r.seg) continue;
        os << std::left << std::setw(18) << r.name;
        for (double v : r.seg->per_class_iou) {
            if (std::isnan(v))
                os << std::right << std::setw(10) << "-";
            else
                os << std::right << std::setw(10) << v * 100.0;
        }
        os << std::right << std::setw(10) << r.seg->miou * 100.0 << std::setw(10)
           << r.seg->acc * 100.0 << "\n";
    }
    return os.str();
}

inline std::string render_depth_table(const std::vector<MetricsReport>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "Method";
    for (const char* c : {"AbsRel", "SqRel", "RMSE", "RMSElog", "d1", "d2", "d3"})
        os << std::right << std::setw(10) << c;
    os << "\n" << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        if (!r.depth) continue;
        os << std::left << std::setw(18) << r.name;
        os << std::right << std::setw(10) << r.depth->abs_rel << std::setw(10) << r.depth->sq_rel
           << std::setw(10) << std::setprecision(3) << r.depth->rmse << std::setw(10)
           << r.depth->rmse_log << std::setprecision(3) << std::setw(10) << r.depth->d1
           << std::setw(10) << r.depth->d2 << std::setw(10) << r.depth->d3 << std::setprecision(4);
        os << "\n";
    }
    return os.str();
}

inline std::string render_csv(const std::vector<MetricsReport>& rows) {
    std::ostringstream os;
    os << "name,miou,acc,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,seed\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.name << ",";
        if (r.seg)
            os << r.seg->miou << "," << r.seg->acc << ",";
        else
            os << ",,";
        if (r.depth)
            os << r.depth->abs_rel << "," << r.depth->sq_rel << "," << r.depth->rmse << ","
               << r.depth->rmse_log << "," << r.depth->d1 << "," << r.depth->d2 << ","
               << r.depth->d3 << ",";
        else
            os << ",,,,,,,";
        os << r.seed << "\n";
    }
    return os.str();
}

// optional class remapping hook for datasets with collapsed label sets
inline std::vector<int> remap_labels(const std::vector<int>& labels,
                                     const std::vector<int>& table) {
    std::vector<int> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        check(labels[i] >= 0 && labels[i] < static_cast<int>(table.size()),
              "remap: label out of table range");
        out[i] = table[labels[i]];
    }
    return out;
}

}  // namespace atdt

#endif  // ATDT_METRICS_HPP_
