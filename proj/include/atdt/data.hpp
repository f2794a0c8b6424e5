#ifndef ATDT_DATA_HPP_
#define ATDT_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "atdt/common.hpp"
#include "atdt/scenegen.hpp"
#include "atdt/serialize.hpp"

// Access-audited dataset loader. Every field read goes through a policy check
// and is counted in an audit log, which is how the label-hygiene guarantees
// (e.g. "baseline training never touches target-task labels of domain B") are
// enforced and tested. Files are read lazily: a disallowed field is never
// opened.

namespace atdt {

enum class Field { Image, Depth, Semseg, Edges };

inline const char* field_name(Field f) {
    switch (f) {
        case Field::Image: return "image";
        case Field::Depth: return "depth";
        case Field::Semseg: return "semseg";
        case Field::Edges: return "edges";
    }
    return "?";
}

struct AccessAudit {
    std::map<std::string, std::size_t> counts;

    void note(const std::string& key) { ++counts[key]; }
    std::size_t total(const std::string& key) const {
        auto it = counts.find(key);
        return it == counts.end() ? 0 : it->second;
    }
    // sum of counts whose key contains `needle`
    std::size_t total_matching(const std::string& needle) const {
        std::size_t n = 0;
        for (const auto& [k, v] : counts)
            if (k.find(needle) != std::string::npos) n += v;
        return n;
    }
};

class DatasetSplit {
public:
    DatasetSplit(const std::string& root, const std::string& domain_tag, const std::string& split,
                 AccessAudit* audit)
        : dir_((std::filesystem::path(root) / domain_tag / split).string()),
          domain_(domain_tag),
          split_(split),
          audit_(audit) {
        namespace fs = std::filesystem;
        check(fs::exists(dir_), "dataset: missing split directory " + dir_);
        std::size_t n = 0;
        while (fs::exists(fs::path(dir_) / (std::to_string(n) + "_image.tnsr"))) ++n;
        check(n > 0, "dataset: empty split " + dir_);
        size_ = n;
    }

    std::size_t size() const { return size_; }
    const std::string& domain() const { return domain_; }

    void set_allowed(std::set<Field> fields) { allowed_ = std::move(fields); }
    void allow_all() { allowed_.reset(); }

    // Degrade depth supervision into noisy proxy labels: multiplicative noise
    // plus a random invalidation mask (mimics stereo proxies with left-right
    // check filtering). Audit entries switch to "depth_proxy".
    void enable_depth_proxy(double noise_amplitude, double invalid_fraction, std::uint64_t seed) {
        proxy_ = ProxyConfig{noise_amplitude, invalid_fraction, seed};
        depth_cache_.clear();
        mask_cache_.clear();
    }
    bool depth_is_proxy() const { return proxy_.has_value(); }

    const Tensor<float>& image(std::size_t i) const { return fetch(i, Field::Image, image_cache_); }
    const Tensor<float>& edges(std::size_t i) const { return fetch(i, Field::Edges, edge_cache_); }

    const Tensor<float>& depth(std::size_t i) const {
        guard(Field::Depth);
        auto it = depth_cache_.find(i);
        if (it == depth_cache_.end()) {
            Tensor<float> d = load(i, Field::Depth);
            std::vector<std::uint8_t> mask(d.numel(), 1);
            if (proxy_) {
                Rng rng(derive_seed(proxy_->seed, i));
                for (std::size_t p = 0; p < d.numel(); ++p) {
                    d.data[p] = static_cast<float>(
                        d.data[p] * (1.0 + rng.uniform(-proxy_->noise, proxy_->noise)));
                    if (rng.bernoulli(proxy_->invalid)) mask[p] = 0;
                }
            }
            mask_cache_[i] = std::move(mask);
            it = depth_cache_.emplace(i, std::move(d)).first;
        }
        return it->second;
    }

    const std::vector<std::uint8_t>& depth_valid(std::size_t i) const {
        depth(i);  // populates the mask cache
        return mask_cache_.at(i);
    }

    // semseg as integer labels
    const std::vector<int>& labels(std::size_t i) const {
        guard(Field::Semseg);
        auto it = label_cache_.find(i);
        if (it == label_cache_.end()) {
            Tensor<float> s = load(i, Field::Semseg);
            std::vector<int> lab(s.numel());
            for (std::size_t p = 0; p < s.numel(); ++p) lab[p] = static_cast<int>(s.data[p]);
            it = label_cache_.emplace(i, std::move(lab)).first;
        }
        return it->second;
    }

    const Tensor<float>& semseg_raw(std::size_t i) const {
        return fetch(i, Field::Semseg, semseg_cache_);
    }

private:
    struct ProxyConfig {
        double noise, invalid;
        std::uint64_t seed;
    };

    void guard(Field f) const {
        if (allowed_ && !allowed_->count(f))
            throw Error("dataset: access to disallowed field " + std::string(field_name(f)) + " in " +
                        domain_ + "/" + split_);
        if (audit_) {
            const char* fname =
                (f == Field::Depth && proxy_) ? "depth_proxy" : field_name(f);
            audit_->note(domain_ + "/" + split_ + "/" + fname);
        }
    }

    Tensor<float> load(std::size_t i, Field f) const {
        return load_tnsr<float>(
            (std::filesystem::path(dir_) / (std::to_string(i) + "_" + field_name(f) + ".tnsr"))
                .string());
    }

    const Tensor<float>& fetch(std::size_t i, Field f,
                               std::map<std::size_t, Tensor<float>>& cache) const {
        guard(f);
        auto it = cache.find(i);
        if (it == cache.end()) it = cache.emplace(i, load(i, f)).first;
        return it->second;
    }

    std::string dir_, domain_, split_;
    AccessAudit* audit_;
    std::size_t size_ = 0;
    std::optional<std::set<Field>> allowed_;
    std::optional<ProxyConfig> proxy_;
    mutable std::map<std::size_t, Tensor<float>> image_cache_, edge_cache_, depth_cache_,
        semseg_cache_;
    mutable std::map<std::size_t, std::vector<int>> label_cache_;
    mutable std::map<std::size_t, std::vector<std::uint8_t>> mask_cache_;
};

// Collect a [B,...] batch tensor from per-sample tensors.
inline Tensor<float> stack_batch(const std::vector<const Tensor<float>*>& items) {
    check(!items.empty(), "stack_batch: empty");
    std::vector<int> shape = items[0]->shape;
    shape.insert(shape.begin(), static_cast<int>(items.size()));
    Tensor<float> out(shape);
    const std::size_t n = items[0]->numel();
    for (std::size_t i = 0; i < items.size(); ++i) {
        check(items[i]->numel() == n, "stack_batch: inconsistent sample shapes");
        std::copy(items[i]->data.begin(), items[i]->data.end(), out.data.begin() + i * n);
    }
    return out;
}

}  // namespace atdt

#endif  // ATDT_DATA_HPP_
