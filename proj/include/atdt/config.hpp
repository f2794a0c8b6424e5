#ifndef ATDT_CONFIG_HPP_
#define ATDT_CONFIG_HPP_

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "atdt/common.hpp"

// Experiment configuration: strict-schema JSON (unknown keys rejected), with
// the fully resolved config persisted verbatim into every run directory.

namespace atdt {

struct ExperimentConfig {
    // scenario / variant
    std::string scenario = "dep2sem";  // dep2sem | sem2dep
    std::string variant = "atdt";      // baseline | atdt | transfer-oracle | oracle
    std::string aux = "edge";          // none | edge | reconstruction
    bool aux_on = true;                // ablation switch: keep aux decoder but zero its weight
    bool nda = true;
    std::string t1_override = "";      // "", edge, reconstruction (aux-as-source mode)

    // loss weights (lambda_aux 0.5, lambda_nda 0.001, task weights 1)
    double lambda_t1 = 1.0;
    double lambda_t2 = 1.0;
    double lambda_aux = 0.5;
    double lambda_nda = 0.001;
    std::string transfer_reduction = "mean";  // mean | sum | root-sum
    std::string transfer_bn_infer = "eval";   // eval | train

    // optimizer
    std::string optimizer = "adam";  // adam | sgd-momentum
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;

    // data
    std::string data_root = "data";
    int image_size = 64;
    int train_count = 600;
    int val_count = 100;
    int test_count = 200;
    bool depth_proxy_noise = false;
    double depth_proxy_amplitude = 0.15;
    double depth_proxy_invalid = 0.10;
    bool exclude_sky_depth = false;

    // model
    int encoder_width = 16;
    int feat_channels = 64;
    int downsample = 8;
    int num_classes = 6;

    // training
    int batch_size = 8;
    int steps_per_phase = 3000;
    int eval_every = 250;

    // bookkeeping
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string out_dir = "runs";

    void validate() const {
        auto one_of = [](const std::string& v, std::initializer_list<const char*> allowed,
                         const char* key) {
            for (const char* a : allowed)
                if (v == a) return;
            throw Error(std::string("config: invalid value for ") + key + ": " + v);
        };
        one_of(scenario, {"dep2sem", "sem2dep"}, "scenario");
        one_of(variant, {"baseline", "atdt", "transfer-oracle", "oracle"}, "variant");
        one_of(aux, {"none", "edge", "reconstruction"}, "aux");
        one_of(t1_override, {"", "edge", "reconstruction"}, "t1_override");
        one_of(transfer_reduction, {"mean", "sum", "root-sum"}, "transfer_reduction");
        one_of(transfer_bn_infer, {"eval", "train"}, "transfer_bn_infer");
        one_of(optimizer, {"adam", "sgd-momentum"}, "optimizer");
        check(lambda_t1 >= 0 && lambda_t2 >= 0 && lambda_aux >= 0 && lambda_nda >= 0,
              "config: loss weights must be non-negative");
        check(image_size > 0 && image_size % downsample == 0,
              "config: image_size must be divisible by downsample");
        check(batch_size >= 2, "config: batch_size must be >= 2 (batchnorm)");
        check(steps_per_phase >= 1 && eval_every >= 1, "config: bad step counts");
        check(!seeds.empty(), "config: seeds must be non-empty");
        check(train_count > 0 && val_count > 0 && test_count > 0, "config: bad split counts");
    }
};

inline nlohmann::json config_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["scenario"] = c.scenario;
    j["variant"] = c.variant;
    j["aux"] = c.aux;
    j["aux_on"] = c.aux_on;
    j["nda"] = c.nda;
    j["t1_override"] = c.t1_override;
    j["lambda_t1"] = c.lambda_t1;
    j["lambda_t2"] = c.lambda_t2;
    j["lambda_aux"] = c.lambda_aux;
    j["lambda_nda"] = c.lambda_nda;
    j["transfer_reduction"] = c.transfer_reduction;
    j["transfer_bn_infer"] = c.transfer_bn_infer;
    j["optimizer"] = c.optimizer;
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["weight_decay"] = c.weight_decay;
    j["data_root"] = c.data_root;
    j["image_size"] = c.image_size;
    j["train_count"] = c.train_count;
    j["val_count"] = c.val_count;
    j["test_count"] = c.test_count;
    j["depth_proxy_noise"] = c.depth_proxy_noise;
    j["depth_proxy_amplitude"] = c.depth_proxy_amplitude;
    j["depth_proxy_invalid"] = c.depth_proxy_invalid;
    j["exclude_sky_depth"] = c.exclude_sky_depth;
    j["encoder_width"] = c.encoder_width;
    j["feat_channels"] = c.feat_channels;
    j["downsample"] = c.downsample;
    j["num_classes"] = c.num_classes;
    j["batch_size"] = c.batch_size;
    j["steps_per_phase"] = c.steps_per_phase;
    j["eval_every"] = c.eval_every;
    j["seeds"] = c.seeds;
    j["out_dir"] = c.out_dir;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    const std::set<std::string> known = {
        "scenario",        "variant",         "aux",
        "aux_on",          "nda",             "t1_override",
        "lambda_t1",       "lambda_t2",       "lambda_aux",
        "lambda_nda",      "transfer_reduction", "transfer_bn_infer",
        "optimizer",       "lr",              "beta1",
        "beta2",           "weight_decay",    "data_root",
        "image_size",      "train_count",     "val_count",
        "test_count",      "depth_proxy_noise", "depth_proxy_amplitude",
        "depth_proxy_invalid", "exclude_sky_depth", "encoder_width",
        "feat_channels",   "downsample",      "num_classes",
        "batch_size",      "steps_per_phase", "eval_every",
        "seeds",           "out_dir"};
    for (auto it = j.begin(); it != j.end(); ++it)
        check(known.count(it.key()) == 1, "config: unknown key: " + it.key());
    auto get = [&j](const char* key, auto& target) {
        if (j.contains(key)) target = j.at(key).get<std::decay_t<decltype(target)>>();
    };
    get("scenario", c.scenario);
    get("variant", c.variant);
    get("aux", c.aux);
    get("aux_on", c.aux_on);
    get("nda", c.nda);
    get("t1_override", c.t1_override);
    get("lambda_t1", c.lambda_t1);
    get("lambda_t2", c.lambda_t2);
    get("lambda_aux", c.lambda_aux);
    get("lambda_nda", c.lambda_nda);
    get("transfer_reduction", c.transfer_reduction);
    get("transfer_bn_infer", c.transfer_bn_infer);
    get("optimizer", c.optimizer);
    get("lr", c.lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("weight_decay", c.weight_decay);
    get("data_root", c.data_root);
    get("image_size", c.image_size);
    get("train_count", c.train_count);
    get("val_count", c.val_count);
    get("test_count", c.test_count);
    get("depth_proxy_noise", c.depth_proxy_noise);
    get("depth_proxy_amplitude", c.depth_proxy_amplitude);
    get("depth_proxy_invalid", c.depth_proxy_invalid);
    get("exclude_sky_depth", c.exclude_sky_depth);
    get("encoder_width", c.encoder_width);
    get("feat_channels", c.feat_channels);
    get("downsample", c.downsample);
    get("num_classes", c.num_classes);
    get("batch_size", c.batch_size);
    get("steps_per_phase", c.steps_per_phase);
    get("eval_every", c.eval_every);
    get("seeds", c.seeds);
    get("out_dir", c.out_dir);
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    check(is.is_open(), "config: cannot open " + path);
    return config_from_json(nlohmann::json::parse(is));
}

// FNV-1a over the resolved JSON dump; stable across runs and machines
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string s = config_json(c).dump();
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace atdt

#endif  // ATDT_CONFIG_HPP_
