#ifndef ATDT_NN_HPP_
#define ATDT_NN_HPP_

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atdt/ops.hpp"
#include "atdt/serialize.hpp"
#include "atdt/tensor.hpp"

// Network-level building blocks: the parameter store, the encoder / decoder /
// transfer architectures and their deterministic initialization.

namespace atdt {

template <class S>
class ParameterStore {
public:
    std::map<std::string, Tensor<S>> params;  // ordered: deterministic iteration
    std::map<std::string, BnState<S>> bn;

    Tensor<S>& at(const std::string& name) {
        auto it = params.find(name);
        check(it != params.end(), "param store: unknown parameter " + name);
        return it->second;
    }

    BnState<S>& bn_state(const std::string& name) {
        auto it = bn.find(name);
        check(it != bn.end(), "param store: unknown batchnorm state " + name);
        return it->second;
    }

    void add(const std::string& name, Tensor<S> t) {
        check(!params.count(name), "param store: duplicate parameter " + name);
        params.emplace(name, std::move(t));
    }

    bool frozen(const std::string& name) const {
        for (const auto& p : frozen_prefixes_)
            if (name.rfind(p, 0) == 0) return true;
        return false;
    }

    // Frozen segments drop out of tape tracking and their batchnorm layers
    // switch to running statistics.
    void freeze(const std::string& prefix) {
        check(prefix_exists(prefix), "freeze: unknown prefix " + prefix);
        frozen_prefixes_.insert(prefix);
    }

    void unfreeze(const std::string& prefix) {
        check(frozen_prefixes_.erase(prefix) == 1, "unfreeze: prefix not frozen: " + prefix);
    }

    const std::set<std::string>& frozen_prefixes() const { return frozen_prefixes_; }

    // Register every trainable parameter as a tape leaf for one step.
    void track_trainable(Tape<S>& tape) {
        for (auto& [name, p] : params) p.node = frozen(name) ? -1 : tape.leaf(p.numel());
    }

    void untrack() {
        for (auto& [name, p] : params) p.node = -1;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [name, p] : params)
            if (!frozen(name)) n += p.numel();
        return n;
    }

    std::size_t count_with_prefix(const std::string& prefix) const {
        std::size_t n = 0;
        for (const auto& [name, p] : params)
            if (name.rfind(prefix, 0) == 0) n += p.numel();
        return n;
    }

    // Checkpoint container: manifest.json (names, shapes, offsets) plus one
    // blob of concatenated TNSR records. Round-trips bit-exactly.
    void save(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        nlohmann::json manifest;
        manifest["version"] = 1;
        manifest["blob"] = "params.bin";
        std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
        check(blob.is_open(), "checkpoint: cannot open blob for write");
        auto entries = nlohmann::json::array();
        auto dump = [&](const std::string& name, const std::string& kind, const Tensor<S>& t) {
            nlohmann::json e;
            e["name"] = name;
            e["kind"] = kind;
            e["shape"] = t.shape;
            e["offset"] = static_cast<std::int64_t>(blob.tellp());
            write_tnsr(blob, t);
            e["bytes"] = static_cast<std::int64_t>(blob.tellp()) - e["offset"].get<std::int64_t>();
            entries.push_back(e);
        };
        for (const auto& [name, p] : params) dump(name, "param", p);
        for (const auto& [name, st] : bn) {
            Tensor<S> m(std::vector<int>{static_cast<int>(st.running_mean.size())},
                        st.running_mean);
            Tensor<S> v(std::vector<int>{static_cast<int>(st.running_var.size())}, st.running_var);
            dump(name, "bn_mean", m);
            dump(name, "bn_var", v);
        }
        manifest["entries"] = entries;
        std::ofstream mf(fs::path(dir) / "manifest.json");
        mf << manifest.dump(2) << "\n";
        check(mf.good() && blob.good(), "checkpoint: write failed");
    }

    void load(const std::string& dir) {
        namespace fs = std::filesystem;
        std::ifstream mf(fs::path(dir) / "manifest.json");
        check(mf.is_open(), "checkpoint: missing manifest in " + dir);
        nlohmann::json manifest = nlohmann::json::parse(mf);
        std::ifstream blob(fs::path(dir) / manifest["blob"].get<std::string>(), std::ios::binary);
        check(blob.is_open(), "checkpoint: missing blob in " + dir);
        params.clear();
        bn.clear();
        for (const auto& e : manifest["entries"]) {
            blob.seekg(e["offset"].get<std::int64_t>());
            Tensor<S> t = read_tnsr<S>(blob);
            const std::string name = e["name"].get<std::string>();
            const std::string kind = e["kind"].get<std::string>();
            if (kind == "param") {
                params.emplace(name, std::move(t));
            } else if (kind == "bn_mean") {
                bn[name].running_mean = std::move(t.data);
            } else if (kind == "bn_var") {
                bn[name].running_var = std::move(t.data);
            } else {
                throw Error("checkpoint: unknown entry kind " + kind);
            }
        }
    }

private:
    bool prefix_exists(const std::string& prefix) const {
        for (const auto& [name, p] : params)
            if (name.rfind(prefix, 0) == 0) return true;
        return false;
    }

    std::set<std::string> frozen_prefixes_;
};

// ---------------------------------------------------------------------------
// architecture specs

// Dilated fully-convolutional encoder. log2(downsample) stride-2 convs double
// the width up to feat_channels, then two dilation-2 blocks and a final plain
// conv, all at the bottleneck resolution. Ends in batchnorm (no relu) so
// features can take negative values.
struct EncoderSpec {
    int in_channels = 3;
    int base_width = 16;
    int feat_channels = 64;
    int downsample = 8;  // total stride
};

enum class Head { Semseg, Depth, Edge, Reconstruction };

inline int head_channels(Head h, int num_classes) {
    switch (h) {
        case Head::Semseg: return num_classes;
        case Head::Depth: return 1;
        case Head::Edge: return 1;
        case Head::Reconstruction: return 3;
    }
    return 1;
}

// conv -> bn -> relu -> bilinear upsample stages, then a 1x1 head conv with a
// task-dependent output activation (softplus for depth, sigmoid for edge and
// reconstruction, raw logits for semseg).
struct DecoderSpec {
    int in_channels = 64;
    std::vector<std::pair<int, int>> stages = {{32, 4}, {16, 2}};  // (width, upsample factor)
    int num_classes = 6;                                           // semseg head only
};

// 6 conv+batchnorm pairs, kernel 3x3, constant spatial size and channel
// count; relu after each of the first 5 pairs, none after the last.
struct TransferSpec {
    int channels = 64;
    int pairs = 6;
};

namespace detail {

template <class S>
void init_conv(ParameterStore<S>& store, Rng& rng, const std::string& path, int cin, int cout,
               int k) {
    Tensor<S> w(std::vector<int>{cout, cin, k, k});
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));  // He fan-in
    for (auto& v : w.data) v = static_cast<S>(rng.normal() * std);
    store.add(path + "/weight", std::move(w));
    store.add(path + "/bias", Tensor<S>(std::vector<int>{cout}, S(0)));
}

template <class S>
void init_bn(ParameterStore<S>& store, const std::string& path, int c) {
    store.add(path + "/gamma", Tensor<S>(std::vector<int>{c}, S(1)));
    store.add(path + "/beta", Tensor<S>(std::vector<int>{c}, S(0)));
    store.bn[path] = BnState<S>::init(c);
}

template <class S>
Tensor<S> conv_bn(Tape<S>& tape, ParameterStore<S>& store, const std::string& path,
                  const Tensor<S>& x, int stride, int dilation, BnMode mode) {
    Tensor<S> y = conv2d(tape, x, store.at(path + "/conv/weight"), store.at(path + "/conv/bias"),
                         stride, dilation, dilation);  // padding == dilation keeps size at s=1
    return batchnorm2d(tape, y, store.at(path + "/bn/gamma"), store.at(path + "/bn/beta"),
                       store.bn_state(path + "/bn"), mode);
}

}  // namespace detail

struct ConvLayerDef {
    int cin, cout, stride, dilation;
    bool relu;
};

inline std::vector<ConvLayerDef> encoder_layers(const EncoderSpec& spec) {
    int n_stride = 0;
    for (int s = spec.downsample; s > 1; s /= 2) {
        check(s % 2 == 0, "encoder: downsample must be a power of two");
        ++n_stride;
    }
    check(n_stride >= 1, "encoder: downsample must be >= 2");
    std::vector<ConvLayerDef> layers;
    int cin = spec.in_channels;
    int w = spec.base_width;
    for (int i = 0; i < n_stride; ++i) {
        int cout = (i == n_stride - 1) ? spec.feat_channels : w;
        layers.push_back({cin, cout, 2, 1, true});
        cin = cout;
        w *= 2;
    }
    layers.push_back({cin, spec.feat_channels, 1, 2, true});
    layers.push_back({spec.feat_channels, spec.feat_channels, 1, 2, true});
    layers.push_back({spec.feat_channels, spec.feat_channels, 1, 1, false});  // ends in bn
    return layers;
}

template <class S>
class Encoder {
public:
    Encoder() = default;
    Encoder(EncoderSpec spec, std::string prefix) : spec_(spec), prefix_(std::move(prefix)) {}

    void init(ParameterStore<S>& store, std::uint64_t seed) const {
        Rng rng(seed);
        int i = 0;
        for (const auto& l : encoder_layers(spec_)) {
            const std::string path = prefix_ + "/layer" + std::to_string(i++);
            detail::init_conv(store, rng, path + "/conv", l.cin, l.cout, 3);
            detail::init_bn(store, path + "/bn", l.cout);
        }
    }

    // x[B,3,H,W] -> f[B,C,H/s,W/s]
    Tensor<S> forward(Tape<S>& tape, ParameterStore<S>& store, const Tensor<S>& x,
                      BnMode mode) const {
        check(x.rank() == 4 && x.shape[1] == spec_.in_channels, "encoder: bad input shape");
        check(x.shape[2] % spec_.downsample == 0 && x.shape[3] % spec_.downsample == 0,
              "encoder: spatial size not divisible by stride");
        const BnMode eff = store.frozen(prefix_ + "/") ? BnMode::Eval : mode;
        Tensor<S> h = x;
        int i = 0;
        for (const auto& l : encoder_layers(spec_)) {
            const std::string path = prefix_ + "/layer" + std::to_string(i++);
            h = detail::conv_bn(tape, store, path, h, l.stride, l.dilation, eff);
            if (l.relu) h = relu(tape, h);
        }
        return h;
    }

    const EncoderSpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }

private:
    EncoderSpec spec_;
    std::string prefix_;
};

template <class S>
class Decoder {
public:
    Decoder() = default;
    Decoder(DecoderSpec spec, Head head, std::string prefix)
        : spec_(spec), head_(head), prefix_(std::move(prefix)) {}

    void init(ParameterStore<S>& store, std::uint64_t seed) const {
        Rng rng(seed);
        int cin = spec_.in_channels;
        int i = 0;
        for (const auto& [w, f] : spec_.stages) {
            const std::string path = prefix_ + "/stage" + std::to_string(i++);
            detail::init_conv(store, rng, path + "/conv", cin, w, 3);
            detail::init_bn(store, path + "/bn", w);
            cin = w;
        }
        detail::init_conv(store, rng, prefix_ + "/head", cin, head_channels(head_, spec_.num_classes),
                          1);
    }

    Tensor<S> forward(Tape<S>& tape, ParameterStore<S>& store, const Tensor<S>& f,
                      BnMode mode) const {
        check(f.rank() == 4 && f.shape[1] == spec_.in_channels, "decoder: bad input shape");
        const BnMode eff = store.frozen(prefix_ + "/") ? BnMode::Eval : mode;
        Tensor<S> h = f;
        int i = 0;
        for (const auto& [w, factor] : spec_.stages) {
            const std::string path = prefix_ + "/stage" + std::to_string(i++);
            h = detail::conv_bn(tape, store, path, h, 1, 1, eff);
            h = relu(tape, h);
            h = bilinear_upsample(tape, h, factor);
        }
        h = conv2d(tape, h, store.at(prefix_ + "/head/weight"), store.at(prefix_ + "/head/bias"), 1,
                   1, 0);
        switch (head_) {
            case Head::Semseg: return h;  // raw logits
            case Head::Depth: return softplus(tape, h);
            case Head::Edge:
            case Head::Reconstruction: return sigmoid(tape, h);
        }
        return h;
    }

    Head head() const { return head_; }
    const DecoderSpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }

private:
    DecoderSpec spec_;
    Head head_ = Head::Semseg;
    std::string prefix_;
};

template <class S>
class TransferNet {
public:
    TransferNet() = default;
    TransferNet(TransferSpec spec, std::string prefix) : spec_(spec), prefix_(std::move(prefix)) {}

    void init(ParameterStore<S>& store, std::uint64_t seed) const {
        Rng rng(seed);
        for (int i = 0; i < spec_.pairs; ++i) {
            const std::string path = prefix_ + "/pair" + std::to_string(i);
            detail::init_conv(store, rng, path + "/conv", spec_.channels, spec_.channels, 3);
            detail::init_bn(store, path + "/bn", spec_.channels);
        }
    }

    // Sets conv kernels to the identity and batchnorm to pass-through so the
    // network computes f' = f in eval mode. Used by sanity checks.
    void init_identity(ParameterStore<S>& store) const {
        for (int i = 0; i < spec_.pairs; ++i) {
            const std::string path = prefix_ + "/pair" + std::to_string(i);
            Tensor<S>& w = store.at(path + "/conv/weight");
            std::fill(w.data.begin(), w.data.end(), S(0));
            for (int c = 0; c < spec_.channels; ++c) w.at4(c, c, 1, 1) = S(1);
            std::fill(store.at(path + "/conv/bias").data.begin(),
                      store.at(path + "/conv/bias").data.end(), S(0));
            std::fill(store.at(path + "/bn/gamma").data.begin(),
                      store.at(path + "/bn/gamma").data.end(), S(1));
            std::fill(store.at(path + "/bn/beta").data.begin(),
                      store.at(path + "/bn/beta").data.end(), S(0));
            BnState<S>& st = store.bn_state(path + "/bn");
            std::fill(st.running_mean.begin(), st.running_mean.end(), S(0));
            std::fill(st.running_var.begin(), st.running_var.end(), S(1) - S(1e-5));
        }
    }

    Tensor<S> forward(Tape<S>& tape, ParameterStore<S>& store, const Tensor<S>& f,
                      BnMode mode) const {
        check(f.rank() == 4 && f.shape[1] == spec_.channels, "transfer: channel mismatch");
        const auto in_shape = f.shape;
        const BnMode eff = store.frozen(prefix_ + "/") ? BnMode::Eval : mode;
        Tensor<S> h = f;
        for (int i = 0; i < spec_.pairs; ++i) {
            const std::string path = prefix_ + "/pair" + std::to_string(i);
            h = detail::conv_bn(tape, store, path, h, 1, 1, eff);
            if (i + 1 < spec_.pairs) h = relu(tape, h);
        }
        check(h.shape == in_shape, "transfer: spatial extents changed");
        return h;
    }

    const TransferSpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }

private:
    TransferSpec spec_;
    std::string prefix_;
};

}  // namespace atdt

#endif  // ATDT_NN_HPP_
