#ifndef ATDT_SCENEGEN_HPP_
#define ATDT_SCENEGEN_HPP_

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atdt/common.hpp"
#include "atdt/serialize.hpp"
#include "atdt/tensor.hpp"

// Procedural generator of two visually shifted domains of toy driving-like
// scenes with aligned depth / semantic / edge ground truth. The two domains
// share spatial layout priors (sky on top, ground at the bottom) and differ
// only photometrically: palettes, texture noise and illumination.
//
// Every scene contains at least one ground marking (a semantic edge with no
// depth edge) and one same-class depth step between paired building slabs
// (a depth edge with no semantic edge), so source- and target-task boundaries
// partially disagree by construction.
//
// The renderer uses only uniform random draws and rational arithmetic, so a
// dataset regenerates byte-identically across machines.

namespace atdt {

inline constexpr int kNumClasses = 6;
inline constexpr int kClassSky = 0;
inline constexpr int kClassGround = 1;
inline constexpr int kClassMarking = 2;
inline constexpr int kClassBuilding = 3;
inline constexpr int kClassPole = 4;
inline constexpr int kClassVehicle = 5;
inline constexpr double kDepthMax = 100.0;  // sky sentinel ("infinite" depth)
inline constexpr const char* kClassNames[kNumClasses] = {"sky",     "ground", "marking",
                                                         "building", "pole",   "vehicle"};

struct DomainConfig {
    std::string tag;                                         // "A" or "B"
    std::array<std::array<double, 3>, kNumClasses> palette;  // base RGB per class
    double palette_jitter = 0.03;  // per-scene uniform palette perturbation
    double noise_amplitude = 0.02;
    int noise_cells = 8;        // value-noise grid resolution
    double illumination = 0.0;  // additive brightness offset
    // object frequency priors (identical across domains by default)
    double p_extra_building = 0.5;
    int max_poles = 3;
    int max_vehicles = 2;
    int max_markings = 3;
};

// Class palettes are hue-shifted between domains while keeping per-class mean
// luminance equal, so the A/B brightness gap is exactly the illumination
// offset. B's building is colored near A's vehicle and vice versa, which
// makes a purely photometric classifier transfer poorly.
inline DomainConfig domain_a_default() {
    DomainConfig d;
    d.tag = "A";
    d.palette = {{{0.55, 0.65, 0.80},    // sky
                  {0.45, 0.45, 0.45},    // ground
                  {0.75, 0.72, 0.30},    // marking (yellow)
                  {0.60, 0.30, 0.25},    // building (brick)
                  {0.20, 0.22, 0.24},    // pole
                  {0.25, 0.35, 0.70}}};  // vehicle (blue)
    d.noise_amplitude = 0.02;
    d.noise_cells = 8;
    d.illumination = 0.03;
    return d;
}

inline DomainConfig domain_b_default() {
    DomainConfig d;
    d.tag = "B";
    d.palette = {{{0.70, 0.65, 0.65},    // sky (warm haze)
                  {0.38, 0.50, 0.47},    // ground (greenish)
                  {0.59, 0.59, 0.59},    // marking (whitish)
                  {0.22, 0.33, 0.60},    // building (bluish, near A vehicle)
                  {0.26, 0.22, 0.18},    // pole
                  {0.62, 0.38, 0.30}}};  // vehicle (reddish, near A building)
    d.noise_amplitude = 0.05;
    d.noise_cells = 12;
    d.illumination = -0.07;
    return d;
}

enum class ObjShape { Rect, Disc, Bar };

struct SceneObject {
    int class_id = 0;
    ObjShape shape = ObjShape::Rect;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel box
    double depth = 0.0;                  // constant object depth
    bool on_ground = false;              // depth follows the ground ramp (markings)
};

struct SceneSpec {
    std::uint64_t seed = 0;
    int height = 64, width = 64;
    int horizon = 24;  // first ground row
    // The per-row ramp step stays below the 0.5 edge threshold, so the smooth
    // ground plane (and anything painted on it) never registers as a depth
    // discontinuity.
    double ground_far = 20.0, ground_near = 6.0;
    std::array<double, kNumClasses> palette_jitter{};  // per-scene, per-class
    std::vector<SceneObject> objects;          // sorted back-to-front
};

struct SceneSample {
    Tensor<float> image;   // [3,H,W] in [0,1]
    Tensor<float> depth;   // [1,H,W] in (0, d_max]
    Tensor<float> semseg;  // [H,W], integral class ids
    Tensor<float> edges;   // [1,H,W] in {0,1}
    std::string domain;
};

inline double ground_depth_at(const SceneSpec& s, int y) {
    if (y <= s.horizon) return s.ground_far;
    const double t = static_cast<double>(y - s.horizon) / (s.height - 1 - s.horizon);
    return s.ground_far + t * (s.ground_near - s.ground_far);
}

// Deterministic scene sampling. Always emits >= 1 ground marking and one
// adjacent building slab pair at different depths.
inline SceneSpec sample_scene_spec(std::uint64_t seed, const DomainConfig& domain, int height = 64,
                                   int width = 64) {
    Rng rng(seed);
    SceneSpec s;
    s.seed = seed;
    s.height = height;
    s.width = width;
    s.horizon = static_cast<int>(rng.uniform_int(height * 30 / 100, height * 42 / 100));
    s.ground_near = rng.uniform(4.0, 8.0);
    // slope sampled directly so the per-row step stays below the 0.5 depth
    // edge threshold at every image size
    s.ground_far = s.ground_near + rng.uniform(0.2, 0.45) * (height - 1 - s.horizon);
    for (int c = 0; c < kNumClasses; ++c)
        s.palette_jitter[c] = rng.uniform(-domain.palette_jitter, domain.palette_jitter);

    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };

    // building slab pair: same class, touching, different depths
    {
        const int w1 = static_cast<int>(rng.uniform_int(width / 6, width / 3));
        const int w2 = static_cast<int>(rng.uniform_int(width / 6, width / 3));
        const int x0 = static_cast<int>(rng.uniform_int(0, width - w1 - w2 - 1));
        const int top = static_cast<int>(rng.uniform_int(height / 12, height / 4));
        const int bottom = clampi(s.horizon + static_cast<int>(rng.uniform_int(1, 4)), top + 4, height);
        double d1 = rng.uniform(20.0, 45.0);
        double d2 = d1 + (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(4.0, 12.0);
        d2 = std::clamp(d2, 15.0, 55.0);
        s.objects.push_back({kClassBuilding, ObjShape::Rect, x0, top, x0 + w1, bottom, d1, false});
        s.objects.push_back(
            {kClassBuilding, ObjShape::Rect, x0 + w1, top, x0 + w1 + w2, bottom, d2, false});
    }
    if (rng.bernoulli(domain.p_extra_building)) {
        const int w = static_cast<int>(rng.uniform_int(width / 6, width / 3));
        const int x0 = static_cast<int>(rng.uniform_int(0, width - w - 1));
        const int top = static_cast<int>(rng.uniform_int(height / 10, height / 3));
        const int bottom = clampi(s.horizon + 2, top + 4, height);
        s.objects.push_back(
            {kClassBuilding, ObjShape::Rect, x0, top, x0 + w, bottom, rng.uniform(18.0, 48.0), false});
    }
    // poles: thin vertical bars crossing the horizon
    const int n_poles = static_cast<int>(rng.uniform_int(1, domain.max_poles));
    for (int i = 0; i < n_poles; ++i) {
        const int w = static_cast<int>(rng.uniform_int(2, 3));
        const int x0 = static_cast<int>(rng.uniform_int(1, width - w - 1));
        const int top = clampi(s.horizon - static_cast<int>(rng.uniform_int(8, 16)), 0, height - 2);
        const int bottom = clampi(s.horizon + static_cast<int>(rng.uniform_int(4, 10)), top + 4, height);
        s.objects.push_back(
            {kClassPole, ObjShape::Bar, x0, top, x0 + w, bottom, rng.uniform(10.0, 25.0), false});
    }
    // vehicles: boxes (sometimes discs) in the lower half
    const int n_vehicles = static_cast<int>(rng.uniform_int(1, domain.max_vehicles));
    for (int i = 0; i < n_vehicles; ++i) {
        const int w = static_cast<int>(rng.uniform_int(width / 6, width / 4));
        const int h = static_cast<int>(rng.uniform_int(height / 10, height / 7));
        const int x0 = static_cast<int>(rng.uniform_int(0, width - w - 1));
        const int bottom =
            clampi(s.horizon + static_cast<int>(rng.uniform_int(4, height - s.horizon - 4)), 4, height);
        const ObjShape shape = rng.bernoulli(0.3) ? ObjShape::Disc : ObjShape::Rect;
        s.objects.push_back(
            {kClassVehicle, shape, x0, bottom - h, x0 + w, bottom, rng.uniform(8.0, 30.0), false});
    }
    // ground markings: painted at ground depth (no depth edge)
    const int n_markings = static_cast<int>(rng.uniform_int(1, domain.max_markings));
    for (int i = 0; i < n_markings; ++i) {
        const int w = static_cast<int>(rng.uniform_int(width / 8, width / 4));
        const int h = static_cast<int>(rng.uniform_int(2, 4));
        const int x0 = static_cast<int>(rng.uniform_int(0, width - w - 1));
        const int y0 = static_cast<int>(
            rng.uniform_int(s.horizon + 3, height - h - 2));
        s.objects.push_back({kClassMarking, ObjShape::Rect, x0, y0, x0 + w, y0 + h, 0.0, true});
    }

    // painter's order: far to near; on-ground markings carry the ground depth
    // at their top row for sorting purposes
    auto sort_depth = [&s](const SceneObject& o) {
        return o.on_ground ? ground_depth_at(s, o.y0) : o.depth;
    };
    std::stable_sort(s.objects.begin(), s.objects.end(),
                     [&](const SceneObject& a, const SceneObject& b) {
                         return sort_depth(a) > sort_depth(b);
                     });
    return s;
}

// pixel = 1 iff a 4-neighbor differs in semantic class or the absolute depth
// difference exceeds the threshold
inline Tensor<float> compute_edge_labels(const Tensor<float>& depth, const Tensor<float>& semseg,
                                         double depth_threshold = 0.5) {
    check(depth.rank() == 3 && semseg.rank() == 2, "edges: bad input ranks");
    const int H = semseg.shape[0], W = semseg.shape[1];
    check(depth.shape[1] == H && depth.shape[2] == W, "edges: misaligned inputs");
    Tensor<float> edges(std::vector<int>{1, H, W}, 0.0f);
    auto at = [&](const Tensor<float>& t, int y, int x) { return t.data[y * W + x]; };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            bool e = false;
            const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int k = 0; k < 4 && !e; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                if (at(semseg, y, x) != at(semseg, ny, nx)) e = true;
                if (std::abs(at(depth, y, x) - at(depth, ny, nx)) > depth_threshold) e = true;
            }
            edges.data[y * W + x] = e ? 1.0f : 0.0f;
        }
    return edges;
}

namespace detail {

// bilinear value noise in [-1,1] from a uniform grid; uniform draws only
inline std::vector<double> value_noise(Rng& rng, int cells, int H, int W) {
    const int g = cells + 1;
    std::vector<double> grid(static_cast<std::size_t>(g) * g);
    for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
    std::vector<double> out(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y) {
        const double fy = static_cast<double>(y) * cells / H;
        const int cy = static_cast<int>(fy);
        const double ty = fy - cy;
        for (int x = 0; x < W; ++x) {
            const double fx = static_cast<double>(x) * cells / W;
            const int cx = static_cast<int>(fx);
            const double tx = fx - cx;
            const double v00 = grid[static_cast<std::size_t>(cy) * g + cx];
            const double v01 = grid[static_cast<std::size_t>(cy) * g + cx + 1];
            const double v10 = grid[static_cast<std::size_t>(cy + 1) * g + cx];
            const double v11 = grid[static_cast<std::size_t>(cy + 1) * g + cx + 1];
            out[static_cast<std::size_t>(y) * W + x] =
                (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        }
    }
    return out;
}

}  // namespace detail

// Painter's-algorithm rendering. For a fixed spec, A and B renderings differ
// only in `image`; depth / semseg / edges are identical.
inline SceneSample render_scene(const SceneSpec& spec, const DomainConfig& domain) {
    const int H = spec.height, W = spec.width;
    SceneSample out;
    out.domain = domain.tag;
    out.depth = Tensor<float>(std::vector<int>{1, H, W});
    out.semseg = Tensor<float>(std::vector<int>{H, W});
    // background: sky above the horizon, ground ramp below
    for (int y = 0; y < H; ++y) {
        const bool sky = y < spec.horizon;
        const float d = sky ? static_cast<float>(kDepthMax)
                            : static_cast<float>(ground_depth_at(spec, y));
        for (int x = 0; x < W; ++x) {
            out.semseg.data[y * W + x] = sky ? kClassSky : kClassGround;
            out.depth.data[y * W + x] = d;
        }
    }
    for (const SceneObject& o : spec.objects) {
        const double cx = 0.5 * (o.x0 + o.x1), cy = 0.5 * (o.y0 + o.y1);
        const double rx = 0.5 * (o.x1 - o.x0), ry = 0.5 * (o.y1 - o.y0);
        for (int y = std::max(0, o.y0); y < std::min(H, o.y1); ++y)
            for (int x = std::max(0, o.x0); x < std::min(W, o.x1); ++x) {
                if (o.shape == ObjShape::Disc) {
                    const double nx = (x + 0.5 - cx) / rx, ny = (y + 0.5 - cy) / ry;
                    if (nx * nx + ny * ny > 1.0) continue;
                }
                out.semseg.data[y * W + x] = static_cast<float>(o.class_id);
                out.depth.data[y * W + x] = static_cast<float>(
                    o.on_ground ? ground_depth_at(spec, y) : o.depth);
            }
    }
    out.edges = compute_edge_labels(out.depth, out.semseg);

    // image: palette + per-scene jitter + domain texture noise + illumination
    out.image = Tensor<float>(std::vector<int>{3, H, W});
    Rng noise_rng(derive_seed(spec.seed, domain.tag == "A" ? 101 : 202));
    std::vector<double> noise = detail::value_noise(noise_rng, domain.noise_cells, H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int cls = static_cast<int>(out.semseg.data[y * W + x]);
            const double n = noise[static_cast<std::size_t>(y) * W + x] * domain.noise_amplitude;
            for (int ch = 0; ch < 3; ++ch) {
                double v = domain.palette[cls][ch] + spec.palette_jitter[cls] + n +
                           domain.illumination;
                out.image.data[(static_cast<std::size_t>(ch) * H + y) * W + x] =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return out;
}

struct SplitCounts {
    int train = 600, val = 100, test = 200;
};

inline constexpr const char* kSplitNames[3] = {"train", "val", "test"};

// disjoint seed streams per split
inline std::uint64_t sample_seed(std::uint64_t dataset_seed, int split, int index) {
    return derive_seed(dataset_seed, (static_cast<std::uint64_t>(split + 1) << 32) |
                                         static_cast<std::uint64_t>(index));
}

inline nlohmann::json domain_config_json(const DomainConfig& d) {
    nlohmann::json j;
    j["tag"] = d.tag;
    j["palette"] = d.palette;
    j["palette_jitter"] = d.palette_jitter;
    j["noise_amplitude"] = d.noise_amplitude;
    j["noise_cells"] = d.noise_cells;
    j["illumination"] = d.illumination;
    j["p_extra_building"] = d.p_extra_building;
    j["max_poles"] = d.max_poles;
    j["max_vehicles"] = d.max_vehicles;
    j["max_markings"] = d.max_markings;
    return j;
}

// Writes <root>/<domain>/<split>/<index>_{image,depth,semseg,edges}.tnsr plus
// a manifest with per-sample seeds; regeneration is bit-identical.
inline void generate_dataset(const std::string& root, const DomainConfig& domain,
                             const SplitCounts& counts, std::uint64_t seed, int height = 64,
                             int width = 64, bool overwrite = false) {
    namespace fs = std::filesystem;
    const fs::path dom_dir = fs::path(root) / domain.tag;
    if (fs::exists(dom_dir) && !fs::is_empty(dom_dir) && !overwrite)
        throw Error("generate_dataset: target exists, pass overwrite: " + dom_dir.string());
    fs::create_directories(dom_dir);

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["seed"] = seed;
    manifest["height"] = height;
    manifest["width"] = width;
    manifest["domain"] = domain_config_json(domain);
    const int split_counts[3] = {counts.train, counts.val, counts.test};
    for (int sp = 0; sp < 3; ++sp) {
        const fs::path split_dir = dom_dir / kSplitNames[sp];
        fs::create_directories(split_dir);
        auto seeds = nlohmann::json::array();
        for (int i = 0; i < split_counts[sp]; ++i) {
            const std::uint64_t ss = sample_seed(seed, sp, i);
            seeds.push_back(ss);
            SceneSpec spec = sample_scene_spec(ss, domain, height, width);
            SceneSample sample = render_scene(spec, domain);
            const std::string stem = (split_dir / std::to_string(i)).string();
            save_tnsr(stem + "_image.tnsr", sample.image);
            save_tnsr(stem + "_depth.tnsr", sample.depth);
            save_tnsr(stem + "_semseg.tnsr", sample.semseg);
            save_tnsr(stem + "_edges.tnsr", sample.edges);
        }
        manifest["splits"][kSplitNames[sp]] = {{"count", split_counts[sp]}, {"seeds", seeds}};
    }
    std::ofstream mf(dom_dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
    check(mf.good(), "generate_dataset: manifest write failed");
}

// Per-pixel class frequencies over a list of semseg maps: [K,H,W], summing to
// 1 over K at every location.
inline Tensor<float> occurrence_maps(const std::vector<Tensor<float>>& semsegs, int num_classes) {
    check(!semsegs.empty(), "occurrence_maps: need at least one sample");
    const int H = semsegs[0].shape[0], W = semsegs[0].shape[1];
    Tensor<float> maps(std::vector<int>{num_classes, H, W}, 0.0f);
    for (const auto& s : semsegs) {
        check(s.shape[0] == H && s.shape[1] == W, "occurrence_maps: inconsistent sizes");
        for (int i = 0; i < H * W; ++i) {
            const int cls = static_cast<int>(s.data[i]);
            check(cls >= 0 && cls < num_classes, "occurrence_maps: class out of range");
            maps.data[static_cast<std::size_t>(cls) * H * W + i] += 1.0f;
        }
    }
    const float inv = 1.0f / static_cast<float>(semsegs.size());
    for (auto& v : maps.data) v *= inv;
    return maps;
}

inline double occurrence_cosine(const Tensor<float>& a, const Tensor<float>& b, int cls) {
    const std::size_t plane = a.numel() / a.shape[0];
    const float* pa = a.data.data() + cls * plane;
    const float* pb = b.data.data() + cls * plane;
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < plane; ++i) {
        dot += static_cast<double>(pa[i]) * pb[i];
        na += static_cast<double>(pa[i]) * pa[i];
        nb += static_cast<double>(pb[i]) * pb[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace atdt

#endif  // ATDT_SCENEGEN_HPP_
