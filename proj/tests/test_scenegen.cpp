#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <fstream>
#include <string>
#include <vector>

#include <atdt/scenegen.hpp>

using namespace atdt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("atdt_scenegen_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// depth-only edge map by plain 4-neighbor threshold loop
std::vector<bool> depth_only_edges(const Tensor<float>& depth, double thr) {
    const int H = depth.shape[1], W = depth.shape[2];
    std::vector<bool> out(static_cast<std::size_t>(H) * W, false);
    const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int k = 0; k < 4; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                if (std::abs(depth.data[y * W + x] - depth.data[ny * W + nx]) > thr)
                    out[static_cast<std::size_t>(y) * W + x] = true;
            }
    return out;
}

std::vector<bool> semantic_only_edges(const Tensor<float>& semseg) {
    const int H = semseg.shape[0], W = semseg.shape[1];
    std::vector<bool> out(static_cast<std::size_t>(H) * W, false);
    const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int k = 0; k < 4; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                if (semseg.data[y * W + x] != semseg.data[ny * W + nx])
                    out[static_cast<std::size_t>(y) * W + x] = true;
            }
    return out;
}

}  // namespace

TEST_CASE("scene sampling is deterministic and structurally guaranteed") {
    const DomainConfig da = domain_a_default();
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        SceneSpec s1 = sample_scene_spec(seed, da);
        SceneSpec s2 = sample_scene_spec(seed, da);
        REQUIRE(s1.objects.size() == s2.objects.size());
        CHECK(s1.horizon == s2.horizon);
        CHECK(s1.ground_far == s2.ground_far);

        int markings = 0, buildings = 0;
        bool touching_pair = false;
        for (std::size_t i = 0; i < s1.objects.size(); ++i) {
            const SceneObject &a = s1.objects[i], &b = s2.objects[i];
            CHECK(a.class_id == b.class_id);
            CHECK(a.x0 == b.x0);
            CHECK(a.depth == b.depth);
            if (a.class_id == kClassMarking) {
                ++markings;
                CHECK(a.on_ground);
                CHECK(a.y0 > s1.horizon);
            }
            if (a.class_id == kClassBuilding) ++buildings;
            for (std::size_t j = 0; j < s1.objects.size(); ++j) {
                const SceneObject& c = s1.objects[j];
                if (i != j && a.class_id == kClassBuilding && c.class_id == kClassBuilding &&
                    a.x1 == c.x0 && a.y0 == c.y0 && a.depth != c.depth)
                    touching_pair = true;
            }
        }
        CHECK(markings >= 1);
        CHECK(buildings >= 2);
        CHECK(touching_pair);
        // painter's order is far to near
        auto sd = [&](const SceneObject& o) {
            return o.on_ground ? ground_depth_at(s1, o.y0) : o.depth;
        };
        for (std::size_t i = 1; i < s1.objects.size(); ++i)
            CHECK(sd(s1.objects[i - 1]) >= sd(s1.objects[i]));
    }
}

TEST_CASE("ground depth ramp") {
    SceneSpec s = sample_scene_spec(3, domain_a_default());
    CHECK(ground_depth_at(s, s.horizon) == s.ground_far);
    CHECK(ground_depth_at(s, s.height - 1) == doctest::Approx(s.ground_near));
    for (int y = s.horizon + 1; y < s.height; ++y)
        CHECK(ground_depth_at(s, y) < ground_depth_at(s, y - 1));
}

TEST_CASE("rendering is deterministic") {
    const DomainConfig da = domain_a_default();
    SceneSpec spec = sample_scene_spec(9, da);
    SceneSample r1 = render_scene(spec, da);
    SceneSample r2 = render_scene(spec, da);
    CHECK(r1.image.data == r2.image.data);
    CHECK(r1.depth.data == r2.depth.data);
    CHECK(r1.semseg.data == r2.semseg.data);
    CHECK(r1.edges.data == r2.edges.data);
}

TEST_CASE("the two domains share ground truth and differ only in the image") {
    const DomainConfig da = domain_a_default(), db = domain_b_default();
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SceneSpec spec = sample_scene_spec(seed, da);
        SceneSample ra = render_scene(spec, da);
        SceneSample rb = render_scene(spec, db);
        CHECK(ra.depth.data == rb.depth.data);
        CHECK(ra.semseg.data == rb.semseg.data);
        CHECK(ra.edges.data == rb.edges.data);
        CHECK(ra.image.data != rb.image.data);
        CHECK(ra.domain == "A");
        CHECK(rb.domain == "B");
    }
    // with default amplitudes the two domain configs also sample identical
    // layouts from the same seed
    SceneSpec sa = sample_scene_spec(7, da), sb = sample_scene_spec(7, db);
    REQUIRE(sa.objects.size() == sb.objects.size());
    for (std::size_t i = 0; i < sa.objects.size(); ++i)
        CHECK(sa.objects[i].class_id == sb.objects[i].class_id);
}

TEST_CASE("domain brightness gap matches the illumination offsets") {
    const DomainConfig da = domain_a_default(), db = domain_b_default();
    double mean_a = 0.0, mean_b = 0.0;
    const int n = 100;
    for (std::uint64_t seed = 1; seed <= n; ++seed) {
        SceneSpec spec = sample_scene_spec(seed, da);
        SceneSample ra = render_scene(spec, da);
        SceneSample rb = render_scene(spec, db);
        double sa = 0.0, sb = 0.0;
        for (float v : ra.image.data) sa += v;
        for (float v : rb.image.data) sb += v;
        mean_a += sa / ra.image.numel() / n;
        mean_b += sb / rb.image.numel() / n;
    }
    // +0.03 vs -0.07 illumination on luminance-matched palettes
    CHECK(std::abs((mean_a - mean_b) - 0.10) < 0.02);
}

TEST_CASE("stored edges equal a recomputation from depth and semantics") {
    const DomainConfig da = domain_a_default();
    for (std::uint64_t seed = 30; seed < 40; ++seed) {
        SceneSample s = render_scene(sample_scene_spec(seed, da), da);
        Tensor<float> rec = compute_edge_labels(s.depth, s.semseg);
        CHECK(rec.data == s.edges.data);
        for (float v : s.edges.data) CHECK((v == 0.0f || v == 1.0f));
    }
}

TEST_CASE("edge labels are the union of depth and semantic boundaries") {
    const DomainConfig da = domain_a_default();
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        SceneSample s = render_scene(sample_scene_spec(seed, da), da);
        const int H = s.semseg.shape[0], W = s.semseg.shape[1];
        std::vector<bool> de = depth_only_edges(s.depth, 0.5);
        std::vector<bool> se = semantic_only_edges(s.semseg);
        int sem_no_depth = 0, depth_no_sem = 0;
        for (int i = 0; i < H * W; ++i) {
            CHECK(s.edges.data[i] == ((de[i] || se[i]) ? 1.0f : 0.0f));
            if (se[i] && !de[i]) ++sem_no_depth;
            if (de[i] && !se[i]) ++depth_no_sem;
        }
        // markings guarantee semantic-only boundaries; the building slab pair
        // guarantees depth-only ones — the two edge maps genuinely disagree
        CHECK(sem_no_depth > 0);
        CHECK(depth_no_sem > 0);
    }
}

TEST_CASE("depth range and sky sentinel") {
    const DomainConfig da = domain_a_default();
    SceneSample s = render_scene(sample_scene_spec(4, da), da);
    const int H = s.semseg.shape[0], W = s.semseg.shape[1];
    for (int i = 0; i < H * W; ++i) {
        CHECK(s.depth.data[i] > 0.0f);
        CHECK(s.depth.data[i] <= static_cast<float>(kDepthMax));
        if (s.semseg.data[i] == static_cast<float>(kClassSky))
            CHECK(s.depth.data[i] == static_cast<float>(kDepthMax));
        const int cls = static_cast<int>(s.semseg.data[i]);
        CHECK(cls >= 0);
        CHECK(cls < kNumClasses);
        CHECK(s.semseg.data[i] == static_cast<float>(cls));
    }
    for (float v : s.image.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("generate_dataset writes the documented layout and regenerates bit-identically") {
    TempDir tmp;
    const DomainConfig da = domain_a_default();
    SplitCounts counts;
    counts.train = 3;
    counts.val = 2;
    counts.test = 2;
    generate_dataset(tmp.path.string(), da, counts, 77, 32, 32);

    const fs::path dom = tmp.path / "A";
    CHECK(fs::exists(dom / "manifest.json"));
    const int per_split[3] = {3, 2, 2};
    for (int sp = 0; sp < 3; ++sp)
        for (int i = 0; i < per_split[sp]; ++i)
            for (const char* field : {"image", "depth", "semseg", "edges"})
                CHECK(fs::exists(dom / kSplitNames[sp] /
                                 (std::to_string(i) + "_" + field + ".tnsr")));

    SUBCASE("existing non-empty target is refused without overwrite") {
        CHECK_THROWS_AS(generate_dataset(tmp.path.string(), da, counts, 77, 32, 32), Error);
    }
    SUBCASE("regeneration with overwrite reproduces every byte") {
        const std::string img_before = slurp(dom / "train" / "0_image.tnsr");
        const std::string man_before = slurp(dom / "manifest.json");
        generate_dataset(tmp.path.string(), da, counts, 77, 32, 32, true);
        CHECK(slurp(dom / "train" / "0_image.tnsr") == img_before);
        CHECK(slurp(dom / "manifest.json") == man_before);
    }
    SUBCASE("stored samples match direct rendering of the manifest seeds") {
        auto manifest = nlohmann::json::parse(slurp(dom / "manifest.json"));
        const std::uint64_t ss = manifest["splits"]["val"]["seeds"][1].get<std::uint64_t>();
        CHECK(ss == sample_seed(77, 1, 1));
        SceneSample expect = render_scene(sample_scene_spec(ss, da, 32, 32), da);
        Tensor<float> img = load_tnsr<float>((dom / "val" / "1_image.tnsr").string());
        CHECK(img.shape == expect.image.shape);
        CHECK(img.data == expect.image.data);
    }
}

TEST_CASE("per-split seed streams are disjoint") {
    std::vector<std::uint64_t> seen;
    for (int sp = 0; sp < 3; ++sp)
        for (int i = 0; i < 50; ++i) seen.push_back(sample_seed(123, sp, i));
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
}

TEST_CASE("occurrence maps are per-pixel class frequencies") {
    const DomainConfig da = domain_a_default(), db = domain_b_default();
    std::vector<Tensor<float>> segs_a, segs_b;
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        segs_a.push_back(render_scene(sample_scene_spec(seed, da), da).semseg);
        segs_b.push_back(render_scene(sample_scene_spec(seed + 1000, db), db).semseg);
    }
    Tensor<float> ma = occurrence_maps(segs_a, kNumClasses);
    Tensor<float> mb = occurrence_maps(segs_b, kNumClasses);
    const int H = segs_a[0].shape[0], W = segs_a[0].shape[1];
    REQUIRE(ma.shape == std::vector<int>({kNumClasses, H, W}));
    for (int i = 0; i < H * W; ++i) {
        double sum = 0.0;
        for (int c = 0; c < kNumClasses; ++c) sum += ma.data[static_cast<std::size_t>(c) * H * W + i];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    // shared layout priors: per-class spatial occurrence is strongly aligned
    // across domains even from disjoint seeds
    CHECK(occurrence_cosine(ma, ma, kClassGround) == doctest::Approx(1.0));
    for (int c : {kClassSky, kClassGround, kClassBuilding})
        CHECK(occurrence_cosine(ma, mb, c) > 0.9);

    SUBCASE("empty input is rejected") {
        CHECK_THROWS_AS((void)occurrence_maps({}, kNumClasses), Error);
    }
    SUBCASE("disjoint single-class maps have zero cosine") {
        Tensor<float> s0(std::vector<int>{2, 2}, {0, 0, 0, 0});
        Tensor<float> s1(std::vector<int>{2, 2}, {1, 1, 1, 1});
        Tensor<float> m0 = occurrence_maps({s0}, 2);
        Tensor<float> m1 = occurrence_maps({s1}, 2);
        CHECK(occurrence_cosine(m0, m1, 0) == 0.0);
        CHECK(occurrence_cosine(m0, m0, 0) == doctest::Approx(1.0));
    }
}
