#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include <u2net/augment.hpp>
#include <u2net/manifest.hpp>
#include <u2net/preprocess.hpp>
#include <u2net/sampling.hpp>
#include <u2net/synth.hpp>
#include <u2net/volume.hpp>

using namespace u2net;
namespace fs = std::filesystem;

namespace {

Volume image(std::size_t c, Extent3 e, float fill = 0.0f, Spacing sp = {1, 1, 1}) {
    return {Tensor<float>(volume_shape(c, e), fill), sp, VolumeKind::image};
}

Volume label(Extent3 e, float fill = 0.0f) { return {Tensor<float>(volume_shape(1, e), fill), {1, 1, 1}, VolumeKind::label}; }

Volume random_image(std::size_t c, Extent3 e, std::uint64_t seed) {
    Volume v = image(c, e);
    Rng rng(seed);
    for (auto& x : v.data.values()) x = static_cast<float>(normal(rng));
    return v;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("u2net_datapipe_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
    return out;
}

DomainSpec spec(std::string id, std::size_t modalities = 1, std::size_t classes = 2) {
    DomainSpec d;
    d.id = std::move(id);
    d.modalities = modalities;
    d.classes = classes;
    d.patch_shape = {16, 16, 16};
    return d;
}

SynthOptions small_synth() {
    SynthOptions o;
    o.min_extent = 16;
    o.max_extent = 20;
    return o;
}

}  // namespace

TEST(Volume, HeaderLayoutAndRoundTrip) {
    Volume v = random_image(2, {3, 4, 5}, 1);
    v.spacing = {0.5, 1.25, 3.0};
    const std::string bytes = encode_volume(v);
    ASSERT_EQ(bytes.size(), 8 + 4 + 16 + 24 + 2 * 60 * 4u);
    EXPECT_EQ(std::string(bytes.data(), 8), std::string("U2VOL1\0\0", 8));
    std::uint32_t u[5];
    std::memcpy(u, bytes.data() + 8, 20);
    EXPECT_EQ(u[0], 0u);
    EXPECT_EQ(u[1], 2u);
    EXPECT_EQ(u[2], 3u);
    EXPECT_EQ(u[3], 4u);
    EXPECT_EQ(u[4], 5u);
    double sp[3];
    std::memcpy(sp, bytes.data() + 28, 24);
    EXPECT_EQ(sp[1], 1.25);
    float first;
    std::memcpy(&first, bytes.data() + 52, 4);
    EXPECT_EQ(first, v.data[0]);

    const Volume back = decode_volume(bytes);
    EXPECT_EQ(back.data, v.data);
    EXPECT_EQ(back.spacing, v.spacing);
    EXPECT_EQ(encode_volume(back), bytes);
}

TEST(Volume, LabelsAreU16AndValidated) {
    Volume l = label({2, 2, 2});
    l.data[3] = 7;
    const auto bytes = encode_volume(l);
    ASSERT_EQ(bytes.size(), 52 + 8 * 2u);
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + 52 + 6, 2);
    EXPECT_EQ(v, 7);
    EXPECT_EQ(decode_volume(bytes).data, l.data);

    l.data[0] = 0.5f;
    EXPECT_THROW(encode_volume(l), Error);
    EXPECT_THROW(decode_volume(bytes.substr(0, bytes.size() - 1)), Error);
    EXPECT_THROW(decode_volume("U2VOL2" + bytes.substr(6)), Error);
}

TEST(Crop, ExampleBoxConfinedNonzeros) {
    Volume v = image(1, {10, 10, 10});
    for (std::size_t z = 2; z <= 5; ++z)
        for (std::size_t y = 2; y <= 5; ++y)
            for (std::size_t x = 2; x <= 5; ++x) v.data.at(0, z, y, x) = 1.0f + z;
    Volume l = label({10, 10, 10});
    l.data.at(0, 3, 3, 3) = 1;
    const auto r = crop_nonzero(v, l);
    EXPECT_EQ(r.image.extent(), (Extent3{4, 4, 4}));
    EXPECT_EQ(r.label.extent(), (Extent3{4, 4, 4}));
    EXPECT_EQ(r.box.lo, (std::array<std::size_t, 3>{2, 2, 2}));
    EXPECT_EQ(r.label.data.at(0, 1, 1, 1), 1.0f);
    EXPECT_EQ(r.image.data.at(0, 0, 0, 0), 3.0f);
}

TEST(Crop, FullyNonzeroAndAllZeroAreIdentity) {
    const Volume v = random_image(1, {5, 6, 7}, 2);
    auto r = crop_nonzero(v, Volume{});
    EXPECT_EQ(r.image.data, v.data);
    EXPECT_EQ(r.box, BoundingBox::full(v.extent()));
    const Volume z = image(2, {4, 4, 4});
    r = crop_nonzero(z, Volume{});
    EXPECT_EQ(r.image.data, z.data);
    EXPECT_EQ(r.box, BoundingBox::full(z.extent()));
}

TEST(Crop, BoxIsUnionAcrossChannels) {
    Volume v = image(2, {8, 8, 8});
    // Channel 0 nonzero at one voxel; channel 1 nonzero in the slab z = 5..6.
    v.data.at(0, 1, 2, 3) = 1;
    for (std::size_t z = 5; z <= 6; ++z)
        for (std::size_t y = 4; y < 8; ++y)
            for (std::size_t x = 0; x < 5; ++x) v.data.at(1, z, y, x) = -2;
    const auto b = nonzero_box(v);
    EXPECT_EQ(b.lo, (std::array<std::size_t, 3>{1, 2, 0}));
    EXPECT_EQ(b.hi, (std::array<std::size_t, 3>{7, 8, 5}));

    Volume only1 = v;
    only1.data.at(0, 1, 2, 3) = 0;
    EXPECT_EQ(nonzero_box(only1).lo, (std::array<std::size_t, 3>{5, 4, 0}));
}

TEST(MedianSpacing, LowerMedianRule) {
    auto axis0 = [](std::vector<double> v) {
        std::vector<Spacing> s;
        for (double x : v) s.push_back({x, 1, 1});
        return median_spacing(s)[0];
    };
    EXPECT_EQ(axis0({1, 2, 3}), 2);
    EXPECT_EQ(axis0({4, 1, 3, 2}), 2);
    EXPECT_EQ(axis0({2.5}), 2.5);
    EXPECT_EQ(median_spacing({{1, 5, 9}, {3, 4, 7}, {2, 6, 8}}), (Spacing{2, 5, 8}));
    EXPECT_THROW(median_spacing({}), Error);
}

TEST(Resample, SizeRule) {
    Volume v = random_image(1, {10, 10, 10}, 3);
    v.spacing = {2.0, 2.0, 2.0};
    const Volume r = resample(v, {1.0, 1.0, 1.0});
    EXPECT_EQ(r.extent(), (Extent3{20, 20, 20}));
    EXPECT_EQ(r.spacing, (Spacing{1, 1, 1}));
    EXPECT_EQ(resampled_extent({3, 7, 1}, {1, 1, 1}, {2.5, 0.3, 100}), (Extent3{1, 23, 1}));
}

TEST(Resample, SameSpacingIsBitExactIdentity) {
    Volume v = random_image(3, {7, 5, 6}, 4);
    v.spacing = {1.5, 0.7, 2.2};
    const Volume r = resample(v, v.spacing);
    EXPECT_EQ(r.data, v.data);
}

TEST(Resample, TrilinearIsExactOnAffineFields) {
    // Away from clamped borders, trilinear interpolation of an affine field
    // equals the field at the center-aligned source coordinate.
    Volume v = image(1, {12, 12, 12});
    auto f = [](double z, double y, double x) { return 0.5 + z + 2 * y - 3 * x; };
    for (std::size_t z = 0; z < 12; ++z)
        for (std::size_t y = 0; y < 12; ++y)
            for (std::size_t x = 0; x < 12; ++x) v.data.at(0, z, y, x) = float(f(z, y, x));
    const Volume r = resize(v, {6, 8, 9});
    for (std::size_t z = 0; z < 6; ++z)
        for (std::size_t y = 1; y + 1 < 8; ++y)
            for (std::size_t x = 1; x + 1 < 9; ++x) {
                const double sz = (z + 0.5) * 2 - 0.5, sy = (y + 0.5) * 1.5 - 0.5, sx = (x + 0.5) * 12.0 / 9.0 - 0.5;
                EXPECT_NEAR(r.data.at(0, z, y, x), f(sz, sy, sx), 1e-4);
            }
}

TEST(Resample, LabelsKeepValueSetImagesStayInRange) {
    Volume l = label({9, 9, 9});
    Rng rng(5);
    for (auto& x : l.data.values()) x = float(uniform_index(rng, 2) * 3);
    l.spacing = {1.0, 2.0, 0.5};
    const Volume r = resample(l, {0.7, 1.3, 1.1});
    std::set<float> in(l.data.values().begin(), l.data.values().end());
    std::set<float> out(r.data.values().begin(), r.data.values().end());
    EXPECT_TRUE(std::includes(in.begin(), in.end(), out.begin(), out.end()));

    Volume v = random_image(2, {9, 9, 9}, 6);
    const Volume s = resample(v, {0.6, 1.7, 0.9});
    const std::size_t n = v.extent().voxels(), m = s.extent().voxels();
    for (std::size_t c = 0; c < 2; ++c) {
        auto src = v.data.values().subspan(c * n, n);
        auto dst = s.data.values().subspan(c * m, m);
        const auto [lo, hi] = std::minmax_element(src.begin(), src.end());
        for (float x : dst) {
            EXPECT_GE(x, *lo);
            EXPECT_LE(x, *hi);
        }
    }
}

TEST(Normalize, UniformRampClosedForm) {
    Volume v = image(1, {1, 1, 101});
    for (std::size_t i = 0; i <= 100; ++i) v.data[i] = float(i);
    const Volume r = normalize_intensity(v);
    // Clipped values: 2 (x3), 3..97, 98 (x3). Mean 50 by symmetry.
    double var = 0;
    for (std::size_t i = 0; i <= 100; ++i) {
        const double c = std::clamp(double(i), 2.0, 98.0) - 50.0;
        var += c * c;
    }
    const double sd = std::sqrt(var / 101.0);
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i <= 100; ++i) {
        EXPECT_NEAR(r.data[i], (std::clamp(double(i), 2.0, 98.0) - 50.0) / sd, 1e-6);
        mean += r.data[i];
        sq += double(r.data[i]) * r.data[i];
    }
    mean /= 101;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(sq / 101 - mean * mean), 1.0, 1e-6);
}

TEST(Normalize, PercentileInterpolates) {
    EXPECT_DOUBLE_EQ(percentile({0, 10}, 25), 2.5);
    EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 98), 4.92);
    EXPECT_DOUBLE_EQ(percentile({7}, 2), 7);
}

TEST(Normalize, ConstantChannelAndIndependence) {
    Volume v = random_image(2, {4, 4, 4}, 7);
    for (std::size_t i = 0; i < 64; ++i) v.data[i] = 3.5f;
    const Volume r = normalize_intensity(v);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(r.data[i], 0.0f);

    Volume w = v;
    for (std::size_t i = 0; i < 64; ++i) w.data[i] = float(i % 5);
    const Volume rw = normalize_intensity(w);
    for (std::size_t i = 64; i < 128; ++i) EXPECT_EQ(rw.data[i], r.data[i]);
}

TEST(Augment, ZeroProbabilitiesAreIdentity) {
    const Volume v = random_image(2, {6, 7, 8}, 8);
    Volume l = label({6, 7, 8}, 1);
    auto [a, b] = augment(v, l, AugmentConfig::none(), 99);
    EXPECT_EQ(a.data, v.data);
    EXPECT_EQ(b.data, l.data);
}

TEST(Augment, MirrorIsAnInvolution) {
    const Volume v = random_image(1, {5, 6, 7}, 9);
    for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(mirror(mirror(v, a), a).data, v.data);
    EXPECT_NE(mirror(v, 2).data, v.data);
}

TEST(Augment, SameSeedIsBitIdentical) {
    AugmentConfig cfg;
    cfg.p_elastic = cfg.p_rotation = cfg.p_scaling = 1.0;
    const Volume v = random_image(1, {10, 10, 10}, 10);
    Volume l = label({10, 10, 10});
    for (std::size_t i = 0; i < 500; ++i) l.data[i] = 1;
    auto r1 = augment(v, l, cfg, 1234);
    auto r2 = augment(v, l, cfg, 1234);
    EXPECT_EQ(r1.first.data, r2.first.data);
    EXPECT_EQ(r1.second.data, r2.second.data);
    auto r3 = augment(v, l, cfg, 1235);
    EXPECT_NE(r1.first.data, r3.first.data);
    for (float x : r1.second.data.values()) EXPECT_TRUE(x == 0.0f || x == 1.0f);
}

TEST(Augment, ImageAndLabelShareOneMap) {
    // Image = label = voxel index: mirroring must permute both identically.
    const Extent3 e{6, 5, 4};
    Volume v = image(1, e);
    Volume l = label(e);
    for (std::size_t i = 0; i < e.voxels(); ++i) v.data[i] = l.data[i] = float(i);
    AugmentConfig cfg = AugmentConfig::none();
    cfg.p_mirror = {1, 0, 1};
    auto [a, b] = augment(v, l, cfg, 3);
    EXPECT_EQ(a.data, b.data);
    EXPECT_EQ(a.data, mirror(mirror(v, 0), 2).data);

    // With a pure rotation the label still takes values from the source set.
    cfg = AugmentConfig::none();
    cfg.p_rotation = 1;
    auto [c, d] = augment(v, l, cfg, 4);
    for (float x : d.data.values()) EXPECT_EQ(x, std::floor(x));
}

TEST(Augment, RejectsBadConfig) {
    AugmentConfig c;
    c.scaling = {1.1, 1.3};
    EXPECT_THROW(c.validate(), Error);
    c = AugmentConfig{};
    c.p_mirror[1] = 1.5;
    EXPECT_THROW(c.validate(), Error);
}

TEST(SamplePatch, PatchEqualsImage) {
    const Volume v = random_image(1, {8, 8, 8}, 11);
    const Volume l = label({8, 8, 8});
    Rng rng(1);
    auto p = sample_patch(v, l, {8, 8, 8}, rng);
    EXPECT_EQ(p.image.data, v.data);
}

TEST(SamplePatch, SmallImageIsPaddedSymmetrically) {
    const Volume v = image(1, {8, 8, 8}, 1.0f);
    const Volume l = label({8, 8, 8}, 1.0f);
    Rng rng(2);
    auto p = sample_patch(v, l, {16, 16, 16}, rng);
    EXPECT_EQ(p.image.extent(), (Extent3{16, 16, 16}));
    for (std::size_t z = 0; z < 16; ++z)
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) {
                const bool in = z >= 4 && z < 12 && y >= 4 && y < 12 && x >= 4 && x < 12;
                EXPECT_EQ(p.image.data.at(0, z, y, x), in ? 1.0f : 0.0f);
                EXPECT_EQ(p.label.data.at(0, z, y, x), in ? 1.0f : 0.0f);
            }
}

TEST(SamplePatch, ForegroundBias) {
    const Volume v = random_image(1, {20, 20, 20}, 12);
    Volume l = label({20, 20, 20});
    l.data.at(0, 17, 2, 9) = 1;
    int hits_biased = 0, hits_uniform = 0;
    for (std::uint64_t s = 0; s < 200; ++s) {
        Rng r1(s), r2(s);
        const auto a = sample_patch(v, l, {6, 6, 6}, r1, 1.0);
        const auto b = sample_patch(v, l, {6, 6, 6}, r2, 0.0);
        hits_biased += std::count(a.label.data.values().begin(), a.label.data.values().end(), 1.0f) > 0;
        hits_uniform += int(std::count(b.label.data.values().begin(), b.label.data.values().end(), 1.0f));
    }
    EXPECT_EQ(hits_biased, 200);
    EXPECT_LT(hits_uniform, 40);

    // All-background labels: bias falls back to uniform sampling.
    const Volume bg = label({20, 20, 20});
    Rng r(3);
    EXPECT_NO_THROW(sample_patch(v, bg, {6, 6, 6}, r, 1.0));
}

TEST(RoundRobin, Examples) {
    const std::vector<std::string> d{"d0", "d1", "d2"};
    std::vector<std::string> seq;
    for (std::size_t i = 0; i < 6; ++i) seq.push_back(round_robin(d, i));
    EXPECT_EQ(seq, (std::vector<std::string>{"d0", "d1", "d2", "d0", "d1", "d2"}));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(round_robin_index(1, i), 0u);
    std::vector<int> counts(5);
    for (std::size_t i = 0; i < 7 * 5; ++i) ++counts[round_robin_index(5, i)];
    for (int c : counts) EXPECT_EQ(c, 7);
}

TEST(Batches, IndependentOfWorkerCount) {
    DomainData data{spec("a"), {}, {}};
    for (int i = 0; i < 3; ++i) {
        Volume l = label({18, 18, 18});
        for (std::size_t k = 0; k < 300; ++k) l.data[k * 7 + i] = 1;
        data.cases.push_back({"c" + std::to_string(i), random_image(1, {18, 18, 18}, 20 + i), l});
    }
    SamplingConfig cfg;
    cfg.augment.p_elastic = cfg.augment.p_rotation = 0.5;
    for (std::uint64_t it = 0; it < 3; ++it) {
        const auto one = make_batch(data, cfg, 42, 1, it, 5, 1);
        const auto four = make_batch(data, cfg, 42, 1, it, 5, 4);
        for (std::size_t b = 0; b < 5; ++b) {
            EXPECT_EQ(one[b].image, four[b].image);
            EXPECT_EQ(one[b].labels, four[b].labels);
        }
    }
    const auto other = make_batch(data, cfg, 42, 2, 0, 1, 1);
    EXPECT_NE(other[0].image, make_batch(data, cfg, 42, 1, 0, 1, 1)[0].image);
}

TEST(Batches, ResizesExtractedPatchToNetworkPatch) {
    DomainData data{spec("a"), {}, {24, 24, 24}};
    data.cases.push_back({"c", random_image(1, {30, 30, 30}, 30), label({30, 30, 30})});
    const auto b = make_batch(data, SamplingConfig{AugmentConfig::none(), 0.5}, 1, 0, 0, 1, 1);
    EXPECT_EQ(b[0].image.shape(), (Shape{1, 16, 16, 16}));
    EXPECT_EQ(b[0].labels.size(), 16u * 16 * 16);
}

TEST(PatchPlan, RoundsToLevelMultiples) {
    auto p = independent_patch_plan({128, 128, 128});
    EXPECT_EQ(p.patch, (Extent3{128, 128, 128}));
    EXPECT_EQ(p.levels, 4u);
    p = independent_patch_plan({100, 200, 50}, std::size_t{1} << 30);
    // levels per axis: 3, 4, 2
    EXPECT_EQ(p.patch, (Extent3{96, 192, 48}));
    EXPECT_EQ(p.levels, 2u);
    p = independent_patch_plan({20, 20, 20});
    EXPECT_EQ(p.patch, (Extent3{20, 20, 20}));
    p = independent_patch_plan({256, 256, 256}, 128 * 128 * 128);
    EXPECT_LE(p.patch.voxels(), 128u * 128 * 128);
    for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(p.patch[a] % 32, 0u);
}

TEST(Synth, SplitAndDeterminism) {
    const auto dir1 = scratch("synth1"), dir2 = scratch("synth2");
    const auto d = spec("liverish", 2, 3);
    const auto m = synth_generate(d, 10, 77, dir1, small_synth());
    EXPECT_EQ(m.count(Split::train), 8u);
    EXPECT_EQ(m.count(Split::test), 2u);
    synth_generate(d, 10, 77, dir2, small_synth());
    EXPECT_EQ(tree_bytes(dir1), tree_bytes(dir2));

    const auto loaded = load_manifest(dir1 / "manifest.json");
    EXPECT_EQ(loaded.cases.size(), 10u);
    bool saw_fg = false;
    for (const auto& c : loaded.cases) {
        const Volume l = read_volume(loaded.resolve(c.label));
        const Volume i = read_volume(loaded.resolve(c.image));
        EXPECT_EQ(i.channels(), 2u);
        EXPECT_EQ(l.spacing, c.spacing);
        for (float v : l.data.values()) {
            EXPECT_LT(v, 3.0f);
            saw_fg |= v == 1.0f;
        }
    }
    EXPECT_TRUE(saw_fg);
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST(Synth, DomainsDifferInStyle) {
    const auto a = synth_case(spec("a"), 1, 0, small_synth());
    const auto b = synth_case(spec("b"), 1, 0, small_synth());
    EXPECT_NE(a.image.spacing, b.image.spacing);
}

TEST(Manifest, RejectsUnlabeledTrainAndBadSplit) {
    DatasetManifest m;
    m.domain = spec("x");
    for (int i = 0; i < 6; ++i) m.cases.push_back({"c" + std::to_string(i), "i", "l", {1, 1, 1}, Split::train, {}, {}});
    EXPECT_THROW(m.validate(), Error);  // 6 train of 6, expected 4.8
    m.cases[0].split = Split::test;
    EXPECT_NO_THROW(m.validate());
    m.cases[5].split = Split::test;
    EXPECT_NO_THROW(m.validate());
    m.cases[1].label.clear();
    EXPECT_THROW(m.validate(), Error);
}

TEST(Preprocess, PipelineAndIdempotence) {
    const auto raw = scratch("pp_raw"), once = scratch("pp_once"), twice = scratch("pp_twice");
    const auto m = synth_generate(spec("p"), 5, 3, raw, small_synth());
    std::ostringstream log;
    const auto p1 = preprocess_dataset(load_manifest(raw / "manifest.json"), once, &log);
    EXPECT_TRUE(p1.preprocessed);
    ASSERT_TRUE(p1.median_spacing);
    EXPECT_NE(log.str().find("crop ["), std::string::npos);
    for (const auto& c : p1.cases) {
        ASSERT_TRUE(c.crop_box);
        const Volume img = read_volume(p1.resolve(c.image));
        const Volume lab = read_volume(p1.resolve(c.label));
        EXPECT_EQ(img.spacing, *p1.median_spacing);
        EXPECT_EQ(img.extent(), lab.extent());
        EXPECT_EQ(img.extent(), resampled_extent(c.crop_box->extent(), m.cases[&c - p1.cases.data()].spacing, *p1.median_spacing));
    }
    preprocess_dataset(load_manifest(once / "manifest.json"), twice);
    EXPECT_EQ(tree_bytes(once), tree_bytes(twice));
    for (auto p : {raw, once, twice}) fs::remove_all(p);
}

TEST(Preprocess, RejectsOutOfRangeLabels) {
    const auto raw = scratch("pp_bad"), out = scratch("pp_bad_out");
    auto m = synth_generate(spec("q"), 5, 4, raw, small_synth());
    Volume l = read_volume(m.resolve(m.cases[0].label));
    l.data[0] = 5;
    write_volume(m.resolve(m.cases[0].label), l);
    EXPECT_THROW(preprocess_dataset(load_manifest(raw / "manifest.json"), out), Error);
    fs::remove_all(raw);
    fs::remove_all(out);
}
