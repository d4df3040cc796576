#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rng.hpp"
#include "volume.hpp"

namespace u2net {

struct AugmentConfig {
    double p_elastic = 0.2;
    double elastic_grid = 8.0;   // control-point spacing, voxels
    double elastic_sigma = 2.0;  // displacement std at control points, voxels
    double p_rotation = 0.2;
    std::array<double, 3> max_rotation_deg{15.0, 15.0, 15.0};
    double p_scaling = 0.2;
    std::array<double, 2> scaling{0.85, 1.25};
    std::array<double, 3> p_mirror{0.5, 0.5, 0.5};

    static AugmentConfig none() {
        AugmentConfig c;
        c.p_elastic = c.p_rotation = c.p_scaling = 0;
        c.p_mirror = {0, 0, 0};
        return c;
    }

    void validate() const {
        auto prob = [](double p) {
            if (!(p >= 0 && p <= 1)) throw Error("augmentation probabilities must lie in [0, 1]");
        };
        prob(p_elastic);
        prob(p_rotation);
        prob(p_scaling);
        for (double p : p_mirror) prob(p);
        if (!(scaling[0] <= 1.0 && scaling[1] >= 1.0 && scaling[0] > 0)) throw Error("scaling range must contain 1.0");
        if (!(elastic_grid > 0) || elastic_sigma < 0) throw Error("elastic grid must be positive and sigma nonnegative");
    }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
    j = {{"p_elastic", c.p_elastic},   {"elastic_grid", c.elastic_grid}, {"elastic_sigma", c.elastic_sigma},
         {"p_rotation", c.p_rotation}, {"max_rotation_deg", c.max_rotation_deg}, {"p_scaling", c.p_scaling},
         {"scaling", c.scaling},       {"p_mirror", c.p_mirror}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
    AugmentConfig d;
    c.p_elastic = j.value("p_elastic", d.p_elastic);
    c.elastic_grid = j.value("elastic_grid", d.elastic_grid);
    c.elastic_sigma = j.value("elastic_sigma", d.elastic_sigma);
    c.p_rotation = j.value("p_rotation", d.p_rotation);
    c.max_rotation_deg = j.value("max_rotation_deg", d.max_rotation_deg);
    c.p_scaling = j.value("p_scaling", d.p_scaling);
    c.scaling = j.value("scaling", d.scaling);
    c.p_mirror = j.value("p_mirror", d.p_mirror);
}

/// Flips every channel along one spatial axis (0 depth, 1 height, 2 width).
inline Volume mirror(const Volume& v, std::size_t axis) {
    const Extent3 e = v.extent();
    Volume out = v;
    for (std::size_t c = 0; c < v.channels(); ++c)
        for (std::size_t z = 0; z < e.d; ++z)
            for (std::size_t y = 0; y < e.h; ++y)
                for (std::size_t x = 0; x < e.w; ++x) {
                    std::array<std::size_t, 3> s{z, y, x};
                    s[axis] = e[axis] - 1 - s[axis];
                    out.data.at(c, z, y, x) = v.data.at(c, s[0], s[1], s[2]);
                }
    return out;
}

namespace augdetail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

inline Mat3 rotation(std::size_t axis, double rad) {
    const double c = std::cos(rad), s = std::sin(rad);
    Mat3 m{};
    m[axis][axis] = 1;
    const std::size_t i = (axis + 1) % 3, j = (axis + 2) % 3;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    return m;
}

/// Coarse Gaussian control grid, trilinearly upsampled to every voxel.
struct Displacement {
    Extent3 grid;
    double step = 1;
    std::vector<double> v;  // 3 x grid voxels

    double at(std::size_t comp, double z, double y, double x) const {
        const std::array<double, 3> p{z / step, y / step, x / step};
        std::array<std::size_t, 3> i0{}, i1{};
        std::array<double, 3> t{};
        for (std::size_t a = 0; a < 3; ++a) {
            const double s = std::clamp(p[a], 0.0, double(grid[a] - 1));
            i0[a] = static_cast<std::size_t>(std::floor(s));
            i1[a] = std::min(i0[a] + 1, grid[a] - 1);
            t[a] = s - double(i0[a]);
        }
        auto g = [&](std::size_t a, std::size_t b, std::size_t c) {
            return v[((comp * grid.d + a) * grid.h + b) * grid.w + c];
        };
        auto row = [&](std::size_t a, std::size_t b) { return std::lerp(g(a, b, i0[2]), g(a, b, i1[2]), t[2]); };
        auto plane = [&](std::size_t a) { return std::lerp(row(a, i0[1]), row(a, i1[1]), t[1]); };
        return std::lerp(plane(i0[0]), plane(i1[0]), t[0]);
    }
};

/// Samples `v` at a continuous source position; outside the volume reads 0.
inline float sample(const Volume& v, std::size_t c, const std::array<double, 3>& s, bool nearest) {
    const Extent3 e = v.extent();
    if (nearest) {
        std::array<long long, 3> i{};
        for (std::size_t a = 0; a < 3; ++a) {
            i[a] = std::llround(s[a]);
            if (i[a] < 0 || i[a] >= static_cast<long long>(e[a])) return 0.0f;
        }
        return v.data.at(c, i[0], i[1], i[2]);
    }
    std::array<long long, 3> i0{};
    std::array<double, 3> t{};
    for (std::size_t a = 0; a < 3; ++a) {
        const double f = std::floor(s[a]);
        i0[a] = static_cast<long long>(f);
        t[a] = s[a] - f;
        if (i0[a] < -1 || i0[a] >= static_cast<long long>(e[a])) return 0.0f;
    }
    auto at = [&](long long z, long long y, long long x) -> double {
        if (z < 0 || y < 0 || x < 0 || z >= (long long)e.d || y >= (long long)e.h || x >= (long long)e.w) return 0.0;
        return v.data.at(c, z, y, x);
    };
    auto row = [&](long long z, long long y) { return std::lerp(at(z, y, i0[2]), at(z, y, i0[2] + 1), t[2]); };
    auto plane = [&](long long z) { return std::lerp(row(z, i0[1]), row(z, i0[1] + 1), t[1]); };
    return static_cast<float>(std::lerp(plane(i0[0]), plane(i0[0] + 1), t[0]));
}

}  // namespace augdetail

/// Random spatial augmentation. Draws are consumed in the order elastic,
/// rotation, scaling, mirroring; image and label share one geometric map
/// (trilinear for the image, nearest for the label). `label` may be empty.
inline std::pair<Volume, Volume> augment(const Volume& image, const Volume& label, const AugmentConfig& cfg,
                                         std::uint64_t seed) {
    cfg.validate();
    if (!label.empty() && label.extent() != image.extent()) throw Error("augment: label and image extents differ");
    Rng rng(seed);
    const Extent3 e = image.extent();

    std::optional<augdetail::Displacement> elastic;
    if (uniform01(rng) < cfg.p_elastic) {
        augdetail::Displacement d;
        d.step = cfg.elastic_grid;
        for (std::size_t a = 0; a < 3; ++a)
            d.grid[a] = static_cast<std::size_t>(std::ceil(double(e[a] - 1) / d.step)) + 1;
        d.v.resize(3 * d.grid.voxels());
        for (auto& x : d.v) x = cfg.elastic_sigma * normal(rng);
        elastic = std::move(d);
    }
    std::optional<augdetail::Mat3> rot;
    if (uniform01(rng) < cfg.p_rotation) {
        augdetail::Mat3 m = augdetail::rotation(0, 0);
        for (std::size_t a = 0; a < 3; ++a) {
            const double deg = uniform(rng, -cfg.max_rotation_deg[a], cfg.max_rotation_deg[a]);
            m = augdetail::matmul(augdetail::rotation(a, deg * 3.141592653589793 / 180.0), m);
        }
        rot = m;
    }
    double scale = 1.0;
    bool scaled = false;
    if (uniform01(rng) < cfg.p_scaling) {
        scale = uniform(rng, cfg.scaling[0], cfg.scaling[1]);
        scaled = true;
    }
    std::array<bool, 3> flip{};
    for (std::size_t a = 0; a < 3; ++a) flip[a] = uniform01(rng) < cfg.p_mirror[a];

    Volume img = image, lab = label;
    if (elastic || rot || scaled) {
        const std::array<double, 3> center{(e.d - 1) / 2.0, (e.h - 1) / 2.0, (e.w - 1) / 2.0};
        // Output voxel p reads source center + R^T (p - center) / scale + displacement(p).
        img = Volume{Tensor<float>(image.data.shape()), image.spacing, image.kind};
        if (!label.empty()) lab = Volume{Tensor<float>(label.data.shape()), label.spacing, label.kind};
        for (std::size_t z = 0; z < e.d; ++z)
            for (std::size_t y = 0; y < e.h; ++y)
                for (std::size_t x = 0; x < e.w; ++x) {
                    const std::array<double, 3> q{z - center[0], y - center[1], x - center[2]};
                    std::array<double, 3> s{};
                    for (std::size_t i = 0; i < 3; ++i) {
                        double acc = 0;
                        for (std::size_t k = 0; k < 3; ++k) acc += (rot ? (*rot)[k][i] : double(i == k)) * q[k];
                        s[i] = center[i] + acc / scale;
                        if (elastic) s[i] += elastic->at(i, double(z), double(y), double(x));
                    }
                    for (std::size_t c = 0; c < image.channels(); ++c)
                        img.data.at(c, z, y, x) = augdetail::sample(image, c, s, false);
                    for (std::size_t c = 0; !label.empty() && c < label.channels(); ++c)
                        lab.data.at(c, z, y, x) = augdetail::sample(label, c, s, true);
                }
    }
    for (std::size_t a = 0; a < 3; ++a)
        if (flip[a]) {
            img = mirror(img, a);
            if (!lab.empty()) lab = mirror(lab, a);
        }
    return {std::move(img), std::move(lab)};
}

}  // namespace u2net
