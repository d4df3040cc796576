#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "manifest.hpp"
#include "rng.hpp"
#include "volume.hpp"

namespace u2net {

struct SynthOptions {
    std::size_t min_extent = 32;
    std::size_t max_extent = 48;
    std::array<double, 2> spacing_jitter{0.9, 1.1};  // per-case factor on the domain's base spacing
    double train_fraction = 0.8;
    double noise = 8.0;  // intensity noise std
};

inline void to_json(nlohmann::json& j, const SynthOptions& o) {
    j = {{"min_extent", o.min_extent},
         {"max_extent", o.max_extent},
         {"spacing_jitter", o.spacing_jitter},
         {"train_fraction", o.train_fraction},
         {"noise", o.noise}};
}

inline void from_json(const nlohmann::json& j, SynthOptions& o) {
    SynthOptions d;
    o.min_extent = j.value("min_extent", d.min_extent);
    o.max_extent = j.value("max_extent", d.max_extent);
    o.spacing_jitter = j.value("spacing_jitter", d.spacing_jitter);
    o.train_fraction = j.value("train_fraction", d.train_fraction);
    o.noise = j.value("noise", d.noise);
}

enum class ShapeKind { sphere, box, tube };

/// Per-domain appearance drawn once from the style seed.
struct SynthStyle {
    Spacing base_spacing;
    double tissue = 100;
    std::vector<ShapeKind> shapes;   // per foreground class
    std::vector<double> contrast;    // per foreground class, added to tissue
    std::vector<double> size;        // per foreground class, voxels
    std::vector<double> gain, bias;  // per modality
};

inline SynthStyle synth_style(const DomainSpec& spec, std::uint64_t style_seed) {
    Rng rng(derive_seed(style_seed, {fnv1a(spec.id), 0}));
    SynthStyle s;
    for (auto& b : s.base_spacing) b = uniform(rng, 0.8, 1.6);
    s.tissue = uniform(rng, 80, 140);
    const std::size_t first = uniform_index(rng, 3);
    // Classes alternate bright/dark so percentile clipping cannot merge them.
    bool bright = uniform01(rng) < 0.5;
    for (std::size_t c = 1; c < spec.classes; ++c, bright = !bright) {
        s.shapes.push_back(static_cast<ShapeKind>((first + c - 1) % 3));
        s.contrast.push_back(bright ? uniform(rng, 0.5, 0.8) * s.tissue : -uniform(rng, 0.4, 0.6) * s.tissue);
        s.size.push_back(c == 1 ? uniform(rng, 6, 8) : uniform(rng, 3, 4.5));
    }
    for (std::size_t k = 0; k < spec.modalities; ++k) {
        s.gain.push_back(k == 0 ? 1.0 : uniform(rng, 0.6, 1.4) * (uniform01(rng) < 0.5 ? -1 : 1));
        s.bias.push_back(k == 0 ? 0.0 : uniform(rng, 150, 250));
    }
    return s;
}

struct SynthCase {
    Volume image, label;
};

namespace synthdetail {

inline bool inside(ShapeKind kind, const std::array<double, 3>& q, const std::array<double, 3>& half, std::size_t axis) {
    switch (kind) {
        case ShapeKind::sphere:
            return q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= half[0] * half[0];
        case ShapeKind::box:
            return std::abs(q[0]) <= half[0] && std::abs(q[1]) <= half[1] && std::abs(q[2]) <= half[2];
        case ShapeKind::tube: {
            double r2 = 0;
            for (std::size_t a = 0; a < 3; ++a)
                if (a != axis) r2 += q[a] * q[a];
            return std::abs(q[axis]) <= half[1] && r2 <= half[0] * half[0];
        }
    }
    return false;
}

}  // namespace synthdetail

/// Renders case `index` of a domain; depends only on (spec, style_seed, index, options).
inline SynthCase synth_case(const DomainSpec& spec, std::uint64_t style_seed, std::size_t index, const SynthOptions& o) {
    const SynthStyle style = synth_style(spec, style_seed);
    Rng rng(derive_seed(style_seed, {fnv1a(spec.id), index + 1}));
    Extent3 e;
    for (std::size_t a = 0; a < 3; ++a) e[a] = o.min_extent + uniform_index(rng, o.max_extent - o.min_extent + 1);
    Spacing sp;
    for (std::size_t a = 0; a < 3; ++a) sp[a] = style.base_spacing[a] * uniform(rng, o.spacing_jitter[0], o.spacing_jitter[1]);

    // Body: ellipsoid filling most of the volume; everything outside stays 0.
    std::array<double, 3> body_c{}, body_r{};
    for (std::size_t a = 0; a < 3; ++a) {
        body_c[a] = (e[a] - 1) / 2.0 + uniform(rng, -1.5, 1.5);
        body_r[a] = e[a] * uniform(rng, 0.38, 0.44);
    }
    struct Placed {
        std::array<double, 3> center, half;
        std::size_t axis;
    };
    std::vector<Placed> placed;
    for (std::size_t c = 1; c < spec.classes; ++c) {
        const double r = style.size[c - 1] * uniform(rng, 0.85, 1.15);
        Placed p;
        for (std::size_t a = 0; a < 3; ++a) p.center[a] = body_c[a] + uniform(rng, -0.35, 0.35) * (body_r[a] - r);
        p.half = {r, r * uniform(rng, 0.7, 1.3), r * uniform(rng, 0.7, 1.3)};
        if (style.shapes[c - 1] == ShapeKind::tube) p.half[1] = r * uniform(rng, 1.6, 2.2), p.half[0] = r * 0.55;
        p.axis = uniform_index(rng, 3);
        placed.push_back(p);
    }

    SynthCase out;
    out.image = Volume{Tensor<float>(volume_shape(spec.modalities, e)), sp, VolumeKind::image};
    out.label = Volume{Tensor<float>(volume_shape(1, e)), sp, VolumeKind::label};
    for (std::size_t z = 0; z < e.d; ++z)
        for (std::size_t y = 0; y < e.h; ++y)
            for (std::size_t x = 0; x < e.w; ++x) {
                const std::array<double, 3> p{double(z), double(y), double(x)};
                double rho = 0;
                for (std::size_t a = 0; a < 3; ++a) rho += std::pow((p[a] - body_c[a]) / body_r[a], 2);
                std::size_t cls = 0;
                if (rho <= 1.0)
                    for (std::size_t c = 1; c < spec.classes; ++c) {
                        const auto& s = placed[c - 1];
                        const std::array<double, 3> q{p[0] - s.center[0], p[1] - s.center[1], p[2] - s.center[2]};
                        if (synthdetail::inside(style.shapes[c - 1], q, s.half, s.axis)) cls = c;
                    }
                out.label.data.at(0, z, y, x) = float(cls);
                if (rho > 1.0) {
                    for (std::size_t k = 0; k < spec.modalities; ++k) normal(rng);
                    continue;
                }
                const double base = style.tissue + (cls ? style.contrast[cls - 1] : 0.0);
                for (std::size_t k = 0; k < spec.modalities; ++k) {
                    double v = style.gain[k] * base + style.bias[k] + o.noise * normal(rng);
                    if (v == 0.0) v = 1e-3;
                    out.image.data.at(k, z, y, x) = static_cast<float>(v);
                }
            }
    return out;
}

/// Writes `n_cases` rendered cases plus manifest.json under `out_dir`.
inline DatasetManifest synth_generate(const DomainSpec& spec, std::size_t n_cases, std::uint64_t style_seed,
                                      const std::filesystem::path& out_dir, const SynthOptions& o = {}) {
    spec.validate();
    if (n_cases == 0) throw Error("synth_generate: n_cases must be positive");
    if (o.min_extent > o.max_extent || o.min_extent == 0) throw Error("synth_generate: bad extent range");
    DatasetManifest m;
    m.domain = spec;
    m.root = out_dir;
    m.train_fraction = o.train_fraction;

    std::vector<std::size_t> order(n_cases);
    for (std::size_t i = 0; i < n_cases; ++i) order[i] = i;
    Rng split_rng(derive_seed(style_seed, {fnv1a(spec.id), 0xffffffffULL}));
    for (std::size_t i = n_cases; i-- > 1;) std::swap(order[i], order[uniform_index(split_rng, i + 1)]);
    const auto n_train = static_cast<std::size_t>(std::llround(o.train_fraction * double(n_cases)));
    std::vector<Split> split(n_cases, Split::test);
    for (std::size_t i = 0; i < n_train; ++i) split[order[i]] = Split::train;

    for (std::size_t i = 0; i < n_cases; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "case_%03zu", i);
        auto c = synth_case(spec, style_seed, i, o);
        const std::string img = std::string("images/") + name + ".u2vol";
        const std::string lab = std::string("labels/") + name + ".u2vol";
        write_volume(out_dir / img, c.image);
        write_volume(out_dir / lab, c.label);
        m.cases.push_back({name, img, lab, c.image.spacing, split[i], {}, {}});
    }
    m.validate();
    save_manifest(out_dir / "manifest.json", m);
    return m;
}

}  // namespace u2net
