#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include <json.hpp>

#include "volume.hpp"

namespace u2net {

/// Half-open voxel box [lo, hi) per axis.
struct BoundingBox {
    std::array<std::size_t, 3> lo{0, 0, 0};
    std::array<std::size_t, 3> hi{0, 0, 0};

    Extent3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    static BoundingBox full(Extent3 e) { return {{0, 0, 0}, {e.d, e.h, e.w}}; }
    bool operator==(const BoundingBox&) const = default;
};

inline void to_json(nlohmann::json& j, const BoundingBox& b) { j = {{"lo", b.lo}, {"hi", b.hi}}; }
inline void from_json(const nlohmann::json& j, BoundingBox& b) {
    b.lo = j.at("lo").get<std::array<std::size_t, 3>>();
    b.hi = j.at("hi").get<std::array<std::size_t, 3>>();
}

/// Tight box around voxels where any channel is nonzero; the full extent when none is.
inline BoundingBox nonzero_box(const Volume& v) {
    const Extent3 e = v.extent();
    BoundingBox b{{e.d, e.h, e.w}, {0, 0, 0}};
    bool any = false;
    for (std::size_t c = 0; c < v.channels(); ++c)
        for (std::size_t z = 0; z < e.d; ++z)
            for (std::size_t y = 0; y < e.h; ++y)
                for (std::size_t x = 0; x < e.w; ++x) {
                    if (v.data.at(c, z, y, x) == 0.0f) continue;
                    any = true;
                    const std::array<std::size_t, 3> p{z, y, x};
                    for (std::size_t a = 0; a < 3; ++a) {
                        b.lo[a] = std::min(b.lo[a], p[a]);
                        b.hi[a] = std::max(b.hi[a], p[a] + 1);
                    }
                }
    return any ? b : BoundingBox::full(e);
}

inline Volume crop(const Volume& v, const BoundingBox& b) {
    const Extent3 e = v.extent();
    for (std::size_t a = 0; a < 3; ++a)
        if (b.lo[a] >= b.hi[a] || b.hi[a] > e[a]) throw Error("crop box outside the volume");
    const Extent3 o = b.extent();
    Volume out{Tensor<float>(volume_shape(v.channels(), o)), v.spacing, v.kind};
    for (std::size_t c = 0; c < v.channels(); ++c)
        for (std::size_t z = 0; z < o.d; ++z)
            for (std::size_t y = 0; y < o.h; ++y) {
                const float* src = &v.data.at(c, z + b.lo[0], y + b.lo[1], b.lo[2]);
                std::copy(src, src + o.w, &out.data.at(c, z, y, 0));
            }
    return out;
}

struct CropResult {
    Volume image, label;
    BoundingBox box;
};

/// Crops image and (optional, may be empty) label to the image's nonzero region.
inline CropResult crop_nonzero(const Volume& image, const Volume& label) {
    if (!label.empty() && label.extent() != image.extent()) throw Error("crop_nonzero: label and image extents differ");
    const BoundingBox box = nonzero_box(image);
    if (box == BoundingBox::full(image.extent())) return {image, label, box};
    return {crop(image, box), label.empty() ? label : crop(label, box), box};
}

/// Per-axis median; even counts take the lower median.
inline Spacing median_spacing(const std::vector<Spacing>& spacings) {
    if (spacings.empty()) throw Error("median_spacing: no cases");
    Spacing out{};
    for (std::size_t a = 0; a < 3; ++a) {
        std::vector<double> v;
        for (const auto& s : spacings) v.push_back(s[a]);
        std::sort(v.begin(), v.end());
        out[a] = v[(v.size() - 1) / 2];
    }
    return out;
}

namespace ppdetail {

// Center-aligned source coordinate of destination index `i`, clamped into the source.
inline double source_coord(std::size_t i, std::size_t from, std::size_t to) {
    const double s = (double(i) + 0.5) * double(from) / double(to) - 0.5;
    return std::clamp(s, 0.0, double(from - 1));
}

}  // namespace ppdetail

/// Resizes to `target` extents: trilinear for images, nearest for labels.
/// Equal extents return the input unchanged.
inline Volume resize(const Volume& v, Extent3 target) {
    const Extent3 e = v.extent();
    if (e == target) return v;
    Volume out{Tensor<float>(volume_shape(v.channels(), target)), v.spacing, v.kind};
    std::array<std::vector<std::size_t>, 3> i0, i1;
    std::array<std::vector<double>, 3> t;
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t i = 0; i < target[a]; ++i) {
            const double s = ppdetail::source_coord(i, e[a], target[a]);
            const std::size_t f = static_cast<std::size_t>(std::floor(s));
            i0[a].push_back(f);
            i1[a].push_back(std::min(f + 1, e[a] - 1));
            t[a].push_back(s - double(f));
        }
    const bool nearest = v.kind == VolumeKind::label;
    for (std::size_t c = 0; c < v.channels(); ++c)
        for (std::size_t z = 0; z < target.d; ++z)
            for (std::size_t y = 0; y < target.h; ++y)
                for (std::size_t x = 0; x < target.w; ++x) {
                    if (nearest) {
                        const std::size_t sz = t[0][z] < 0.5 ? i0[0][z] : i1[0][z];
                        const std::size_t sy = t[1][y] < 0.5 ? i0[1][y] : i1[1][y];
                        const std::size_t sx = t[2][x] < 0.5 ? i0[2][x] : i1[2][x];
                        out.data.at(c, z, y, x) = v.data.at(c, sz, sy, sx);
                        continue;
                    }
                    auto at = [&](std::size_t zz, std::size_t yy, std::size_t xx) -> double {
                        return v.data.at(c, zz, yy, xx);
                    };
                    auto row = [&](std::size_t zz, std::size_t yy) {
                        return std::lerp(at(zz, yy, i0[2][x]), at(zz, yy, i1[2][x]), t[2][x]);
                    };
                    auto plane = [&](std::size_t zz) { return std::lerp(row(zz, i0[1][y]), row(zz, i1[1][y]), t[1][y]); };
                    out.data.at(c, z, y, x) = static_cast<float>(std::lerp(plane(i0[0][z]), plane(i1[0][z]), t[0][z]));
                }
    return out;
}

inline Extent3 resampled_extent(Extent3 e, const Spacing& from, const Spacing& to) {
    Extent3 out;
    for (std::size_t a = 0; a < 3; ++a) {
        if (!(to[a] > 0)) throw Error("resample: target spacing must be positive");
        out[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(double(e[a]) * from[a] / to[a])));
    }
    return out;
}

inline Volume resample(const Volume& v, const Spacing& target) {
    Volume out = resize(v, resampled_extent(v.extent(), v.spacing, target));
    out.spacing = target;
    return out;
}

/// Percentile of sorted data, linear interpolation between order statistics.
inline double percentile(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw Error("percentile of empty data");
    const double pos = p / 100.0 * double(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - double(lo)) * (sorted[hi] - sorted[lo]);
}

/// Per channel: clip to the 2nd/98th percentiles, then z-score with the
/// clipped statistics. Constant channels become zeros.
inline Volume normalize_intensity(const Volume& v, double lo_pct = 2.0, double hi_pct = 98.0) {
    if (v.kind != VolumeKind::image) throw Error("normalize_intensity expects an image volume");
    Volume out = v;
    const std::size_t n = v.extent().voxels();
    for (std::size_t c = 0; c < v.channels(); ++c) {
        float* p = out.data.data() + c * n;
        std::vector<double> vals(p, p + n);
        std::sort(vals.begin(), vals.end());
        const double lo = percentile(vals, lo_pct), hi = percentile(vals, hi_pct);
        double sum = 0;
        for (std::size_t i = 0; i < n; ++i) sum += std::clamp(double(p[i]), lo, hi);
        const double mean = sum / double(n);
        double var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = std::clamp(double(p[i]), lo, hi) - mean;
            var += d * d;
        }
        const double sd = std::sqrt(var / double(n));
        for (std::size_t i = 0; i < n; ++i)
            p[i] = sd > 0 ? static_cast<float>((std::clamp(double(p[i]), lo, hi) - mean) / sd) : 0.0f;
    }
    return out;
}

struct Preprocessed {
    Volume image, label;
    BoundingBox box;
    Extent3 original_extent;
    Spacing original_spacing;
};

/// crop -> resample -> normalize.
inline Preprocessed preprocess_case(const Volume& image, const Volume& label, const Spacing& target) {
    image.validate();
    if (!label.empty()) label.validate();
    auto cropped = crop_nonzero(image, label);
    Preprocessed out;
    out.box = cropped.box;
    out.original_extent = image.extent();
    out.original_spacing = image.spacing;
    out.image = normalize_intensity(resample(cropped.image, target));
    if (!label.empty()) {
        cropped.label.spacing = image.spacing;
        out.label = resample(cropped.label, target);
    }
    return out;
}

struct PatchPlan {
    Extent3 patch;
    std::size_t levels = 0;  // downsamplings shared by all axes
};

/// Independent-model patch sizing: per-axis levels floor(log2(median/8))
/// clamped to [2, 6], extents rounded down to multiples of 2^levels, then the
/// largest axis shrinks until the patch fits `max_voxels`.
inline PatchPlan independent_patch_plan(Extent3 median_extent, std::size_t max_voxels = std::size_t{128} * 128 * 128) {
    std::array<std::size_t, 3> lv{};
    for (std::size_t a = 0; a < 3; ++a) {
        const double r = std::log2(std::max(1.0, double(median_extent[a]) / 8.0));
        lv[a] = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(r)), 2, 6);
    }
    PatchPlan plan;
    plan.levels = *std::min_element(lv.begin(), lv.end());
    for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t unit = std::size_t{1} << lv[a];
        plan.patch[a] = std::max(unit, median_extent[a] / unit * unit);
    }
    while (plan.patch.voxels() > max_voxels) {
        std::size_t a = 0;
        for (std::size_t b = 1; b < 3; ++b)
            if (plan.patch[b] > plan.patch[a]) a = b;
        const std::size_t unit = std::size_t{1} << lv[a];
        if (plan.patch[a] <= unit) break;
        plan.patch[a] -= unit;
    }
    return plan;
}

}  // namespace u2net
