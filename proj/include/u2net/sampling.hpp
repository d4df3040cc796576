#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "augment.hpp"
#include "losses.hpp"
#include "netarch.hpp"
#include "preprocess.hpp"
#include "rng.hpp"

namespace u2net {

/// Zero-pads each axis symmetrically (extra voxel after) up to `min_extent`.
inline Volume pad_to(const Volume& v, Extent3 min_extent, BoundingBox* placed = nullptr) {
    const Extent3 e = v.extent();
    Extent3 o;
    std::array<std::size_t, 3> before{};
    for (std::size_t a = 0; a < 3; ++a) {
        o[a] = std::max(e[a], min_extent[a]);
        before[a] = (o[a] - e[a]) / 2;
    }
    if (placed) *placed = {before, {before[0] + e.d, before[1] + e.h, before[2] + e.w}};
    if (o == e) return v;
    Volume out{Tensor<float>(volume_shape(v.channels(), o)), v.spacing, v.kind};
    for (std::size_t c = 0; c < v.channels(); ++c)
        for (std::size_t z = 0; z < e.d; ++z)
            for (std::size_t y = 0; y < e.h; ++y) {
                const float* src = &v.data.at(c, z, y, 0);
                std::copy(src, src + e.w, &out.data.at(c, z + before[0], y + before[1], before[2]));
            }
    return out;
}

struct PatchPair {
    Volume image, label;
};

/// Random patch: uniform corner, except that with probability `fg_bias` the
/// patch is placed around a uniformly chosen foreground voxel (if any).
inline PatchPair sample_patch(const Volume& image, const Volume& label, Extent3 patch, Rng& rng, double fg_bias = 0.5) {
    if (label.extent() != image.extent()) throw Error("sample_patch: label and image extents differ");
    const Volume img = pad_to(image, patch);
    const Volume lab = pad_to(label, patch);
    const Extent3 e = img.extent();
    std::array<std::size_t, 3> corner{};
    const bool biased = uniform01(rng) < fg_bias;
    std::vector<std::size_t> fg;
    if (biased)
        for (std::size_t i = 0; i < lab.data.size(); ++i)
            if (lab.data[i] > 0) fg.push_back(i);
    if (!fg.empty()) {
        std::size_t idx = fg[uniform_index(rng, fg.size())];
        const std::array<std::size_t, 3> p{idx / (e.h * e.w), idx / e.w % e.h, idx % e.w};
        for (std::size_t a = 0; a < 3; ++a) {
            const std::size_t lo = p[a] + 1 >= patch[a] ? p[a] + 1 - patch[a] : 0;
            const std::size_t hi = std::min(p[a], e[a] - patch[a]);
            corner[a] = lo + uniform_index(rng, hi - lo + 1);
        }
    } else {
        for (std::size_t a = 0; a < 3; ++a) corner[a] = uniform_index(rng, e[a] - patch[a] + 1);
    }
    const BoundingBox box{corner, {corner[0] + patch.d, corner[1] + patch.h, corner[2] + patch.w}};
    return {crop(img, box), crop(lab, box)};
}

inline std::size_t round_robin_index(std::size_t domains, std::size_t iteration) {
    if (domains == 0) throw Error("round_robin: no domains");
    return iteration % domains;
}

inline const std::string& round_robin(const std::vector<std::string>& domains, std::size_t iteration) {
    return domains[round_robin_index(domains.size(), iteration)];
}

inline Labels to_labels(const Volume& label) {
    Labels out(label.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::int32_t>(label.data[i]);
    return out;
}

/// Data-pipeline worker count from U2_NUM_WORKERS (default 1).
inline std::size_t num_workers() {
    const char* s = std::getenv("U2_NUM_WORKERS");
    if (!s || !*s) return 1;
    const long n = std::strtol(s, nullptr, 10);
    return n > 0 ? static_cast<std::size_t>(n) : 1;
}

struct TrainCase {
    std::string id;
    Volume image, label;
};

/// Preprocessed training cases of one domain and how patches are cut from them.
struct DomainData {
    DomainSpec spec;
    std::vector<TrainCase> cases;
    Extent3 extract_patch;  // resized to spec.patch_shape when different
};

struct Sample {
    Tensor<float> image;  // C x patch
    Labels labels;        // patch voxels
};

struct SamplingConfig {
    AugmentConfig augment;
    double fg_bias = 0.5;
};

/// One training sample; depends only on (seed, epoch, iteration, domain, slot).
inline Sample make_sample(const DomainData& data, const SamplingConfig& cfg, std::uint64_t seed, std::uint64_t epoch,
                          std::uint64_t iteration, std::uint64_t slot) {
    if (data.cases.empty()) throw Error("domain " + data.spec.id + " has no training cases");
    Rng rng(derive_seed(seed, {epoch, iteration, fnv1a(data.spec.id), slot}));
    const auto& c = data.cases[uniform_index(rng, data.cases.size())];
    const Extent3 ex = data.extract_patch.voxels() ? data.extract_patch : data.spec.patch_shape;
    auto patch = sample_patch(c.image, c.label, ex, rng, cfg.fg_bias);
    auto [img, lab] = augment(patch.image, patch.label, cfg.augment, rng());
    if (ex != data.spec.patch_shape) {
        img = resize(img, data.spec.patch_shape);
        lab = resize(lab, data.spec.patch_shape);
    }
    for (float v : lab.data.values())
        if (v >= float(data.spec.classes))
            throw Error("case " + c.id + " holds label " + std::to_string(v) + " >= class count " +
                        std::to_string(data.spec.classes));
    return {std::move(img.data), to_labels(lab)};
}

/// `batch` samples for one iteration, produced by up to `workers` threads.
/// The result is independent of the worker count.
inline std::vector<Sample> make_batch(const DomainData& data, const SamplingConfig& cfg, std::uint64_t seed,
                                      std::uint64_t epoch, std::uint64_t iteration, std::size_t batch,
                                      std::size_t workers = num_workers()) {
    std::vector<Sample> out(batch);
    workers = std::clamp<std::size_t>(workers, 1, batch);
    if (workers == 1) {
        for (std::size_t b = 0; b < batch; ++b) out[b] = make_sample(data, cfg, seed, epoch, iteration, b);
        return out;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t b = w; b < batch; b += workers)
                    out[b] = make_sample(data, cfg, seed, epoch, iteration, b);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace u2net
