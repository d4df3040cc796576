#pragma once

// Volume file layout (all integers little-endian):
//   "U2VOL1\0\0" | u32 kind (0 image, 1 label) | u32 C | u32 D | u32 H | u32 W
//   | 3 x f64 spacing (depth, height, width) | payload
// Image payloads are f32, label payloads u16, row-major C, D, H, W.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

#include "io.hpp"
#include "tensor.hpp"

namespace u2net {

enum class VolumeKind : std::uint32_t { image = 0, label = 1 };

using Spacing = std::array<double, 3>;

struct Volume {
    Tensor<float> data;  // C x D x H x W; labels hold integer values
    Spacing spacing{1.0, 1.0, 1.0};
    VolumeKind kind = VolumeKind::image;

    bool empty() const { return data.size() == 0; }
    std::size_t channels() const { return data.shape().at(0); }
    Extent3 extent() const { return data.spatial(); }

    void validate() const {
        data.require_rank(4, "volume");
        for (double s : spacing)
            if (!(s > 0)) throw Error("volume spacing must be positive");
        if (kind == VolumeKind::label)
            for (float v : data.values())
                if (!(v >= 0.0f) || v != std::floor(v) || v > 65535.0f)
                    throw Error("label volume holds a non-integer or out-of-range value " + std::to_string(v));
    }
};

inline constexpr char kVolumeMagic[8] = {'U', '2', 'V', 'O', 'L', '1', '\0', '\0'};

inline std::string encode_volume(const Volume& v) {
    v.validate();
    std::string out(kVolumeMagic, 8);
    auto put = [&](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
    const std::uint32_t kind = static_cast<std::uint32_t>(v.kind);
    put(&kind, 4);
    for (std::size_t a = 0; a < 4; ++a) {
        const std::uint32_t e = static_cast<std::uint32_t>(v.data.shape()[a]);
        put(&e, 4);
    }
    put(v.spacing.data(), 24);
    if (v.kind == VolumeKind::image) {
        put(v.data.data(), v.data.size() * 4);
    } else {
        for (float f : v.data.values()) {
            const std::uint16_t u = static_cast<std::uint16_t>(f);
            put(&u, 2);
        }
    }
    return out;
}

inline Volume decode_volume(const std::string& bytes) {
    constexpr std::size_t header = 8 + 4 + 16 + 24;
    if (bytes.size() < header || std::memcmp(bytes.data(), kVolumeMagic, 8) != 0) throw Error("not a U2VOL1 volume");
    auto get_u32 = [&](std::size_t off) {
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        return v;
    };
    const std::uint32_t kind = get_u32(8);
    if (kind > 1) throw Error("volume kind " + std::to_string(kind) + " is neither image nor label");
    Shape shape{get_u32(12), get_u32(16), get_u32(20), get_u32(24)};
    Volume v;
    v.kind = static_cast<VolumeKind>(kind);
    std::memcpy(v.spacing.data(), bytes.data() + 28, 24);
    const std::size_t n = numel(shape);
    const std::size_t width = v.kind == VolumeKind::image ? 4 : 2;
    if (bytes.size() != header + n * width)
        throw Error("volume payload has " + std::to_string(bytes.size() - header) + " bytes, expected " +
                    std::to_string(n * width));
    std::vector<float> vals(n);
    const char* src = bytes.data() + header;
    if (v.kind == VolumeKind::image) {
        std::memcpy(vals.data(), src, n * 4);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint16_t u;
            std::memcpy(&u, src + 2 * i, 2);
            vals[i] = u;
        }
    }
    v.data = Tensor<float>(shape, std::move(vals));
    v.validate();
    return v;
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) { write_file_atomic(path, encode_volume(v)); }

inline Volume read_volume(const std::filesystem::path& path) {
    try {
        return decode_volume(read_file(path));
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

}  // namespace u2net
