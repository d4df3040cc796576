#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace u2net {

/// Thrown for every contract violation (bad shapes, unknown domains, corrupt files).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Spatial extents (depth, height, width) of a volumetric tensor.
struct Extent3 {
    std::size_t d = 0, h = 0, w = 0;

    std::size_t voxels() const { return d * h * w; }
    std::size_t operator[](std::size_t axis) const { return axis == 0 ? d : axis == 1 ? h : w; }
    std::size_t& operator[](std::size_t axis) { return axis == 0 ? d : axis == 1 ? h : w; }
    bool operator==(const Extent3&) const = default;
};

/// Dense row-major array. Volumetric data uses the channels x depth x height x width layout.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {
        for (auto e : shape_)
            if (e == 0) throw Error("tensor extents must be positive, got " + to_string(shape_));
    }
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel(shape_))
            throw Error("element count " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Element access for rank-4 C x D x H x W tensors.
    T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
        return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
        return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
    }

    /// Channel count and spatial extents of a rank-4 tensor.
    std::size_t channels() const { return shape_.at(0); }
    Extent3 spatial() const {
        require_rank(4, "spatial()");
        return {shape_[1], shape_[2], shape_[3]};
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        if (numel(shape) != data_.size())
            throw Error("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        return Tensor(std::move(shape), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void require_rank(std::size_t r, const char* what) const {
        if (shape_.size() != r)
            throw Error(std::string(what) + ": expected rank " + std::to_string(r) + " tensor, got " +
                        to_string(shape_));
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

inline Shape volume_shape(std::size_t c, Extent3 e) { return {c, e.d, e.h, e.w}; }

}  // namespace u2net
