#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spectract/errors.hpp"

namespace spectract {

// Dense row-major 2D array of doubles. Used for images (rows x cols) and for
// single-bin sinograms (views x detectors).
struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::size_t size() const { return data.size(); }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const Image& o) const { return rows == o.rows && cols == o.cols; }
    bool operator==(const Image&) const = default;
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": shape mismatch");
}

}  // namespace spectract
