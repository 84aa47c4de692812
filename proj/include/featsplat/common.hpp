// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace featsplat {

/// Malformed or inconsistent input files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inputs that are well-formed but unusable (empty scenes, dimension mismatch, ...).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values or numerical breakdown during computation.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense H x W x C float image, channel-innermost.
struct Image {
    int height   = 0;
    int width    = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    std::span<float> pixel(std::size_t p) {
        return {data.data() + p * channels, static_cast<std::size_t>(channels)};
    }
    std::span<const float> pixel(std::size_t p) const {
        return {data.data() + p * channels, static_cast<std::size_t>(channels)};
    }
    float &at(int y, int x, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }
inline float logit(float p) { return std::log(p / (1.0f - p)); }

} // namespace featsplat
