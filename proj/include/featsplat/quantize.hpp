// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace featsplat {

struct Codebook {
    int dim = 0;
    std::vector<float> entries;          // K x dim
    std::vector<std::uint32_t> assignment; // one entry index per input vector
    std::vector<double> error_history;   // total squared error after each assignment step

    std::size_t size() const { return dim > 0 ? entries.size() / dim : 0; }
    std::span<const float> entry(std::size_t k) const {
        return {entries.data() + k * dim, static_cast<std::size_t>(dim)};
    }
};

/// k-means++ seeding followed by Lloyd iterations over the rows of `vectors`
/// (N x dim). Empty clusters are reseeded to the worst-fit points.
Codebook build_codebook(std::span<const float> vectors, int dim, std::size_t k, int iterations,
                        std::uint64_t seed);

/// Nearest entry per row; ties go to the lower entry index.
std::vector<std::uint32_t> assign_to_codebook(std::span<const float> vectors, int dim,
                                              std::span<const float> entries);

/// Sum of squared distances from each row to its assigned entry.
double quantization_error(std::span<const float> vectors, int dim, std::span<const float> entries,
                          std::span<const std::uint32_t> assignment);

struct QuantizeConfig {
    std::size_t k_geometry = 4096; // scale + rotation codebook
    std::size_t k_latent = 256;
    int iterations = 20;
    bool half_positions = false;
    std::uint64_t seed = 0;
};

/// Quantized latent scene. Positions are stored exactly as they will be written.
struct VqBundle {
    bool half_positions = false;
    Codebook geometry; // 7-dim: log_scale, rotation (w, x, y, z)
    Codebook latent;   // 3-dim
    std::vector<Eigen::Vector3f> positions;
    std::vector<float> opacity_logits;
    SceneMeta meta;

    std::size_t size() const { return positions.size(); }
};

constexpr int kGeometryDim = 7;

/// Per-Gaussian 7-vector coded by the geometry codebook (quaternion sign fixed to w >= 0).
std::vector<float> geometry_vectors(const GaussianScene &scene);

VqBundle quantize_scene(const GaussianScene &scene, const QuantizeConfig &cfg);

/// Re-codes `scene` against the codebooks of an existing bundle.
VqBundle quantize_with(const GaussianScene &scene, const VqBundle &codebooks);

GaussianScene dequantize(const VqBundle &bundle);

/// Bytes taken by one index into a codebook of k entries.
std::size_t index_bytes(std::size_t k);

/// Exact size of the serialized bundle:
/// 32 + 4 (7 Kg + 3 Kl) + N (index_bytes(Kg) + index_bytes(Kl)) + 3 N (2 or 4) + 4 N.
std::size_t bundle_bytes(std::size_t n, std::size_t kGeometry, std::size_t kLatent,
                         bool halfPositions);

void save_bundle(const VqBundle &bundle, const std::filesystem::path &path);
VqBundle load_bundle(const std::filesystem::path &path);

} // namespace featsplat
