// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/rasterizer.hpp"
#include "featsplat/scene.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace featsplat {

enum class FeatureSampling { Nearest, Bilinear };

struct LiftConfig {
    RasterConfig raster;
    FeatureSampling sampling = FeatureSampling::Nearest;
};

/// Training-free fused features for every Gaussian of a donor scene.
struct LiftedField {
    int dim = 0;
    std::vector<float> features;      // N x D; unit length where kept, zero otherwise
    std::vector<float> mean;          // N x D weighted mean before normalization
    std::vector<float> variance;      // N x D per-dimension variance, clamped at 0
    std::vector<float> variance_norm; // N
    std::vector<float> contribution;  // N, sum of blend weights over every view
    std::vector<float> weight_total;  // N, sum over pixels with a valid feature
    std::vector<std::uint8_t> kept;   // N

    std::size_t size() const { return kept.size(); }
    std::size_t kept_count() const;
};

/// Weighted fusion of per-view feature maps onto the Gaussians that render them.
LiftedField lift(const GaussianScene &scene, std::span<const Camera> cameras,
                 std::span<const FeatureMap> maps, const LiftConfig &cfg = {});

/// Drops the ceil(top_fraction * kept) highest-variance Gaussians from the kept mask.
/// Ties keep the lower index.
LiftedField variance_filter(LiftedField field, double top_fraction = 1e-4);

/// Sum of captured blend weights per Gaussian over all views.
std::vector<float> contributions(const GaussianScene &scene, std::span<const Camera> cameras,
                                 const RasterConfig &cfg = {});

/// The kept Gaussians of `donor` carrying their lifted features as payload.
GaussianScene lifted_scene(const GaussianScene &donor, const LiftedField &field);

/// Per-Gaussian variance norms and contributions of the kept Gaussians, stored as a
/// CFFM file with H = 2 rows (variance norm, contribution), W = kept count, D = 1.
void save_lift_sidecar(const LiftedField &field, const std::filesystem::path &path);

struct LiftSidecar {
    std::vector<float> variance_norm;
    std::vector<float> contribution;
};
LiftSidecar load_lift_sidecar(const std::filesystem::path &path);

/// Rebuilds a field (all Gaussians kept) from a saved lifted scene and its sidecar.
LiftedField field_from_lifted_scene(const GaussianScene &lifted, const LiftSidecar &sidecar);

} // namespace featsplat
