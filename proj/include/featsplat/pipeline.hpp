// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/autoencoder.hpp"
#include "featsplat/eval.hpp"
#include "featsplat/lifting.hpp"
#include "featsplat/quantize.hpp"
#include "featsplat/sparsify.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace featsplat {

struct PipelineConfig {
    LiftConfig lift;
    double variance_fraction = 1e-4;
    TrainConfig train;
    SparsifyConfig sparsify;
    bool quantize = false;
    QuantizeConfig vq;
    SegmentConfig segment;
    std::uint64_t seed = 0;

    /// Derives the per-stage seeds from `seed`.
    void apply_seed();
};

struct PipelineInputs {
    GaussianScene donor;
    std::vector<Camera> cameras;
    std::vector<FeatureMap> maps;
    std::optional<QuerySet> queries;
    std::vector<std::vector<int>> labels; // empty when no ground truth is available
};

/// Loads `dir/NNN.cffm` for views 0..count-1.
std::vector<FeatureMap> load_feature_maps(const std::filesystem::path &dir, std::size_t count);
std::vector<std::vector<int>> load_label_maps(const std::filesystem::path &dir,
                                              std::span<const Camera> cameras);

/// Segmentation quality of a scene over the labeled views. Latent scenes are decoded
/// through `decoder`; scenes whose payload already has the query dimension are used as is.
SegmentationMetrics evaluate_scene(const GaussianScene &scene, const Autoencoder *decoder,
                                   std::span<const Camera> cameras, const QuerySet &queries,
                                   std::span<const std::vector<int>> labels,
                                   const SegmentConfig &cfg = {});

/// Mean per-pixel L1 between decoded renders of `scene` and the `target` feature images.
double decoded_feature_l1(const GaussianScene &scene, const Autoencoder &decoder,
                          std::span<const Camera> cameras, std::span<const Image> target,
                          const RasterConfig &raster = {});

struct PipelineResult {
    LiftedField field;
    GaussianScene lifted;
    Autoencoder autoencoder;
    SparsifyResult sparse;
    std::optional<VqBundle> bundle;
    std::vector<RunReport> reports;
};

/// lift -> variance filter -> train -> sparsify -> (quantize) -> eval. When `outDir`
/// is given every stage writes its artifact there.
PipelineResult run_pipeline(const PipelineInputs &in, const PipelineConfig &cfg,
                            const std::filesystem::path *outDir = nullptr);

namespace artifacts {
inline constexpr const char *kLifted = "lifted.ply";
inline constexpr const char *kLiftStats = "lifted_stats.cffm";
inline constexpr const char *kAutoencoder = "autoencoder.cfae";
inline constexpr const char *kCompact = "cf3.ply";
inline constexpr const char *kProgress = "sparsify_progress.csv";
inline constexpr const char *kBundle = "cf3.cfvq";
inline constexpr const char *kReport = "report.csv";
} // namespace artifacts

} // namespace featsplat
