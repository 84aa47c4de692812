// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/autoencoder.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/scene.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <vector>

namespace featsplat {

struct SparsifyConfig {
    int max_iterations = 3000;
    int merge_interval = 50;
    std::vector<int> prune_iterations{500, 1500};
    double tau_con = 0.25;   // minimum global contribution kept by pruning
    double tau_sim = 0.999;  // latent cosine needed to merge
    double tau_grad = 1e-5;  // merge only where the averaged screen-space gradient is below this
    double chi2 = 2.38;      // Mahalanobis gate
    int k_neighbors = 8;
    double lambda_depth = 0.1;
    double grad_momentum = 0.9;

    // Adam step sizes; the position rate is multiplied by the scene extent.
    double lr_position = 1.6e-4;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_opacity = 5e-2;
    double lr_latent = 2.5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-15;

    bool enable_prune = true;
    bool enable_merge = true;
    bool decoded_loss = true;          // compare decoded features rather than raw latents
    bool decoded_similarity = false;   // merge gate on decoded features instead of latents

    std::uint64_t seed = 0;
    RasterConfig raster;
};

/// Renders of the frozen latent scene for one training view.
struct ReferenceView {
    Image latent;  // H x W x 3
    Image decoded; // H x W x D, empty when no decoder was supplied
    Image depth;   // H x W x 1
};

struct ReferenceSet {
    std::vector<ReferenceView> views;
};

/// Lifted scene with every feature replaced by its latent code.
GaussianScene encode_scene(const GaussianScene &lifted, const Autoencoder &ae);

/// Encodes the lifted scene and renders latent/depth references for every camera.
ReferenceSet build_references(const GaussianScene &lifted, const Autoencoder &ae,
                              std::span<const Camera> cameras, const RasterConfig &raster = {},
                              bool decode = true);

struct StepLoss {
    double feature = 0.0;
    double depth = 0.0;
    double total = 0.0;
};

struct StepResult {
    StepLoss loss;
    SceneGradients grads;
};

/// Mean absolute feature and depth errors of one view against its reference and their gradients
/// with respect to every scene attribute. `decoder` may be null for latent-space loss.
StepResult loss_and_gradients(const GaussianScene &state, const Camera &cam,
                              const ReferenceView &ref, const Autoencoder *decoder,
                              const SparsifyConfig &cfg);

/// Per-Gaussian Adam moments for every optimized attribute.
class SceneAdam {
public:
    SceneAdam() = default;
    SceneAdam(std::size_t n, int payloadDim);

    /// One bias-corrected step. `positionLr` is already scaled by the scene extent.
    void step(GaussianScene &scene, const SceneGradients &g, const SparsifyConfig &cfg,
              double positionLr);

    /// Keeps moments of surviving Gaussians; source[k] < 0 starts fresh moments.
    void remap(std::span<const std::int64_t> source);

    std::size_t size() const { return n_; }

private:
    std::size_t n_ = 0;
    int payloadDim_ = 3;
    long steps_ = 0;
    std::vector<float> m_, v_; // n x stride
    int stride() const { return 3 + 3 + 4 + 1 + payloadDim_; }
};

/// Moment-matched replacement of two weighted Gaussians (double precision, covariance
/// before eigenvalue clamping).
struct MomentMerge {
    Eigen::Vector3d mean;
    Eigen::Matrix3d cov;
    double alpha = 0.0;
    std::vector<double> payload;
};

MomentMerge merge_moments(const Eigen::Vector3d &mu_i, const Eigen::Matrix3d &cov_i, double alpha_i,
                          std::span<const float> payload_i, const Eigen::Vector3d &mu_j,
                          const Eigen::Matrix3d &cov_j, double alpha_j,
                          std::span<const float> payload_j);

/// max(d^T Sigma_i^-1 d, d^T Sigma_j^-1 d) with d = mu_j - mu_i.
double mahalanobis_gate(const Gaussian &a, const Gaussian &b);

/// Rebuilds (log_scale, rotation) from a covariance; eigenvalues below 1e-9 are
/// clamped. Returns true when clamping happened.
bool factorize_covariance(const Eigen::Matrix3d &cov, Gaussian &out);

struct MergeOutcome {
    GaussianScene scene;
    std::vector<std::int64_t> source; // per output Gaussian: input index, or -1 if merged
    std::size_t merged = 0;           // number of pairs merged
    std::size_t clamped = 0;
};

/// One greedy pass in ascending index order; each Gaussian merges at most once.
MergeOutcome merge_pass(const GaussianScene &scene, std::span<const float> gradNorms,
                        const SparsifyConfig &cfg, const Autoencoder *decoder = nullptr);

struct PruneOutcome {
    GaussianScene scene;
    std::vector<std::int64_t> source;
    std::size_t pruned = 0;
};

/// Removes Gaussians whose contribution over all views is below tau_con.
PruneOutcome prune(const GaussianScene &scene, std::span<const Camera> cameras, double tauCon,
                   const RasterConfig &raster = {});

struct ProgressRow {
    int iteration = 0;
    double feature_loss = 0.0;
    double depth_loss = 0.0;
    std::size_t gaussians = 0;
    std::size_t merged = 0;
    std::size_t pruned = 0;
};

struct SparsifyResult {
    GaussianScene scene;
    std::vector<ProgressRow> progress;
    double wall_seconds = 0.0;
    bool aborted = false;
    std::string error;
};

/// Optimizes a latent scene against its references while pruning and merging.
SparsifyResult optimize_scene(GaussianScene initial, const ReferenceSet &refs,
                              std::span<const Camera> cameras, const Autoencoder *decoder,
                              const SparsifyConfig &cfg);

/// Full adaptive sparsification starting from a lifted scene and a trained autoencoder.
SparsifyResult sparsify(const GaussianScene &lifted, const Autoencoder &ae,
                        std::span<const Camera> cameras, const SparsifyConfig &cfg);

void write_progress_csv(std::span<const ProgressRow> rows, const std::filesystem::path &path);

} // namespace featsplat
