// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/common.hpp"
#include "featsplat/scene.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <vector>

namespace featsplat {

class Autoencoder;

/// Rasterizer constants. Defaults are the standard 3DGS values.
struct RasterConfig {
    int tile_size = 16;
    float low_pass = 0.3f;               // added to the 2D covariance diagonal, pixel^2
    float alpha_min = 1.0f / 255.0f;     // contributions below this are skipped
    float alpha_max = 0.99f;             // per-splat opacity clamp
    float transmittance_min = 1e-4f;     // blending stops before T drops below this
    float near_plane = 0.01f;
    float sigma_extent = 3.0f;           // footprint = ellipse at this many std devs
    bool capture_weights = false;
    float weight_capture_min = 1e-4f;    // only w >= this is stored in the WeightBuffer
    int max_channels = 512;
};

/// A Gaussian projected into one view.
struct Splat2D {
    std::uint32_t gaussian_index = 0;
    Eigen::Vector2f center = Eigen::Vector2f::Zero(); // pixels; pixel (x, y) has its center at (x+.5, y+.5)
    Eigen::Matrix2f cov2d = Eigen::Matrix2f::Identity();
    Eigen::Vector3f conic = Eigen::Vector3f::Zero(); // inverse cov2d as (a, b, c)
    float alpha = 0.0f;       // activated opacity
    float depth_key = 0.0f;   // view-space z
    float depth_value = 0.0f; // distance from the camera center to the mean
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // half-open, clipped to the image
};

/// EWA projection. Returns nullopt when the mean is behind the near plane or the
/// 3-sigma box misses the image.
std::optional<Splat2D> project(const Gaussian &g, std::uint32_t index, const Camera &cam,
                               const RasterConfig &cfg = {});

/// Per-splat opacity at a pixel center before clamping: alpha * exp(-q/2). Returns
/// 0 outside the footprint ellipse.
float splat_alpha_at(const Splat2D &s, int px, int py, const RasterConfig &cfg);

struct WeightEntry {
    std::uint32_t gaussian = 0;
    float weight = 0.0f;
};

/// Per-pixel blend weights in front-to-back order (CSR layout, row-major pixels).
struct WeightBuffer {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> offsets; // pixel_count + 1
    std::vector<WeightEntry> entries;
    std::vector<float> final_transmittance;

    std::span<const WeightEntry> at(std::size_t pixel) const {
        return {entries.data() + offsets[pixel], entries.data() + offsets[pixel + 1]};
    }
};

/// Projected splats of one view, depth sorted, with per-tile splat lists.
struct ViewSetup {
    int width = 0;
    int height = 0;
    int tile_size = 16;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<Splat2D> splats;              // sorted by (depth_key, gaussian_index)
    std::vector<std::uint32_t> tile_offsets;  // tiles + 1
    std::vector<std::uint32_t> tile_splats;   // indices into splats, front to back

    std::size_t tile_count() const { return static_cast<std::size_t>(tiles_x) * tiles_y; }
};

ViewSetup prepare_view(const GaussianScene &scene, const Camera &cam, const RasterConfig &cfg);

struct RenderOutput {
    Image image; // H x W x payload_dim
    Image depth; // H x W x 1
    Image transmittance; // H x W x 1, final T per pixel
    std::optional<WeightBuffer> weights;
};

/// Front-to-back alpha blending of the scene payload and distance-to-camera depth.
RenderOutput render(const GaussianScene &scene, const Camera &cam, const RasterConfig &cfg = {});

/// Renders the 3-channel latent payload and decodes every pixel to D-dim features.
Image render_feature(const GaussianScene &scene, const Camera &cam, const Autoencoder &decoder,
                     const RasterConfig &cfg = {});

/// Gradients of a scalar loss with respect to scene attributes, plus the norm of the
/// gradient with respect to each Gaussian's projected 2D center.
struct SceneGradients {
    std::vector<Eigen::Vector3f> position;
    std::vector<Eigen::Vector3f> log_scale;
    std::vector<Eigen::Vector4f> rotation;
    std::vector<float> opacity_logit;
    std::vector<float> payload;
    std::vector<float> screen_grad_norm;
    std::vector<std::uint8_t> visible;

    void resize(std::size_t n, int payloadDim);
};

/// Reverse-mode pass through the blend for dL/dImage and dL/dDepth images. Either
/// upstream image may be null.
SceneGradients render_backward(const GaussianScene &scene, const Camera &cam,
                               const RasterConfig &cfg, const Image *dImage, const Image *dDepth);

} // namespace featsplat
