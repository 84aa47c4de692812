// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/common.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace featsplat {

/// Geometry and opacity of one 3D Gaussian, stored in the 3DGS PLY convention:
/// log-scales, unit quaternion (w, x, y, z) and logit opacity. The per-Gaussian
/// payload (color, latent or lifted feature) lives in GaussianScene::payload.
struct Gaussian {
    Eigen::Vector3f position = Eigen::Vector3f::Zero();
    Eigen::Vector3f log_scale = Eigen::Vector3f::Zero();
    Eigen::Vector4f rotation{1.0f, 0.0f, 0.0f, 0.0f};
    float opacity_logit = 0.0f;

    float opacity() const { return sigmoid(opacity_logit); }
    Eigen::Vector3f scale() const { return log_scale.array().exp(); }
};

/// Pipeline stage a scene file belongs to; written into the PLY header comments.
enum class SceneStage { Donor, Lifted, Latent, Quantized };

const char *stage_name(SceneStage stage);
SceneStage parse_stage(const std::string &name);

struct SceneMeta {
    std::string source = "unknown";
    SceneStage stage = SceneStage::Donor;
};

struct GaussianScene {
    std::vector<Gaussian> gaussians;
    int payload_dim = 3;
    std::vector<float> payload; // size() * payload_dim, Gaussian-major
    SceneMeta meta;

    std::size_t size() const { return gaussians.size(); }
    bool empty() const { return gaussians.empty(); }

    std::span<float> payload_of(std::size_t i) {
        return {payload.data() + i * payload_dim, static_cast<std::size_t>(payload_dim)};
    }
    std::span<const float> payload_of(std::size_t i) const {
        return {payload.data() + i * payload_dim, static_cast<std::size_t>(payload_dim)};
    }

    /// Keeps the Gaussians whose mask entry is nonzero, preserving order.
    GaussianScene subset(std::span<const std::uint8_t> keep) const;
};

/// Rotation matrix of a (not necessarily normalized) quaternion (w, x, y, z).
Eigen::Matrix3f rotation_matrix(const Eigen::Vector4f &q);

/// Sigma = R diag(exp(log_scale)^2) R^T. Symmetric by construction.
Eigen::Matrix3f covariance(const Gaussian &g);
Eigen::Matrix3d covariance_d(const Gaussian &g);

/// Pinhole camera with a world-to-camera pose: x_cam = R * x_world + t.
struct Camera {
    std::string id;
    int width = 0;
    int height = 0;
    float fx = 0, fy = 0, cx = 0, cy = 0;
    Eigen::Matrix3f R = Eigen::Matrix3f::Identity();
    Eigen::Vector3f t = Eigen::Vector3f::Zero();

    Eigen::Vector3f center() const { return -R.transpose() * t; }

    /// Throws DataError when intrinsics or the rotation are out of contract.
    void validate() const;
};

/// H x W x D per-pixel features. Pixels are unit length after load unless the
/// stored vector was zero, in which case valid[p] == 0.
struct FeatureMap {
    Image image;
    std::vector<std::uint8_t> valid;

    int height() const { return image.height; }
    int width() const { return image.width; }
    int dim() const { return image.channels; }
};

GaussianScene load_scene(const std::filesystem::path &path);
void save_scene(const GaussianScene &scene, const std::filesystem::path &path);

std::vector<Camera> load_cameras(const std::filesystem::path &path);
void save_cameras(std::span<const Camera> cameras, const std::filesystem::path &path);

/// Reads a CFFM file and L2-normalizes every nonzero pixel.
FeatureMap load_feature_map(const std::filesystem::path &path);

/// Reads a CFFM file verbatim (label maps, sidecar arrays).
Image load_cffm_raw(const std::filesystem::path &path);
void save_cffm(const Image &image, const std::filesystem::path &path);

/// Normalizes pixels in place; returns the validity mask.
std::vector<std::uint8_t> normalize_pixels(Image &image);

/// Axis-aligned bounds and extent (radius of the bounding sphere around the centroid).
struct SceneBounds {
    Eigen::Vector3f min;
    Eigen::Vector3f max;
    Eigen::Vector3f centroid;
    float extent = 0.0f;
};
SceneBounds scene_bounds(const GaussianScene &scene);

} // namespace featsplat
