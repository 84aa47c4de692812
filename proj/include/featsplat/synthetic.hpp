// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/eval.hpp"
#include "featsplat/scene.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

namespace featsplat {

/// Axis-aligned box; a box with zero height is a floor plane and only its top is sampled.
/// Bottom faces are never sampled.
struct SynthBox {
    Eigen::Vector3f min = Eigen::Vector3f::Zero();
    Eigen::Vector3f max = Eigen::Vector3f::Zero();
    std::string label;
};

struct SynthSpec {
    std::vector<SynthBox> boxes;
    int feature_dim = 16;
    float spacing = 0.08f;        // grid step of surface samples, world units
    float footprint = 1.6f;       // in-plane std dev as a fraction of the local grid step
    float flatness = 0.1f;        // normal std dev relative to the in-plane one
    float edge_sigmas = 3.0f;     // in-plane std devs that fit between a sample and its face edge
    float opacity = 0.95f;

    int camera_count = 12;
    int width = 64;
    int height = 64;
    float fov_degrees = 60.0f;
    float orbit_radius = 4.5f;
    float elevation_degrees = 35.0f;
    Eigen::Vector3f target{0.0f, 0.0f, 0.3f};

    float jitter = 0.0f;          // per-pixel Gaussian noise added to label features
    float clone_fraction = 0.0f;  // share of Gaussians duplicated with identical attributes

    /// Floor and three boxes, four labels.
    static SynthSpec room();
};

struct SynthScene {
    GaussianScene donor;                   // RGB payload
    std::vector<int> gaussian_labels;      // label per donor Gaussian
    std::vector<Camera> cameras;
    std::vector<FeatureMap> maps;
    std::vector<std::vector<int>> labels;  // per view, row-major, kBackground off the room
    QuerySet queries;                      // one unit feature per label
};

SynthScene generate_synthetic(const SynthSpec &spec, std::uint64_t seed);

/// Camera at `eye` looking at `target` with +z up (x right, y down, z forward).
Camera look_at(const Eigen::Vector3f &eye, const Eigen::Vector3f &target, int width, int height,
               float fovDegrees, std::string id);

/// Writes scene.ply, cameras.json, queries.json, features/NNN.cffm and labels/NNN.cffm.
void save_synthetic(const SynthScene &synth, const std::filesystem::path &dir);

std::filesystem::path feature_map_path(const std::filesystem::path &dir, std::size_t view);
std::filesystem::path label_map_path(const std::filesystem::path &dir, std::size_t view);

} // namespace featsplat
