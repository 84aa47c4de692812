// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/rasterizer.hpp"
#include "featsplat/scene.hpp"

#include <vector>

namespace featsplat::test {

/// Per-pixel sequential blend over every projected splat, no tiles, no bounding boxes,
/// double accumulation. Weight lists are uncapped.
struct OracleRender {
    int height = 0, width = 0, channels = 0;
    std::vector<double> image;  // H x W x C
    std::vector<double> depth;  // H x W
    std::vector<double> transmittance;
    std::vector<std::vector<std::pair<std::uint32_t, double>>> weights; // per pixel, front to back
};

OracleRender oracle_render(const GaussianScene &scene, const Camera &cam, const RasterConfig &cfg = {});

/// Sum over views of every oracle blend weight per Gaussian.
std::vector<double> oracle_contributions(const GaussianScene &scene, const std::vector<Camera> &cams,
                                         const RasterConfig &cfg = {});

/// Random scene in front of `cam`-style cameras looking down -z at the origin region.
GaussianScene random_scene(std::size_t n, int payloadDim, std::uint64_t seed);

/// Cameras on a circle of radius 4 around the origin, looking at it.
std::vector<Camera> ring_cameras(int count, int width, int height, float fx = 60.0f);

} // namespace featsplat::test
