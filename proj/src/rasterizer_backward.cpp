// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode pass through front-to-back alpha blending and EWA projection.
//
// Per pixel the forward pass is replayed to recover each contributor's alpha and
// transmittance, then contributors are visited back to front carrying
// S = sum_{j>k} (c_j . gC + d_j gD) w_j so that
//   dL/dalpha_k = T_k (c_k . gC + d_k gD) - S / (1 - alpha_k).
// 2D gradients are accumulated per tile and reduced in tile order, which keeps the
// result independent of the worker count.

#include "featsplat/parallel.hpp"
#include "featsplat/rasterizer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>

namespace featsplat {

void SceneGradients::resize(std::size_t n, int payloadDim) {
    position.assign(n, Eigen::Vector3f::Zero());
    log_scale.assign(n, Eigen::Vector3f::Zero());
    rotation.assign(n, Eigen::Vector4f::Zero());
    opacity_logit.assign(n, 0.0f);
    payload.assign(n * payloadDim, 0.0f);
    screen_grad_norm.assign(n, 0.0f);
    visible.assign(n, 0);
}

namespace {

// Gradients with respect to one splat's 2D quantities.
struct SplatGrad2D {
    double center[2] = {0, 0};
    double conic[3] = {0, 0, 0};
    double opacity = 0;
    double depth = 0;
};

struct TileGrads {
    std::vector<SplatGrad2D> g;   // parallel to the tile's splat list
    std::vector<double> payload;  // list size * C
};

struct Contributor {
    std::uint32_t listPos;
    float alpha;
    float G;      // exp(-q/2)
    float T;      // transmittance before this splat
    bool clamped; // alpha hit alpha_max
    float dx, dy;
};

void backward_tile(const ViewSetup &v, std::size_t tile, const GaussianScene &scene,
                   const RasterConfig &cfg, const Image *dImage, const Image *dDepth,
                   TileGrads &out) {
    const int C = scene.payload_dim;
    const int tx = static_cast<int>(tile % v.tiles_x);
    const int ty = static_cast<int>(tile / v.tiles_x);
    const int xBegin = tx * v.tile_size, xEnd = std::min(v.width, xBegin + v.tile_size);
    const int yBegin = ty * v.tile_size, yEnd = std::min(v.height, yBegin + v.tile_size);
    const std::uint32_t *list = v.tile_splats.data() + v.tile_offsets[tile];
    const std::size_t listSize = v.tile_offsets[tile + 1] - v.tile_offsets[tile];

    out.g.assign(listSize, {});
    out.payload.assign(listSize * C, 0.0);
    std::vector<Contributor> contrib;
    const float cut = cfg.sigma_extent * cfg.sigma_extent;

    for (int py = yBegin; py < yEnd; ++py) {
        for (int px = xBegin; px < xEnd; ++px) {
            const std::size_t p = static_cast<std::size_t>(py) * v.width + px;
            contrib.clear();
            float T = 1.0f;
            for (std::size_t k = 0; k < listSize; ++k) {
                const Splat2D &s = v.splats[list[k]];
                if (px < s.x0 || px >= s.x1 || py < s.y0 || py >= s.y1)
                    continue;
                const float dx = static_cast<float>(px) + 0.5f - s.center.x();
                const float dy = static_cast<float>(py) + 0.5f - s.center.y();
                const float q = s.conic[0] * dx * dx + 2.0f * s.conic[1] * dx * dy +
                                s.conic[2] * dy * dy;
                if (q > cut)
                    continue;
                const float G = std::exp(-0.5f * q);
                const float raw = s.alpha * G;
                const float alpha = std::min(cfg.alpha_max, raw);
                if (alpha < cfg.alpha_min)
                    continue;
                const float nextT = T * (1.0f - alpha);
                if (nextT < cfg.transmittance_min)
                    break;
                contrib.push_back({static_cast<std::uint32_t>(k), alpha, G, T,
                                   raw > cfg.alpha_max, dx, dy});
                T = nextT;
            }
            if (contrib.empty())
                continue;

            std::span<const float> gC;
            if (dImage)
                gC = dImage->pixel(p);
            const double gD = dDepth ? dDepth->data[p] : 0.0;

            double S = 0.0;
            for (auto it = contrib.rbegin(); it != contrib.rend(); ++it) {
                const Splat2D &s = v.splats[list[it->listPos]];
                auto payload = scene.payload_of(s.gaussian_index);
                const double w = static_cast<double>(it->alpha) * it->T;

                double val = gD * s.depth_value;
                if (dImage) {
                    double *gp = out.payload.data() + static_cast<std::size_t>(it->listPos) * C;
                    for (int c = 0; c < C; ++c) {
                        val += static_cast<double>(payload[c]) * gC[c];
                        gp[c] += w * gC[c];
                    }
                }
                SplatGrad2D &g = out.g[it->listPos];
                g.depth += w * gD;

                const double dAlpha = it->T * val - S / (1.0 - it->alpha);
                S += val * w;
                if (it->clamped)
                    continue;

                const double dG = dAlpha * s.alpha;
                g.opacity += dAlpha * it->G;
                const double dq = -0.5 * it->G * dG;
                const double dx = it->dx, dy = it->dy;
                g.conic[0] += dq * dx * dx;
                g.conic[1] += dq * 2.0 * dx * dy;
                g.conic[2] += dq * dy * dy;
                // d = pixel - center, so dq/dcenter = -dq/dd
                g.center[0] += -dq * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                g.center[1] += -dq * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
            }
        }
    }
}

// d R(q) / d q_c for a unit quaternion (w, x, y, z).
std::array<Eigen::Matrix3d, 4> rotation_jacobian(const Eigen::Vector4d &q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    std::array<Eigen::Matrix3d, 4> d;
    d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    return d;
}

void backward_splat(const Splat2D &s, const SplatGrad2D &g, const Gaussian &gauss,
                    const Camera &cam, const RasterConfig &cfg, SceneGradients &out) {
    const std::size_t idx = s.gaussian_index;
    const Eigen::Matrix3d W = cam.R.cast<double>();
    const Eigen::Vector3d t = W * gauss.position.cast<double>() + cam.t.cast<double>();
    const double fx = cam.fx, fy = cam.fy, z = t.z();
    const double limX = 1.3 * 0.5 * cam.width / fx;
    const double limY = 1.3 * 0.5 * cam.height / fy;
    const double rx = t.x() / z, ry = t.y() / z;
    const bool clampX = rx < -limX || rx > limX;
    const bool clampY = ry < -limY || ry > limY;
    const double tx = std::clamp(rx, -limX, limX) * z;
    const double ty = std::clamp(ry, -limY, limY) * z;

    Eigen::Matrix<double, 2, 3> J;
    J << fx / z, 0, -fx * tx / (z * z), 0, fy / z, -fy * ty / (z * z);

    // Rotation and scale factors of Sigma.
    const double qnorm = gauss.rotation.cast<double>().norm();
    const Eigen::Vector4d qh = gauss.rotation.cast<double>() / qnorm;
    Eigen::Matrix3d R;
    {
        const double w = qh[0], x = qh[1], y = qh[2], zz = qh[3];
        R << 1 - 2 * (y * y + zz * zz), 2 * (x * y - w * zz), 2 * (x * zz + w * y),
            2 * (x * y + w * zz), 1 - 2 * (x * x + zz * zz), 2 * (y * zz - w * x),
            2 * (x * zz - w * y), 2 * (y * zz + w * x), 1 - 2 * (x * x + y * y);
    }
    const Eigen::Vector3d sigma = gauss.log_scale.cast<double>().array().exp();
    const Eigen::Matrix3d M = R * sigma.asDiagonal();
    const Eigen::Matrix3d Sigma = M * M.transpose();

    const Eigen::Matrix<double, 2, 3> T = J * W;
    Eigen::Matrix2d cov = T * Sigma * T.transpose();
    cov(0, 0) += cfg.low_pass;
    cov(1, 1) += cfg.low_pass;
    const Eigen::Matrix2d conic = cov.inverse();

    // conic entries (a, b, c) -> symmetric matrix gradient; b appears twice in q.
    Eigen::Matrix2d gConic;
    gConic << g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2];
    const Eigen::Matrix2d gCov = -conic * gConic * conic;

    const Eigen::Matrix3d gSigma = T.transpose() * gCov * T;
    const Eigen::Matrix<double, 2, 3> gT = 2.0 * gCov * T * Sigma;
    const Eigen::Matrix<double, 2, 3> gJ = gT * W.transpose();

    Eigen::Vector3d gt = Eigen::Vector3d::Zero();
    // J(0,0) = fx/z, J(1,1) = fy/z
    gt.z() += gJ(0, 0) * (-fx / (z * z)) + gJ(1, 1) * (-fy / (z * z));
    // J(0,2) = -fx tx / z^2 with tx = x unless clamped to +-limX * z.
    if (clampX) {
        gt.z() += gJ(0, 2) * (fx * std::copysign(limX, rx) / (z * z));
    } else {
        gt.x() += gJ(0, 2) * (-fx / (z * z));
        gt.z() += gJ(0, 2) * (2.0 * fx * t.x() / (z * z * z));
    }
    if (clampY) {
        gt.z() += gJ(1, 2) * (fy * std::copysign(limY, ry) / (z * z));
    } else {
        gt.y() += gJ(1, 2) * (-fy / (z * z));
        gt.z() += gJ(1, 2) * (2.0 * fy * t.y() / (z * z * z));
    }
    // Projected center.
    gt.x() += g.center[0] * fx / z;
    gt.z() += g.center[0] * (-fx * t.x() / (z * z));
    gt.y() += g.center[1] * fy / z;
    gt.z() += g.center[1] * (-fy * t.y() / (z * z));
    // Distance depth.
    gt += g.depth * t / t.norm();

    out.position[idx] = (W.transpose() * gt).cast<float>();

    const Eigen::Matrix3d gSym = 0.5 * (gSigma + gSigma.transpose());
    const Eigen::Matrix3d gM = 2.0 * gSym * M;
    Eigen::Vector3d gLogScale;
    Eigen::Matrix3d gR;
    for (int k = 0; k < 3; ++k) {
        gLogScale[k] = gM.col(k).dot(R.col(k)) * sigma[k];
        gR.col(k) = gM.col(k) * sigma[k];
    }
    out.log_scale[idx] = gLogScale.cast<float>();

    const auto dR = rotation_jacobian(qh);
    Eigen::Vector4d gqh;
    for (int c = 0; c < 4; ++c)
        gqh[c] = (gR.array() * dR[c].array()).sum();
    const Eigen::Vector4d gq = (gqh - qh * qh.dot(gqh)) / qnorm;
    out.rotation[idx] = gq.cast<float>();

    const double o = s.alpha;
    out.opacity_logit[idx] = static_cast<float>(g.opacity * o * (1.0 - o));
    out.screen_grad_norm[idx] =
        static_cast<float>(std::sqrt(g.center[0] * g.center[0] + g.center[1] * g.center[1]));
    out.visible[idx] = 1;
}

} // namespace

SceneGradients render_backward(const GaussianScene &scene, const Camera &cam,
                               const RasterConfig &cfg, const Image *dImage,
                               const Image *dDepth) {
    const ViewSetup v = prepare_view(scene, cam, cfg);
    const int C = scene.payload_dim;

    std::vector<TileGrads> tiles(v.tile_count());
    parallel_for(v.tile_count(), [&](std::size_t t) {
        backward_tile(v, t, scene, cfg, dImage, dDepth, tiles[t]);
    });

    // Ordered reduction over tiles.
    std::vector<SplatGrad2D> splatGrads(v.splats.size());
    std::vector<double> payloadGrads(v.splats.size() * C, 0.0);
    for (std::size_t t = 0; t < v.tile_count(); ++t) {
        const std::uint32_t *list = v.tile_splats.data() + v.tile_offsets[t];
        const std::size_t listSize = v.tile_offsets[t + 1] - v.tile_offsets[t];
        for (std::size_t k = 0; k < listSize; ++k) {
            SplatGrad2D &dst = splatGrads[list[k]];
            const SplatGrad2D &src = tiles[t].g[k];
            dst.center[0] += src.center[0];
            dst.center[1] += src.center[1];
            for (int c = 0; c < 3; ++c)
                dst.conic[c] += src.conic[c];
            dst.opacity += src.opacity;
            dst.depth += src.depth;
            for (int c = 0; c < C; ++c)
                payloadGrads[static_cast<std::size_t>(list[k]) * C + c] += tiles[t].payload[k * C + c];
        }
    }

    SceneGradients out;
    out.resize(scene.size(), C);
    parallel_for(v.splats.size(), [&](std::size_t k) {
        const Splat2D &s = v.splats[k];
        backward_splat(s, splatGrads[k], scene.gaussians[s.gaussian_index], cam, cfg, out);
        for (int c = 0; c < C; ++c)
            out.payload[static_cast<std::size_t>(s.gaussian_index) * C + c] =
                static_cast<float>(payloadGrads[k * C + c]);
    });
    return out;
}

} // namespace featsplat
