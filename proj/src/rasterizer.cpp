// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/rasterizer.hpp"

#include "featsplat/autoencoder.hpp"
#include "featsplat/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace featsplat {

std::optional<Splat2D> project(const Gaussian &g, std::uint32_t index, const Camera &cam,
                               const RasterConfig &cfg) {
    const Eigen::Vector3f t = cam.R * g.position + cam.t;
    if (t.z() <= cfg.near_plane)
        return std::nullopt;

    const float z = t.z();
    const float limX = 1.3f * 0.5f * static_cast<float>(cam.width) / cam.fx;
    const float limY = 1.3f * 0.5f * static_cast<float>(cam.height) / cam.fy;
    const float tx = std::clamp(t.x() / z, -limX, limX) * z;
    const float ty = std::clamp(t.y() / z, -limY, limY) * z;

    Eigen::Matrix<float, 2, 3> J;
    J << cam.fx / z, 0.0f, -cam.fx * tx / (z * z),
        0.0f, cam.fy / z, -cam.fy * ty / (z * z);
    const Eigen::Matrix<float, 2, 3> T = J * cam.R;
    Eigen::Matrix2f cov = T * covariance(g) * T.transpose();
    cov(0, 1) = cov(1, 0) = 0.5f * (cov(0, 1) + cov(1, 0));
    cov(0, 0) += cfg.low_pass;
    cov(1, 1) += cfg.low_pass;

    const float det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
    if (!(det > 0.0f))
        return std::nullopt;

    Splat2D s;
    s.gaussian_index = index;
    s.center = {cam.fx * t.x() / z + cam.cx, cam.fy * t.y() / z + cam.cy};
    s.cov2d = cov;
    s.conic = {cov(1, 1) / det, -cov(0, 1) / det, cov(0, 0) / det};
    s.alpha = g.opacity();
    s.depth_key = z;
    s.depth_value = t.norm();

    const float mid = 0.5f * (cov(0, 0) + cov(1, 1));
    const float lambdaMax = mid + std::sqrt(std::max(0.1f, mid * mid - det));
    const float r = cfg.sigma_extent * std::sqrt(lambdaMax);
    s.x0 = std::max(0, static_cast<int>(std::ceil(s.center.x() - r - 0.5f)));
    s.x1 = std::min(cam.width, static_cast<int>(std::floor(s.center.x() + r - 0.5f)) + 1);
    s.y0 = std::max(0, static_cast<int>(std::ceil(s.center.y() - r - 0.5f)));
    s.y1 = std::min(cam.height, static_cast<int>(std::floor(s.center.y() + r - 0.5f)) + 1);
    if (s.x0 >= s.x1 || s.y0 >= s.y1)
        return std::nullopt;
    return s;
}

float splat_alpha_at(const Splat2D &s, int px, int py, const RasterConfig &cfg) {
    const float dx = static_cast<float>(px) + 0.5f - s.center.x();
    const float dy = static_cast<float>(py) + 0.5f - s.center.y();
    const float q = s.conic[0] * dx * dx + 2.0f * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if (q > cfg.sigma_extent * cfg.sigma_extent)
        return 0.0f;
    return s.alpha * std::exp(-0.5f * q);
}

static bool gaussian_finite(const GaussianScene &scene, std::size_t i) {
    const Gaussian &g = scene.gaussians[i];
    if (!g.position.allFinite() || !g.log_scale.allFinite() || !g.rotation.allFinite() ||
        !std::isfinite(g.opacity_logit) || !(g.rotation.squaredNorm() > 0.0f))
        return false;
    for (float v : scene.payload_of(i))
        if (!std::isfinite(v))
            return false;
    return true;
}

ViewSetup prepare_view(const GaussianScene &scene, const Camera &cam, const RasterConfig &cfg) {
    if (cfg.tile_size <= 0)
        throw DataError("tile size must be positive");

    ViewSetup v;
    v.width = cam.width;
    v.height = cam.height;
    v.tile_size = cfg.tile_size;
    v.tiles_x = (cam.width + cfg.tile_size - 1) / cfg.tile_size;
    v.tiles_y = (cam.height + cfg.tile_size - 1) / cfg.tile_size;

    const std::size_t n = scene.size();
    for (std::size_t i = 0; i < n; ++i)
        if (!gaussian_finite(scene, i))
            throw NumericalError("non-finite parameters at Gaussian " + std::to_string(i));

    std::vector<std::optional<Splat2D>> projected(n);
    constexpr std::size_t kChunk = 1024;
    parallel_for((n + kChunk - 1) / kChunk, [&](std::size_t c) {
        const std::size_t end = std::min(n, (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < end; ++i)
            projected[i] = project(scene.gaussians[i], static_cast<std::uint32_t>(i), cam, cfg);
    });
    for (auto &p : projected)
        if (p)
            v.splats.push_back(*p);

    std::sort(v.splats.begin(), v.splats.end(), [](const Splat2D &a, const Splat2D &b) {
        if (a.depth_key != b.depth_key)
            return a.depth_key < b.depth_key;
        return a.gaussian_index < b.gaussian_index;
    });

    const int ts = cfg.tile_size;
    std::vector<std::uint32_t> counts(v.tile_count() + 1, 0);
    auto forTiles = [&](const Splat2D &s, auto &&fn) {
        for (int ty = s.y0 / ts; ty <= (s.y1 - 1) / ts; ++ty)
            for (int tx = s.x0 / ts; tx <= (s.x1 - 1) / ts; ++tx)
                fn(static_cast<std::size_t>(ty) * v.tiles_x + tx);
    };
    for (const Splat2D &s : v.splats)
        forTiles(s, [&](std::size_t t) { ++counts[t + 1]; });
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    v.tile_offsets = counts;
    v.tile_splats.resize(counts.back());
    std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
    for (std::uint32_t k = 0; k < v.splats.size(); ++k)
        forTiles(v.splats[k], [&](std::size_t t) { v.tile_splats[cursor[t]++] = k; });
    return v;
}

namespace {

struct TileWeights {
    std::vector<std::uint32_t> counts; // per tile-local pixel
    std::vector<WeightEntry> entries;
};

void render_tile(const ViewSetup &v, std::size_t tile, const GaussianScene &scene,
                 const RasterConfig &cfg, RenderOutput &out, TileWeights *tw) {
    const int C = scene.payload_dim;
    const int tx = static_cast<int>(tile % v.tiles_x);
    const int ty = static_cast<int>(tile / v.tiles_x);
    const int xBegin = tx * v.tile_size, xEnd = std::min(v.width, xBegin + v.tile_size);
    const int yBegin = ty * v.tile_size, yEnd = std::min(v.height, yBegin + v.tile_size);
    const std::uint32_t *list = v.tile_splats.data() + v.tile_offsets[tile];
    const std::size_t listSize = v.tile_offsets[tile + 1] - v.tile_offsets[tile];

    std::vector<float> acc(C);
    for (int py = yBegin; py < yEnd; ++py) {
        for (int px = xBegin; px < xEnd; ++px) {
            std::fill(acc.begin(), acc.end(), 0.0f);
            float T = 1.0f;
            float depth = 0.0f;
            std::uint32_t captured = 0;
            for (std::size_t k = 0; k < listSize; ++k) {
                const Splat2D &s = v.splats[list[k]];
                if (px < s.x0 || px >= s.x1 || py < s.y0 || py >= s.y1)
                    continue;
                const float alpha = std::min(cfg.alpha_max, splat_alpha_at(s, px, py, cfg));
                if (alpha < cfg.alpha_min)
                    continue;
                const float nextT = T * (1.0f - alpha);
                if (nextT < cfg.transmittance_min)
                    break;
                const float w = alpha * T;
                auto payload = scene.payload_of(s.gaussian_index);
                for (int c = 0; c < C; ++c)
                    acc[c] += w * payload[c];
                depth += w * s.depth_value;
                if (tw && w >= cfg.weight_capture_min) {
                    tw->entries.push_back({s.gaussian_index, w});
                    ++captured;
                }
                T = nextT;
            }
            const std::size_t p = static_cast<std::size_t>(py) * v.width + px;
            std::copy(acc.begin(), acc.end(), out.image.pixel(p).begin());
            out.depth.data[p] = depth;
            out.transmittance.data[p] = T;
            if (tw)
                tw->counts.push_back(captured);
        }
    }
}

} // namespace

RenderOutput render(const GaussianScene &scene, const Camera &cam, const RasterConfig &cfg) {
    if (scene.payload_dim > cfg.max_channels)
        throw DataError("payload_dim " + std::to_string(scene.payload_dim) +
                        " exceeds the channel limit " + std::to_string(cfg.max_channels));
    const ViewSetup v = prepare_view(scene, cam, cfg);

    RenderOutput out;
    out.image = Image(cam.height, cam.width, scene.payload_dim);
    out.depth = Image(cam.height, cam.width, 1);
    out.transmittance = Image(cam.height, cam.width, 1, 1.0f);

    std::vector<TileWeights> tileWeights(cfg.capture_weights ? v.tile_count() : 0);
    parallel_for(v.tile_count(), [&](std::size_t t) {
        render_tile(v, t, scene, cfg, out, cfg.capture_weights ? &tileWeights[t] : nullptr);
    });

    if (cfg.capture_weights) {
        // Concatenate tile buffers into row-major CSR order.
        WeightBuffer wb;
        wb.height = cam.height;
        wb.width = cam.width;
        wb.offsets.assign(out.image.pixel_count() + 1, 0);
        std::vector<std::uint32_t> tileCursor(v.tile_count(), 0);
        std::vector<std::vector<std::uint32_t>> tileEntryStart(v.tile_count());
        for (std::size_t t = 0; t < v.tile_count(); ++t) {
            auto &starts = tileEntryStart[t];
            starts.resize(tileWeights[t].counts.size() + 1, 0);
            std::partial_sum(tileWeights[t].counts.begin(), tileWeights[t].counts.end(),
                             starts.begin() + 1);
        }
        for (int py = 0; py < cam.height; ++py) {
            const int ty = py / v.tile_size;
            for (int px = 0; px < cam.width; ++px) {
                const std::size_t t = static_cast<std::size_t>(ty) * v.tiles_x + px / v.tile_size;
                const int tileW = std::min(v.width, (px / v.tile_size + 1) * v.tile_size) -
                                  (px / v.tile_size) * v.tile_size;
                const std::size_t local = static_cast<std::size_t>(py - ty * v.tile_size) * tileW +
                                          (px - (px / v.tile_size) * v.tile_size);
                const auto &tw = tileWeights[t];
                const auto begin = tileEntryStart[t][local], end = tileEntryStart[t][local + 1];
                wb.entries.insert(wb.entries.end(), tw.entries.begin() + begin,
                                  tw.entries.begin() + end);
                wb.offsets[static_cast<std::size_t>(py) * cam.width + px + 1] =
                    static_cast<std::uint32_t>(wb.entries.size());
            }
        }
        wb.final_transmittance = out.transmittance.data;
        out.weights = std::move(wb);
    }
    return out;
}

Image render_feature(const GaussianScene &scene, const Camera &cam, const Autoencoder &decoder,
                     const RasterConfig &cfg) {
    if (scene.payload_dim != decoder.latent_dim())
        throw DataError("render_feature needs a latent scene with payload_dim " +
                        std::to_string(decoder.latent_dim()));
    RasterConfig noCapture = cfg;
    noCapture.capture_weights = false;
    const RenderOutput latent = render(scene, cam, noCapture);
    return decoder.decode_image(latent.image);
}

} // namespace featsplat
