// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/lifting.hpp"

#include "featsplat/parallel.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace featsplat {

std::size_t LiftedField::kept_count() const {
    return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), std::uint8_t{1}));
}

namespace {

struct ViewAccumulator {
    std::vector<double> sum;    // N x D
    std::vector<double> sqsum;  // N x D
    std::vector<double> total;  // N, valid pixels only
    std::vector<double> contrib; // N, all pixels
};

// Feature sample for camera pixel (px, py). Returns false for masked pixels.
bool sample_feature(const FeatureMap &map, const Camera &cam, int px, int py,
                    FeatureSampling mode, std::vector<float> &out) {
    const int D = map.dim();
    const double u = (px + 0.5) * map.width() / cam.width;
    const double v = (py + 0.5) * map.height() / cam.height;
    if (mode == FeatureSampling::Nearest) {
        const int mx = std::clamp(static_cast<int>(std::floor(u)), 0, map.width() - 1);
        const int my = std::clamp(static_cast<int>(std::floor(v)), 0, map.height() - 1);
        const std::size_t p = static_cast<std::size_t>(my) * map.width() + mx;
        if (!map.valid[p])
            return false;
        auto f = map.image.pixel(p);
        std::copy(f.begin(), f.end(), out.begin());
        return true;
    }

    const double fu = u - 0.5, fv = v - 0.5;
    const int x0 = static_cast<int>(std::floor(fu)), y0 = static_cast<int>(std::floor(fv));
    const double ax = fu - x0, ay = fv - y0;
    std::fill(out.begin(), out.end(), 0.0f);
    double wsum = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            const int mx = std::clamp(x0 + dx, 0, map.width() - 1);
            const int my = std::clamp(y0 + dy, 0, map.height() - 1);
            const std::size_t p = static_cast<std::size_t>(my) * map.width() + mx;
            const double w = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
            if (!map.valid[p] || w <= 0.0)
                continue;
            auto f = map.image.pixel(p);
            for (int d = 0; d < D; ++d)
                out[d] += static_cast<float>(w * f[d]);
            wsum += w;
        }
    }
    double n = 0.0;
    for (float x : out)
        n += static_cast<double>(x) * x;
    if (wsum <= 0.0 || n <= 0.0)
        return false;
    const double inv = 1.0 / std::sqrt(n);
    for (float &x : out)
        x = static_cast<float>(x * inv);
    return true;
}

void accumulate_view(const GaussianScene &scene, const Camera &cam, const FeatureMap &map,
                     const LiftConfig &cfg, ViewAccumulator &acc) {
    const std::size_t N = scene.size();
    const int D = map.dim();
    acc.sum.assign(N * D, 0.0);
    acc.sqsum.assign(N * D, 0.0);
    acc.total.assign(N, 0.0);
    acc.contrib.assign(N, 0.0);

    RasterConfig rc = cfg.raster;
    rc.capture_weights = true;
    const RenderOutput r = render(scene, cam, rc);
    const WeightBuffer &wb = *r.weights;

    std::vector<float> f(D);
    for (int py = 0; py < cam.height; ++py) {
        for (int px = 0; px < cam.width; ++px) {
            const std::size_t p = static_cast<std::size_t>(py) * cam.width + px;
            const auto entries = wb.at(p);
            if (entries.empty())
                continue;
            const bool valid = sample_feature(map, cam, px, py, cfg.sampling, f);
            for (const WeightEntry &e : entries) {
                acc.contrib[e.gaussian] += e.weight;
                if (!valid)
                    continue;
                acc.total[e.gaussian] += e.weight;
                double *s = acc.sum.data() + static_cast<std::size_t>(e.gaussian) * D;
                double *q = acc.sqsum.data() + static_cast<std::size_t>(e.gaussian) * D;
                for (int d = 0; d < D; ++d) {
                    const double wf = static_cast<double>(e.weight) * f[d];
                    s[d] += wf;
                    q[d] += wf * f[d];
                }
            }
        }
    }
}

// Views are processed in fixed-size groups and reduced in view order so the sums do
// not depend on the worker count.
constexpr std::size_t kViewGroup = 4;

} // namespace

LiftedField lift(const GaussianScene &scene, std::span<const Camera> cameras,
                 std::span<const FeatureMap> maps, const LiftConfig &cfg) {
    if (cameras.size() != maps.size())
        throw DataError("lift needs exactly one feature map per camera");
    if (maps.empty())
        throw DataError("lift needs at least one view");
    const int D = maps.front().dim();
    for (const FeatureMap &m : maps)
        if (m.dim() != D)
            throw DataError("feature maps disagree on the feature dimension");
    if (scene.empty())
        throw DataError("empty scene");

    const std::size_t N = scene.size();
    std::vector<double> sum(N * D, 0.0), sqsum(N * D, 0.0), total(N, 0.0), contrib(N, 0.0);

    for (std::size_t first = 0; first < cameras.size(); first += kViewGroup) {
        const std::size_t count = std::min(kViewGroup, cameras.size() - first);
        std::vector<ViewAccumulator> group(count);
        parallel_for(count, [&](std::size_t k) {
            accumulate_view(scene, cameras[first + k], maps[first + k], cfg, group[k]);
        });
        for (const ViewAccumulator &a : group) {
            for (std::size_t i = 0; i < N * D; ++i) {
                sum[i] += a.sum[i];
                sqsum[i] += a.sqsum[i];
            }
            for (std::size_t i = 0; i < N; ++i) {
                total[i] += a.total[i];
                contrib[i] += a.contrib[i];
            }
        }
    }

    LiftedField field;
    field.dim = D;
    field.features.assign(N * D, 0.0f);
    field.mean.assign(N * D, 0.0f);
    field.variance.assign(N * D, 0.0f);
    field.variance_norm.assign(N, 0.0f);
    field.contribution.resize(N);
    field.weight_total.resize(N);
    field.kept.assign(N, 0);

    std::size_t unobserved = 0, degenerate = 0;
    for (std::size_t i = 0; i < N; ++i) {
        field.contribution[i] = static_cast<float>(contrib[i]);
        field.weight_total[i] = static_cast<float>(total[i]);
        if (!(total[i] > 0.0)) {
            ++unobserved;
            continue;
        }
        double meanSq = 0.0, varSq = 0.0;
        for (int d = 0; d < D; ++d) {
            const double m = sum[i * D + d] / total[i];
            const double var = std::max(0.0, sqsum[i * D + d] / total[i] - m * m);
            field.mean[i * D + d] = static_cast<float>(m);
            field.variance[i * D + d] = static_cast<float>(var);
            meanSq += m * m;
            varSq += var * var;
        }
        field.variance_norm[i] = static_cast<float>(std::sqrt(varSq));
        const double norm = std::sqrt(meanSq);
        if (norm < 1e-8) {
            ++degenerate;
            continue;
        }
        for (int d = 0; d < D; ++d)
            field.features[i * D + d] = static_cast<float>(sum[i * D + d] / total[i] / norm);
        field.kept[i] = 1;
    }
    if (unobserved == N)
        spdlog::warn("lift: no Gaussian is observed by any view");
    else if (unobserved + degenerate > 0)
        spdlog::info("lift: {} unobserved and {} zero-mean Gaussians dropped", unobserved, degenerate);
    return field;
}

LiftedField variance_filter(LiftedField field, double top_fraction) {
    if (!(top_fraction >= 0.0 && top_fraction < 1.0))
        throw DataError("variance filter fraction must lie in [0, 1)");
    std::vector<std::uint32_t> kept;
    for (std::uint32_t i = 0; i < field.size(); ++i)
        if (field.kept[i])
            kept.push_back(i);
    if (kept.empty())
        throw DataError("variance filter needs at least one kept Gaussian");

    // Guard against 1e-4 * 1e4 landing a hair above 1.
    const auto remove = static_cast<std::size_t>(
        std::ceil(top_fraction * static_cast<double>(kept.size()) - 1e-9));
    if (remove == 0)
        return field;
    std::sort(kept.begin(), kept.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (field.variance_norm[a] != field.variance_norm[b])
            return field.variance_norm[a] > field.variance_norm[b];
        return a > b;
    });
    for (std::size_t k = 0; k < std::min(remove, kept.size()); ++k)
        field.kept[kept[k]] = 0;
    return field;
}

std::vector<float> contributions(const GaussianScene &scene, std::span<const Camera> cameras,
                                 const RasterConfig &cfg) {
    const std::size_t N = scene.size();
    std::vector<double> total(N, 0.0);
    RasterConfig rc = cfg;
    rc.capture_weights = true;
    for (std::size_t first = 0; first < cameras.size(); first += kViewGroup) {
        const std::size_t count = std::min(kViewGroup, cameras.size() - first);
        std::vector<std::vector<double>> group(count);
        parallel_for(count, [&](std::size_t k) {
            group[k].assign(N, 0.0);
            const RenderOutput r = render(scene, cameras[first + k], rc);
            for (const WeightEntry &e : r.weights->entries)
                group[k][e.gaussian] += e.weight;
        });
        for (const auto &g : group)
            for (std::size_t i = 0; i < N; ++i)
                total[i] += g[i];
    }
    return {total.begin(), total.end()};
}

GaussianScene lifted_scene(const GaussianScene &donor, const LiftedField &field) {
    if (field.size() != donor.size())
        throw DataError("lifted field does not match the donor scene");
    GaussianScene out;
    out.payload_dim = field.dim;
    out.meta = {donor.meta.source, SceneStage::Lifted};
    for (std::size_t i = 0; i < donor.size(); ++i) {
        if (!field.kept[i])
            continue;
        out.gaussians.push_back(donor.gaussians[i]);
        const float *f = field.features.data() + i * field.dim;
        out.payload.insert(out.payload.end(), f, f + field.dim);
    }
    return out;
}

void save_lift_sidecar(const LiftedField &field, const std::filesystem::path &path) {
    const std::size_t K = field.kept_count();
    if (K == 0)
        throw DataError("no kept Gaussians to write");
    Image img(2, static_cast<int>(K), 1);
    std::size_t k = 0;
    for (std::size_t i = 0; i < field.size(); ++i) {
        if (!field.kept[i])
            continue;
        img.data[k] = field.variance_norm[i];
        img.data[K + k] = field.contribution[i];
        ++k;
    }
    save_cffm(img, path);
}

LiftSidecar load_lift_sidecar(const std::filesystem::path &path) {
    const Image img = load_cffm_raw(path);
    if (img.height != 2 || img.channels != 1)
        throw FormatError("lift sidecar must be 2 x N x 1: " + path.string());
    const auto W = static_cast<std::size_t>(img.width);
    return {std::vector<float>(img.data.begin(), img.data.begin() + static_cast<std::ptrdiff_t>(W)),
            std::vector<float>(img.data.begin() + static_cast<std::ptrdiff_t>(W), img.data.end())};
}

LiftedField field_from_lifted_scene(const GaussianScene &lifted, const LiftSidecar &sidecar) {
    if (sidecar.variance_norm.size() != lifted.size())
        throw DataError("lift sidecar does not match the lifted scene");
    LiftedField f;
    f.dim = lifted.payload_dim;
    f.features = lifted.payload;
    f.mean = lifted.payload;
    f.variance.assign(lifted.payload.size(), 0.0f);
    f.variance_norm = sidecar.variance_norm;
    f.contribution = sidecar.contribution;
    f.weight_total = sidecar.contribution;
    f.kept.assign(lifted.size(), 1);
    return f;
}

} // namespace featsplat
