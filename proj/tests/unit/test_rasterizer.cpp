// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/autoencoder.hpp"
#include "featsplat/rasterizer.hpp"

#include "oracle.hpp"

#include <gtest/gtest.h>

#include <Eigen/LU>

#include <algorithm>
#include <numeric>
#include <random>

using namespace featsplat;

namespace {

Camera axis_camera(int w, int h, float f) {
    Camera c;
    c.id = "axis";
    c.width = w;
    c.height = h;
    c.fx = c.fy = f;
    c.cx = w * 0.5f;
    c.cy = h * 0.5f;
    return c;
}

GaussianScene single(const Eigen::Vector3f &pos, float opacity, std::vector<float> payload) {
    GaussianScene s;
    s.payload_dim = static_cast<int>(payload.size());
    Gaussian g;
    g.position = pos;
    g.opacity_logit = logit(opacity);
    s.gaussians.push_back(g);
    s.payload = std::move(payload);
    return s;
}

void expect_matches_oracle(const GaussianScene &scene, const Camera &cam, const RasterConfig &cfg,
                           double tol) {
    const RenderOutput out = render(scene, cam, cfg);
    const test::OracleRender ref = test::oracle_render(scene, cam, cfg);
    ASSERT_EQ(out.image.data.size(), ref.image.size());
    for (std::size_t k = 0; k < ref.image.size(); ++k)
        ASSERT_NEAR(out.image.data[k], ref.image[k], tol) << "channel value " << k;
    for (std::size_t p = 0; p < ref.depth.size(); ++p) {
        ASSERT_NEAR(out.depth.data[p], ref.depth[p], tol);
        ASSERT_NEAR(out.transmittance.data[p], ref.transmittance[p], tol);
    }
}

} // namespace

TEST(Project, AxisAlignedHandExample) {
    const Camera cam = axis_camera(64, 64, 100.0f);
    Gaussian g;
    g.position = {0, 0, 5};
    const auto s = project(g, 0, cam);
    ASSERT_TRUE(s.has_value());
    EXPECT_NEAR(s->center.x(), cam.cx, 1e-5);
    EXPECT_NEAR(s->center.y(), cam.cy, 1e-5);
    EXPECT_NEAR(s->cov2d(0, 0), 400.3f, 1e-2);
    EXPECT_NEAR(s->cov2d(1, 1), 400.3f, 1e-2);
    EXPECT_NEAR(s->cov2d(0, 1), 0.0f, 1e-5);
    EXPECT_NEAR(s->depth_value, 5.0f, 1e-6);
    EXPECT_NEAR(s->depth_key, 5.0f, 1e-6);
}

TEST(Project, BehindCameraIsCulled) {
    const Camera cam = axis_camera(64, 64, 100.0f);
    Gaussian g;
    g.position = {0, 0, -1};
    EXPECT_FALSE(project(g, 0, cam).has_value());
}

TEST(Project, BoxIsClippedAndCovPositiveDefinite) {
    const GaussianScene s = test::random_scene(300, 3, 1);
    for (const Camera &cam : test::ring_cameras(4, 48, 40)) {
        for (std::uint32_t i = 0; i < s.size(); ++i) {
            const auto sp = project(s.gaussians[i], i, cam);
            if (!sp)
                continue;
            EXPECT_GE(sp->x0, 0);
            EXPECT_GE(sp->y0, 0);
            EXPECT_LE(sp->x1, cam.width);
            EXPECT_LE(sp->y1, cam.height);
            EXPECT_GT(sp->cov2d.determinant(), 0.0f);
            EXPECT_GT(sp->cov2d(0, 0), 0.0f);
            EXPECT_GT(sp->depth_key, RasterConfig{}.near_plane);
        }
    }
}

TEST(Render, SingleSplatHalfOpacity) {
    Camera cam = axis_camera(33, 33, 50.0f);
    const GaussianScene s = single({0, 0, 5}, 0.5f, {0.2f, 0.4f, 0.8f});
    RasterConfig cfg;
    cfg.capture_weights = true;
    const RenderOutput out = render(s, cam, cfg);
    EXPECT_NEAR(out.image.at(16, 16, 0), 0.1f, 1e-7);
    EXPECT_NEAR(out.image.at(16, 16, 1), 0.2f, 1e-7);
    EXPECT_NEAR(out.image.at(16, 16, 2), 0.4f, 1e-7);
    EXPECT_NEAR(out.depth.at(16, 16), 2.5f, 1e-6);
    const auto w = out.weights->at(16 * 33 + 16);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_EQ(w[0].gaussian, 0u);
    EXPECT_NEAR(w[0].weight, 0.5f, 1e-7);
}

TEST(Render, TwoCoincidentSplats) {
    Camera cam = axis_camera(33, 33, 50.0f);
    GaussianScene s = single({0, 0, 5}, 0.5f, {1, 0, 0});
    s.gaussians.push_back(s.gaussians[0]);
    s.payload.insert(s.payload.end(), {0, 1, 0});
    RasterConfig cfg;
    cfg.capture_weights = true;
    const RenderOutput out = render(s, cam, cfg);
    const auto w = out.weights->at(16 * 33 + 16);
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[0].gaussian, 0u);
    EXPECT_NEAR(w[0].weight, 0.5f, 1e-7);
    EXPECT_EQ(w[1].gaussian, 1u);
    EXPECT_NEAR(w[1].weight, 0.25f, 1e-7);
    EXPECT_NEAR(out.transmittance.at(16, 16), 0.25f, 1e-7);
    EXPECT_NEAR(out.image.at(16, 16, 0), 0.5f, 1e-7);
    EXPECT_NEAR(out.image.at(16, 16, 1), 0.25f, 1e-7);
}

TEST(Render, MatchesSequentialOracle) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const GaussianScene s = test::random_scene(60, 5, 100 + seed);
        for (const Camera &cam : test::ring_cameras(2, 64, 64))
            expect_matches_oracle(s, cam, {}, 1e-5);
    }
}

TEST(Render, ConservationAndMonotoneTransmittance) {
    const GaussianScene s = test::random_scene(80, 3, 9);
    RasterConfig cfg;
    cfg.capture_weights = true;
    cfg.weight_capture_min = 0.0f;
    for (const Camera &cam : test::ring_cameras(3, 40, 36)) {
        const RenderOutput out = render(s, cam, cfg);
        for (std::size_t p = 0; p < out.image.pixel_count(); ++p) {
            double sum = out.transmittance.data[p];
            double T = 1.0;
            for (const WeightEntry &e : out.weights->at(p)) {
                EXPECT_GT(e.weight, 0.0f);
                const double next = T - e.weight;
                EXPECT_LT(next, T);
                T = next;
                sum += e.weight;
            }
            EXPECT_NEAR(sum, 1.0, 1e-5);
        }
    }
}

TEST(Render, CappedCaptureConservesLoosely) {
    const GaussianScene s = test::random_scene(80, 3, 10);
    RasterConfig cfg;
    cfg.capture_weights = true;
    for (const Camera &cam : test::ring_cameras(2, 40, 36)) {
        const RenderOutput out = render(s, cam, cfg);
        for (std::size_t p = 0; p < out.image.pixel_count(); ++p) {
            double sum = out.transmittance.data[p];
            for (const WeightEntry &e : out.weights->at(p)) {
                EXPECT_GE(e.weight, cfg.weight_capture_min);
                sum += e.weight;
            }
            EXPECT_NEAR(sum, 1.0, 1e-3);
        }
    }
}

TEST(Render, WeightsMatchOracle) {
    const GaussianScene s = test::random_scene(50, 3, 12);
    RasterConfig cfg;
    cfg.capture_weights = true;
    cfg.weight_capture_min = 0.0f;
    const Camera cam = test::ring_cameras(1, 32, 32)[0];
    const RenderOutput out = render(s, cam, cfg);
    const test::OracleRender ref = test::oracle_render(s, cam, cfg);
    for (std::size_t p = 0; p < out.image.pixel_count(); ++p) {
        const auto got = out.weights->at(p);
        ASSERT_EQ(got.size(), ref.weights[p].size());
        for (std::size_t k = 0; k < got.size(); ++k) {
            EXPECT_EQ(got[k].gaussian, ref.weights[p][k].first);
            EXPECT_NEAR(got[k].weight, ref.weights[p][k].second, 1e-6);
        }
    }
}

TEST(Render, InputPermutationInvariance) {
    const GaussianScene s = test::random_scene(70, 4, 13);
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937(4));
    GaussianScene p = s;
    for (std::size_t k = 0; k < perm.size(); ++k) {
        p.gaussians[k] = s.gaussians[perm[k]];
        for (int d = 0; d < 4; ++d)
            p.payload_of(k)[d] = s.payload_of(perm[k])[d];
    }
    for (const Camera &cam : test::ring_cameras(2, 48, 48)) {
        const RenderOutput a = render(s, cam), b = render(p, cam);
        for (std::size_t k = 0; k < a.image.data.size(); ++k)
            EXPECT_NEAR(a.image.data[k], b.image.data[k], 1e-6);
        for (std::size_t k = 0; k < a.depth.data.size(); ++k)
            EXPECT_NEAR(a.depth.data[k], b.depth.data[k], 1e-6);
    }
}

TEST(Render, TileSizeIndependence) {
    const GaussianScene s = test::random_scene(90, 3, 14);
    const Camera cam = test::ring_cameras(1, 70, 50)[0];
    RasterConfig cfg;
    cfg.tile_size = 16;
    const RenderOutput base = render(s, cam, cfg);
    for (int tile : {8, 32}) {
        cfg.tile_size = tile;
        const RenderOutput out = render(s, cam, cfg);
        for (std::size_t k = 0; k < base.image.data.size(); ++k)
            EXPECT_NEAR(out.image.data[k], base.image.data[k], 1e-6);
        for (std::size_t k = 0; k < base.depth.data.size(); ++k)
            EXPECT_NEAR(out.depth.data[k], base.depth.data[k], 1e-6);
    }
}

TEST(Render, NonFiniteGaussianNamesIndex) {
    GaussianScene s = test::random_scene(5, 3, 15);
    s.gaussians[3].log_scale[1] = std::numeric_limits<float>::quiet_NaN();
    try {
        render(s, test::ring_cameras(1, 16, 16)[0]);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError &e) {
        EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    }
}

TEST(RenderFeature, IdentityDecoderEqualsLatentRender) {
    Autoencoder ae(3, {3}, 1);
    ASSERT_EQ(ae.decoder().size(), 1u);
    ae.decoder()[0].weight = Eigen::MatrixXf::Identity(3, 3);
    ae.decoder()[0].bias = Eigen::VectorXf::Zero(3);
    const GaussianScene s = test::random_scene(40, 3, 16);
    const Camera cam = test::ring_cameras(1, 32, 32)[0];
    const Image a = render(s, cam).image;
    const Image b = render_feature(s, cam, ae);
    ASSERT_EQ(b.channels, 3);
    for (std::size_t k = 0; k < a.data.size(); ++k)
        EXPECT_NEAR(a.data[k], b.data[k], 1e-6);
}

TEST(RenderFeature, SharedLatentDecodesConstantWhenSaturated) {
    Autoencoder ae(6, {4, 3}, 2);
    GaussianScene s = test::random_scene(50, 3, 17);
    const std::vector<float> z{0.3f, 0.6f, 0.9f};
    for (std::size_t i = 0; i < s.size(); ++i)
        std::copy(z.begin(), z.end(), s.payload_of(i).begin());
    const Camera cam = test::ring_cameras(1, 32, 32)[0];
    const RenderOutput lat = render(s, cam);
    const Image f = render_feature(s, cam, ae);
    for (std::size_t p = 0; p < f.pixel_count(); ++p) {
        const float coverage = 1.0f - lat.transmittance.data[p];
        std::vector<float> zc(3);
        for (int c = 0; c < 3; ++c)
            zc[c] = z[c] * coverage;
        const std::vector<float> want = ae.decode(zc);
        for (int d = 0; d < 6; ++d)
            EXPECT_NEAR(f.pixel(p)[d], want[d], 1e-5);
    }
}

namespace {

double weighted_sum(const RenderOutput &out, const Image &wImg, const Image &wDepth) {
    double s = 0;
    for (std::size_t k = 0; k < wImg.data.size(); ++k)
        s += double(wImg.data[k]) * out.image.data[k];
    for (std::size_t k = 0; k < wDepth.data.size(); ++k)
        s += double(wDepth.data[k]) * out.depth.data[k];
    return s;
}

} // namespace

TEST(RenderBackward, MatchesFiniteDifferences) {
    GaussianScene s = test::random_scene(6, 3, 18);
    for (Gaussian &g : s.gaussians) {
        g.log_scale = g.log_scale.array() + 0.6f;
        g.opacity_logit = std::clamp(g.opacity_logit, -1.5f, 1.5f);
    }
    RasterConfig cfg;
    cfg.sigma_extent = 7.0f;
    cfg.alpha_min = 1e-9f;
    const Camera cam = test::ring_cameras(1, 32, 32, 30.0f)[0];
    const RenderOutput base = render(s, cam, cfg);

    std::mt19937 rng(5);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Image wImg(32, 32, 3), wDepth(32, 32, 1);
    for (float &x : wImg.data)
        x = u(rng);
    for (float &x : wDepth.data)
        x = 0.1f * u(rng);
    const SceneGradients g = render_backward(s, cam, cfg, &wImg, &wDepth);

    const float h = 1e-3f;
    auto fd = [&](auto &&param) {
        float &v = param();
        const float orig = v;
        v = orig + h;
        const double lp = weighted_sum(render(s, cam, cfg), wImg, wDepth);
        v = orig - h;
        const double lm = weighted_sum(render(s, cam, cfg), wImg, wDepth);
        v = orig;
        return (lp - lm) / (2.0 * h);
    };

    std::vector<double> analytic, numeric;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!g.visible[i])
            continue;
        for (int a = 0; a < 3; ++a) {
            analytic.push_back(g.position[i][a]);
            numeric.push_back(fd([&]() -> float & { return s.gaussians[i].position[a]; }));
            analytic.push_back(g.log_scale[i][a]);
            numeric.push_back(fd([&]() -> float & { return s.gaussians[i].log_scale[a]; }));
            analytic.push_back(g.payload[i * 3 + a]);
            numeric.push_back(fd([&]() -> float & { return s.payload[i * 3 + a]; }));
        }
        for (int a = 0; a < 4; ++a) {
            analytic.push_back(g.rotation[i][a]);
            numeric.push_back(fd([&]() -> float & { return s.gaussians[i].rotation[a]; }));
        }
        analytic.push_back(g.opacity_logit[i]);
        numeric.push_back(fd([&]() -> float & { return s.gaussians[i].opacity_logit; }));
    }
    ASSERT_FALSE(analytic.empty());
    double scale = 0;
    for (double v : numeric)
        scale = std::max(scale, std::abs(v));
    for (std::size_t k = 0; k < analytic.size(); ++k)
        EXPECT_NEAR(analytic[k], numeric[k], 1e-2 * scale + 1e-3) << "entry " << k;
    (void)base;
}

TEST(RenderBackward, InvisibleGaussiansHaveZeroGradient) {
    GaussianScene s = test::random_scene(4, 3, 19);
    s.gaussians[2].position = {100, 100, 100};
    const Camera cam = test::ring_cameras(1, 16, 16)[0];
    Image wImg(16, 16, 3, 1.0f);
    const SceneGradients g = render_backward(s, cam, {}, &wImg, nullptr);
    EXPECT_EQ(g.visible[2], 0);
    EXPECT_EQ(g.position[2], Eigen::Vector3f::Zero());
    EXPECT_EQ(g.opacity_logit[2], 0.0f);
}
