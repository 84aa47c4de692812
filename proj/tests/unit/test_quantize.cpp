// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/quantize.hpp"

#include "oracle.hpp"
#include "temp_dir.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace featsplat;

namespace {

std::vector<float> random_rows(std::size_t n, int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g;
    std::vector<float> v(n * dim);
    for (float &x : v)
        x = g(rng);
    return v;
}

} // namespace

TEST(Codebook, KEqualsNGivesZeroError) {
    const auto v = random_rows(50, 4, 1);
    const Codebook cb = build_codebook(v, 4, 50, 10, 2);
    EXPECT_EQ(cb.size(), 50u);
    EXPECT_EQ(quantization_error(v, 4, cb.entries, cb.assignment), 0.0);
}

TEST(Codebook, KLargerThanNIsRejected) {
    const auto v = random_rows(7, 3, 3);
    EXPECT_THROW(build_codebook(v, 3, 100, 5, 4), DataError);
    EXPECT_THROW(build_codebook(v, 3, 0, 5, 4), DataError);
}

TEST(Quantize, CodebooksAreCappedAtSceneSize) {
    const GaussianScene s = test::random_scene(7, 3, 3);
    const VqBundle b = quantize_scene(s, QuantizeConfig{});
    EXPECT_EQ(b.geometry.size(), 7u);
    EXPECT_EQ(b.latent.size(), 7u);
}

TEST(Codebook, TwoSeparatedClustersGiveMeans) {
    std::mt19937 rng(5);
    std::uniform_real_distribution<float> u(-0.5f, 0.5f);
    std::vector<float> v;
    double meanA[2] = {0, 0}, meanB[2] = {0, 0};
    for (int i = 0; i < 200; ++i) {
        const bool a = i % 3 == 0;
        const float x = (a ? -10.0f : 10.0f) + u(rng), y = (a ? 5.0f : -5.0f) + u(rng);
        v.push_back(x);
        v.push_back(y);
        double *m = a ? meanA : meanB;
        m[0] += x;
        m[1] += y;
    }
    const double nA = 67, nB = 133;
    const Codebook cb = build_codebook(v, 2, 2, 20, 6);
    ASSERT_EQ(cb.size(), 2u);
    const int ia = cb.entry(0)[0] < 0 ? 0 : 1;
    EXPECT_NEAR(cb.entry(ia)[0], meanA[0] / nA, 1e-6 * 10);
    EXPECT_NEAR(cb.entry(ia)[1], meanA[1] / nA, 1e-6 * 10);
    EXPECT_NEAR(cb.entry(1 - ia)[0], meanB[0] / nB, 1e-6 * 10);
    EXPECT_NEAR(cb.entry(1 - ia)[1], meanB[1] / nB, 1e-6 * 10);
}

TEST(Codebook, ErrorHistoryIsMonotone) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto v = random_rows(2000, 7, 10 + seed);
        const Codebook cb = build_codebook(v, 7, 64, 30, seed);
        ASSERT_GE(cb.error_history.size(), 2u);
        for (std::size_t k = 1; k < cb.error_history.size(); ++k)
            EXPECT_LE(cb.error_history[k], cb.error_history[k - 1] * (1 + 1e-12));
        EXPECT_NEAR(cb.error_history.back(), quantization_error(v, 7, cb.entries, cb.assignment),
                    1e-6 * cb.error_history.back());
    }
}

TEST(Codebook, BeatsRandomCodebooks) {
    const auto v = random_rows(1500, 3, 20);
    const Codebook cb = build_codebook(v, 3, 32, 20, 21);
    const double err = quantization_error(v, 3, cb.entries, cb.assignment);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, 1499);
        std::vector<float> entries;
        for (int k = 0; k < 32; ++k) {
            const std::size_t r = pick(rng);
            entries.insert(entries.end(), v.begin() + r * 3, v.begin() + r * 3 + 3);
        }
        const auto a = assign_to_codebook(v, 3, entries);
        EXPECT_LE(err, quantization_error(v, 3, entries, a));
    }
}

TEST(Codebook, AssignmentTiesGoToLowerIndex) {
    const std::vector<float> entries{1, 0, -1, 0};
    const std::vector<float> v{0, 0, 0.9f, 0, -2, 0};
    EXPECT_EQ(assign_to_codebook(v, 2, entries), (std::vector<std::uint32_t>{0, 0, 1}));
}

TEST(Codebook, DeterministicPerSeed) {
    const auto v = random_rows(500, 3, 30);
    const Codebook a = build_codebook(v, 3, 16, 10, 7), b = build_codebook(v, 3, 16, 10, 7);
    EXPECT_EQ(a.entries, b.entries);
    EXPECT_EQ(a.assignment, b.assignment);
}

TEST(Storage, IndexBytes) {
    EXPECT_EQ(index_bytes(1), 1u);
    EXPECT_EQ(index_bytes(256), 1u);
    EXPECT_EQ(index_bytes(257), 2u);
    EXPECT_EQ(index_bytes(65536), 2u);
    EXPECT_EQ(index_bytes(65537), 4u);
}

TEST(Storage, FormulaForReferenceScene) {
    const std::size_t n = 47000;
    const std::size_t want = 32 + 4 * (7 * 4096 + 3 * 256) + n * (2 + 1) + 3 * n * 4 + 4 * n;
    EXPECT_EQ(bundle_bytes(n, 4096, 256, false), want);
    EXPECT_EQ(bundle_bytes(n, 4096, 256, true), want - 3 * n * 2);
}

TEST(Storage, SavedFileMatchesFormula) {
    test::TempDir dir;
    const GaussianScene s = test::random_scene(700, 3, 40);
    for (bool half : {false, true}) {
        QuantizeConfig cfg;
        cfg.k_geometry = 300;
        cfg.k_latent = 40;
        cfg.iterations = 5;
        cfg.half_positions = half;
        const VqBundle b = quantize_scene(s, cfg);
        save_bundle(b, dir / "b.cfvq");
        EXPECT_EQ(std::filesystem::file_size(dir / "b.cfvq"), bundle_bytes(700, 300, 40, half));
        const VqBundle back = load_bundle(dir / "b.cfvq");
        EXPECT_EQ(back.geometry.entries, b.geometry.entries);
        EXPECT_EQ(back.latent.entries, b.latent.entries);
        EXPECT_EQ(back.geometry.assignment, b.geometry.assignment);
        EXPECT_EQ(back.latent.assignment, b.latent.assignment);
        EXPECT_EQ(back.positions, b.positions);
        EXPECT_EQ(back.opacity_logits, b.opacity_logits);
        EXPECT_EQ(back.half_positions, half);
    }
}

TEST(Storage, CorruptBundlesAreRejected) {
    test::TempDir dir;
    const GaussianScene s = test::random_scene(20, 3, 41);
    QuantizeConfig cfg;
    cfg.k_geometry = 8;
    cfg.k_latent = 4;
    save_bundle(quantize_scene(s, cfg), dir / "b.cfvq");
    std::filesystem::copy_file(dir / "b.cfvq", dir / "t.cfvq");
    std::filesystem::resize_file(dir / "t.cfvq", std::filesystem::file_size(dir / "t.cfvq") - 1);
    EXPECT_THROW(load_bundle(dir / "t.cfvq"), FormatError);
    {
        std::fstream f(dir / "b.cfvq", std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    EXPECT_THROW(load_bundle(dir / "b.cfvq"), FormatError);
}

TEST(Quantize, FullCodebooksReproduceScene) {
    const GaussianScene s = test::random_scene(60, 3, 50);
    QuantizeConfig cfg;
    cfg.k_geometry = 100;
    cfg.k_latent = 100;
    const GaussianScene d = dequantize(quantize_scene(s, cfg));
    ASSERT_EQ(d.size(), s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(d.gaussians[i].position, s.gaussians[i].position);
        EXPECT_EQ(d.gaussians[i].opacity_logit, s.gaussians[i].opacity_logit);
        EXPECT_TRUE(d.gaussians[i].log_scale.isApprox(s.gaussians[i].log_scale, 1e-6f));
        EXPECT_TRUE(covariance(d.gaussians[i]).isApprox(covariance(s.gaussians[i]), 1e-5f));
        for (int c = 0; c < 3; ++c)
            EXPECT_NEAR(d.payload_of(i)[c], s.payload_of(i)[c], 1e-6);
    }
    cfg.half_positions = true;
    const GaussianScene h = dequantize(quantize_scene(s, cfg));
    for (std::size_t i = 0; i < s.size(); ++i)
        for (int a = 0; a < 3; ++a)
            EXPECT_NEAR(h.gaussians[i].position[a], s.gaussians[i].position[a],
                        1e-3 * std::max(1.0f, std::abs(s.gaussians[i].position[a])));
}

TEST(Quantize, RequantizingIsIdempotent) {
    const GaussianScene s = test::random_scene(400, 3, 51);
    QuantizeConfig cfg;
    cfg.k_geometry = 32;
    cfg.k_latent = 16;
    cfg.half_positions = true;
    const VqBundle b = quantize_scene(s, cfg);
    const GaussianScene d = dequantize(b);
    const VqBundle again = quantize_with(d, b);
    EXPECT_EQ(again.geometry.assignment, b.geometry.assignment);
    EXPECT_EQ(again.latent.assignment, b.latent.assignment);
    EXPECT_EQ(again.positions, b.positions);
    const GaussianScene d2 = dequantize(again);
    EXPECT_EQ(d2.payload, d.payload);
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(d2.gaussians[i].rotation, d.gaussians[i].rotation);
        EXPECT_EQ(d2.gaussians[i].log_scale, d.gaussians[i].log_scale);
        EXPECT_EQ(d2.gaussians[i].position, d.gaussians[i].position);
    }
}

TEST(Quantize, GeometryVectorsFixQuaternionSign) {
    GaussianScene s = test::random_scene(30, 3, 52);
    for (std::size_t i = 0; i < s.size(); i += 2)
        s.gaussians[i].rotation = -s.gaussians[i].rotation;
    const auto g = geometry_vectors(s);
    ASSERT_EQ(g.size(), 30u * kGeometryDim);
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_GE(g[i * 7 + 3], 0.0f);
        EXPECT_EQ(g[i * 7], s.gaussians[i].log_scale[0]);
    }
}

TEST(Quantize, RejectsNonLatentPayload) {
    const GaussianScene s = test::random_scene(10, 5, 53);
    EXPECT_THROW(quantize_scene(s, QuantizeConfig{}), DataError);
}
