// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/synthetic.hpp"

#include "temp_dir.hpp"

#include <gtest/gtest.h>

using namespace featsplat;

namespace {

SynthSpec small_room() {
    SynthSpec s = SynthSpec::room();
    s.spacing = 0.2f;
    s.camera_count = 3;
    s.width = s.height = 32;
    return s;
}

} // namespace

TEST(Synthetic, CloneFractionOneDoublesTheScene) {
    SynthSpec s = small_room();
    const std::size_t base = generate_synthetic(s, 1).donor.size();
    s.clone_fraction = 1.0f;
    const SynthScene c = generate_synthetic(s, 1);
    EXPECT_EQ(c.donor.size(), 2 * base);
    EXPECT_EQ(c.gaussian_labels.size(), 2 * base);
    for (std::size_t i = 0; i < base; ++i) {
        EXPECT_EQ(c.donor.gaussians[base + i].position, c.donor.gaussians[i].position);
        EXPECT_EQ(c.gaussian_labels[base + i], c.gaussian_labels[i]);
    }
}

TEST(Synthetic, DeterministicPerSeed) {
    SynthSpec s = small_room();
    s.jitter = 0.05f;
    s.clone_fraction = 0.3f;
    const SynthScene a = generate_synthetic(s, 5), b = generate_synthetic(s, 5);
    ASSERT_EQ(a.donor.size(), b.donor.size());
    EXPECT_EQ(a.donor.payload, b.donor.payload);
    for (std::size_t i = 0; i < a.donor.size(); ++i)
        EXPECT_EQ(a.donor.gaussians[i].position, b.donor.gaussians[i].position);
    for (std::size_t v = 0; v < a.maps.size(); ++v) {
        EXPECT_EQ(a.maps[v].image.data, b.maps[v].image.data);
        EXPECT_EQ(a.labels[v], b.labels[v]);
    }
    EXPECT_EQ(a.queries.vectors, b.queries.vectors);
    const SynthScene c = generate_synthetic(s, 6);
    EXPECT_NE(a.queries.vectors, c.queries.vectors);
}

TEST(Synthetic, SingleBoxNoiselessMapsCarryTheBoxFeature) {
    SynthSpec s;
    s.boxes = {{{-0.5f, -0.5f, 0.0f}, {0.5f, 0.5f, 0.8f}, "box"}};
    s.camera_count = 1;
    s.width = s.height = 32;
    s.target = {0, 0, 0.4f};
    const SynthScene sc = generate_synthetic(s, 2);
    ASSERT_EQ(sc.maps.size(), 1u);
    std::size_t covered = 0;
    for (std::size_t p = 0; p < sc.maps[0].image.pixel_count(); ++p) {
        if (!sc.maps[0].valid[p]) {
            EXPECT_EQ(sc.labels[0][p], kBackground);
            continue;
        }
        ++covered;
        EXPECT_EQ(sc.labels[0][p], 0);
        for (int d = 0; d < s.feature_dim; ++d)
            EXPECT_NEAR(sc.maps[0].image.pixel(p)[d], sc.queries.vector(0)[d], 1e-6);
    }
    EXPECT_GT(covered, 50u);
}

TEST(Synthetic, QueriesAreDistinctUnitVectors) {
    const SynthScene sc = generate_synthetic(small_room(), 3);
    ASSERT_EQ(sc.queries.size(), 4u);
    EXPECT_EQ(sc.queries.names, (std::vector<std::string>{"floor", "cabinet", "table", "shelf"}));
    for (std::size_t a = 0; a < 4; ++a) {
        double n = 0;
        for (float x : sc.queries.vector(a))
            n += double(x) * x;
        EXPECT_NEAR(n, 1.0, 1e-6);
        for (std::size_t b = a + 1; b < 4; ++b) {
            double dot = 0;
            for (int d = 0; d < sc.queries.dim; ++d)
                dot += double(sc.queries.vector(a)[d]) * sc.queries.vector(b)[d];
            EXPECT_LT(dot, 0.9);
        }
    }
}

TEST(Synthetic, MapsAreUnitOrMasked) {
    SynthSpec s = small_room();
    s.jitter = 0.1f;
    const SynthScene sc = generate_synthetic(s, 4);
    ASSERT_EQ(sc.maps.size(), 3u);
    ASSERT_EQ(sc.cameras.size(), 3u);
    std::size_t labeled = 0;
    for (std::size_t v = 0; v < sc.maps.size(); ++v) {
        for (std::size_t p = 0; p < sc.maps[v].image.pixel_count(); ++p) {
            double n = 0;
            for (float x : sc.maps[v].image.pixel(p))
                n += double(x) * x;
            EXPECT_NEAR(n, sc.maps[v].valid[p] ? 1.0 : 0.0, 1e-5);
            EXPECT_EQ(sc.maps[v].valid[p] != 0, sc.labels[v][p] != kBackground);
            labeled += sc.labels[v][p] != kBackground;
        }
    }
    EXPECT_GT(labeled, 0u);
}

TEST(Synthetic, LookAtFramesTheTarget) {
    const Camera c = look_at({4, 0, 2}, {0, 0, 0}, 40, 30, 60, "c");
    c.validate();
    const Eigen::Vector3f x = c.R * Eigen::Vector3f::Zero() + c.t;
    EXPECT_NEAR(x.x(), 0.0f, 1e-5);
    EXPECT_NEAR(x.y(), 0.0f, 1e-5);
    EXPECT_GT(x.z(), 0.0f);
    const Eigen::Vector3f up = c.R * Eigen::Vector3f(0, 0, 5) + c.t;
    EXPECT_LT(up.y(), 0.0f);
    EXPECT_THROW(look_at({0, 0, 4}, {0, 0, 0}, 8, 8, 60, "top"), DataError);
}

TEST(Synthetic, SavedDatasetLayout) {
    test::TempDir dir;
    const SynthScene sc = generate_synthetic(small_room(), 5);
    save_synthetic(sc, dir.path());
    EXPECT_TRUE(std::filesystem::exists(dir / "scene.ply"));
    EXPECT_TRUE(std::filesystem::exists(dir / "cameras.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "queries.json"));
    for (std::size_t v = 0; v < sc.cameras.size(); ++v) {
        EXPECT_TRUE(std::filesystem::exists(feature_map_path(dir.path(), v)));
        EXPECT_TRUE(std::filesystem::exists(label_map_path(dir.path(), v)));
    }
    EXPECT_EQ(load_scene(dir / "scene.ply").size(), sc.donor.size());
    EXPECT_EQ(load_cameras(dir / "cameras.json").size(), sc.cameras.size());
    int h = 0, w = 0;
    EXPECT_EQ(load_label_map(label_map_path(dir.path(), 1), &h, &w), sc.labels[1]);
}

TEST(Synthetic, InvalidSpecsRejected) {
    SynthSpec s = small_room();
    s.clone_fraction = 1.5f;
    EXPECT_THROW(generate_synthetic(s, 0), DataError);
    s = small_room();
    s.boxes.push_back(s.boxes[1]);
    EXPECT_THROW(generate_synthetic(s, 0), DataError);
    s = small_room();
    s.boxes.clear();
    EXPECT_THROW(generate_synthetic(s, 0), DataError);
}
