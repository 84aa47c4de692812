// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/spatial.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace featsplat;

namespace {

std::vector<std::uint32_t> brute_knn(const std::vector<Eigen::Vector3f> &pts, const Eigen::Vector3f &q,
                                     std::size_t k, const std::function<bool(std::uint32_t)> &accept) {
    std::vector<std::uint32_t> idx;
    for (std::uint32_t i = 0; i < pts.size(); ++i)
        if (!accept || accept(i))
            idx.push_back(i);
    std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
        const float da = (pts[a] - q).squaredNorm(), db = (pts[b] - q).squaredNorm();
        return da != db ? da < db : a < b;
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

} // namespace

TEST(KdTree, MatchesBruteForce) {
    std::mt19937 rng(1);
    std::uniform_real_distribution<float> u(-1, 1);
    std::vector<Eigen::Vector3f> pts(3000);
    for (auto &p : pts)
        p = {u(rng), u(rng), u(rng)};
    const KdTree tree(pts);
    for (int t = 0; t < 200; ++t) {
        const Eigen::Vector3f q(u(rng), u(rng), u(rng));
        for (std::size_t k : {1u, 3u, 8u, 40u})
            EXPECT_EQ(tree.knn(q, k), brute_knn(pts, q, k, {}));
    }
}

TEST(KdTree, DuplicatePointsOrderedByIndex) {
    std::vector<Eigen::Vector3f> pts(50, Eigen::Vector3f(0.5f, 0.5f, 0.5f));
    pts.push_back({0, 0, 0});
    const KdTree tree(pts);
    const auto r = tree.knn({0.5f, 0.5f, 0.5f}, 5);
    EXPECT_EQ(r, (std::vector<std::uint32_t>{0, 1, 2, 3, 4}));
}

TEST(KdTree, AcceptFilterSkipsWithoutCounting) {
    std::mt19937 rng(2);
    std::uniform_real_distribution<float> u(0, 1);
    std::vector<Eigen::Vector3f> pts(500);
    for (auto &p : pts)
        p = {u(rng), u(rng), u(rng)};
    const KdTree tree(pts);
    auto odd = [](std::uint32_t i) { return i % 2 == 1; };
    for (int t = 0; t < 50; ++t) {
        const Eigen::Vector3f q(u(rng), u(rng), u(rng));
        const auto r = tree.knn(q, 8, odd);
        EXPECT_EQ(r.size(), 8u);
        EXPECT_EQ(r, brute_knn(pts, q, 8, odd));
    }
}

TEST(KdTree, SmallAndEmpty) {
    const KdTree empty(std::vector<Eigen::Vector3f>{});
    EXPECT_TRUE(empty.knn({0, 0, 0}, 3).empty());
    const KdTree two(std::vector<Eigen::Vector3f>{{1, 0, 0}, {0, 0, 0}});
    EXPECT_EQ(two.knn({0.1f, 0, 0}, 5), (std::vector<std::uint32_t>{1, 0}));
}
