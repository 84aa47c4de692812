// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <vector>

namespace featsplat {

/// Static 3D k-d tree for k-nearest-neighbor queries.
class KdTree {
public:
    KdTree() = default;
    explicit KdTree(std::vector<Eigen::Vector3f> points);

    std::size_t size() const { return points_.size(); }
    const Eigen::Vector3f &point(std::uint32_t i) const { return points_[i]; }

    /// Up to k indices ordered by (squared distance, index). Points rejected by
    /// `accept` are skipped and do not count toward k.
    std::vector<std::uint32_t> knn(const Eigen::Vector3f &query, std::size_t k,
                                   const std::function<bool(std::uint32_t)> &accept = {}) const;

private:
    struct Node {
        std::uint32_t begin = 0, end = 0; // range in order_
        std::int32_t left = -1, right = -1;
        int axis = 0;
        float split = 0.0f;
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);

    std::vector<Eigen::Vector3f> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
};

} // namespace featsplat
