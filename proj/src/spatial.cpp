// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/spatial.hpp"

#include <algorithm>
#include <numeric>
#include <queue>
#include <utility>

namespace featsplat {

namespace {
constexpr std::uint32_t kLeafSize = 16;
}

KdTree::KdTree(std::vector<Eigen::Vector3f> points) : points_(std::move(points)) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (!points_.empty())
        build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({begin, end, -1, -1, 0, 0.0f});
    if (end - begin <= kLeafSize)
        return id;

    Eigen::Vector3f lo = points_[order_[begin]], hi = lo;
    for (std::uint32_t k = begin; k < end; ++k) {
        lo = lo.cwiseMin(points_[order_[k]]);
        hi = hi.cwiseMax(points_[order_[k]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                         if (points_[a][axis] != points_[b][axis])
                             return points_[a][axis] < points_[b][axis];
                         return a < b;
                     });
    const float split = points_[order_[mid]][axis];
    const std::int32_t left = build(begin, mid);
    const std::int32_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

std::vector<std::uint32_t> KdTree::knn(const Eigen::Vector3f &query, std::size_t k,
                                       const std::function<bool(std::uint32_t)> &accept) const {
    std::vector<std::uint32_t> result;
    if (k == 0 || nodes_.empty())
        return result;

    using Candidate = std::pair<float, std::uint32_t>; // (squared distance, index)
    std::priority_queue<Candidate> best;               // max-heap: worst on top

    auto visit = [&](auto &&self, std::int32_t nodeId) -> void {
        const Node &node = nodes_[nodeId];
        if (node.left < 0) {
            for (std::uint32_t o = node.begin; o < node.end; ++o) {
                const std::uint32_t i = order_[o];
                if (accept && !accept(i))
                    continue;
                const Candidate c{(points_[i] - query).squaredNorm(), i};
                if (best.size() < k) {
                    best.push(c);
                } else if (c < best.top()) {
                    best.pop();
                    best.push(c);
                }
            }
            return;
        }
        const float diff = query[node.axis] - node.split;
        const std::int32_t nearChild = diff < 0 ? node.left : node.right;
        const std::int32_t farChild = diff < 0 ? node.right : node.left;
        self(self, nearChild);
        // Points equal to the split may sit on either side, hence <=.
        if (best.size() < k || diff * diff <= best.top().first)
            self(self, farChild);
    };
    visit(visit, 0);

    result.resize(best.size());
    for (std::size_t n = best.size(); n-- > 0;) {
        result[n] = best.top().second;
        best.pop();
    }
    return result;
}

} // namespace featsplat
