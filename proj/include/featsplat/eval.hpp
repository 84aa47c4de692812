// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/autoencoder.hpp"
#include "featsplat/scene.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace featsplat {

constexpr int kBackground = -1;

/// Named unit query vectors; label k refers to names[k].
struct QuerySet {
    int dim = 0;
    std::vector<std::string> names;
    std::vector<float> vectors;    // Q x dim
    std::vector<float> thresholds; // optional per-query thresholds

    std::size_t size() const { return names.size(); }
    std::span<const float> vector(std::size_t k) const {
        return {vectors.data() + k * dim, static_cast<std::size_t>(dim)};
    }
};

/// JSON object {name: [floats]}; vectors are normalized on load, key order is kept.
QuerySet load_queries(const std::filesystem::path &path);
void save_queries(const QuerySet &queries, const std::filesystem::path &path);

enum class SegmentPolicy { Argmax, PerQueryThreshold };

struct SegmentConfig {
    SegmentPolicy policy = SegmentPolicy::Argmax;
    float threshold = 0.5f; // background when the best similarity falls below
};

/// Per-pixel label (query index or kBackground) by cosine similarity.
std::vector<int> segment(const Image &features, const QuerySet &queries,
                         const SegmentConfig &cfg = {});

/// Confusion counts accumulated over any number of views.
class SegmentationScore {
public:
    explicit SegmentationScore(int labels);

    /// Pixels whose ground truth is kBackground are ignored.
    void add(std::span<const int> pred, std::span<const int> gt);

    double miou() const;
    double accuracy() const;
    double iou(int label) const; // NaN when the label occurs in neither map
    std::size_t labeled_pixels() const { return labeled_; }

private:
    int labels_;
    std::vector<std::size_t> intersection_, predCount_, gtCount_;
    std::size_t labeled_ = 0, correct_ = 0;
};

struct SegmentationMetrics {
    double miou = 0.0;
    double accuracy = 0.0;
};

SegmentationMetrics miou_accuracy(std::span<const int> pred, std::span<const int> gt, int labels);

/// For every donor Gaussian, among its k nearest points of `target` pick the one whose
/// feature has the highest cosine to the donor feature (ties to the lower index).
std::vector<std::uint32_t> map_to_donor(std::span<const Eigen::Vector3f> targetPositions,
                                        std::span<const float> targetFeatures,
                                        std::span<const Eigen::Vector3f> donorPositions,
                                        std::span<const float> donorFeatures, int dim,
                                        std::size_t k = 3);

/// Latent scene against a lifted donor; latents are decoded before comparison.
std::vector<std::uint32_t> map_to_donor(const GaussianScene &latentScene, const Autoencoder &ae,
                                        const GaussianScene &liftedDonor, std::size_t k = 3);

/// GT labels stored as CFFM with D = 1 (float label ids, -1 background).
std::vector<int> load_label_map(const std::filesystem::path &path, int *height = nullptr,
                                int *width = nullptr);
void save_label_map(std::span<const int> labels, int height, int width,
                    const std::filesystem::path &path);

struct RunReport {
    std::string name;
    std::size_t storage_bytes = 0;
    double fps = 0.0;
    double miou = 0.0;
    double accuracy = 0.0;
    std::size_t gaussians = 0;
};

/// Frames per second rendering every camera once (decoding included when `decoder` is set).
double measure_fps(const GaussianScene &scene, std::span<const Camera> cameras,
                   const Autoencoder *decoder, int repeats = 1);

/// donor / compact, formatted with one decimal.
std::string compression_ratio(std::size_t donorBytes, std::size_t compactBytes);

void write_report_csv(std::span<const RunReport> runs, const std::filesystem::path &path);
std::string format_report_table(std::span<const RunReport> runs);

} // namespace featsplat
