// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/eval.hpp"

#include "featsplat/parallel.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/spatial.hpp"

#include <json.hpp>
#include <spdlog/fmt/fmt.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

namespace featsplat {

QuerySet load_queries(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open queries " + path.string());
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("query JSON: ") + e.what());
    }
    if (!j.is_object() || j.empty())
        throw FormatError("query JSON must be a non-empty object of name -> vector");

    QuerySet q;
    bool anyThreshold = false;
    try {
        for (const auto &[name, value] : j.items()) {
            std::vector<float> v;
            float threshold = std::numeric_limits<float>::quiet_NaN();
            if (value.is_object()) {
                v = value.at("vector").get<std::vector<float>>();
                if (value.contains("threshold")) {
                    threshold = value.at("threshold").get<float>();
                    anyThreshold = true;
                }
            } else {
                v = value.get<std::vector<float>>();
            }
            if (q.dim == 0)
                q.dim = static_cast<int>(v.size());
            if (v.empty() || static_cast<int>(v.size()) != q.dim)
                throw FormatError("query " + name + " has dimension " + std::to_string(v.size()) +
                                  ", expected " + std::to_string(q.dim));
            double n = 0.0;
            for (float x : v) {
                if (!std::isfinite(x))
                    throw FormatError("query " + name + " is not finite");
                n += static_cast<double>(x) * x;
            }
            if (n <= 0.0)
                throw DataError("query " + name + " is the zero vector");
            for (float &x : v)
                x = static_cast<float>(x / std::sqrt(n));
            q.names.push_back(name);
            q.vectors.insert(q.vectors.end(), v.begin(), v.end());
            q.thresholds.push_back(threshold);
        }
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("query JSON: ") + e.what());
    }
    if (!anyThreshold)
        q.thresholds.clear();
    return q;
}

void save_queries(const QuerySet &queries, const std::filesystem::path &path) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < queries.size(); ++k) {
        const auto v = queries.vector(k);
        std::vector<float> vec(v.begin(), v.end());
        if (!queries.thresholds.empty() && std::isfinite(queries.thresholds[k]))
            j[queries.names[k]] = {{"vector", vec}, {"threshold", queries.thresholds[k]}};
        else
            j[queries.names[k]] = vec;
    }
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write queries " + path.string());
    out << j.dump(2) << "\n";
}

std::vector<int> segment(const Image &features, const QuerySet &queries, const SegmentConfig &cfg) {
    if (features.channels != queries.dim)
        throw DataError("feature map dimension " + std::to_string(features.channels) +
                        " does not match the queries (" + std::to_string(queries.dim) + ")");
    const std::size_t P = features.pixel_count();
    const std::size_t Q = queries.size();
    std::vector<int> labels(P, kBackground);
    constexpr std::size_t kChunk = 1024;
    parallel_for((P + kChunk - 1) / kChunk, [&](std::size_t c) {
        const std::size_t end = std::min(P, (c + 1) * kChunk);
        for (std::size_t p = c * kChunk; p < end; ++p) {
            const auto f = features.pixel(p);
            double n = 0.0;
            for (float x : f)
                n += static_cast<double>(x) * x;
            if (n <= 0.0)
                continue;
            const double inv = 1.0 / std::sqrt(n);
            double best = -std::numeric_limits<double>::infinity();
            int arg = kBackground;
            for (std::size_t k = 0; k < Q; ++k) {
                const auto q = queries.vector(k);
                double dot = 0.0;
                for (int d = 0; d < queries.dim; ++d)
                    dot += static_cast<double>(f[d]) * q[d];
                const double sim = dot * inv;
                if (cfg.policy == SegmentPolicy::PerQueryThreshold) {
                    const float t = queries.thresholds.empty() || !std::isfinite(queries.thresholds[k])
                                        ? cfg.threshold
                                        : queries.thresholds[k];
                    if (sim < t)
                        continue;
                }
                if (sim > best) {
                    best = sim;
                    arg = static_cast<int>(k);
                }
            }
            if (cfg.policy == SegmentPolicy::Argmax && best < cfg.threshold)
                arg = kBackground;
            labels[p] = arg;
        }
    });
    return labels;
}

SegmentationScore::SegmentationScore(int labels)
    : labels_(labels), intersection_(labels, 0), predCount_(labels, 0), gtCount_(labels, 0) {
    if (labels <= 0)
        throw DataError("segmentation needs at least one label");
}

void SegmentationScore::add(std::span<const int> pred, std::span<const int> gt) {
    if (pred.size() != gt.size())
        throw DataError("prediction and ground truth differ in size");
    for (std::size_t p = 0; p < gt.size(); ++p) {
        const int g = gt[p];
        if (g == kBackground)
            continue;
        if (g < 0 || g >= labels_)
            throw DataError("ground-truth label " + std::to_string(g) + " is not declared");
        const int y = pred[p];
        ++labeled_;
        ++gtCount_[g];
        if (y >= 0 && y < labels_)
            ++predCount_[y];
        if (y == g) {
            ++intersection_[g];
            ++correct_;
        }
    }
}

double SegmentationScore::iou(int label) const {
    const std::size_t uni = gtCount_[label] + predCount_[label] - intersection_[label];
    if (uni == 0)
        return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(intersection_[label]) / static_cast<double>(uni);
}

double SegmentationScore::miou() const {
    double sum = 0.0;
    int n = 0;
    for (int l = 0; l < labels_; ++l) {
        const double v = iou(l);
        if (std::isnan(v))
            continue;
        sum += v;
        ++n;
    }
    return n ? sum / n : 0.0;
}

double SegmentationScore::accuracy() const {
    return labeled_ ? static_cast<double>(correct_) / static_cast<double>(labeled_) : 0.0;
}

SegmentationMetrics miou_accuracy(std::span<const int> pred, std::span<const int> gt, int labels) {
    SegmentationScore s(labels);
    s.add(pred, gt);
    if (s.labeled_pixels() == 0)
        throw DataError("ground truth has no labeled pixels");
    return {s.miou(), s.accuracy()};
}

// ---------------------------------------------------------------------------

std::vector<std::uint32_t> map_to_donor(std::span<const Eigen::Vector3f> targetPositions,
                                        std::span<const float> targetFeatures,
                                        std::span<const Eigen::Vector3f> donorPositions,
                                        std::span<const float> donorFeatures, int dim,
                                        std::size_t k) {
    if (targetPositions.empty())
        throw DataError("cannot map onto an empty scene");
    if (targetFeatures.size() != targetPositions.size() * dim ||
        donorFeatures.size() != donorPositions.size() * dim)
        throw DataError("feature arrays do not match the point counts");
    const KdTree tree(std::vector<Eigen::Vector3f>(targetPositions.begin(), targetPositions.end()));

    auto cosine = [dim](const float *a, const float *b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int d = 0; d < dim; ++d) {
            dot += static_cast<double>(a[d]) * b[d];
            na += static_cast<double>(a[d]) * a[d];
            nb += static_cast<double>(b[d]) * b[d];
        }
        return na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
    };

    std::vector<std::uint32_t> out(donorPositions.size());
    parallel_for(donorPositions.size(), [&](std::size_t i) {
        const auto nn = tree.knn(donorPositions[i], k);
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t arg = nn.front();
        for (std::uint32_t j : nn) {
            const double c = cosine(donorFeatures.data() + i * dim, targetFeatures.data() + j * dim);
            if (c > best || (c == best && j < arg)) {
                best = c;
                arg = j;
            }
        }
        out[i] = arg;
    });
    return out;
}

std::vector<std::uint32_t> map_to_donor(const GaussianScene &latentScene, const Autoencoder &ae,
                                        const GaussianScene &liftedDonor, std::size_t k) {
    if (latentScene.empty())
        throw DataError("cannot map onto an empty scene");
    if (liftedDonor.payload_dim != ae.feature_dim())
        throw DataError("donor features do not match the decoder dimension");
    Eigen::Map<const Eigen::MatrixXf> z(latentScene.payload.data(), latentScene.payload_dim,
                                        static_cast<Eigen::Index>(latentScene.size()));
    const Eigen::MatrixXf f = ae.decode(Eigen::MatrixXf(z));
    std::vector<Eigen::Vector3f> tp(latentScene.size()), dp(liftedDonor.size());
    for (std::size_t i = 0; i < tp.size(); ++i)
        tp[i] = latentScene.gaussians[i].position;
    for (std::size_t i = 0; i < dp.size(); ++i)
        dp[i] = liftedDonor.gaussians[i].position;
    return map_to_donor(tp, {f.data(), static_cast<std::size_t>(f.size())}, dp, liftedDonor.payload,
                        ae.feature_dim(), k);
}

std::vector<int> load_label_map(const std::filesystem::path &path, int *height, int *width) {
    const Image img = load_cffm_raw(path);
    if (img.channels != 1)
        throw FormatError("label map must have D = 1: " + path.string());
    std::vector<int> labels(img.data.size());
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const float v = img.data[p];
        if (v != std::round(v) || v < -1.0f)
            throw FormatError("label map holds a non-integer or negative id: " + path.string());
        labels[p] = static_cast<int>(v);
    }
    if (height)
        *height = img.height;
    if (width)
        *width = img.width;
    return labels;
}

void save_label_map(std::span<const int> labels, int height, int width,
                    const std::filesystem::path &path) {
    if (labels.size() != static_cast<std::size_t>(height) * width)
        throw DataError("label map size does not match its shape");
    Image img(height, width, 1);
    for (std::size_t p = 0; p < labels.size(); ++p)
        img.data[p] = static_cast<float>(labels[p]);
    save_cffm(img, path);
}

// ---------------------------------------------------------------------------

double measure_fps(const GaussianScene &scene, std::span<const Camera> cameras,
                   const Autoencoder *decoder, int repeats) {
    if (cameras.empty() || repeats < 1)
        return 0.0;
    const auto start = std::chrono::steady_clock::now();
    for (int r = 0; r < repeats; ++r) {
        for (const Camera &cam : cameras) {
            if (decoder)
                (void)render_feature(scene, cam, *decoder);
            else
                (void)render(scene, cam);
        }
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return s > 0.0 ? static_cast<double>(cameras.size() * repeats) / s : 0.0;
}

std::string compression_ratio(std::size_t donorBytes, std::size_t compactBytes) {
    if (compactBytes == 0)
        throw DataError("compact artifact has zero bytes");
    return fmt::format("{:.1f}", static_cast<double>(donorBytes) / static_cast<double>(compactBytes));
}

void write_report_csv(std::span<const RunReport> runs, const std::filesystem::path &path) {
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write " + path.string());
    out << "name,storage_bytes,fps,miou,accuracy,gaussians\n";
    for (const RunReport &r : runs)
        out << fmt::format("{},{},{:.3f},{:.6f},{:.6f},{}\n", r.name, r.storage_bytes, r.fps, r.miou,
                           r.accuracy, r.gaussians);
}

std::string format_report_table(std::span<const RunReport> runs) {
    std::string s = fmt::format("{:<16} {:>12} {:>9} {:>7} {:>7} {:>9}\n", "run", "storage", "fps",
                                "mIoU", "acc", "#G");
    for (const RunReport &r : runs) {
        const std::string storage =
            r.storage_bytes >= (1u << 20)
                ? fmt::format("{:.2f}M", r.storage_bytes / double(1 << 20))
                : fmt::format("{:.1f}K", r.storage_bytes / 1024.0);
        s += fmt::format("{:<16} {:>12} {:>9.1f} {:>7.3f} {:>7.3f} {:>9}\n", r.name, storage, r.fps,
                         r.miou, r.accuracy, r.gaussians);
    }
    return s;
}

} // namespace featsplat
