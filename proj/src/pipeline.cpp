// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/pipeline.hpp"

#include "featsplat/rasterizer.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <random>

namespace featsplat {

void PipelineConfig::apply_seed() {
    train.seed = seed;
    sparsify.seed = seed + 1;
    vq.seed = seed + 2;
}

std::vector<FeatureMap> load_feature_maps(const std::filesystem::path &dir, std::size_t count) {
    std::vector<FeatureMap> maps;
    maps.reserve(count);
    for (std::size_t v = 0; v < count; ++v) {
        char name[32];
        std::snprintf(name, sizeof(name), "%03zu.cffm", v);
        maps.push_back(load_feature_map(dir / name));
    }
    return maps;
}

std::vector<std::vector<int>> load_label_maps(const std::filesystem::path &dir,
                                              std::span<const Camera> cameras) {
    std::vector<std::vector<int>> out;
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        char name[32];
        std::snprintf(name, sizeof(name), "%03zu.cffm", v);
        int h = 0, w = 0;
        out.push_back(load_label_map(dir / name, &h, &w));
        if (h != cameras[v].height || w != cameras[v].width)
            throw DataError(std::string("label map ") + name + " does not match camera resolution");
    }
    return out;
}

SegmentationMetrics evaluate_scene(const GaussianScene &scene, const Autoencoder *decoder,
                                   std::span<const Camera> cameras, const QuerySet &queries,
                                   std::span<const std::vector<int>> labels,
                                   const SegmentConfig &cfg) {
    if (labels.size() != cameras.size())
        throw DataError("evaluation needs one label map per camera");
    SegmentationScore score(static_cast<int>(queries.size()));
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        Image features;
        if (scene.payload_dim == queries.dim) {
            features = render(scene, cameras[v]).image;
        } else {
            if (!decoder)
                throw DataError("a latent scene needs a decoder for evaluation");
            features = render_feature(scene, cameras[v], *decoder);
        }
        score.add(segment(features, queries, cfg), labels[v]);
    }
    if (score.labeled_pixels() == 0)
        throw DataError("ground truth has no labeled pixels");
    return {score.miou(), score.accuracy()};
}

double decoded_feature_l1(const GaussianScene &scene, const Autoencoder &decoder,
                          std::span<const Camera> cameras, std::span<const Image> target,
                          const RasterConfig &raster) {
    if (target.size() != cameras.size())
        throw DataError("one target image per camera expected");
    double sum = 0.0;
    std::size_t pixels = 0;
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        const Image f = render_feature(scene, cameras[v], decoder, raster);
        if (f.data.size() != target[v].data.size())
            throw DataError("target image does not match the decoded render");
        for (std::size_t k = 0; k < f.data.size(); ++k)
            sum += std::abs(static_cast<double>(f.data[k]) - target[v].data[k]);
        pixels += f.pixel_count();
    }
    return sum / static_cast<double>(pixels);
}

namespace {

std::size_t scene_file_bytes(const GaussianScene &scene, const std::filesystem::path *outDir,
                             const char *name) {
    if (outDir)
        return std::filesystem::file_size(*outDir / name);
    std::random_device rd;
    const auto tmp = std::filesystem::temp_directory_path() /
                     ("featsplat_" + std::to_string(rd()) + "_" + name);
    save_scene(scene, tmp);
    const std::size_t bytes = std::filesystem::file_size(tmp);
    std::filesystem::remove(tmp);
    return bytes;
}

} // namespace

PipelineResult run_pipeline(const PipelineInputs &in, const PipelineConfig &cfg,
                            const std::filesystem::path *outDir) {
    if (outDir)
        std::filesystem::create_directories(*outDir);
    PipelineResult res;

    spdlog::info("lift: {} Gaussians, {} views", in.donor.size(), in.cameras.size());
    res.field = variance_filter(lift(in.donor, in.cameras, in.maps, cfg.lift), cfg.variance_fraction);
    res.lifted = lifted_scene(in.donor, res.field);
    spdlog::info("lift: kept {} Gaussians", res.lifted.size());
    if (res.lifted.empty())
        throw DataError("lifting kept no Gaussians");
    if (outDir) {
        save_scene(res.lifted, *outDir / artifacts::kLifted);
        save_lift_sidecar(res.field, *outDir / artifacts::kLiftStats);
    }

    spdlog::info("train-ae: D = {}, {} features", res.lifted.payload_dim, res.lifted.size());
    TrainResult tr = train_autoencoder(res.lifted.payload, res.lifted.payload_dim, cfg.train);
    if (tr.diverged)
        throw NumericalError("autoencoder training diverged");
    res.autoencoder = std::move(tr.model);
    if (outDir)
        res.autoencoder.save(*outDir / artifacts::kAutoencoder);

    spdlog::info("sparsify: {} iterations", cfg.sparsify.max_iterations);
    res.sparse = sparsify(res.lifted, res.autoencoder, in.cameras, cfg.sparsify);
    if (outDir) {
        save_scene(res.sparse.scene, *outDir / artifacts::kCompact);
        write_progress_csv(res.sparse.progress, *outDir / artifacts::kProgress);
    }
    if (res.sparse.aborted)
        throw NumericalError("sparsification aborted: " + res.sparse.error);
    spdlog::info("sparsify: {} -> {} Gaussians in {:.1f} s", res.lifted.size(),
                 res.sparse.scene.size(), res.sparse.wall_seconds);

    if (cfg.quantize) {
        res.bundle = quantize_scene(res.sparse.scene, cfg.vq);
        if (outDir)
            save_bundle(*res.bundle, *outDir / artifacts::kBundle);
    }

    const bool canEvaluate = in.queries && in.labels.size() == in.cameras.size();
    auto make_row = [&](const char *name, const GaussianScene &scene, std::size_t bytes,
                        const Autoencoder *decoder) {
        RunReport r;
        r.name = name;
        r.storage_bytes = bytes;
        r.gaussians = scene.size();
        r.fps = measure_fps(scene, in.cameras, decoder);
        if (canEvaluate) {
            const SegmentationMetrics m =
                evaluate_scene(scene, decoder, in.cameras, *in.queries, in.labels, cfg.segment);
            r.miou = m.miou;
            r.accuracy = m.accuracy;
        }
        return r;
    };
    res.reports.push_back(
        make_row("lifted", res.lifted, scene_file_bytes(res.lifted, outDir, artifacts::kLifted), nullptr));
    res.reports.push_back(make_row("cf3", res.sparse.scene,
                                   scene_file_bytes(res.sparse.scene, outDir, artifacts::kCompact),
                                   &res.autoencoder));
    if (res.bundle) {
        const GaussianScene dq = dequantize(*res.bundle);
        res.reports.push_back(make_row("cf3+vq", dq,
                                       bundle_bytes(res.bundle->size(), res.bundle->geometry.size(),
                                                    res.bundle->latent.size(),
                                                    res.bundle->half_positions),
                                       &res.autoencoder));
    }
    if (outDir)
        write_report_csv(res.reports, *outDir / artifacts::kReport);
    return res;
}

} // namespace featsplat
