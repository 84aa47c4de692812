// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/image_io.hpp"
#include "featsplat/parallel.hpp"
#include "featsplat/pipeline.hpp"
#include "featsplat/rasterizer.hpp"
#include "featsplat/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace featsplat;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

void error_line(const char *kind, int code, const std::string &message) {
    nlohmann::json j = {{"error", kind}, {"code", code}, {"message", message}};
    std::cerr << j.dump() << std::endl;
}

// ---------------------------------------------------------------------------
// Flag groups shared by the stage commands and run-all

void add_raster_flags(CLI::App *app, RasterConfig &rc) {
    app->add_option("--tile-size", rc.tile_size, "Rasterizer tile edge in pixels")->check(CLI::PositiveNumber);
    app->add_option("--weight-cutoff", rc.weight_capture_min, "Smallest blend weight kept in weight buffers");
}

void add_lift_flags(CLI::App *app, PipelineConfig &pc) {
    app->add_option("--variance-fraction", pc.variance_fraction,
                    "Fraction of highest-variance Gaussians removed after lifting")
        ->check(CLI::Range(0.0, 1.0));
    static const std::map<std::string, FeatureSampling> sampling{
        {"nearest", FeatureSampling::Nearest}, {"bilinear", FeatureSampling::Bilinear}};
    app->add_option("--sampling", pc.lift.sampling, "Feature map lookup: nearest or bilinear")
        ->transform(CLI::CheckedTransformer(sampling, CLI::ignore_case));
}

void add_train_flags(CLI::App *app, TrainConfig &tc) {
    app->add_option("--widths", tc.encoder_widths, "Encoder layer widths; the last one is the latent size")
        ->delimiter(',');
    app->add_option("--lambda-cos", tc.lambda_cos, "Weight of the cosine loss");
    app->add_option("--lambda-struc", tc.lambda_struc, "Weight of the structure loss");
    app->add_option("--batch-size", tc.batch_size, "Training batch size")->check(CLI::PositiveNumber);
    app->add_option("--lr", tc.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
    app->add_option("--lr-final", tc.lr_final_fraction, "Cosine-annealed final learning rate as a fraction of --lr")
        ->check(CLI::Range(1e-9, 1.0));
    app->add_option("--beta1", tc.beta1, "Adam beta1");
    app->add_option("--beta2", tc.beta2, "Adam beta2");
    app->add_option("--adam-eps", tc.epsilon, "Adam epsilon");
    app->add_option("--epochs", tc.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    app->add_option("--pairs", tc.pairs_per_sample, "Structure pairs per batch element");
}

void add_sparsify_flags(CLI::App *app, SparsifyConfig &sc) {
    app->add_option("--iterations", sc.max_iterations, "Optimization iterations")->check(CLI::NonNegativeNumber);
    app->add_option("--merge-interval", sc.merge_interval, "Iterations between merge passes")
        ->check(CLI::PositiveNumber);
    app->add_option("--prune-at", sc.prune_iterations, "Iterations at which pruning runs")->delimiter(',');
    app->add_option("--tau-con", sc.tau_con, "Minimum global contribution kept by pruning");
    app->add_option("--tau-sim", sc.tau_sim, "Latent cosine required to merge");
    app->add_option("--tau-grad", sc.tau_grad, "Averaged screen-space gradient below which merging is allowed");
    app->add_option("--chi2", sc.chi2, "Mahalanobis merge gate");
    app->add_option("--neighbors", sc.k_neighbors, "Merge candidates per Gaussian")->check(CLI::PositiveNumber);
    app->add_option("--lambda-depth", sc.lambda_depth, "Weight of the depth loss");
    app->add_option("--grad-momentum", sc.grad_momentum, "Momentum of the gradient running average");
    app->add_option("--lr-position", sc.lr_position, "Position step, multiplied by the scene extent");
    app->add_option("--lr-scale", sc.lr_scale, "Log-scale step");
    app->add_option("--lr-rotation", sc.lr_rotation, "Rotation step");
    app->add_option("--lr-opacity", sc.lr_opacity, "Opacity-logit step");
    app->add_option("--lr-latent", sc.lr_latent, "Latent payload step");
    app->add_flag("!--no-prune", sc.enable_prune, "Disable pruning");
    app->add_flag("!--no-merge", sc.enable_merge, "Disable merging");
    app->add_flag("!--latent-loss", sc.decoded_loss, "Compare raw latents instead of decoded features");
    app->add_flag("--decoded-similarity", sc.decoded_similarity, "Gate merges on decoded-feature cosine");
}

void add_vq_flags(CLI::App *app, QuantizeConfig &qc) {
    app->add_option("--k-geometry", qc.k_geometry, "Scale+rotation codebook size")->check(CLI::PositiveNumber);
    app->add_option("--k-latent", qc.k_latent, "Latent codebook size")->check(CLI::PositiveNumber);
    app->add_option("--kmeans-iterations", qc.iterations, "Lloyd iterations")->check(CLI::PositiveNumber);
    app->add_flag("--half-positions", qc.half_positions, "Store positions as float16");
}

void add_segment_flags(CLI::App *app, SegmentConfig &sc) {
    app->add_option("--threshold", sc.threshold, "Background threshold on query cosine");
    static const std::map<std::string, SegmentPolicy> policy{
        {"argmax", SegmentPolicy::Argmax}, {"per-query", SegmentPolicy::PerQueryThreshold}};
    app->add_option("--policy", sc.policy, "argmax or per-query")
        ->transform(CLI::CheckedTransformer(policy, CLI::ignore_case));
}

// ---------------------------------------------------------------------------

struct Paths {
    fs::path scene, cameras, features, labels, queries, autoencoder, bundle, out, stats, progress, report;
    int view = -1;
};

void print_info(const fs::path &path) {
    const GaussianScene s = load_scene(path);
    const SceneBounds b = scene_bounds(s);
    std::cout << "file          " << path.string() << "\n"
              << "gaussians     " << s.size() << "\n"
              << "payload_dim   " << s.payload_dim << "\n"
              << "stage         " << stage_name(s.meta.stage) << "\n"
              << "source        " << s.meta.source << "\n"
              << "bytes         " << fs::file_size(path) << "\n"
              << fmt::format("bounds_min    {:.4f} {:.4f} {:.4f}\n", b.min.x(), b.min.y(), b.min.z())
              << fmt::format("bounds_max    {:.4f} {:.4f} {:.4f}\n", b.max.x(), b.max.y(), b.max.z())
              << fmt::format("extent        {:.4f}\n", b.extent);
}

PipelineInputs load_inputs(const Paths &p, bool withEval) {
    PipelineInputs in;
    in.donor = load_scene(p.scene);
    in.cameras = load_cameras(p.cameras);
    in.maps = load_feature_maps(p.features, in.cameras.size());
    if (withEval) {
        in.queries = load_queries(p.queries);
        in.labels = load_label_maps(p.labels, in.cameras);
    }
    return in;
}

GaussianScene load_renderable(const Paths &p) {
    if (!p.bundle.empty())
        return dequantize(load_bundle(p.bundle));
    return load_scene(p.scene);
}

} // namespace

int main(int argc, char **argv) {
    auto logger = spdlog::stderr_color_mt("featsplat");
    spdlog::set_default_logger(logger);

    CLI::App app{"Compact feature fields for Gaussian splatting scenes"};
    app.option_defaults()->always_capture_default();
    app.set_config("--config", "", "key=value config file; command-line flags take precedence");
    app.require_subcommand(1);

    unsigned threads = 0;
    std::uint64_t seed = 0;
    std::string logLevel = "info";
    app.add_option("--threads", threads, "Worker threads (0 = all cores)");
    app.add_option("--seed", seed, "Seed for every random choice");
    app.add_option("--log-level", logLevel, "trace, debug, info, warn, error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    PipelineConfig pc;
    Paths p;
    SynthSpec synth = SynthSpec::room();

    auto *synthCmd = app.add_subcommand("synth", "Generate the synthetic room dataset");
    synthCmd->add_option("--out", p.out, "Output directory")->required();
    synthCmd->add_option("--clone-fraction", synth.clone_fraction, "Share of Gaussians duplicated")
        ->check(CLI::Range(0.0, 1.0));
    synthCmd->add_option("--jitter", synth.jitter, "Feature noise std dev");
    synthCmd->add_option("--cameras", synth.camera_count, "Number of orbit views")->check(CLI::PositiveNumber);
    synthCmd->add_option("--width", synth.width, "Image width")->check(CLI::PositiveNumber);
    synthCmd->add_option("--height", synth.height, "Image height")->check(CLI::PositiveNumber);
    synthCmd->add_option("--spacing", synth.spacing, "Surface sample spacing")->check(CLI::PositiveNumber);
    synthCmd->add_option("--footprint", synth.footprint, "Gaussian std dev relative to the spacing")
        ->check(CLI::PositiveNumber);
    synthCmd->add_option("--feature-dim", synth.feature_dim, "Feature dimension")->check(CLI::PositiveNumber);

    auto *infoCmd = app.add_subcommand("info", "Print scene statistics");
    infoCmd->add_option("scene", p.scene, "Scene PLY")->required()->check(CLI::ExistingFile);

    auto *liftCmd = app.add_subcommand("lift", "Fuse feature maps onto a donor scene");
    liftCmd->add_option("--scene", p.scene, "Donor scene PLY")->required()->check(CLI::ExistingFile);
    liftCmd->add_option("--cameras", p.cameras, "Camera JSON")->required()->check(CLI::ExistingFile);
    liftCmd->add_option("--features", p.features, "Directory of NNN.cffm maps")->required()->check(CLI::ExistingDirectory);
    liftCmd->add_option("--out", p.out, "Lifted scene PLY")->required();
    liftCmd->add_option("--stats", p.stats, "Variance/contribution sidecar (default: <out>.stats.cffm)");
    add_lift_flags(liftCmd, pc);
    add_raster_flags(liftCmd, pc.lift.raster);

    auto *trainCmd = app.add_subcommand("train-ae", "Train the feature autoencoder");
    trainCmd->add_option("--lifted", p.scene, "Lifted scene PLY")->required()->check(CLI::ExistingFile);
    trainCmd->add_option("--out", p.out, "Checkpoint path")->required();
    add_train_flags(trainCmd, pc.train);

    auto *sparseCmd = app.add_subcommand("sparsify", "Prune and merge the encoded scene");
    sparseCmd->add_option("--lifted", p.scene, "Lifted scene PLY")->required()->check(CLI::ExistingFile);
    sparseCmd->add_option("--autoencoder", p.autoencoder, "Checkpoint")->required()->check(CLI::ExistingFile);
    sparseCmd->add_option("--cameras", p.cameras, "Camera JSON")->required()->check(CLI::ExistingFile);
    sparseCmd->add_option("--out", p.out, "Compact latent scene PLY")->required();
    sparseCmd->add_option("--progress", p.progress, "Progress CSV");
    add_sparsify_flags(sparseCmd, pc.sparsify);
    add_raster_flags(sparseCmd, pc.sparsify.raster);

    auto *vqCmd = app.add_subcommand("quantize", "Vector-quantize a latent scene");
    vqCmd->add_option("--scene", p.scene, "Latent scene PLY")->required()->check(CLI::ExistingFile);
    vqCmd->add_option("--out", p.out, "Bundle path")->required();
    add_vq_flags(vqCmd, pc.vq);

    auto *renderCmd = app.add_subcommand("render", "Render views of a scene or bundle");
    auto *sceneOpt = renderCmd->add_option("--scene", p.scene, "Scene PLY")->check(CLI::ExistingFile);
    auto *bundleOpt = renderCmd->add_option("--bundle", p.bundle, "Quantized bundle")->check(CLI::ExistingFile);
    sceneOpt->excludes(bundleOpt);
    renderCmd->add_option("--cameras", p.cameras, "Camera JSON")->required()->check(CLI::ExistingFile);
    renderCmd->add_option("--autoencoder", p.autoencoder, "Decode latents with this checkpoint")
        ->check(CLI::ExistingFile);
    renderCmd->add_option("--view", p.view, "Render only this view index");
    renderCmd->add_option("--out", p.out, "Output directory")->required();

    auto *evalCmd = app.add_subcommand("eval", "Query segmentation metrics and report");
    auto *evalScene = evalCmd->add_option("--scene", p.scene, "Scene PLY")->check(CLI::ExistingFile);
    auto *evalBundle = evalCmd->add_option("--bundle", p.bundle, "Quantized bundle")->check(CLI::ExistingFile);
    evalScene->excludes(evalBundle);
    evalCmd->add_option("--autoencoder", p.autoencoder, "Decoder for latent scenes")->check(CLI::ExistingFile);
    evalCmd->add_option("--cameras", p.cameras, "Camera JSON")->required()->check(CLI::ExistingFile);
    evalCmd->add_option("--queries", p.queries, "Query JSON")->required()->check(CLI::ExistingFile);
    evalCmd->add_option("--labels", p.labels, "Directory of NNN.cffm label maps")->required()->check(CLI::ExistingDirectory);
    evalCmd->add_option("--report", p.report, "Append the result to this CSV");
    add_segment_flags(evalCmd, pc.segment);

    auto *runCmd = app.add_subcommand("run-all", "lift, filter, train, sparsify, quantize, eval");
    runCmd->add_option("--scene", p.scene, "Donor scene PLY")->required()->check(CLI::ExistingFile);
    runCmd->add_option("--cameras", p.cameras, "Camera JSON")->required()->check(CLI::ExistingFile);
    runCmd->add_option("--features", p.features, "Directory of NNN.cffm maps")->required()->check(CLI::ExistingDirectory);
    auto *labelsOpt = runCmd->add_option("--labels", p.labels, "Directory of NNN.cffm label maps")
                          ->check(CLI::ExistingDirectory);
    auto *queriesOpt = runCmd->add_option("--queries", p.queries, "Query JSON")->check(CLI::ExistingFile);
    labelsOpt->needs(queriesOpt);
    queriesOpt->needs(labelsOpt);
    runCmd->add_option("--out", p.out, "Output directory")->required();
    runCmd->add_flag("--quantize", pc.quantize, "Also write the vector-quantized bundle");
    add_lift_flags(runCmd, pc);
    add_train_flags(runCmd, pc.train);
    add_sparsify_flags(runCmd, pc.sparsify);
    add_vq_flags(runCmd, pc.vq);
    add_segment_flags(runCmd, pc.segment);
    add_raster_flags(runCmd, pc.lift.raster);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        error_line("usage", kUsage, e.what());
        return kUsage;
    }

    spdlog::set_level(spdlog::level::from_str(logLevel));
    set_num_threads(threads);
    pc.seed = seed;
    pc.apply_seed();
    pc.sparsify.raster = pc.lift.raster;
    std::string effective = fmt::format("threads={}\nseed={}\nlog-level=\"{}\"\n", threads, seed, logLevel);
    for (const CLI::App *sub : app.get_subcommands())
        effective += "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
    spdlog::info("effective configuration:\n{}", effective);

    try {
        if (*synthCmd) {
            const SynthScene s = generate_synthetic(synth, seed);
            save_synthetic(s, p.out);
            spdlog::info("synth: {} Gaussians, {} views written to {}", s.donor.size(),
                         s.cameras.size(), p.out.string());
        } else if (*infoCmd) {
            print_info(p.scene);
        } else if (*liftCmd) {
            const PipelineInputs in = load_inputs(p, false);
            const LiftedField field =
                variance_filter(lift(in.donor, in.cameras, in.maps, pc.lift), pc.variance_fraction);
            const GaussianScene lifted = lifted_scene(in.donor, field);
            save_scene(lifted, p.out);
            save_lift_sidecar(field, p.stats.empty() ? fs::path(p.out.string() + ".stats.cffm") : p.stats);
            spdlog::info("lift: kept {} of {} Gaussians", lifted.size(), in.donor.size());
        } else if (*trainCmd) {
            const GaussianScene lifted = load_scene(p.scene);
            const TrainResult tr = train_autoencoder(lifted.payload, lifted.payload_dim, pc.train);
            tr.model.save(p.out);
            if (tr.diverged)
                throw NumericalError("training diverged; last finite checkpoint written");
            const LossTerms &last = tr.epoch_loss.back();
            spdlog::info("train-ae: final loss {:.6f} (mse {:.6f}, cos {:.6f}, struc {:.6f})", last.total,
                         last.mse, last.cos, last.struc);
        } else if (*sparseCmd) {
            const GaussianScene lifted = load_scene(p.scene);
            const Autoencoder ae = Autoencoder::load(p.autoencoder);
            const std::vector<Camera> cams = load_cameras(p.cameras);
            const SparsifyResult r = sparsify(lifted, ae, cams, pc.sparsify);
            save_scene(r.scene, p.out);
            if (!p.progress.empty())
                write_progress_csv(r.progress, p.progress);
            if (r.aborted)
                throw NumericalError("sparsification aborted, partial scene written: " + r.error);
            spdlog::info("sparsify: {} -> {} Gaussians in {:.1f} s", lifted.size(), r.scene.size(),
                         r.wall_seconds);
        } else if (*vqCmd) {
            const GaussianScene s = load_scene(p.scene);
            const VqBundle b = quantize_scene(s, pc.vq);
            save_bundle(b, p.out);
            spdlog::info("quantize: {} bytes ({} Gaussians, codebooks {} / {})", fs::file_size(p.out),
                         b.size(), b.geometry.size(), b.latent.size());
        } else if (*renderCmd) {
            if (p.scene.empty() && p.bundle.empty())
                throw CLI::RequiredError("--scene or --bundle");
            const GaussianScene s = load_renderable(p);
            const std::vector<Camera> cams = load_cameras(p.cameras);
            std::optional<Autoencoder> ae;
            if (!p.autoencoder.empty())
                ae = Autoencoder::load(p.autoencoder);
            fs::create_directories(p.out);
            for (std::size_t v = 0; v < cams.size(); ++v) {
                if (p.view >= 0 && static_cast<std::size_t>(p.view) != v)
                    continue;
                const RenderOutput r = render(s, cams[v]);
                const std::string stem = fmt::format("{:03d}", v);
                if (r.image.channels == 3)
                    save_png(r.image, p.out / (stem + ".png"));
                save_cffm(ae ? ae->decode_image(r.image) : r.image, p.out / (stem + ".cffm"));
                save_cffm(r.depth, p.out / (stem + "_depth.cffm"));
            }
            if (p.view >= static_cast<int>(cams.size()))
                throw DataError("view index out of range");
        } else if (*evalCmd) {
            if (p.scene.empty() && p.bundle.empty())
                throw CLI::RequiredError("--scene or --bundle");
            const GaussianScene s = load_renderable(p);
            const std::vector<Camera> cams = load_cameras(p.cameras);
            std::optional<Autoencoder> ae;
            if (!p.autoencoder.empty())
                ae = Autoencoder::load(p.autoencoder);
            const QuerySet q = load_queries(p.queries);
            const auto labels = load_label_maps(p.labels, cams);
            const SegmentationMetrics m =
                evaluate_scene(s, ae ? &*ae : nullptr, cams, q, labels, pc.segment);
            RunReport r;
            r.name = (p.bundle.empty() ? p.scene : p.bundle).filename().string();
            r.storage_bytes = fs::file_size(p.bundle.empty() ? p.scene : p.bundle);
            r.gaussians = s.size();
            r.fps = measure_fps(s, cams, ae ? &*ae : nullptr);
            r.miou = m.miou;
            r.accuracy = m.accuracy;
            std::cout << format_report_table(std::span<const RunReport>(&r, 1));
            if (!p.report.empty())
                write_report_csv(std::span<const RunReport>(&r, 1), p.report);
        } else if (*runCmd) {
            const PipelineInputs in = load_inputs(p, !p.labels.empty());
            const PipelineResult r = run_pipeline(in, pc, &p.out);
            std::cout << format_report_table(r.reports);
            const std::size_t donorBytes = fs::file_size(p.scene);
            std::cout << "compression vs donor: "
                      << compression_ratio(donorBytes, r.reports[1].storage_bytes) << "x\n";
        }
    } catch (const CLI::Error &e) {
        error_line("usage", kUsage, e.what());
        return kUsage;
    } catch (const NumericalError &e) {
        error_line("numerical", kNumerical, e.what());
        return kNumerical;
    } catch (const FormatError &e) {
        error_line("format", kData, e.what());
        return kData;
    } catch (const DataError &e) {
        error_line("data", kData, e.what());
        return kData;
    } catch (const std::filesystem::filesystem_error &e) {
        error_line("io", kData, e.what());
        return kData;
    } catch (const std::exception &e) {
        error_line("internal", kNumerical, e.what());
        return kNumerical;
    }
    return kOk;
}
