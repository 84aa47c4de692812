// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/sparsify.hpp"

#include "featsplat/lifting.hpp"
#include "featsplat/parallel.hpp"
#include "featsplat/spatial.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace featsplat {

GaussianScene encode_scene(const GaussianScene &lifted, const Autoencoder &ae) {
    if (lifted.payload_dim != ae.feature_dim())
        throw DataError("lifted scene dimension " + std::to_string(lifted.payload_dim) +
                        " does not match the autoencoder (" + std::to_string(ae.feature_dim()) + ")");
    GaussianScene out;
    out.gaussians = lifted.gaussians;
    out.payload_dim = ae.latent_dim();
    out.meta = {lifted.meta.source, SceneStage::Latent};
    Eigen::Map<const Eigen::MatrixXf> f(lifted.payload.data(), lifted.payload_dim,
                                        static_cast<Eigen::Index>(lifted.size()));
    const Eigen::MatrixXf z = ae.encode(Eigen::MatrixXf(f));
    out.payload.assign(z.data(), z.data() + z.size());
    return out;
}

ReferenceSet build_references(const GaussianScene &lifted, const Autoencoder &ae,
                              std::span<const Camera> cameras, const RasterConfig &raster,
                              bool decode) {
    const GaussianScene latent = encode_scene(lifted, ae);
    RasterConfig rc = raster;
    rc.capture_weights = false;
    ReferenceSet refs;
    refs.views.resize(cameras.size());
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        RenderOutput r = render(latent, cameras[v], rc);
        refs.views[v].latent = std::move(r.image);
        refs.views[v].depth = std::move(r.depth);
        if (decode)
            refs.views[v].decoded = ae.decode_image(refs.views[v].latent);
    }
    return refs;
}

StepResult loss_and_gradients(const GaussianScene &state, const Camera &cam,
                              const ReferenceView &ref, const Autoencoder *decoder,
                              const SparsifyConfig &cfg) {
    RasterConfig rc = cfg.raster;
    rc.capture_weights = false;
    const RenderOutput r = render(state, cam, rc);
    const std::size_t P = r.image.pixel_count();
    if (ref.depth.pixel_count() != P)
        throw DataError("reference does not match the camera resolution");
    const double invP = 1.0 / static_cast<double>(P);
    auto sign = [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); };

    StepResult out;
    Image dImage(r.image.height, r.image.width, r.image.channels);
    Image dDepth(r.image.height, r.image.width, 1);

    if (decoder && cfg.decoded_loss) {
        if (ref.decoded.data.empty())
            throw DataError("decoded-space loss needs decoded references");
        const Image F = decoder->decode_image(r.image);
        Image dF(F.height, F.width, F.channels);
        const double invN = 1.0 / static_cast<double>(F.data.size());
        double sum = 0.0;
        for (std::size_t k = 0; k < F.data.size(); ++k) {
            const float diff = F.data[k] - ref.decoded.data[k];
            sum += std::abs(diff);
            dF.data[k] = static_cast<float>(sign(diff) * invN);
        }
        out.loss.feature = sum * invN;
        // Pull the gradient back through the frozen decoder in pixel chunks.
        constexpr std::size_t kChunk = 1024;
        parallel_for((P + kChunk - 1) / kChunk, [&](std::size_t c) {
            const std::size_t begin = c * kChunk, end = std::min(P, begin + kChunk);
            const auto cols = static_cast<Eigen::Index>(end - begin);
            Eigen::Map<const Eigen::MatrixXf> z(r.image.data.data() + begin * r.image.channels,
                                                r.image.channels, cols);
            Eigen::Map<const Eigen::MatrixXf> g(dF.data.data() + begin * dF.channels, dF.channels, cols);
            Eigen::Map<Eigen::MatrixXf> dz(dImage.data.data() + begin * dImage.channels,
                                           dImage.channels, cols);
            dz = decoder->decode_input_grad(Eigen::MatrixXf(z), Eigen::MatrixXf(g));
        });
    } else {
        const double invN = 1.0 / static_cast<double>(r.image.data.size());
        double sum = 0.0;
        for (std::size_t k = 0; k < r.image.data.size(); ++k) {
            const float diff = r.image.data[k] - ref.latent.data[k];
            sum += std::abs(diff);
            dImage.data[k] = static_cast<float>(sign(diff) * invN);
        }
        out.loss.feature = sum * invN;
    }

    double depthSum = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
        const float diff = r.depth.data[p] - ref.depth.data[p];
        depthSum += std::abs(diff);
        dDepth.data[p] = static_cast<float>(cfg.lambda_depth * sign(diff) * invP);
    }
    out.loss.depth = depthSum * invP;
    out.loss.total = out.loss.feature + cfg.lambda_depth * out.loss.depth;
    out.grads = render_backward(state, cam, rc, &dImage, cfg.lambda_depth != 0.0 ? &dDepth : nullptr);
    return out;
}

// ---------------------------------------------------------------------------
// Adam over scene attributes

SceneAdam::SceneAdam(std::size_t n, int payloadDim)
    : n_(n), payloadDim_(payloadDim), m_(n * stride(), 0.0f), v_(n * stride(), 0.0f) {}

void SceneAdam::step(GaussianScene &scene, const SceneGradients &g, const SparsifyConfig &cfg,
                     double positionLr) {
    if (scene.size() != n_)
        throw DataError("optimizer state does not match the scene");
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps_));
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const int S = stride();
    const int C = payloadDim_;

    auto update = [&](float &param, float grad, float &m, float &v, double lr) {
        m = b1 * m + (1.0f - b1) * grad;
        v = b2 * v + (1.0f - b2) * grad * grad;
        const double mhat = m / bc1, vhat = v / bc2;
        param -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
    };

    for (std::size_t i = 0; i < n_; ++i) {
        Gaussian &gs = scene.gaussians[i];
        float *m = m_.data() + i * S;
        float *v = v_.data() + i * S;
        int k = 0;
        for (int a = 0; a < 3; ++a, ++k)
            update(gs.position[a], g.position[i][a], m[k], v[k], positionLr);
        for (int a = 0; a < 3; ++a, ++k)
            update(gs.log_scale[a], g.log_scale[i][a], m[k], v[k], cfg.lr_scale);
        for (int a = 0; a < 4; ++a, ++k)
            update(gs.rotation[a], g.rotation[i][a], m[k], v[k], cfg.lr_rotation);
        update(gs.opacity_logit, g.opacity_logit[i], m[k], v[k], cfg.lr_opacity);
        ++k;
        auto payload = scene.payload_of(i);
        for (int c = 0; c < C; ++c, ++k)
            update(payload[c], g.payload[i * C + c], m[k], v[k], cfg.lr_latent);
    }
}

void SceneAdam::remap(std::span<const std::int64_t> source) {
    const int S = stride();
    std::vector<float> m(source.size() * S, 0.0f), v(source.size() * S, 0.0f);
    for (std::size_t k = 0; k < source.size(); ++k) {
        if (source[k] < 0)
            continue;
        std::copy_n(m_.begin() + source[k] * S, S, m.begin() + static_cast<std::ptrdiff_t>(k * S));
        std::copy_n(v_.begin() + source[k] * S, S, v.begin() + static_cast<std::ptrdiff_t>(k * S));
    }
    m_ = std::move(m);
    v_ = std::move(v);
    n_ = source.size();
}

// ---------------------------------------------------------------------------
// Merging

MomentMerge merge_moments(const Eigen::Vector3d &mu_i, const Eigen::Matrix3d &cov_i, double alpha_i,
                          std::span<const float> payload_i, const Eigen::Vector3d &mu_j,
                          const Eigen::Matrix3d &cov_j, double alpha_j,
                          std::span<const float> payload_j) {
    const double a = alpha_i + alpha_j;
    const double wi = alpha_i / a, wj = alpha_j / a;
    MomentMerge m;
    m.mean = wi * mu_i + wj * mu_j;
    // Equivalent to sum_k w_k (Sigma_k + mu_k mu_k^T) - mu mu^T without the cancellation.
    const Eigen::Vector3d d = mu_i - mu_j;
    m.cov = wi * cov_i + wj * cov_j + (wi * wj) * d * d.transpose();
    m.alpha = alpha_i + alpha_j - alpha_i * alpha_j;
    m.payload.resize(payload_i.size());
    for (std::size_t c = 0; c < payload_i.size(); ++c)
        m.payload[c] = wi * payload_i[c] + wj * payload_j[c];
    return m;
}

namespace {

// d^T Sigma^-1 d through the factorization: |diag(1/s) R^T d|^2.
double mahalanobis_sq(const Gaussian &g, const Eigen::Vector3d &d) {
    const Eigen::Vector4d q = g.rotation.cast<double>().normalized();
    const Eigen::Matrix3d R =
        Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
    const Eigen::Vector3d s = g.log_scale.cast<double>().array().exp();
    return (R.transpose() * d).cwiseQuotient(s).squaredNorm();
}

double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) {
        dot += static_cast<double>(a[c]) * b[c];
        na += static_cast<double>(a[c]) * a[c];
        nb += static_cast<double>(b[c]) * b[c];
    }
    if (na <= 0.0 || nb <= 0.0)
        return 0.0;
    return dot / std::sqrt(na * nb);
}

} // namespace

double mahalanobis_gate(const Gaussian &a, const Gaussian &b) {
    const Eigen::Vector3d d = (b.position - a.position).cast<double>();
    return std::max(mahalanobis_sq(a, d), mahalanobis_sq(b, d));
}

bool factorize_covariance(const Eigen::Matrix3d &cov, Gaussian &out) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(0.5 * (cov + cov.transpose()));
    Eigen::Vector3d lambda = eig.eigenvalues();
    Eigen::Matrix3d V = eig.eigenvectors();
    bool clamped = false;
    for (int k = 0; k < 3; ++k) {
        if (!(lambda[k] >= 1e-9)) {
            lambda[k] = 1e-9;
            clamped = true;
        }
    }
    if (V.determinant() < 0)
        V.col(0) = -V.col(0);
    const Eigen::Quaterniond q(V);
    out.rotation = Eigen::Vector4d(q.w(), q.x(), q.y(), q.z()).normalized().cast<float>();
    out.log_scale = (0.5 * lambda.array().log()).matrix().cast<float>();
    return clamped;
}

MergeOutcome merge_pass(const GaussianScene &scene, std::span<const float> gradNorms,
                        const SparsifyConfig &cfg, const Autoencoder *decoder) {
    const std::size_t N = scene.size();
    if (gradNorms.size() != N)
        throw DataError("gradient norms do not match the scene");

    std::vector<Eigen::Vector3f> points(N);
    for (std::size_t i = 0; i < N; ++i)
        points[i] = scene.gaussians[i].position;
    const KdTree tree(std::move(points));

    std::vector<float> decoded;
    int decodedDim = 0;
    if (cfg.decoded_similarity && decoder) {
        Eigen::Map<const Eigen::MatrixXf> z(scene.payload.data(), scene.payload_dim,
                                            static_cast<Eigen::Index>(N));
        const Eigen::MatrixXf f = decoder->decode(Eigen::MatrixXf(z));
        decoded.assign(f.data(), f.data() + f.size());
        decodedDim = static_cast<int>(f.rows());
    }
    auto similarity = [&](std::size_t i, std::size_t j) {
        if (decodedDim > 0)
            return cosine({decoded.data() + i * decodedDim, static_cast<std::size_t>(decodedDim)},
                          {decoded.data() + j * decodedDim, static_cast<std::size_t>(decodedDim)});
        return cosine(scene.payload_of(i), scene.payload_of(j));
    };

    std::vector<std::uint8_t> consumed(N, 0), removed(N, 0);
    std::vector<std::int64_t> partner(N, -1);
    std::vector<Gaussian> replaced(N);
    std::vector<std::vector<float>> replacedPayload(N);
    MergeOutcome out;

    for (std::size_t i = 0; i < N; ++i) {
        if (consumed[i] || !(gradNorms[i] < cfg.tau_grad))
            continue;
        const Gaussian &gi = scene.gaussians[i];
        const auto neighbors = tree.knn(gi.position, static_cast<std::size_t>(cfg.k_neighbors),
                                        [&](std::uint32_t j) { return j != i && !consumed[j]; });
        for (std::uint32_t j : neighbors) {
            const Gaussian &gj = scene.gaussians[j];
            if (!(similarity(i, j) > cfg.tau_sim))
                continue;
            if (!(mahalanobis_gate(gi, gj) < cfg.chi2))
                continue;

            const MomentMerge mm = merge_moments(
                gi.position.cast<double>(), covariance_d(gi), gi.opacity(), scene.payload_of(i),
                gj.position.cast<double>(), covariance_d(gj), gj.opacity(), scene.payload_of(j));
            Gaussian merged;
            merged.position = mm.mean.cast<float>();
            if (factorize_covariance(mm.cov, merged)) {
                ++out.clamped;
                spdlog::debug("merge {}+{}: clamped non-positive covariance eigenvalues", i, j);
            }
            const double alpha = std::clamp(mm.alpha, 1e-6, 1.0 - 1e-6);
            merged.opacity_logit = static_cast<float>(std::log(alpha / (1.0 - alpha)));
            replaced[i] = merged;
            replacedPayload[i].assign(mm.payload.begin(), mm.payload.end());
            partner[i] = j;
            consumed[i] = consumed[j] = 1;
            removed[j] = 1;
            ++out.merged;
            break;
        }
    }

    out.scene.payload_dim = scene.payload_dim;
    out.scene.meta = scene.meta;
    for (std::size_t i = 0; i < N; ++i) {
        if (removed[i])
            continue;
        if (partner[i] >= 0) {
            out.scene.gaussians.push_back(replaced[i]);
            out.scene.payload.insert(out.scene.payload.end(), replacedPayload[i].begin(),
                                     replacedPayload[i].end());
            out.source.push_back(-1);
        } else {
            out.scene.gaussians.push_back(scene.gaussians[i]);
            auto p = scene.payload_of(i);
            out.scene.payload.insert(out.scene.payload.end(), p.begin(), p.end());
            out.source.push_back(static_cast<std::int64_t>(i));
        }
    }
    return out;
}

PruneOutcome prune(const GaussianScene &scene, std::span<const Camera> cameras, double tauCon,
                   const RasterConfig &raster) {
    const std::vector<float> c = contributions(scene, cameras, raster);
    std::vector<std::uint8_t> keep(scene.size(), 0);
    PruneOutcome out;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        keep[i] = c[i] >= tauCon;
        if (keep[i])
            out.source.push_back(static_cast<std::int64_t>(i));
    }
    out.pruned = scene.size() - out.source.size();
    if (out.source.empty()) {
        const float maxC = c.empty() ? 0.0f : *std::max_element(c.begin(), c.end());
        throw DataError("pruning would remove all " + std::to_string(scene.size()) +
                        " Gaussians (largest contribution " + std::to_string(maxC) +
                        ", threshold " + std::to_string(tauCon) + ")");
    }
    out.scene = scene.subset(keep);
    return out;
}

// ---------------------------------------------------------------------------

namespace {
bool gradients_finite(const SceneGradients &g) {
    for (std::size_t i = 0; i < g.position.size(); ++i)
        if (!g.position[i].allFinite() || !g.log_scale[i].allFinite() || !g.rotation[i].allFinite() ||
            !std::isfinite(g.opacity_logit[i]))
            return false;
    for (float v : g.payload)
        if (!std::isfinite(v))
            return false;
    return true;
}
} // namespace

SparsifyResult optimize_scene(GaussianScene state, const ReferenceSet &refs,
                              std::span<const Camera> cameras, const Autoencoder *decoder,
                              const SparsifyConfig &cfg) {
    if (cameras.empty() || refs.views.size() != cameras.size())
        throw DataError("sparsify needs one reference per camera");
    if (cfg.merge_interval < 1)
        throw DataError("merge interval must be at least 1");
    if (!(cfg.tau_con > 0 && cfg.tau_sim > 0 && cfg.tau_grad > 0 && cfg.chi2 > 0))
        throw DataError("sparsify thresholds must be positive");

    const auto start = std::chrono::steady_clock::now();
    SparsifyResult result;
    const double positionLr = cfg.lr_position * std::max(scene_bounds(state).extent, 1e-6f);
    SceneAdam adam(state.size(), state.payload_dim);
    std::vector<float> gradAvg(state.size(), 0.0f);

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> viewOrder;
    std::size_t viewCursor = 0;

    auto remap = [&](std::span<const std::int64_t> source) {
        adam.remap(source);
        std::vector<float> avg(source.size(), 0.0f);
        for (std::size_t k = 0; k < source.size(); ++k)
            avg[k] = source[k] >= 0 ? gradAvg[source[k]] : 0.0f;
        gradAvg = std::move(avg);
    };

    try {
        for (int it = 0; it < cfg.max_iterations; ++it) {
            if (viewCursor == viewOrder.size()) {
                viewOrder.resize(cameras.size());
                std::iota(viewOrder.begin(), viewOrder.end(), std::size_t{0});
                std::shuffle(viewOrder.begin(), viewOrder.end(), rng);
                viewCursor = 0;
            }
            const std::size_t view = viewOrder[viewCursor++];

            StepResult step = loss_and_gradients(state, cameras[view], refs.views[view], decoder, cfg);
            if (gradients_finite(step.grads)) {
                adam.step(state, step.grads, cfg, positionLr);
                const float m = static_cast<float>(cfg.grad_momentum);
                for (std::size_t i = 0; i < state.size(); ++i)
                    if (step.grads.visible[i])
                        gradAvg[i] = m * gradAvg[i] + (1.0f - m) * step.grads.screen_grad_norm[i];
            } else {
                spdlog::warn("sparsify iteration {}: non-finite gradient, update skipped", it);
            }

            ProgressRow row{it, step.loss.feature, step.loss.depth, 0, 0, 0};
            if (cfg.enable_prune &&
                std::find(cfg.prune_iterations.begin(), cfg.prune_iterations.end(), it) !=
                    cfg.prune_iterations.end()) {
                PruneOutcome p = prune(state, cameras, cfg.tau_con, cfg.raster);
                remap(p.source);
                state = std::move(p.scene);
                row.pruned = p.pruned;
            }
            if (cfg.enable_merge && it > 0 && it % cfg.merge_interval == 0) {
                MergeOutcome mo = merge_pass(state, gradAvg, cfg, decoder);
                remap(mo.source);
                state = std::move(mo.scene);
                row.merged = mo.merged;
            }
            row.gaussians = state.size();
            result.progress.push_back(row);
            if (it % 100 == 0)
                spdlog::info("sparsify {:5d}  L_f {:.5f}  L_depth {:.5f}  #G {}", it,
                             row.feature_loss, row.depth_loss, row.gaussians);
        }
    } catch (const std::exception &e) {
        spdlog::error("sparsify aborted: {}", e.what());
        result.aborted = true;
        result.error = e.what();
    }

    for (Gaussian &g : state.gaussians)
        if (std::abs(g.rotation.norm() - 1.0f) > 1e-6f)
            g.rotation.normalize();
    state.meta.stage = SceneStage::Latent;
    result.scene = std::move(state);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

SparsifyResult sparsify(const GaussianScene &lifted, const Autoencoder &ae,
                        std::span<const Camera> cameras, const SparsifyConfig &cfg) {
    const ReferenceSet refs = build_references(lifted, ae, cameras, cfg.raster, cfg.decoded_loss);
    return optimize_scene(encode_scene(lifted, ae), refs, cameras, cfg.decoded_loss ? &ae : nullptr,
                          cfg);
}

void write_progress_csv(std::span<const ProgressRow> rows, const std::filesystem::path &path) {
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write " + path.string());
    out << "iteration,L_f,L_depth,gaussian_count,merged,pruned\n";
    out.precision(9);
    for (const ProgressRow &r : rows)
        out << r.iteration << ',' << r.feature_loss << ',' << r.depth_loss << ',' << r.gaussians
            << ',' << r.merged << ',' << r.pruned << '\n';
}

} // namespace featsplat
