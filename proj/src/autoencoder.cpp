// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/autoencoder.hpp"

#include "featsplat/parallel.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace featsplat {

namespace {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class Output { Sigmoid, Linear };

// Forward pass keeping every layer input; `pre` holds pre-activations.
template <typename Scalar>
struct Trace {
    std::vector<Mat<Scalar>> inputs;
    std::vector<Mat<Scalar>> pre;
    Mat<Scalar> output;
};

template <typename Scalar>
Trace<Scalar> forward(const LayerStack<Scalar> &layers, const Mat<Scalar> &x, Output out) {
    Trace<Scalar> tr;
    Mat<Scalar> h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Mat<Scalar> a = layers[l].weight * h;
        a.colwise() += layers[l].bias;
        tr.inputs.push_back(std::move(h));
        const bool last = l + 1 == layers.size();
        if (!last)
            h = a.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(kLeakySlope) * v; });
        else if (out == Output::Sigmoid)
            h = a.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
        else
            h = a;
        tr.pre.push_back(std::move(a));
    }
    tr.output = std::move(h);
    return tr;
}

template <typename Scalar>
Mat<Scalar> run(const LayerStack<Scalar> &layers, Mat<Scalar> h, Output out) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Mat<Scalar> a = layers[l].weight * h;
        a.colwise() += layers[l].bias;
        const bool last = l + 1 == layers.size();
        if (!last)
            h = a.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(kLeakySlope) * v; });
        else if (out == Output::Sigmoid)
            h = a.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
        else
            h = std::move(a);
    }
    return h;
}

// Backpropagates dL/doutput; fills parameter gradients when `grads` is set and
// returns dL/dinput.
template <typename Scalar>
Mat<Scalar> backward(const LayerStack<Scalar> &layers, const Trace<Scalar> &tr, Mat<Scalar> grad,
                     Output out, LayerStack<Scalar> *grads) {
    for (std::size_t l = layers.size(); l-- > 0;) {
        const bool last = l + 1 == layers.size();
        if (!last) {
            grad.array() *= tr.pre[l].array().unaryExpr(
                [](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(kLeakySlope); });
        } else if (out == Output::Sigmoid) {
            grad.array() *= tr.output.array() * (Scalar(1) - tr.output.array());
        }
        if (grads) {
            (*grads)[l].weight.noalias() += grad * tr.inputs[l].transpose();
            (*grads)[l].bias += grad.rowwise().sum();
        }
        grad = (layers[l].weight.transpose() * grad).eval();
    }
    return grad;
}

template <typename Scalar>
LayerStack<Scalar> zeros_like(const LayerStack<Scalar> &layers) {
    LayerStack<Scalar> z;
    for (const auto &l : layers)
        z.push_back({Mat<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                     Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(l.bias.size())});
    return z;
}

// cos(a, b) = a.b / (|a||b| + eps) and its gradient with respect to a.
template <typename Scalar, typename A, typename B>
double cosine_and_grad(const A &a, const B &b, Eigen::Matrix<Scalar, Eigen::Dynamic, 1> *gradA) {
    constexpr double eps = 1e-8;
    const double na = a.template cast<double>().norm();
    const double nb = b.template cast<double>().norm();
    const double dot = a.template cast<double>().dot(b.template cast<double>());
    const double den = na * nb + eps;
    if (gradA) {
        Eigen::VectorXd g = b.template cast<double>() / den;
        if (na > 0.0)
            g -= dot * nb / (den * den) * a.template cast<double>() / na;
        *gradA = g.cast<Scalar>();
    }
    return dot / den;
}

} // namespace

template <typename Scalar>
LossTerms autoencoder_loss(const LayerStack<Scalar> &encoder, const LayerStack<Scalar> &decoder,
                           const Mat<Scalar> &batch, std::span<const StructurePair> pairs,
                           const LossWeights &weights, LayerStack<Scalar> *encoderGrad,
                           LayerStack<Scalar> *decoderGrad) {
    const Eigen::Index B = batch.cols();
    if (B == 0)
        throw DataError("empty batch");
    const bool wantGrad = encoderGrad && decoderGrad;
    if (wantGrad) {
        *encoderGrad = zeros_like(encoder);
        *decoderGrad = zeros_like(decoder);
    }

    const Trace<Scalar> enc = forward(encoder, batch, Output::Sigmoid);
    const Trace<Scalar> dec = forward(decoder, enc.output, Output::Linear);
    const Mat<Scalar> &recon = dec.output;

    LossTerms terms;
    Mat<Scalar> gRecon = Mat<Scalar>::Zero(recon.rows(), B);
    Mat<Scalar> gLatent = Mat<Scalar>::Zero(enc.output.rows(), B);
    const double invB = 1.0 / static_cast<double>(B);

    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> g;
    for (Eigen::Index i = 0; i < B; ++i) {
        const auto r = recon.col(i);
        const auto f = batch.col(i);
        const Eigen::VectorXd diff = (r - f).template cast<double>();
        const double n = diff.norm();
        terms.mse += n;
        const double c = cosine_and_grad<Scalar>(r, f, wantGrad ? &g : nullptr);
        terms.cos += 1.0 - c;
        if (wantGrad) {
            if (n > 0.0)
                gRecon.col(i) += (diff * (invB / n)).cast<Scalar>();
            gRecon.col(i) -= g * Scalar(weights.cos * invB);
        }
    }
    terms.mse *= invB;
    terms.cos *= invB;

    if (!pairs.empty() && weights.struc != 0.0) {
        const double invP = 1.0 / static_cast<double>(pairs.size());
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gi, gj;
        for (const StructurePair &p : pairs) {
            const double cf = cosine_and_grad<Scalar>(batch.col(p.i), batch.col(p.j), nullptr);
            const auto zi = enc.output.col(p.i);
            const auto zj = enc.output.col(p.j);
            const double cz = cosine_and_grad<Scalar>(zi, zj, wantGrad ? &gi : nullptr);
            if (wantGrad)
                cosine_and_grad<Scalar>(zj, zi, &gj);
            const double diff = cf - cz;
            terms.struc += std::abs(diff);
            if (wantGrad && diff != 0.0) {
                const double s = (diff > 0 ? -1.0 : 1.0) * weights.struc * invP;
                gLatent.col(p.i) += gi * Scalar(s);
                gLatent.col(p.j) += gj * Scalar(s);
            }
        }
        terms.struc *= invP;
    }
    terms.total = terms.mse + weights.cos * terms.cos + weights.struc * terms.struc;

    if (wantGrad) {
        gLatent += backward(decoder, dec, gRecon, Output::Linear, decoderGrad);
        backward(encoder, enc, gLatent, Output::Sigmoid, encoderGrad);
    }
    return terms;
}

template LossTerms autoencoder_loss<float>(const LayerStack<float> &, const LayerStack<float> &,
                                           const Mat<float> &, std::span<const StructurePair>,
                                           const LossWeights &, LayerStack<float> *,
                                           LayerStack<float> *);
template LossTerms autoencoder_loss<double>(const LayerStack<double> &, const LayerStack<double> &,
                                            const Mat<double> &, std::span<const StructurePair>,
                                            const LossWeights &, LayerStack<double> *,
                                            LayerStack<double> *);

// ---------------------------------------------------------------------------

Autoencoder::Autoencoder(int featureDim, std::vector<int> encoderWidths, std::uint64_t seed)
    : featureDim_(featureDim) {
    if (featureDim <= 0 || encoderWidths.empty())
        throw DataError("autoencoder needs a positive feature dimension and at least one layer");
    for (int w : encoderWidths)
        if (w <= 0)
            throw DataError("autoencoder layer widths must be positive");

    std::mt19937_64 rng(seed);
    auto makeLayer = [&](int in, int out) {
        // Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
        const float bound = 1.0f / std::sqrt(static_cast<float>(in));
        std::uniform_real_distribution<float> dist(-bound, bound);
        DenseLayer<float> layer{Eigen::MatrixXf(out, in), Eigen::VectorXf(out)};
        for (Eigen::Index r = 0; r < out; ++r)
            for (Eigen::Index c = 0; c < in; ++c)
                layer.weight(r, c) = dist(rng);
        for (Eigen::Index r = 0; r < out; ++r)
            layer.bias[r] = dist(rng);
        return layer;
    };

    int in = featureDim;
    for (int w : encoderWidths) {
        encoder_.push_back(makeLayer(in, w));
        in = w;
    }
    for (std::size_t l = encoderWidths.size(); l-- > 1;) {
        decoder_.push_back(makeLayer(in, encoderWidths[l - 1]));
        in = encoderWidths[l - 1];
    }
    decoder_.push_back(makeLayer(in, featureDim));
}

int Autoencoder::latent_dim() const {
    return encoder_.empty() ? 0 : static_cast<int>(encoder_.back().weight.rows());
}

Eigen::MatrixXf Autoencoder::encode(const Eigen::MatrixXf &features) const {
    if (features.rows() != featureDim_)
        throw DataError("encode: expected feature dimension " + std::to_string(featureDim_));
    return run(encoder_, features, Output::Sigmoid);
}

Eigen::MatrixXf Autoencoder::decode(const Eigen::MatrixXf &latents) const {
    if (latents.rows() != latent_dim())
        throw DataError("decode: expected latent dimension " + std::to_string(latent_dim()));
    return run(decoder_, latents, Output::Linear);
}

std::vector<float> Autoencoder::encode(std::span<const float> feature) const {
    const Eigen::MatrixXf z =
        encode(Eigen::Map<const Eigen::MatrixXf>(feature.data(), static_cast<Eigen::Index>(feature.size()), 1));
    return {z.data(), z.data() + z.size()};
}

std::vector<float> Autoencoder::decode(std::span<const float> latent) const {
    const Eigen::MatrixXf f =
        decode(Eigen::Map<const Eigen::MatrixXf>(latent.data(), static_cast<Eigen::Index>(latent.size()), 1));
    return {f.data(), f.data() + f.size()};
}

Image Autoencoder::decode_image(const Image &latent) const {
    if (latent.channels != latent_dim())
        throw DataError("decode_image: latent image has the wrong channel count");
    Image out(latent.height, latent.width, featureDim_);
    const std::size_t P = latent.pixel_count();
    constexpr std::size_t kChunk = 1024;
    parallel_for((P + kChunk - 1) / kChunk, [&](std::size_t c) {
        const std::size_t begin = c * kChunk, end = std::min(P, begin + kChunk);
        const auto cols = static_cast<Eigen::Index>(end - begin);
        Eigen::Map<const Eigen::MatrixXf> z(latent.data.data() + begin * latent.channels,
                                            latent.channels, cols);
        Eigen::Map<Eigen::MatrixXf> f(out.data.data() + begin * featureDim_, featureDim_, cols);
        f = run(decoder_, Eigen::MatrixXf(z), Output::Linear);
    });
    return out;
}

Eigen::MatrixXf Autoencoder::decode_input_grad(const Eigen::MatrixXf &latents,
                                               const Eigen::MatrixXf &outputGrad) const {
    const Trace<float> tr = forward(decoder_, latents, Output::Linear);
    return backward<float>(decoder_, tr, outputGrad, Output::Linear, nullptr);
}

bool Autoencoder::parameters_finite() const {
    for (const auto *stack : {&encoder_, &decoder_})
        for (const auto &l : *stack)
            if (!l.weight.allFinite() || !l.bias.allFinite())
                return false;
    return true;
}

bool operator==(const Autoencoder &a, const Autoencoder &b) {
    auto same = [](const LayerStack<float> &x, const LayerStack<float> &y) {
        if (x.size() != y.size())
            return false;
        for (std::size_t l = 0; l < x.size(); ++l) {
            if (x[l].weight.rows() != y[l].weight.rows() || x[l].weight.cols() != y[l].weight.cols())
                return false;
            if (std::memcmp(x[l].weight.data(), y[l].weight.data(), x[l].weight.size() * 4) != 0 ||
                std::memcmp(x[l].bias.data(), y[l].bias.data(), x[l].bias.size() * 4) != 0)
                return false;
        }
        return true;
    };
    return a.featureDim_ == b.featureDim_ && same(a.encoder_, b.encoder_) &&
           same(a.decoder_, b.decoder_);
}

// Checkpoint: "CFAE", u32 version, u32 D, then for every layer (encoder first, then
// decoder) u32 rows, u32 cols, rows*cols float32 weights row-major, rows float32 biases.
// Encoder and decoder hold the same number of layers.

void Autoencoder::save(const std::filesystem::path &path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("cannot write checkpoint " + path.string());
    const std::uint32_t hdr[2] = {1u, static_cast<std::uint32_t>(featureDim_)};
    out.write("CFAE", 4);
    out.write(reinterpret_cast<const char *>(hdr), sizeof(hdr));
    for (const auto *stack : {&encoder_, &decoder_}) {
        for (const auto &l : *stack) {
            const std::uint32_t shape[2] = {static_cast<std::uint32_t>(l.weight.rows()),
                                            static_cast<std::uint32_t>(l.weight.cols())};
            out.write(reinterpret_cast<const char *>(shape), sizeof(shape));
            const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = l.weight;
            out.write(reinterpret_cast<const char *>(w.data()),
                      static_cast<std::streamsize>(w.size() * sizeof(float)));
            out.write(reinterpret_cast<const char *>(l.bias.data()),
                      static_cast<std::streamsize>(l.bias.size() * sizeof(float)));
        }
    }
    if (!out)
        throw FormatError("write failed for " + path.string());
}

Autoencoder Autoencoder::load(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open checkpoint " + path.string());
    char magic[4];
    std::uint32_t hdr[2];
    in.read(magic, 4);
    in.read(reinterpret_cast<char *>(hdr), sizeof(hdr));
    if (!in || std::memcmp(magic, "CFAE", 4) != 0)
        throw FormatError("bad magic in " + path.string());
    if (hdr[0] != 1)
        throw FormatError("unsupported checkpoint version " + std::to_string(hdr[0]));

    Autoencoder ae;
    ae.featureDim_ = static_cast<int>(hdr[1]);
    LayerStack<float> layers;
    for (;;) {
        std::uint32_t shape[2];
        in.read(reinterpret_cast<char *>(shape), sizeof(shape));
        if (in.gcount() == 0)
            break;
        if (in.gcount() != sizeof(shape) || shape[0] == 0 || shape[1] == 0 ||
            shape[0] > (1u << 16) || shape[1] > (1u << 16))
            throw FormatError("corrupt layer header in " + path.string());
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w(shape[0], shape[1]);
        Eigen::VectorXf b(shape[0]);
        in.read(reinterpret_cast<char *>(w.data()), static_cast<std::streamsize>(w.size() * 4));
        in.read(reinterpret_cast<char *>(b.data()), static_cast<std::streamsize>(b.size() * 4));
        if (!in)
            throw FormatError("truncated checkpoint " + path.string());
        layers.push_back({Eigen::MatrixXf(w), b});
    }
    if (layers.empty() || layers.size() % 2 != 0)
        throw FormatError("checkpoint must hold a mirrored encoder/decoder pair");
    for (std::size_t l = 1; l < layers.size(); ++l)
        if (layers[l].weight.cols() != layers[l - 1].weight.rows())
            throw FormatError("layer shapes do not chain in " + path.string());
    if (layers.front().weight.cols() != ae.featureDim_ || layers.back().weight.rows() != ae.featureDim_)
        throw FormatError("checkpoint feature dimension mismatch");
    const std::size_t half = layers.size() / 2;
    ae.encoder_.assign(layers.begin(), layers.begin() + static_cast<std::ptrdiff_t>(half));
    ae.decoder_.assign(layers.begin() + static_cast<std::ptrdiff_t>(half), layers.end());
    if (!ae.parameters_finite())
        throw FormatError("non-finite parameters in " + path.string());
    return ae;
}

// ---------------------------------------------------------------------------

namespace {

struct AdamState {
    LayerStack<float> m, v;
};

void adam_update(LayerStack<float> &params, const LayerStack<float> &grads, AdamState &st,
                 const TrainConfig &cfg, long step, double lr) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const float stepSize = static_cast<float>(lr / bc1);
    const float eps = static_cast<float>(cfg.epsilon);
    const float invBc2Sqrt = static_cast<float>(1.0 / std::sqrt(bc2));
    auto apply = [&](auto &p, const auto &g, auto &m, auto &v) {
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
        p.array() -= stepSize * m.array() / (v.array().sqrt() * invBc2Sqrt + eps);
    };
    for (std::size_t l = 0; l < params.size(); ++l) {
        apply(params[l].weight, grads[l].weight, st.m[l].weight, st.v[l].weight);
        apply(params[l].bias, grads[l].bias, st.m[l].bias, st.v[l].bias);
    }
}

// Cosine annealing from the base rate down to lr_final_fraction of it.
double learning_rate_at(const TrainConfig &cfg, long step, long totalSteps) {
    if (totalSteps <= 1 || cfg.lr_final_fraction >= 1.0)
        return cfg.learning_rate;
    const double t = static_cast<double>(step) / static_cast<double>(totalSteps - 1);
    const double floor = cfg.lr_final_fraction;
    return cfg.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

} // namespace

TrainResult train_autoencoder(std::span<const float> features, int dim, const TrainConfig &cfg) {
    if (dim <= 0 || features.size() % static_cast<std::size_t>(dim) != 0)
        throw DataError("feature array does not match the feature dimension");
    const std::size_t N = features.size() / dim;
    if (cfg.batch_size <= 0 || cfg.epochs < 0 || cfg.learning_rate <= 0 ||
        !(cfg.lr_final_fraction > 0 && cfg.lr_final_fraction <= 1))
        throw DataError("invalid training configuration");
    const std::size_t batch = std::min<std::size_t>(cfg.batch_size, N);
    if (N < 2 || (cfg.lambda_struc > 0 && batch < 2))
        throw DataError("need at least two features to train");

    TrainResult result;
    result.model = Autoencoder(dim, cfg.encoder_widths, cfg.seed);
    Autoencoder &model = result.model;
    AdamState encState{zeros_like(model.encoder()), zeros_like(model.encoder())};
    AdamState decState{zeros_like(model.decoder()), zeros_like(model.decoder())};

    Eigen::Map<const Eigen::MatrixXf> all(features.data(), dim, static_cast<Eigen::Index>(N));
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::uint32_t> order(N);
    std::iota(order.begin(), order.end(), 0u);
    const LossWeights weights{cfg.lambda_cos, cfg.lambda_struc};

    long step = 0;
    const long totalSteps = static_cast<long>(N / batch) * cfg.epochs;
    Autoencoder checkpoint = model;
    LayerStack<float> encGrad, decGrad;
    Eigen::MatrixXf x;
    std::vector<StructurePair> pairs;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossTerms sum;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin + batch <= N; begin += batch) {
            x.resize(dim, static_cast<Eigen::Index>(batch));
            for (std::size_t k = 0; k < batch; ++k)
                x.col(static_cast<Eigen::Index>(k)) = all.col(order[begin + k]);

            pairs.clear();
            if (cfg.lambda_struc > 0) {
                std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(batch - 2));
                for (std::uint32_t i = 0; i < batch; ++i) {
                    for (int r = 0; r < cfg.pairs_per_sample; ++r) {
                        std::uint32_t j = pick(rng);
                        if (j >= i)
                            ++j; // uniform over j != i
                        pairs.push_back({i, j});
                    }
                }
            }

            const LossTerms t = autoencoder_loss<float>(model.encoder(), model.decoder(), x, pairs,
                                                        weights, &encGrad, &decGrad);
            if (!std::isfinite(t.total)) {
                spdlog::error("autoencoder training diverged at epoch {}; restoring last finite checkpoint",
                              epoch);
                result.model = checkpoint;
                result.diverged = true;
                return result;
            }
            const double lr = learning_rate_at(cfg, step, totalSteps);
            ++step;
            adam_update(model.encoder(), encGrad, encState, cfg, step, lr);
            adam_update(model.decoder(), decGrad, decState, cfg, step, lr);
            sum.total += t.total;
            sum.mse += t.mse;
            sum.cos += t.cos;
            sum.struc += t.struc;
            ++batches;
        }
        if (!model.parameters_finite()) {
            spdlog::error("autoencoder parameters became non-finite at epoch {}", epoch);
            result.model = checkpoint;
            result.diverged = true;
            return result;
        }
        checkpoint = model;
        const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(batches, 1));
        result.epoch_loss.push_back({sum.total * inv, sum.mse * inv, sum.cos * inv, sum.struc * inv});
        spdlog::debug("ae epoch {} loss {:.6f} (mse {:.6f} cos {:.6f} struc {:.6f})", epoch,
                      sum.total * inv, sum.mse * inv, sum.cos * inv, sum.struc * inv);
    }
    return result;
}

} // namespace featsplat
