// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "featsplat/common.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace featsplat {

template <typename Scalar>
struct DenseLayer {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weight; // out x in
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> bias;

    template <typename Other>
    DenseLayer<Other> cast() const {
        return {weight.template cast<Other>(), bias.template cast<Other>()};
    }
};

template <typename Scalar>
using LayerStack = std::vector<DenseLayer<Scalar>>;

inline constexpr float kLeakySlope = 0.01f;

/// Per-Gaussian feature autoencoder. The encoder maps D -> widths..., with leaky-ReLU
/// between layers and a sigmoid on the latent so latents are valid RGB payloads.
/// The decoder mirrors it and ends in a raw linear layer.
class Autoencoder {
public:
    Autoencoder() = default;
    Autoencoder(int featureDim, std::vector<int> encoderWidths, std::uint64_t seed);

    int feature_dim() const { return featureDim_; }
    int latent_dim() const;

    /// Columns are samples.
    Eigen::MatrixXf encode(const Eigen::MatrixXf &features) const;
    Eigen::MatrixXf decode(const Eigen::MatrixXf &latents) const;

    std::vector<float> encode(std::span<const float> feature) const;
    std::vector<float> decode(std::span<const float> latent) const;

    /// Decodes every pixel of a latent image.
    Image decode_image(const Image &latent) const;

    /// Returns dL/dlatent for dL/doutput, both column-per-sample.
    Eigen::MatrixXf decode_input_grad(const Eigen::MatrixXf &latents,
                                      const Eigen::MatrixXf &outputGrad) const;

    LayerStack<float> &encoder() { return encoder_; }
    LayerStack<float> &decoder() { return decoder_; }
    const LayerStack<float> &encoder() const { return encoder_; }
    const LayerStack<float> &decoder() const { return decoder_; }

    bool parameters_finite() const;

    void save(const std::filesystem::path &path) const;
    static Autoencoder load(const std::filesystem::path &path);

    friend bool operator==(const Autoencoder &a, const Autoencoder &b);

private:
    int featureDim_ = 0;
    LayerStack<float> encoder_;
    LayerStack<float> decoder_;
};

struct StructurePair {
    std::uint32_t i = 0;
    std::uint32_t j = 0;
};

struct LossWeights {
    double cos = 1.0;
    double struc = 0.1;
};

struct LossTerms {
    double total = 0.0;
    double mse = 0.0;   // mean L2 norm of the reconstruction residual
    double cos = 0.0;   // mean (1 - cosine)
    double struc = 0.0; // mean |cos(f_i, f_j) - cos(E f_i, E f_j)|
};

/// Loss of a batch (columns are features) and, when gradient stacks are given,
/// reverse-mode parameter gradients. Instantiated for float and double.
template <typename Scalar>
LossTerms autoencoder_loss(const LayerStack<Scalar> &encoder, const LayerStack<Scalar> &decoder,
                           const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &batch,
                           std::span<const StructurePair> pairs, const LossWeights &weights,
                           LayerStack<Scalar> *encoderGrad, LayerStack<Scalar> *decoderGrad);

struct TrainConfig {
    std::vector<int> encoder_widths{128, 64, 32, 16, 3};
    double lambda_cos = 1.0;
    double lambda_struc = 0.1;
    int batch_size = 4096;
    double learning_rate = 1e-3;
    double lr_final_fraction = 1.0; // cosine-annealed end rate relative to learning_rate; 1 keeps it constant
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int epochs = 200;
    int pairs_per_sample = 1;
    std::uint64_t seed = 0;
};

struct TrainResult {
    Autoencoder model;
    std::vector<LossTerms> epoch_loss; // mean over the epoch's batches
    bool diverged = false;
};

/// Trains on the rows of `features` (N x D, row-major, one feature per row).
/// Deterministic for a given seed.
TrainResult train_autoencoder(std::span<const float> features, int dim, const TrainConfig &cfg);

} // namespace featsplat
