// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/quantize.hpp"

#include "featsplat/parallel.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace featsplat {

namespace {

double squared_distance(const float *a, const float *b, int dim) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(a[d]) - b[d];
        s += diff * diff;
    }
    return s;
}

constexpr std::size_t kAssignChunk = 256;

// Nearest entry and its squared distance for every row.
void assign_rows(std::span<const float> vectors, int dim, std::span<const float> entries,
                 std::vector<std::uint32_t> &assignment, std::vector<double> &dist) {
    const std::size_t N = vectors.size() / dim;
    const std::size_t K = entries.size() / dim;
    assignment.resize(N);
    dist.resize(N);
    parallel_for((N + kAssignChunk - 1) / kAssignChunk, [&](std::size_t c) {
        const std::size_t end = std::min(N, (c + 1) * kAssignChunk);
        for (std::size_t i = c * kAssignChunk; i < end; ++i) {
            const float *x = vectors.data() + i * dim;
            double best = std::numeric_limits<double>::infinity();
            std::uint32_t arg = 0;
            for (std::size_t k = 0; k < K; ++k) {
                const double d = squared_distance(x, entries.data() + k * dim, dim);
                if (d < best) {
                    best = d;
                    arg = static_cast<std::uint32_t>(k);
                }
            }
            assignment[i] = arg;
            dist[i] = best;
        }
    });
}

std::vector<float> seed_plus_plus(std::span<const float> vectors, int dim, std::size_t k,
                                  std::mt19937_64 &rng) {
    const std::size_t N = vectors.size() / dim;
    std::vector<float> centers;
    centers.reserve(k * dim);
    std::vector<std::uint8_t> chosen(N, 0);
    auto take = [&](std::size_t i) {
        chosen[i] = 1;
        centers.insert(centers.end(), vectors.begin() + static_cast<std::ptrdiff_t>(i * dim),
                       vectors.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
    };
    take(std::uniform_int_distribution<std::size_t>(0, N - 1)(rng));

    std::vector<double> d2(N);
    for (std::size_t i = 0; i < N; ++i)
        d2[i] = squared_distance(vectors.data() + i * dim, centers.data(), dim);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (centers.size() / dim < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t pick = N;
        if (total > 0.0) {
            const double r = unit(rng) * total;
            double run = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
                if (d2[i] <= 0.0)
                    continue;
                run += d2[i];
                pick = i;
                if (run > r)
                    break;
            }
        } else {
            // Every point already coincides with a center.
            for (std::size_t i = 0; i < N && pick == N; ++i)
                if (!chosen[i])
                    pick = i;
        }
        take(pick);
        const float *c = centers.data() + centers.size() - dim;
        for (std::size_t i = 0; i < N; ++i)
            d2[i] = std::min(d2[i], squared_distance(vectors.data() + i * dim, c, dim));
    }
    return centers;
}

} // namespace

std::vector<std::uint32_t> assign_to_codebook(std::span<const float> vectors, int dim,
                                              std::span<const float> entries) {
    if (dim <= 0 || entries.empty() || entries.size() % dim != 0 || vectors.size() % dim != 0)
        throw DataError("codebook and vectors disagree on the dimension");
    std::vector<std::uint32_t> a;
    std::vector<double> d;
    assign_rows(vectors, dim, entries, a, d);
    return a;
}

double quantization_error(std::span<const float> vectors, int dim, std::span<const float> entries,
                          std::span<const std::uint32_t> assignment) {
    double e = 0.0;
    for (std::size_t i = 0; i < assignment.size(); ++i)
        e += squared_distance(vectors.data() + i * dim, entries.data() + assignment[i] * dim, dim);
    return e;
}

Codebook build_codebook(std::span<const float> vectors, int dim, std::size_t k, int iterations,
                        std::uint64_t seed) {
    if (dim <= 0 || vectors.size() % dim != 0)
        throw DataError("vector array is not a multiple of the dimension");
    const std::size_t N = vectors.size() / dim;
    if (k == 0)
        throw DataError("codebook needs at least one entry");
    if (N < k)
        throw DataError("cannot build " + std::to_string(k) + " codebook entries from " +
                        std::to_string(N) + " vectors");
    for (float v : vectors)
        if (!std::isfinite(v))
            throw NumericalError("non-finite value in codebook input");

    std::mt19937_64 rng(seed);
    Codebook cb;
    cb.dim = dim;
    cb.entries = seed_plus_plus(vectors, dim, k, rng);

    std::vector<double> dist;
    assign_rows(vectors, dim, cb.entries, cb.assignment, dist);
    cb.error_history.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));

    std::vector<double> sums(k * dim);
    std::vector<std::size_t> counts(k);
    for (int it = 1; it < iterations; ++it) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < N; ++i) {
            const std::uint32_t a = cb.assignment[i];
            ++counts[a];
            for (int d = 0; d < dim; ++d)
                sums[a * dim + d] += vectors[i * dim + d];
        }

        std::vector<std::size_t> empty;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                empty.push_back(c);
                continue;
            }
            for (int d = 0; d < dim; ++d)
                cb.entries[c * dim + d] = static_cast<float>(sums[c * dim + d] / counts[c]);
        }
        if (!empty.empty()) {
            // Worst-fit points, farthest first, lower index on ties.
            std::vector<std::size_t> order(N);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
            std::size_t next = 0;
            for (std::size_t c : empty) {
                if (next >= N || dist[order[next]] <= 0.0)
                    break;
                const std::size_t p = order[next++];
                std::copy_n(vectors.begin() + static_cast<std::ptrdiff_t>(p * dim), dim,
                            cb.entries.begin() + static_cast<std::ptrdiff_t>(c * dim));
            }
            spdlog::debug("k-means iteration {}: reseeded {} empty clusters", it, empty.size());
        }

        std::vector<std::uint32_t> previous = cb.assignment;
        assign_rows(vectors, dim, cb.entries, cb.assignment, dist);
        cb.error_history.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
        if (cb.assignment == previous && empty.empty())
            break;
    }
    return cb;
}

// ---------------------------------------------------------------------------

std::vector<float> geometry_vectors(const GaussianScene &scene) {
    std::vector<float> out(scene.size() * kGeometryDim);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const Gaussian &g = scene.gaussians[i];
        float *v = out.data() + i * kGeometryDim;
        const float sign = g.rotation[0] < 0.0f ? -1.0f : 1.0f;
        for (int a = 0; a < 3; ++a)
            v[a] = g.log_scale[a];
        for (int a = 0; a < 4; ++a)
            v[3 + a] = sign * g.rotation[a];
    }
    return out;
}

namespace {

void check_latent(const GaussianScene &scene) {
    if (scene.empty())
        throw DataError("empty scene");
    if (scene.payload_dim != 3)
        throw DataError("vector quantization expects a 3-channel latent scene, got payload_dim " +
                        std::to_string(scene.payload_dim));
}

void store_geometry(VqBundle &b, const GaussianScene &scene) {
    b.positions.resize(scene.size());
    b.opacity_logits.resize(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        Eigen::Vector3f p = scene.gaussians[i].position;
        if (b.half_positions)
            for (int a = 0; a < 3; ++a)
                p[a] = static_cast<float>(Eigen::half(p[a]));
        b.positions[i] = p;
        b.opacity_logits[i] = scene.gaussians[i].opacity_logit;
    }
    b.meta = {scene.meta.source, SceneStage::Quantized};
}

} // namespace

VqBundle quantize_scene(const GaussianScene &scene, const QuantizeConfig &cfg) {
    check_latent(scene);
    const std::size_t N = scene.size();
    const std::size_t kg = std::min(cfg.k_geometry, N);
    const std::size_t kl = std::min(cfg.k_latent, N);
    if (kg == 0 || kl == 0)
        throw DataError("codebook sizes must be positive");
    if (kg < cfg.k_geometry || kl < cfg.k_latent)
        spdlog::info("quantize: {} Gaussians, codebooks capped at {} / {}", N, kg, kl);

    VqBundle b;
    b.half_positions = cfg.half_positions;
    b.geometry = build_codebook(geometry_vectors(scene), kGeometryDim, kg, cfg.iterations, cfg.seed);
    b.latent = build_codebook(scene.payload, 3, kl, cfg.iterations, cfg.seed + 1);
    store_geometry(b, scene);
    return b;
}

VqBundle quantize_with(const GaussianScene &scene, const VqBundle &codebooks) {
    check_latent(scene);
    VqBundle b;
    b.half_positions = codebooks.half_positions;
    b.geometry.dim = kGeometryDim;
    b.geometry.entries = codebooks.geometry.entries;
    b.geometry.assignment =
        assign_to_codebook(geometry_vectors(scene), kGeometryDim, b.geometry.entries);
    b.latent.dim = 3;
    b.latent.entries = codebooks.latent.entries;
    b.latent.assignment = assign_to_codebook(scene.payload, 3, b.latent.entries);
    store_geometry(b, scene);
    return b;
}

GaussianScene dequantize(const VqBundle &b) {
    const std::size_t N = b.size();
    if (N == 0)
        throw DataError("empty bundle");
    if (b.geometry.assignment.size() != N || b.latent.assignment.size() != N ||
        b.opacity_logits.size() != N)
        throw FormatError("bundle arrays disagree on the Gaussian count");
    GaussianScene s;
    s.payload_dim = 3;
    s.meta = {b.meta.source, SceneStage::Latent};
    s.gaussians.resize(N);
    s.payload.resize(N * 3);
    for (std::size_t i = 0; i < N; ++i) {
        Gaussian &g = s.gaussians[i];
        g.position = b.positions[i];
        g.opacity_logit = b.opacity_logits[i];
        const auto geo = b.geometry.entry(b.geometry.assignment[i]);
        g.log_scale = {geo[0], geo[1], geo[2]};
        g.rotation = {geo[3], geo[4], geo[5], geo[6]};
        const auto lat = b.latent.entry(b.latent.assignment[i]);
        std::copy(lat.begin(), lat.end(), s.payload.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Bundle file

namespace {
constexpr char kVqMagic[4] = {'C', 'F', 'V', 'Q'};
constexpr std::uint32_t kVqVersion = 1;
constexpr std::size_t kVqHeaderBytes = 32;
} // namespace

std::size_t index_bytes(std::size_t k) {
    if (k <= 256)
        return 1;
    if (k <= 65536)
        return 2;
    return 4;
}

std::size_t bundle_bytes(std::size_t n, std::size_t kGeometry, std::size_t kLatent,
                         bool halfPositions) {
    return kVqHeaderBytes + 4 * (kGeometryDim * kGeometry + 3 * kLatent) +
           n * (index_bytes(kGeometry) + index_bytes(kLatent)) + 3 * n * (halfPositions ? 2 : 4) +
           4 * n;
}

namespace {

void write_indices(std::ofstream &out, std::span<const std::uint32_t> idx, std::size_t k) {
    const std::size_t w = index_bytes(k);
    std::vector<char> buf(idx.size() * w);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::uint32_t v = idx[i];
        std::memcpy(buf.data() + i * w, &v, w); // little-endian host: low bytes first
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<std::uint32_t> read_indices(std::ifstream &in, std::size_t n, std::size_t k) {
    const std::size_t w = index_bytes(k);
    std::vector<char> buf(n * w);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    std::vector<std::uint32_t> idx(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::memcpy(&idx[i], buf.data() + i * w, w);
        if (idx[i] >= k)
            throw FormatError("codebook index out of range");
    }
    return idx;
}

template <typename T> void write_raw(std::ofstream &out, const T *p, std::size_t count) {
    out.write(reinterpret_cast<const char *>(p), static_cast<std::streamsize>(count * sizeof(T)));
}

} // namespace

void save_bundle(const VqBundle &b, const std::filesystem::path &path) {
    const std::size_t N = b.size();
    const std::size_t kg = b.geometry.size(), kl = b.latent.size();
    if (N == 0 || kg == 0 || kl == 0)
        throw DataError("refusing to write an empty bundle");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("cannot write " + path.string());
    const std::uint32_t hdr[7] = {kVqVersion,
                                  static_cast<std::uint32_t>(N),
                                  b.half_positions ? 1u : 0u,
                                  static_cast<std::uint32_t>(kg),
                                  static_cast<std::uint32_t>(kl),
                                  static_cast<std::uint32_t>(kGeometryDim),
                                  3u};
    out.write(kVqMagic, 4);
    write_raw(out, hdr, 7);
    write_raw(out, b.geometry.entries.data(), b.geometry.entries.size());
    write_raw(out, b.latent.entries.data(), b.latent.entries.size());
    write_indices(out, b.geometry.assignment, kg);
    write_indices(out, b.latent.assignment, kl);
    if (b.half_positions) {
        std::vector<std::uint16_t> h(N * 3);
        for (std::size_t i = 0; i < N; ++i)
            for (int a = 0; a < 3; ++a)
                h[i * 3 + a] = Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(b.positions[i][a]));
        write_raw(out, h.data(), h.size());
    } else {
        for (const Eigen::Vector3f &p : b.positions)
            write_raw(out, p.data(), 3);
    }
    write_raw(out, b.opacity_logits.data(), N);
    if (!out)
        throw FormatError("write failed for " + path.string());
}

VqBundle load_bundle(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in)
        throw FormatError("cannot open bundle " + path.string());
    const auto fileSize = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    char magic[4];
    std::uint32_t hdr[7];
    in.read(magic, 4);
    in.read(reinterpret_cast<char *>(hdr), sizeof(hdr));
    if (!in || std::memcmp(magic, kVqMagic, 4) != 0)
        throw FormatError("bad magic in " + path.string());
    if (hdr[0] != kVqVersion)
        throw FormatError("unsupported CFVQ version " + std::to_string(hdr[0]));
    const std::size_t N = hdr[1], kg = hdr[3], kl = hdr[4];
    const bool half = (hdr[2] & 1u) != 0;
    if (hdr[5] != kGeometryDim || hdr[6] != 3)
        throw FormatError("unexpected codebook dimensions in " + path.string());
    if (N == 0 || kg == 0 || kl == 0)
        throw FormatError("zero count in " + path.string());
    if (fileSize != bundle_bytes(N, kg, kl, half))
        throw FormatError("size mismatch in " + path.string());

    VqBundle b;
    b.half_positions = half;
    b.meta.stage = SceneStage::Quantized;
    b.geometry.dim = kGeometryDim;
    b.geometry.entries.resize(kg * kGeometryDim);
    b.latent.dim = 3;
    b.latent.entries.resize(kl * 3);
    in.read(reinterpret_cast<char *>(b.geometry.entries.data()),
            static_cast<std::streamsize>(b.geometry.entries.size() * 4));
    in.read(reinterpret_cast<char *>(b.latent.entries.data()),
            static_cast<std::streamsize>(b.latent.entries.size() * 4));
    for (float v : b.geometry.entries)
        if (!std::isfinite(v))
            throw FormatError("non-finite codebook entry in " + path.string());
    for (float v : b.latent.entries)
        if (!std::isfinite(v))
            throw FormatError("non-finite codebook entry in " + path.string());
    b.geometry.assignment = read_indices(in, N, kg);
    b.latent.assignment = read_indices(in, N, kl);
    b.positions.resize(N);
    if (half) {
        std::vector<std::uint16_t> h(N * 3);
        in.read(reinterpret_cast<char *>(h.data()), static_cast<std::streamsize>(h.size() * 2));
        for (std::size_t i = 0; i < N; ++i)
            for (int a = 0; a < 3; ++a)
                b.positions[i][a] =
                    static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(h[i * 3 + a]));
    } else {
        for (Eigen::Vector3f &p : b.positions)
            in.read(reinterpret_cast<char *>(p.data()), 12);
    }
    b.opacity_logits.resize(N);
    in.read(reinterpret_cast<char *>(b.opacity_logits.data()), static_cast<std::streamsize>(N * 4));
    if (!in)
        throw FormatError("truncated bundle " + path.string());
    return b;
}

} // namespace featsplat
