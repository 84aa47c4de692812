// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/synthetic.hpp"

#include "featsplat/rasterizer.hpp"

#include <spdlog/fmt/fmt.h>

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace featsplat {

SynthSpec SynthSpec::room() {
    SynthSpec s;
    s.boxes = {
        {{-2.0f, -2.0f, 0.0f}, {2.0f, 2.0f, 0.0f}, "floor"},
        {{-1.5f, -1.5f, 0.0f}, {-0.5f, -0.5f, 1.0f}, "cabinet"},
        {{0.4f, -1.2f, 0.0f}, {1.6f, 0.2f, 0.6f}, "table"},
        {{-0.8f, 0.6f, 0.0f}, {0.4f, 1.6f, 1.4f}, "shelf"},
    };
    return s;
}

Camera look_at(const Eigen::Vector3f &eye, const Eigen::Vector3f &target, int width, int height,
               float fovDegrees, std::string id) {
    const Eigen::Vector3f forward = (target - eye).normalized();
    Eigen::Vector3f right = forward.cross(Eigen::Vector3f::UnitZ());
    if (right.norm() < 1e-6f)
        throw DataError("look_at: view direction is parallel to the up axis");
    right.normalize();
    const Eigen::Vector3f down = forward.cross(right);
    Camera cam;
    cam.id = std::move(id);
    cam.width = width;
    cam.height = height;
    const float focal =
        0.5f * static_cast<float>(width) / std::tan(0.5f * fovDegrees * static_cast<float>(M_PI) / 180.0f);
    cam.fx = cam.fy = focal;
    cam.cx = 0.5f * width;
    cam.cy = 0.5f * height;
    cam.R.row(0) = right;
    cam.R.row(1) = down;
    cam.R.row(2) = forward;
    cam.t = -cam.R * eye;
    return cam;
}

namespace {

struct Sample {
    Eigen::Vector3f position;
    Eigen::Vector3f scale;
    int label;
};

bool inside_footprint(const SynthBox &b, float x, float y) {
    return x > b.min.x() && x < b.max.x() && y > b.min.y() && y < b.max.y();
}

// Samples one rectangular face on a regular grid inset by half a cell. `u` and `v` are
// the in-plane axes, `n` the normal axis held at `level`.
void sample_face(const SynthSpec &spec, int label, int u, int v, int n, float level,
                 const Eigen::Vector3f &lo, const Eigen::Vector3f &hi, std::vector<Sample> &out,
                 const std::vector<SynthBox> &occluders) {
    const float lu = hi[u] - lo[u], lv = hi[v] - lo[v];
    const int nu = std::max(1, static_cast<int>(std::ceil(lu / spec.spacing)));
    const int nv = std::max(1, static_cast<int>(std::ceil(lv / spec.spacing)));
    const float du = lu / nu, dv = lv / nv;
    for (int j = 0; j < nv; ++j) {
        for (int i = 0; i < nu; ++i) {
            Sample s;
            s.position[u] = lo[u] + (i + 0.5f) * du;
            s.position[v] = lo[v] + (j + 0.5f) * dv;
            s.position[n] = level;
            // Footprints stay inside the face: the extent ellipse never crosses a face
            // edge or the base of a box standing on it.
            float margin = std::numeric_limits<float>::infinity();
            if (n == 2) {
                bool hidden = false;
                for (const SynthBox &b : occluders) {
                    if (!(b.max.z() > level && b.min.z() <= level))
                        continue;
                    hidden |= inside_footprint(b, s.position.x(), s.position.y());
                    const float ex = std::max({b.min.x() - s.position.x(), 0.0f, s.position.x() - b.max.x()});
                    const float ey = std::max({b.min.y() - s.position.y(), 0.0f, s.position.y() - b.max.y()});
                    margin = std::min(margin, std::hypot(ex, ey));
                }
                // Too close to a box base to carry a footprint wider than a sliver.
                if (hidden || margin < std::min(du, dv))
                    continue;
            }
            const float edgeU = std::min(i + 0.5f, nu - i - 0.5f) * du;
            const float edgeV = std::min(j + 0.5f, nv - j - 0.5f) * dv;
            const float reach = spec.edge_sigmas;
            s.scale[u] = std::min({spec.footprint * du, edgeU / reach, margin / reach});
            s.scale[v] = std::min({spec.footprint * dv, edgeV / reach, margin / reach});
            s.scale[n] = spec.flatness * spec.footprint * std::min(du, dv);
            s.label = label;
            out.push_back(s);
        }
    }
}

std::vector<Eigen::VectorXf> label_features(int count, int dim, std::mt19937_64 &rng) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<Eigen::VectorXf> out;
    int attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > 100000)
            throw DataError("cannot draw label features with pairwise cosine below 0.9");
        Eigen::VectorXf v(dim);
        for (int d = 0; d < dim; ++d)
            v[d] = normal(rng);
        // Orthogonalize while the dimension allows it.
        if (static_cast<int>(out.size()) < dim)
            for (const Eigen::VectorXf &u : out)
                v -= u.dot(v) * u;
        if (v.norm() < 1e-3f)
            continue;
        v.normalize();
        bool ok = true;
        for (const Eigen::VectorXf &u : out)
            ok &= u.dot(v) < 0.9f;
        if (ok)
            out.push_back(v);
    }
    return out;
}

} // namespace

SynthScene generate_synthetic(const SynthSpec &spec, std::uint64_t seed) {
    if (spec.boxes.empty())
        throw DataError("synthetic layout has no boxes");
    if (!(spec.spacing > 0.0f) || !(spec.footprint > 0.0f) || !(spec.flatness > 0.0f))
        throw DataError("synthetic spacing and footprint must be positive");
    if (!(spec.opacity > 0.0f && spec.opacity < 1.0f))
        throw DataError("synthetic opacity must lie in (0, 1)");
    if (spec.feature_dim < 1 || spec.camera_count < 1 || spec.width < 1 || spec.height < 1)
        throw DataError("synthetic dimensions must be positive");
    if (!(spec.clone_fraction >= 0.0f && spec.clone_fraction <= 1.0f) || !(spec.jitter >= 0.0f))
        throw DataError("clone fraction must lie in [0, 1] and jitter must be non-negative");
    std::set<std::string> names;
    for (const SynthBox &b : spec.boxes) {
        if (!(b.max.x() > b.min.x() && b.max.y() > b.min.y() && b.max.z() >= b.min.z()))
            throw DataError("degenerate box " + b.label);
        if (!names.insert(b.label).second)
            throw DataError("duplicate label " + b.label);
    }

    std::mt19937_64 rng(seed);
    const int L = static_cast<int>(spec.boxes.size());

    std::vector<Sample> samples;
    for (int l = 0; l < L; ++l) {
        const SynthBox &b = spec.boxes[l];
        std::vector<SynthBox> others;
        for (int k = 0; k < L; ++k)
            if (k != l)
                others.push_back(spec.boxes[k]);
        sample_face(spec, l, 0, 1, 2, b.max.z(), b.min, b.max, samples, others);
        if (b.max.z() == b.min.z())
            continue;
        sample_face(spec, l, 1, 2, 0, b.min.x(), b.min, b.max, samples, others);
        sample_face(spec, l, 1, 2, 0, b.max.x(), b.min, b.max, samples, others);
        sample_face(spec, l, 0, 2, 1, b.min.y(), b.min, b.max, samples, others);
        sample_face(spec, l, 0, 2, 1, b.max.y(), b.min, b.max, samples, others);
    }
    if (samples.empty())
        throw DataError("synthetic layout produced no Gaussians");

    SynthScene out;
    std::vector<Eigen::Vector3f> colors(L);
    std::uniform_real_distribution<float> unit(0.1f, 0.9f);
    for (auto &c : colors)
        c = {unit(rng), unit(rng), unit(rng)};
    const auto features = label_features(L, spec.feature_dim, rng);

    out.queries.dim = spec.feature_dim;
    for (int l = 0; l < L; ++l) {
        out.queries.names.push_back(spec.boxes[l].label);
        out.queries.vectors.insert(out.queries.vectors.end(), features[l].data(),
                                   features[l].data() + spec.feature_dim);
    }

    GaussianScene &scene = out.donor;
    scene.payload_dim = 3;
    scene.meta = {fmt::format("synthetic-room-s{}", seed), SceneStage::Donor};
    const float opacityLogit = logit(spec.opacity);
    auto append = [&](const Sample &s) {
        Gaussian g;
        g.position = s.position;
        g.log_scale = s.scale.array().log();
        g.opacity_logit = opacityLogit;
        scene.gaussians.push_back(g);
        scene.payload.insert(scene.payload.end(), colors[s.label].data(), colors[s.label].data() + 3);
        out.gaussian_labels.push_back(s.label);
    };
    for (const Sample &s : samples)
        append(s);
    const auto cloneCount = static_cast<std::size_t>(
        std::llround(static_cast<double>(spec.clone_fraction) * samples.size()));
    if (cloneCount > 0) {
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(cloneCount);
        std::sort(order.begin(), order.end());
        for (std::size_t i : order)
            append(samples[i]);
    }

    // Cameras on an elevated orbit around the target.
    const float elev = spec.elevation_degrees * static_cast<float>(M_PI) / 180.0f;
    for (int v = 0; v < spec.camera_count; ++v) {
        const float az = 2.0f * static_cast<float>(M_PI) * (v + 0.5f) / spec.camera_count;
        const Eigen::Vector3f eye =
            spec.target + spec.orbit_radius * Eigen::Vector3f(std::cos(elev) * std::cos(az),
                                                              std::cos(elev) * std::sin(az),
                                                              std::sin(elev));
        out.cameras.push_back(
            look_at(eye, spec.target, spec.width, spec.height, spec.fov_degrees, fmt::format("view_{:03d}", v)));
    }

    // Ground truth from a one-hot label render; a pixel is labeled when it is at least
    // half covered.
    GaussianScene onehot;
    onehot.gaussians = scene.gaussians;
    onehot.payload_dim = L;
    onehot.payload.assign(scene.size() * L, 0.0f);
    for (std::size_t i = 0; i < scene.size(); ++i)
        onehot.payload[i * L + out.gaussian_labels[i]] = 1.0f;

    std::normal_distribution<float> noise(0.0f, 1.0f);
    for (const Camera &cam : out.cameras) {
        const RenderOutput r = render(onehot, cam);
        const std::size_t P = r.image.pixel_count();
        std::vector<int> labels(P, kBackground);
        FeatureMap map{Image(cam.height, cam.width, spec.feature_dim), std::vector<std::uint8_t>(P, 0)};
        for (std::size_t p = 0; p < P; ++p) {
            if (1.0f - r.transmittance.data[p] < 0.5f)
                continue;
            const auto px = r.image.pixel(p);
            const int label = static_cast<int>(std::max_element(px.begin(), px.end()) - px.begin());
            labels[p] = label;
            Eigen::VectorXf f = features[label];
            if (spec.jitter > 0.0f)
                for (int d = 0; d < spec.feature_dim; ++d)
                    f[d] += spec.jitter * noise(rng);
            f.normalize();
            std::copy(f.data(), f.data() + spec.feature_dim, map.image.pixel(p).begin());
            map.valid[p] = 1;
        }
        out.labels.push_back(std::move(labels));
        out.maps.push_back(std::move(map));
    }
    return out;
}

std::filesystem::path feature_map_path(const std::filesystem::path &dir, std::size_t view) {
    return dir / "features" / fmt::format("{:03d}.cffm", view);
}

std::filesystem::path label_map_path(const std::filesystem::path &dir, std::size_t view) {
    return dir / "labels" / fmt::format("{:03d}.cffm", view);
}

void save_synthetic(const SynthScene &synth, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir / "features");
    std::filesystem::create_directories(dir / "labels");
    save_scene(synth.donor, dir / "scene.ply");
    save_cameras(synth.cameras, dir / "cameras.json");
    save_queries(synth.queries, dir / "queries.json");
    for (std::size_t v = 0; v < synth.cameras.size(); ++v) {
        save_cffm(synth.maps[v].image, feature_map_path(dir, v));
        save_label_map(synth.labels[v], synth.cameras[v].height, synth.cameras[v].width,
                       label_map_path(dir, v));
    }
}

} // namespace featsplat
