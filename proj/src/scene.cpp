// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/scene.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

namespace featsplat {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

const char *stage_name(SceneStage stage) {
    switch (stage) {
    case SceneStage::Donor:
        return "donor";
    case SceneStage::Lifted:
        return "lifted";
    case SceneStage::Latent:
        return "latent";
    case SceneStage::Quantized:
        return "quantized";
    }
    return "donor";
}

SceneStage parse_stage(const std::string &name) {
    if (name == "lifted")
        return SceneStage::Lifted;
    if (name == "latent")
        return SceneStage::Latent;
    if (name == "quantized")
        return SceneStage::Quantized;
    return SceneStage::Donor;
}

GaussianScene GaussianScene::subset(std::span<const std::uint8_t> keep) const {
    GaussianScene out;
    out.payload_dim = payload_dim;
    out.meta = meta;
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
        if (!keep[i])
            continue;
        out.gaussians.push_back(gaussians[i]);
        auto p = payload_of(i);
        out.payload.insert(out.payload.end(), p.begin(), p.end());
    }
    return out;
}

Eigen::Matrix3f rotation_matrix(const Eigen::Vector4f &q) {
    const Eigen::Vector4f n = q / q.norm();
    const float w = n[0], x = n[1], y = n[2], z = n[3];
    Eigen::Matrix3f R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

Eigen::Matrix3f covariance(const Gaussian &g) {
    const Eigen::Matrix3f M = rotation_matrix(g.rotation) * g.scale().asDiagonal();
    Eigen::Matrix3f S = M * M.transpose();
    // Force exact symmetry against rounding in the product.
    S = 0.5f * (S + S.transpose()).eval();
    return S;
}

Eigen::Matrix3d covariance_d(const Gaussian &g) {
    const Eigen::Vector4d q = g.rotation.cast<double>().normalized();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix3d R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    const Eigen::Vector3d s = g.log_scale.cast<double>().array().exp();
    const Eigen::Matrix3d M = R * s.asDiagonal();
    Eigen::Matrix3d S = M * M.transpose();
    S = 0.5 * (S + S.transpose()).eval();
    return S;
}

void Camera::validate() const {
    if (width <= 0 || height <= 0)
        throw DataError("camera " + id + ": non-positive image size");
    if (!(fx > 0) || !(fy > 0))
        throw DataError("camera " + id + ": focal lengths must be positive");
    if (!(cx > 0 && cx < width && cy > 0 && cy < height))
        throw DataError("camera " + id + ": principal point outside the image");
    if (!R.allFinite() || !t.allFinite())
        throw DataError("camera " + id + ": non-finite pose");
    const float err = (R * R.transpose() - Eigen::Matrix3f::Identity()).cwiseAbs().maxCoeff();
    if (err > 1e-5f)
        throw DataError("camera " + id + ": rotation is not orthonormal");
}

// ---------------------------------------------------------------------------
// PLY

namespace {

struct PlyProperty {
    std::string name;
    std::string type;
    std::size_t offset = 0;
    std::size_t size = 0;
};

std::size_t ply_type_size(const std::string &type) {
    if (type == "char" || type == "uchar" || type == "int8" || type == "uint8")
        return 1;
    if (type == "short" || type == "ushort" || type == "int16" || type == "uint16")
        return 2;
    if (type == "int" || type == "uint" || type == "float" || type == "int32" || type == "uint32" ||
        type == "float32")
        return 4;
    if (type == "double" || type == "float64")
        return 8;
    throw FormatError("unsupported PLY property type " + type);
}

double read_ply_value(const char *ptr, const std::string &type) {
    auto load = [ptr]<typename T>(T) {
        T v;
        std::memcpy(&v, ptr, sizeof(T));
        return static_cast<double>(v);
    };
    if (type == "char" || type == "int8")
        return load(std::int8_t{});
    if (type == "uchar" || type == "uint8")
        return load(std::uint8_t{});
    if (type == "short" || type == "int16")
        return load(std::int16_t{});
    if (type == "ushort" || type == "uint16")
        return load(std::uint16_t{});
    if (type == "int" || type == "int32")
        return load(std::int32_t{});
    if (type == "uint" || type == "uint32")
        return load(std::uint32_t{});
    if (type == "double" || type == "float64")
        return load(double{});
    return load(float{});
}

} // namespace

GaussianScene load_scene(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open scene " + path.string());

    std::string line;
    std::getline(in, line);
    if (line != "ply")
        throw FormatError("not a PLY file: " + path.string());

    SceneMeta meta;
    std::size_t vertexCount = 0;
    std::vector<PlyProperty> props;
    std::size_t stride = 0;
    bool inVertex = false;
    bool sawVertex = false;
    bool binaryLE = false;

    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line == "end_header")
            break;
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "format") {
            std::string fmt;
            ls >> fmt;
            binaryLE = fmt == "binary_little_endian";
        } else if (word == "comment") {
            std::string key;
            while (ls >> key) {
                if (key.rfind("stage=", 0) == 0)
                    meta.stage = parse_stage(key.substr(6));
                else if (key.rfind("source=", 0) == 0)
                    meta.source = key.substr(7);
            }
        } else if (word == "element") {
            std::string name;
            std::size_t count = 0;
            ls >> name >> count;
            // Elements after the vertex block are ignored; elements before it would shift
            // the vertex data offset.
            if (!sawVertex && name != "vertex")
                throw FormatError("vertex must be the first PLY element");
            inVertex = name == "vertex";
            if (inVertex) {
                sawVertex = true;
                vertexCount = count;
            }
        } else if (word == "property" && inVertex) {
            std::string type, name;
            ls >> type;
            if (type == "list")
                throw FormatError("list properties are not supported in the vertex element");
            ls >> name;
            PlyProperty p{name, type, stride, ply_type_size(type)};
            stride += p.size;
            props.push_back(p);
        }
    }
    if (!binaryLE)
        throw FormatError("scene PLY must be binary_little_endian: " + path.string());
    if (!sawVertex || vertexCount == 0)
        throw DataError("empty scene: " + path.string());

    std::map<std::string, const PlyProperty *> byName;
    for (const auto &p : props)
        byName[p.name] = &p;
    auto require = [&](const std::string &name) -> const PlyProperty & {
        auto it = byName.find(name);
        if (it == byName.end())
            throw FormatError("missing property " + name);
        return *it->second;
    };

    const PlyProperty &px = require("x"), &py = require("y"), &pz = require("z");
    std::vector<const PlyProperty *> payloadProps;
    if (byName.count("feat_0")) {
        for (int d = 0; byName.count("feat_" + std::to_string(d)); ++d)
            payloadProps.push_back(byName["feat_" + std::to_string(d)]);
    } else {
        for (int d = 0; d < 3; ++d)
            payloadProps.push_back(&require("f_dc_" + std::to_string(d)));
    }
    const PlyProperty &pop = require("opacity");
    const PlyProperty *ps[3], *pr[4];
    for (int k = 0; k < 3; ++k)
        ps[k] = &require("scale_" + std::to_string(k));
    for (int k = 0; k < 4; ++k)
        pr[k] = &require("rot_" + std::to_string(k));

    std::vector<char> buffer(vertexCount * stride);
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    if (static_cast<std::size_t>(in.gcount()) != buffer.size())
        throw FormatError("truncated vertex data in " + path.string());

    GaussianScene scene;
    scene.meta = meta;
    scene.payload_dim = static_cast<int>(payloadProps.size());
    scene.gaussians.resize(vertexCount);
    scene.payload.resize(vertexCount * payloadProps.size());

    // Fast path for float properties keeps round trips bit-exact.
    auto get = [](const char *row, const PlyProperty &p) -> float {
        if (p.type == "float" || p.type == "float32") {
            float v;
            std::memcpy(&v, row + p.offset, 4);
            return v;
        }
        return static_cast<float>(read_ply_value(row + p.offset, p.type));
    };

    for (std::size_t i = 0; i < vertexCount; ++i) {
        const char *row = buffer.data() + i * stride;
        Gaussian &g = scene.gaussians[i];
        g.position = {get(row, px), get(row, py), get(row, pz)};
        for (int k = 0; k < 3; ++k)
            g.log_scale[k] = get(row, *ps[k]);
        for (int k = 0; k < 4; ++k)
            g.rotation[k] = get(row, *pr[k]);
        g.opacity_logit = get(row, pop);
        for (std::size_t d = 0; d < payloadProps.size(); ++d)
            scene.payload[i * payloadProps.size() + d] = get(row, *payloadProps[d]);

        const float n = g.rotation.norm();
        if (!(n > 0.0f) || !std::isfinite(n))
            throw FormatError("degenerate quaternion at vertex " + std::to_string(i));
        if (std::abs(n - 1.0f) > 1e-6f)
            g.rotation /= n;
    }
    return scene;
}

void save_scene(const GaussianScene &scene, const std::filesystem::path &path) {
    if (scene.empty())
        throw DataError("refusing to save an empty scene");
    if (scene.payload.size() != scene.size() * static_cast<std::size_t>(scene.payload_dim))
        throw DataError("payload size does not match payload_dim");

    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("cannot write scene " + path.string());

    const bool colorLayout = scene.payload_dim == 3;
    std::ostringstream header;
    header << "ply\nformat binary_little_endian 1.0\n";
    header << "comment featsplat stage=" << stage_name(scene.meta.stage)
           << " source=" << (scene.meta.source.empty() ? "unknown" : scene.meta.source) << "\n";
    header << "element vertex " << scene.size() << "\n";
    for (const char *n : {"x", "y", "z"})
        header << "property float " << n << "\n";
    for (int d = 0; d < scene.payload_dim; ++d)
        header << "property float " << (colorLayout ? "f_dc_" : "feat_") << d << "\n";
    header << "property float opacity\n";
    for (int k = 0; k < 3; ++k)
        header << "property float scale_" << k << "\n";
    for (int k = 0; k < 4; ++k)
        header << "property float rot_" << k << "\n";
    header << "end_header\n";
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));

    const std::size_t floatsPerRow = 3 + scene.payload_dim + 1 + 3 + 4;
    std::vector<float> row(floatsPerRow);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const Gaussian &g = scene.gaussians[i];
        std::size_t k = 0;
        for (int a = 0; a < 3; ++a)
            row[k++] = g.position[a];
        for (float v : scene.payload_of(i))
            row[k++] = v;
        row[k++] = g.opacity_logit;
        for (int a = 0; a < 3; ++a)
            row[k++] = g.log_scale[a];
        for (int a = 0; a < 4; ++a)
            row[k++] = g.rotation[a];
        out.write(reinterpret_cast<const char *>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out)
        throw FormatError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Cameras

std::vector<Camera> load_cameras(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open cameras " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("camera JSON: ") + e.what());
    }
    if (!j.is_array())
        throw FormatError("camera JSON must be an array");

    std::vector<Camera> cams;
    try {
        for (const auto &c : j) {
            Camera cam;
            cam.id = c.at("id").get<std::string>();
            cam.width = c.at("width").get<int>();
            cam.height = c.at("height").get<int>();
            cam.fx = c.at("fx").get<float>();
            cam.fy = c.at("fy").get<float>();
            cam.cx = c.at("cx").get<float>();
            cam.cy = c.at("cy").get<float>();
            const auto R = c.at("R").get<std::vector<float>>();
            const auto t = c.at("t").get<std::vector<float>>();
            if (R.size() != 9 || t.size() != 3)
                throw FormatError("camera " + cam.id + ": R needs 9 and t needs 3 values");
            for (int r = 0; r < 3; ++r) {
                for (int col = 0; col < 3; ++col)
                    cam.R(r, col) = R[r * 3 + col];
                cam.t[r] = t[r];
            }
            cam.validate();
            cams.push_back(std::move(cam));
        }
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("camera JSON: ") + e.what());
    }
    return cams;
}

void save_cameras(std::span<const Camera> cameras, const std::filesystem::path &path) {
    nlohmann::json j = nlohmann::json::array();
    for (const Camera &c : cameras) {
        std::vector<float> R(9), t(3);
        for (int r = 0; r < 3; ++r) {
            for (int col = 0; col < 3; ++col)
                R[r * 3 + col] = c.R(r, col);
            t[r] = c.t[r];
        }
        j.push_back({{"id", c.id},
                     {"width", c.width},
                     {"height", c.height},
                     {"fx", c.fx},
                     {"fy", c.fy},
                     {"cx", c.cx},
                     {"cy", c.cy},
                     {"R", R},
                     {"t", t}});
    }
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write cameras " + path.string());
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// CFFM feature maps

namespace {
constexpr char kCffmMagic[4] = {'C', 'F', 'F', 'M'};
constexpr std::uint32_t kCffmVersion = 1;
} // namespace

Image load_cffm_raw(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in)
        throw FormatError("cannot open feature map " + path.string());
    const auto fileSize = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);

    char magic[4];
    std::uint32_t hdr[4];
    in.read(magic, 4);
    in.read(reinterpret_cast<char *>(hdr), sizeof(hdr));
    if (!in || std::memcmp(magic, kCffmMagic, 4) != 0)
        throw FormatError("bad magic in " + path.string());
    if (hdr[0] != kCffmVersion)
        throw FormatError("unsupported CFFM version " + std::to_string(hdr[0]));
    const std::uint64_t H = hdr[1], W = hdr[2], D = hdr[3];
    if (H == 0 || W == 0 || D == 0)
        throw FormatError("zero dimension in " + path.string());
    const std::uint64_t limit = std::numeric_limits<std::int32_t>::max();
    if (H > limit || W > limit || D > limit || H * W > limit || H * W * D > limit / 4)
        throw FormatError("dimension overflow in " + path.string());
    const std::uint64_t expected = H * W * D * 4;
    if (fileSize - 20 != expected)
        throw FormatError("size mismatch in " + path.string() + ": header says " +
                          std::to_string(expected) + " bytes, file has " +
                          std::to_string(fileSize - 20));

    Image img(static_cast<int>(H), static_cast<int>(W), static_cast<int>(D));
    in.read(reinterpret_cast<char *>(img.data.data()), static_cast<std::streamsize>(expected));
    for (float v : img.data)
        if (!std::isfinite(v))
            throw FormatError("non-finite value in " + path.string());
    return img;
}

std::vector<std::uint8_t> normalize_pixels(Image &image) {
    std::vector<std::uint8_t> valid(image.pixel_count(), 0);
    for (std::size_t p = 0; p < image.pixel_count(); ++p) {
        auto px = image.pixel(p);
        double sq = 0.0;
        for (float v : px)
            sq += static_cast<double>(v) * v;
        if (sq <= 0.0)
            continue;
        const double inv = 1.0 / std::sqrt(sq);
        for (float &v : px)
            v = static_cast<float>(v * inv);
        valid[p] = 1;
    }
    return valid;
}

FeatureMap load_feature_map(const std::filesystem::path &path) {
    FeatureMap map;
    map.image = load_cffm_raw(path);
    map.valid = normalize_pixels(map.image);
    return map;
}

void save_cffm(const Image &image, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("cannot write " + path.string());
    const std::uint32_t hdr[4] = {kCffmVersion, static_cast<std::uint32_t>(image.height),
                                  static_cast<std::uint32_t>(image.width),
                                  static_cast<std::uint32_t>(image.channels)};
    out.write(kCffmMagic, 4);
    out.write(reinterpret_cast<const char *>(hdr), sizeof(hdr));
    out.write(reinterpret_cast<const char *>(image.data.data()),
              static_cast<std::streamsize>(image.data.size() * sizeof(float)));
    if (!out)
        throw FormatError("write failed for " + path.string());
}

SceneBounds scene_bounds(const GaussianScene &scene) {
    SceneBounds b;
    b.min = Eigen::Vector3f::Constant(std::numeric_limits<float>::max());
    b.max = Eigen::Vector3f::Constant(std::numeric_limits<float>::lowest());
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (const Gaussian &g : scene.gaussians) {
        b.min = b.min.cwiseMin(g.position);
        b.max = b.max.cwiseMax(g.position);
        sum += g.position.cast<double>();
    }
    b.centroid = scene.empty() ? Eigen::Vector3f::Zero()
                               : Eigen::Vector3f((sum / static_cast<double>(scene.size())).cast<float>());
    for (const Gaussian &g : scene.gaussians)
        b.extent = std::max(b.extent, (g.position - b.centroid).norm());
    return b;
}

} // namespace featsplat
