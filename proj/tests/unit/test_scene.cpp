// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include "featsplat/scene.hpp"

#include "oracle.hpp"
#include "temp_dir.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cstring>
#include <fstream>
#include <random>

using namespace featsplat;
using test::TempDir;

namespace {

void write_ply(const std::filesystem::path &path, const std::vector<std::string> &props,
               const std::vector<std::vector<float>> &rows) {
    std::ofstream out(path, std::ios::binary);
    out << "ply\nformat binary_little_endian 1.0\nelement vertex " << rows.size() << "\n";
    for (const auto &p : props)
        out << "property float " << p << "\n";
    out << "end_header\n";
    for (const auto &r : rows)
        out.write(reinterpret_cast<const char *>(r.data()), static_cast<std::streamsize>(r.size() * 4));
}

const std::vector<std::string> kFullProps{"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                                          "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
                                          "rot_3"};

void write_cffm(const std::filesystem::path &path, std::uint32_t h, std::uint32_t w, std::uint32_t d,
                const std::vector<float> &values) {
    std::ofstream out(path, std::ios::binary);
    out.write("CFFM", 4);
    const std::uint32_t hdr[4] = {1, h, w, d};
    out.write(reinterpret_cast<const char *>(hdr), sizeof(hdr));
    out.write(reinterpret_cast<const char *>(values.data()),
              static_cast<std::streamsize>(values.size() * 4));
}

} // namespace

TEST(Scene, UnnormalizedQuaternionIsRenormalized) {
    TempDir dir;
    write_ply(dir / "one.ply", kFullProps, {{0, 0, 0, 0.1f, 0.2f, 0.3f, 0, 0, 0, 0, 2, 0, 0, 0}});
    const GaussianScene s = load_scene(dir / "one.ply");
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s.gaussians[0].rotation, Eigen::Vector4f(1, 0, 0, 0));
    EXPECT_EQ(s.payload_dim, 3);
}

TEST(Scene, MissingOpacityNamesTheProperty) {
    TempDir dir;
    std::vector<std::string> props = kFullProps;
    props.erase(props.begin() + 6);
    write_ply(dir / "bad.ply", props, {{0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0}});
    try {
        load_scene(dir / "bad.ply");
        FAIL() << "expected FormatError";
    } catch (const FormatError &e) {
        EXPECT_NE(std::string(e.what()).find("missing property opacity"), std::string::npos);
    }
}

TEST(Scene, ZeroVerticesIsEmptySceneError) {
    TempDir dir;
    write_ply(dir / "empty.ply", kFullProps, {});
    EXPECT_THROW(load_scene(dir / "empty.ply"), DataError);
}

TEST(Scene, SaveRefusesEmptyScene) {
    TempDir dir;
    EXPECT_THROW(save_scene(GaussianScene{}, dir / "x.ply"), DataError);
}

TEST(Scene, RoundTripIsBitExact) {
    TempDir dir;
    for (int dim : {3, 16}) {
        GaussianScene s = test::random_scene(100, dim, 11 + dim);
        s.meta.source = "roundtrip";
        s.meta.stage = dim == 3 ? SceneStage::Latent : SceneStage::Lifted;
        save_scene(s, dir / "rt.ply");
        const GaussianScene r = load_scene(dir / "rt.ply");
        ASSERT_EQ(r.size(), s.size());
        ASSERT_EQ(r.payload_dim, dim);
        EXPECT_EQ(r.meta.source, "roundtrip");
        EXPECT_EQ(r.meta.stage, s.meta.stage);
        EXPECT_EQ(std::memcmp(r.payload.data(), s.payload.data(), s.payload.size() * 4), 0);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const Gaussian &a = s.gaussians[i], &b = r.gaussians[i];
            EXPECT_EQ(std::memcmp(a.position.data(), b.position.data(), 12), 0);
            EXPECT_EQ(std::memcmp(a.log_scale.data(), b.log_scale.data(), 12), 0);
            EXPECT_EQ(std::memcmp(a.rotation.data(), b.rotation.data(), 16), 0);
            EXPECT_EQ(std::memcmp(&a.opacity_logit, &b.opacity_logit, 4), 0);
        }
    }
}

TEST(Scene, TruncatedVertexData) {
    TempDir dir;
    write_ply(dir / "t.ply", kFullProps, {{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0}});
    std::filesystem::resize_file(dir / "t.ply", std::filesystem::file_size(dir / "t.ply") - 4);
    EXPECT_THROW(load_scene(dir / "t.ply"), FormatError);
}

TEST(Covariance, HandExamples) {
    Gaussian g;
    EXPECT_TRUE(covariance(g).isApprox(Eigen::Matrix3f::Identity(), 1e-6f));
    g.log_scale = {std::log(2.0f), 0, 0};
    const Eigen::Matrix3f expected = Eigen::Vector3f(4, 1, 1).asDiagonal();
    EXPECT_TRUE(covariance(g).isApprox(expected, 1e-6f));
}

TEST(Covariance, SymmetricAndPositiveDefinite) {
    const GaussianScene s = test::random_scene(500, 3, 5);
    for (const Gaussian &g : s.gaussians) {
        const Eigen::Matrix3f c = covariance(g);
        EXPECT_EQ(c, c.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(covariance_d(g));
        EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
        const Eigen::Vector3d s2 = (2.0 * g.log_scale.cast<double>()).array().exp();
        std::array<double, 3> want{s2[0], s2[1], s2[2]};
        std::sort(want.begin(), want.end());
        for (int k = 0; k < 3; ++k)
            EXPECT_NEAR(es.eigenvalues()[k], want[k], 1e-6 * want[2]);
    }
}

TEST(FeatureMap, PixelsAreNormalized) {
    TempDir dir;
    write_cffm(dir / "m.cffm", 1, 2, 2, {3, 4, 0, 0});
    const FeatureMap m = load_feature_map(dir / "m.cffm");
    EXPECT_FLOAT_EQ(m.image.at(0, 0, 0), 0.6f);
    EXPECT_FLOAT_EQ(m.image.at(0, 0, 1), 0.8f);
    EXPECT_EQ(m.valid[0], 1);
    EXPECT_EQ(m.valid[1], 0);
    EXPECT_EQ(m.image.at(0, 1, 0), 0.0f);
}

TEST(FeatureMap, NormsAreZeroOrUnit) {
    TempDir dir;
    std::mt19937 rng(3);
    std::normal_distribution<float> n(0.0f, 5.0f);
    std::vector<float> v(8 * 9 * 7);
    for (float &x : v)
        x = n(rng);
    std::fill(v.begin(), v.begin() + 7, 0.0f);
    write_cffm(dir / "r.cffm", 8, 9, 7, v);
    const FeatureMap m = load_feature_map(dir / "r.cffm");
    for (std::size_t p = 0; p < m.image.pixel_count(); ++p) {
        double s = 0;
        for (float x : m.image.pixel(p))
            s += double(x) * x;
        if (p == 0)
            EXPECT_EQ(s, 0.0);
        else
            EXPECT_NEAR(std::sqrt(s), 1.0, 1e-3);
    }
}

TEST(FeatureMap, SizeMismatchIsFormatError) {
    TempDir dir;
    write_cffm(dir / "s.cffm", 2, 2, 3, std::vector<float>(11, 1.0f));
    EXPECT_THROW(load_feature_map(dir / "s.cffm"), FormatError);
}

TEST(FeatureMap, BadMagic) {
    TempDir dir;
    std::ofstream(dir / "b.cffm", std::ios::binary) << "XXXX0000000000000000";
    EXPECT_THROW(load_feature_map(dir / "b.cffm"), FormatError);
}

TEST(FeatureMap, RawRoundTrip) {
    TempDir dir;
    Image img(3, 4, 5);
    for (std::size_t k = 0; k < img.data.size(); ++k)
        img.data[k] = static_cast<float>(k) * 0.25f - 3.0f;
    save_cffm(img, dir / "r.cffm");
    const Image back = load_cffm_raw(dir / "r.cffm");
    EXPECT_EQ(back.height, 3);
    EXPECT_EQ(back.width, 4);
    EXPECT_EQ(back.channels, 5);
    EXPECT_EQ(back.data, img.data);
}

TEST(Cameras, RoundTripAndValidation) {
    TempDir dir;
    const auto cams = test::ring_cameras(3, 32, 24);
    save_cameras(cams, dir / "c.json");
    const auto back = load_cameras(dir / "c.json");
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        EXPECT_EQ(back[i].id, cams[i].id);
        EXPECT_EQ(back[i].width, 32);
        EXPECT_TRUE(back[i].R.isApprox(cams[i].R, 1e-6f));
        EXPECT_TRUE(back[i].t.isApprox(cams[i].t, 1e-6f));
    }
    Camera bad = cams[0];
    bad.fx = 0;
    EXPECT_THROW(bad.validate(), DataError);
    bad = cams[0];
    bad.cx = 100;
    EXPECT_THROW(bad.validate(), DataError);
    bad = cams[0];
    bad.R(0, 0) += 0.1f;
    EXPECT_THROW(bad.validate(), DataError);
}

TEST(Cameras, MalformedJson) {
    TempDir dir;
    std::ofstream(dir / "c.json") << "{\"not\": \"an array\"}";
    EXPECT_THROW(load_cameras(dir / "c.json"), FormatError);
    std::ofstream(dir / "d.json") << "[{";
    EXPECT_THROW(load_cameras(dir / "d.json"), FormatError);
}

TEST(Scene, SubsetPreservesOrder) {
    const GaussianScene s = test::random_scene(10, 4, 2);
    std::vector<std::uint8_t> keep{1, 0, 1, 1, 0, 0, 0, 1, 0, 1};
    const GaussianScene t = s.subset(keep);
    ASSERT_EQ(t.size(), 5u);
    const std::vector<std::size_t> idx{0, 2, 3, 7, 9};
    for (std::size_t k = 0; k < idx.size(); ++k) {
        EXPECT_EQ(t.gaussians[k].position, s.gaussians[idx[k]].position);
        for (int d = 0; d < 4; ++d)
            EXPECT_EQ(t.payload_of(k)[d], s.payload_of(idx[k])[d]);
    }
}
