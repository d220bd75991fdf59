#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mrgan/sphere.hpp"
#include "support/geometry_oracles.hpp"

using namespace mrgan;
using namespace mrgan::test_support;

namespace {

ViewSpec make_view(double yaw, double pitch, std::size_t w = 32, std::size_t h = 32, double roll = 0.0,
                   double fov = 90.0) {
  ViewSpec v;
  v.yaw = yaw;
  v.pitch = pitch;
  v.roll = roll;
  v.fov = fov;
  v.out_width = w;
  v.out_height = h;
  return v;
}

Image random_erp(std::size_t width, std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image erp(width, width / 2, channels);
  for (auto& p : erp.pixels) p = u(rng);
  return erp;
}

FaceImage constant_face(const ViewSpec& v, float c) { return {v, Image(v.out_width, v.out_height, 1, c)}; }

}  // namespace

TEST(ExtractView, ConstantErpGivesConstantFace) {
  Image erp(64, 32, 3, 0.375f);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> yaw(0, 360), pitch(-90, 90), roll(-180, 180), fov(10, 170);
  for (int k = 0; k < 20; ++k) {
    const auto v = make_view(yaw(rng), pitch(rng), 17, 11, roll(rng), fov(rng));
    for (auto interp : {Interp::nearest, Interp::bilinear}) {
      const auto face = extract_view(erp, v, interp);
      for (float p : face.image.pixels) ASSERT_FLOAT_EQ(p, 0.375f);
    }
  }
}

TEST(ExtractView, CenterPixelLooksForward) {
  const auto v = make_view(0, 0, 33, 33);
  const Camera cam(v);
  const Vec3 d = cam.ray(16, 16);
  EXPECT_NEAR(d.x, 0.0, 1e-15);
  EXPECT_NEAR(d.y, 0.0, 1e-15);
  EXPECT_NEAR(d.z, 1.0, 1e-15);
  const auto erp = random_erp(128, 1, 2);
  const auto face = extract_view(erp, v);
  EXPECT_FLOAT_EQ(face.image.at(0, 16, 16), static_cast<float>(sample_erp(erp, 0, 0.0, 0.0, Interp::bilinear)));
}

TEST(ExtractView, ViewCentersLandOnYawAndPitch) {
  for (double yaw : {0.0, 45.0, 135.0, 300.0})
    for (double pitch : {-60.0, 0.0, 30.0}) {
      const auto [lon, lat] = lonlat_from_direction(Camera(make_view(yaw, pitch, 33, 33)).ray(16, 16));
      EXPECT_NEAR(wrap_degrees(lon), yaw, 1e-9);
      EXPECT_NEAR(lat, pitch, 1e-9);
    }
}

TEST(ExtractView, LongitudeRampMatchesClosedForm) {
  const auto erp = erp_from(512, [](double lon, double) { return lon / 360.0 + 0.5; });
  for (const auto& v : {make_view(0, 0, 64, 64), make_view(20, 35, 48, 40), make_view(340, -30, 40, 48, 15)}) {
    const Camera cam(v);
    const auto face = extract_view(erp, v);
    for (std::size_t y = 0; y < v.out_height; ++y)
      for (std::size_t x = 0; x < v.out_width; ++x) {
        const double lon =
            lonlat_from_direction(cam.ray(static_cast<double>(x), static_cast<double>(y))).first;
        ASSERT_NEAR(face.image.at(0, y, x), lon / 360.0 + 0.5, 1e-4) << x << "," << y;
      }
  }
}

TEST(ExtractView, YawWrapsBitIdentically) {
  const auto erp = random_erp(96, 3, 3);
  for (double yaw : {0.0, 37.5, 250.0}) {
    const auto a = extract_view(erp, make_view(yaw, 20, 24, 16, 5));
    const auto b = extract_view(erp, make_view(yaw + 360.0, 20, 24, 16, 5));
    EXPECT_EQ(a.image.pixels, b.image.pixels);
  }
  EXPECT_EQ(extract_view(erp, make_view(-90, 0)).image.pixels, extract_view(erp, make_view(270, 0)).image.pixels);
}

TEST(ExtractView, LongitudeSeamWraps) {
  const auto erp = random_erp(64, 1, 4);
  for (double lat : {-80.0, -10.0, 0.0, 33.0, 89.0})
    for (auto interp : {Interp::nearest, Interp::bilinear})
      EXPECT_EQ(sample_erp(erp, 0, -180.0, lat, interp), sample_erp(erp, 0, 180.0, lat, interp));
}

TEST(ExtractView, DegenerateFovIsRejected) {
  const auto erp = random_erp(32, 1, 5);
  for (double fov : {0.0, -5.0, 180.0, 200.0}) {
    try {
      extract_view(erp, make_view(0, 0, 8, 8, 0, fov));
      FAIL() << fov;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
    }
  }
  EXPECT_THROW(extract_view(erp, make_view(0, 0, 1, 8)), Error);
  EXPECT_THROW(extract_view(Image(30, 16, 1), make_view(0, 0)), Error);
}

TEST(Camera, ProjectInvertsRay) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> yaw(0, 360), pitch(-90, 90), roll(-180, 180), fov(20, 160), unit(0, 1);
  for (int k = 0; k < 200; ++k) {
    const auto v = make_view(yaw(rng), pitch(rng), 40, 25, roll(rng), fov(rng));
    const Camera cam(v);
    const double u = unit(rng) * 39.0, w = unit(rng) * 24.0;
    const auto uv = cam.project(cam.ray(u, w));
    ASSERT_TRUE(uv.has_value());
    EXPECT_NEAR(uv->first, u, 1e-9);
    EXPECT_NEAR(uv->second, w, 1e-9);
  }
}

TEST(Camera, EulerDecompositionRoundTrips) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> yaw(0, 360), pitch(-89, 89), roll(-179, 179);
  for (int k = 0; k < 100; ++k) {
    const auto v = make_view(yaw(rng), pitch(rng), 8, 8, roll(rng));
    const Mat3 r = view_rotation(v);
    const Mat3 back = view_rotation(view_from_rotation(r, v));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) EXPECT_NEAR(back.m[i][j], r.m[i][j], 1e-12);
  }
  for (double p : {90.0, -90.0}) {
    const Mat3 r = rot_yaw(30) * rot_pitch(p) * rot_roll(40);
    const Mat3 back = view_rotation(view_from_rotation(r, make_view(0, 0)));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) EXPECT_NEAR(back.m[i][j], r.m[i][j], 1e-12);
  }
}

TEST(CubeFaces, UnrotatedFrontIsForwardView) {
  const auto erp = random_erp(128, 3, 8);
  const auto faces = cube_faces(erp, 0, 0, 32, 32);
  EXPECT_EQ(faces[0].image.pixels, extract_view(erp, make_view(0, 0)).image.pixels);
}

TEST(CubeFaces, YawNinetyFrontMatchesRightFace) {
  const auto erp = erp_from(256, smooth_pattern);
  const auto turned = cube_faces(erp, 90, 0, 48, 48);
  const auto plain = cube_faces(erp, 0, 0, 48, 48);
  const auto& right = plain[static_cast<std::size_t>(CubeFace::right)];
  for (std::size_t i = 0; i < right.image.pixels.size(); ++i)
    ASSERT_NEAR(turned[0].image.pixels[i], right.image.pixels[i], 1e-4);
}

TEST(CubeFaces, RotatedFacesStayOrthonormal) {
  for (double yo : {0.0, 30.0, 60.0})
    for (double po : {0.0, 30.0, 60.0}) {
      const auto views = cube_face_views(yo, po, 8, 8);
      std::array<Vec3, 6> axes;
      for (std::size_t k = 0; k < 6; ++k) axes[k] = view_rotation(views[k]) * Vec3{0, 0, 1};
      for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = a + 1; b < 6; ++b) {
          const double d = dot(axes[a], axes[b]);
          EXPECT_TRUE(std::abs(d) < 1e-9 || std::abs(d + 1.0) < 1e-9) << a << "," << b;
        }
      // Front is the offset applied to the forward axis.
      const Vec3 f = rot_yaw(yo) * rot_pitch(po) * Vec3{0, 0, 1};
      EXPECT_NEAR(dot(axes[0], f), 1.0, 1e-12);
    }
}

TEST(CubeFaces, RotationGridYieldsFiftyFourFaces) {
  const auto erp = random_erp(64, 3, 9);
  std::size_t n = 0;
  for (double yo : {0.0, 30.0, 60.0})
    for (double po : {0.0, 30.0, 60.0}) n += cube_faces(erp, yo, po, 8, 8).size();
  EXPECT_EQ(n, 54u);
  EXPECT_EQ(n * 30, 1620u);
}

TEST(Backproject, FrontViewportMatchesFrustumOracle) {
  AccumulatorMap acc(360, 180);
  const auto v = make_view(0, 0, 64, 64);
  backproject_accumulate(acc, constant_face(v, 1.0f));
  for (std::size_t y = 0; y < acc.height; ++y)
    for (std::size_t x = 0; x < acc.width; ++x) {
      const auto [lon, lat] = erp_pixel_lonlat(static_cast<double>(x), static_cast<double>(y), acc.width, acc.height);
      // Closed form for the forward 90 degree frustum.
      const bool analytic = std::abs(lon) <= 45.0 && std::abs(std::tan(lat * kDegToRad)) <= std::cos(lon * kDegToRad);
      EXPECT_EQ(acc.count[y * acc.width + x] > 0.0, analytic) << lon << "," << lat;
      EXPECT_EQ(analytic, in_frustum(v, lon, lat));
    }
}

TEST(Backproject, RotatedViewportMatchesFrustumOracle) {
  AccumulatorMap acc(200, 100);
  const auto v = make_view(123, 41, 40, 24, 17, 70);
  backproject_accumulate(acc, constant_face(v, 0.5f));
  for (std::size_t y = 0; y < acc.height; ++y)
    for (std::size_t x = 0; x < acc.width; ++x) {
      const auto [lon, lat] = erp_pixel_lonlat(static_cast<double>(x), static_cast<double>(y), acc.width, acc.height);
      EXPECT_EQ(acc.count[y * acc.width + x] > 0.0, in_frustum(v, lon, lat));
    }
}

TEST(Backproject, RejectsMultiChannelFaces) {
  AccumulatorMap acc(32, 16);
  FaceImage f{make_view(0, 0, 8, 8), Image(8, 8, 3)};
  try {
    backproject_accumulate(acc, f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
  }
}

TEST(Backproject, EmptyAccumulatorReportsCoverage) {
  AccumulatorMap acc(64, 32);
  EXPECT_EQ(acc.uncovered_pixels(), 64u * 32u);
  EXPECT_DOUBLE_EQ(acc.uncovered_fraction(), 1.0);
  try {
    finalize_average(acc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::incomplete_coverage);
  }
  backproject_accumulate(acc, constant_face(make_view(0, 0, 16, 16), 1.0f));
  // A 90x90 degree frustum covers 1/6 of the sphere.
  EXPECT_NEAR(acc.uncovered_fraction(), 5.0 / 6.0, 0.02);
}

TEST(Backproject, CanonicalConstantFacesGiveConstantMap) {
  std::vector<FaceImage> faces;
  for (auto f : kCubeFaces) faces.push_back(constant_face(canonical_face_view(f, 16, 16), 0.625f));
  const auto avg = assemble_average(faces, 96, 48);
  for (double v : avg.values) ASSERT_FLOAT_EQ(static_cast<float>(v), 0.625f);
  std::vector<FaceImage> ones;
  for (const auto& v : dense_viewports(30, 12, 12)) ones.push_back(constant_face(v, 1.0f));
  for (double v : dense_assemble(ones, 96, 48).values) ASSERT_DOUBLE_EQ(v, 1.0);
}

TEST(Backproject, OverlapAveragesValues) {
  AccumulatorMap acc(180, 90);
  const auto va = make_view(0, 0, 16, 16), vb = make_view(30, 0, 16, 16);
  backproject_accumulate(acc, constant_face(va, 0.2f));
  backproject_accumulate(acc, constant_face(vb, 0.7f));
  std::size_t overlap = 0;
  for (std::size_t y = 0; y < acc.height; ++y)
    for (std::size_t x = 0; x < acc.width; ++x) {
      const std::size_t i = y * acc.width + x;
      if (acc.count[i] != 2.0) continue;
      ++overlap;
      EXPECT_NEAR(acc.sum[i] / acc.count[i], (0.2 + 0.7) / 2.0, 1e-7);
    }
  EXPECT_GT(overlap, 100u);
}

TEST(Backproject, MergeEqualsSequentialAccumulation) {
  const auto erp = erp_from(128, smooth_pattern);
  std::vector<FaceImage> faces;
  for (const auto& v : dense_viewports(60, 16, 16)) faces.push_back(extract_view(erp, v));
  AccumulatorMap all(128, 64), left(128, 64), right(128, 64);
  for (std::size_t k = 0; k < faces.size(); ++k) {
    backproject_accumulate(all, faces[k]);
    backproject_accumulate(k % 2 ? left : right, faces[k]);
  }
  left.merge(right);
  for (std::size_t i = 0; i < all.sum.size(); ++i) {
    EXPECT_NEAR(left.sum[i], all.sum[i], 1e-12);
    EXPECT_EQ(left.count[i], all.count[i]);
  }
}

TEST(Backproject, ExtrapolationNeverGoesNegative) {
  // Steep ramp ending at zero on the border.
  FaceImage f{make_view(0, 0, 8, 8), Image(8, 8, 1)};
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) f.image.at(0, y, x) = static_cast<float>(x) / 7.0f;
  AccumulatorMap acc(256, 128);
  backproject_accumulate(acc, f);
  for (std::size_t i = 0; i < acc.sum.size(); ++i) EXPECT_GE(acc.sum[i], 0.0);
}

TEST(DenseGrid, ViewportCounts) {
  EXPECT_EQ(dense_viewports(10, 8, 8).size(), 684u);
  EXPECT_EQ(dense_viewports(30, 8, 8).size(), 84u);
  const auto views = dense_viewports(10, 8, 8);
  EXPECT_EQ(views.front().pitch, -90.0);
  EXPECT_EQ(views.back().pitch, 90.0);
  EXPECT_EQ(views.back().yaw, 350.0);
  EXPECT_THROW(dense_viewports(0, 8, 8), Error);
}

TEST(RoundTrip, SixFacesReproduceSmoothPattern) {
  const auto erp = erp_from(256, smooth_pattern);
  const auto views = cube_face_views(0, 0, 64, 64);
  std::vector<FaceImage> faces;
  for (const auto& v : views) faces.push_back(extract_view(erp, v));
  const auto rec = dense_assemble(faces, 256, 128);
  double lo = 1e9, hi = -1e9;
  for (float p : erp.pixels) {
    lo = std::min(lo, static_cast<double>(p));
    hi = std::max(hi, static_cast<double>(p));
  }
  double mae = 0.0;
  for (std::size_t i = 0; i < rec.values.size(); ++i) mae += std::abs(rec.values[i] - erp.pixels[i] / hi);
  mae /= static_cast<double>(rec.values.size());
  EXPECT_LE(mae, 0.02 * (hi - lo) / hi);
  const auto seams = seam_report(rec, views);
  EXPECT_GT(seams.seam_pairs, 0u);
  EXPECT_EQ(seams.violations, 0u) << "worst ratio " << seams.worst_ratio;
}

TEST(RoundTrip, SeamCheckDetectsAnOffsetFace) {
  const auto erp = erp_from(256, smooth_pattern);
  const auto views = cube_face_views(0, 0, 64, 64);
  std::vector<FaceImage> faces;
  for (const auto& v : views) faces.push_back(extract_view(erp, v));
  for (auto& p : faces[0].image.pixels) p += 0.05f;
  EXPECT_GT(seam_report(assemble_average(faces, 256, 128), views).violations, 0u);
}

TEST(RoundTrip, DenseViewportsReproduceSmoothPattern) {
  const auto erp = erp_from(128, smooth_pattern);
  std::vector<FaceImage> faces;
  for (const auto& v : dense_viewports(30, 32, 32)) faces.push_back(extract_view(erp, v));
  const auto rec = assemble_average(faces, 128, 64);
  double mae = 0.0;
  for (std::size_t i = 0; i < rec.values.size(); ++i) mae += std::abs(rec.values[i] - erp.pixels[i]);
  EXPECT_LE(mae / static_cast<double>(rec.values.size()), 0.02 * 0.8);
}
