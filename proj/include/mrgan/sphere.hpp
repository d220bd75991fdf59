#pragma once

// Spherical resampling between equirectangular panoramas and rectilinear
// viewports.
//
// World frame: +x east, +y up, +z toward longitude 0 on the equator. A
// direction at longitude lon and latitude lat is
//   (cos(lat) sin(lon), sin(lat), cos(lat) cos(lon)).
// Equirectangular pixel (x,y) of a W x H panorama has its center at
//   lon = (x+0.5)/W*360 - 180,  lat = 90 - (y+0.5)/H*180.
// A view's camera looks down +z with +x to the right of the image and +y up;
// its orientation is R = Ry(yaw) * Rx(pitch) * Rz(roll), so roll is applied
// in the camera frame first, then pitch, then yaw about the world vertical.
// The fov spans both image axes, so non-square outputs get anisotropic pixels
// and the six canonical faces always tile the sphere.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mrgan/error.hpp"
#include "mrgan/image.hpp"

namespace mrgan {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

struct Mat3 {
  std::array<std::array<double, 3>, 3> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m[0][0] = r.m[1][1] = r.m[2][2] = 1.0;
    return r;
  }

  Vec3 operator*(const Vec3& v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z, m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r.m[i][j] += m[i][k] * o.m[k][j];
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
    return r;
  }
};

/// Rotation about the vertical axis; positive turns the forward axis east.
inline Mat3 rot_yaw(double deg) {
  const double c = std::cos(deg * kDegToRad), s = std::sin(deg * kDegToRad);
  Mat3 r;
  r.m = {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
  return r;
}

/// Rotation about the lateral axis; positive tilts the forward axis up.
inline Mat3 rot_pitch(double deg) {
  const double c = std::cos(deg * kDegToRad), s = std::sin(deg * kDegToRad);
  Mat3 r;
  r.m = {{{1, 0, 0}, {0, c, s}, {0, -s, c}}};
  return r;
}

/// Rotation about the forward axis.
inline Mat3 rot_roll(double deg) {
  const double c = std::cos(deg * kDegToRad), s = std::sin(deg * kDegToRad);
  Mat3 r;
  r.m = {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
  return r;
}

inline Vec3 direction_from_lonlat(double lon_deg, double lat_deg) {
  const double lon = lon_deg * kDegToRad, lat = lat_deg * kDegToRad;
  return {std::cos(lat) * std::sin(lon), std::sin(lat), std::cos(lat) * std::cos(lon)};
}

/// Returns (lon, lat) in degrees, lon in [-180,180].
inline std::pair<double, double> lonlat_from_direction(const Vec3& d) {
  const double n = norm(d);
  const double lat = std::asin(std::clamp(d.y / n, -1.0, 1.0)) * kRadToDeg;
  const double lon = std::atan2(d.x, d.z) * kRadToDeg;
  return {lon, lat};
}

inline std::pair<double, double> erp_pixel_lonlat(double x, double y, std::size_t width, std::size_t height) {
  return {(x + 0.5) / static_cast<double>(width) * 360.0 - 180.0,
          90.0 - (y + 0.5) / static_cast<double>(height) * 180.0};
}

struct ViewSpec {
  double yaw = 0.0;    // degrees, [0,360)
  double pitch = 0.0;  // degrees, [-90,90]
  double roll = 0.0;
  double fov = 90.0;
  std::size_t out_width = 256;
  std::size_t out_height = 256;

  void validate() const {
    require(fov > 0.0 && fov < 180.0, ErrorCode::invalid_argument,
            "view fov must lie in (0,180), got " + std::to_string(fov));
    require(out_width >= 2 && out_height >= 2, ErrorCode::invalid_argument,
            "view output extents must be >= 2");
    require(pitch >= -90.0 && pitch <= 90.0, ErrorCode::invalid_argument,
            "view pitch must lie in [-90,90]");
  }
};

inline double wrap_degrees(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r < 0.0) r += 360.0;
  return r;
}

inline Mat3 view_rotation(const ViewSpec& v) {
  return rot_yaw(wrap_degrees(v.yaw)) * rot_pitch(v.pitch) * rot_roll(v.roll);
}

/// Recovers (yaw, pitch, roll) with R = Ry(yaw) Rx(pitch) Rz(roll). At the
/// poles roll is folded into yaw.
inline ViewSpec view_from_rotation(const Mat3& r, const ViewSpec& base) {
  ViewSpec v = base;
  const double sp = std::clamp(r.m[1][2], -1.0, 1.0);
  v.pitch = std::asin(sp) * kRadToDeg;
  if (std::abs(sp) < 1.0 - 1e-12) {
    v.yaw = std::atan2(r.m[0][2], r.m[2][2]) * kRadToDeg;
    v.roll = std::atan2(r.m[1][0], r.m[1][1]) * kRadToDeg;
  } else {
    v.yaw = std::atan2(-r.m[2][0], r.m[0][0]) * kRadToDeg;
    v.roll = 0.0;
  }
  v.yaw = wrap_degrees(v.yaw);
  return v;
}

/// Pinhole model of a ViewSpec. Continuous pixel coordinates put the center
/// of pixel (i,j) at (i,j), so the image spans [-0.5, w-0.5] x [-0.5, h-0.5].
class Camera {
 public:
  explicit Camera(const ViewSpec& view) : view_(view) {
    view.validate();
    rot_ = view_rotation(view);
    rot_t_ = rot_.transposed();
    tan_half_ = std::tan(view.fov * 0.5 * kDegToRad);
    fx_ = 0.5 * static_cast<double>(view.out_width) / tan_half_;
    fy_ = 0.5 * static_cast<double>(view.out_height) / tan_half_;
  }

  const ViewSpec& view() const { return view_; }
  const Mat3& rotation() const { return rot_; }

  Vec3 ray(double u, double v) const {
    const Vec3 c{(u + 0.5 - 0.5 * static_cast<double>(view_.out_width)) / fx_,
                 -(v + 0.5 - 0.5 * static_cast<double>(view_.out_height)) / fy_, 1.0};
    return rot_ * c;
  }

  Vec3 to_camera(const Vec3& world) const { return rot_t_ * world; }

  /// Continuous pixel coordinates of a world direction, or nothing when the
  /// direction lies outside the frustum (boundary included).
  std::optional<std::pair<double, double>> project(const Vec3& world) const {
    const Vec3 c = to_camera(world);
    if (c.z <= 0.0) return std::nullopt;
    const double tx = c.x / c.z, ty = c.y / c.z;
    if (std::abs(tx) > tan_half_ || std::abs(ty) > tan_half_) return std::nullopt;
    return std::pair{tx * fx_ + 0.5 * static_cast<double>(view_.out_width) - 0.5,
                     -ty * fy_ + 0.5 * static_cast<double>(view_.out_height) - 0.5};
  }

 private:
  ViewSpec view_;
  Mat3 rot_;
  Mat3 rot_t_;
  double tan_half_ = 1.0;
  double fx_ = 1.0;
  double fy_ = 1.0;
};

enum class Interp { nearest, bilinear };

inline void validate_erp(const Image& erp) {
  require(erp.width >= 2 && erp.width % 2 == 0 && erp.width == 2 * erp.height, ErrorCode::invalid_argument,
          "equirectangular image must be 2:1 with even width, got " + std::to_string(erp.width) + "x" +
              std::to_string(erp.height));
  require(erp.channels == 1 || erp.channels == 3, ErrorCode::invalid_argument,
          "equirectangular image must have 1 or 3 channels");
}

/// Samples one channel at a direction. Longitude wraps around the seam;
/// latitude clamps at the poles.
inline double sample_erp(const Image& erp, std::size_t channel, double lon_deg, double lat_deg, Interp interp) {
  const double W = static_cast<double>(erp.width), H = static_cast<double>(erp.height);
  const double xc = (lon_deg + 180.0) / 360.0 * W - 0.5;
  const double yc = std::clamp((90.0 - lat_deg) / 180.0 * H - 0.5, 0.0, H - 1.0);
  const long w = static_cast<long>(erp.width);
  auto wrap = [w](long x) { return ((x % w) + w) % w; };
  const float* plane = erp.pixels.data() + channel * erp.plane();
  if (interp == Interp::nearest) {
    const long x = wrap(static_cast<long>(std::floor(xc + 0.5)));
    const long y = static_cast<long>(std::floor(yc + 0.5));
    return plane[y * w + x];
  }
  const double fx = std::floor(xc), fy = std::floor(yc);
  const double ax = xc - fx, ay = yc - fy;
  const long x0 = wrap(static_cast<long>(fx)), x1 = wrap(static_cast<long>(fx) + 1);
  const long y0 = static_cast<long>(fy);
  const long y1 = std::min<long>(y0 + 1, static_cast<long>(erp.height) - 1);
  const double top = (1.0 - ax) * plane[y0 * w + x0] + ax * plane[y0 * w + x1];
  const double bot = (1.0 - ax) * plane[y1 * w + x0] + ax * plane[y1 * w + x1];
  return (1.0 - ay) * top + ay * bot;
}

struct FaceImage {
  ViewSpec view;
  Image image;
};

/// Renders a rectilinear view of a panorama.
inline FaceImage extract_view(const Image& erp, const ViewSpec& view, Interp interp = Interp::bilinear) {
  validate_erp(erp);
  const Camera cam(view);
  FaceImage face{view, Image(view.out_width, view.out_height, erp.channels)};
  for (std::size_t v = 0; v < view.out_height; ++v)
    for (std::size_t u = 0; u < view.out_width; ++u) {
      const auto [lon, lat] = lonlat_from_direction(cam.ray(static_cast<double>(u), static_cast<double>(v)));
      for (std::size_t c = 0; c < erp.channels; ++c)
        face.image.at(c, v, u) = static_cast<float>(sample_erp(erp, c, lon, lat, interp));
    }
  return face;
}

enum class CubeFace { front, back, left, right, up, down };

inline constexpr std::array<CubeFace, 6> kCubeFaces{CubeFace::front, CubeFace::back, CubeFace::left,
                                                    CubeFace::right, CubeFace::up,   CubeFace::down};

inline const char* face_name(CubeFace f) {
  switch (f) {
    case CubeFace::front: return "front";
    case CubeFace::back: return "back";
    case CubeFace::left: return "left";
    case CubeFace::right: return "right";
    case CubeFace::up: return "up";
    case CubeFace::down: return "down";
  }
  return "?";
}

inline ViewSpec canonical_face_view(CubeFace f, std::size_t width, std::size_t height) {
  ViewSpec v;
  v.out_width = width;
  v.out_height = height;
  switch (f) {
    case CubeFace::front: break;
    case CubeFace::back: v.yaw = 180.0; break;
    case CubeFace::left: v.yaw = 270.0; break;
    case CubeFace::right: v.yaw = 90.0; break;
    case CubeFace::up: v.pitch = 90.0; break;
    case CubeFace::down: v.pitch = -90.0; break;
  }
  return v;
}

/// The six face orientations of a cube turned by (yaw_off, pitch_off): each
/// canonical face rotation is composed on the left with Ry(yaw_off) Rx(pitch_off).
inline std::array<ViewSpec, 6> cube_face_views(double yaw_off, double pitch_off, std::size_t width,
                                               std::size_t height) {
  const Mat3 offset = rot_yaw(yaw_off) * rot_pitch(pitch_off);
  std::array<ViewSpec, 6> views;
  for (std::size_t k = 0; k < 6; ++k) {
    const ViewSpec base = canonical_face_view(kCubeFaces[k], width, height);
    views[k] = view_from_rotation(offset * view_rotation(base), base);
  }
  return views;
}

inline std::array<FaceImage, 6> cube_faces(const Image& erp, double yaw_off, double pitch_off, std::size_t width,
                                           std::size_t height, Interp interp = Interp::bilinear) {
  const auto views = cube_face_views(yaw_off, pitch_off, width, height);
  std::array<FaceImage, 6> faces;
  for (std::size_t k = 0; k < 6; ++k) faces[k] = extract_view(erp, views[k], interp);
  return faces;
}

/// Viewport centers every `stride` degrees in longitude [0,360) and latitude
/// [-90,90], poles included.
inline std::vector<ViewSpec> dense_viewports(double stride_deg, std::size_t width, std::size_t height,
                                             double fov = 90.0) {
  require(stride_deg > 0.0 && stride_deg <= 180.0, ErrorCode::invalid_argument,
          "viewport stride must lie in (0,180]");
  std::vector<ViewSpec> views;
  const int nlat = static_cast<int>(std::floor(180.0 / stride_deg + 1e-9));
  const int nlon = static_cast<int>(std::ceil(360.0 / stride_deg - 1e-9));
  for (int i = 0; i <= nlat; ++i)
    for (int j = 0; j < nlon; ++j) {
      ViewSpec v;
      v.pitch = std::min(90.0, -90.0 + i * stride_deg);
      v.yaw = j * stride_deg;
      v.fov = fov;
      v.out_width = width;
      v.out_height = height;
      views.push_back(v);
    }
  return views;
}

/// Running per-pixel sum and hit count in equirectangular layout.
struct AccumulatorMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> sum;
  std::vector<double> count;

  AccumulatorMap(std::size_t w, std::size_t h) : width(w), height(h), sum(w * h, 0.0), count(w * h, 0.0) {
    require(w == 2 * h && w % 2 == 0 && h >= 1, ErrorCode::invalid_argument,
            "accumulator must have 2:1 equirectangular dimensions");
  }

  void merge(const AccumulatorMap& o) {
    require(o.width == width && o.height == height, ErrorCode::shape_mismatch, "accumulator size mismatch");
    for (std::size_t i = 0; i < sum.size(); ++i) {
      sum[i] += o.sum[i];
      count[i] += o.count[i];
    }
  }

  /// Fraction of the sphere's solid angle with no contribution.
  double uncovered_fraction() const {
    double uncovered = 0.0, total = 0.0;
    for (std::size_t y = 0; y < height; ++y) {
      const double lat = erp_pixel_lonlat(0, static_cast<double>(y), width, height).second;
      const double wgt = std::cos(lat * kDegToRad);
      for (std::size_t x = 0; x < width; ++x) {
        total += wgt;
        if (count[y * width + x] <= 0.0) uncovered += wgt;
      }
    }
    return total > 0.0 ? uncovered / total : 0.0;
  }

  std::size_t uncovered_pixels() const {
    return static_cast<std::size_t>(std::count_if(count.begin(), count.end(), [](double c) { return c <= 0.0; }));
  }
};

/// Bilinear read at continuous pixel coordinates. Frustum points in the outer
/// half-pixel band are linearly extrapolated from the two border pixels
/// instead of clamped, which would leave a visible step along face edges.
/// Results below `floor` are raised to it.
inline double sample_face(const Image& img, std::size_t channel, double u, double v,
                          double floor = -std::numeric_limits<double>::infinity()) {
  auto cell = [](double c, std::size_t n) {
    const double f = std::clamp(std::floor(c), 0.0, static_cast<double>(n) - 2.0);
    return std::pair{static_cast<std::size_t>(f), c - f};
  };
  const auto [x0, ax] = cell(u, img.width);
  const auto [y0, ay] = cell(v, img.height);
  const double top = (1.0 - ax) * img.at(channel, y0, x0) + ax * img.at(channel, y0, x0 + 1);
  const double bot = (1.0 - ax) * img.at(channel, y0 + 1, x0) + ax * img.at(channel, y0 + 1, x0 + 1);
  return std::max((1.0 - ay) * top + ay * bot, floor);
}

/// Adds a single-channel viewport map into every equirectangular pixel whose
/// direction falls inside the viewport frustum (hard membership, weight 1).
inline void backproject_accumulate(AccumulatorMap& acc, const FaceImage& face) {
  require(face.image.channels == 1, ErrorCode::invalid_argument,
          "backprojection needs a single-channel map, got " + std::to_string(face.image.channels) + " channels");
  require(face.image.width == face.view.out_width && face.image.height == face.view.out_height,
          ErrorCode::shape_mismatch, "face image does not match its view extents");
  const Camera cam(face.view);
  // Extrapolation must not turn a nonnegative map negative.
  const float lowest = *std::min_element(face.image.pixels.begin(), face.image.pixels.end());
  const double floor = std::min(0.0, static_cast<double>(lowest));
  for (std::size_t y = 0; y < acc.height; ++y)
    for (std::size_t x = 0; x < acc.width; ++x) {
      const auto [lon, lat] = erp_pixel_lonlat(static_cast<double>(x), static_cast<double>(y), acc.width, acc.height);
      const auto uv = cam.project(direction_from_lonlat(lon, lat));
      if (!uv) continue;
      acc.sum[y * acc.width + x] += sample_face(face.image, 0, uv->first, uv->second, floor);
      acc.count[y * acc.width + x] += 1.0;
    }
}

/// Per-pixel average of accumulated viewports. Throws incomplete_coverage if
/// any pixel received no viewport.
inline SaliencyMap finalize_average(const AccumulatorMap& acc) {
  const std::size_t missing = acc.uncovered_pixels();
  if (missing > 0)
    throw Error(ErrorCode::incomplete_coverage,
                std::to_string(missing) + " equirectangular pixels uncovered (solid-angle fraction " +
                    std::to_string(acc.uncovered_fraction()) + ")");
  SaliencyMap out(acc.width, acc.height);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = acc.sum[i] / acc.count[i];
  return out;
}

inline SaliencyMap assemble_average(const std::vector<FaceImage>& viewports, std::size_t width, std::size_t height) {
  AccumulatorMap acc(width, height);
  for (const auto& vp : viewports) backproject_accumulate(acc, vp);
  return finalize_average(acc);
}

/// Back-projects every viewport, averages, then scales so the global max is 1.
inline SaliencyMap dense_assemble(const std::vector<FaceImage>& viewports, std::size_t width, std::size_t height) {
  require(!viewports.empty(), ErrorCode::invalid_argument, "dense_assemble needs at least one viewport");
  return normalize_max(assemble_average(viewports, width, height));
}

}  // namespace mrgan
