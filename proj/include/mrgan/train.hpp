#pragma once

// Training data and loops: cube-face samples cut from annotated panoramas,
// procedurally generated desk-scale data, content-loss pretraining,
// alternating adversarial fine-tuning, and panorama-level evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrgan/error.hpp"
#include "mrgan/image.hpp"
#include "mrgan/metrics.hpp"
#include "mrgan/model.hpp"
#include "mrgan/optim.hpp"
#include "mrgan/sphere.hpp"
#include "mrgan/tensor.hpp"

namespace mrgan {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t stages = 6;
  std::size_t channels = 24;
  std::size_t se_ratio = 4;
  std::size_t width = 256;
  std::size_t height = 192;
  double lr = 5e-6;
  std::size_t batch = 6;
  std::size_t pretrain_epochs = 100;
  std::size_t finetune_epochs = 0;
  std::size_t max_steps = 0;  // caps the steps of each phase when nonzero
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool per_stage_loss = true;  // false: only the final stage is supervised
  GeneratorObjective objective = GeneratorObjective::log_one_minus_d;
  double sigma = 8.0;  // fixation blur in face pixels
  std::vector<double> rotations{0.0, 30.0, 60.0};
  double viewport_stride = 10.0;
  std::size_t checkpoint_every = 0;  // epochs between checkpoints; 0 = end only
  std::string precision = "double";

  GeneratorConfig generator() const { return {channels, se_ratio}; }
  DiscriminatorConfig discriminator() const { return {width, height}; }

  void validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    require(stages >= 1, ErrorCode::invalid_argument, "stages must be >= 1");
    require(batch >= 1, ErrorCode::invalid_argument, "batch must be >= 1");
    require(std::isfinite(lr) && lr > 0.0, ErrorCode::invalid_argument, "lr must be finite and > 0");
    require(finite_nonneg(weight_decay), ErrorCode::invalid_argument, "weight_decay must be finite and >= 0");
    require(std::isfinite(sigma) && sigma > 0.0, ErrorCode::invalid_argument, "sigma must be finite and > 0");
    require(width >= 8 && height >= 8 && width % 8 == 0 && height % 8 == 0, ErrorCode::invalid_argument,
            "width and height must be positive multiples of 8");
    require(!rotations.empty(), ErrorCode::invalid_argument, "rotations must not be empty");
    for (double r : rotations) require(std::isfinite(r), ErrorCode::invalid_argument, "rotations must be finite");
    require(std::isfinite(viewport_stride) && viewport_stride > 0.0 && viewport_stride <= 180.0,
            ErrorCode::invalid_argument, "viewport_stride must lie in (0,180]");
    require(precision == "double" || precision == "float", ErrorCode::invalid_argument,
            "precision must be \"double\" or \"float\"");
    generator().validate();
  }
};

inline const char* objective_name(GeneratorObjective o) {
  return o == GeneratorObjective::log_one_minus_d ? "log_one_minus_d" : "neg_log_d";
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"stages", c.stages},
          {"channels", c.channels},
          {"se_ratio", c.se_ratio},
          {"width", c.width},
          {"height", c.height},
          {"lr", c.lr},
          {"batch", c.batch},
          {"pretrain_epochs", c.pretrain_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"max_steps", c.max_steps},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"per_stage_loss", c.per_stage_loss},
          {"objective", objective_name(c.objective)},
          {"sigma", c.sigma},
          {"rotations", c.rotations},
          {"viewport_stride", c.viewport_stride},
          {"checkpoint_every", c.checkpoint_every},
          {"precision", c.precision}};
}

/// Reads a config object over the defaults. Unknown keys, wrong types and
/// invalid values raise invalid_argument.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  require(j.is_object(), ErrorCode::invalid_argument, "training config must be a JSON object");
  auto get = [&](const std::string& key, auto& field) {
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::invalid_argument, "config key '" + key + "': " + e.what());
    }
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "stages") get(key, c.stages);
    else if (key == "channels") get(key, c.channels);
    else if (key == "se_ratio") get(key, c.se_ratio);
    else if (key == "width") get(key, c.width);
    else if (key == "height") get(key, c.height);
    else if (key == "lr") get(key, c.lr);
    else if (key == "batch") get(key, c.batch);
    else if (key == "pretrain_epochs") get(key, c.pretrain_epochs);
    else if (key == "finetune_epochs") get(key, c.finetune_epochs);
    else if (key == "max_steps") get(key, c.max_steps);
    else if (key == "weight_decay") get(key, c.weight_decay);
    else if (key == "seed") get(key, c.seed);
    else if (key == "per_stage_loss") get(key, c.per_stage_loss);
    else if (key == "sigma") get(key, c.sigma);
    else if (key == "rotations") get(key, c.rotations);
    else if (key == "viewport_stride") get(key, c.viewport_stride);
    else if (key == "checkpoint_every") get(key, c.checkpoint_every);
    else if (key == "precision") get(key, c.precision);
    else if (key == "objective") {
      std::string name;
      get(key, name);
      require(name == "log_one_minus_d" || name == "neg_log_d", ErrorCode::invalid_argument,
              "objective must be \"log_one_minus_d\" or \"neg_log_d\"");
      c.objective = name == "neg_log_d" ? GeneratorObjective::neg_log_d : GeneratorObjective::log_one_minus_d;
    } else {
      throw Error(ErrorCode::invalid_argument, "unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Samples

/// An annotated panorama; fixations are equirectangular pixel coordinates.
struct Panorama {
  std::string id;
  Image erp;
  FixationMap fixations;
};

/// One planar training example. `source` names the panorama it was cut from,
/// so every view of one panorama lands on the same side of a split.
struct Sample {
  std::string source;
  Image image;  // RGB
  SaliencyMap density;  // unit mass
  FixationMap fixations;
};

struct FaceHit {
  std::size_t face = 0;
  Pixel pixel;
};

/// The face whose optical axis is closest to the direction (the one that
/// contains it; ties on shared edges go to the first), and the nearest pixel.
inline FaceHit locate_direction(const std::array<ViewSpec, 6>& views, const Vec3& dir) {
  FaceHit best;
  double best_z = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < views.size(); ++k) {
    const double z = Camera(views[k]).to_camera(dir).z;
    if (z > best_z) {
      best_z = z;
      best.face = k;
    }
  }
  const Camera cam(views[best.face]);
  const auto uv = cam.project(dir);
  require(uv.has_value(), ErrorCode::invalid_argument, "cube faces do not cover the direction");
  const auto clampi = [](double c, std::size_t n) {
    return static_cast<int>(std::clamp(std::lround(c), 0L, static_cast<long>(n) - 1));
  };
  best.pixel = {clampi(uv->first, views[best.face].out_width), clampi(uv->second, views[best.face].out_height)};
  return best;
}

inline FaceHit locate_fixation(const std::array<ViewSpec, 6>& views, const Pixel& erp_pixel, std::size_t erp_width,
                               std::size_t erp_height) {
  const auto [lon, lat] = erp_pixel_lonlat(erp_pixel.x, erp_pixel.y, erp_width, erp_height);
  return locate_direction(views, direction_from_lonlat(lon, lat));
}

/// For every panorama and every (yaw, pitch) in rotations x rotations, the
/// six cube faces with the fixations that fall on each. Faces without a
/// fixation are dropped because their density is undefined.
inline std::vector<Sample> build_dataset(const std::vector<Panorama>& panoramas, const std::vector<double>& rotations,
                                         std::size_t width, std::size_t height, double sigma) {
  require(!panoramas.empty(), ErrorCode::invalid_argument, "build_dataset needs at least one panorama");
  require(!rotations.empty(), ErrorCode::invalid_argument, "build_dataset needs at least one rotation");
  std::vector<Sample> out;
  for (const auto& p : panoramas) {
    validate_erp(p.erp);
    require(p.erp.channels == 3, ErrorCode::invalid_argument, "panorama '" + p.id + "' is not RGB");
    require(p.fixations.width == p.erp.width && p.fixations.height == p.erp.height, ErrorCode::shape_mismatch,
            "fixations of '" + p.id + "' do not match the panorama size");
    p.fixations.validate();
    for (double yaw : rotations)
      for (double pitch : rotations) {
        const auto views = cube_face_views(yaw, pitch, width, height);
        std::array<FixationMap, 6> per_face;
        for (auto& f : per_face) f = FixationMap{width, height, {}};
        for (const auto& fx : p.fixations.points) {
          const FaceHit hit = locate_fixation(views, fx, p.erp.width, p.erp.height);
          per_face[hit.face].points.push_back(hit.pixel);
        }
        for (std::size_t k = 0; k < 6; ++k) {
          if (per_face[k].points.empty()) continue;
          Sample s;
          s.source = p.id;
          s.image = extract_view(p.erp, views[k]).image;
          s.density = gaussian_density(per_face[k], sigma);
          s.fixations = std::move(per_face[k]);
          out.push_back(std::move(s));
        }
      }
  }
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

struct Split {
  std::vector<Sample> train;
  std::vector<Sample> validation;
};

/// Sources are ordered by the FNV-1a hash of their id and the last
/// `fraction` of them (at least one when there are two or more) form the
/// validation side.
inline Split split_by_source(const std::vector<Sample>& samples, double fraction = 0.25) {
  require(fraction >= 0.0 && fraction < 1.0, ErrorCode::invalid_argument, "split fraction must lie in [0,1)");
  std::vector<std::string> sources;
  for (const auto& s : samples)
    if (std::find(sources.begin(), sources.end(), s.source) == sources.end()) sources.push_back(s.source);
  std::sort(sources.begin(), sources.end(), [](const std::string& a, const std::string& b) {
    const auto ha = fnv1a(a), hb = fnv1a(b);
    return ha != hb ? ha < hb : a < b;
  });
  std::size_t held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sources.size())));
  if (fraction > 0.0 && sources.size() >= 2) held = std::max<std::size_t>(held, 1);
  held = std::min(held, sources.size() > 0 ? sources.size() - 1 : 0);
  const std::vector<std::string> validation(sources.end() - static_cast<long>(held), sources.end());
  Split split;
  for (const auto& s : samples) {
    const bool held_out = std::find(validation.begin(), validation.end(), s.source) != validation.end();
    (held_out ? split.validation : split.train).push_back(s);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic data
//
// Images are noisy gray with red discs, which observers fixate, and a blue
// disc, which they ignore. The mapping from colour to saliency is learnable
// from a handful of examples at 8x8.

namespace detail {

struct Disc {
  double cx, cy, r;
  std::array<float, 3> colour;
};

inline constexpr std::array<float, 3> kSalientColour{0.9f, 0.15f, 0.1f};
inline constexpr std::array<float, 3> kDistractorColour{0.1f, 0.25f, 0.9f};

inline Image render_discs(std::size_t w, std::size_t h, const std::vector<Disc>& discs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> noise(-0.08, 0.08);
  Image img(w, h, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::array<double, 3> px{0.4 + noise(rng), 0.4 + noise(rng), 0.4 + noise(rng)};
      for (const auto& d : discs) {
        const double dx = static_cast<double>(x) - d.cx, dy = static_cast<double>(y) - d.cy;
        const double a = std::exp(-(dx * dx + dy * dy) / (2.0 * d.r * d.r));
        for (std::size_t c = 0; c < 3; ++c) px[c] = (1.0 - a) * px[c] + a * d.colour[c];
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(std::clamp(px[c], 0.0, 1.0));
    }
  return img;
}

}  // namespace detail

/// Planar samples of size w x h with `fixations` fixations each.
inline std::vector<Sample> synthetic_samples(std::size_t count, std::size_t w, std::size_t h, std::uint64_t seed,
                                             double sigma = 1.0, std::size_t fixations = 12) {
  require(w >= 4 && h >= 4, ErrorCode::invalid_argument, "synthetic samples need at least 4x4 pixels");
  std::mt19937_64 rng(seed);
  const double r = std::max(0.8, 0.12 * static_cast<double>(std::min(w, h)));
  std::uniform_real_distribution<double> ux(1.0, static_cast<double>(w) - 2.0), uy(1.0, static_cast<double>(h) - 2.0);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<detail::Disc> discs;
    const std::size_t salient = 1 + rng() % 2;
    for (std::size_t k = 0; k < salient; ++k) discs.push_back({ux(rng), uy(rng), r, detail::kSalientColour});
    discs.push_back({ux(rng), uy(rng), r, detail::kDistractorColour});
    Sample s;
    s.source = "synthetic-" + std::to_string(seed) + "-" + std::to_string(i);
    s.image = detail::render_discs(w, h, discs, rng);
    s.fixations = FixationMap{w, h, {}};
    std::normal_distribution<double> jitter(0.0, 0.6 * r);
    for (std::size_t f = 0; f < fixations; ++f) {
      const auto& d = discs[rng() % salient];
      const long x = std::clamp(std::lround(d.cx + jitter(rng)), 0L, static_cast<long>(w) - 1);
      const long y = std::clamp(std::lround(d.cy + jitter(rng)), 0L, static_cast<long>(h) - 1);
      s.fixations.points.push_back({static_cast<int>(x), static_cast<int>(y)});
    }
    s.density = gaussian_density(s.fixations, sigma);
    out.push_back(std::move(s));
  }
  return out;
}

/// Equirectangular panoramas (width x width/2) with red discs at random
/// directions. Fixations: `fixations` per panorama, 60% scattered around the
/// red discs and the rest uniform over the sphere.
inline std::vector<Panorama> synthetic_panoramas(std::size_t count, std::size_t width, std::uint64_t seed,
                                                 std::size_t fixations = 60) {
  require(width >= 8 && width % 2 == 0, ErrorCode::invalid_argument, "panorama width must be even and >= 8");
  const std::size_t height = width / 2;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto random_direction = [&] {
    const double lon = u01(rng) * 360.0 - 180.0;
    const double lat = std::asin(2.0 * u01(rng) - 1.0) * kRadToDeg;
    return std::pair{lon, lat};
  };
  auto to_pixel = [&](double lon, double lat) {
    const long x = static_cast<long>(std::floor((lon + 180.0) / 360.0 * static_cast<double>(width)));
    const long y = static_cast<long>(std::floor((90.0 - lat) / 180.0 * static_cast<double>(height)));
    return Pixel{static_cast<int>(((x % static_cast<long>(width)) + static_cast<long>(width)) % static_cast<long>(width)),
                 static_cast<int>(std::clamp(y, 0L, static_cast<long>(height) - 1))};
  };
  constexpr double kDiscRadius = 12.0;  // degrees
  std::vector<Panorama> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::pair<double, double>> red, blue;
    for (int k = 0; k < 4; ++k) red.push_back(random_direction());
    for (int k = 0; k < 2; ++k) blue.push_back(random_direction());
    Panorama p;
    p.id = "pano-" + std::to_string(seed) + "-" + std::to_string(i);
    p.erp = Image(width, height, 3);
    std::uniform_real_distribution<double> noise(-0.08, 0.08);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const auto [lon, lat] = erp_pixel_lonlat(static_cast<double>(x), static_cast<double>(y), width, height);
        const Vec3 d = direction_from_lonlat(lon, lat);
        std::array<double, 3> px{0.4 + noise(rng), 0.4 + noise(rng), 0.4 + noise(rng)};
        auto blend = [&](const std::vector<std::pair<double, double>>& centres, const std::array<float, 3>& colour) {
          for (const auto& [clon, clat] : centres) {
            const double ang = std::acos(std::clamp(dot(d, direction_from_lonlat(clon, clat)), -1.0, 1.0)) * kRadToDeg;
            const double a = std::exp(-ang * ang / (2.0 * kDiscRadius * kDiscRadius));
            for (std::size_t c = 0; c < 3; ++c) px[c] = (1.0 - a) * px[c] + a * colour[c];
          }
        };
        blend(red, detail::kSalientColour);
        blend(blue, detail::kDistractorColour);
        for (std::size_t c = 0; c < 3; ++c) p.erp.at(c, y, x) = static_cast<float>(std::clamp(px[c], 0.0, 1.0));
      }
    p.fixations = FixationMap{width, height, {}};
    std::normal_distribution<double> jitter(0.0, 0.5 * kDiscRadius);
    for (std::size_t f = 0; f < fixations; ++f) {
      if (u01(rng) < 0.6) {
        const auto [clon, clat] = red[rng() % red.size()];
        const double lat = std::clamp(clat + jitter(rng), -89.9, 89.9);
        const double lon = clon + jitter(rng) / std::max(0.2, std::cos(lat * kDegToRad));
        p.fixations.points.push_back(to_pixel(std::remainder(lon, 360.0), lat));
      } else {
        const auto [lon, lat] = random_direction();
        p.fixations.points.push_back(to_pixel(lon, lat));
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Ground-truth density of a panorama from its fixations: each fixation is a
/// Gaussian in angle (sigma_deg) on the sphere, normalized to unit mass.
inline SaliencyMap panorama_density(const FixationMap& fix, double sigma_deg) {
  require(sigma_deg > 0.0, ErrorCode::invalid_argument, "density sigma must be > 0");
  require(!fix.points.empty(), ErrorCode::invalid_argument, "panorama density needs at least one fixation");
  fix.validate();
  std::vector<Vec3> dirs;
  for (const auto& p : fix.points) {
    const auto [lon, lat] = erp_pixel_lonlat(p.x, p.y, fix.width, fix.height);
    dirs.push_back(direction_from_lonlat(lon, lat));
  }
  const double inv = 1.0 / (2.0 * sigma_deg * sigma_deg);
  SaliencyMap m(fix.width, fix.height);
  for (std::size_t y = 0; y < fix.height; ++y)
    for (std::size_t x = 0; x < fix.width; ++x) {
      const auto [lon, lat] = erp_pixel_lonlat(static_cast<double>(x), static_cast<double>(y), fix.width, fix.height);
      const Vec3 d = direction_from_lonlat(lon, lat);
      double acc = 0.0;
      for (const auto& f : dirs) {
        const double ang = std::acos(std::clamp(dot(d, f), -1.0, 1.0)) * kRadToDeg;
        if (ang < 4.0 * sigma_deg) acc += std::exp(-ang * ang * inv);
      }
      m.at(y, x) = acc;
    }
  const double total = std::accumulate(m.values.begin(), m.values.end(), 0.0);
  for (auto& v : m.values) v /= total;
  return m;
}

// ---------------------------------------------------------------------------
// Logs

/// One row per optimizer step. Columns not measured in a phase are empty.
struct LogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::optional<double> loss_d;
  std::optional<double> loss_g;
  double content = 0.0;
  std::optional<double> d_acc;
};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string log_csv(const std::vector<LogRow>& rows) {
  std::string out = "epoch,step,loss_D,loss_G,content,D_acc\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + opt(r.loss_d) + "," + opt(r.loss_g) + "," +
           format_number(r.content) + "," + opt(r.d_acc) + "\n";
  return out;
}

struct TrainHooks {
  std::function<void(const LogRow&)> on_step;
  std::function<void(std::size_t epoch)> on_checkpoint;  // every checkpoint_every epochs
};

// ---------------------------------------------------------------------------
// Training

template <class T>
struct PreparedSample {
  Tensor<T> image;
  Tensor<T> real;  // ground truth scaled to max 1, the discriminator's positive input
  SaliencyMap density;
  FixationMap fixations;
};

template <class T>
std::vector<PreparedSample<T>> prepare(const std::vector<Sample>& samples) {
  std::vector<PreparedSample<T>> out;
  for (const auto& s : samples) {
    require(s.image.channels == 3 && s.image.width == s.density.width && s.image.height == s.density.height,
            ErrorCode::shape_mismatch, "sample '" + s.source + "' has inconsistent image and density sizes");
    out.push_back({image_tensor<T>(s.image), saliency_tensor<T>(normalize_max(s.density)), s.density, s.fixations});
  }
  return out;
}

template <class T>
void set_trainable(const std::vector<Tensor<T>>& params, bool on) {
  for (Tensor<T> p : params) p.set_requires_grad(on);
}

inline void require_finite(double v, const std::string& what) {
  require(std::isfinite(v), ErrorCode::non_finite, what + " became non-finite");
}

/// Indices of each batch of one epoch, shuffled by (seed, epoch).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed * 1000003ULL + epoch);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch)
    out.emplace_back(idx.begin() + static_cast<long>(i), idx.begin() + static_cast<long>(std::min(n, i + batch)));
  return out;
}

/// Stages whose outputs are supervised.
inline std::pair<std::size_t, std::size_t> supervised_stages(const TrainConfig& cfg) {
  return {cfg.per_stage_loss ? 0 : cfg.stages - 1, cfg.stages};
}

/// Content loss of one sample summed over the supervised stages.
template <class T>
Tensor<T> sample_content(const PreparedSample<T>& s, const GeneratorParams<T>& g, const TrainConfig& cfg) {
  const auto outs = multi_stage_forward(s.image, g, cfg.stages);
  const auto [first, last] = supervised_stages(cfg);
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t k = first; k < last; ++k) total = total + content_loss(outs[k], s.density, s.fixations);
  return total;
}

/// Content-loss pretraining with Adam. The learning rate must be finite and
/// >= 0; at 0 the weights stay bit-identical because decay also scales with lr.
template <class T>
std::vector<LogRow> pretrain(const std::vector<Sample>& dataset, GeneratorParams<T>& g, const TrainConfig& cfg,
                             const TrainHooks& hooks = {}) {
  require(!dataset.empty(), ErrorCode::invalid_argument, "pretrain needs at least one sample");
  require(cfg.stages >= 1 && cfg.batch >= 1, ErrorCode::invalid_argument, "stages and batch must be >= 1");
  const auto data = prepare<T>(dataset);
  auto params = g.parameters();
  auto adam = make_adam(params, cfg.lr, cfg.weight_decay);
  std::vector<LogRow> log;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    for (const auto& batch : epoch_batches(data.size(), cfg.batch, cfg.seed, epoch)) {
      if (cfg.max_steps && step >= cfg.max_steps) break;
      zero_grad(params);
      Tensor<T> loss = Tensor<T>::scalar(T(0));
      for (std::size_t i : batch) loss = loss + sample_content(data[i], g, cfg);
      loss = loss * (T(1) / static_cast<T>(batch.size()));
      require_finite(static_cast<double>(loss.item()), "pretraining loss at step " + std::to_string(step));
      backward(loss);
      adam_step(params, adam);
      LogRow row{epoch, step++, std::nullopt, std::nullopt, static_cast<double>(loss.item()), std::nullopt};
      log.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
    }
    for (const auto& p : params) require(p.is_finite(), ErrorCode::non_finite, "generator weights became non-finite");
    if (hooks.on_checkpoint && cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(epoch);
    if (cfg.max_steps && step >= cfg.max_steps) break;
  }
  return log;
}

struct StepStats {
  double loss = 0.0;
  double content = 0.0;
  double d_acc = 0.0;
};

/// Alternating updates: per batch one discriminator step on real pairs versus
/// the detached final-stage output, then one generator step through a frozen
/// discriminator. Each network is frozen while the other one learns, so no
/// gradient reaches it.
template <class T>
class AdversarialTrainer {
 public:
  AdversarialTrainer(GeneratorParams<T>& g, DiscriminatorParams<T>& d, const TrainConfig& cfg)
      : g_(g), d_(d), cfg_(cfg), g_params_(g.parameters()), d_params_(d.parameters()),
        g_adam_(make_adam(g_params_, cfg.lr, cfg.weight_decay)),
        d_adam_(make_adam(d_params_, cfg.lr, cfg.weight_decay)) {
    require(cfg.width == d.config.width && cfg.height == d.config.height, ErrorCode::shape_mismatch,
            "discriminator resolution differs from the training resolution");
  }

  /// 'D' and 'G' in the order steps were taken.
  const std::string& order() const { return order_; }

  StepStats d_step(const std::vector<const PreparedSample<T>*>& batch) {
    require(!batch.empty(), ErrorCode::invalid_argument, "empty batch");
    set_trainable(g_params_, false);
    set_trainable(d_params_, true);
    zero_grad(d_params_);
    Tensor<T> loss = Tensor<T>::scalar(T(0));
    std::size_t correct = 0;
    for (const auto* s : batch) {
      Tensor<T> fake;
      {
        NoGradGuard frozen;
        fake = multi_stage_forward(s->image, g_, cfg_.stages).back();
      }
      const Tensor<T> d_real = discriminator_forward(s->image, s->real, d_);
      const Tensor<T> d_fake = discriminator_forward(s->image, fake, d_);
      correct += (d_real.item() > T(0.5)) + (d_fake.item() < T(0.5));
      loss = loss + gan_losses(d_real, d_fake, Tensor<T>::scalar(T(0)), cfg_.objective).discriminator;
    }
    loss = loss * (T(1) / static_cast<T>(batch.size()));
    require_finite(static_cast<double>(loss.item()), "discriminator loss");
    backward(loss);
    adam_step(d_params_, d_adam_);
    set_trainable(g_params_, true);
    order_ += 'D';
    return {static_cast<double>(loss.item()), 0.0, static_cast<double>(correct) / (2.0 * static_cast<double>(batch.size()))};
  }

  StepStats g_step(const std::vector<const PreparedSample<T>*>& batch) {
    require(!batch.empty(), ErrorCode::invalid_argument, "empty batch");
    set_trainable(d_params_, false);
    set_trainable(g_params_, true);
    zero_grad(g_params_);
    const auto [first, last] = supervised_stages(cfg_);
    Tensor<T> loss = Tensor<T>::scalar(T(0));
    double content = 0.0;
    const Tensor<T> unused_real = Tensor<T>::scalar(T(0.5));
    for (const auto* s : batch) {
      const auto outs = multi_stage_forward(s->image, g_, cfg_.stages);
      for (std::size_t k = first; k < last; ++k) {
        const Tensor<T> c = content_loss(outs[k], s->density, s->fixations);
        content += static_cast<double>(c.item());
        const Tensor<T> d_fake = discriminator_forward(s->image, outs[k], d_);
        loss = loss + gan_losses(unused_real, d_fake, c, cfg_.objective).generator;
      }
    }
    loss = loss * (T(1) / static_cast<T>(batch.size()));
    require_finite(static_cast<double>(loss.item()), "generator loss");
    backward(loss);
    adam_step(g_params_, g_adam_);
    set_trainable(d_params_, true);
    order_ += 'G';
    return {static_cast<double>(loss.item()), content / static_cast<double>(batch.size()), 0.0};
  }

  std::vector<LogRow> run(const std::vector<Sample>& dataset, const TrainHooks& hooks = {}) {
    require(!dataset.empty(), ErrorCode::invalid_argument, "fine-tuning needs at least one sample");
    const auto data = prepare<T>(dataset);
    std::vector<LogRow> log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg_.finetune_epochs; ++epoch) {
      for (const auto& idx : epoch_batches(data.size(), cfg_.batch, cfg_.seed + 1, epoch)) {
        if (cfg_.max_steps && step >= cfg_.max_steps) break;
        std::vector<const PreparedSample<T>*> batch;
        for (std::size_t i : idx) batch.push_back(&data[i]);
        const StepStats d = d_step(batch);
        const StepStats g = g_step(batch);
        LogRow row{epoch, step++, d.loss, g.loss, g.content, d.d_acc};
        log.push_back(row);
        if (hooks.on_step) hooks.on_step(row);
      }
      if (hooks.on_checkpoint && cfg_.checkpoint_every && (epoch + 1) % cfg_.checkpoint_every == 0)
        hooks.on_checkpoint(epoch);
      if (cfg_.max_steps && step >= cfg_.max_steps) break;
    }
    return log;
  }

 private:
  GeneratorParams<T>& g_;
  DiscriminatorParams<T>& d_;
  TrainConfig cfg_;
  std::vector<Tensor<T>> g_params_;
  std::vector<Tensor<T>> d_params_;
  AdamState<T> g_adam_;
  AdamState<T> d_adam_;
  std::string order_;
};

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Mean content loss of every stage's output over `samples`.
template <class T>
std::vector<double> stage_content_losses(const std::vector<Sample>& samples, const GeneratorParams<T>& g,
                                         std::size_t stages) {
  require(!samples.empty(), ErrorCode::invalid_argument, "no samples to score");
  NoGradGuard no_grad;
  std::vector<double> mean(stages, 0.0);
  for (const auto& s : prepare<T>(samples)) {
    const auto outs = multi_stage_forward(s.image, g, stages);
    for (std::size_t k = 0; k < stages; ++k)
      mean[k] += static_cast<double>(content_loss(outs[k], s.density, s.fixations).item());
  }
  for (auto& v : mean) v /= static_cast<double>(samples.size());
  return mean;
}

/// Generator output of every stage for one planar image.
template <class T>
std::vector<SaliencyMap> predict_planar(const Image& image, const GeneratorParams<T>& g, std::size_t stages) {
  NoGradGuard no_grad;
  std::vector<SaliencyMap> out;
  for (const auto& o : multi_stage_forward(image_tensor<T>(image), g, stages)) out.push_back(tensor_saliency(o));
  return out;
}

struct PredictOptions {
  std::size_t face_width = 256;
  std::size_t face_height = 192;
  double stride = 10.0;
  double fov = 90.0;
};

/// Maps one rendered viewport to one saliency map per stage.
using ViewPredictor = std::function<std::vector<SaliencyMap>(const Image&)>;

/// Runs `predict` on every dense viewport, back-projects each stage map and
/// averages the overlaps; every result is scaled to max 1.
inline std::vector<SaliencyMap> predict_dense(const Image& erp, const ViewPredictor& predict, std::size_t stages,
                                              const PredictOptions& opt) {
  validate_erp(erp);
  require(erp.channels == 3, ErrorCode::invalid_argument, "panorama must be RGB");
  require(stages >= 1, ErrorCode::invalid_argument, "stage count must be >= 1");
  std::vector<AccumulatorMap> acc(stages, AccumulatorMap(erp.width, erp.height));
  for (const auto& view : dense_viewports(opt.stride, opt.face_width, opt.face_height, opt.fov)) {
    const auto maps = predict(extract_view(erp, view).image);
    require(maps.size() == stages, ErrorCode::shape_mismatch, "viewport predictor returned the wrong stage count");
    for (std::size_t k = 0; k < stages; ++k) backproject_accumulate(acc[k], FaceImage{view, to_image(maps[k])});
  }
  std::vector<SaliencyMap> out;
  for (const auto& a : acc) out.push_back(normalize_max(finalize_average(a)));
  return out;
}

template <class T>
std::vector<SaliencyMap> predict_erp_stages(const Image& erp, const GeneratorParams<T>& g, std::size_t stages,
                                            const PredictOptions& opt) {
  return predict_dense(erp, [&](const Image& face) { return predict_planar(face, g, stages); }, stages, opt);
}

template <class T>
SaliencyMap predict_erp(const Image& erp, const GeneratorParams<T>& g, std::size_t stages, const PredictOptions& opt) {
  return predict_erp_stages(erp, g, stages, opt).back();
}

struct MetricRow {
  std::string id;
  double kl = 0.0, cc = 0.0, nss = 0.0, auc = 0.0;
};

inline MetricRow score(const std::string& id, const SaliencyMap& pred, const SaliencyMap& gt, const FixationMap& fix) {
  return {id, kl_div(gt, pred), cc(gt, pred), nss(pred, fix), auc_judd(pred, fix)};
}

inline MetricRow mean_row(const std::vector<MetricRow>& rows) {
  MetricRow m{"mean"};
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.kl += r.kl;
    m.cc += r.cc;
    m.nss += r.nss;
    m.auc += r.auc;
  }
  const double n = static_cast<double>(rows.size());
  m.kl /= n;
  m.cc /= n;
  m.nss /= n;
  m.auc /= n;
  return m;
}

inline std::string metric_row_csv(const MetricRow& r) {
  return r.id + "," + format_number(r.kl) + "," + format_number(r.cc) + "," + format_number(r.nss) + "," +
         format_number(r.auc) + "\n";
}

inline constexpr const char* kMetricsHeader = "image,KL,CC,NSS,AUC\n";

/// image,KL,CC,NSS,AUC rows followed by the mean row.
inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = kMetricsHeader;
  for (const auto& r : rows) out += metric_row_csv(r);
  out += metric_row_csv(mean_row(rows));
  return out;
}

struct EvalItem {
  std::string id;
  Image erp;
  SaliencyMap density;
  FixationMap fixations;
};

struct StageReport {
  std::vector<std::vector<MetricRow>> per_stage;  // [stage][image]
  std::vector<MetricRow> stage_means;

  const std::vector<MetricRow>& final_rows() const { return per_stage.back(); }

  /// True when each stage's mean is at least as good as the previous one.
  bool monotone(double MetricRow::*field, bool higher_is_better) const {
    for (std::size_t k = 1; k < stage_means.size(); ++k) {
      const double prev = stage_means[k - 1].*field, cur = stage_means[k].*field;
      if (higher_is_better ? cur < prev : cur > prev) return false;
    }
    return true;
  }

  nlohmann::json to_json() const {
    nlohmann::json stages = nlohmann::json::array();
    for (std::size_t k = 0; k < stage_means.size(); ++k) {
      const auto& m = stage_means[k];
      stages.push_back({{"stage", k + 1}, {"KL", m.kl}, {"CC", m.cc}, {"NSS", m.nss}, {"AUC", m.auc}});
    }
    return {{"stages", stages},
            {"monotone", {{"KL", monotone(&MetricRow::kl, false)},
                          {"CC", monotone(&MetricRow::cc, true)},
                          {"NSS", monotone(&MetricRow::nss, true)},
                          {"AUC", monotone(&MetricRow::auc, true)}}}};
  }
};

/// Scores a panorama predictor, which returns one map per stage.
inline StageReport evaluate(const std::vector<EvalItem>& items,
                            const std::function<std::vector<SaliencyMap>(const Image&)>& predictor) {
  require(!items.empty(), ErrorCode::invalid_argument, "nothing to evaluate");
  StageReport report;
  for (const auto& item : items) {
    const auto maps = predictor(item.erp);
    require(!maps.empty(), ErrorCode::invalid_argument, "predictor returned no maps");
    if (report.per_stage.empty()) report.per_stage.resize(maps.size());
    require(maps.size() == report.per_stage.size(), ErrorCode::shape_mismatch, "predictor stage count changed");
    for (std::size_t k = 0; k < maps.size(); ++k)
      report.per_stage[k].push_back(score(item.id, maps[k], item.density, item.fixations));
  }
  for (const auto& rows : report.per_stage) report.stage_means.push_back(mean_row(rows));
  return report;
}

template <class T>
StageReport evaluate(const std::vector<EvalItem>& items, const GeneratorParams<T>& g, std::size_t stages,
                     const PredictOptions& opt) {
  return evaluate(items, [&](const Image& erp) { return predict_erp_stages(erp, g, stages, opt); });
}

}  // namespace mrgan
