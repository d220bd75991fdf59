#pragma once

// Multi-stage recurrent saliency generator, conditional discriminator and
// their losses.
//
// One stage: L0 (3x3 conv, leaky ReLU) -> L1..L6 (ConvGRU whose input kernels
// carry the layer dilation 1,2,4,8,16,1, then leaky ReLU, then squeeze-excite)
// -> L7 (1x1 conv to one channel, sigmoid). The GRU output of layer j at stage
// s is the hidden state handed to layer j at stage s+1. Stages share one
// parameter set; stage s+1 sees the RGB input multiplied by stage s's map.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mrgan/checkpoint.hpp"
#include "mrgan/image.hpp"
#include "mrgan/ops.hpp"
#include "mrgan/tensor.hpp"

namespace mrgan {

inline constexpr std::size_t kRecurrentLayers = 6;
inline constexpr std::array<int, kRecurrentLayers> kRecurrentDilations{1, 2, 4, 8, 16, 1};
inline constexpr double kLeakySlope = 0.2;
inline constexpr double kUpdateGateBias = 2.0;
inline constexpr double kExciteBias = 3.0;

struct GeneratorConfig {
  std::size_t channels = 24;
  std::size_t se_ratio = 4;

  void validate() const {
    require(channels >= 1 && se_ratio >= 1, ErrorCode::invalid_argument, "generator width and SE ratio must be >= 1");
    require(channels % se_ratio == 0, ErrorCode::invalid_argument,
            "generator channels (" + std::to_string(channels) + ") must be divisible by the SE ratio (" +
                std::to_string(se_ratio) + ")");
  }
};

template <class T>
struct SqueezeExciteParams {
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <class T>
struct ConvGruParams {
  Tensor<T> W_z, U_z, b_z;
  Tensor<T> W_r, U_r, b_r;
  Tensor<T> W_n, U_n, b_n;
  int dilation = 1;
};

template <class T>
struct RecurrentLayerParams {
  ConvGruParams<T> gru;
  SqueezeExciteParams<T> se;
};

template <class T>
using HiddenStates = std::array<Tensor<T>, kRecurrentLayers>;

namespace detail {

template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain_slope = kLeakySlope) {
  const double bound = std::sqrt(6.0 / ((1.0 + gain_slope * gain_slope) * static_cast<double>(fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

}  // namespace detail

template <class T>
struct GeneratorParams {
  GeneratorConfig config;
  Tensor<T> l0_weight, l0_bias;
  std::array<RecurrentLayerParams<T>, kRecurrentLayers> layers;
  Tensor<T> l7_weight, l7_bias;

  /// All-zero parameters of the right shapes.
  static GeneratorParams zeros(const GeneratorConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.channels, r = c / cfg.se_ratio;
    GeneratorParams g;
    g.config = cfg;
    g.l0_weight = Tensor<T>::parameter({c, 3, 3, 3});
    g.l0_bias = Tensor<T>::parameter({c});
    for (std::size_t j = 0; j < kRecurrentLayers; ++j) {
      auto& L = g.layers[j];
      for (Tensor<T>* k : {&L.gru.W_z, &L.gru.U_z, &L.gru.W_r, &L.gru.U_r, &L.gru.W_n, &L.gru.U_n})
        *k = Tensor<T>::parameter({c, c, 3, 3});
      for (Tensor<T>* b : {&L.gru.b_z, &L.gru.b_r, &L.gru.b_n}) *b = Tensor<T>::parameter({c});
      L.gru.dilation = kRecurrentDilations[j];
      L.se.fc1_weight = Tensor<T>::parameter({r, c});
      L.se.fc1_bias = Tensor<T>::parameter({r});
      L.se.fc2_weight = Tensor<T>::parameter({c, r});
      L.se.fc2_bias = Tensor<T>::parameter({c});
    }
    g.l7_weight = Tensor<T>::parameter({1, c, 1, 1});
    g.l7_bias = Tensor<T>::parameter({1});
    return g;
  }

  /// Kaiming-uniform weights and zero biases, except the update gate (+2) and
  /// the SE expansion (+3). At the first stage the hidden state is zero, so a
  /// closed update gate or half-open SE gates scale every layer down; with six
  /// layers that left the output map with a spatial std near 1e-8.
  static GeneratorParams init(const GeneratorConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    GeneratorParams g = zeros(cfg);
    const std::size_t c = cfg.channels, r = c / cfg.se_ratio;
    g.l0_weight = detail::kaiming_uniform<T>({c, 3, 3, 3}, 27, rng);
    for (auto& L : g.layers) {
      for (Tensor<T>* k : {&L.gru.W_z, &L.gru.U_z, &L.gru.W_r, &L.gru.U_r, &L.gru.W_n, &L.gru.U_n})
        *k = detail::kaiming_uniform<T>({c, c, 3, 3}, 9 * c, rng);
      L.gru.b_z = Tensor<T>::parameter({c}, T(kUpdateGateBias));
      L.se.fc1_weight = detail::kaiming_uniform<T>({r, c}, c, rng, 0.0);
      L.se.fc2_weight = detail::kaiming_uniform<T>({c, r}, r, rng, 0.0);
      L.se.fc2_bias = Tensor<T>::parameter({c}, T(kExciteBias));
    }
    g.l7_weight = detail::kaiming_uniform<T>({1, c, 1, 1}, c, rng);
    return g;
  }

  /// Canonical checkpoint names in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{{"gen.L0.weight", l0_weight}, {"gen.L0.bias", l0_bias}};
    for (std::size_t j = 0; j < kRecurrentLayers; ++j) {
      const auto& L = layers[j];
      const std::string p = "gen.L" + std::to_string(j + 1) + ".";
      out.insert(out.end(), {{p + "W_z", L.gru.W_z},
                             {p + "U_z", L.gru.U_z},
                             {p + "b_z", L.gru.b_z},
                             {p + "W_r", L.gru.W_r},
                             {p + "U_r", L.gru.U_r},
                             {p + "b_r", L.gru.b_r},
                             {p + "W_n", L.gru.W_n},
                             {p + "U_n", L.gru.U_n},
                             {p + "b_n", L.gru.b_n},
                             {p + "se.fc1.weight", L.se.fc1_weight},
                             {p + "se.fc1.bias", L.se.fc1_bias},
                             {p + "se.fc2.weight", L.se.fc2_weight},
                             {p + "se.fc2.bias", L.se.fc2_bias}});
    }
    out.insert(out.end(), {{"gen.L7.weight", l7_weight}, {"gen.L7.bias", l7_bias}});
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }
};

/// Closed-form trainable parameter count of the generator.
inline std::size_t generator_parameter_count(const GeneratorConfig& cfg) {
  const std::size_t c = cfg.channels, r = c / cfg.se_ratio;
  const std::size_t l0 = 27 * c + c;
  const std::size_t gru = 6 * 9 * c * c + 3 * c;
  const std::size_t se = r * c + r + c * r + c;
  const std::size_t l7 = c + 1;
  return l0 + kRecurrentLayers * (gru + se) + l7;
}

struct DiscriminatorConfig {
  std::size_t width = 256;
  std::size_t height = 192;

  std::size_t fc1_inputs() const { return (width / 8) * (height / 8) * 64; }

  void validate() const {
    require(width >= 8 && height >= 8 && width % 8 == 0 && height % 8 == 0, ErrorCode::invalid_argument,
            "discriminator resolution must be a positive multiple of 8 in both axes");
  }
};

template <class T>
struct DiscriminatorParams {
  DiscriminatorConfig config;
  std::array<Tensor<T>, 6> conv_weight, conv_bias;
  std::array<Tensor<T>, 3> fc_weight, fc_bias;

  static constexpr std::array<std::size_t, 7> kConvChannels{4, 3, 32, 64, 64, 64, 64};
  static constexpr std::array<std::size_t, 6> kConvKernel{1, 3, 3, 3, 3, 3};

  static std::array<std::size_t, 4> fc_sizes(const DiscriminatorConfig& cfg) { return {cfg.fc1_inputs(), 100, 2, 1}; }

  static DiscriminatorParams zeros(const DiscriminatorConfig& cfg) {
    cfg.validate();
    DiscriminatorParams d;
    d.config = cfg;
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t k = kConvKernel[i];
      d.conv_weight[i] = Tensor<T>::parameter({kConvChannels[i + 1], kConvChannels[i], k, k});
      d.conv_bias[i] = Tensor<T>::parameter({kConvChannels[i + 1]});
    }
    const auto fc = fc_sizes(cfg);
    for (std::size_t i = 0; i < 3; ++i) {
      d.fc_weight[i] = Tensor<T>::parameter({fc[i + 1], fc[i]});
      d.fc_bias[i] = Tensor<T>::parameter({fc[i + 1]});
    }
    return d;
  }

  static DiscriminatorParams init(const DiscriminatorConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    DiscriminatorParams d = zeros(cfg);
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t k = kConvKernel[i];
      d.conv_weight[i] =
          detail::kaiming_uniform<T>({kConvChannels[i + 1], kConvChannels[i], k, k}, kConvChannels[i] * k * k, rng);
    }
    const auto fc = fc_sizes(cfg);
    for (std::size_t i = 0; i < 3; ++i) d.fc_weight[i] = detail::kaiming_uniform<T>({fc[i + 1], fc[i]}, fc[i], rng, 1.0);
    return d;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < 6; ++i) {
      const std::string p = "disc.conv" + std::to_string(i + 1) + ".";
      out.emplace_back(p + "weight", conv_weight[i]);
      out.emplace_back(p + "bias", conv_bias[i]);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string p = "disc.fc" + std::to_string(i + 1) + ".";
      out.emplace_back(p + "weight", fc_weight[i]);
      out.emplace_back(p + "bias", fc_bias[i]);
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : named_parameters()) {
      Tensor<T> handle = t;
      handle.set_requires_grad(on);
    }
  }
};

// ---------------------------------------------------------------------------
// Forward passes

/// Channel attention: gates = sigmoid(fc2(relu(fc1(avgpool(x))))), x scaled per channel.
template <class T>
Tensor<T> se_block(const Tensor<T>& features, const SqueezeExciteParams<T>& p) {
  require(features.rank() == 3 && p.fc1_weight.dim(1) == features.dim(0), ErrorCode::shape_mismatch,
          "se_block: feature channels do not match SE parameters");
  const Tensor<T> squeeze = global_avg_pool(features);
  const Tensor<T> hidden = relu(fully_connected(squeeze, p.fc1_weight, p.fc1_bias));
  const Tensor<T> gates = sigmoid(fully_connected(hidden, p.fc2_weight, p.fc2_bias));
  return scale_channels(features, gates);
}

/// ConvGRU update
///   z = sigma(W_z*x + U_z*h + b_z)
///   r = sigma(W_r*x + U_r*h + b_r)
///   n = tanh(W_n*x + U_n*(r.h) + b_n)
///   out = (1-z).h + z.n
/// where x is this stage's previous-layer map, h the same layer's map from the
/// previous stage (zeros at the first stage), W dilated and U plain 3x3.
template <class T>
Tensor<T> conv_gru_update(const Tensor<T>& x, const Tensor<T>& h_prev, const ConvGruParams<T>& p) {
  require(x.rank() == 3, ErrorCode::shape_mismatch, "conv_gru_update: x must be [C,H,W]");
  const Shape hidden_shape{p.W_z.dim(0), x.dim(1), x.dim(2)};
  const Tensor<T> h = h_prev.defined() ? h_prev : Tensor<T>(hidden_shape);
  require(h.shape() == hidden_shape, ErrorCode::shape_mismatch,
          "conv_gru_update: hidden state " + shape_str(h.shape()) + " does not match " + shape_str(hidden_shape));
  const Tensor<T> none;
  const Tensor<T> z = sigmoid(conv2d(x, p.W_z, p.b_z, p.dilation) + conv2d(h, p.U_z, none, 1));
  const Tensor<T> r = sigmoid(conv2d(x, p.W_r, p.b_r, p.dilation) + conv2d(h, p.U_r, none, 1));
  const Tensor<T> n = tanh(conv2d(x, p.W_n, p.b_n, p.dilation) + conv2d(r * h, p.U_n, none, 1));
  return (T(1) - z) * h + z * n;
}

template <class T>
struct StageResult {
  Tensor<T> output;  // [1,H,W] in [0,1]
  HiddenStates<T> hidden;
};

template <class T>
StageResult<T> generator_stage(const Tensor<T>& input, const HiddenStates<T>& prev, const GeneratorParams<T>& g) {
  require(input.rank() == 3 && input.dim(0) == 3, ErrorCode::shape_mismatch,
          "generator input must be [3,H,W], got " + shape_str(input.shape()));
  const Tensor<T> none;
  StageResult<T> res;
  Tensor<T> x = leaky_relu(conv2d(input, g.l0_weight, g.l0_bias, 1), kLeakySlope);
  for (std::size_t j = 0; j < kRecurrentLayers; ++j) {
    const auto& L = g.layers[j];
    Tensor<T> h = conv_gru_update(x, prev[j], L.gru);
    res.hidden[j] = h;
    x = se_block(leaky_relu(h, kLeakySlope), L.se);
  }
  res.output = sigmoid(conv2d(x, g.l7_weight, g.l7_bias, 1));
  return res;
}

/// Runs S stages with I_{s+1} = I_1 * O_s and the hidden states carried
/// across stages. Returns O_1..O_S.
template <class T>
std::vector<Tensor<T>> multi_stage_forward(const Tensor<T>& image, const GeneratorParams<T>& g, std::size_t stages) {
  require(stages >= 1, ErrorCode::invalid_argument, "stage count must be >= 1");
  std::vector<Tensor<T>> outputs;
  HiddenStates<T> hidden;
  Tensor<T> input = image;
  for (std::size_t s = 0; s < stages; ++s) {
    StageResult<T> res = generator_stage(input, hidden, g);
    hidden = std::move(res.hidden);
    outputs.push_back(res.output);
    if (s + 1 < stages) input = mul_broadcast_channels(image, res.output);
  }
  return outputs;
}

/// Probability that (image, saliency) is a ground-truth pair.
template <class T>
Tensor<T> discriminator_forward(const Tensor<T>& image, const Tensor<T>& saliency, const DiscriminatorParams<T>& d) {
  require(image.rank() == 3 && image.dim(0) == 3 && saliency.rank() == 3 && saliency.dim(0) == 1,
          ErrorCode::shape_mismatch, "discriminator takes [3,H,W] and [1,H,W]");
  require(image.dim(1) == d.config.height && image.dim(2) == d.config.width, ErrorCode::shape_mismatch,
          "discriminator was built for " + std::to_string(d.config.width) + "x" + std::to_string(d.config.height) +
              ", got " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(1)));
  Tensor<T> x = concat_channels(image, saliency);
  for (std::size_t i = 0; i < 6; ++i) {
    x = leaky_relu(conv2d(x, d.conv_weight[i], d.conv_bias[i], 1), kLeakySlope);
    if (i == 1 || i == 3 || i == 5) x = max_pool2d(x);
  }
  x = tanh(fully_connected(x, d.fc_weight[0], d.fc_bias[0]));
  x = tanh(fully_connected(x, d.fc_weight[1], d.fc_bias[1]));
  return sigmoid(fully_connected(x, d.fc_weight[2], d.fc_bias[2]));
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kStdEpsilon = 1e-8;
inline constexpr double kLogFloor = 1e-12;

template <class T>
struct ContentTerms {
  Tensor<T> total;  // kl - cc - nss
  Tensor<T> kl, cc, nss;
};

/// Differentiable KL - CC - NSS of a prediction against a ground-truth
/// density and fixations. Standard deviations are smoothed as
/// sqrt(var + eps^2) so zero-variance predictions stay finite.
template <class T>
ContentTerms<T> content_loss_terms(const Tensor<T>& pred, const SaliencyMap& gt, const FixationMap& fix) {
  require(pred.rank() == 3 && pred.dim(0) == 1 && pred.dim(1) == gt.height && pred.dim(2) == gt.width,
          ErrorCode::shape_mismatch, "content_loss: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                                         std::to_string(gt.width) + "x" + std::to_string(gt.height));
  require(fix.width == gt.width && fix.height == gt.height, ErrorCode::shape_mismatch,
          "content_loss: fixation map size differs from ground truth");
  require(!fix.points.empty(), ErrorCode::invalid_argument, "content_loss: no fixations");
  fix.validate();
  const std::size_t n = gt.values.size();
  const T eps = static_cast<T>(1e-7);
  const T std_eps2 = static_cast<T>(kStdEpsilon * kStdEpsilon);

  double gsum = 0.0;
  for (double v : gt.values) gsum += v;
  require(gsum > 0.0, ErrorCode::invalid_argument, "content_loss: ground truth is identically zero");
  std::vector<T> gnorm(n), gcentered(n);
  double gmean = gsum / static_cast<double>(n), gvar = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    gnorm[i] = static_cast<T>(gt.values[i] / gsum);
    gcentered[i] = static_cast<T>(gt.values[i] - gmean);
    gvar += (gt.values[i] - gmean) * (gt.values[i] - gmean);
  }
  const T gstd = static_cast<T>(std::sqrt(gvar / static_cast<double>(n) + kStdEpsilon * kStdEpsilon));
  const Tensor<T> G(pred.shape(), std::move(gnorm));
  const Tensor<T> Gc(pred.shape(), std::move(gcentered));

  ContentTerms<T> t;
  const Tensor<T> P = pred / sum(pred);
  t.kl = sum(G * log(eps + G / (P + eps)));

  const Tensor<T> pc = pred - mean(pred);
  const Tensor<T> pstd = sqrt(mean(square(pc)) + std_eps2);
  t.cc = mean(pc * Gc) / (pstd * gstd);

  std::vector<std::size_t> idx;
  for (const auto& p : fix.points) idx.push_back(static_cast<std::size_t>(p.y) * gt.width + static_cast<std::size_t>(p.x));
  t.nss = mean(gather(pc / pstd, std::move(idx)));

  t.total = t.kl - t.cc - t.nss;
  return t;
}

template <class T>
Tensor<T> content_loss(const Tensor<T>& pred, const SaliencyMap& gt, const FixationMap& fix) {
  return content_loss_terms(pred, gt, fix).total;
}

enum class GeneratorObjective {
  log_one_minus_d,  // minimize log(1 - D(x, G(x))), as written in the cGAN generator objective
  neg_log_d,        // minimize -log D(x, G(x))
};

template <class T>
struct GanLosses {
  Tensor<T> discriminator;
  Tensor<T> generator;
};

/// loss_D = -[log D_real + log(1 - D_fake)]; loss_G = adversarial term + content.
/// Log arguments are floored at 1e-12.
template <class T>
GanLosses<T> gan_losses(const Tensor<T>& d_real, const Tensor<T>& d_fake, const Tensor<T>& content,
                        GeneratorObjective objective = GeneratorObjective::log_one_minus_d) {
  const T floor = static_cast<T>(kLogFloor);
  GanLosses<T> out;
  const Tensor<T> log_real = log(clamp_min(d_real, floor));
  const Tensor<T> log_fake_rejected = log(clamp_min(T(1) - d_fake, floor));
  out.discriminator = -(log_real + log_fake_rejected);
  const Tensor<T> adv = objective == GeneratorObjective::log_one_minus_d ? log_fake_rejected
                                                                          : -log(clamp_min(d_fake, floor));
  out.generator = adv + content;
  return out;
}

// ---------------------------------------------------------------------------
// Tensor <-> image glue and checkpoints

template <class T>
Tensor<T> image_tensor(const Image& img) {
  std::vector<T> v(img.pixels.begin(), img.pixels.end());
  return Tensor<T>({img.channels, img.height, img.width}, std::move(v));
}

template <class T>
Tensor<T> saliency_tensor(const SaliencyMap& m) {
  std::vector<T> v(m.values.begin(), m.values.end());
  return Tensor<T>({1, m.height, m.width}, std::move(v));
}

template <class T>
SaliencyMap tensor_saliency(const Tensor<T>& t) {
  require(t.rank() == 3 && t.dim(0) == 1, ErrorCode::shape_mismatch, "expected a [1,H,W] tensor");
  SaliencyMap m(t.dim(2), t.dim(1));
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = static_cast<double>(t[i]);
  return m;
}

template <class Params>
std::vector<NamedArray> to_named_arrays(const Params& p) {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : p.named_parameters()) out.push_back(to_named_array(name, t));
  return out;
}

/// Fills parameters from checkpoint arrays, matching by name. Every parameter
/// must be present with the expected shape.
template <class Params>
void load_named_arrays(Params& p, const std::vector<NamedArray>& arrays) {
  for (auto& [name, t] : p.named_parameters()) {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
    require(it != arrays.end(), ErrorCode::format, "checkpoint lacks array '" + name + "'");
    auto handle = t;
    assign_from(handle, *it);
  }
}

/// Infers generator width and SE ratio from checkpoint shapes.
inline GeneratorConfig generator_config_from(const std::vector<NamedArray>& arrays) {
  auto find = [&](const std::string& name) -> const NamedArray& {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
    require(it != arrays.end(), ErrorCode::format, "checkpoint lacks array '" + name + "'");
    return *it;
  };
  const auto& l0 = find("gen.L0.weight");
  const auto& se = find("gen.L1.se.fc1.weight");
  require(l0.shape.size() == 4 && se.shape.size() == 2 && se.shape[0] > 0, ErrorCode::format,
          "malformed generator arrays in checkpoint");
  GeneratorConfig cfg;
  cfg.channels = l0.shape[0];
  cfg.se_ratio = cfg.channels / se.shape[0];
  return cfg;
}

/// True when the checkpoint carries discriminator arrays.
inline bool has_discriminator(const std::vector<NamedArray>& arrays) {
  return std::any_of(arrays.begin(), arrays.end(), [](const NamedArray& a) { return a.name.rfind("disc.", 0) == 0; });
}

}  // namespace mrgan
