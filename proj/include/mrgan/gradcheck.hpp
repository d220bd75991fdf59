#pragma once

// Central finite-difference checks of analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mrgan/metrics.hpp"
#include "mrgan/model.hpp"
#include "mrgan/ops.hpp"
#include "mrgan/tensor.hpp"

namespace mrgan {

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  double max_abs_grad = 0.0;   // largest analytic entry over the whole tensor
  std::size_t refined = 0;     // entries whose step was shrunk to stay off a kink
  std::size_t unresolved = 0;  // entries still straddling a kink at the smallest step
};

/// |a-n| / max(|a|, |n|, floor). The floor keeps entries whose true gradient
/// is numerically zero from dominating through rounding noise.
inline double gradient_rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference stencils: three-point (h, -h) or five-point (±h, ±2h).
enum class Stencil { three_point, five_point };

/// Compares `analytic` against central differences of `loss` in the entries of
/// `param`. When max_entries is nonzero and smaller than the tensor, a
/// seeded random subset of entries is checked. A difference quotient across
/// a kink (activation sign flip, pooling argmax switch, clamp) does not
/// estimate the derivative, so when any stencil point takes a different
/// branch than the base point the step is divided by 10, down to min_h.
/// Relative error uses the floor max(1e-6, 1e-3 * max |analytic|).
inline GradCheckResult check_gradient(const std::string& name, Tensor<double> param, std::span<const double> analytic,
                                      const std::function<double()>& loss, double h = 1e-4,
                                      std::size_t max_entries = 0, std::uint64_t seed = 0,
                                      Stencil stencil = Stencil::five_point, double min_h = 1e-8) {
  require(analytic.size() == param.numel(), ErrorCode::shape_mismatch, "gradient size mismatch for " + name);
  std::vector<std::size_t> idx(param.numel());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_entries != 0 && max_entries < idx.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_entries);
    std::sort(idx.begin(), idx.end());
  }
  GradCheckResult res{name};
  for (double g : analytic) res.max_abs_grad = std::max(res.max_abs_grad, std::abs(g));
  // Entries far below the tensor's own scale are judged on that scale.
  const double floor = std::max(1e-6, 1e-3 * res.max_abs_grad);
  auto values = param.mutable_data();
  auto traced = [&] {
    BranchTrace trace;
    loss();
    return trace.value();
  };
  for (std::size_t i : idx) {
    const double saved = values[i];
    const std::uint64_t base = traced();
    bool smooth = false;
    double numeric = 0.0;
    double step = h;
    for (;; step /= 10.0) {
      smooth = true;
      auto at = [&](double offset) {
        values[i] = saved + offset;
        BranchTrace trace;
        const double v = loss();
        smooth = smooth && trace.value() == base;
        return v;
      };
      if (stencil == Stencil::three_point) {
        numeric = (at(step) - at(-step)) / (2.0 * step);
      } else {
        numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
      }
      if (smooth || step / 10.0 < min_h * (1 - 1e-9)) break;
    }
    values[i] = saved;
    if (step != h) ++res.refined;
    if (!smooth) ++res.unresolved;
    res.max_abs_err = std::max(res.max_abs_err, std::abs(analytic[i] - numeric));
    res.max_rel_err = std::max(res.max_rel_err, gradient_rel_err(analytic[i], numeric, floor));
    ++res.checked;
  }
  return res;
}

struct GradCheckOptions {
  std::size_t size = 8;          // spatial extent of every check
  std::size_t channels = 4;      // generator width
  std::size_t stages = 3;        // stages in the end-to-end check
  std::size_t model_entries = 32;  // sampled entries per tensor in the end-to-end check; 0 = all
  double h = 1e-4;
  std::uint64_t seed = 0;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool param, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return param ? Tensor<double>::parameter(std::move(shape), std::move(v)) : Tensor<double>(std::move(shape), std::move(v));
}

/// Generator parameters for finite-difference checks. At 8x8 the training
/// init leaves the output within about 1e-3 of its mean, so a central
/// difference loses three digits to rounding before it starts. This draw
/// uses uniform weights at three times the unit-variance bound and jittered
/// biases, with the gate biases centred where init puts them so that every
/// layer passes signal.
template <class T>
GeneratorParams<T> gradcheck_generator(const GeneratorConfig& cfg, std::mt19937_64& rng, double gain = 3.0) {
  auto g = GeneratorParams<T>::zeros(cfg);
  for (auto& [name, t] : g.named_parameters()) {
    const Shape& s = t.shape();
    const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s.size() == 2 ? s[1] : 0;
    double centre = 0.0;
    if (name.ends_with("b_z")) centre = kUpdateGateBias;
    if (name.ends_with("se.fc2.bias")) centre = kExciteBias;
    const double bound = fan_in ? gain * std::sqrt(3.0 / static_cast<double>(fan_in)) : 0.5;
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> handle = t;
    for (auto& v : handle.mutable_data()) v = static_cast<T>(centre + u(rng));
  }
  return g;
}

/// Runs backward once, then checks every listed tensor against central
/// differences of the same loss.
inline void check_group(std::vector<GradCheckResult>& out, const std::string& group,
                        const std::vector<std::pair<std::string, Tensor<double>>>& tensors,
                        const std::function<Tensor<double>()>& loss, double h, std::size_t max_entries,
                        std::uint64_t seed) {
  for (const auto& [name, t] : tensors) {
    Tensor<double> handle = t;
    handle.zero_grad();
  }
  backward(loss());
  for (const auto& [name, t] : tensors) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    out.push_back(check_gradient(group + ":" + name, t, analytic, [&] { return loss().item(); }, h, max_entries,
                                 seed + out.size()));
  }
}

}  // namespace detail

/// Finite-difference suite: each differentiable op on random inputs, all
/// generator parameters through the content loss, and the S-stage model with
/// content, adversarial and discriminator losses end to end.
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::vector<GradCheckResult> out;
  const std::size_t n = opt.size, c = opt.channels;
  auto rt = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(std::move(s), rng, true, lo, hi); };
  const Tensor<double> none;

  {
    auto x = rt({3, n, n}), k = rt({c, 3, 3, 3}), b = rt({c}), w = rt({c, n, n});
    detail::check_group(out, "conv2d", {{"input", x}, {"kernel", k}, {"bias", b}},
                        [&] { return sum(conv2d(x, k, b, 2) * w); }, opt.h, 0, opt.seed);
  }
  {
    auto x = rt({c, n, n}), w = rt({c, n / 2, n / 2});
    detail::check_group(out, "max_pool2d", {{"input", x}}, [&] { return sum(max_pool2d(x) * w); }, opt.h, 0, opt.seed);
  }
  {
    auto x = rt({c, 2, 2}), w = rt({5, 4 * c}), b = rt({5});
    detail::check_group(out, "fully_connected", {{"input", x}, {"weight", w}, {"bias", b}},
                        [&] { return sum(square(fully_connected(x, w, b))); }, opt.h, 0, opt.seed);
  }
  for (auto [name, act] : {std::pair{"leaky_relu", Activation::leaky(kLeakySlope)}, std::pair{"relu", Activation::relu()},
                           std::pair{"tanh", Activation::tanh()}, std::pair{"sigmoid", Activation::sigmoid()}}) {
    auto x = rt({c, n, n}, -2.0, 2.0), w = rt({c, n, n});
    detail::check_group(out, name, {{"input", x}}, [&, act = act] { return sum(activation(x, act) * w); }, opt.h, 0,
                        opt.seed);
  }
  {
    auto x = rt({c, n, n}), w = rt({c});
    detail::check_group(out, "global_avg_pool", {{"input", x}}, [&] { return sum(global_avg_pool(x) * w); }, opt.h, 0,
                        opt.seed);
  }
  {
    const std::size_t r = std::max<std::size_t>(1, c / 4);
    SqueezeExciteParams<double> p{rt({r, c}), rt({r}), rt({c, r}), rt({c})};
    auto x = rt({c, n, n}), w = rt({c, n, n});
    detail::check_group(out, "se_block",
                        {{"input", x}, {"fc1.weight", p.fc1_weight}, {"fc1.bias", p.fc1_bias},
                         {"fc2.weight", p.fc2_weight}, {"fc2.bias", p.fc2_bias}},
                        [&] { return sum(se_block(x, p) * w); }, opt.h, 0, opt.seed);
  }
  {
    ConvGruParams<double> p{rt({c, c, 3, 3}), rt({c, c, 3, 3}), rt({c}), rt({c, c, 3, 3}), rt({c, c, 3, 3}), rt({c}),
                            rt({c, c, 3, 3}), rt({c, c, 3, 3}), rt({c}), 2};
    auto x = rt({c, n, n}), hprev = rt({c, n, n}), w = rt({c, n, n});
    detail::check_group(out, "conv_gru",
                        {{"x", x}, {"h", hprev}, {"W_z", p.W_z}, {"U_z", p.U_z}, {"b_z", p.b_z}, {"W_r", p.W_r},
                         {"U_r", p.U_r}, {"b_r", p.b_r}, {"W_n", p.W_n}, {"U_n", p.U_n}, {"b_n", p.b_n}},
                        [&] { return sum(conv_gru_update(x, hprev, p) * w); }, opt.h, 0, opt.seed);
  }

  // Shared synthetic sample for the loss and model checks.
  std::uniform_int_distribution<int> coord(0, static_cast<int>(n) - 1);
  FixationMap fix{n, n, {}};
  for (int i = 0; i < 4; ++i) fix.points.push_back({coord(rng), coord(rng)});
  const SaliencyMap gt = gaussian_density(fix, 1.5);
  const Tensor<double> image = detail::random_tensor({3, n, n}, rng, false, 0.0, 1.0);
  {
    auto pred = rt({1, n, n}, 0.05, 0.95);
    detail::check_group(out, "content_loss", {{"pred", pred}}, [&] { return content_loss(pred, gt, fix); }, opt.h, 0,
                        opt.seed);
  }

  const GeneratorConfig gcfg{c, std::min<std::size_t>(4, c)};
  const auto g = detail::gradcheck_generator<double>(gcfg, rng);
  detail::check_group(out, "generator", g.named_parameters(), [&] {
    return content_loss(multi_stage_forward(image, g, 1).back(), gt, fix);
  }, opt.h, 0, opt.seed);

  const auto d = DiscriminatorParams<double>::init(DiscriminatorConfig{n, n}, opt.seed + 2);
  const Tensor<double> real = saliency_tensor<double>(normalize_max(gt));
  auto model_loss = [&] {
    const auto outs = multi_stage_forward(image, g, opt.stages);
    const Tensor<double> d_real = discriminator_forward(image, real, d);
    Tensor<double> total = Tensor<double>::scalar(0.0);
    for (const auto& o : outs) {
      const auto l = gan_losses(d_real, discriminator_forward(image, o, d), content_loss(o, gt, fix));
      total = total + l.generator + l.discriminator;
    }
    return total;
  };
  auto all = g.named_parameters();
  for (auto& p : d.named_parameters()) all.push_back(p);
  detail::check_group(out, "model", all, model_loss, opt.h, opt.model_entries, opt.seed);
  return out;
}

}  // namespace mrgan
