#pragma once

// Ground-truth density construction and the KL / CC / NSS / AUC-Judd metrics.
//
// Conventions: KL follows the MIT saliency benchmark form
// sum G*log(eps + G/(P+eps)) with both maps normalized to unit sum and
// eps = 1e-7, ordered KL(ground truth || prediction). NSS uses the population
// standard deviation. AUC-Judd thresholds at the distinct saliency values
// found under fixations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mrgan/error.hpp"
#include "mrgan/image.hpp"

namespace mrgan {

inline constexpr double kKlEpsilon = 1e-7;

/// Sum of isotropic Gaussians at each fixation, truncated at 4 sigma and
/// normalized to unit mass.
inline SaliencyMap gaussian_density(const FixationMap& fix, double sigma) {
  require(sigma > 0.0, ErrorCode::invalid_argument, "gaussian sigma must be > 0");
  require(!fix.points.empty(), ErrorCode::invalid_argument, "gaussian_density needs at least one fixation");
  fix.validate();
  SaliencyMap out(fix.width, fix.height);
  const double cutoff = 4.0 * sigma;
  const long reach = static_cast<long>(std::floor(cutoff));
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (const auto& p : fix.points) {
    const long ylo = std::max(0L, p.y - reach), yhi = std::min<long>(static_cast<long>(fix.height) - 1, p.y + reach);
    const long xlo = std::max(0L, p.x - reach), xhi = std::min<long>(static_cast<long>(fix.width) - 1, p.x + reach);
    for (long y = ylo; y <= yhi; ++y)
      for (long x = xlo; x <= xhi; ++x) {
        const double d2 = static_cast<double>((x - p.x) * (x - p.x) + (y - p.y) * (y - p.y));
        if (d2 > cutoff * cutoff) continue;
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) += std::exp(-d2 * inv2s2);
      }
  }
  const double total = std::accumulate(out.values.begin(), out.values.end(), 0.0);
  for (auto& v : out.values) v /= total;
  return out;
}

namespace detail {

inline void require_same_dims(const SaliencyMap& a, const SaliencyMap& b, const char* op) {
  require(a.width == b.width && a.height == b.height, ErrorCode::shape_mismatch,
          std::string(op) + ": map sizes " + std::to_string(a.width) + "x" + std::to_string(a.height) + " and " +
              std::to_string(b.width) + "x" + std::to_string(b.height) + " differ");
}

inline void require_same_dims(const SaliencyMap& a, const FixationMap& f, const char* op) {
  require(a.width == f.width && a.height == f.height, ErrorCode::shape_mismatch,
          std::string(op) + ": saliency map and fixation map sizes differ");
}

inline double mass(const SaliencyMap& m, const char* op) {
  double total = 0.0;
  for (double v : m.values) {
    require(std::isfinite(v) && v >= 0.0, ErrorCode::invalid_argument,
            std::string(op) + ": saliency values must be finite and nonnegative");
    total += v;
  }
  require(total > 0.0, ErrorCode::invalid_argument, std::string(op) + ": map is identically zero");
  return total;
}

struct Moments {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline Moments moments(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / n)};
}

}  // namespace detail

inline double kl_div(const SaliencyMap& gt, const SaliencyMap& pred) {
  detail::require_same_dims(gt, pred, "kl_div");
  const double gs = detail::mass(gt, "kl_div"), ps = detail::mass(pred, "kl_div");
  double kl = 0.0;
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const double g = gt.values[i] / gs, p = pred.values[i] / ps;
    kl += g * std::log(kKlEpsilon + g / (p + kKlEpsilon));
  }
  return kl;
}

/// Pearson correlation over all pixels.
inline double cc(const SaliencyMap& a, const SaliencyMap& b) {
  detail::require_same_dims(a, b, "cc");
  const auto ma = detail::moments(a.values), mb = detail::moments(b.values);
  require(ma.stddev > 0.0 && mb.stddev > 0.0, ErrorCode::invalid_argument, "cc: input has zero variance");
  double cov = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) cov += (a.values[i] - ma.mean) * (b.values[i] - mb.mean);
  cov /= static_cast<double>(a.values.size());
  return std::clamp(cov / (ma.stddev * mb.stddev), -1.0, 1.0);
}

inline double nss(const SaliencyMap& pred, const FixationMap& fix) {
  detail::require_same_dims(pred, fix, "nss");
  require(!fix.points.empty(), ErrorCode::invalid_argument, "nss: no fixations");
  fix.validate();
  const auto m = detail::moments(pred.values);
  require(m.stddev > 0.0, ErrorCode::invalid_argument, "nss: prediction has zero variance");
  double total = 0.0;
  for (const auto& p : fix.points)
    total += (pred.at(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x)) - m.mean) / m.stddev;
  return total / static_cast<double>(fix.points.size());
}

/// ROC area with fixated pixels as positives. Thresholds are the distinct
/// saliency values at fixations, so equal-valued pixels enter the curve
/// together and ties contribute half credit.
inline double auc_judd(const SaliencyMap& pred, const FixationMap& fix) {
  detail::require_same_dims(pred, fix, "auc_judd");
  require(!fix.points.empty(), ErrorCode::invalid_argument, "auc_judd: no fixations");
  fix.validate();
  std::vector<char> fixated(pred.values.size(), 0);
  std::vector<double> pos;
  for (const auto& p : fix.points) {
    const std::size_t idx = static_cast<std::size_t>(p.y) * pred.width + static_cast<std::size_t>(p.x);
    fixated[idx] = 1;
    pos.push_back(pred.values[idx]);
  }
  std::vector<double> neg;
  for (std::size_t i = 0; i < pred.values.size(); ++i)
    if (!fixated[i]) neg.push_back(pred.values[i]);
  require(!neg.empty(), ErrorCode::invalid_argument, "auc_judd: every pixel is fixated");

  std::sort(pos.begin(), pos.end(), std::greater<>());
  std::sort(neg.begin(), neg.end(), std::greater<>());
  std::vector<double> thresholds(pos);
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  double area = 0.0, prev_tp = 0.0, prev_fp = 0.0;
  std::size_t ip = 0, in = 0;
  for (double t : thresholds) {
    while (ip < pos.size() && pos[ip] >= t) ++ip;
    while (in < neg.size() && neg[in] >= t) ++in;
    const double tp = static_cast<double>(ip) / np, fp = static_cast<double>(in) / nn;
    area += 0.5 * (tp + prev_tp) * (fp - prev_fp);
    prev_tp = tp;
    prev_fp = fp;
  }
  area += 0.5 * (1.0 + prev_tp) * (1.0 - prev_fp);
  return area;
}

/// Fixation CSV: header "x,y", then one integer pair per line.
inline FixationMap parse_fixation_csv(const std::string& text, std::size_t width, std::size_t height) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::format, "fixation CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "x,y", ErrorCode::format, "fixation CSV header must be 'x,y', got '" + line + "'");
  FixationMap fix{width, height, {}};
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    long x = 0, y = 0;
    char comma = 0;
    require(static_cast<bool>(row >> x >> comma >> y) && comma == ',' && (row >> std::ws).eof(), ErrorCode::format,
            "fixation CSV line " + std::to_string(lineno) + " is not an integer pair");
    fix.points.push_back({static_cast<int>(x), static_cast<int>(y)});
  }
  fix.validate();
  return fix;
}

inline std::string format_fixation_csv(const FixationMap& fix) {
  std::ostringstream out;
  out << "x,y\n";
  for (const auto& p : fix.points) out << p.x << ',' << p.y << '\n';
  return out.str();
}

inline FixationMap load_fixation_csv(const std::filesystem::path& path, std::size_t width, std::size_t height) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_fixation_csv(ss.str(), width, height);
}

}  // namespace mrgan
