#pragma once

// Shared numerical kernels: temperature softmax, Gaussian smoothing, bilinear
// resampling and the central-difference gradient check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "zs3d/error.hpp"

namespace zs3d {

/// Row-major H x W grid of anomaly evidence.
struct ScoreMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  ScoreMap() = default;
  ScoreMap(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  ScoreMap(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw InputError("ScoreMap: value count does not match shape");
  }

  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }
  bool same_shape(const ScoreMap& o) const { return height == o.height && width == o.width; }

  bool operator==(const ScoreMap&) const = default;
};

inline ScoreMap transpose(const ScoreMap& m) {
  ScoreMap t(m.width, m.height);
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c) t.at(c, r) = m.at(r, c);
  return t;
}

/// p_j = exp(l_j / tau) / sum_k exp(l_k / tau), evaluated with max subtraction.
inline std::vector<double> softmax_temp(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax_temp: tau must be positive");
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - m) / tau);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

/// Second-channel probability of a two-way temperature softmax.
inline double softmax2_second(double first, double second, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax2_second: tau must be positive");
  const double m = std::max(first, second);
  const double e0 = std::exp((first - m) / tau);
  const double e1 = std::exp((second - m) / tau);
  return e1 / (e0 + e1);
}

/// Normalized 1-D Gaussian of radius ceil(4 sigma); index `radius` is the centre.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t x = -radius; x <= radius; ++x) {
    const double v = std::exp(-static_cast<double>(x * x) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(x + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

/// Half-sample symmetric border: (d c b a | a b c d | d c b a).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

namespace detail {

// One separable pass. Accumulating differences from the centre value keeps
// constant maps exact fixed points; the clamp keeps the output inside the
// input envelope despite rounding.
inline ScoreMap gaussian_pass(const ScoreMap& in, const std::vector<double>& k, bool horizontal) {
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto [lo_it, hi_it] = std::minmax_element(in.values.begin(), in.values.end());
  const double lo = *lo_it, hi = *hi_it;
  ScoreMap out(in.height, in.width);
  for (std::size_t r = 0; r < in.height; ++r) {
    for (std::size_t c = 0; c < in.width; ++c) {
      const double centre = in.at(r, c);
      double acc = 0.0;
      for (std::ptrdiff_t j = -radius; j <= radius; ++j) {
        const double v =
            horizontal ? in.at(r, reflect_index(static_cast<std::ptrdiff_t>(c) + j, in.width))
                       : in.at(reflect_index(static_cast<std::ptrdiff_t>(r) + j, in.height), c);
        acc += k[static_cast<std::size_t>(j + radius)] * (v - centre);
      }
      out.at(r, c) = std::clamp(centre + acc, lo, hi);
    }
  }
  return out;
}

}  // namespace detail

inline ScoreMap gaussian_filter(const ScoreMap& map, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_filter: sigma must be positive");
  if (map.values.empty()) return map;
  const auto k = gaussian_kernel(sigma);
  return detail::gaussian_pass(detail::gaussian_pass(map, k, true), k, false);
}

/// Bilinear resampling between grids with half-pixel centres
/// (align_corners = false), together with its adjoint for backpropagation.
class BilinearResampler {
 public:
  BilinearResampler(std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w)
      : src_h_(src_h), src_w_(src_w), dst_h_(dst_h), dst_w_(dst_w),
        rows_(axis(src_h, dst_h)), cols_(axis(src_w, dst_w)) {
    if (src_h == 0 || src_w == 0 || dst_h == 0 || dst_w == 0) {
      throw InputError("BilinearResampler: empty grid");
    }
  }

  std::size_t src_size() const { return src_h_ * src_w_; }
  std::size_t dst_size() const { return dst_h_ * dst_w_; }
  std::size_t dst_height() const { return dst_h_; }
  std::size_t dst_width() const { return dst_w_; }

  std::vector<double> apply(std::span<const double> src) const {
    if (src.size() != src_size()) throw InputError("BilinearResampler: source size mismatch");
    std::vector<double> out(dst_size());
    for (std::size_t y = 0; y < dst_h_; ++y) {
      const Tap& ty = rows_[y];
      for (std::size_t x = 0; x < dst_w_; ++x) {
        const Tap& tx = cols_[x];
        const double top = mix(src[ty.i0 * src_w_ + tx.i0], src[ty.i0 * src_w_ + tx.i1], tx.t);
        const double bot = mix(src[ty.i1 * src_w_ + tx.i0], src[ty.i1 * src_w_ + tx.i1], tx.t);
        out[y * dst_w_ + x] = mix(top, bot, ty.t);
      }
    }
    return out;
  }

  /// Adjoint: accumulates destination gradients back onto the source grid.
  std::vector<double> apply_transpose(std::span<const double> dst) const {
    if (dst.size() != dst_size()) throw InputError("BilinearResampler: destination size mismatch");
    std::vector<double> g(src_size(), 0.0);
    for (std::size_t y = 0; y < dst_h_; ++y) {
      const Tap& ty = rows_[y];
      for (std::size_t x = 0; x < dst_w_; ++x) {
        const Tap& tx = cols_[x];
        const double v = dst[y * dst_w_ + x];
        g[ty.i0 * src_w_ + tx.i0] += v * (1 - ty.t) * (1 - tx.t);
        g[ty.i0 * src_w_ + tx.i1] += v * (1 - ty.t) * tx.t;
        g[ty.i1 * src_w_ + tx.i0] += v * ty.t * (1 - tx.t);
        g[ty.i1 * src_w_ + tx.i1] += v * ty.t * tx.t;
      }
    }
    return g;
  }

 private:
  // a + t (b - a) returns a exactly when a == b, so constant maps stay exact.
  static double mix(double a, double b, double t) { return a + t * (b - a); }

  struct Tap {
    std::size_t i0, i1;
    double t;
  };

  static std::vector<Tap> axis(std::size_t src, std::size_t dst) {
    std::vector<Tap> taps(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t i = 0; i < dst; ++i) {
      double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, src - 1);
      taps[i] = {i0, i1, s - static_cast<double>(i0)};
    }
    return taps;
  }

  std::size_t src_h_, src_w_, dst_h_, dst_w_;
  std::vector<Tap> rows_, cols_;
};

using ScalarFn = std::function<double(std::span<const double>)>;
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|), with the
/// numeric derivative taken by central differences of step h.
inline double gradcheck(const ScalarFn& f, const GradientFn& grad_f, std::span<const double> x,
                        double h = 1e-5) {
  const std::vector<double> analytic = grad_f(x);
  if (analytic.size() != x.size()) throw InputError("gradcheck: gradient has wrong length");
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double xi = probe[i];
    probe[i] = xi + h;
    const double fp = f(probe);
    probe[i] = xi - h;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[i])) {
      throw NumericError("gradcheck: non-finite evaluation at coordinate " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace zs3d
