#pragma once

// Deterministic synthetic organized clouds with geometric or color anomalies,
// and the frozen feature map that turns them into embedding bundles.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/geometry.hpp"
#include "zs3d/rng.hpp"
#include "zs3d/tensor_io.hpp"

namespace zs3d {

enum class AnomalyKind { none, geometric, color };

inline std::string to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::geometric: return "geometric";
    case AnomalyKind::color: return "color";
    default: return "none";
  }
}

inline AnomalyKind parse_anomaly_kind(std::string_view s) {
  if (s == "geometric") return AnomalyKind::geometric;
  if (s == "color") return AnomalyKind::color;
  if (s == "none") return AnomalyKind::none;
  throw InputError("unknown anomaly kind '" + std::string(s) + "'");
}

struct SynthSpec {
  std::uint64_t seed = 42;
  std::size_t n_normal = 40;
  std::size_t n_anomalous = 40;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<AnomalyKind> kinds{AnomalyKind::geometric, AnomalyKind::color};
  double area_min = 0.005;  // fraction of valid cells
  double area_max = 0.05;

  std::size_t total() const { return n_normal + n_anomalous; }

  void validate() const {
    if (total() == 0) throw InputError("synthetic dataset needs at least one sample");
    if (height < 16 || width < 16) throw InputError("synthetic grid must be at least 16 x 16");
    if (!(area_min > 0.0 && area_min <= area_max && area_max < 1.0)) {
      throw InputError("anomaly area fractions must satisfy 0 < min <= max < 1");
    }
    if (n_anomalous > 0 && kinds.empty()) throw InputError("anomalous samples need at least one anomaly kind");
    for (auto k : kinds) {
      if (k == AnomalyKind::none) throw InputError("'none' is not an anomaly kind");
    }
  }
};

inline std::string sample_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%03zu", i);
  return buf;
}

/// Normal samples come first; anomalous sample j cycles through spec.kinds.
inline AnomalyKind sample_kind(const SynthSpec& spec, std::size_t i) {
  if (i < spec.n_normal) return AnomalyKind::none;
  return spec.kinds[(i - spec.n_normal) % spec.kinds.size()];
}

struct SynthSample {
  std::string id;
  AnomalyKind kind = AnomalyKind::none;
  OrganizedPointCloud cloud;
};

namespace detail {

inline double f32_round(double v) { return static_cast<double>(static_cast<float>(v)); }

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)); }

}  // namespace detail

/// Sample `index` of the dataset, with the given anomaly kind. The unperturbed
/// surface and texture depend only on (seed, index), so kind = none yields the
/// exact base that an anomalous variant perturbs.
inline SynthSample synth_sample(const SynthSpec& spec, std::size_t index, AnomalyKind kind) {
  const std::uint64_t s = derive_seed(spec.seed, index);
  Rng base(derive_seed(s, 1));
  const std::size_t H = spec.height, W = spec.width;
  const double rh = base.uniform(0.40, 0.47) * static_cast<double>(H);
  const double rw = base.uniform(0.40, 0.47) * static_cast<double>(W);
  const double ch = 0.5 * static_cast<double>(H - 1), cw = 0.5 * static_cast<double>(W - 1);

  struct Wave {
    double amp, fx, fy, phase;
  };
  std::array<Wave, 3> waves{};
  for (auto& w : waves) {
    w = {base.uniform(0.003, 0.008), base.uniform(0.25, 1.0), base.uniform(0.25, 1.0),
         base.uniform(0.0, 2.0 * std::numbers::pi)};
  }
  std::array<double, 3> color{};
  std::array<Wave, 3> tint{};
  for (std::size_t k = 0; k < 3; ++k) {
    color[k] = base.uniform(90.0, 160.0);
    tint[k] = {base.uniform(4.0, 8.0), base.uniform(0.5, 1.5), base.uniform(0.5, 1.5),
               base.uniform(0.0, 2.0 * std::numbers::pi)};
  }

  SynthSample out;
  out.id = sample_id(index);
  out.kind = kind;
  OrganizedPointCloud& c = out.cloud;
  c.height = H;
  c.width = W;
  c.points.assign(H * W, Eigen::Vector3d::Zero());
  c.valid.assign(H * W, 0);
  c.mask.assign(H * W, 0);
  c.rgb.assign(H * W, {0, 0, 0});
  std::vector<double> z(H * W, 0.0);
  std::vector<std::array<double, 3>> rgb(H * W, {0.0, 0.0, 0.0});
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t col = 0; col < W; ++col) {
      const double dr = (static_cast<double>(r) - ch) / rh, dc = (static_cast<double>(col) - cw) / rw;
      if (dr * dr + dc * dc > 1.0) continue;
      const std::size_t i = r * W + col;
      const double u = static_cast<double>(col) / static_cast<double>(W);
      const double v = static_cast<double>(r) / static_cast<double>(H);
      c.valid[i] = 1;
      z[i] = 0.5;
      for (const auto& w : waves) z[i] += w.amp * std::sin(two_pi * (w.fx * u + w.fy * v) + w.phase);
      for (std::size_t k = 0; k < 3; ++k) {
        const auto& t = tint[k];
        rgb[i][k] = color[k] + t.amp * std::sin(two_pi * t.fx * u + t.phase) * std::cos(two_pi * t.fy * v);
      }
    }
  }

  if (kind != AnomalyKind::none) {
    Rng an(derive_seed(s, 2));
    std::vector<std::size_t> valid_cells;
    for (std::size_t i = 0; i < H * W; ++i) {
      if (c.valid[i]) valid_cells.push_back(i);
    }
    const double n_valid = static_cast<double>(valid_cells.size());
    const auto k_min = static_cast<std::size_t>(std::ceil(spec.area_min * n_valid));
    const auto k_max = static_cast<std::size_t>(std::floor(spec.area_max * n_valid));
    if (k_min == 0 || k_min > k_max) throw InputError("anomaly area range admits no region on this grid");
    const double frac = an.uniform(spec.area_min, spec.area_max);
    const std::size_t k = std::clamp(static_cast<std::size_t>(std::llround(frac * n_valid)), k_min, k_max);
    // Centre inside the inner half of the footprint.
    const double rad = 0.5 * std::sqrt(an.uniform()), ang = an.uniform(0.0, two_pi);
    const double cr = ch + rad * rh * std::sin(ang), cc = cw + rad * rw * std::cos(ang);
    auto dist2 = [&](std::size_t i) {
      const double a = static_cast<double>(i / W) - cr, b = static_cast<double>(i % W) - cc;
      return a * a + b * b;
    };
    std::stable_sort(valid_cells.begin(), valid_cells.end(),
                     [&](std::size_t a, std::size_t b) { return dist2(a) < dist2(b); });
    const double radius = std::sqrt(std::max(dist2(valid_cells[k - 1]), 1.0));
    if (kind == AnomalyKind::geometric) {
      const double amp = an.uniform(0.12, 0.2) * (an.uniform() < 0.5 ? -1.0 : 1.0);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t i = valid_cells[j];
        z[i] += amp * std::exp(-dist2(i) / (2.0 * radius * radius));
        c.mask[i] = 1;
      }
    } else {
      // Per-channel shift away from the nearer bound so no clamping occurs.
      const double mag = an.uniform(70.0, 100.0);
      std::array<double, 3> dir{an.uniform(0.2, 1.0), an.uniform(0.2, 1.0), an.uniform(0.2, 1.0)};
      const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t i = valid_cells[j];
        for (std::size_t ch3 = 0; ch3 < 3; ++ch3) {
          const double sign = color[ch3] < 127.5 ? 1.0 : -1.0;
          rgb[i][ch3] += sign * mag * dir[ch3] / n;
        }
        c.mask[i] = 1;
      }
    }
  }

  for (std::size_t i = 0; i < H * W; ++i) {
    if (!c.valid[i]) continue;
    const double x = 2.0 * static_cast<double>(i % W) / static_cast<double>(W - 1) - 1.0;
    const double y = 1.0 - 2.0 * static_cast<double>(i / W) / static_cast<double>(H - 1);
    // Stored clouds are f32; rounding here keeps in-memory and on-disk clouds identical.
    c.points[i] = {detail::f32_round(x), detail::f32_round(y), detail::f32_round(z[i])};
    for (std::size_t k = 0; k < 3; ++k) c.rgb[i][k] = detail::to_u8(rgb[i][k]);
  }
  return out;
}

inline std::vector<SynthSample> generate_clouds(const SynthSpec& spec) {
  spec.validate();
  std::vector<SynthSample> out;
  out.reserve(spec.total());
  for (std::size_t i = 0; i < spec.total(); ++i) out.push_back(synth_sample(spec, i, sample_kind(spec, i)));
  return out;
}

// ---------------------------------------------------------------------------
// Frozen feature map

/// Settings of the synthetic embedding extractor.
struct FeatureSpec {
  std::uint64_t feature_seed = 1234;
  std::size_t dim = 64;
  std::size_t rgb_layers = 4;
  std::size_t rgb_patch_grid = 16;
  std::size_t view_patch_grid = 16;
  std::size_t geo_window = 25;
  double geo_scale = 0.05;
  double color_scale = 40.0;
  double evidence_cap = 4.0;
  double layer_jitter = 0.5;  // relative perturbation of each RGB layer projection
};

namespace detail {

inline double median_of(std::vector<double>& v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

}  // namespace detail

/// |z - local median z| / geo_scale per valid cell (0 for invalid cells).
inline std::vector<double> geometric_evidence(const OrganizedPointCloud& c, const FeatureSpec& f) {
  std::vector<double> out(c.size(), 0.0);
  const auto half = static_cast<std::ptrdiff_t>(f.geo_window / 2);
  std::vector<double> win;
  for (std::size_t r = 0; r < c.height; ++r) {
    for (std::size_t col = 0; col < c.width; ++col) {
      const std::size_t i = r * c.width + col;
      if (!c.valid[i]) continue;
      win.clear();
      for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
        for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
          const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(col) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(c.height) ||
              cc >= static_cast<std::ptrdiff_t>(c.width)) {
            continue;
          }
          const std::size_t j = static_cast<std::size_t>(rr) * c.width + static_cast<std::size_t>(cc);
          if (c.valid[j]) win.push_back(c.points[j].z());
        }
      }
      const double med = detail::median_of(win);
      out[i] = std::min(std::abs(c.points[i].z() - med) / f.geo_scale, f.evidence_cap);
    }
  }
  return out;
}

/// ||rgb - median rgb|| / color_scale per valid cell (0 for invalid cells).
inline std::vector<double> color_evidence(const OrganizedPointCloud& c, const FeatureSpec& f) {
  std::array<double, 3> med{};
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> ch;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (c.valid[i]) ch.push_back(c.rgb[i][k]);
    }
    if (ch.empty()) throw InputError("cloud has no valid cells");
    med[k] = detail::median_of(ch);
  }
  std::vector<double> out(c.size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!c.valid[i]) continue;
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += (c.rgb[i][k] - med[k]) * (c.rgb[i][k] - med[k]);
    out[i] = std::min(std::sqrt(s) / f.color_scale, f.evidence_cap);
  }
  return out;
}

/// Patch statistics are mapped to D-dimensional embeddings by frozen random
/// projections. Global and patch embeddings of a branch share one projection;
/// the RGB key layers are perturbed copies of it.
class FeatureMap {
 public:
  static constexpr Eigen::Index kStats = 5;

  explicit FeatureMap(FeatureSpec spec) : spec_(spec) {
    if (spec.dim == 0 || spec.rgb_layers == 0 || spec.rgb_patch_grid == 0 || spec.view_patch_grid == 0) {
      throw InputError("feature map dimensions must be positive");
    }
    rgb_global_ = projection(1);
    for (std::size_t m = 0; m < spec.rgb_layers; ++m) {
      rgb_local_.push_back((rgb_global_ + spec.layer_jitter * projection(10 + m)) /
                           std::sqrt(1.0 + spec.layer_jitter * spec.layer_jitter));
    }
    view_local_ = projection(2);
    view_global_ = view_local_;
  }

  const FeatureSpec& spec() const { return spec_; }

  EmbeddingBundle rgb_bundle(const OrganizedPointCloud& c, const std::string& source) const {
    const auto col = color_evidence(c, spec_);
    const std::size_t g = spec_.rgb_patch_grid;
    if (c.height % g != 0 || c.width % g != 0) throw InputError("grid is not divisible by the RGB patch grid");
    const std::size_t ph = c.height / g, pw = c.width / g;
    Eigen::MatrixXd stats(static_cast<Eigen::Index>(g * g), kStats);
    for (std::size_t pr = 0; pr < g; ++pr) {
      for (std::size_t pc = 0; pc < g; ++pc) {
        Acc a;
        for (std::size_t r = pr * ph; r < (pr + 1) * ph; ++r) {
          for (std::size_t cc = pc * pw; cc < (pc + 1) * pw; ++cc) {
            const std::size_t i = r * c.width + cc;
            a.add(c.valid[i] != 0, col[i], luminance(c.rgb[i]));
          }
        }
        stats.row(static_cast<Eigen::Index>(pr * g + pc)) = a.stats(ph * pw);
      }
    }
    Acc all;
    for (std::size_t i = 0; i < c.size(); ++i) all.add(c.valid[i] != 0, col[i], luminance(c.rgb[i]));
    EmbeddingBundle b{vec_tensor(rgb_global_ * all.stats(c.size()).transpose()), {}, source};
    for (const auto& w : rgb_local_) b.locals.push_back(mat_tensor(stats * w.transpose()));
    return b;
  }

  /// `geo` is geometric_evidence() of the rendered cloud.
  EmbeddingBundle view_bundle(const ViewRender& v, std::span<const double> geo, const std::string& source) const {
    const std::size_t g = spec_.view_patch_grid, res = v.resolution;
    if (res % g != 0) throw InputError("render resolution is not divisible by the view patch grid");
    const std::size_t p = res / g;
    Eigen::MatrixXd stats(static_cast<Eigen::Index>(g * g), kStats);
    Acc all;
    for (std::size_t pr = 0; pr < g; ++pr) {
      for (std::size_t pc = 0; pc < g; ++pc) {
        Acc a;
        for (std::size_t r = pr * p; r < (pr + 1) * p; ++r) {
          for (std::size_t cc = pc * p; cc < (pc + 1) * p; ++cc) {
            const std::size_t px = r * res + cc;
            const auto idx = v.pix2point[px];
            const double e = idx >= 0 ? geo[static_cast<std::size_t>(idx)] : 0.0;
            a.add(idx >= 0, e, v.depth[px]);
            all.add(idx >= 0, e, v.depth[px]);
          }
        }
        stats.row(static_cast<Eigen::Index>(pr * g + pc)) = a.stats(p * p);
      }
    }
    EmbeddingBundle b{vec_tensor(view_global_ * all.stats(res * res).transpose()), {}, source};
    b.locals.push_back(mat_tensor(stats * view_local_.transpose()));
    return b;
  }

 private:
  // Running [mean evidence, max evidence, mean secondary, foreground fraction, 1].
  struct Acc {
    double n = 0, sum = 0, max = 0, sec = 0;
    void add(bool fg, double evidence, double secondary) {
      if (!fg) return;
      n += 1;
      sum += evidence;
      max = std::max(max, evidence);
      sec += secondary;
    }
    Eigen::RowVectorXd stats(std::size_t cells) const {
      Eigen::RowVectorXd s(kStats);
      s << (n > 0 ? sum / n : 0.0), max, (n > 0 ? sec / n : 0.0), n / static_cast<double>(cells), 1.0;
      return s;
    }
  };

  static double luminance(const std::array<std::uint8_t, 3>& c) {
    return (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]) / 255.0;
  }

  Eigen::MatrixXd projection(std::uint64_t stream) const {
    Rng rng(derive_seed(spec_.feature_seed, stream));
    const auto d = static_cast<Eigen::Index>(spec_.dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec_.dim));
    Eigen::MatrixXd w(d, kStats);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < kStats; ++j) w(i, j) = scale * rng.normal();
    return w;
  }

  static EmbeddingTensor vec_tensor(const Eigen::VectorXd& v) {
    return EmbeddingTensor::f32({static_cast<std::uint64_t>(v.size())}, std::span<const double>(v.data(), v.size()));
  }

  static EmbeddingTensor mat_tensor(const Eigen::MatrixXd& m) {
    std::vector<double> row_major;
    row_major.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) row_major.push_back(m(r, c));
    return EmbeddingTensor::f32({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                                row_major);
  }

  FeatureSpec spec_;
  std::vector<Eigen::MatrixXd> rgb_local_;
  Eigen::MatrixXd rgb_global_, view_local_, view_global_;
};

/// A generated sample with its renders and embedding bundles.
struct GeneratedSample {
  SynthSample sample;
  std::vector<ViewRender> renders;
  EmbeddingBundle rgb;
  std::vector<EmbeddingBundle> views;
};

inline GeneratedSample featurize(SynthSample s, const FeatureMap& fm, std::span<const ViewTransform> views,
                                 std::size_t resolution) {
  auto renders = render_views(s.cloud, views, resolution);
  const auto geo = geometric_evidence(s.cloud, fm.spec());
  auto rgb = fm.rgb_bundle(s.cloud, s.id + "/rgb");
  std::vector<EmbeddingBundle> bundles;
  for (std::size_t k = 0; k < renders.size(); ++k) {
    bundles.push_back(fm.view_bundle(renders[k], geo, s.id + "/" + view_branch(k)));
  }
  return {std::move(s), std::move(renders), std::move(rgb), std::move(bundles)};
}

/// Full dataset: clouds, renders and bundles.
inline std::vector<GeneratedSample> generate(const SynthSpec& spec, const FeatureSpec& features,
                                             std::span<const ViewTransform> views, std::size_t resolution) {
  const FeatureMap fm(features);
  std::vector<GeneratedSample> out;
  for (auto& s : generate_clouds(spec)) out.push_back(featurize(std::move(s), fm, views, resolution));
  return out;
}

}  // namespace zs3d
