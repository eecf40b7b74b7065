#pragma once

// Inference-time similarity maps, global scores and the collaborative
// modulation fusion of the RGB and point branches.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/geometry.hpp"
#include "zs3d/numerics.hpp"
#include "zs3d/tensor_io.hpp"

namespace zs3d {

/// Embedding bundle converted to dense f64 matrices (locals are n_patches x D).
struct DenseBundle {
  Eigen::VectorXd global;
  std::vector<Eigen::MatrixXd> locals;

  Eigen::Index dim() const { return global.size(); }
};

inline DenseBundle to_dense(const EmbeddingBundle& b) {
  DenseBundle d;
  const auto g = b.global.to_f64();
  d.global = Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
  for (const auto& l : b.locals) {
    if (l.ndim() != 2) throw InputError(b.source_id + ": local embedding must be 2-D");
    const auto v = l.to_f64();
    d.locals.emplace_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        v.data(), static_cast<Eigen::Index>(l.dim(0)), static_cast<Eigen::Index>(l.dim(1))));
  }
  return d;
}

/// Side length of a square patch grid holding `n` patches.
inline std::size_t patch_side(std::size_t n) {
  auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (s * s != n) throw InputError("patch count " + std::to_string(n) + " is not a square grid");
  return s;
}

/// Optional per-stage D x D weighting matrices; empty means identity.
struct StageWeights {
  std::vector<Eigen::MatrixXd> stages;

  const Eigen::MatrixXd* at(std::size_t i) const {
    if (stages.empty()) return nullptr;
    return &stages.at(i);
  }
  static StageWeights identity(std::size_t n, Eigen::Index dim) {
    return {std::vector<Eigen::MatrixXd>(n, Eigen::MatrixXd::Identity(dim, dim))};
  }
};

/// Per-patch (normal, anomaly) logits <B f, e>.
inline Eigen::MatrixXd patch_logits(const Eigen::MatrixXd& feats, const Eigen::VectorXd& e_normal,
                                    const Eigen::VectorXd& e_anomaly, const Eigen::MatrixXd* stage) {
  if (feats.cols() != e_normal.size() || e_normal.size() != e_anomaly.size()) {
    throw InputError("patch features and prompt embeddings have different widths");
  }
  Eigen::MatrixXd e(e_normal.size(), 2);
  e.col(0) = e_normal;
  e.col(1) = e_anomaly;
  if (stage) {
    if (stage->rows() != feats.cols() || stage->cols() != feats.cols()) throw InputError("stage weight shape mismatch");
    return feats * stage->transpose() * e;
  }
  return feats * e;
}

/// Row-wise temperature softmax of the patch logits; column 0 normal, 1 anomaly.
inline Eigen::MatrixXd patch_probs(const Eigen::MatrixXd& feats, const Eigen::VectorXd& e_normal,
                                   const Eigen::VectorXd& e_anomaly, const Eigen::MatrixXd* stage, double tau) {
  const Eigen::MatrixXd logits = patch_logits(feats, e_normal, e_anomaly, stage);
  Eigen::MatrixXd probs(logits.rows(), 2);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double l[2] = {logits(i, 0), logits(i, 1)};
    const auto p = softmax_temp(l, tau);
    probs(i, 0) = p[0];
    probs(i, 1) = p[1];
  }
  return probs;
}

inline std::vector<double> column(const Eigen::MatrixXd& m, Eigen::Index c) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = m(i, c);
  return out;
}

/// Mean over key layers of the upsampled anomaly-channel probabilities.
inline ScoreMap rgb_anomaly_map(const DenseBundle& rgb, const Eigen::VectorXd& e_normal,
                                const Eigen::VectorXd& e_anomaly, const StageWeights& stages, double tau,
                                std::size_t out_h, std::size_t out_w, std::size_t expected_layers = 4) {
  if (rgb.locals.size() != expected_layers) {
    throw InputError("RGB bundle has " + std::to_string(rgb.locals.size()) + " local layers, expected " +
                     std::to_string(expected_layers));
  }
  ScoreMap out(out_h, out_w, 0.0);
  for (std::size_t m = 0; m < rgb.locals.size(); ++m) {
    const auto& f = rgb.locals[m];
    const std::size_t side = patch_side(static_cast<std::size_t>(f.rows()));
    const auto a = column(patch_probs(f, e_normal, e_anomaly, stages.at(m), tau), 1);
    const auto up = BilinearResampler(side, side, out_h, out_w).apply(a);
    for (std::size_t i = 0; i < up.size(); ++i) out.values[i] += up[i];
  }
  for (auto& v : out.values) v /= static_cast<double>(rgb.locals.size());
  return out;
}

/// Anomaly-channel probability of softmax((<f, e_n>, <f, e_a>) / tau).
inline double rgb_score(const Eigen::VectorXd& global, const Eigen::VectorXd& e_normal,
                        const Eigen::VectorXd& e_anomaly, double tau = 0.07) {
  if (global.size() != e_normal.size() || e_normal.size() != e_anomaly.size()) {
    throw InputError("global feature and prompt embeddings have different widths");
  }
  const double l[2] = {global.dot(e_normal), global.dot(e_anomaly)};
  return softmax_temp(l, tau)[1];
}

/// Per-view layer-0 anomaly maps, inverse-rendered onto the cloud grid.
inline ScoreMap point_anomaly_map(std::span<const DenseBundle> view_feats, std::span<const ViewRender> views,
                                  const Eigen::VectorXd& e_normal, const Eigen::VectorXd& e_anomaly,
                                  const Eigen::MatrixXd* stage, double tau, const OrganizedPointCloud& cloud) {
  if (view_feats.size() != views.size()) {
    throw InputError("point branch: " + std::to_string(view_feats.size()) + " view bundles for " +
                     std::to_string(views.size()) + " renders");
  }
  std::vector<std::vector<double>> maps;
  maps.reserve(views.size());
  for (std::size_t k = 0; k < views.size(); ++k) {
    if (view_feats[k].locals.empty()) throw InputError("view bundle has no local layers");
    const auto& f = view_feats[k].locals.front();
    const std::size_t side = patch_side(static_cast<std::size_t>(f.rows()));
    const auto a = column(patch_probs(f, e_normal, e_anomaly, stage, tau), 1);
    maps.push_back(BilinearResampler(side, side, views[k].resolution, views[k].resolution).apply(a));
  }
  return {cloud.height, cloud.width, inverse_render(maps, views, cloud.size())};
}

/// Mean over views of the per-view anomaly probability.
inline double point_score(std::span<const Eigen::VectorXd> view_globals, const Eigen::VectorXd& e_normal,
                          const Eigen::VectorXd& e_anomaly, double tau = 0.07) {
  if (view_globals.empty()) throw InputError("point_score: no views");
  double sum = 0.0;
  for (const auto& g : view_globals) sum += rgb_score(g, e_normal, e_anomaly, tau);
  return sum / static_cast<double>(view_globals.size());
}

struct BranchOutput {
  ScoreMap map;
  double score = 0.0;
};

struct ScoreReport {
  ScoreMap fused_map;
  double fused_score = 0.0;
  BranchOutput rgb;
  BranchOutput point;
  double eta = 1.0;
};

/// M_final = (eta G(M_rgb) + (2 - eta) G(M_point)) / 2;
/// Score_final = (eta S_rgb + (2 - eta) S_point) / 2 + (max M_rgb + max M_point) / 2.
inline ScoreReport cmm_fuse(const BranchOutput& rgb, const BranchOutput& point, double eta, double sigma) {
  if (!rgb.map.same_shape(point.map)) throw InputError("cmm_fuse: branch maps have different shapes");
  if (!(eta >= 0.0 && eta <= 2.0)) throw InputError("cmm_fuse: eta must lie in [0, 2]");
  const ScoreMap g_rgb = gaussian_filter(rgb.map, sigma);
  const ScoreMap g_point = gaussian_filter(point.map, sigma);
  ScoreReport r;
  r.rgb = rgb;
  r.point = point;
  r.eta = eta;
  r.fused_map = ScoreMap(rgb.map.height, rgb.map.width);
  for (std::size_t i = 0; i < r.fused_map.values.size(); ++i) {
    r.fused_map.values[i] = (eta * g_rgb.values[i] + (2.0 - eta) * g_point.values[i]) / 2.0;
  }
  r.fused_score = (eta * rgb.score + (2.0 - eta) * point.score) / 2.0 + (rgb.map.max() + point.map.max()) / 2.0;
  return r;
}

}  // namespace zs3d
