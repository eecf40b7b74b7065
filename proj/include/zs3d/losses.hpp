#pragma once

// Training objectives with analytic gradients. Every function returns the loss
// value together with gradients keyed by input block name.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "zs3d/error.hpp"

namespace zs3d {

struct LossValue {
  double value = 0.0;
  std::map<std::string, std::vector<double>> gradients;

  const std::vector<double>& grad(const std::string& block) const {
    auto it = gradients.find(block);
    if (it == gradients.end()) throw InputError("loss has no gradient block '" + block + "'");
    return it->second;
  }
  bool has(const std::string& block) const { return gradients.contains(block); }
};

struct LossParams {
  double gamma = 2.0;    // focal focusing
  double alpha = 0.25;   // focal positive-class weight
  double dice_eps = 1.0;
  double clamp = 1e-7;   // probabilities are clamped to [clamp, 1 - clamp]
};

namespace detail {

inline void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw InputError(std::string(what) + ": input sizes differ");
}

inline void add_scaled(std::vector<double>& dst, std::span<const double> src, double scale = 1.0) {
  if (dst.empty()) dst.assign(src.size(), 0.0);
  require_same(dst.size(), src.size(), "gradient merge");
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += scale * src[i];
}

/// Adds `scale * term` into `total`, renaming blocks through `prefix`.
inline void merge_into(LossValue& total, const LossValue& term, double scale, const std::string& prefix = "") {
  total.value += scale * term.value;
  for (const auto& [name, g] : term.gradients) add_scaled(total.gradients[prefix + name], g, scale);
}

}  // namespace detail

/// max(0, margin - |a - n|)^2 + |a - p|^2 for one triplet. The derivative of
/// the Euclidean norm at zero is taken as zero.
inline LossValue mcl_loss(std::span<const double> anchor, std::span<const double> positive,
                          std::span<const double> negative, double margin) {
  detail::require_same(anchor.size(), positive.size(), "mcl_loss");
  detail::require_same(anchor.size(), negative.size(), "mcl_loss");
  if (!(margin > 0.0)) throw InputError("mcl_loss: margin must be positive");
  const std::size_t d = anchor.size();
  double dist_n2 = 0.0, dist_p2 = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dist_n2 += (anchor[i] - negative[i]) * (anchor[i] - negative[i]);
    dist_p2 += (anchor[i] - positive[i]) * (anchor[i] - positive[i]);
  }
  const double dist_n = std::sqrt(dist_n2);
  const double hinge = std::max(0.0, margin - dist_n);

  LossValue out;
  out.value = hinge * hinge + dist_p2;
  auto& ga = out.gradients["anchor"];
  auto& gp = out.gradients["positive"];
  auto& gn = out.gradients["negative"];
  ga.assign(d, 0.0);
  gp.assign(d, 0.0);
  gn.assign(d, 0.0);
  const double push = (hinge > 0.0 && dist_n > 0.0) ? -2.0 * hinge / dist_n : 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double pull = 2.0 * (anchor[i] - positive[i]);
    const double diff_n = anchor[i] - negative[i];
    ga[i] = pull + push * diff_n;
    gp[i] = -pull;
    gn[i] = -push * diff_n;
  }
  return out;
}

enum class MclAnchor { point, rgb };

/// Bidirectional contrastive term over the four prompt embeddings. With the
/// point anchor: (e_point_n; e_rgb_n, e_rgb_a) + (e_point_a; e_rgb_a, e_rgb_n).
inline LossValue mcl_total(std::span<const double> e_point_normal, std::span<const double> e_point_anomaly,
                           std::span<const double> e_rgb_normal, std::span<const double> e_rgb_anomaly,
                           double margin, MclAnchor anchor = MclAnchor::point) {
  struct Named {
    std::span<const double> v;
    const char* name;
  };
  Named pn{e_point_normal, "e_point_normal"}, pa{e_point_anomaly, "e_point_anomaly"};
  Named rn{e_rgb_normal, "e_rgb_normal"}, ra{e_rgb_anomaly, "e_rgb_anomaly"};
  if (anchor == MclAnchor::rgb) {
    std::swap(pn, rn);
    std::swap(pa, ra);
  }
  LossValue total;
  for (const auto& [a, p, n] : {std::array<Named, 3>{pn, rn, ra}, std::array<Named, 3>{pa, ra, rn}}) {
    const LossValue term = mcl_loss(a.v, p.v, n.v, margin);
    total.value += term.value;
    detail::add_scaled(total.gradients[a.name], term.grad("anchor"));
    detail::add_scaled(total.gradients[p.name], term.grad("positive"));
    detail::add_scaled(total.gradients[n.name], term.grad("negative"));
  }
  return total;
}

/// Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t. Gradient block "prob".
inline LossValue focal_loss(std::span<const double> anomaly_prob, std::span<const double> target,
                            const LossParams& params = {}) {
  detail::require_same(anomaly_prob.size(), target.size(), "focal_loss");
  if (anomaly_prob.empty()) throw InputError("focal_loss: empty input");
  const double n = static_cast<double>(anomaly_prob.size());
  LossValue out;
  auto& g = out.gradients["prob"];
  g.assign(anomaly_prob.size(), 0.0);
  const double lo = params.clamp, hi = 1.0 - params.clamp;
  for (std::size_t i = 0; i < anomaly_prob.size(); ++i) {
    const double raw = anomaly_prob[i];
    const double p = std::clamp(raw, lo, hi);
    const bool positive = target[i] > 0.5;
    const double pt = positive ? p : 1.0 - p;
    const double at = positive ? params.alpha : 1.0 - params.alpha;
    const double one_minus = 1.0 - pt;
    const double log_pt = std::log(pt);
    const double w1 = params.gamma == 2.0 ? one_minus : std::pow(one_minus, params.gamma - 1.0);
    const double w = w1 * one_minus;  // (1 - p_t)^gamma
    out.value += -at * w * log_pt;
    if (raw > lo && raw < hi) {
      // d/dp_t of -a (1-p_t)^g log p_t
      const double d_pt = at * (params.gamma * w1 * log_pt - w / pt);
      g[i] = (positive ? d_pt : -d_pt) / n;
    }
  }
  out.value /= n;
  return out;
}

/// 1 - (2 sum(pred * target) + eps) / (sum(pred) + sum(target) + eps). Gradient block "pred".
inline LossValue dice_loss(std::span<const double> pred, std::span<const double> target, double eps = 1.0) {
  detail::require_same(pred.size(), target.size(), "dice_loss");
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    sp += pred[i];
    st += target[i];
  }
  const double num = 2.0 * inter + eps;
  const double den = sp + st + eps;
  LossValue out;
  out.value = 1.0 - num / den;
  auto& g = out.gradients["pred"];
  g.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = -(2.0 * target[i] * den - num) / (den * den);
  return out;
}

/// Binary cross-entropy on a clamped probability. Gradient block "score".
inline LossValue bce_global(double score, double label, const LossParams& params = {}) {
  const double lo = params.clamp, hi = 1.0 - params.clamp;
  const double s = std::clamp(score, lo, hi);
  LossValue out;
  out.value = -(label * std::log(s) + (1.0 - label) * std::log(1.0 - s));
  const bool inside = score > lo && score < hi;
  out.gradients["score"] = {inside ? -label / s + (1.0 - label) / (1.0 - s) : 0.0};
  return out;
}

/// Normal / anomaly probability channels of one map.
struct ChannelMaps {
  std::vector<double> normal;
  std::vector<double> anomaly;
};

namespace detail {

inline std::vector<double> complement(std::span<const double> mask) {
  std::vector<double> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = 1.0 - mask[i];
  return out;
}

/// focal(anomaly, mask) + dice(normal, 1 - mask) + dice(anomaly, mask), with
/// gradients under "<prefix>normal" and "<prefix>anomaly".
inline LossValue segmentation_term(const ChannelMaps& maps, std::span<const double> mask, const LossParams& p,
                                   const std::string& prefix, bool with_focal) {
  require_same(maps.normal.size(), mask.size(), "segmentation loss");
  require_same(maps.anomaly.size(), mask.size(), "segmentation loss");
  LossValue out;
  const auto inv = complement(mask);
  const LossValue dn = dice_loss(maps.normal, inv, p.dice_eps);
  const LossValue da = dice_loss(maps.anomaly, mask, p.dice_eps);
  out.value = dn.value + da.value;
  add_scaled(out.gradients[prefix + "normal"], dn.grad("pred"));
  add_scaled(out.gradients[prefix + "anomaly"], da.grad("pred"));
  if (with_focal) {
    const LossValue f = focal_loss(maps.anomaly, mask, p);
    out.value += f.value;
    add_scaled(out.gradients[prefix + "anomaly"], f.grad("prob"));
  }
  return out;
}

}  // namespace detail

/// Mean over views of [focal + dice(normal, 1-M) + dice(anomaly, M)] plus the
/// point-level dice pair. Gradient blocks "view<k>.normal", "view<k>.anomaly",
/// "point.normal", "point.anomaly".
inline LossValue point_local_loss(std::span<const ChannelMaps> views, std::span<const std::vector<double>> view_masks,
                                  const ChannelMaps& points, std::span<const double> point_mask,
                                  const LossParams& params = {}) {
  if (views.empty()) throw InputError("point_local_loss: no views");
  detail::require_same(views.size(), view_masks.size(), "point_local_loss");
  LossValue total;
  const double inv_k = 1.0 / static_cast<double>(views.size());
  for (std::size_t k = 0; k < views.size(); ++k) {
    const auto term = detail::segmentation_term(views[k], view_masks[k], params, "view" + std::to_string(k) + ".", true);
    detail::merge_into(total, term, inv_k);
  }
  detail::merge_into(total, detail::segmentation_term(points, point_mask, params, "point.", false), 1.0);
  return total;
}

/// Mean over the key layers of [focal + dice(normal, 1-M) + dice(anomaly, M)].
/// Gradient blocks "layer<i>.normal", "layer<i>.anomaly".
inline LossValue rgb_local_loss(std::span<const ChannelMaps> layers, std::span<const double> mask,
                                const LossParams& params = {}, std::size_t expected_layers = 4) {
  if (layers.size() != expected_layers) {
    throw InputError("rgb_local_loss: expected " + std::to_string(expected_layers) + " layers, got " +
                     std::to_string(layers.size()));
  }
  LossValue total;
  const double inv = 1.0 / static_cast<double>(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    detail::merge_into(total, detail::segmentation_term(layers[i], mask, params, "layer" + std::to_string(i) + ".", true),
                       inv);
  }
  return total;
}

/// Mean over views of BCE(view score, view label) + BCE(pooled, label).
/// Gradient blocks "view_scores" and "pooled".
inline LossValue point_global_loss(std::span<const double> view_scores, std::span<const double> view_labels,
                                   double pooled, double label, const LossParams& params = {}) {
  if (view_scores.empty()) throw InputError("point_global_loss: no views");
  detail::require_same(view_scores.size(), view_labels.size(), "point_global_loss");
  LossValue out;
  const double inv_k = 1.0 / static_cast<double>(view_scores.size());
  auto& gv = out.gradients["view_scores"];
  gv.resize(view_scores.size());
  for (std::size_t k = 0; k < view_scores.size(); ++k) {
    const auto term = bce_global(view_scores[k], view_labels[k], params);
    out.value += inv_k * term.value;
    gv[k] = inv_k * term.grad("score")[0];
  }
  const auto pooled_term = bce_global(pooled, label, params);
  out.value += pooled_term.value;
  out.gradients["pooled"] = pooled_term.grad("score");
  return out;
}

/// Gradient block "score".
inline LossValue rgb_global_loss(double score, double label, const LossParams& params = {}) {
  return bce_global(score, label, params);
}

struct LossWeights {
  double point = 1.0;
  double rgb = 1.0;
  double mcl = 0.8;
};

/// lambda_1 L_point + lambda_2 L_rgb + lambda_3 L_mcl, gradients merged by
/// block name. A component with zero weight contributes no gradient blocks.
inline LossValue total_loss(const LossValue& point, const LossValue& rgb, const LossValue& mcl,
                            const LossWeights& w = {}) {
  if (w.point < 0.0 || w.rgb < 0.0 || w.mcl < 0.0) throw InputError("total_loss: weights must be non-negative");
  LossValue out;
  if (w.point > 0.0) detail::merge_into(out, point, w.point);
  if (w.rgb > 0.0) detail::merge_into(out, rgb, w.rgb);
  if (w.mcl > 0.0) detail::merge_into(out, mcl, w.mcl);
  return out;
}

}  // namespace zs3d
