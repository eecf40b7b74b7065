#pragma once

// Desk-scale optimization of the learnable prompt tokens (and optionally the
// RGB stage weights) under the combined point / RGB / contrastive objective.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/geometry.hpp"
#include "zs3d/losses.hpp"
#include "zs3d/numerics.hpp"
#include "zs3d/prompts.hpp"
#include "zs3d/rng.hpp"
#include "zs3d/scoring.hpp"

namespace zs3d {

enum class Optimizer { adam, sgd };

struct TrainConfig {
  std::size_t epochs = 15;
  double lr = 0.001;
  LossWeights weights{};  // lambda_1, lambda_2, lambda_3
  double margin = 1.0;
  MclAnchor anchor = MclAnchor::point;
  LossParams loss{};
  double tau = 0.07;
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool train_stage_weights = false;

  void validate() const {
    if (!(lr > 0.0)) throw InputError("learning rate must be positive");
    if (weights.point < 0 || weights.rgb < 0 || weights.mcl < 0) throw InputError("loss weights must be non-negative");
    if (!(tau > 0.0)) throw InputError("tau must be positive");
    if (!(margin >= 0.0)) throw InputError("margin must be non-negative");
  }
};

/// Everything the objective needs about one sample.
struct TrainingSample {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  DenseBundle rgb;
  std::vector<DenseBundle> views;
  std::vector<ViewRender> renders;
  std::vector<double> mask;  // H x W, 0/1
  std::vector<std::uint8_t> valid;
  double label = 0.0;
};

/// Objective value, its decomposition, and gradients w.r.t. the four prompt
/// embeddings (indexed by PromptId) and the RGB stage weights.
struct SampleObjective {
  LossValue total;
  double point = 0.0, rgb = 0.0, mcl = 0.0;
  std::array<Eigen::VectorXd, 4> grad_embeddings;
  std::vector<Eigen::MatrixXd> grad_stages;
};

namespace detail {

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

// Forward state of one patch grid: anomaly probabilities and upsampled channels
// (callers may move the channels out; the backward pass only needs p_anomaly).
struct PatchForward {
  std::vector<double> p_anomaly;  // per patch
  ChannelMaps up;
};

inline PatchForward patch_forward(const Eigen::MatrixXd& feats, const Eigen::VectorXd& e_n, const Eigen::VectorXd& e_a,
                                  const Eigen::MatrixXd* stage, double tau, const BilinearResampler& up) {
  const Eigen::MatrixXd p = patch_probs(feats, e_n, e_a, stage, tau);
  PatchForward f;
  f.p_anomaly = column(p, 1);
  f.up.anomaly = up.apply(f.p_anomaly);
  f.up.normal = up.apply(column(p, 0));
  return f;
}

// Back through upsampling and the two-way softmax into the prompt embeddings
// (and the stage matrix when given).
inline void patch_backward(const Eigen::MatrixXd& feats, const Eigen::VectorXd& e_n, const Eigen::VectorXd& e_a,
                           const Eigen::MatrixXd* stage, double tau, const BilinearResampler& up,
                           const PatchForward& f, std::span<const double> g_normal, std::span<const double> g_anomaly,
                           Eigen::VectorXd& grad_n, Eigen::VectorXd& grad_a, Eigen::MatrixXd* grad_stage) {
  // Both channels go through the same linear resampler, so back-project their difference once.
  std::vector<double> diff(g_anomaly.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = g_anomaly[i] - g_normal[i];
  const auto gp = up.apply_transpose(diff);
  Eigen::VectorXd g_la(feats.rows());
  for (Eigen::Index i = 0; i < feats.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double pa = f.p_anomaly[k];
    g_la[i] = gp[k] * pa * (1.0 - pa) / tau;
  }
  // l_a = <B f, e_a>, l_n = <B f, e_n>, and dL/dl_n = -dL/dl_a.
  const Eigen::VectorXd fg = feats.transpose() * g_la;  // sum_i g_i f_i
  if (stage) {
    const Eigen::VectorXd bfg = *stage * fg;
    grad_a += bfg;
    grad_n -= bfg;
    if (grad_stage) *grad_stage += (e_a - e_n) * fg.transpose();
  } else {
    grad_a += fg;
    grad_n -= fg;
  }
}

// Score s = softmax anomaly probability of (<g, e_n>, <g, e_a>) / tau; adds ds-weighted gradients.
inline double global_forward(const Eigen::VectorXd& g, const Eigen::VectorXd& e_n, const Eigen::VectorXd& e_a,
                             double tau) {
  return rgb_score(g, e_n, e_a, tau);
}

inline void global_backward(const Eigen::VectorXd& g, double score, double g_score, double tau, Eigen::VectorXd& grad_n,
                            Eigen::VectorXd& grad_a) {
  const double g_l = g_score * score * (1.0 - score) / tau;
  grad_a += g_l * g;
  grad_n -= g_l * g;
}

}  // namespace detail

/// Loss and gradients of one sample given the current prompt embeddings.
inline SampleObjective sample_objective(const TrainingSample& s, const PromptEmbeddings& e, const StageWeights& stages,
                                        const TrainConfig& cfg) {
  const auto& e_rn = e[index_of(PromptId::rgb_normal)];
  const auto& e_ra = e[index_of(PromptId::rgb_anomaly)];
  const auto& e_pn = e[index_of(PromptId::point_normal)];
  const auto& e_pa = e[index_of(PromptId::point_anomaly)];
  const std::size_t n_cells = s.height * s.width;
  if (s.mask.size() != n_cells || s.valid.size() != n_cells) throw InputError(s.id + ": mask does not match grid");
  if (s.views.size() != s.renders.size() || s.views.empty()) throw InputError(s.id + ": view bundles do not match renders");

  // RGB branch.
  std::vector<detail::PatchForward> rgb_fw;
  std::vector<BilinearResampler> rgb_up;
  std::vector<ChannelMaps> rgb_maps;
  for (std::size_t m = 0; m < s.rgb.locals.size(); ++m) {
    const std::size_t side = patch_side(static_cast<std::size_t>(s.rgb.locals[m].rows()));
    rgb_up.emplace_back(side, side, s.height, s.width);
    rgb_fw.push_back(detail::patch_forward(s.rgb.locals[m], e_rn, e_ra, stages.at(m), cfg.tau, rgb_up.back()));
    rgb_maps.push_back(std::move(rgb_fw.back().up));
  }
  LossValue rgb_loss = rgb_local_loss(rgb_maps, s.mask, cfg.loss, s.rgb.locals.size());
  const double rgb_s = detail::global_forward(s.rgb.global, e_rn, e_ra, cfg.tau);
  detail::merge_into(rgb_loss, rgb_global_loss(rgb_s, s.label, cfg.loss), 1.0);

  // Point branch.
  const std::size_t K = s.views.size();
  std::vector<detail::PatchForward> view_fw;
  std::vector<BilinearResampler> view_up;
  std::vector<ChannelMaps> view_maps;
  std::vector<std::vector<double>> view_masks, normal_px, anomaly_px;
  std::vector<double> view_scores, view_labels;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& f = s.views[k].locals.at(0);
    const std::size_t side = patch_side(static_cast<std::size_t>(f.rows()));
    const std::size_t res = s.renders[k].resolution;
    view_up.emplace_back(side, side, res, res);
    view_fw.push_back(detail::patch_forward(f, e_pn, e_pa, nullptr, cfg.tau, view_up.back()));
    view_maps.push_back(std::move(view_fw.back().up));
    normal_px.push_back(view_maps.back().normal);
    anomaly_px.push_back(view_maps.back().anomaly);
    view_masks.emplace_back(s.renders[k].mask2d.begin(), s.renders[k].mask2d.end());
    view_scores.push_back(detail::global_forward(s.views[k].global, e_pn, e_pa, cfg.tau));
    view_labels.push_back(s.renders[k].view_label ? 1.0 : 0.0);
  }
  const InverseRenderer inv(s.renders, n_cells);
  const auto pt_normal_all = inv.apply(normal_px);
  const auto pt_anomaly_all = inv.apply(anomaly_px);
  std::vector<std::size_t> valid_idx;
  for (std::size_t i = 0; i < n_cells; ++i) {
    if (s.valid[i]) valid_idx.push_back(i);
  }
  ChannelMaps pts;
  std::vector<double> pt_mask;
  for (auto i : valid_idx) {
    pts.normal.push_back(pt_normal_all[i]);
    pts.anomaly.push_back(pt_anomaly_all[i]);
    pt_mask.push_back(s.mask[i]);
  }
  LossValue point_loss = point_local_loss(view_maps, view_masks, pts, pt_mask, cfg.loss);
  double pooled = 0.0;
  for (double v : view_scores) pooled += v;
  pooled /= static_cast<double>(K);
  detail::merge_into(point_loss, point_global_loss(view_scores, view_labels, pooled, s.label, cfg.loss), 1.0);

  const LossValue mcl = mcl_total(detail::as_span(e_pn), detail::as_span(e_pa), detail::as_span(e_rn),
                                  detail::as_span(e_ra), cfg.margin, cfg.anchor);

  SampleObjective out;
  out.point = point_loss.value;
  out.rgb = rgb_loss.value;
  out.mcl = mcl.value;
  out.total = total_loss(point_loss, rgb_loss, mcl, cfg.weights);
  const auto& G = out.total;

  const auto D = e_rn.size();
  for (auto& g : out.grad_embeddings) g = Eigen::VectorXd::Zero(D);
  auto& g_rn = out.grad_embeddings[index_of(PromptId::rgb_normal)];
  auto& g_ra = out.grad_embeddings[index_of(PromptId::rgb_anomaly)];
  auto& g_pn = out.grad_embeddings[index_of(PromptId::point_normal)];
  auto& g_pa = out.grad_embeddings[index_of(PromptId::point_anomaly)];
  if (!stages.stages.empty()) {
    for (const auto& b : stages.stages) out.grad_stages.push_back(Eigen::MatrixXd::Zero(b.rows(), b.cols()));
  }

  if (G.has("score")) {
    for (std::size_t m = 0; m < rgb_fw.size(); ++m) {
      const std::string p = "layer" + std::to_string(m) + ".";
      detail::patch_backward(s.rgb.locals[m], e_rn, e_ra, stages.at(m), cfg.tau, rgb_up[m], rgb_fw[m],
                             G.grad(p + "normal"), G.grad(p + "anomaly"), g_rn, g_ra,
                             out.grad_stages.empty() ? nullptr : &out.grad_stages[m]);
    }
    detail::global_backward(s.rgb.global, rgb_s, G.grad("score")[0], cfg.tau, g_rn, g_ra);
  }

  if (G.has("pooled")) {
    std::vector<double> gp_normal(n_cells, 0.0), gp_anomaly(n_cells, 0.0);
    const auto& gpn = G.grad("point.normal");
    const auto& gpa = G.grad("point.anomaly");
    for (std::size_t j = 0; j < valid_idx.size(); ++j) {
      gp_normal[valid_idx[j]] = gpn[j];
      gp_anomaly[valid_idx[j]] = gpa[j];
    }
    const auto back_n = inv.apply_transpose(gp_normal);
    const auto back_a = inv.apply_transpose(gp_anomaly);
    const double g_pooled = G.grad("pooled")[0];
    const auto& g_vs = G.grad("view_scores");
    for (std::size_t k = 0; k < K; ++k) {
      const std::string p = "view" + std::to_string(k) + ".";
      std::vector<double> gn = G.grad(p + "normal"), ga = G.grad(p + "anomaly");
      for (std::size_t i = 0; i < gn.size(); ++i) {
        gn[i] += back_n[k][i];
        ga[i] += back_a[k][i];
      }
      detail::patch_backward(s.views[k].locals[0], e_pn, e_pa, nullptr, cfg.tau, view_up[k], view_fw[k], gn, ga, g_pn,
                             g_pa, nullptr);
      detail::global_backward(s.views[k].global, view_scores[k], g_vs[k] + g_pooled / static_cast<double>(K), cfg.tau,
                              g_pn, g_pa);
    }
  }

  for (auto id : kAllPrompts) {
    const auto name = embedding_name(id);
    if (!G.has(name)) continue;
    const auto& g = G.grad(name);
    out.grad_embeddings[index_of(id)] += Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
  }
  return out;
}

/// Adaptive-moment (or plain gradient) update state for one parameter block.
class BlockOptimizer {
 public:
  BlockOptimizer(const TrainConfig& cfg, Eigen::Index rows, Eigen::Index cols)
      : cfg_(cfg), m_(Eigen::MatrixXd::Zero(rows, cols)), v_(Eigen::MatrixXd::Zero(rows, cols)) {}

  void step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad) {
    if (cfg_.optimizer == Optimizer::sgd) {
      param -= cfg_.lr * grad;
      return;
    }
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    param.array() -= cfg_.lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
  }

 private:
  TrainConfig cfg_;
  Eigen::MatrixXd m_, v_;
  std::size_t t_ = 0;
};

struct EpochStats {
  double total = 0.0, point = 0.0, rgb = 0.0, mcl = 0.0;
};

struct TrainResult {
  PromptBank bank;
  StageWeights stages;
  std::vector<EpochStats> trace;
};

/// Per-sample updates over seeded shuffles of the dataset.
inline TrainResult train_prompts(std::span<const TrainingSample> data, PromptBank bank, const StubTextEncoder& enc,
                                 StageWeights stages, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw InputError("training set is empty");
  for (const auto& s : data) {
    if (s.rgb.dim() != static_cast<Eigen::Index>(enc.embed_dim())) {
      throw InputError(s.id + ": embedding width " + std::to_string(s.rgb.dim()) + " does not match the text encoder (" +
                       std::to_string(enc.embed_dim()) + ")");
    }
  }
  if (cfg.train_stage_weights && stages.stages.empty()) {
    stages = StageWeights::identity(data.front().rgb.locals.size(), static_cast<Eigen::Index>(enc.embed_dim()));
  }

  std::vector<BlockOptimizer> tok_opt, deep_opt, stage_opt;
  for (const auto& m : bank.learnable) tok_opt.emplace_back(cfg, m.rows(), m.cols());
  for (const auto& m : bank.deep_prompts) deep_opt.emplace_back(cfg, m.rows(), m.cols());
  if (cfg.train_stage_weights) {
    for (const auto& m : stages.stages) stage_opt.emplace_back(cfg, m.rows(), m.cols());
  }

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, 1000 + epoch));
    rng.shuffle(order);
    EpochStats st;
    for (auto idx : order) {
      const auto& s = data[idx];
      const PromptEmbeddings e = encode_all(bank, enc);
      const SampleObjective obj = sample_objective(s, e, stages, cfg);
      if (!std::isfinite(obj.total.value)) throw NumericError("non-finite loss at sample " + s.id);
      st.total += obj.total.value;
      st.point += obj.point;
      st.rgb += obj.rgb;
      st.mcl += obj.mcl;
      const PromptGradients g = encode_all_backward(bank, enc, obj.grad_embeddings);
      for (std::size_t b = 0; b < 4; ++b) tok_opt[b].step(bank.learnable[b], g.learnable[b]);
      for (std::size_t l = 0; l < bank.deep_prompts.size(); ++l) deep_opt[l].step(bank.deep_prompts[l], g.deep[l]);
      for (std::size_t m = 0; m < stage_opt.size(); ++m) stage_opt[m].step(stages.stages[m], obj.grad_stages[m]);
    }
    const double n = static_cast<double>(data.size());
    result.trace.push_back({st.total / n, st.point / n, st.rgb / n, st.mcl / n});
  }
  result.bank = std::move(bank);
  result.stages = std::move(stages);
  return result;
}

}  // namespace zs3d
