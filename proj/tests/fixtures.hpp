#pragma once

// Small random training problems shared by the unit and acceptance tests.

#include <Eigen/Dense>

#include <vector>

#include "zs3d/geometry.hpp"
#include "zs3d/prompts.hpp"
#include "zs3d/rng.hpp"
#include "zs3d/scoring.hpp"
#include "zs3d/training.hpp"

namespace zs3d::testing {

inline Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n, double scale = 1.0) {
  return random_matrix(rng, n, 1, scale).col(0);
}

struct TinyProblem {
  std::size_t dim = 5;
  std::size_t grid = 8;
  std::size_t views = 2;
  std::size_t resolution = 8;
  std::size_t rgb_layers = 4;
};

/// 8 x 8 random cloud rendered into a few views, with random patch features.
inline TrainingSample random_sample(Rng& rng, const TinyProblem& p = {}) {
  OrganizedPointCloud c;
  c.height = c.width = p.grid;
  const std::size_t n = p.grid * p.grid;
  c.points.resize(n);
  c.valid.resize(n);
  c.mask.resize(n);
  c.rgb.assign(n, {0, 0, 0});
  for (std::size_t i = 0; i < n; ++i) {
    c.valid[i] = rng.uniform() < 0.85 ? 1 : 0;
    c.points[i] = c.valid[i] ? Eigen::Vector3d(static_cast<double>(i % p.grid), static_cast<double>(i / p.grid),
                                               rng.uniform(0.0, 2.0))
                             : Eigen::Vector3d::Zero();
    c.mask[i] = c.valid[i] && rng.uniform() < 0.25 ? 1 : 0;
  }
  c.valid[0] = 1;

  std::vector<ViewTransform> t;
  for (std::size_t k = 0; k < p.views; ++k) {
    t.push_back(rotation_matrix(k % 2 ? Axis::y : Axis::x, rng.uniform(-0.8, 0.8)));
  }

  TrainingSample s;
  s.id = "tiny";
  s.height = s.width = p.grid;
  s.renders = render_views(c, t, p.resolution);
  const auto D = static_cast<Eigen::Index>(p.dim);
  s.rgb.global = random_vector(rng, D, 0.5);
  for (std::size_t m = 0; m < p.rgb_layers; ++m) s.rgb.locals.push_back(random_matrix(rng, 4, D, 0.5));
  for (std::size_t k = 0; k < p.views; ++k) {
    DenseBundle b;
    b.global = random_vector(rng, D, 0.5);
    b.locals.push_back(random_matrix(rng, 4, D, 0.5));
    s.views.push_back(std::move(b));
  }
  s.mask.resize(n);
  s.valid = c.valid;
  for (std::size_t i = 0; i < n; ++i) s.mask[i] = c.mask[i];
  s.label = c.global_label() ? 1.0 : 0.0;
  return s;
}

inline PromptConfig tiny_prompt_config(std::size_t deep_length = 0) {
  PromptConfig pc;
  pc.n_normal = 2;
  pc.n_anomaly = 3;
  pc.token_dim = 6;
  pc.encoder_layers = 3;
  pc.deep_length = deep_length;
  pc.deep_depth = 2;
  return pc;
}

inline EncoderConfig tiny_encoder_config(std::size_t dim = 5) {
  EncoderConfig ec;
  ec.n_layers = 3;
  ec.token_dim = 6;
  ec.embed_dim = dim;
  ec.seed = 11;
  return ec;
}

/// Learnable rows followed by the deep prompt rows, row-major.
inline std::vector<double> flatten_bank(const PromptBank& bank) {
  std::vector<double> x;
  auto push = [&x](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) x.push_back(m(r, c));
  };
  for (const auto& m : bank.learnable) push(m);
  for (const auto& m : bank.deep_prompts) push(m);
  return x;
}

inline void unflatten_bank(PromptBank& bank, std::span<const double> x) {
  std::size_t k = 0;
  auto pull = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = x[k++];
  };
  for (auto& m : bank.learnable) pull(m);
  for (auto& m : bank.deep_prompts) pull(m);
}

inline std::vector<double> flatten_gradients(const PromptGradients& g) {
  std::vector<double> x;
  auto push = [&x](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) x.push_back(m(r, c));
  };
  for (const auto& m : g.learnable) push(m);
  for (const auto& m : g.deep) push(m);
  return x;
}

}  // namespace zs3d::testing
