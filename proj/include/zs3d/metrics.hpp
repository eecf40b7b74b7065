#pragma once

// Ranking and segmentation metrics: I-AUROC, AP, P-AUROC and AUPRO.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/numerics.hpp"

namespace zs3d {

namespace detail {

inline void check_ranking_input(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                bool need_negative) {
  if (scores.size() != labels.size()) throw InputError("scores and labels have different lengths");
  std::size_t pos = 0;
  for (auto l : labels) pos += l ? 1 : 0;
  if (pos == 0) throw InputError("metric needs at least one positive label");
  if (need_negative && pos == labels.size()) throw InputError("metric needs at least one negative label");
}

// Indices ordered by descending score; ties keep input order.
inline std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

/// Mann-Whitney statistic with ties counted one half.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_ranking_input(scores, labels, true);
  const auto order = detail::descending_order(scores);
  // Walk tie groups from the top; each positive beats every negative below its group.
  double n_pos = 0, n_neg = 0;
  for (auto l : labels) (l ? n_pos : n_neg) += 1;
  double wins = 0.0, neg_seen = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    double gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? gp : gn) += 1;
      ++j;
    }
    wins += gp * (n_neg - neg_seen - gn) + 0.5 * gp * gn;
    neg_seen += gn;
    i = j;
  }
  return wins / (n_pos * n_neg);
}

/// Sum over descending tie groups of (recall step) x (precision at that group).
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_ranking_input(scores, labels, false);
  const auto order = detail::descending_order(scores);
  double n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  double ap = 0.0, tp = 0.0, seen = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    double gp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      gp += labels[order[j]] ? 1 : 0;
      ++j;
    }
    tp += gp;
    seen += static_cast<double>(j - i);
    if (gp > 0) ap += (gp / n_pos) * (tp / seen);
    i = j;
  }
  return ap;
}

/// One evaluated grid: scores, ground-truth mask and validity (empty = all valid).
struct MapSample {
  const ScoreMap* map = nullptr;
  std::span<const std::uint8_t> mask;
  std::span<const std::uint8_t> valid;

  bool is_valid(std::size_t i) const { return valid.empty() || valid[i] != 0; }
};

namespace detail {

inline void check_map_sample(const MapSample& s) {
  if (!s.map) throw InputError("metric sample has no map");
  const std::size_t n = s.map->values.size();
  if (s.mask.size() != n) throw InputError("mask size does not match its score map");
  if (!s.valid.empty() && s.valid.size() != n) throw InputError("validity size does not match its score map");
}

}  // namespace detail

/// auroc over every valid cell of every map.
inline double pixel_auroc(std::span<const MapSample> samples) {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (const auto& s : samples) {
    detail::check_map_sample(s);
    for (std::size_t i = 0; i < s.map->values.size(); ++i) {
      if (!s.is_valid(i)) continue;
      scores.push_back(s.map->values[i]);
      labels.push_back(s.mask[i] ? 1 : 0);
    }
  }
  return auroc(scores, labels);
}

/// 8-connected component labels of a binary mask (-1 outside the mask).
inline std::vector<std::int64_t> connected_regions(std::span<const std::uint8_t> mask, std::size_t height,
                                                   std::size_t width, std::size_t* n_regions = nullptr) {
  if (mask.size() != height * width) throw InputError("mask size does not match its shape");
  std::vector<std::int64_t> label(mask.size(), -1);
  std::int64_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || label[start] >= 0) continue;
    label[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const auto r = static_cast<std::ptrdiff_t>(p / width), c = static_cast<std::ptrdiff_t>(p % width);
      for (std::ptrdiff_t dr = -1; dr <= 1; ++dr) {
        for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
          const std::ptrdiff_t rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(height) || cc >= static_cast<std::ptrdiff_t>(width)) {
            continue;
          }
          const std::size_t q = static_cast<std::size_t>(rr) * width + static_cast<std::size_t>(cc);
          if (mask[q] && label[q] < 0) {
            label[q] = next;
            stack.push_back(q);
          }
        }
      }
    }
    ++next;
  }
  if (n_regions) *n_regions = static_cast<std::size_t>(next);
  return label;
}

struct AuproOptions {
  double fpr_limit = 0.3;
  std::size_t n_thresholds = 200;  // 0 = every distinct observed score
};

/// Thresholds (descending) used by aupro: quantiles of the observed scores, or
/// every distinct score for a full sweep.
inline std::vector<double> aupro_thresholds(std::vector<double> observed, std::size_t n_thresholds) {
  std::sort(observed.begin(), observed.end());
  std::vector<double> t;
  if (n_thresholds == 0) {
    t = observed;
  } else if (n_thresholds == 1) {
    t.push_back(observed.front());
  } else {
    const double last = static_cast<double>(observed.size() - 1);
    for (std::size_t i = 0; i < n_thresholds; ++i) {
      const auto k = static_cast<std::size_t>(
          std::llround(static_cast<double>(i) * last / static_cast<double>(n_thresholds - 1)));
      t.push_back(observed[k]);
    }
  }
  t.erase(std::unique(t.begin(), t.end()), t.end());
  std::reverse(t.begin(), t.end());
  return t;
}

/// Area under the mean per-region overlap vs. false-positive-rate curve up to
/// fpr_limit, normalized by fpr_limit. A cell is predicted when score >= t.
inline double aupro(std::span<const MapSample> samples, const AuproOptions& opt = {}) {
  if (!(opt.fpr_limit > 0.0 && opt.fpr_limit <= 1.0)) throw InputError("aupro: fpr_limit must lie in (0, 1]");
  struct Cell {
    double score;
    std::int64_t region;  // -1 = normal
  };
  std::vector<Cell> cells;
  std::vector<double> region_size;
  for (const auto& s : samples) {
    detail::check_map_sample(s);
    std::vector<std::uint8_t> m(s.mask.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (s.mask[i] && s.is_valid(i)) ? 1 : 0;
    std::size_t n_reg = 0;
    const auto lab = connected_regions(m, s.map->height, s.map->width, &n_reg);
    const auto base = static_cast<std::int64_t>(region_size.size());
    region_size.resize(region_size.size() + n_reg, 0.0);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!s.is_valid(i)) continue;
      const std::int64_t r = lab[i] >= 0 ? base + lab[i] : -1;
      if (r >= 0) region_size[static_cast<std::size_t>(r)] += 1.0;
      cells.push_back({s.map->values[i], r});
    }
  }
  if (region_size.empty()) throw InputError("aupro needs at least one anomalous region");
  double n_normal = 0;
  for (const auto& c : cells) n_normal += c.region < 0 ? 1 : 0;
  if (n_normal == 0) throw InputError("aupro needs at least one normal cell");

  std::vector<double> observed;
  observed.reserve(cells.size());
  for (const auto& c : cells) observed.push_back(c.score);
  const auto thresholds = aupro_thresholds(std::move(observed), opt.n_thresholds);

  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.score > b.score; });
  const double n_regions = static_cast<double>(region_size.size());
  std::vector<double> fpr{0.0}, pro{0.0};
  double fp = 0.0, overlap_sum = 0.0;
  std::size_t k = 0;
  for (double t : thresholds) {
    while (k < cells.size() && cells[k].score >= t) {
      if (cells[k].region < 0) {
        fp += 1.0;
      } else {
        overlap_sum += 1.0 / region_size[static_cast<std::size_t>(cells[k].region)];
      }
      ++k;
    }
    fpr.push_back(fp / n_normal);
    pro.push_back(overlap_sum / n_regions);
  }

  double area = 0.0;
  for (std::size_t i = 1; i < fpr.size(); ++i) {
    const double x0 = fpr[i - 1], x1 = fpr[i];
    if (x0 >= opt.fpr_limit) break;
    if (x1 <= opt.fpr_limit) {
      area += (x1 - x0) * (pro[i - 1] + pro[i]) / 2.0;
    } else {
      const double y_lim = pro[i - 1] + (pro[i] - pro[i - 1]) * (opt.fpr_limit - x0) / (x1 - x0);
      area += (opt.fpr_limit - x0) * (pro[i - 1] + y_lim) / 2.0;
      break;
    }
  }
  return area / opt.fpr_limit;
}

}  // namespace zs3d
