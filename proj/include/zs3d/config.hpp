#pragma once

// Flat key=value pipeline configuration.

#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "zs3d/datagen.hpp"
#include "zs3d/error.hpp"
#include "zs3d/files.hpp"
#include "zs3d/geometry.hpp"
#include "zs3d/metrics.hpp"
#include "zs3d/prompts.hpp"
#include "zs3d/training.hpp"

namespace zs3d {

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view key, std::string_view s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw InputError("config key '" + std::string(key) + "': '" + std::string(s) + "' is not a number");
  }
  return v;
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("config key '" + std::string(key) + "': '" + std::string(s) + "' is not a non-negative integer");
  }
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw InputError("config key '" + std::string(key) + "': expected true or false");
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = s.find(sep, start);
    out.emplace_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

/// View angle list: comma-separated axis letter + degrees, e.g. "x-45,x0,y15".
struct ViewSpec {
  std::vector<Axis> axes;
  std::vector<double> degrees;

  static ViewSpec parse(std::string_view s) {
    ViewSpec v;
    for (const auto& item : split(s, ',')) {
      const auto t = trim(item);
      if (t.size() < 2 || (t[0] != 'x' && t[0] != 'y')) throw InputError("view '" + std::string(t) + "': expected x<deg> or y<deg>");
      v.axes.push_back(t[0] == 'x' ? Axis::x : Axis::y);
      v.degrees.push_back(parse_double("views", t.substr(1)));
    }
    if (v.axes.empty()) throw InputError("view list is empty");
    return v;
  }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < axes.size(); ++i) {
      if (i) out += ",";
      out += (axes[i] == Axis::x ? "x" : "y") + format_double(degrees[i]);
    }
    return out;
  }

  std::vector<ViewTransform> transforms() const {
    std::vector<ViewTransform> t;
    for (std::size_t i = 0; i < axes.size(); ++i) {
      t.push_back(rotation_matrix(axes[i], degrees[i] * std::numbers::pi / 180.0));
    }
    return t;
  }
};

struct PipelineConfig {
  // data
  std::uint64_t seed = 42;
  std::size_t n_normal = 40;
  std::size_t n_anomalous = 40;
  std::string kinds = "geometric,color";
  std::size_t grid = 64;
  double area_min = 0.005;
  double area_max = 0.05;
  std::string category = "synthetic";
  // rendering and features
  std::string views = "x-45,x-15,x0,x45,x15,y-45,y-15,y45,y15";
  std::size_t resolution = 128;
  std::uint64_t feature_seed = 1234;
  std::size_t embed_dim = 64;
  std::size_t rgb_patch_grid = 16;
  std::size_t view_patch_grid = 16;
  // prompts and text encoder
  std::size_t n_normal_tokens = 14;
  std::size_t n_anomaly_tokens = 14;
  std::string prompt_position = "flag-learnable-object";
  std::size_t deep_length = 0;
  std::size_t deep_depth = 9;
  std::size_t encoder_layers = 12;
  std::uint64_t encoder_seed = 7;
  std::string pooling = "mean";
  // training
  std::size_t epochs = 15;
  double lr = 0.001;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 0.8;
  double margin = 1.0;
  std::string anchor = "point";
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_eps = 1.0;
  std::string optimizer = "adam";
  bool train_stage_weights = false;
  // scoring and evaluation
  double tau = 0.07;
  double eta = 0.8;
  double sigma = 4.0;
  double fpr_limit = 0.3;
  std::size_t pro_thresholds = 200;

  void set(std::string_view key, std::string_view value) {
    const std::string v(trim(value));
    auto u = [&](std::size_t& dst) { dst = static_cast<std::size_t>(parse_uint(key, v)); };
    auto u64 = [&](std::uint64_t& dst) { dst = parse_uint(key, v); };
    auto d = [&](double& dst) { dst = parse_double(key, v); };
    if (key == "seed") u64(seed);
    else if (key == "n_normal") u(n_normal);
    else if (key == "n_anomalous") u(n_anomalous);
    else if (key == "kinds") kinds = v;
    else if (key == "grid") u(grid);
    else if (key == "area_min") d(area_min);
    else if (key == "area_max") d(area_max);
    else if (key == "category") category = v;
    else if (key == "views") views = v;
    else if (key == "resolution") u(resolution);
    else if (key == "feature_seed") u64(feature_seed);
    else if (key == "embed_dim") u(embed_dim);
    else if (key == "rgb_patch_grid") u(rgb_patch_grid);
    else if (key == "view_patch_grid") u(view_patch_grid);
    else if (key == "n_normal_tokens") u(n_normal_tokens);
    else if (key == "n_anomaly_tokens") u(n_anomaly_tokens);
    else if (key == "prompt_position") prompt_position = v;
    else if (key == "deep_length") u(deep_length);
    else if (key == "deep_depth") u(deep_depth);
    else if (key == "encoder_layers") u(encoder_layers);
    else if (key == "encoder_seed") u64(encoder_seed);
    else if (key == "pooling") pooling = v;
    else if (key == "epochs") u(epochs);
    else if (key == "lr") d(lr);
    else if (key == "lambda1") d(lambda1);
    else if (key == "lambda2") d(lambda2);
    else if (key == "lambda3") d(lambda3);
    else if (key == "margin") d(margin);
    else if (key == "anchor") anchor = v;
    else if (key == "focal_gamma") d(focal_gamma);
    else if (key == "focal_alpha") d(focal_alpha);
    else if (key == "dice_eps") d(dice_eps);
    else if (key == "optimizer") optimizer = v;
    else if (key == "train_stage_weights") train_stage_weights = parse_bool(key, v);
    else if (key == "tau") d(tau);
    else if (key == "eta") d(eta);
    else if (key == "sigma") d(sigma);
    else if (key == "fpr_limit") d(fpr_limit);
    else if (key == "pro_thresholds") u(pro_thresholds);
    else throw InputError("unknown config key '" + std::string(key) + "'");
  }

  /// Lines of key=value; blank lines and '#' comments are ignored.
  void merge_text(std::string_view text, const std::string& origin = "config") {
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
      ++line_no;
      const auto line = trim(raw);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw InputError(origin + ":" + std::to_string(line_no) + ": expected key=value");
      }
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }

  static PipelineConfig load(const fs::path& path) {
    if (!fs::exists(path)) throw InputError("missing config file: " + path.string());
    PipelineConfig c;
    c.merge_text(read_file(path), path.string());
    return c;
  }

  /// Deterministic key=value echo, parseable by merge_text.
  std::string echo() const {
    std::ostringstream o;
    auto kv = [&](const char* k, const std::string& v) { o << k << '=' << v << '\n'; };
    auto n = [&](const char* k, std::uint64_t v) { kv(k, std::to_string(v)); };
    auto f = [&](const char* k, double v) { kv(k, format_double(v)); };
    n("seed", seed);
    n("n_normal", n_normal);
    n("n_anomalous", n_anomalous);
    kv("kinds", kinds);
    n("grid", grid);
    f("area_min", area_min);
    f("area_max", area_max);
    kv("category", category);
    kv("views", views);
    n("resolution", resolution);
    n("feature_seed", feature_seed);
    n("embed_dim", embed_dim);
    n("rgb_patch_grid", rgb_patch_grid);
    n("view_patch_grid", view_patch_grid);
    n("n_normal_tokens", n_normal_tokens);
    n("n_anomaly_tokens", n_anomaly_tokens);
    kv("prompt_position", prompt_position);
    n("deep_length", deep_length);
    n("deep_depth", deep_depth);
    n("encoder_layers", encoder_layers);
    n("encoder_seed", encoder_seed);
    kv("pooling", pooling);
    n("epochs", epochs);
    f("lr", lr);
    f("lambda1", lambda1);
    f("lambda2", lambda2);
    f("lambda3", lambda3);
    f("margin", margin);
    kv("anchor", anchor);
    f("focal_gamma", focal_gamma);
    f("focal_alpha", focal_alpha);
    f("dice_eps", dice_eps);
    kv("optimizer", optimizer);
    kv("train_stage_weights", train_stage_weights ? "true" : "false");
    f("tau", tau);
    f("eta", eta);
    f("sigma", sigma);
    f("fpr_limit", fpr_limit);
    n("pro_thresholds", pro_thresholds);
    return o.str();
  }

  // Typed views onto the owning modules' settings.

  SynthSpec synth_spec() const {
    SynthSpec s;
    s.seed = seed;
    s.n_normal = n_normal;
    s.n_anomalous = n_anomalous;
    s.height = grid;
    s.width = grid;
    s.area_min = area_min;
    s.area_max = area_max;
    s.kinds.clear();
    for (const auto& k : split(kinds, ',')) s.kinds.push_back(parse_anomaly_kind(trim(k)));
    s.validate();
    return s;
  }

  FeatureSpec feature_spec() const {
    FeatureSpec f;
    f.feature_seed = feature_seed;
    f.dim = embed_dim;
    f.rgb_patch_grid = rgb_patch_grid;
    f.view_patch_grid = view_patch_grid;
    return f;
  }

  std::vector<ViewTransform> view_transforms() const { return ViewSpec::parse(views).transforms(); }

  PromptConfig prompt_config() const {
    PromptConfig p;
    p.n_normal = n_normal_tokens;
    p.n_anomaly = n_anomaly_tokens;
    p.token_dim = embed_dim;
    p.position = parse_prompt_position(prompt_position);
    p.deep_length = deep_length;
    p.deep_depth = deep_depth;
    p.encoder_layers = encoder_layers;
    p.validate();
    return p;
  }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.n_layers = encoder_layers;
    e.token_dim = embed_dim;
    e.embed_dim = embed_dim;
    e.seed = encoder_seed;
    if (pooling == "mean") e.pooling = Pooling::mean;
    else if (pooling == "last") e.pooling = Pooling::last;
    else throw InputError("pooling must be 'mean' or 'last'");
    return e;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.lr = lr;
    t.weights = {lambda1, lambda2, lambda3};
    t.margin = margin;
    if (anchor == "point") t.anchor = MclAnchor::point;
    else if (anchor == "rgb") t.anchor = MclAnchor::rgb;
    else throw InputError("anchor must be 'point' or 'rgb'");
    t.loss.gamma = focal_gamma;
    t.loss.alpha = focal_alpha;
    t.loss.dice_eps = dice_eps;
    t.tau = tau;
    t.seed = seed;
    if (optimizer == "adam") t.optimizer = Optimizer::adam;
    else if (optimizer == "sgd") t.optimizer = Optimizer::sgd;
    else throw InputError("optimizer must be 'adam' or 'sgd'");
    t.train_stage_weights = train_stage_weights;
    t.validate();
    return t;
  }

  AuproOptions aupro_options() const { return {fpr_limit, pro_thresholds}; }

  void validate_scoring() const {
    if (!(tau > 0.0)) throw InputError("tau must be positive");
    if (!(eta >= 0.0 && eta <= 2.0)) throw InputError("eta must lie in [0, 2]");
    if (!(sigma > 0.0)) throw InputError("sigma must be positive");
  }
};

}  // namespace zs3d
