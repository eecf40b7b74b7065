#pragma once

// On-disk pipeline: synth -> render -> train -> score -> eval, plus plot.

#include <cstdio>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "zs3d/config.hpp"
#include "zs3d/datagen.hpp"
#include "zs3d/error.hpp"
#include "zs3d/files.hpp"
#include "zs3d/image_io.hpp"
#include "zs3d/metrics.hpp"
#include "zs3d/prompts.hpp"
#include "zs3d/scoring.hpp"
#include "zs3d/service_provider.hpp"
#include "zs3d/tensor_io.hpp"
#include "zs3d/training.hpp"

namespace zs3d {

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestEntry {
  std::string id;
  bool label = false;
  AnomalyKind kind = AnomalyKind::none;
};

struct DatasetManifest {
  std::string category = "synthetic";
  std::string views;
  std::size_t resolution = 0;
  std::size_t embed_dim = 0;
  std::vector<ManifestEntry> samples;

  static constexpr const char* kMagic = "zs3d-dataset 1";

  std::string encode(const PipelineConfig& cfg) const {
    std::ostringstream o;
    o << kMagic << '\n';
    o << "category=" << category << '\n';
    o << "seed=" << cfg.seed << '\n';
    o << "n_normal=" << cfg.n_normal << '\n';
    o << "n_anomalous=" << cfg.n_anomalous << '\n';
    o << "kinds=" << cfg.kinds << '\n';
    o << "grid=" << cfg.grid << '\n';
    o << "area_min=" << format_double(cfg.area_min) << '\n';
    o << "area_max=" << format_double(cfg.area_max) << '\n';
    o << "feature_seed=" << cfg.feature_seed << '\n';
    o << "rgb_patch_grid=" << cfg.rgb_patch_grid << '\n';
    o << "view_patch_grid=" << cfg.view_patch_grid << '\n';
    o << "embed_dim=" << embed_dim << '\n';
    o << "views=" << views << '\n';
    o << "resolution=" << resolution << '\n';
    for (const auto& s : samples) o << "sample=" << s.id << ',' << (s.label ? 1 : 0) << ',' << to_string(s.kind) << '\n';
    return o.str();
  }

  static DatasetManifest load(const fs::path& root) {
    const fs::path p = root / "dataset.txt";
    if (!fs::exists(p)) throw InputError("missing dataset manifest: " + p.string());
    const std::string text = read_file(p);
    const auto lines = split(text, '\n');
    if (lines.empty() || trim(lines[0]) != kMagic) throw InputError(p.string() + ": not a dataset manifest");
    DatasetManifest m;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto line = trim(lines[i]);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw InputError(p.string() + ": malformed line " + std::to_string(i + 1));
      const auto key = line.substr(0, eq);
      const auto val = line.substr(eq + 1);
      if (key == "category") {
        m.category = val;
      } else if (key == "views") {
        m.views = val;
      } else if (key == "resolution") {
        m.resolution = static_cast<std::size_t>(parse_uint(key, val));
      } else if (key == "embed_dim") {
        m.embed_dim = static_cast<std::size_t>(parse_uint(key, val));
      } else if (key == "sample") {
        const auto parts = split(val, ',');
        if (parts.size() != 3 || parts[0].empty()) throw InputError(p.string() + ": malformed sample line");
        m.samples.push_back({parts[0], parse_bool(key, parts[1]), parse_anomaly_kind(parts[2])});
      }
    }
    if (m.views.empty() || m.resolution == 0) throw InputError(p.string() + ": manifest lacks views or resolution");
    return m;
  }

  std::vector<ViewTransform> view_transforms() const { return ViewSpec::parse(views).transforms(); }
  std::size_t view_count() const { return ViewSpec::parse(views).axes.size(); }
};

// ---------------------------------------------------------------------------
// Render files

inline fs::path render_file(const fs::path& root, const std::string& id, std::size_t k, const char* suffix) {
  return root / id / "render" / (view_branch(k) + suffix);
}

inline void save_render(const fs::path& root, const std::string& id, std::size_t k, const ViewRender& v) {
  const std::uint64_t r = v.resolution;
  save_mcle(render_file(root, id, k, ".depth.mcle"), EmbeddingTensor::f32({r, r}, v.depth));
  Image8 mask{v.resolution, v.resolution, 1, {}};
  for (auto m : v.mask2d) mask.data.push_back(m ? 255 : 0);
  save_pnm(mask, render_file(root, id, k, ".mask.pgm"));
  save_mcle(render_file(root, id, k, ".pix2point.mcle"), EmbeddingTensor::i64({r, r}, v.pix2point));
}

inline std::vector<ViewRender> load_renders(const fs::path& root, const std::string& id, const DatasetManifest& m) {
  const auto transforms = m.view_transforms();
  std::vector<ViewRender> out;
  for (std::size_t k = 0; k < transforms.size(); ++k) {
    auto need = [&](const char* suffix) {
      const fs::path p = render_file(root, id, k, suffix);
      if (!fs::exists(p)) throw InputError("missing render file: " + fs::relative(p, root).string());
      return p;
    };
    ViewRender v;
    v.transform = transforms[k];
    const EmbeddingTensor depth = load_mcle(need(".depth.mcle"));
    const EmbeddingTensor p2p = load_mcle(need(".pix2point.mcle"));
    const Image8 mask = load_pnm(need(".mask.pgm"));
    if (depth.ndim() != 2 || depth.dim(0) != depth.dim(1) || p2p.dims() != depth.dims() || mask.channels != 1 ||
        mask.height != depth.dim(0) || mask.width != depth.dim(1)) {
      throw InputError(id + ": render files of " + view_branch(k) + " have inconsistent shapes");
    }
    v.resolution = depth.dim(0);
    v.depth = depth.to_f64();
    v.pix2point = p2p.to_i64();
    for (auto b : mask.data) {
      v.mask2d.push_back(b ? 1 : 0);
      v.view_label = v.view_label || b != 0;
    }
    out.push_back(std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline DatasetManifest cmd_synth(const PipelineConfig& cfg, const fs::path& out, std::ostream& log) {
  const SynthSpec spec = cfg.synth_spec();
  const auto views = cfg.view_transforms();
  const FeatureMap fm(cfg.feature_spec());
  DatasetManifest m;
  m.category = cfg.category;
  m.views = ViewSpec::parse(cfg.views).str();
  m.resolution = cfg.resolution;
  m.embed_dim = cfg.embed_dim;
  for (std::size_t i = 0; i < spec.total(); ++i) {
    auto g = featurize(synth_sample(spec, i, sample_kind(spec, i)), fm, views, cfg.resolution);
    const auto& s = g.sample;
    save_cloud(s.cloud, out / s.id);
    save_bundle(out, s.id, "rgb", g.rgb);
    for (std::size_t k = 0; k < g.views.size(); ++k) save_bundle(out, s.id, view_branch(k), g.views[k]);
    m.samples.push_back({s.id, s.cloud.global_label(), s.kind});
  }
  write_file_atomic(out / "dataset.txt", m.encode(cfg));
  log << "synthesized " << spec.total() << " samples (" << spec.n_normal << " normal, " << spec.n_anomalous
      << " anomalous)\n";
  return m;
}

inline void cmd_render(const fs::path& dataset, std::ostream& log) {
  const DatasetManifest m = DatasetManifest::load(dataset);
  if (m.samples.empty()) throw InputError("dataset has no samples");
  const auto views = m.view_transforms();
  for (const auto& s : m.samples) {
    const auto cloud = load_cloud(dataset / s.id);
    const auto renders = render_views(cloud, views, m.resolution);
    for (std::size_t k = 0; k < renders.size(); ++k) save_render(dataset, s.id, k, renders[k]);
  }
  log << "rendered " << m.samples.size() << " samples x " << views.size() << " views\n";
}

inline std::unique_ptr<EmbeddingProvider> make_provider(const fs::path& dataset, const std::string& endpoint) {
  if (endpoint.empty()) return std::make_unique<FileProvider>(dataset);
  return std::make_unique<ServiceProvider>(endpoint);
}

/// Loads everything the objective and the scorer need for one sample.
inline TrainingSample load_sample(const fs::path& dataset, const DatasetManifest& m, const ManifestEntry& e,
                                  const EmbeddingProvider& provider) {
  TrainingSample s;
  s.id = e.id;
  const auto cloud = load_cloud(dataset / e.id);
  s.height = cloud.height;
  s.width = cloud.width;
  s.valid = cloud.valid;
  s.mask.assign(cloud.mask.begin(), cloud.mask.end());
  s.label = cloud.global_label() ? 1.0 : 0.0;
  s.renders = load_renders(dataset, e.id, m);
  s.rgb = to_dense(provider.fetch(e.id, "rgb"));
  for (std::size_t k = 0; k < s.renders.size(); ++k) s.views.push_back(to_dense(provider.fetch(e.id, view_branch(k))));
  if (s.rgb.dim() != s.views.front().dim()) throw InputError(e.id + ": RGB and view embeddings differ in width");
  return s;
}

namespace detail {

inline std::string encoder_text(const PipelineConfig& c) {
  std::ostringstream o;
  o << "encoder_layers=" << c.encoder_layers << '\n'
    << "embed_dim=" << c.embed_dim << '\n'
    << "encoder_seed=" << c.encoder_seed << '\n'
    << "pooling=" << c.pooling << '\n';
  return o.str();
}

inline EmbeddingTensor matrix_tensor(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  return EmbeddingTensor::f64({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, v);
}

inline Eigen::MatrixXd tensor_matrix(const EmbeddingTensor& t) {
  if (t.ndim() != 2) throw InputError("expected a 2-D tensor");
  const auto v = t.to_f64();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = v[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

}  // namespace detail

struct Checkpoint {
  PromptBank bank;
  StageWeights stages;
  EncoderConfig encoder;
};

inline void save_checkpoint(const fs::path& dir, const TrainResult& r, const PipelineConfig& cfg) {
  save_bank(r.bank, dir);
  write_file_atomic(dir / "encoder.txt", detail::encoder_text(cfg));
  for (std::size_t m = 0; m < r.stages.stages.size(); ++m) {
    save_mcle(dir / ("stage" + std::to_string(m) + ".mcle"), detail::matrix_tensor(r.stages.stages[m]));
  }
  std::ostringstream run;
  run << cfg.echo();
  for (std::size_t e = 0; e < r.trace.size(); ++e) {
    const auto& t = r.trace[e];
    run << "epoch=" << e + 1 << ',' << format_double(t.total) << ',' << format_double(t.point) << ','
        << format_double(t.rgb) << ',' << format_double(t.mcl) << '\n';
  }
  write_file_atomic(dir / "run.txt", run.str());
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("checkpoint directory not found: " + dir.string());
  Checkpoint c;
  c.bank = load_bank(dir);
  const fs::path enc = dir / "encoder.txt";
  if (!fs::exists(enc)) throw InputError("missing checkpoint file: " + enc.string());
  PipelineConfig ec;
  ec.merge_text(read_file(enc), enc.string());
  c.encoder = ec.encoder_config();
  for (std::size_t m = 0;; ++m) {
    const fs::path p = dir / ("stage" + std::to_string(m) + ".mcle");
    if (!fs::exists(p)) break;
    c.stages.stages.push_back(detail::tensor_matrix(load_mcle(p)));
  }
  return c;
}

inline TrainResult cmd_train(const fs::path& dataset, const PipelineConfig& cfg, const fs::path& out,
                             std::ostream& log, const std::string& endpoint = "") {
  const DatasetManifest m = DatasetManifest::load(dataset);
  if (m.samples.empty()) throw InputError("dataset has no samples");
  const TrainConfig tc = cfg.train_config();
  const auto provider = make_provider(dataset, endpoint);
  std::vector<TrainingSample> data;
  for (const auto& e : m.samples) data.push_back(load_sample(dataset, m, e, *provider));
  const StubTextEncoder enc(cfg.encoder_config());
  PromptBank bank = build_bank(cfg.prompt_config(), derive_seed(cfg.seed, 11));
  TrainResult r = train_prompts(data, std::move(bank), enc, {}, tc);
  save_checkpoint(out, r, cfg);
  for (std::size_t e = 0; e < r.trace.size(); ++e) {
    log << "epoch " << e + 1 << " loss " << format_double(r.trace[e].total) << '\n';
  }
  return r;
}

struct ResultRow {
  std::string id;
  double score_rgb = 0, score_point = 0, score_final = 0, eta = 0;
};

inline constexpr const char* kResultsHeader = "sample\tscore_rgb\tscore_point\tscore_final\teta";

inline ScoreReport score_sample(const TrainingSample& s, const PromptEmbeddings& e, const StageWeights& stages,
                                const PipelineConfig& cfg) {
  const auto& e_rn = e[index_of(PromptId::rgb_normal)];
  const auto& e_ra = e[index_of(PromptId::rgb_anomaly)];
  const auto& e_pn = e[index_of(PromptId::point_normal)];
  const auto& e_pa = e[index_of(PromptId::point_anomaly)];
  BranchOutput rgb{rgb_anomaly_map(s.rgb, e_rn, e_ra, stages, cfg.tau, s.height, s.width, s.rgb.locals.size()),
                   rgb_score(s.rgb.global, e_rn, e_ra, cfg.tau)};
  OrganizedPointCloud grid;
  grid.height = s.height;
  grid.width = s.width;
  BranchOutput point{point_anomaly_map(s.views, s.renders, e_pn, e_pa, nullptr, cfg.tau, grid), 0.0};
  std::vector<Eigen::VectorXd> globals;
  for (const auto& v : s.views) globals.push_back(v.global);
  point.score = point_score(globals, e_pn, e_pa, cfg.tau);
  return cmm_fuse(rgb, point, cfg.eta, cfg.sigma);
}

inline std::vector<ResultRow> cmd_score(const fs::path& dataset, const fs::path& checkpoint, const PipelineConfig& cfg,
                                        const fs::path& out, std::ostream& log, const std::string& endpoint = "") {
  cfg.validate_scoring();
  const DatasetManifest m = DatasetManifest::load(dataset);
  if (m.samples.empty()) throw InputError("dataset has no samples");
  const Checkpoint ck = load_checkpoint(checkpoint);
  const StubTextEncoder enc(ck.encoder);
  const PromptEmbeddings e = encode_all(ck.bank, enc);
  const auto provider = make_provider(dataset, endpoint);
  std::vector<ResultRow> rows;
  std::string text = std::string(kResultsHeader) + "\n";
  for (const auto& entry : m.samples) {
    const TrainingSample s = load_sample(dataset, m, entry, *provider);
    if (s.rgb.dim() != e[0].size()) {
      throw InputError(entry.id + ": embedding width " + std::to_string(s.rgb.dim()) +
                       " does not match the checkpoint (" + std::to_string(e[0].size()) + ")");
    }
    const ScoreReport r = score_sample(s, e, ck.stages, cfg);
    const std::uint64_t h = s.height, w = s.width;
    save_mcle(out / "maps" / (entry.id + ".final.mcle"), EmbeddingTensor::f64({h, w}, r.fused_map.values));
    save_mcle(out / "maps" / (entry.id + ".rgb.mcle"), EmbeddingTensor::f64({h, w}, r.rgb.map.values));
    save_mcle(out / "maps" / (entry.id + ".point.mcle"), EmbeddingTensor::f64({h, w}, r.point.map.values));
    rows.push_back({entry.id, r.rgb.score, r.point.score, r.fused_score, r.eta});
    text += entry.id + "\t" + format_double(r.rgb.score) + "\t" + format_double(r.point.score) + "\t" +
            format_double(r.fused_score) + "\t" + format_double(r.eta) + "\n";
  }
  write_file_atomic(out / "results.txt", text);
  log << "scored " << rows.size() << " samples (eta " << format_double(cfg.eta) << ")\n";
  return rows;
}

inline std::vector<ResultRow> load_results(const fs::path& results) {
  const fs::path p = results / "results.txt";
  if (!fs::exists(p)) throw InputError("missing results file: " + p.string());
  const auto lines = split(read_file(p), '\n');
  if (lines.empty() || trim(lines[0]) != kResultsHeader) throw InputError(p.string() + ": unexpected header");
  std::vector<ResultRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split(lines[i], '\t');
    if (f.size() != 5) throw InputError(p.string() + ": malformed row " + std::to_string(i + 1));
    rows.push_back({f[0], parse_double("score_rgb", f[1]), parse_double("score_point", f[2]),
                    parse_double("score_final", f[3]), parse_double("eta", f[4])});
  }
  return rows;
}

enum class EvalBranch { final, rgb, point };

inline EvalBranch parse_eval_branch(std::string_view s) {
  if (s == "final") return EvalBranch::final;
  if (s == "rgb") return EvalBranch::rgb;
  if (s == "point") return EvalBranch::point;
  throw InputError("branch must be final, rgb or point");
}

struct MetricsSummary {
  double i_auroc = 0, ap = 0, p_auroc = 0, aupro = 0;
};

/// Values x 100 with one decimal.
inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

inline MetricsSummary cmd_eval(const fs::path& results, const fs::path& dataset, const PipelineConfig& cfg,
                               EvalBranch branch, const fs::path& out, std::ostream& log) {
  const DatasetManifest m = DatasetManifest::load(dataset);
  const auto rows = load_results(results);
  if (rows.empty()) throw InputError("results file has no rows");
  const char* suffix = branch == EvalBranch::rgb ? ".rgb.mcle" : branch == EvalBranch::point ? ".point.mcle" : ".final.mcle";
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<ScoreMap> maps;
  std::vector<OrganizedPointCloud> clouds;
  maps.reserve(rows.size());
  clouds.reserve(rows.size());
  for (const auto& r : rows) {
    clouds.push_back(load_cloud(dataset / r.id));
    const fs::path mp = results / "maps" / (r.id + suffix);
    if (!fs::exists(mp)) throw InputError("missing map file: " + mp.string());
    const EmbeddingTensor t = load_mcle(mp);
    if (t.ndim() != 2 || t.dim(0) != clouds.back().height || t.dim(1) != clouds.back().width) {
      throw InputError(mp.string() + ": map does not match the sample grid");
    }
    maps.emplace_back(t.dim(0), t.dim(1), t.to_f64());
    scores.push_back(branch == EvalBranch::rgb ? r.score_rgb : branch == EvalBranch::point ? r.score_point : r.score_final);
    labels.push_back(clouds.back().global_label() ? 1 : 0);
  }
  std::vector<MapSample> ms;
  for (std::size_t i = 0; i < rows.size(); ++i) ms.push_back({&maps[i], clouds[i].mask, clouds[i].valid});
  MetricsSummary s;
  s.i_auroc = auroc(scores, labels);
  s.ap = average_precision(scores, labels);
  s.p_auroc = pixel_auroc(ms);
  s.aupro = aupro(ms, cfg.aupro_options());
  std::string text = "category\tI-AUROC\tAP\tP-AUROC\tAUPRO\n";
  for (const std::string& name : {m.category, std::string("mean")}) {
    text += name + "\t" + percent(s.i_auroc) + "\t" + percent(s.ap) + "\t" + percent(s.p_auroc) + "\t" +
            percent(s.aupro) + "\n";
  }
  write_file_atomic(out / "metrics.txt", text);
  log << text;
  return s;
}

// ---------------------------------------------------------------------------
// Heat maps

/// Fixed 256-entry ramp: dark blue -> blue -> cyan -> yellow -> red -> dark red.
inline std::array<std::uint8_t, 3> ramp_color(std::size_t i) {
  struct Stop {
    int at, r, g, b;
  };
  static constexpr Stop stops[] = {{0, 0, 0, 128},     {36, 0, 0, 255},   {100, 0, 255, 255},
                                   {156, 255, 255, 0}, {220, 255, 0, 0}, {255, 128, 0, 0}};
  const int x = static_cast<int>(std::min<std::size_t>(i, 255));
  for (std::size_t s = 1; s < std::size(stops); ++s) {
    const Stop& a = stops[s - 1];
    const Stop& b = stops[s];
    if (x <= b.at) {
      const int span = b.at - a.at, t = x - a.at;
      auto mix = [&](int u, int v) { return static_cast<std::uint8_t>((u * (span - t) + v * t + span / 2) / span); };
      return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
    }
  }
  return {128, 0, 0};
}

/// Values are clamped to [0, 1] and quantized to the nearest ramp entry.
inline Image8 heat_map(const ScoreMap& map) {
  Image8 img{map.height, map.width, 3, {}};
  img.data.reserve(map.values.size() * 3);
  for (double v : map.values) {
    const double c = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    const auto rgb = ramp_color(static_cast<std::size_t>(std::floor(c * 255.0 + 0.5)));
    img.data.insert(img.data.end(), rgb.begin(), rgb.end());
  }
  return img;
}

inline void cmd_plot(std::span<const fs::path> maps, const fs::path& out, std::ostream& log) {
  if (maps.empty()) throw InputError("no maps to plot");
  for (const auto& p : maps) {
    if (!fs::exists(p)) throw InputError("missing map file: " + p.string());
    const EmbeddingTensor t = load_mcle(p);
    if (t.ndim() != 2) throw InputError(p.string() + ": expected a 2-D map");
    const ScoreMap m(t.dim(0), t.dim(1), t.to_f64());
    save_pnm(heat_map(m), out / (p.stem().string() + ".ppm"));
  }
  log << "plotted " << maps.size() << " maps\n";
}

}  // namespace zs3d
