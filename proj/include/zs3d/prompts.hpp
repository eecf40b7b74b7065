#pragma once

// Object-agnostic decoupled text prompts: template construction, learnable
// token banks, and a frozen differentiable stand-in for the text encoder.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/files.hpp"
#include "zs3d/rng.hpp"
#include "zs3d/tensor_io.hpp"

namespace zs3d {

enum class Modality { rgb, point };
enum class State { normal, anomaly };

/// The four decoupled prompts, in the fixed order used throughout.
enum class PromptId : std::size_t { rgb_normal = 0, rgb_anomaly = 1, point_normal = 2, point_anomaly = 3 };
inline constexpr std::array<PromptId, 4> kAllPrompts = {PromptId::rgb_normal, PromptId::rgb_anomaly,
                                                        PromptId::point_normal, PromptId::point_anomaly};

inline constexpr std::size_t index_of(PromptId id) { return static_cast<std::size_t>(id); }
inline constexpr Modality modality_of(PromptId id) {
  return index_of(id) < 2 ? Modality::rgb : Modality::point;
}
inline constexpr State state_of(PromptId id) {
  return index_of(id) % 2 == 0 ? State::normal : State::anomaly;
}

/// Gradient block / embedding name, e.g. "e_point_anomaly".
inline std::string embedding_name(PromptId id) {
  static const std::array<const char*, 4> names = {"e_rgb_normal", "e_rgb_anomaly", "e_point_normal",
                                                   "e_point_anomaly"};
  return names[index_of(id)];
}

inline std::string prompt_name(PromptId id) { return embedding_name(id).substr(2); }

enum class PromptPosition { flag_learnable_object, flag_object_learnable, learnable_flag_object };

inline std::string to_string(PromptPosition p) {
  switch (p) {
    case PromptPosition::flag_learnable_object: return "flag-learnable-object";
    case PromptPosition::flag_object_learnable: return "flag-object-learnable";
    case PromptPosition::learnable_flag_object: return "learnable-flag-object";
  }
  return "?";
}

inline PromptPosition parse_prompt_position(std::string_view s) {
  for (auto p : {PromptPosition::flag_learnable_object, PromptPosition::flag_object_learnable,
                 PromptPosition::learnable_flag_object}) {
    if (s == to_string(p)) return p;
  }
  throw InputError("unknown prompt position '" + std::string(s) + "'");
}

struct PromptConfig {
  std::size_t n_normal = 14;
  std::size_t n_anomaly = 14;
  std::size_t token_dim = 64;
  PromptPosition position = PromptPosition::flag_learnable_object;
  std::size_t deep_length = 0;  // 0 disables deep prompts
  std::size_t deep_depth = 9;   // first encoder layer (1-based) receiving deep prompts
  std::size_t encoder_layers = 12;

  std::size_t deep_layer_count() const {
    return deep_length == 0 ? 0 : encoder_layers - deep_depth + 1;
  }

  void validate() const {
    if (n_normal == 0 || n_anomaly == 0) throw InputError("learnable prompt blocks must be non-empty");
    if (token_dim < 2) throw InputError("token_dim must be at least 2");
    if (encoder_layers == 0) throw InputError("encoder needs at least one layer");
    if (deep_length > 0 && (deep_depth < 1 || deep_depth > encoder_layers)) {
      throw InputError("deep prompt depth must lie in [1, encoder_layers]");
    }
  }
};

struct Slot {
  enum class Kind { flag, learnable, word };
  Kind kind;
  std::string word;       // vocabulary key for flag and word slots
  std::size_t count = 1;  // token count for learnable slots
};

struct PromptTemplate {
  Modality modality;
  State state;
  std::vector<Slot> slots;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : slots) n += s.kind == Slot::Kind::learnable ? s.count : 1;
    return n;
  }

  std::string describe() const {
    std::string out;
    for (const auto& s : slots) {
      if (!out.empty()) out += ' ';
      out += s.kind == Slot::Kind::learnable
                 ? "[" + std::string(state == State::normal ? "N" : "A") + " x" + std::to_string(s.count) + "]"
                 : "[" + s.word + "]";
    }
    return out;
  }
};

inline PromptTemplate make_template(Modality m, State st, const PromptConfig& cfg) {
  const Slot flag{Slot::Kind::flag, m == Modality::rgb ? "R_s" : "P_s"};
  const Slot learn{Slot::Kind::learnable, "", st == State::normal ? cfg.n_normal : cfg.n_anomaly};
  const Slot object{Slot::Kind::word, "object"};
  const Slot damaged{Slot::Kind::word, "damaged"};
  std::vector<Slot> tail;  // [damaged] object
  if (st == State::anomaly) tail.push_back(damaged);
  tail.push_back(object);

  PromptTemplate t{m, st, {}};
  switch (cfg.position) {
    case PromptPosition::flag_learnable_object:
      t.slots = {flag, learn};
      t.slots.insert(t.slots.end(), tail.begin(), tail.end());
      break;
    case PromptPosition::flag_object_learnable:
      t.slots = {flag};
      t.slots.insert(t.slots.end(), tail.begin(), tail.end());
      t.slots.push_back(learn);
      break;
    case PromptPosition::learnable_flag_object:
      t.slots = {learn, flag};
      t.slots.insert(t.slots.end(), tail.begin(), tail.end());
      break;
  }
  return t;
}

/// Deterministic embedding of a fixed vocabulary word.
inline Eigen::VectorXd fixed_word_embedding(std::string_view word, std::uint64_t seed, std::size_t dim) {
  Rng rng(derive_seed(seed, hash_string(word)));
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 0.02 * rng.normal();
  return v;
}

struct PromptBank {
  PromptConfig config;
  std::uint64_t seed = 0;
  std::array<PromptTemplate, 4> templates;
  std::array<Eigen::MatrixXd, 4> learnable;  // rows are tokens
  std::map<std::string, Eigen::VectorXd> fixed_vocab;
  std::vector<Eigen::MatrixXd> deep_prompts;  // one per encoder layer >= deep_depth

  const PromptTemplate& templ(PromptId id) const { return templates[index_of(id)]; }
  Eigen::MatrixXd& tokens(PromptId id) { return learnable[index_of(id)]; }
  const Eigen::MatrixXd& tokens(PromptId id) const { return learnable[index_of(id)]; }

  bool operator==(const PromptBank& o) const {
    if (seed != o.seed || fixed_vocab.size() != o.fixed_vocab.size() ||
        deep_prompts.size() != o.deep_prompts.size()) {
      return false;
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (learnable[i].rows() != o.learnable[i].rows() || learnable[i] != o.learnable[i]) return false;
    }
    for (std::size_t i = 0; i < deep_prompts.size(); ++i) {
      if (deep_prompts[i] != o.deep_prompts[i]) return false;
    }
    for (const auto& [k, v] : fixed_vocab) {
      auto it = o.fixed_vocab.find(k);
      if (it == o.fixed_vocab.end() || it->second != v) return false;
    }
    return true;
  }
};

inline PromptBank build_bank(const PromptConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PromptBank bank;
  bank.config = cfg;
  bank.seed = seed;
  const auto dim = static_cast<Eigen::Index>(cfg.token_dim);
  for (auto id : kAllPrompts) {
    bank.templates[index_of(id)] = make_template(modality_of(id), state_of(id), cfg);
    const std::size_t count = state_of(id) == State::normal ? cfg.n_normal : cfg.n_anomaly;
    Rng rng(derive_seed(seed, 100 + index_of(id)));
    Eigen::MatrixXd m(static_cast<Eigen::Index>(count), dim);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = 0.02 * rng.normal();
    bank.learnable[index_of(id)] = std::move(m);
  }
  for (const char* w : {"R_s", "P_s", "damaged", "object"}) {
    bank.fixed_vocab[w] = fixed_word_embedding(w, seed, cfg.token_dim);
  }
  Rng deep_rng(derive_seed(seed, 200));
  for (std::size_t l = 0; l < cfg.deep_layer_count(); ++l) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(cfg.deep_length), dim);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = 0.02 * deep_rng.normal();
    bank.deep_prompts.push_back(std::move(m));
  }
  return bank;
}

/// Token embeddings of one prompt in slot order.
inline std::vector<Eigen::VectorXd> prompt_tokens(const PromptBank& bank, PromptId id) {
  std::vector<Eigen::VectorXd> out;
  const auto& rows = bank.tokens(id);
  for (const auto& s : bank.templ(id).slots) {
    if (s.kind == Slot::Kind::learnable) {
      for (Eigen::Index r = 0; r < rows.rows(); ++r) out.emplace_back(rows.row(r).transpose());
    } else {
      out.push_back(bank.fixed_vocab.at(s.word));
    }
  }
  return out;
}

/// Position of the first learnable token within the prompt.
inline std::size_t learnable_offset(const PromptTemplate& t) {
  std::size_t pos = 0;
  for (const auto& s : t.slots) {
    if (s.kind == Slot::Kind::learnable) return pos;
    pos += 1;
  }
  return pos;
}

enum class Pooling { mean, last };

struct EncoderConfig {
  std::size_t n_layers = 12;
  std::size_t token_dim = 64;
  std::size_t embed_dim = 64;
  std::size_t max_tokens = 77;
  Pooling pooling = Pooling::mean;
  std::uint64_t seed = 7;
};

/// Frozen affine+tanh layer stack with positional embeddings, a linear output
/// projection and L2 normalization.
class StubTextEncoder {
 public:
  struct Trace {
    std::vector<Eigen::VectorXd> inputs;   // per layer, after deep-prompt mixing
    std::vector<Eigen::VectorXd> outputs;  // per layer, tanh activations
    Eigen::VectorXd projected;
    Eigen::VectorXd embedding;
  };

  explicit StubTextEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.n_layers == 0 || cfg.token_dim == 0 || cfg.embed_dim == 0) {
      throw InputError("encoder dimensions must be positive");
    }
    const auto td = static_cast<Eigen::Index>(cfg.token_dim);
    const auto ed = static_cast<Eigen::Index>(cfg.embed_dim);
    Rng rng(derive_seed(cfg.seed, 1));
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(cfg.token_dim));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      Eigen::MatrixXd w(td, td);
      Eigen::VectorXd b(td);
      for (Eigen::Index i = 0; i < td; ++i) {
        for (Eigen::Index j = 0; j < td; ++j) w(i, j) = w_scale * rng.normal();
        b[i] = 0.1 * rng.normal();
      }
      weights_.push_back(std::move(w));
      biases_.push_back(std::move(b));
    }
    projection_.resize(ed, td);
    for (Eigen::Index i = 0; i < ed; ++i)
      for (Eigen::Index j = 0; j < td; ++j) projection_(i, j) = w_scale * rng.normal();
    positional_.resize(static_cast<Eigen::Index>(cfg.max_tokens), td);
    for (Eigen::Index i = 0; i < positional_.rows(); ++i)
      for (Eigen::Index j = 0; j < td; ++j) positional_(i, j) = 0.01 * rng.normal();
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t embed_dim() const { return cfg_.embed_dim; }
  std::size_t token_dim() const { return cfg_.token_dim; }
  const std::vector<Eigen::MatrixXd>& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& biases() const { return biases_; }
  const Eigen::MatrixXd& projection() const { return projection_; }
  const Eigen::MatrixXd& positional() const { return positional_; }

  /// Pooled input vector of a token sequence (token + positional embedding).
  Eigen::VectorXd pool(std::span<const Eigen::VectorXd> tokens) const {
    if (tokens.empty()) throw InputError("cannot encode an empty prompt");
    if (tokens.size() > cfg_.max_tokens) throw InputError("prompt exceeds the encoder context length");
    if (cfg_.pooling == Pooling::last) {
      const auto last = static_cast<Eigen::Index>(tokens.size() - 1);
      return tokens.back() + positional_.row(last).transpose();
    }
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cfg_.token_dim));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      acc += tokens[t] + positional_.row(static_cast<Eigen::Index>(t)).transpose();
    }
    return acc / static_cast<double>(tokens.size());
  }

  /// `deep_means[j]` is mixed into layer `deep_from + j` (0-based) before its affine map.
  Eigen::VectorXd forward(const Eigen::VectorXd& pooled, std::span<const Eigen::VectorXd> deep_means,
                          std::size_t deep_from, Trace* trace = nullptr) const {
    Eigen::VectorXd x = pooled;
    if (trace) {
      trace->inputs.clear();
      trace->outputs.clear();
    }
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      if (!deep_means.empty() && l >= deep_from) x = 0.5 * (x + deep_means[l - deep_from]);
      if (trace) trace->inputs.push_back(x);
      x = (weights_[l] * x + biases_[l]).array().tanh().matrix();
      if (trace) trace->outputs.push_back(x);
    }
    const Eigen::VectorXd y = projection_ * x;
    const double norm = y.norm();
    if (!(norm > 0.0)) throw NumericError("text encoder produced a zero vector");
    Eigen::VectorXd e = y / norm;
    if (trace) {
      trace->projected = y;
      trace->embedding = e;
    }
    return e;
  }

  /// Returns d/d(pooled); accumulates d/d(deep_means[j]) into `deep_grads` when given.
  Eigen::VectorXd backward(const Trace& trace, const Eigen::VectorXd& grad_embedding,
                           std::size_t n_deep, std::size_t deep_from,
                           std::vector<Eigen::VectorXd>* deep_grads) const {
    const Eigen::VectorXd& e = trace.embedding;
    const double norm = trace.projected.norm();
    const Eigen::VectorXd gy = (grad_embedding - e * e.dot(grad_embedding)) / norm;
    Eigen::VectorXd gx = projection_.transpose() * gy;
    for (std::size_t l = cfg_.n_layers; l-- > 0;) {
      const Eigen::VectorXd& out = trace.outputs[l];
      const Eigen::VectorXd gh = gx.cwiseProduct((1.0 - out.array().square()).matrix());
      gx = weights_[l].transpose() * gh;
      if (n_deep > 0 && l >= deep_from) {
        if (deep_grads) (*deep_grads)[l - deep_from] += 0.5 * gx;
        gx *= 0.5;
      }
    }
    return gx;
  }

 private:
  EncoderConfig cfg_;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
  Eigen::MatrixXd projection_;
  Eigen::MatrixXd positional_;
};

namespace detail {

inline std::vector<Eigen::VectorXd> deep_means(const PromptBank& bank) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& m : bank.deep_prompts) out.emplace_back(m.colwise().mean().transpose());
  return out;
}

inline std::size_t deep_from(const PromptBank& bank) { return bank.config.deep_depth - 1; }

inline void check_dims(const PromptBank& bank, const StubTextEncoder& enc) {
  if (bank.config.token_dim != enc.token_dim()) throw InputError("prompt bank and encoder token_dim differ");
  if (!bank.deep_prompts.empty() && bank.config.encoder_layers != enc.config().n_layers) {
    throw InputError("deep prompts were built for a different encoder depth");
  }
}

}  // namespace detail

inline Eigen::VectorXd encode_prompt(const PromptBank& bank, PromptId id, const StubTextEncoder& enc) {
  detail::check_dims(bank, enc);
  const auto tokens = prompt_tokens(bank, id);
  const auto means = detail::deep_means(bank);
  return enc.forward(enc.pool(tokens), means, detail::deep_from(bank));
}

/// e_rgb^normal, e_rgb^anomaly, e_point^normal, e_point^anomaly.
using PromptEmbeddings = std::array<Eigen::VectorXd, 4>;

inline PromptEmbeddings encode_all(const PromptBank& bank, const StubTextEncoder& enc) {
  PromptEmbeddings out;
  for (auto id : kAllPrompts) out[index_of(id)] = encode_prompt(bank, id, enc);
  return out;
}

struct PromptGradients {
  std::array<Eigen::MatrixXd, 4> learnable;
  std::vector<Eigen::MatrixXd> deep;
};

/// Chain rule from gradients w.r.t. the four embeddings to the learnable rows
/// (and deep prompts when present). Missing embedding gradients may be empty.
inline PromptGradients encode_all_backward(const PromptBank& bank, const StubTextEncoder& enc,
                                           const std::array<Eigen::VectorXd, 4>& grad_embeddings) {
  detail::check_dims(bank, enc);
  const auto means = detail::deep_means(bank);
  const std::size_t from = detail::deep_from(bank);
  const auto td = static_cast<Eigen::Index>(bank.config.token_dim);

  PromptGradients g;
  std::vector<Eigen::VectorXd> deep_mean_grads(means.size(), Eigen::VectorXd::Zero(td));
  for (auto id : kAllPrompts) {
    const auto& rows = bank.tokens(id);
    g.learnable[index_of(id)] = Eigen::MatrixXd::Zero(rows.rows(), rows.cols());
    const auto& ge = grad_embeddings[index_of(id)];
    if (ge.size() == 0) continue;
    const auto tokens = prompt_tokens(bank, id);
    StubTextEncoder::Trace trace;
    enc.forward(enc.pool(tokens), means, from, &trace);
    const Eigen::VectorXd g_pooled = enc.backward(trace, ge, means.size(), from, &deep_mean_grads);

    const std::size_t offset = learnable_offset(bank.templ(id));
    const std::size_t n_tok = tokens.size();
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const std::size_t pos = offset + static_cast<std::size_t>(r);
      if (enc.config().pooling == Pooling::mean) {
        g.learnable[index_of(id)].row(r) = g_pooled.transpose() / static_cast<double>(n_tok);
      } else if (pos == n_tok - 1) {
        g.learnable[index_of(id)].row(r) = g_pooled.transpose();
      }
    }
  }
  for (std::size_t l = 0; l < bank.deep_prompts.size(); ++l) {
    const auto& m = bank.deep_prompts[l];
    g.deep.push_back(deep_mean_grads[l].transpose().replicate(m.rows(), 1) / static_cast<double>(m.rows()));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Persistence: bank.txt manifest plus one f64 MCLE tensor per learnable block.

inline void save_bank(const PromptBank& bank, const fs::path& dir) {
  std::ostringstream m;
  m << "zs3d-prompt-bank 1\n";
  m << "seed=" << bank.seed << "\n";
  m << "token_dim=" << bank.config.token_dim << "\n";
  m << "n_normal=" << bank.config.n_normal << "\n";
  m << "n_anomaly=" << bank.config.n_anomaly << "\n";
  m << "position=" << to_string(bank.config.position) << "\n";
  m << "deep_length=" << bank.config.deep_length << "\n";
  m << "deep_depth=" << bank.config.deep_depth << "\n";
  m << "encoder_layers=" << bank.config.encoder_layers << "\n";
  for (auto id : kAllPrompts) m << "template " << prompt_name(id) << " = " << bank.templ(id).describe() << "\n";
  write_file_atomic(dir / "bank.txt", m.str());

  auto matrix_tensor = [](const Eigen::MatrixXd& mat) {
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(mat.size()));
    for (Eigen::Index r = 0; r < mat.rows(); ++r)
      for (Eigen::Index c = 0; c < mat.cols(); ++c) v.push_back(mat(r, c));
    return EmbeddingTensor::f64({static_cast<std::uint64_t>(mat.rows()), static_cast<std::uint64_t>(mat.cols())},
                                std::move(v));
  };
  for (auto id : kAllPrompts) save_mcle(dir / ("learnable_" + prompt_name(id) + ".mcle"), matrix_tensor(bank.tokens(id)));
  for (std::size_t l = 0; l < bank.deep_prompts.size(); ++l) {
    save_mcle(dir / ("deep" + std::to_string(l) + ".mcle"), matrix_tensor(bank.deep_prompts[l]));
  }
}

inline PromptBank load_bank(const fs::path& dir) {
  std::istringstream in(read_file(dir / "bank.txt"));
  std::string line;
  std::getline(in, line);
  if (line != "zs3d-prompt-bank 1") throw InputError((dir / "bank.txt").string() + ": not a prompt bank manifest");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    if (line.starts_with("template ")) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto num = [&](const std::string& k) -> std::uint64_t {
    auto it = kv.find(k);
    if (it == kv.end()) throw InputError("prompt bank manifest lacks '" + k + "'");
    return std::stoull(it->second);
  };
  PromptConfig cfg;
  cfg.token_dim = num("token_dim");
  cfg.n_normal = num("n_normal");
  cfg.n_anomaly = num("n_anomaly");
  cfg.position = parse_prompt_position(kv["position"]);
  cfg.deep_length = num("deep_length");
  cfg.deep_depth = num("deep_depth");
  cfg.encoder_layers = num("encoder_layers");
  PromptBank bank = build_bank(cfg, num("seed"));

  auto load_matrix = [](const fs::path& p, Eigen::MatrixXd& dst) {
    const auto t = load_mcle(p);
    if (t.ndim() != 2 || static_cast<Eigen::Index>(t.dim(0)) != dst.rows() ||
        static_cast<Eigen::Index>(t.dim(1)) != dst.cols()) {
      throw InputError(p.string() + ": shape does not match the bank manifest");
    }
    const auto v = t.to_f64();
    for (Eigen::Index r = 0; r < dst.rows(); ++r)
      for (Eigen::Index c = 0; c < dst.cols(); ++c) dst(r, c) = v[static_cast<std::size_t>(r * dst.cols() + c)];
  };
  for (auto id : kAllPrompts) load_matrix(dir / ("learnable_" + prompt_name(id) + ".mcle"), bank.tokens(id));
  for (std::size_t l = 0; l < bank.deep_prompts.size(); ++l) {
    load_matrix(dir / ("deep" + std::to_string(l) + ".mcle"), bank.deep_prompts[l]);
  }
  return bank;
}

}  // namespace zs3d
