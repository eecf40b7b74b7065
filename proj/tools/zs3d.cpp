// zs3d: command-line front end of the pipeline.
// Exit codes: 0 success, 2 input error, 3 numeric failure.

#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "zs3d/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> seed, eta, epochs, views, lambda3, normal, anomalous, kinds;

  zs3d::PipelineConfig resolve() const {
    zs3d::PipelineConfig cfg = config.empty() ? zs3d::PipelineConfig{} : zs3d::PipelineConfig::load(config);
    auto apply = [&](const char* key, const std::optional<std::string>& v) {
      if (v) cfg.set(key, *v);
    };
    apply("seed", seed);
    apply("eta", eta);
    apply("epochs", epochs);
    apply("views", views);
    apply("lambda3", lambda3);
    apply("n_normal", normal);
    apply("n_anomalous", anomalous);
    apply("kinds", kinds);
    return cfg;
  }
};

void add_config(CLI::App* app, Overrides& o) { app->add_option("--config", o.config, "key=value config file"); }

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees many ~128 KiB maps per sample; keep them on the
  // heap instead of round-tripping through mmap and trimming.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  CLI::App app{"Zero-shot 3D anomaly detection pipeline"};
  app.require_subcommand(1);
  Overrides o;
  std::string out, dataset, checkpoint, results, provider, branch = "final";
  std::vector<std::string> maps;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_config(synth, o);
  synth->add_option("--seed", o.seed);
  synth->add_option("--normal", o.normal, "number of normal samples");
  synth->add_option("--anomalous", o.anomalous, "number of anomalous samples");
  synth->add_option("--kinds", o.kinds, "comma-separated anomaly kinds (geometric,color)");
  synth->add_option("--views", o.views, "view list, e.g. x-45,x0,y15");
  synth->add_option("--out", out)->required();

  auto* render = app.add_subcommand("render", "render every sample into its views");
  add_config(render, o);
  render->add_option("--dataset", dataset)->required();

  auto* train = app.add_subcommand("train", "learn the prompt tokens");
  add_config(train, o);
  train->add_option("--dataset", dataset)->required();
  train->add_option("--seed", o.seed);
  train->add_option("--epochs", o.epochs);
  train->add_option("--lambda3", o.lambda3);
  train->add_option("--provider", provider, "embedding service URL (default: dataset files)");
  train->add_option("--out", out)->required();

  auto* score = app.add_subcommand("score", "score every sample with a checkpoint");
  add_config(score, o);
  score->add_option("--dataset", dataset)->required();
  score->add_option("--checkpoint", checkpoint)->required();
  score->add_option("--eta", o.eta);
  score->add_option("--provider", provider, "embedding service URL (default: dataset files)");
  score->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "compute I-AUROC, AP, P-AUROC and AUPRO");
  add_config(eval, o);
  eval->add_option("--results", results)->required();
  eval->add_option("--dataset", dataset)->required();
  eval->add_option("--branch", branch, "final, rgb or point");
  eval->add_option("--out", out, "directory for metrics.txt (default: results)");

  auto* plot = app.add_subcommand("plot", "write heat-map PPMs of score maps");
  plot->add_option("maps", maps, "map files (.mcle)")->required();
  plot->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      zs3d::cmd_synth(o.resolve(), out, std::cout);
    } else if (*render) {
      o.resolve();
      zs3d::cmd_render(dataset, std::cout);
    } else if (*train) {
      zs3d::cmd_train(dataset, o.resolve(), out, std::cout, provider);
    } else if (*score) {
      zs3d::cmd_score(dataset, checkpoint, o.resolve(), out, std::cout, provider);
    } else if (*eval) {
      zs3d::cmd_eval(results, dataset, o.resolve(), zs3d::parse_eval_branch(branch), out.empty() ? results : out,
                     std::cout);
    } else if (*plot) {
      std::vector<zs3d::fs::path> paths(maps.begin(), maps.end());
      zs3d::cmd_plot(paths, out, std::cout);
    }
  } catch (const zs3d::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const zs3d::InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
