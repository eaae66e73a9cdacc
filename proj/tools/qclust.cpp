#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qclust/qclust.hpp"

namespace {

std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& c : s)
    if (c == '_') c = '-';
  return "--" + s;
}

// Every config key becomes a `--key-name` override applied after --config.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "key = value configuration file");
    for (const auto& key : qclust::PipelineConfig::keys()) {
      if (key == "out_dir") continue;
      app.add_option_function<std::string>(
          flag_name(key), [this, key](const std::string& v) { overrides[key] = v; }, "config key " + key);
    }
    app.add_option_function<std::string>(
        "--out", [this](const std::string& v) { overrides["out_dir"] = v; }, "output directory");
  }

  qclust::PipelineConfig resolve() const {
    auto config = config_path.empty() ? qclust::PipelineConfig{} : qclust::PipelineConfig::load(config_path);
    for (const auto& [k, v] : overrides) config.set(k, v);
    config.validate();
    return config;
  }
};

std::vector<qclust::FeatureKind> parse_methods(const std::vector<std::string>& names) {
  std::vector<qclust::FeatureKind> out;
  for (const auto& n : names) out.push_back(qclust::parse_feature_kind(n));
  if (out.empty()) out.assign(std::begin(qclust::kAllKinds), std::end(qclust::kAllKinds));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-series feature clustering of household load curves"};
  app.require_subcommand(1);

  qclust::RunOptions run;
  std::size_t threads = 1;
  ConfigFlags flags;
  std::vector<std::string> methods;
  bool no_chi_squared = false;

  auto common = [&](CLI::App* sub) {
    flags.attach(*sub);
    sub->add_option("--threads", threads, "worker threads (0 = hardware concurrency)");
    sub->add_flag("--force", run.force, "accept inputs produced under a different config hash");
  };

  auto* extract = app.add_subcommand("extract", "parse readings and compute AC, PAC and QC features");
  common(extract);

  auto* cluster = app.add_subcommand("cluster", "build dissimilarities, agglomerate and cut");
  common(cluster);
  cluster->add_option("--method", methods, "AC, PAC or QC (repeatable; default all)");

  auto* evaluate = app.add_subcommand("evaluate", "compare partitions and test against external labels");
  common(evaluate);
  evaluate->add_option("--method", methods, "AC, PAC or QC (repeatable; default all)");
  evaluate->add_flag("--no-chi-squared", no_chi_squared, "skip the label contingency tests");

  auto* importance = app.add_subcommand("importance", "explain clusters with a classification tree");
  common(importance);
  importance->add_option("--method", methods, "AC, PAC or QC (repeatable; default all)");

  qclust::SynthParams synth_params;
  std::string synth_output;
  auto* synth = app.add_subcommand("synth", "generate a labelled synthetic population");
  synth->add_option("--output", synth_output, "readings CSV to write")->required();
  synth->add_option("--series-per-class", synth_params.series_per_class);
  synth->add_option("--days", synth_params.days);
  synth->add_option("--seed", synth_params.seed);
  synth->add_option("--noise-sd", synth_params.noise_sd);
  synth->add_option("--missing-fraction", synth_params.missing_fraction);
  synth->add_option("--degenerate-fraction", synth_params.degenerate_fraction);
  synth->add_option("--label-strength", synth_params.label_strength);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    run.threads = qclust::resolve_threads(threads);
    run.chi_squared = !no_chi_squared;
    if (synth->parsed()) {
      const auto pop = qclust::cmd_synth(synth_params, synth_output);
      std::cout << "wrote " << pop.series.size() << " series to " << synth_output << '\n';
      return 0;
    }
    const auto config = flags.resolve();
    if (extract->parsed()) {
      const auto r = qclust::cmd_extract(config, run);
      std::cout << "kept " << r.kept << " of " << r.parsed << " series (K = " << r.k_max << ")\n";
    } else if (cluster->parsed()) {
      for (const auto kind : parse_methods(methods)) {
        const auto r = qclust::cmd_cluster(config, kind, run);
        std::cout << qclust::to_string(kind) << ": " << r.partition.k << " clusters, "
                  << r.partition.typical_count() << " typical\n";
      }
    } else if (evaluate->parsed()) {
      const auto r = qclust::cmd_evaluate(config, parse_methods(methods), run);
      for (const auto& [pair, v] : r.ari) std::cout << "ARI " << pair << " = " << v << '\n';
      for (const auto& [m, c] : r.chi_squared)
        std::cout << m << " chi-squared = " << c.statistic << " (df " << c.df << ", p " << c.p_value << ")\n";
    } else if (importance->parsed()) {
      for (const auto kind : parse_methods(methods)) {
        const auto r = qclust::cmd_importance(config, kind, run);
        std::cout << qclust::to_string(kind) << ": CV error " << r.cv.error << '\n';
      }
    }
    return 0;
  } catch (const qclust::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
}
