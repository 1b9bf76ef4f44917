#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mtadapt/commands.hpp"
#include "mtadapt/gradcheck.hpp"

namespace {

using namespace mtadapt;

std::vector<std::uint64_t> parse_u64_csv(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

std::vector<std::size_t> parse_size_csv(const std::string& csv) {
  std::vector<std::size_t> out;
  for (std::uint64_t v : parse_u64_csv(csv)) out.push_back(static_cast<std::size_t>(v));
  return out;
}

ExperimentConfig load_with_overrides(const std::string& config_path, const std::string& seeds,
                                     const std::string& variant) {
  ExperimentConfig config = load_config_file(config_path);
  if (!seeds.empty()) {
    config.seeds = parse_u64_csv(seeds);
    if (config.seeds.empty()) throw ConfigError("--seeds: empty list");
  }
  if (!variant.empty()) {
    config.adapter.variant = parse_variant(variant);
  }
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("MTADAPT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_max_threads(n);
  }

  CLI::App app{"Matrix-transformation low-rank adapter toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", seeds, variant, ranks;
  std::string ckpt_in, ckpt_out;

  auto* train = app.add_subcommand("train", "train one run per seed and aggregate");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--seeds", seeds, "comma-separated seed override");
  train->add_option("--variant", variant, "adapter variant override");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on its task's test split");
  eval->add_option("--ckpt", ckpt_in, "checkpoint path")->required();

  auto* merge = app.add_subcommand("merge", "fold adapter deltas into base weights");
  merge->add_option("--ckpt", ckpt_in, "input checkpoint")->required();
  merge->add_option("--out-ckpt", ckpt_out, "output checkpoint")->required();

  auto* gradcheck = app.add_subcommand("grad-check",
                                       "finite-difference check of all gradient paths");
  gradcheck->add_option("--config", config_path, "optional config (restricts the variant)");
  double gc_tol = 1e-4;
  gradcheck->add_option("--tolerance", gc_tol, "max relative error");

  auto* sweep = app.add_subcommand("sweep", "rank sweep over adapter variants");
  sweep->add_option("--config", config_path, "experiment config (JSON)")->required();
  sweep->add_option("--out", out_dir, "output directory");
  sweep->add_option("--ranks", ranks, "comma-separated ranks")->required();
  sweep->add_option("--variant", variant, "restrict to one variant");
  sweep->add_option("--seeds", seeds, "comma-separated seed override");

  auto* params = app.add_subcommand("param-count", "adapter parameter accounting");
  params->add_option("--config", config_path, "experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      run_train(load_with_overrides(config_path, seeds, variant), out_dir, std::cout);
    } else if (eval->parsed()) {
      run_eval(ckpt_in, std::cout);
    } else if (merge->parsed()) {
      run_merge(ckpt_in, ckpt_out, std::cout);
    } else if (gradcheck->parsed()) {
      GradCheckOptions options;
      options.tolerance = gc_tol;
      if (!config_path.empty()) {
        options.only_variant = load_config_file(config_path).adapter.variant;
      }
      const GradCheckReport report = run_grad_checks(options);
      print_grad_check_report(std::cout, report);
      if (!report.all_pass) {
        for (const auto& row : report.rows) {
          if (!row.pass) {
            std::cerr << "grad-check failed: " << row.component << " tensor " << row.tensor
                      << " rel err " << row.max_rel_err << "\n";
          }
        }
        return 1;
      }
    } else if (sweep->parsed()) {
      ExperimentConfig config = load_with_overrides(config_path, seeds, "");
      if (ranks.empty()) throw ConfigError("--ranks: empty list");
      std::vector<AdapterVariant> variants;
      if (!variant.empty()) {
        variants.push_back(parse_variant(variant));
      } else {
        variants = {AdapterVariant::kLora, AdapterVariant::kShim, AdapterVariant::kIcfm,
                    AdapterVariant::kCtcm, AdapterVariant::kDtsm};
      }
      run_sweep(config, parse_size_csv(ranks), variants, out_dir, std::cout);
    } else if (params->parsed()) {
      run_param_count(load_config_file(config_path), std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
