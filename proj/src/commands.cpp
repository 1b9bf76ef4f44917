#include "mtadapt/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"

#include "mtadapt/checkpoint.hpp"

namespace mtadapt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

json aggregate_to_json(const MetricAggregate& a) {
  json j;
  j["values"] = a.values;
  j["median"] = a.median;
  j["mean"] = a.mean;
  j["std"] = a.std_dev;
  return j;
}

}  // namespace

MetricAggregate aggregate_metric(const std::vector<double>& values) {
  MetricAggregate a;
  a.values = values;
  if (values.empty()) return a;
  const double n = static_cast<double>(values.size());
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double sq = 0.0;
  for (double v : values) sq += (v - a.mean) * (v - a.mean);
  a.std_dev = std::sqrt(sq / n);
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  a.median = sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return a;
}

TrainReport run_train(const ExperimentConfig& config, const std::string& out_dir,
                      std::ostream& log) {
  config.validate();
  fs::create_directories(out_dir);

  TrainReport report;
  for (std::uint64_t seed : config.seeds) {
    ExperimentConfig run_config = config;
    run_config.train.seed = seed;
    run_config.seeds = {seed};

    Model model = build_experiment_model(run_config, seed);
    if (report.runs.empty()) {
      report.trainable_params = model.trainable_param_count();
      report.total_params = model.total_param_count();
    }
    const Dataset data = build_experiment_dataset(run_config, seed);

    const std::string trace_path =
        (fs::path(out_dir) / ("seed" + std::to_string(seed) + ".trace.jsonl")).string();
    std::ofstream trace(trace_path, std::ios::trunc);
    if (!trace) throw IoError("cannot open '" + trace_path + "' for writing");

    log << "seed " << seed << ": training (" << data.train.size() << " examples, "
        << run_config.train.epochs << " epochs)\n";
    TrainResult result = train_loop(model, data, run_config.train, &trace);

    const EvalMetrics test = evaluate(result.best_model, data.test);
    SeedRunResult run;
    run.seed = seed;
    run.test_accuracy = test.accuracy;
    run.test_mcc = test.mcc;
    run.best_val_metric = result.best_metric;
    run.best_epoch = result.best_epoch;
    run.checkpoint_path =
        (fs::path(out_dir) / ("seed" + std::to_string(seed) + ".ckpt")).string();
    save_checkpoint(run.checkpoint_path, result.best_model, canonical_config_text(run_config));
    log << "seed " << seed << ": test accuracy " << fmt(test.accuracy) << ", mcc "
        << fmt(test.mcc) << "\n";
    report.runs.push_back(std::move(run));
  }

  std::vector<double> accs, mccs;
  for (const auto& r : report.runs) {
    accs.push_back(r.test_accuracy);
    mccs.push_back(r.test_mcc);
  }
  report.accuracy = aggregate_metric(accs);
  report.mcc = aggregate_metric(mccs);
  report.headline_metric = "mcc";
  report.headline_stat = config.report;
  const MetricAggregate& head = report.mcc;
  report.headline_value = config.report == "mean" ? head.mean : head.median;
  report.headline_std = head.std_dev;

  json j;
  j["task"] = config.task.kind;
  j["variant"] = variant_name(config.adapter.variant);
  j["profile"] = profile_name(config.profile);
  j["rank"] = config.adapter.rank;
  j["seeds"] = config.seeds;
  j["trainable_params"] = report.trainable_params;
  j["total_params"] = report.total_params;
  j["metrics"]["accuracy"] = aggregate_to_json(report.accuracy);
  j["metrics"]["mcc"] = aggregate_to_json(report.mcc);
  j["headline"]["metric"] = report.headline_metric;
  j["headline"]["stat"] = report.headline_stat;
  j["headline"]["value"] = report.headline_value;
  j["headline"]["std"] = report.headline_std;
  {
    std::ofstream jf((fs::path(out_dir) / "report.json").string(), std::ios::trunc);
    jf << j.dump(2) << "\n";
  }
  {
    std::ofstream tf((fs::path(out_dir) / "report.txt").string(), std::ios::trunc);
    tf << "task=" << config.task.kind << " variant=" << variant_name(config.adapter.variant)
       << " profile=" << profile_name(config.profile) << " rank=" << config.adapter.rank
       << " seeds=" << config.seeds.size() << "\n";
    tf << "trainable_params=" << report.trainable_params
       << " total_params=" << report.total_params << "\n";
    tf << report.headline_metric << " (" << report.headline_stat << ") = "
       << fmt(report.headline_value) << " +/- " << fmt(report.headline_std) << "\n";
    tf << "accuracy: median=" << fmt(report.accuracy.median)
       << " mean=" << fmt(report.accuracy.mean) << " std=" << fmt(report.accuracy.std_dev)
       << "\n";
    tf << "mcc:      median=" << fmt(report.mcc.median) << " mean=" << fmt(report.mcc.mean)
       << " std=" << fmt(report.mcc.std_dev) << "\n";
    for (const auto& r : report.runs) {
      tf << "seed " << r.seed << ": accuracy=" << fmt(r.test_accuracy)
         << " mcc=" << fmt(r.test_mcc) << " best_epoch=" << r.best_epoch << "\n";
    }
  }
  log << report.headline_metric << " (" << report.headline_stat << ") = "
      << fmt(report.headline_value) << " +/- " << fmt(report.headline_std) << "\n";
  return report;
}

EvalReport run_eval(const std::string& checkpoint_path, std::ostream& log) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);
  if (loaded.experiment_json.empty()) {
    throw ConfigError("checkpoint has no embedded experiment config to rebuild the task");
  }
  const ExperimentConfig config = parse_experiment_config(json::parse(loaded.experiment_json));
  if (config.seeds.size() != 1) {
    throw ConfigError("embedded config must pin exactly one seed for eval");
  }
  const Dataset data = build_experiment_dataset(config, config.seeds[0]);
  const EvalMetrics m = evaluate(loaded.model, data.test);
  EvalReport report;
  report.accuracy = m.accuracy;
  report.mcc = m.mcc;
  report.count = m.count;
  log << "eval on " << m.count << " test examples: accuracy " << fmt(m.accuracy) << ", mcc "
      << fmt(m.mcc) << "\n";
  return report;
}

void run_merge(const std::string& checkpoint_in, const std::string& checkpoint_out,
               std::ostream& log) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint_in);
  if (loaded.model.merged) {
    throw ConfigError("checkpoint '" + checkpoint_in + "' is already merged");
  }
  if (!loaded.model.has_adapters()) {
    throw ConfigError("checkpoint '" + checkpoint_in + "' has no adapters to merge");
  }
  merge_all(loaded.model);
  save_checkpoint(checkpoint_out, loaded.model, loaded.experiment_json,
                  /*include_adapters=*/false);
  log << "merged " << checkpoint_in << " -> " << checkpoint_out << " ("
      << loaded.model.named_tensors(false).size() << " base tensors)\n";
}

SweepReport run_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& ranks,
                      const std::vector<AdapterVariant>& variants, const std::string& out_dir,
                      std::ostream& log) {
  if (ranks.empty()) throw ConfigError("sweep: ranks list must be nonempty");
  if (variants.empty()) throw ConfigError("sweep: variants list must be nonempty");
  fs::create_directories(out_dir);

  SweepReport report;
  for (AdapterVariant variant : variants) {
    for (std::size_t rank : ranks) {
      SweepCell cell;
      cell.variant = variant_name(variant);
      cell.rank = rank;
      try {
        ExperimentConfig cell_config = config;
        cell_config.adapter.variant = variant;
        cell_config.adapter.rank = rank;
        cell_config.validate();
        const std::string cell_dir =
            (fs::path(out_dir) / (cell.variant + "_r" + std::to_string(rank))).string();
        log << "sweep cell " << cell.variant << " r=" << rank << "\n";
        const TrainReport tr = run_train(cell_config, cell_dir, log);
        cell.trainable_params = tr.trainable_params;
        cell.headline_value = tr.headline_value;
        cell.headline_std = tr.headline_std;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
        log << "sweep cell " << cell.variant << " r=" << rank << " FAILED: " << e.what()
            << "\n";
      }
      report.cells.push_back(std::move(cell));
    }
  }

  {
    std::ofstream jf((fs::path(out_dir) / "sweep.jsonl").string(), std::ios::trunc);
    for (const auto& c : report.cells) {
      json j;
      j["variant"] = c.variant;
      j["rank"] = c.rank;
      j["trainable_params"] = c.trainable_params;
      j["value"] = c.headline_value;
      j["std"] = c.headline_std;
      j["ok"] = c.ok;
      if (!c.ok) j["error"] = c.error;
      jf << j.dump() << "\n";
    }
  }
  {
    std::ofstream tf((fs::path(out_dir) / "sweep.txt").string(), std::ios::trunc);
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s %-6s %-16s %-12s %-12s %s\n", "variant", "rank",
                  "trainable", "value", "std", "status");
    tf << line;
    for (const auto& c : report.cells) {
      std::snprintf(line, sizeof(line), "%-8s %-6zu %-16zu %-12.6f %-12.6f %s\n",
                    c.variant.c_str(), c.rank, c.trainable_params, c.headline_value,
                    c.headline_std, c.ok ? "ok" : c.error.c_str());
      tf << line;
    }
  }
  return report;
}

void run_param_count(const ExperimentConfig& config, std::ostream& out) {
  config.validate();
  Model model = build_experiment_model(config, config.seeds.front());
  char line[160];
  std::snprintf(line, sizeof(line), "%-24s %-10s %12s\n", "site", "variant", "params");
  out << line;
  for (const auto& [site, p] : model.adapters) {
    std::snprintf(line, sizeof(line), "%-24s %-10s %12zu\n", site.c_str(),
                  variant_name(p.config.variant),
                  param_count(p.config, p.out_dim(), p.in_dim()));
    out << line;
  }
  for (const auto& [site, p] : model.merged_adapters) {
    std::snprintf(line, sizeof(line), "%-24s %-10s %12zu\n", site.c_str(),
                  (std::string("merged/") + variant_name(p.config.variant)).c_str(),
                  param_count_merged(p.config, p.d, p.k, p.n_enabled()));
    out << line;
  }
  const std::size_t trainable = model.trainable_param_count();
  const std::size_t total = model.total_param_count();
  out << "trainable: " << trainable << " / " << total << " ("
      << fmt(100.0 * static_cast<double>(trainable) / static_cast<double>(total))
      << "% of all parameters)\n";
}

}  // namespace mtadapt
