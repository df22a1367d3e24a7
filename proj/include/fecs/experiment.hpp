#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fecs/pretrain.hpp"
#include "fecs/sgld.hpp"
#include "fecs/task.hpp"
#include "fecs/transfer.hpp"

namespace fecs {

// Task description as it appears in the experiment config file.
struct TaskConfig {
  TaskKind kind = TaskKind::cluster_classification;
  std::uint64_t seed = 0;
  // cluster
  int n_classes = 16;
  int dim = 8;
  double radius = 6.0;
  double class_sigma = 1.0;
  int pretrain_classes = 12;
  int downstream_classes = 4;
  // gaussian kinds
  double sigma0 = 1.0, sigma1 = 1.0;  // x-sigmas (covariate) or y-sigmas (nuisance)
  std::vector<double> mu0, mu1;
  ModelSpec teacher_spec;
  std::vector<double> teacher_params;

  nlohmann::json to_json() const;
  static TaskConfig from_json(const nlohmann::json& j);
};

TaskFamily build_task(const TaskConfig& tc);

struct SweepSpec {
  SweepAxis axis = SweepAxis::learning_rate;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  TaskConfig task;
  ModelSpec model;
  int pretrain_count = 2400;
  std::uint64_t data_seed = 0;
  PretrainConfig pretrain;
  SweepSpec sweep;
  SgldConfig sgld;
  FinetuneConfig finetune;
  int full_eval_per_class = 100;
  double split_fraction = 0.8;
  std::uint64_t full_eval_seed = 0;
  FewShotProtocol fewshot;
  int eval_last_k = 1;  // checkpoints per trajectory given the full evaluation
  std::string output_dir = "run";

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& p);
  void validate() const;
};

// Product-moment correlation. Throws on length mismatch, fewer than two
// points, or zero variance.
double pearson(std::span<const double> xs, std::span<const double> ys);

struct CorrelationReport {
  std::string metric_name;
  std::vector<std::pair<double, double>> pairs;  // (metric value, accuracy)
  double pearson_r = 0.0;
  TransferProtocol protocol = TransferProtocol::full;
  nlohmann::json to_json() const;
};

CorrelationReport make_correlation_report(const std::string& metric_name,
                                          TransferProtocol protocol,
                                          std::vector<std::pair<double, double>> pairs);

// Per-checkpoint results within one sweep cell. NaN marks a metric that was
// not evaluated for that checkpoint.
struct CkptRecord {
  std::string id;
  std::string file;
  long step = 0;
  double train_loss = 0.0;
  double wbic = std::numeric_limits<double>::quiet_NaN();
  double llc = std::numeric_limits<double>::quiet_NaN();
  double wbic_se = std::numeric_limits<double>::quiet_NaN();
  double full_acc = std::numeric_limits<double>::quiet_NaN();
  double full_train_acc = std::numeric_limits<double>::quiet_NaN();
  double fewshot_acc = std::numeric_limits<double>::quiet_NaN();
};

struct CellRecord {
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string status;  // "ok" or error text
  std::string hash;    // config hash governing idempotent replays
  std::vector<CkptRecord> ckpts;
};

struct RunManifest {
  SweepAxis axis = SweepAxis::learning_rate;
  std::vector<CellRecord> cells;
  std::vector<CorrelationReport> correlations;
  int failed_cells = 0;
};

// Which pipeline stages a pass should execute.
struct StageMask {
  bool pretrain = true;
  bool wbic = true;
  bool full = true;
  bool fewshot = true;
};

struct CellFilter {  // from the --cell flag; empty = all cells
  std::optional<double> value;
  std::optional<std::uint64_t> seed;
  bool matches(double v, std::uint64_t s) const {
    return (!value || *value == v) && (!seed || *seed == s);
  }
};

// Full pipeline: sweep -> per-checkpoint WBIC -> transfer evals ->
// correlations and reports, all under config.output_dir. Cells whose stored
// hash matches and whose requested metrics are present are not recomputed.
RunManifest run_experiment(const ExperimentConfig& config, int workers = 0,
                           const StageMask& stages = {},
                           const CellFilter& filter = {});

// Aggregation over whatever cells exist on disk: rows.csv, correlations.json,
// plot CSVs and SVG scatters.
RunManifest load_run(const ExperimentConfig& config);
void write_reports(const ExperimentConfig& config, RunManifest& manifest);
void emit_plot_data(const RunManifest& manifest, const ExperimentConfig& config,
                    const std::filesystem::path& out_dir);

std::string rows_csv(const RunManifest& manifest);

}  // namespace fecs
