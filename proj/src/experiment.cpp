#include "fecs/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "fecs/io.hpp"
#include "fecs/reduce.hpp"

namespace fecs {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json opt_num(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}
double num_opt(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return kNaN;
  return j.at(key).get<double>();
}
}  // namespace

nlohmann::json TaskConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  switch (kind) {
    case TaskKind::cluster_classification:
      j["kind"] = "cluster_classification";
      j["n_classes"] = n_classes;
      j["dim"] = dim;
      j["radius"] = radius;
      j["class_sigma"] = class_sigma;
      j["pretrain_classes"] = pretrain_classes;
      j["downstream_classes"] = downstream_classes;
      break;
    case TaskKind::gaussian_covariate_shift:
      j["kind"] = "gaussian_covariate_shift";
      j["mu0"] = mu0;
      j["mu1"] = mu1;
      j["sigma0"] = sigma0;
      j["sigma1"] = sigma1;
      j["teacher_spec"] = spec_to_json(teacher_spec);
      j["teacher_params"] = teacher_params;
      break;
    case TaskKind::gaussian_nuisance:
      j["kind"] = "gaussian_nuisance";
      j["sigma0"] = sigma0;
      j["sigma1"] = sigma1;
      j["teacher_spec"] = spec_to_json(teacher_spec);
      j["teacher_params"] = teacher_params;
      break;
  }
  return j;
}

TaskConfig TaskConfig::from_json(const nlohmann::json& j) {
  TaskConfig t;
  const std::string kind = j.at("kind");
  t.seed = j.value("seed", 0);
  if (kind == "cluster_classification") {
    t.kind = TaskKind::cluster_classification;
    t.n_classes = j.at("n_classes");
    t.dim = j.at("dim");
    t.radius = j.at("radius");
    t.class_sigma = j.at("class_sigma");
    t.pretrain_classes = j.at("pretrain_classes");
    t.downstream_classes = j.at("downstream_classes");
  } else if (kind == "gaussian_covariate_shift" || kind == "gaussian_nuisance") {
    t.kind = kind == "gaussian_nuisance" ? TaskKind::gaussian_nuisance
                                         : TaskKind::gaussian_covariate_shift;
    t.sigma0 = j.at("sigma0");
    t.sigma1 = j.at("sigma1");
    if (t.kind == TaskKind::gaussian_covariate_shift) {
      t.mu0 = j.at("mu0").get<std::vector<double>>();
      t.mu1 = j.at("mu1").get<std::vector<double>>();
    }
    t.teacher_spec = spec_from_json(j.at("teacher_spec"));
    t.teacher_params = j.at("teacher_params").get<std::vector<double>>();
  } else {
    throw std::invalid_argument("unknown task kind: " + kind);
  }
  return t;
}

TaskFamily build_task(const TaskConfig& tc) {
  switch (tc.kind) {
    case TaskKind::cluster_classification:
      return make_cluster_task(tc.n_classes, tc.dim, tc.radius, tc.class_sigma,
                               tc.pretrain_classes, tc.downstream_classes, tc.seed);
    case TaskKind::gaussian_covariate_shift: {
      ParamVector p;
      p.values = tc.teacher_params;
      p.backbone_boundary = tc.teacher_spec.backbone_param_count();
      return make_covariate_shift_task(tc.mu0, tc.sigma0, tc.mu1, tc.sigma1,
                                       tc.teacher_spec, p, tc.seed);
    }
    case TaskKind::gaussian_nuisance: {
      ParamVector p;
      p.values = tc.teacher_params;
      p.backbone_boundary = tc.teacher_spec.backbone_param_count();
      return make_nuisance_task(tc.sigma0, tc.sigma1, tc.teacher_spec, p, tc.seed);
    }
  }
  throw std::invalid_argument("build_task: bad kind");
}

namespace {

nlohmann::json sgld_to_json(const SgldConfig& c) {
  nlohmann::json j;
  j["step_size"] = c.step_size;
  j["chain_length"] = c.chain_length;
  j["burn_in"] = c.burn_in;
  j["batch_size"] = c.batch_size;
  j["full_batch_threshold"] = c.full_batch_threshold;
  j["gamma"] = c.gamma;
  j["beta"] = c.beta.has_value() ? nlohmann::json(*c.beta) : nlohmann::json("auto");
  j["chains"] = c.chains;
  j["seed"] = c.seed;
  j["thin"] = c.thin;
  return j;
}

SgldConfig sgld_from_json(const nlohmann::json& j) {
  SgldConfig c;
  c.step_size = j.at("step_size");
  c.chain_length = j.at("chain_length");
  c.burn_in = j.at("burn_in");
  c.batch_size = j.value("batch_size", 2048);
  c.full_batch_threshold = j.value("full_batch_threshold", 4096);
  c.gamma = j.at("gamma");
  if (j.at("beta").is_string()) {
    if (j.at("beta") != "auto")
      throw std::invalid_argument("sgld.beta must be a number or \"auto\"");
  } else {
    c.beta = j.at("beta").get<double>();
  }
  c.chains = j.at("chains");
  c.seed = j.at("seed");
  c.thin = j.value("thin", 1);
  return c;
}

nlohmann::json finetune_to_json(const FinetuneConfig& c) {
  return {{"head_lr", c.head_lr},       {"backbone_lr", c.backbone_lr},
          {"steps", c.steps},           {"batch_size", c.batch_size},
          {"l2", c.l2},                 {"seed", c.seed}};
}

FinetuneConfig finetune_from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.head_lr = j.at("head_lr");
  c.backbone_lr = j.at("backbone_lr");
  c.steps = j.at("steps");
  c.batch_size = j.value("batch_size", 0);
  c.l2 = j.value("l2", 0.0);
  c.seed = j.at("seed");
  c.validate();
  return c;
}

nlohmann::json fewshot_to_json(const FewShotProtocol& p) {
  return {{"n_way", p.n_way},
          {"k_shot", p.k_shot},
          {"n_tasks", p.n_tasks},
          {"test_per_class", p.test_per_class},
          {"seed", p.seed}};
}

FewShotProtocol fewshot_from_json(const nlohmann::json& j) {
  FewShotProtocol p;
  p.n_way = j.at("n_way");
  p.k_shot = j.at("k_shot");
  p.n_tasks = j.at("n_tasks");
  p.test_per_class = j.at("test_per_class");
  p.seed = j.at("seed");
  p.validate();
  return p;
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["task"] = task.to_json();
  j["model"] = spec_to_json(model);
  j["data"] = {{"pretrain_count", pretrain_count}, {"seed", data_seed}};
  j["pretrain"] = pretrain_config_to_json(pretrain);
  j["sweep"] = {{"axis", axis_name(sweep.axis)},
                {"values", sweep.values},
                {"seeds", sweep.seeds}};
  j["sgld"] = sgld_to_json(sgld);
  j["finetune"] = finetune_to_json(finetune);
  j["full_eval"] = {{"per_class", full_eval_per_class},
                    {"split_fraction", split_fraction},
                    {"seed", full_eval_seed}};
  j["fewshot"] = fewshot_to_json(fewshot);
  j["eval_last_k"] = eval_last_k;
  j["output_dir"] = output_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.task = TaskConfig::from_json(j.at("task"));
  c.model = spec_from_json(j.at("model"));
  c.pretrain_count = j.at("data").at("pretrain_count");
  c.data_seed = j.at("data").at("seed");
  c.pretrain = pretrain_config_from_json(j.at("pretrain"));
  const auto& js = j.at("sweep");
  const std::string ax = js.at("axis");
  if (ax == "learning_rate") c.sweep.axis = SweepAxis::learning_rate;
  else if (ax == "batch_size") c.sweep.axis = SweepAxis::batch_size;
  else if (ax == "momentum") c.sweep.axis = SweepAxis::momentum;
  else throw std::invalid_argument("unknown sweep axis: " + ax);
  c.sweep.values = js.at("values").get<std::vector<double>>();
  c.sweep.seeds = js.at("seeds").get<std::vector<std::uint64_t>>();
  c.sgld = sgld_from_json(j.at("sgld"));
  c.finetune = finetune_from_json(j.at("finetune"));
  c.full_eval_per_class = j.at("full_eval").at("per_class");
  c.split_fraction = j.at("full_eval").at("split_fraction");
  c.full_eval_seed = j.at("full_eval").at("seed");
  c.fewshot = fewshot_from_json(j.at("fewshot"));
  c.eval_last_k = j.value("eval_last_k", 1);
  c.output_dir = j.at("output_dir");
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& p) {
  return from_json(load_json(p));
}

void ExperimentConfig::validate() const {
  model.validate();
  pretrain.validate();
  if (sweep.values.empty() || sweep.seeds.empty())
    throw std::invalid_argument("ExperimentConfig: sweep values/seeds must be nonempty");
  if (pretrain_count < 1)
    throw std::invalid_argument("ExperimentConfig: pretrain_count must be positive");
  if (eval_last_k < 1)
    throw std::invalid_argument("ExperimentConfig: eval_last_k must be positive");
  if (output_dir.empty())
    throw std::invalid_argument("ExperimentConfig: output_dir must be set");
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size())
    throw std::invalid_argument("pearson: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("pearson: need at least 2 points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw std::invalid_argument("pearson: undefined for zero variance");
  return sxy / std::sqrt(sxx * syy);
}

nlohmann::json CorrelationReport::to_json() const {
  nlohmann::json j;
  j["metric_name"] = metric_name;
  j["protocol"] = protocol == TransferProtocol::full ? "full" : "fewshot";
  j["pearson_r"] = pearson_r;
  j["pairs"] = nlohmann::json::array();
  for (const auto& [a, b] : pairs) j["pairs"].push_back({a, b});
  return j;
}

CorrelationReport make_correlation_report(
    const std::string& metric_name, TransferProtocol protocol,
    std::vector<std::pair<double, double>> pairs) {
  if (pairs.size() < 3)
    throw std::invalid_argument("correlation report needs at least 3 pairs");
  std::vector<double> xs, ys;
  for (const auto& [a, b] : pairs) {
    xs.push_back(a);
    ys.push_back(b);
  }
  CorrelationReport r;
  r.metric_name = metric_name;
  r.protocol = protocol;
  r.pairs = std::move(pairs);
  r.pearson_r = pearson(xs, ys);
  return r;
}

// ---------------------------------------------------------------------------
// run layout and per-cell pipeline

namespace {

std::string cell_name(SweepAxis axis, double value, std::uint64_t seed) {
  return axis_short(axis) + format_double(value) + "-s" + std::to_string(seed);
}

std::filesystem::path cell_dir(const ExperimentConfig& c, double value,
                               std::uint64_t seed) {
  return std::filesystem::path(c.output_dir) / "cells" /
         cell_name(c.sweep.axis, value, seed);
}

std::string cell_hash(const ExperimentConfig& c, double value, std::uint64_t seed) {
  nlohmann::json j;
  j["task"] = c.task.to_json();
  j["model"] = spec_to_json(c.model);
  j["data"] = {{"pretrain_count", c.pretrain_count}, {"seed", c.data_seed}};
  PretrainConfig cfg = apply_axis(c.pretrain, c.sweep.axis, value);
  cfg.seed = seed;
  j["pretrain"] = pretrain_config_to_json(cfg);
  j["sgld"] = sgld_to_json(c.sgld);
  j["finetune"] = finetune_to_json(c.finetune);
  j["full_eval"] = {{"per_class", c.full_eval_per_class},
                    {"split_fraction", c.split_fraction},
                    {"seed", c.full_eval_seed}};
  j["fewshot"] = fewshot_to_json(c.fewshot);
  j["eval_last_k"] = c.eval_last_k;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

nlohmann::json cell_to_json(const CellRecord& c) {
  nlohmann::json j;
  j["value"] = c.value;
  j["seed"] = c.seed;
  j["status"] = c.status;
  j["hash"] = c.hash;
  j["checkpoints"] = nlohmann::json::array();
  for (const auto& k : c.ckpts) {
    nlohmann::json jk;
    jk["id"] = k.id;
    jk["file"] = k.file;
    jk["step"] = k.step;
    jk["train_loss"] = k.train_loss;
    jk["wbic"] = opt_num(k.wbic);
    jk["llc"] = opt_num(k.llc);
    jk["wbic_se"] = opt_num(k.wbic_se);
    jk["full_acc"] = opt_num(k.full_acc);
    jk["full_train_acc"] = opt_num(k.full_train_acc);
    jk["fewshot_acc"] = opt_num(k.fewshot_acc);
    j["checkpoints"].push_back(jk);
  }
  return j;
}

CellRecord cell_from_json(const nlohmann::json& j) {
  CellRecord c;
  c.value = j.at("value");
  c.seed = j.at("seed");
  c.status = j.at("status");
  c.hash = j.at("hash");
  for (const auto& jk : j.at("checkpoints")) {
    CkptRecord k;
    k.id = jk.at("id");
    k.file = jk.at("file");
    k.step = jk.at("step");
    k.train_loss = jk.at("train_loss");
    k.wbic = num_opt(jk, "wbic");
    k.llc = num_opt(jk, "llc");
    k.wbic_se = num_opt(jk, "wbic_se");
    k.full_acc = num_opt(jk, "full_acc");
    k.full_train_acc = num_opt(jk, "full_train_acc");
    k.fewshot_acc = num_opt(jk, "fewshot_acc");
    c.ckpts.push_back(std::move(k));
  }
  return c;
}

// Runs the requested stages for one cell, reusing whatever the stored record
// already has. Returns true if anything was computed.
bool process_cell(const ExperimentConfig& config, const TaskFamily& task,
                  const LabeledDataset& pretrain_data, CellRecord& cell,
                  const StageMask& stages) {
  const auto dir = cell_dir(config, cell.value, cell.seed);
  bool dirty = false;

  if (stages.pretrain && cell.ckpts.empty()) {
    PretrainConfig cfg = apply_axis(config.pretrain, config.sweep.axis, cell.value);
    cfg.seed = cell.seed;
    const std::string prefix = cell_name(config.sweep.axis, cell.value, cell.seed);
    auto ckpts = sgd_train(config.model, pretrain_data, cfg, prefix);
    std::filesystem::create_directories(dir);
    for (const auto& k : ckpts) {
      const auto p = dir / (k.id + ".json");
      save_checkpoint(k, p);
      CkptRecord r;
      r.id = k.id;
      r.file = p.string();
      r.step = k.step;
      r.train_loss = k.train_loss;
      cell.ckpts.push_back(std::move(r));
    }
    dirty = true;
  }
  if (cell.ckpts.empty()) return dirty;

  const std::size_t first_eval =
      cell.ckpts.size() > static_cast<std::size_t>(config.eval_last_k)
          ? cell.ckpts.size() - static_cast<std::size_t>(config.eval_last_k)
          : 0;
  for (std::size_t i = first_eval; i < cell.ckpts.size(); ++i) {
    CkptRecord& r = cell.ckpts[i];
    const bool need_wbic = stages.wbic && std::isnan(r.wbic);
    const bool need_full = stages.full && std::isnan(r.full_acc);
    const bool need_fs = stages.fewshot && std::isnan(r.fewshot_acc);
    if (!need_wbic && !need_full && !need_fs) continue;
    const Checkpoint ckpt = load_checkpoint(r.file);
    if (need_wbic) {
      const FreeEnergyEstimate fe =
          estimate_wbic(ckpt.spec, ckpt, pretrain_data, config.sgld);
      r.wbic = fe.wbic;
      r.llc = fe.llc;
      r.wbic_se = fe.std_error;
      save_json(dir / (r.id + ".wbic.json"), fe.to_json());
      dirty = true;
    }
    if (need_full) {
      const TransferResult res =
          eval_full(ckpt, task, config.finetune, config.full_eval_per_class,
                    config.split_fraction, config.full_eval_seed);
      r.full_acc = res.accuracy;
      r.full_train_acc = res.train_accuracy;
      save_json(dir / (r.id + ".full.json"), res.to_json());
      dirty = true;
    }
    if (need_fs) {
      const TransferResult res =
          eval_fewshot(ckpt, task, config.fewshot, config.finetune);
      r.fewshot_acc = res.accuracy;
      save_json(dir / (r.id + ".fewshot.json"), res.to_json());
      write_text_file(dir / (r.id + ".fewshot_tasks.csv"), res.per_task_csv());
      dirty = true;
    }
  }
  return dirty;
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& config, int workers,
                           const StageMask& stages, const CellFilter& filter) {
  config.validate();
  const TaskFamily task = build_task(config.task);
  if (static_cast<int>(config.model.input_dim) != task.input_dim())
    throw std::invalid_argument("run_experiment: model input_dim != task dim");
  const LabeledDataset pretrain_data =
      sample_local(task, Side::pretrain, config.pretrain_count, config.data_seed);

  struct CellSlot {
    double value;
    std::uint64_t seed;
    bool selected;
  };
  std::vector<CellSlot> slots;
  for (double v : config.sweep.values)
    for (std::uint64_t s : config.sweep.seeds)
      slots.push_back({v, s, filter.matches(v, s)});

  RunManifest manifest;
  manifest.axis = config.sweep.axis;
  manifest.cells.resize(slots.size());
  std::filesystem::create_directories(std::filesystem::path(config.output_dir) / "cells");

  const int nthreads = workers > 0 ? workers : static_cast<int>(slots.size());
#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
  for (std::size_t ci = 0; ci < slots.size(); ++ci) {
    const auto& slot = slots[ci];
    CellRecord cell;
    cell.value = slot.value;
    cell.seed = slot.seed;
    cell.hash = cell_hash(config, slot.value, slot.seed);
    const auto dir = cell_dir(config, slot.value, slot.seed);
    const auto record_path = dir / "cell.json";
    if (std::filesystem::exists(record_path)) {
      try {
        CellRecord stored = cell_from_json(load_json(record_path));
        if (stored.hash == cell.hash) cell = std::move(stored);
      } catch (const std::exception&) {
        // unreadable record: recompute from scratch
      }
    }
    if (slot.selected) {
      try {
        const bool dirty = process_cell(config, task, pretrain_data, cell, stages);
        cell.status = "ok";
        if (dirty || !std::filesystem::exists(record_path)) {
          std::filesystem::create_directories(dir);
          save_json(record_path, cell_to_json(cell));
        }
      } catch (const std::exception& e) {
        cell.status = std::string("failed: ") + e.what();
        std::filesystem::create_directories(dir);
        save_json(record_path, cell_to_json(cell));
      }
    } else if (cell.status.empty()) {
      cell.status = "skipped";
    }
    manifest.cells[ci] = std::move(cell);
  }

  for (const auto& c : manifest.cells)
    if (c.status.rfind("failed", 0) == 0) ++manifest.failed_cells;
  write_reports(config, manifest);
  return manifest;
}

RunManifest load_run(const ExperimentConfig& config) {
  RunManifest manifest;
  manifest.axis = config.sweep.axis;
  for (double v : config.sweep.values)
    for (std::uint64_t s : config.sweep.seeds) {
      const auto p = cell_dir(config, v, s) / "cell.json";
      CellRecord cell;
      cell.value = v;
      cell.seed = s;
      if (std::filesystem::exists(p)) {
        cell = cell_from_json(load_json(p));
      } else {
        cell.status = "missing";
        ++manifest.failed_cells;
      }
      manifest.cells.push_back(std::move(cell));
    }
  return manifest;
}

std::string rows_csv(const RunManifest& manifest) {
  std::string out = "id,axis_value,seed,step,train_loss,wbic,llc,full_acc,fewshot_acc\n";
  const auto cellfmt = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  for (const auto& c : manifest.cells)
    for (const auto& k : c.ckpts) {
      out += k.id + "," + format_double(c.value) + "," + std::to_string(c.seed) +
             "," + std::to_string(k.step) + "," + format_double(k.train_loss) +
             "," + cellfmt(k.wbic) + "," + cellfmt(k.llc) + "," +
             cellfmt(k.full_acc) + "," + cellfmt(k.fewshot_acc) + "\n";
    }
  return out;
}

void write_reports(const ExperimentConfig& config, RunManifest& manifest) {
  const std::filesystem::path out(config.output_dir);
  write_text_file(out / "rows.csv", rows_csv(manifest));

  std::vector<std::pair<double, double>> full_pairs, fs_pairs;
  for (const auto& c : manifest.cells)
    for (const auto& k : c.ckpts) {
      if (!std::isnan(k.wbic) && !std::isnan(k.full_acc))
        full_pairs.push_back({k.wbic, k.full_acc});
      if (!std::isnan(k.wbic) && !std::isnan(k.fewshot_acc))
        fs_pairs.push_back({k.wbic, k.fewshot_acc});
    }
  manifest.correlations.clear();
  nlohmann::json jc = nlohmann::json::array();
  if (full_pairs.size() >= 3) {
    manifest.correlations.push_back(
        make_correlation_report("wbic", TransferProtocol::full, full_pairs));
    jc.push_back(manifest.correlations.back().to_json());
  }
  if (fs_pairs.size() >= 3) {
    manifest.correlations.push_back(
        make_correlation_report("wbic", TransferProtocol::fewshot, fs_pairs));
    jc.push_back(manifest.correlations.back().to_json());
  }
  save_json(out / "correlations.json", jc);

  nlohmann::json jm;
  jm["axis"] = axis_name(manifest.axis);
  jm["failed_cells"] = manifest.failed_cells;
  jm["cells"] = nlohmann::json::array();
  for (const auto& c : manifest.cells) jm["cells"].push_back(cell_to_json(c));
  jm["correlations"] = jc;
  save_json(out / "run_manifest.json", jm);

  bool any = false;
  for (const auto& c : manifest.cells) any = any || !c.ckpts.empty();
  if (any) emit_plot_data(manifest, config, out / "plots");
}

// ---------------------------------------------------------------------------
// plot data

namespace {

struct SeriesPoint {
  double x = 0.0, y = 0.0, yerr = 0.0;
};

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = deterministic_mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / (static_cast<double>(v.size()) - 1.0));
}

std::string svg_scatter(const std::string& title, const std::string& xlabel,
                        const std::string& ylabel,
                        const std::vector<SeriesPoint>& pts) {
  const double W = 640, H = 480, L = 80, R = 600, T = 40, B = 420;
  double xmin = pts[0].x, xmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
  for (const auto& p : pts) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y - p.yerr);
    ymax = std::max(ymax, p.y + p.yerr);
  }
  if (xmax == xmin) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  if (ymax == ymin) {
    ymin -= 1.0;
    ymax += 1.0;
  }
  const double xpad = 0.05 * (xmax - xmin), ypad = 0.05 * (ymax - ymin);
  xmin -= xpad;
  xmax += xpad;
  ymin -= ypad;
  ymax += ypad;
  const auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (R - L); };
  const auto py = [&](double y) { return B - (y - ymin) / (ymax - ymin) * (B - T); };
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + format_double(W) +
       "\" height=\"" + format_double(H) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + title + "</text>\n";
  s += "<line x1=\"" + format_double(L) + "\" y1=\"" + format_double(B) + "\" x2=\"" +
       format_double(R) + "\" y2=\"" + format_double(B) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + format_double(L) + "\" y1=\"" + format_double(T) + "\" x2=\"" +
       format_double(L) + "\" y2=\"" + format_double(B) + "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    char xb[32], yb[32];
    std::snprintf(xb, sizeof(xb), "%.4g", xv);
    std::snprintf(yb, sizeof(yb), "%.4g", yv);
    s += "<text x=\"" + format_double(px(xv)) + "\" y=\"" + format_double(B + 20) +
         "\" text-anchor=\"middle\" font-size=\"11\">" + xb + "</text>\n";
    s += "<text x=\"" + format_double(L - 8) + "\" y=\"" + format_double(py(yv) + 4) +
         "\" text-anchor=\"end\" font-size=\"11\">" + yb + "</text>\n";
  }
  s += "<text x=\"340\" y=\"460\" text-anchor=\"middle\" font-size=\"13\">" + xlabel + "</text>\n";
  s += "<text x=\"20\" y=\"230\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 20 230)\">" +
       ylabel + "</text>\n";
  for (const auto& p : pts) {
    if (p.yerr > 0.0) {
      s += "<line x1=\"" + format_double(px(p.x)) + "\" y1=\"" +
           format_double(py(p.y - p.yerr)) + "\" x2=\"" + format_double(px(p.x)) +
           "\" y2=\"" + format_double(py(p.y + p.yerr)) +
           "\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n";
    }
    s += "<circle cx=\"" + format_double(px(p.x)) + "\" cy=\"" +
         format_double(py(p.y)) + "\" r=\"4\" fill=\"steelblue\"/>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace

void emit_plot_data(const RunManifest& manifest, const ExperimentConfig& config,
                    const std::filesystem::path& out_dir) {
  bool any = false;
  for (const auto& c : manifest.cells) any = any || !c.ckpts.empty();
  if (!any) throw std::invalid_argument("emit_plot_data: empty manifest");
  std::filesystem::create_directories(out_dir);

  // group by (value, step) across seeds, preserving config order
  const auto& values = config.sweep.values;
  const auto by_value_step = [&](auto metric) {
    std::vector<std::tuple<double, long, double, double>> rows;  // value, step, mean, sd
    for (double v : values) {
      std::map<long, std::vector<double>> steps;
      for (const auto& c : manifest.cells) {
        if (c.value != v) continue;
        for (const auto& k : c.ckpts) {
          const double mv = metric(k);
          if (!std::isnan(mv)) steps[k.step].push_back(mv);
        }
      }
      for (const auto& [st, vals] : steps)
        rows.push_back({v, st, deterministic_mean(vals), sample_sd(vals)});
    }
    return rows;
  };

  {
    std::string csv = "axis_value,step,mean_train_loss,sd_train_loss\n";
    for (const auto& [v, st, mean, sd] :
         by_value_step([](const CkptRecord& k) { return k.train_loss; }))
      csv += format_double(v) + "," + std::to_string(st) + "," +
             format_double(mean) + "," + format_double(sd) + "\n";
    write_text_file(out_dir / "train_loss_vs_step.csv", csv);
  }
  {
    std::string csv = "axis_value,step,mean_wbic,sd_wbic\n";
    for (const auto& [v, st, mean, sd] :
         by_value_step([](const CkptRecord& k) { return k.wbic; }))
      csv += format_double(v) + "," + std::to_string(st) + "," +
             format_double(mean) + "," + format_double(sd) + "\n";
    write_text_file(out_dir / "wbic_vs_step.csv", csv);
  }
  {
    std::string csv = "axis_value,protocol,mean_accuracy,sd_accuracy\n";
    for (double v : values) {
      std::vector<double> fa, sa;
      for (const auto& c : manifest.cells) {
        if (c.value != v) continue;
        for (const auto& k : c.ckpts) {
          if (!std::isnan(k.full_acc)) fa.push_back(k.full_acc);
          if (!std::isnan(k.fewshot_acc)) sa.push_back(k.fewshot_acc);
        }
      }
      if (!fa.empty())
        csv += format_double(v) + ",full," + format_double(deterministic_mean(fa)) +
               "," + format_double(sample_sd(fa)) + "\n";
      if (!sa.empty())
        csv += format_double(v) + ",fewshot," +
               format_double(deterministic_mean(sa)) + "," +
               format_double(sample_sd(sa)) + "\n";
    }
    write_text_file(out_dir / "accuracy_vs_value.csv", csv);
  }
  {
    std::string csv = "axis_value,seed,step,wbic,full_accuracy,fewshot_accuracy\n";
    const auto cellfmt = [](double v) {
      return std::isnan(v) ? std::string() : format_double(v);
    };
    for (const auto& c : manifest.cells)
      for (const auto& k : c.ckpts) {
        if (std::isnan(k.wbic)) continue;
        csv += format_double(c.value) + "," + std::to_string(c.seed) + "," +
               std::to_string(k.step) + "," + format_double(k.wbic) + "," +
               cellfmt(k.full_acc) + "," + cellfmt(k.fewshot_acc) + "\n";
      }
    write_text_file(out_dir / "wbic_vs_accuracy.csv", csv);
  }

  // scatter: per axis value, seed-averaged wbic vs seed-averaged accuracy
  const auto scatter_for = [&](auto metric) {
    std::vector<SeriesPoint> pts;
    for (double v : values) {
      std::vector<double> ws, as;
      for (const auto& c : manifest.cells) {
        if (c.value != v) continue;
        for (const auto& k : c.ckpts) {
          const double acc = metric(k);
          if (!std::isnan(k.wbic) && !std::isnan(acc)) {
            ws.push_back(k.wbic);
            as.push_back(acc);
          }
        }
      }
      if (!ws.empty())
        pts.push_back({deterministic_mean(ws), deterministic_mean(as), sample_sd(as)});
    }
    return pts;
  };
  const auto full_pts = scatter_for([](const CkptRecord& k) { return k.full_acc; });
  if (!full_pts.empty())
    write_text_file(out_dir / "wbic_vs_full_accuracy.svg",
                    svg_scatter("pretraining free energy vs transfer accuracy",
                                "pretraining WBIC", "finetune transfer accuracy",
                                full_pts));
  const auto fs_pts = scatter_for([](const CkptRecord& k) { return k.fewshot_acc; });
  if (!fs_pts.empty())
    write_text_file(out_dir / "wbic_vs_fewshot_accuracy.svg",
                    svg_scatter("pretraining free energy vs few-shot accuracy",
                                "pretraining WBIC", "avg few-shot transfer accuracy",
                                fs_pts));
}

}  // namespace fecs
