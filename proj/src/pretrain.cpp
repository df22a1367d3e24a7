#include "fecs/pretrain.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "fecs/errors.hpp"
#include "fecs/io.hpp"

namespace fecs {

void PretrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("PretrainConfig: learning_rate must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("PretrainConfig: batch_size must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("PretrainConfig: momentum must be in [0,1)");
  if (steps < 1) throw std::invalid_argument("PretrainConfig: steps must be positive");
  if (checkpoint_every < 1 || checkpoint_every > steps)
    throw std::invalid_argument("PretrainConfig: need 1 <= checkpoint_every <= steps");
  if (l2 < 0.0) throw std::invalid_argument("PretrainConfig: l2 must be >= 0");
}

MinibatchStream::MinibatchStream(int n, Rng rng) : pos_(0), rng_(rng) {
  perm_.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
  rng_.shuffle(perm_);
}

std::span<const int> MinibatchStream::next(int batch) {
  const std::size_t b = static_cast<std::size_t>(batch);
  if (b > perm_.size())
    throw std::invalid_argument("MinibatchStream: batch larger than dataset");
  if (pos_ + b > perm_.size()) {
    rng_.shuffle(perm_);
    pos_ = 0;
  }
  std::span<const int> out(perm_.data() + pos_, b);
  pos_ += b;
  return out;
}

ParamVector sgd_initial_params(const ModelSpec& spec, const PretrainConfig& config) {
  Rng rng = Rng::derive(config.seed, 0x696e6974ULL);
  return init_params(spec, rng);
}

MinibatchStream sgd_batch_stream(int n, const PretrainConfig& config) {
  return MinibatchStream(n, Rng::derive(config.seed, 0x62617463ULL));
}

namespace {

std::string step_id(const std::string& prefix, long step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "-t%06ld", step);
  return prefix + buf;
}

}  // namespace

std::vector<Checkpoint> sgd_train(const ModelSpec& spec,
                                  const LabeledDataset& data,
                                  const PretrainConfig& config,
                                  const std::string& id_prefix) {
  spec.validate();
  config.validate();
  if (data.size() < static_cast<std::size_t>(config.batch_size))
    throw std::invalid_argument("sgd_train: dataset smaller than batch_size");

  ParamVector params = sgd_initial_params(spec, config);
  MinibatchStream stream = sgd_batch_stream(static_cast<int>(data.size()), config);
  const std::size_t dim = params.size();
  std::vector<double> velocity(dim, 0.0);
  std::vector<double> grad(dim);

  std::vector<Checkpoint> out;
  for (long t = 1; t <= config.steps; ++t) {
    auto idx = stream.next(config.batch_size);
    const double loss = batch_nll_grad(spec, params.values, data, idx, grad.data());
    if (!std::isfinite(loss))
      throw DivergenceError("sgd_train: non-finite minibatch loss", t);
    if (config.l2 > 0.0)
      for (std::size_t j = 0; j < dim; ++j) grad[j] += config.l2 * params.values[j];
    for (std::size_t j = 0; j < dim; ++j) {
      velocity[j] = config.momentum * velocity[j] + grad[j];
      params.values[j] -= config.learning_rate * velocity[j];
    }
    if (t % config.checkpoint_every == 0 || t == config.steps) {
      Checkpoint c;
      c.spec = spec;
      c.params = params;
      c.step = t;
      c.config = config;
      c.train_loss = batch_nll(spec, params.values, data);
      if (!std::isfinite(c.train_loss))
        throw DivergenceError("sgd_train: non-finite train loss", t);
      c.id = step_id(id_prefix, t);
      out.push_back(std::move(c));
      if (t == config.steps) break;  // avoid duplicate when steps % every == 0
    }
  }
  return out;
}

std::string axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::learning_rate: return "learning_rate";
    case SweepAxis::batch_size: return "batch_size";
    case SweepAxis::momentum: return "momentum";
  }
  return "?";
}

std::string axis_short(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::learning_rate: return "lr";
    case SweepAxis::batch_size: return "bs";
    case SweepAxis::momentum: return "mom";
  }
  return "?";
}

PretrainConfig apply_axis(PretrainConfig base, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::learning_rate: base.learning_rate = value; break;
    case SweepAxis::batch_size: base.batch_size = static_cast<int>(std::lround(value)); break;
    case SweepAxis::momentum: base.momentum = value; break;
  }
  return base;
}

nlohmann::json SweepManifest::to_json() const {
  nlohmann::json j;
  j["axis"] = axis_name(axis);
  j["values"] = values;
  j["seeds"] = seeds;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json jc;
    jc["value"] = c.value;
    jc["seed"] = c.seed;
    jc["status"] = c.status;
    jc["checkpoint_files"] = c.checkpoint_files;
    jc["steps"] = c.steps;
    jc["train_losses"] = c.train_losses;
    j["cells"].push_back(jc);
  }
  return j;
}

SweepManifest SweepManifest::from_json(const nlohmann::json& j) {
  SweepManifest m;
  const std::string a = j.at("axis");
  if (a == "learning_rate") m.axis = SweepAxis::learning_rate;
  else if (a == "batch_size") m.axis = SweepAxis::batch_size;
  else if (a == "momentum") m.axis = SweepAxis::momentum;
  else throw std::invalid_argument("unknown sweep axis: " + a);
  m.values = j.at("values").get<std::vector<double>>();
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& jc : j.at("cells")) {
    SweepCell c;
    c.value = jc.at("value");
    c.seed = jc.at("seed");
    c.status = jc.at("status");
    c.checkpoint_files = jc.at("checkpoint_files").get<std::vector<std::string>>();
    c.steps = jc.at("steps").get<std::vector<long>>();
    c.train_losses = jc.at("train_losses").get<std::vector<double>>();
    m.cells.push_back(std::move(c));
  }
  return m;
}

SweepManifest run_sweep(const ModelSpec& spec, const LabeledDataset& data,
                        const PretrainConfig& base, SweepAxis axis,
                        const std::vector<double>& values,
                        const std::vector<std::uint64_t>& seeds,
                        const std::filesystem::path& out_dir, int workers) {
  if (values.empty() || seeds.empty())
    throw std::invalid_argument("run_sweep: values and seeds must be nonempty");
  SweepManifest m;
  m.axis = axis;
  m.values = values;
  m.seeds = seeds;
  const int n_cells = static_cast<int>(values.size() * seeds.size());
  m.cells.resize(static_cast<std::size_t>(n_cells));
  std::filesystem::create_directories(out_dir / "cells");

  const int nthreads = workers > 0 ? workers : n_cells;
#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
  for (int ci = 0; ci < n_cells; ++ci) {
    const std::size_t vi = static_cast<std::size_t>(ci) / seeds.size();
    const std::size_t si = static_cast<std::size_t>(ci) % seeds.size();
    SweepCell cell;
    cell.value = values[vi];
    cell.seed = seeds[si];
    PretrainConfig cfg = apply_axis(base, axis, cell.value);
    cfg.seed = cell.seed;
    const std::string cell_name = axis_short(axis) + format_double(cell.value) +
                                  "-s" + std::to_string(cell.seed);
    const auto cell_dir = out_dir / "cells" / cell_name;
    try {
      auto ckpts = sgd_train(spec, data, cfg, cell_name);
      std::filesystem::create_directories(cell_dir);
      for (const auto& c : ckpts) {
        const auto p = cell_dir / (c.id + ".json");
        save_checkpoint(c, p);
        cell.checkpoint_files.push_back(p.string());
        cell.steps.push_back(c.step);
        cell.train_losses.push_back(c.train_loss);
      }
      cell.status = "ok";
    } catch (const std::exception& e) {
      cell.status = std::string("failed: ") + e.what();
    }
    m.cells[static_cast<std::size_t>(ci)] = std::move(cell);
  }
  save_json(out_dir / "sweep_manifest.json", m.to_json());
  return m;
}

nlohmann::json spec_to_json(const ModelSpec& spec) {
  nlohmann::json j;
  j["input_dim"] = spec.input_dim;
  j["hidden_widths"] = spec.hidden_widths;
  j["head_dim"] = spec.head_dim;
  j["activation"] = spec.activation == Activation::relu ? "relu" : "tanh";
  j["output_kind"] = spec.output_kind == OutputKind::categorical_softmax
                         ? "categorical_softmax"
                         : "gaussian_fixed_sigma";
  j["sigma"] = spec.sigma;
  return j;
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.input_dim = j.at("input_dim");
  s.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
  s.head_dim = j.at("head_dim");
  const std::string act = j.at("activation");
  if (act == "relu") s.activation = Activation::relu;
  else if (act == "tanh") s.activation = Activation::tanh;
  else throw std::invalid_argument("unknown activation: " + act);
  const std::string ok = j.at("output_kind");
  if (ok == "categorical_softmax") s.output_kind = OutputKind::categorical_softmax;
  else if (ok == "gaussian_fixed_sigma") s.output_kind = OutputKind::gaussian_fixed_sigma;
  else throw std::invalid_argument("unknown output kind: " + ok);
  s.sigma = j.value("sigma", 1.0);
  s.validate();
  return s;
}

nlohmann::json pretrain_config_to_json(const PretrainConfig& c) {
  nlohmann::json j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["momentum"] = c.momentum;
  j["steps"] = c.steps;
  j["checkpoint_every"] = c.checkpoint_every;
  j["seed"] = c.seed;
  j["l2"] = c.l2;
  return j;
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.batch_size = j.at("batch_size");
  c.momentum = j.value("momentum", 0.0);
  c.steps = j.at("steps");
  c.checkpoint_every = j.at("checkpoint_every");
  c.seed = j.at("seed");
  c.l2 = j.value("l2", 0.0);
  c.validate();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& p) {
  nlohmann::json j;
  j["version"] = 1;
  j["spec"] = spec_to_json(ckpt.spec);
  j["params"] = ckpt.params.values;
  j["backbone_boundary"] = ckpt.params.backbone_boundary;
  j["step"] = ckpt.step;
  j["config"] = pretrain_config_to_json(ckpt.config);
  j["train_loss"] = ckpt.train_loss;
  j["id"] = ckpt.id;
  save_json(p, j);
}

Checkpoint load_checkpoint(const std::filesystem::path& p) {
  const nlohmann::json j = load_json(p);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version in " + p.string());
  Checkpoint c;
  c.spec = spec_from_json(j.at("spec"));
  c.params.values = j.at("params").get<std::vector<double>>();
  c.params.backbone_boundary = j.at("backbone_boundary");
  c.step = j.at("step");
  c.config = pretrain_config_from_json(j.at("config"));
  c.train_loss = j.at("train_loss");
  c.id = j.at("id");
  if (static_cast<int>(c.params.size()) != c.spec.param_count())
    throw std::runtime_error("checkpoint params length mismatch in " + p.string());
  return c;
}

}  // namespace fecs
