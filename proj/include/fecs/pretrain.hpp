#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fecs/model.hpp"
#include "fecs/rng.hpp"

namespace fecs {

struct PretrainConfig {
  double learning_rate = 0.1;
  int batch_size = 32;
  double momentum = 0.0;  // in [0, 1)
  int steps = 1000;
  int checkpoint_every = 1000;
  std::uint64_t seed = 0;
  double l2 = 0.0;  // plain SGD by default, no regularization
  void validate() const;
};

struct Checkpoint {
  ModelSpec spec;
  ParamVector params;
  long step = 0;
  PretrainConfig config;
  double train_loss = 0.0;
  std::string id;
};

// Epoch-wise shuffled minibatch order; reshuffles at the start of every
// epoch, drops the short remainder batch. Fully determined by the seed.
class MinibatchStream {
 public:
  MinibatchStream(int n, Rng rng);
  std::span<const int> next(int batch);

 private:
  std::vector<int> perm_;
  std::size_t pos_;
  Rng rng_;
};

// Weight init used everywhere a layer is (re)initialized: weights uniform in
// +-sqrt(6/(fan_in+fan_out)) per layer, biases zero.
ParamVector sgd_initial_params(const ModelSpec& spec, const PretrainConfig& config);

// The exact minibatch order sgd_train consumes for this config.
MinibatchStream sgd_batch_stream(int n, const PretrainConfig& config);

// SGD with momentum: v <- momentum*v + g, w <- w - lr*v, where g is the
// minibatch gradient of the mean NLL (plus l2*w when l2 > 0). Emits a
// checkpoint every checkpoint_every steps and at the final step. Bitwise
// deterministic given the config seed.
std::vector<Checkpoint> sgd_train(const ModelSpec& spec,
                                  const LabeledDataset& data,
                                  const PretrainConfig& config,
                                  const std::string& id_prefix = "ckpt");

enum class SweepAxis { learning_rate, batch_size, momentum };

std::string axis_name(SweepAxis axis);
std::string axis_short(SweepAxis axis);
PretrainConfig apply_axis(PretrainConfig base, SweepAxis axis, double value);

struct SweepCell {
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string status;  // "ok" or an error description
  std::vector<std::string> checkpoint_files;
  std::vector<long> steps;
  std::vector<double> train_losses;
};

struct SweepManifest {
  SweepAxis axis = SweepAxis::learning_rate;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  std::vector<SweepCell> cells;  // values-major order
  nlohmann::json to_json() const;
  static SweepManifest from_json(const nlohmann::json& j);
};

// One trajectory per (value, seed); trajectories run in parallel. Divergence
// is recorded in the cell status, never fatal to the sweep. Checkpoints and
// the manifest are written under out_dir.
SweepManifest run_sweep(const ModelSpec& spec, const LabeledDataset& data,
                        const PretrainConfig& base, SweepAxis axis,
                        const std::vector<double>& values,
                        const std::vector<std::uint64_t>& seeds,
                        const std::filesystem::path& out_dir, int workers = 0);

// Versioned checkpoint file (plain JSON numbers; round-trips bitwise).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& p);
Checkpoint load_checkpoint(const std::filesystem::path& p);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);
nlohmann::json pretrain_config_to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

}  // namespace fecs
