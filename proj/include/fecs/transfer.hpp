#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fecs/pretrain.hpp"
#include "fecs/task.hpp"

namespace fecs {

// Limited fine-tuning: fresh linear head at a normal rate, backbone at a
// much smaller (possibly zero) rate.
struct FinetuneConfig {
  double head_lr = 0.01;
  double backbone_lr = 0.0001;
  int steps = 100;
  int batch_size = 0;  // <= 0 means full batch
  double l2 = 0.0;     // applied to all trained coordinates
  std::uint64_t seed = 0;
  void validate() const;
};

struct FewShotProtocol {
  int n_way = 5;
  int k_shot = 5;
  int n_tasks = 100;
  int test_per_class = 100;
  std::uint64_t seed = 0;
  void validate() const;
};

enum class TransferProtocol { full, fewshot };

struct TransferResult {
  std::string checkpoint_id;
  TransferProtocol protocol = TransferProtocol::full;
  double accuracy = 0.0;
  std::vector<double> per_task_accuracies;  // fewshot only
  double train_accuracy = 0.0;
  nlohmann::json to_json() const;
  std::string per_task_csv() const;  // task_index,accuracy
};

struct FinetuneOutput {
  ModelSpec spec;  // head_dim replaced
  ParamVector params;
  double train_accuracy = 0.0;
};

// Attaches a freshly initialized head of the requested dimension and runs
// SGD with per-partition learning rates. steps=0 returns the checkpoint
// backbone (bitwise) with the fresh head. Labels must be local indices in
// [0, new_head_dim).
FinetuneOutput finetune(const Checkpoint& ckpt, const LabeledDataset& downstream,
                        int new_head_dim, const FinetuneConfig& config);

// Full meta-test protocol: per-class sample, stratified train/test split,
// fine-tune on the train part, accuracy on the held-out part.
TransferResult eval_full(const Checkpoint& ckpt, const TaskFamily& task,
                         const FinetuneConfig& config, int per_class,
                         double split_fraction, std::uint64_t seed);

// Few-shot protocol: n_tasks independent episodes of n_way classes, k_shot
// training examples each, fresh test draws; tasks run in parallel with
// per-task streams.
TransferResult eval_fewshot(const Checkpoint& ckpt, const TaskFamily& task,
                            const FewShotProtocol& protocol,
                            const FinetuneConfig& config);

}  // namespace fecs
