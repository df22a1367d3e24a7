#include "fecs/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fecs/errors.hpp"
#include "fecs/io.hpp"
#include "fecs/reduce.hpp"

namespace fecs {

void FinetuneConfig::validate() const {
  if (!(head_lr > 0.0)) throw std::invalid_argument("FinetuneConfig: head_lr must be positive");
  if (backbone_lr < 0.0)
    throw std::invalid_argument("FinetuneConfig: backbone_lr must be >= 0");
  if (backbone_lr > head_lr)
    throw std::invalid_argument(
        "FinetuneConfig: limited fine-tuning requires backbone_lr <= head_lr");
  if (steps < 0) throw std::invalid_argument("FinetuneConfig: steps must be >= 0");
  if (l2 < 0.0) throw std::invalid_argument("FinetuneConfig: l2 must be >= 0");
}

void FewShotProtocol::validate() const {
  if (n_way < 2) throw std::invalid_argument("FewShotProtocol: n_way must be >= 2");
  if (k_shot < 1) throw std::invalid_argument("FewShotProtocol: k_shot must be >= 1");
  if (n_tasks < 1) throw std::invalid_argument("FewShotProtocol: n_tasks must be >= 1");
  if (test_per_class < 1)
    throw std::invalid_argument("FewShotProtocol: test_per_class must be >= 1");
}

nlohmann::json TransferResult::to_json() const {
  nlohmann::json j;
  j["checkpoint_id"] = checkpoint_id;
  j["protocol"] = protocol == TransferProtocol::full ? "full" : "fewshot";
  j["accuracy"] = accuracy;
  j["train_accuracy"] = train_accuracy;
  if (!per_task_accuracies.empty()) j["per_task_accuracies"] = per_task_accuracies;
  return j;
}

std::string TransferResult::per_task_csv() const {
  std::string out = "task_index,accuracy\n";
  for (std::size_t i = 0; i < per_task_accuracies.size(); ++i)
    out += std::to_string(i) + "," + format_double(per_task_accuracies[i]) + "\n";
  return out;
}

FinetuneOutput finetune(const Checkpoint& ckpt, const LabeledDataset& downstream,
                        int new_head_dim, const FinetuneConfig& config) {
  config.validate();
  if (downstream.size() == 0)
    throw std::invalid_argument("finetune: empty downstream dataset");
  if (!downstream.classification)
    throw std::invalid_argument("finetune: classification dataset required");
  for (std::size_t i = 0; i < downstream.size(); ++i) {
    const int y = downstream.label(i);
    if (y < 0 || y >= new_head_dim)
      throw std::invalid_argument("finetune: label outside [0, new_head_dim)");
  }

  Rng head_rng = Rng::derive(config.seed, 0x68656164ULL);
  auto [spec, params] = replace_head(ckpt.spec, ckpt.params, new_head_dim, head_rng);

  const int n = static_cast<int>(downstream.size());
  const bool full_batch = config.batch_size <= 0 || config.batch_size >= n;
  MinibatchStream stream(n, Rng::derive(config.seed, 0x62617463ULL));
  const int bb = params.backbone_boundary;
  std::vector<double> grad(params.size());

  for (long t = 1; t <= config.steps; ++t) {
    std::span<const int> idx =
        full_batch ? std::span<const int>{} : stream.next(config.batch_size);
    const double loss = batch_nll_grad(spec, params.values, downstream, idx, grad.data());
    if (!std::isfinite(loss))
      throw DivergenceError("finetune: non-finite minibatch loss", t);
    for (std::size_t j = 0; j < params.size(); ++j) {
      const double lr =
          static_cast<int>(j) < bb ? config.backbone_lr : config.head_lr;
      if (lr == 0.0) continue;
      params.values[j] -= lr * (grad[j] + config.l2 * params.values[j]);
    }
  }

  FinetuneOutput out;
  out.train_accuracy = classification_accuracy(spec, params, downstream);
  out.spec = std::move(spec);
  out.params = std::move(params);
  return out;
}

TransferResult eval_full(const Checkpoint& ckpt, const TaskFamily& task,
                         const FinetuneConfig& config, int per_class,
                         double split_fraction, std::uint64_t seed) {
  if (!task.classification())
    throw std::invalid_argument("eval_full: classification task required");
  const auto& classes = task.side_classes(Side::downstream);
  if (classes.size() < 2)
    throw std::invalid_argument("eval_full: need >= 2 downstream classes");
  if (per_class < 2)
    throw std::invalid_argument("eval_full: stratification needs >= 2 examples per class");
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw std::invalid_argument("eval_full: split_fraction must be in (0,1)");
  const int k_train = static_cast<int>(std::floor(split_fraction * per_class));
  if (k_train < 1 || k_train >= per_class)
    throw std::invalid_argument("eval_full: split leaves an empty stratum");

  const int d = task.input_dim();
  const int n_way = static_cast<int>(classes.size());
  LabeledDataset train, test;
  train.dim = test.dim = d;
  train.classification = test.classification = true;
  train.source_tag = test.source_tag = SourceTag::downstream;
  std::vector<double> x(static_cast<std::size_t>(d));
  for (int ci = 0; ci < n_way; ++ci) {
    Rng rng = Rng::derive(seed, 0x66756c6cULL, static_cast<std::uint64_t>(ci));
    std::vector<std::vector<double>> draws;
    for (int i = 0; i < per_class; ++i) {
      task.draw_class_x(classes[static_cast<std::size_t>(ci)], rng, x);
      draws.emplace_back(x.begin(), x.end());
    }
    // stratified split: shuffle within the class, first k_train go to train
    std::vector<int> order(static_cast<std::size_t>(per_class));
    for (int i = 0; i < per_class; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    for (int i = 0; i < per_class; ++i) {
      auto& dst = i < k_train ? train : test;
      dst.push_back(draws[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])],
                    static_cast<double>(ci));
    }
  }

  FinetuneOutput ft = finetune(ckpt, train, n_way, config);
  TransferResult res;
  res.checkpoint_id = ckpt.id;
  res.protocol = TransferProtocol::full;
  res.train_accuracy = ft.train_accuracy;
  res.accuracy = classification_accuracy(ft.spec, ft.params, test);
  return res;
}

TransferResult eval_fewshot(const Checkpoint& ckpt, const TaskFamily& task,
                            const FewShotProtocol& protocol,
                            const FinetuneConfig& config) {
  protocol.validate();
  if (!task.classification())
    throw std::invalid_argument("eval_fewshot: classification task required");
  const auto& classes = task.side_classes(Side::downstream);
  if (static_cast<int>(classes.size()) < protocol.n_way)
    throw std::invalid_argument("eval_fewshot: fewer downstream classes than n_way");

  const int d = task.input_dim();
  std::vector<double> task_acc(static_cast<std::size_t>(protocol.n_tasks));
  std::vector<double> task_train_acc(static_cast<std::size_t>(protocol.n_tasks));

#pragma omp parallel for schedule(dynamic)
  for (int ti = 0; ti < protocol.n_tasks; ++ti) {
    Rng rng = Rng::derive(protocol.seed, 0x66736870ULL, static_cast<std::uint64_t>(ti));
    std::vector<int> chosen = classes;
    rng.shuffle(chosen);
    chosen.resize(static_cast<std::size_t>(protocol.n_way));

    LabeledDataset train;
    train.dim = d;
    train.classification = true;
    train.source_tag = SourceTag::downstream;
    std::vector<double> x(static_cast<std::size_t>(d));
    for (int w = 0; w < protocol.n_way; ++w)
      for (int k = 0; k < protocol.k_shot; ++k) {
        task.draw_class_x(chosen[static_cast<std::size_t>(w)], rng, x);
        train.push_back(x, static_cast<double>(w));
      }

    FinetuneConfig fcfg = config;
    fcfg.seed = Rng::derive(protocol.seed, 0x66737365ULL,
                            static_cast<std::uint64_t>(ti))
                    .next();
    FinetuneOutput ft = finetune(ckpt, train, protocol.n_way, fcfg);

    LabeledDataset test;  // fresh draws from the generating distribution
    test.dim = d;
    test.classification = true;
    test.source_tag = SourceTag::downstream;
    for (int w = 0; w < protocol.n_way; ++w)
      for (int k = 0; k < protocol.test_per_class; ++k) {
        task.draw_class_x(chosen[static_cast<std::size_t>(w)], rng, x);
        test.push_back(x, static_cast<double>(w));
      }
    task_acc[static_cast<std::size_t>(ti)] =
        classification_accuracy(ft.spec, ft.params, test);
    task_train_acc[static_cast<std::size_t>(ti)] = ft.train_accuracy;
  }

  TransferResult res;
  res.checkpoint_id = ckpt.id;
  res.protocol = TransferProtocol::fewshot;
  res.per_task_accuracies = std::move(task_acc);
  res.accuracy = deterministic_mean(res.per_task_accuracies);
  res.train_accuracy = deterministic_mean(task_train_acc);
  return res;
}

}  // namespace fecs
