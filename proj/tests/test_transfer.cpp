#include <doctest.h>

#include <cmath>
#include <vector>

#include "fecs/pretrain.hpp"
#include "fecs/task.hpp"
#include "fecs/transfer.hpp"
#include "test_util.hpp"

using namespace fecs;
using namespace fecs::test;

namespace {

Checkpoint make_ckpt(const ModelSpec& spec, ParamVector params,
                     const std::string& id = "ck", long step = 0) {
  Checkpoint c;
  c.spec = spec;
  c.params = std::move(params);
  c.id = id;
  c.step = step;
  return c;
}

// backbone that maps x to tanh of (+-x1, +-x2): linearly separates any
// clusters that are separated in input space
Checkpoint axis_feature_ckpt() {
  const ModelSpec spec = small_mlp(2, {4}, 3);
  ParamVector p;
  p.values.assign(static_cast<std::size_t>(spec.param_count()), 0.0);
  p.backbone_boundary = spec.backbone_param_count();
  const double w1[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < 2; ++i)
      p.values[static_cast<std::size_t>(o) * 2 + static_cast<std::size_t>(i)] = w1[o][i];
  return make_ckpt(spec, std::move(p));
}

FinetuneConfig ft_config(double head_lr, double backbone_lr, int steps,
                         std::uint64_t seed, int batch = 0) {
  FinetuneConfig c;
  c.head_lr = head_lr;
  c.backbone_lr = backbone_lr;
  c.steps = steps;
  c.batch_size = batch;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("finetune: zero steps keeps the backbone bitwise and a fresh head") {
  const Checkpoint ck = axis_feature_ckpt();
  LabeledDataset d;
  d.dim = 2;
  d.classification = true;
  d.push_back(std::vector<double>{1.0, 0.0}, 0.0);
  d.push_back(std::vector<double>{-1.0, 0.0}, 1.0);
  const auto a = finetune(ck, d, 2, ft_config(0.1, 0.0, 0, 5));
  const auto b = finetune(ck, d, 2, ft_config(0.1, 0.0, 0, 5));
  CHECK(a.spec.head_dim == 2);
  for (int j = 0; j < ck.params.backbone_boundary; ++j)
    CHECK(a.params.values[static_cast<std::size_t>(j)] ==
          ck.params.values[static_cast<std::size_t>(j)]);
  CHECK(a.params.values == b.params.values);  // fresh head is seed-determined
  const auto c = finetune(ck, d, 2, ft_config(0.1, 0.0, 0, 6));
  CHECK(c.params.values != a.params.values);  // different seed, different head
}

TEST_CASE("finetune: zero backbone rate freezes the backbone bitwise") {
  const Checkpoint ck = axis_feature_ckpt();
  LabeledDataset d;
  d.dim = 2;
  d.classification = true;
  Rng rng = Rng::seeded(31);
  for (int i = 0; i < 40; ++i) {
    const double cls = static_cast<double>(rng.below(3));
    std::vector<double> x = {rng.normal() + 3.0 * (cls == 0 ? 1.0 : -1.0),
                             rng.normal() + 3.0 * (cls == 2 ? 1.0 : 0.0)};
    d.push_back(x, cls);
  }
  const auto out = finetune(ck, d, 3, ft_config(0.2, 0.0, 200, 7));
  for (int j = 0; j < ck.params.backbone_boundary; ++j)
    CHECK(out.params.values[static_cast<std::size_t>(j)] ==
          ck.params.values[static_cast<std::size_t>(j)]);
}

TEST_CASE("finetune: separable two-class set reaches train accuracy 1") {
  const Checkpoint ck = axis_feature_ckpt();
  LabeledDataset d;
  d.dim = 2;
  d.classification = true;
  Rng rng = Rng::seeded(33);
  for (int i = 0; i < 30; ++i) {
    const int cls = static_cast<int>(rng.below(2));
    d.push_back(std::vector<double>{(cls == 0 ? 3.0 : -3.0) + 0.3 * rng.normal(),
                                    0.3 * rng.normal()},
                static_cast<double>(cls));
  }
  const auto out = finetune(ck, d, 2, ft_config(0.5, 0.0, 400, 9));
  CHECK(out.train_accuracy == 1.0);
}

TEST_CASE("finetune rejects labels outside the new head range") {
  const Checkpoint ck = axis_feature_ckpt();
  LabeledDataset d;
  d.dim = 2;
  d.classification = true;
  d.push_back(std::vector<double>{0.0, 0.0}, 5.0);
  CHECK_THROWS_AS(finetune(ck, d, 3, ft_config(0.1, 0.0, 10, 1)),
                  std::invalid_argument);
}

TEST_CASE("FinetuneConfig enforces limited fine-tuning") {
  FinetuneConfig c = ft_config(0.01, 0.5, 10, 1);
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);  // backbone faster than head
}

TEST_CASE("eval_full: trained checkpoint beats the untrained-head baseline") {
  const TaskFamily task = make_cluster_task(16, 2, 5.0, 0.8, 12, 4, 51);
  const ModelSpec spec = small_mlp(2, {12}, 12);
  const LabeledDataset pre = sample_local(task, Side::pretrain, 600, 3);
  PretrainConfig pc;
  pc.learning_rate = 0.3;
  pc.batch_size = 64;
  pc.steps = 1200;
  pc.checkpoint_every = 1200;
  pc.seed = 4;
  const auto ckpts = sgd_train(spec, pre, pc);
  const Checkpoint& trained = ckpts.back();

  const FinetuneConfig cfg = ft_config(0.2, 1e-4, 120, 11, 32);
  const TransferResult res = eval_full(trained, task, cfg, 100, 0.8, 21);
  // paired control: identical split and head seed, zero training steps
  FinetuneConfig zero = cfg;
  zero.steps = 0;
  const TransferResult baseline = eval_full(trained, task, zero, 100, 0.8, 21);
  CHECK(res.accuracy >= baseline.accuracy + 0.2);
  CHECK(res.accuracy >= 0.0);
  CHECK(res.accuracy <= 1.0);
  CHECK(res.protocol == TransferProtocol::full);
}

TEST_CASE("eval_full: indistinguishable classes score near chance") {
  // all class means coincide: labels carry no signal
  TaskFamily task = make_cluster_task(6, 2, 3.0, 1.0, 4, 2, 53);
  for (auto& m : task.class_means) m = {0.0, 0.0};
  const Checkpoint ck = axis_feature_ckpt();
  const TransferResult res =
      eval_full(ck, task, ft_config(0.1, 0.0, 150, 13), 500, 0.8, 23);
  CHECK(std::abs(res.accuracy - 0.5) < 0.05);  // C = 2 downstream classes
}

TEST_CASE("eval_full: deterministic given the seed") {
  const TaskFamily task = make_cluster_task(8, 2, 4.0, 1.0, 6, 2, 55);
  const Checkpoint ck = axis_feature_ckpt();
  const FinetuneConfig cfg = ft_config(0.2, 0.0, 60, 15);
  const TransferResult a = eval_full(ck, task, cfg, 40, 0.8, 25);
  const TransferResult b = eval_full(ck, task, cfg, 40, 0.8, 25);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.train_accuracy == b.train_accuracy);
}

TEST_CASE("eval_full: stratification errors") {
  const TaskFamily task = make_cluster_task(8, 2, 4.0, 1.0, 6, 2, 57);
  const Checkpoint ck = axis_feature_ckpt();
  CHECK_THROWS_AS(eval_full(ck, task, ft_config(0.1, 0.0, 10, 1), 1, 0.8, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(eval_full(ck, task, ft_config(0.1, 0.0, 10, 1), 10, 1.5, 1),
                  std::invalid_argument);
}

TEST_CASE("eval_fewshot: generous shots on well-separated clusters") {
  const TaskFamily task = make_cluster_task(8, 2, 8.0, 0.5, 6, 2, 59);
  const Checkpoint ck = axis_feature_ckpt();
  FewShotProtocol proto;
  proto.n_way = 2;
  proto.k_shot = 25;
  proto.n_tasks = 1;
  proto.test_per_class = 100;
  proto.seed = 27;
  const TransferResult res =
      eval_fewshot(ck, task, proto, ft_config(0.5, 0.0, 150, 17));
  REQUIRE(res.per_task_accuracies.size() == 1);
  CHECK(res.accuracy > 0.9);
}

TEST_CASE("eval_fewshot: untrained checkpoint clears the chance floor") {
  const TaskFamily task = make_cluster_task(16, 3, 4.0, 1.0, 10, 6, 61);
  const ModelSpec spec = small_mlp(3, {8}, 10);
  const Checkpoint ck = make_ckpt(spec, random_params(spec, 63));
  FewShotProtocol proto;
  proto.n_way = 5;
  proto.k_shot = 5;
  proto.n_tasks = 30;
  proto.test_per_class = 40;
  proto.seed = 29;
  const TransferResult res =
      eval_fewshot(ck, task, proto, ft_config(0.1, 1e-4, 100, 19));
  double sd = 0.0;
  for (double a : res.per_task_accuracies)
    sd += (a - res.accuracy) * (a - res.accuracy);
  sd = std::sqrt(sd / (static_cast<double>(proto.n_tasks) - 1.0) /
                 static_cast<double>(proto.n_tasks));
  CHECK(res.accuracy >= 0.2 - 3.0 * sd);
  for (double a : res.per_task_accuracies) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("eval_fewshot: per-task mean and reproducibility") {
  const TaskFamily task = make_cluster_task(8, 2, 5.0, 1.0, 6, 2, 65);
  const Checkpoint ck = axis_feature_ckpt();
  FewShotProtocol proto;
  proto.n_way = 2;
  proto.k_shot = 3;
  proto.n_tasks = 12;
  proto.test_per_class = 20;
  proto.seed = 31;
  const FinetuneConfig cfg = ft_config(0.3, 0.0, 40, 21);
  const TransferResult a = eval_fewshot(ck, task, proto, cfg);
  REQUIRE(a.per_task_accuracies.size() == 12);
  double mean = 0.0;
  for (double v : a.per_task_accuracies) mean += v;
  mean /= 12.0;
  CHECK(std::abs(mean - a.accuracy) < 1e-12);
  const TransferResult b = eval_fewshot(ck, task, proto, cfg);
  CHECK(a.per_task_accuracies == b.per_task_accuracies);
}

TEST_CASE("eval_fewshot: protocol errors on too few classes") {
  const TaskFamily task = make_cluster_task(8, 2, 5.0, 1.0, 6, 2, 67);
  const Checkpoint ck = axis_feature_ckpt();
  FewShotProtocol proto;
  proto.n_way = 5;  // only 2 downstream classes exist
  proto.seed = 1;
  CHECK_THROWS_AS(eval_fewshot(ck, task, proto, ft_config(0.1, 0.0, 10, 1)),
                  std::invalid_argument);
}
