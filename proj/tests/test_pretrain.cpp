#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include <omp.h>

#include "fecs/errors.hpp"
#include "fecs/io.hpp"
#include "fecs/pretrain.hpp"
#include "test_util.hpp"

using namespace fecs;
using namespace fecs::test;

namespace {

// mean NLL is c + (a+b)^2/2 on this set: every input is 1, every target 0
LabeledDataset unit_regression(int n) {
  LabeledDataset d;
  d.dim = 1;
  d.classification = false;
  for (int i = 0; i < n; ++i) d.push_back(std::vector<double>{1.0}, 0.0);
  return d;
}

PretrainConfig quick_config(double lr, int batch, int steps, int every,
                            std::uint64_t seed) {
  PretrainConfig c;
  c.learning_rate = lr;
  c.batch_size = batch;
  c.steps = steps;
  c.checkpoint_every = every;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("sgd_train: zero learning rate leaves the initialization untouched") {
  const ModelSpec spec = small_mlp(3, {5}, 2);
  const LabeledDataset d = random_classification(spec, 32, 1);
  const PretrainConfig cfg = quick_config(0.0, 8, 50, 50, 7);
  const auto ckpts = sgd_train(spec, d, cfg);
  REQUIRE(ckpts.size() == 1);
  CHECK(ckpts[0].params.values == sgd_initial_params(spec, cfg).values);
}

TEST_CASE("sgd_train: full-batch quadratic follows the geometric recursion") {
  const ModelSpec spec = small_mlp(1, {}, 1, Activation::tanh,
                                   OutputKind::gaussian_fixed_sigma);
  const LabeledDataset d = unit_regression(4);
  const double eta = 0.05;
  const PretrainConfig cfg = quick_config(eta, 4, 30, 1, 3);
  const ParamVector w0 = sgd_initial_params(spec, cfg);
  const double s0 = w0.values[0] + w0.values[1];
  const auto ckpts = sgd_train(spec, d, cfg);
  REQUIRE(ckpts.size() == 30);
  for (std::size_t t = 0; t < ckpts.size(); ++t) {
    // loss (a+b)^2/2 has gradient (a+b) in both coordinates, so the sum
    // contracts by (1 - 2 eta) each step
    const double expect = std::pow(1.0 - 2.0 * eta, static_cast<double>(t + 1)) * s0;
    const double got = ckpts[t].params.values[0] + ckpts[t].params.values[1];
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("sgd_train: momentum zero equals a plain SGD reimplementation bitwise") {
  const ModelSpec spec = small_mlp(4, {6}, 3);
  const LabeledDataset d = random_classification(spec, 64, 2);
  const PretrainConfig cfg = quick_config(0.1, 16, 100, 100, 11);
  const auto ckpts = sgd_train(spec, d, cfg);
  REQUIRE(ckpts.size() == 1);

  // independent loop: no velocity buffer at all
  ParamVector w = sgd_initial_params(spec, cfg);
  MinibatchStream stream = sgd_batch_stream(64, cfg);
  std::vector<double> g(w.size());
  for (int t = 0; t < 100; ++t) {
    auto idx = stream.next(16);
    batch_nll_grad(spec, w.values, d, idx, g.data());
    for (std::size_t j = 0; j < w.size(); ++j)
      w.values[j] -= cfg.learning_rate * g[j];
  }
  CHECK(w.values == ckpts[0].params.values);
}

TEST_CASE("sgd_train: trajectories are bitwise deterministic across thread counts") {
  const ModelSpec spec = small_mlp(3, {8}, 4);
  const LabeledDataset d = random_classification(spec, 300, 5);
  const PretrainConfig cfg = quick_config(0.2, 30, 60, 20, 17);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto a = sgd_train(spec, d, cfg);
  omp_set_num_threads(saved > 1 ? saved : 4);
  const auto b = sgd_train(spec, d, cfg);
  omp_set_num_threads(saved);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].params.values == b[i].params.values);
    CHECK(a[i].train_loss == b[i].train_loss);
  }
}

TEST_CASE("sgd_train: convex full-batch loss is non-increasing below the stable rate") {
  const ModelSpec spec = small_mlp(1, {}, 1, Activation::tanh,
                                   OutputKind::gaussian_fixed_sigma);
  const LabeledDataset d = unit_regression(8);
  // curvature of (a+b)^2/2 along the gradient direction is 2
  const auto ckpts = sgd_train(spec, d, quick_config(0.4, 8, 40, 1, 23));
  for (std::size_t i = 1; i < ckpts.size(); ++i)
    CHECK(ckpts[i].train_loss <= ckpts[i - 1].train_loss + 1e-12);
}

TEST_CASE("sgd_train: divergence raises an error naming the step") {
  const ModelSpec spec = small_mlp(1, {}, 1, Activation::tanh,
                                   OutputKind::gaussian_fixed_sigma);
  LabeledDataset d;
  d.dim = 1;
  d.classification = false;
  for (int i = 0; i < 8; ++i) d.push_back(std::vector<double>{1.0}, 2.0);
  try {
    sgd_train(spec, d, quick_config(1e9, 8, 500, 500, 3));
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.step() > 0);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("sgd_train: checkpoint train_loss matches the saved parameters") {
  const ModelSpec spec = small_mlp(3, {4}, 2);
  const LabeledDataset d = random_classification(spec, 50, 31);
  const auto ckpts = sgd_train(spec, d, quick_config(0.1, 10, 25, 10, 5));
  REQUIRE(ckpts.size() == 3);  // steps 10, 20, 25
  CHECK(ckpts.back().step == 25);
  for (const auto& c : ckpts)
    CHECK(std::abs(c.train_loss - empirical_nll(spec, c.params, d)) < 1e-9);
}

TEST_CASE("checkpoint files round-trip bitwise") {
  const ModelSpec spec = small_mlp(2, {3}, 2);
  const LabeledDataset d = random_classification(spec, 20, 37);
  const auto ckpts = sgd_train(spec, d, quick_config(0.05, 5, 8, 4, 9));
  const auto dir = scratch_dir("ckpt_roundtrip");
  for (const auto& c : ckpts) {
    const auto p = dir / (c.id + ".json");
    save_checkpoint(c, p);
    const Checkpoint r = load_checkpoint(p);
    CHECK(r.params.values == c.params.values);
    CHECK(r.params.backbone_boundary == c.params.backbone_boundary);
    CHECK(r.step == c.step);
    CHECK(r.train_loss == c.train_loss);
    CHECK(r.id == c.id);
    CHECK(r.spec == c.spec);
  }
}

TEST_CASE("run_sweep: single cell emits ceil(steps/every) checkpoints") {
  const ModelSpec spec = small_mlp(2, {3}, 2);
  const LabeledDataset d = random_classification(spec, 24, 41);
  const auto dir = scratch_dir("sweep_single");
  const auto m = run_sweep(spec, d, quick_config(0.1, 6, 25, 10, 0),
                           SweepAxis::learning_rate, {0.1}, {4}, dir);
  REQUIRE(m.cells.size() == 1);
  CHECK(m.cells[0].status == "ok");
  CHECK(m.cells[0].checkpoint_files.size() == 3);
}

TEST_CASE("run_sweep: full grid with distinct checkpoint ids") {
  const ModelSpec spec = small_mlp(2, {3}, 2);
  const LabeledDataset d = random_classification(spec, 24, 43);
  const auto dir = scratch_dir("sweep_grid");
  const auto m = run_sweep(spec, d, quick_config(0.1, 6, 4, 2, 0),
                           SweepAxis::momentum, {0.0, 0.2, 0.4, 0.6},
                           {1, 2, 3, 4, 5}, dir);
  REQUIRE(m.cells.size() == 20);
  std::set<std::string> ids;
  for (const auto& c : m.cells) {
    CHECK(c.status == "ok");
    for (const auto& f : c.checkpoint_files) ids.insert(f);
  }
  CHECK(ids.size() == 40);  // 20 trajectories x 2 checkpoints
}

TEST_CASE("run_sweep: reruns produce byte-identical checkpoint files") {
  const ModelSpec spec = small_mlp(2, {4}, 3);
  const LabeledDataset d = random_classification(spec, 40, 47);
  const auto dir1 = scratch_dir("sweep_rep1");
  const auto dir2 = scratch_dir("sweep_rep2");
  const PretrainConfig base = quick_config(0.15, 8, 12, 6, 0);
  const auto m1 = run_sweep(spec, d, base, SweepAxis::learning_rate, {0.05, 0.2}, {1, 2}, dir1);
  const auto m2 = run_sweep(spec, d, base, SweepAxis::learning_rate, {0.05, 0.2}, {1, 2}, dir2);
  REQUIRE(m1.cells.size() == m2.cells.size());
  for (std::size_t i = 0; i < m1.cells.size(); ++i) {
    REQUIRE(m1.cells[i].checkpoint_files.size() == m2.cells[i].checkpoint_files.size());
    for (std::size_t k = 0; k < m1.cells[i].checkpoint_files.size(); ++k)
      CHECK(hash_file(m1.cells[i].checkpoint_files[k]) ==
            hash_file(m2.cells[i].checkpoint_files[k]));
  }
}

TEST_CASE("run_sweep: divergent cells are recorded, not fatal") {
  const ModelSpec spec = small_mlp(1, {}, 1, Activation::tanh,
                                   OutputKind::gaussian_fixed_sigma);
  LabeledDataset d;
  d.dim = 1;
  d.classification = false;
  for (int i = 0; i < 8; ++i) d.push_back(std::vector<double>{1.0}, 2.0);
  const auto dir = scratch_dir("sweep_diverge");
  const auto m = run_sweep(spec, d, quick_config(0.1, 8, 400, 400, 0),
                           SweepAxis::learning_rate, {0.1, 1e9}, {1}, dir);
  REQUIRE(m.cells.size() == 2);
  CHECK(m.cells[0].status == "ok");
  CHECK(m.cells[1].status.rfind("failed", 0) == 0);
  CHECK(m.cells[1].status.find("step") != std::string::npos);
}

TEST_CASE("config validation rejects bad hyperparameters") {
  PretrainConfig c = quick_config(0.1, 4, 10, 20, 0);
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);  // every > steps
  c = quick_config(0.1, 4, 10, 5, 0);
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.momentum = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
