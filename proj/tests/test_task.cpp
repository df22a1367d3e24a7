#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fecs/io.hpp"
#include "fecs/task.hpp"
#include "test_util.hpp"

using namespace fecs;
using namespace fecs::test;

namespace {

TaskFamily affine_covariate_task(double s0, double s1, double mu0, double mu1,
                                 std::uint64_t seed = 5) {
  ModelSpec teacher = small_mlp(1, {}, 1, Activation::tanh,
                                OutputKind::gaussian_fixed_sigma);
  ParamVector tp;
  tp.values = {1.0, 0.0};
  tp.backbone_boundary = 0;
  return make_covariate_shift_task({mu0}, s0, {mu1}, s1, teacher, tp, seed);
}

TaskFamily affine_nuisance_task(double s0, double s1, std::uint64_t seed = 5) {
  ModelSpec teacher = small_mlp(1, {}, 1, Activation::tanh,
                                OutputKind::gaussian_fixed_sigma);
  ParamVector tp;
  tp.values = {1.5, -0.25};
  tp.backbone_boundary = 0;
  return make_nuisance_task(s0, s1, teacher, tp, seed);
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j]) ++i;
    else ++j;
    const double fa = static_cast<double>(i) / a.size();
    const double fb = static_cast<double>(j) / b.size();
    d = std::max(d, std::abs(fa - fb));
  }
  return d;
}

}  // namespace

TEST_CASE("sample: identical covariate distributions pass a two-sample KS test") {
  const TaskFamily t = affine_covariate_task(1.0, 1.0, 0.5, 0.5);
  const LabeledDataset a = sample(t, Side::pretrain, 10000, 1);
  const LabeledDataset b = sample(t, Side::downstream, 10000, 2);
  std::vector<double> xa(a.xs), xb(b.xs);
  // 1% critical value for n=m=10000: 1.628 * sqrt(2/10000)
  const double crit = 1.628 * std::sqrt(2.0 / 10000.0);
  CHECK(ks_statistic(xa, xb) < crit);
}

TEST_CASE("sample: cluster labels always belong to the side's class set") {
  const TaskFamily t = make_cluster_task(10, 3, 4.0, 1.0, 7, 3, 11);
  for (Side s : {Side::pretrain, Side::downstream}) {
    const auto& ids = t.side_classes(s);
    const LabeledDataset d = sample(t, s, 500, 3);
    for (double y : d.ys)
      CHECK(std::binary_search(ids.begin(), ids.end(), static_cast<int>(y)));
  }
}

TEST_CASE("sample: gaussian moments match within four standard errors") {
  const double mu = -1.25, sd = 1.75;
  const TaskFamily t = affine_covariate_task(sd, 1.0, mu, 0.0);
  const LabeledDataset d = sample(t, Side::pretrain, 10000, 7);
  const double n = 10000.0;
  double mean = 0.0;
  for (double x : d.xs) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : d.xs) var += (x - mean) * (x - mean);
  var /= n - 1.0;
  CHECK(std::abs(mean - mu) < 4.0 * sd / std::sqrt(n));
  CHECK(std::abs(var - sd * sd) < 4.0 * sd * sd * std::sqrt(2.0 / (n - 1.0)));
}

TEST_CASE("sample is deterministic given the seed") {
  const TaskFamily t = make_cluster_task(8, 2, 3.0, 0.7, 6, 2, 13);
  const LabeledDataset a = sample(t, Side::pretrain, 40, 9);
  const LabeledDataset b = sample(t, Side::pretrain, 40, 9);
  CHECK(a.xs == b.xs);
  CHECK(a.ys == b.ys);
}

TEST_CASE("shift_constants: covariate-shift closed form against numerical maximization") {
  const TaskFamily t = affine_covariate_task(2.0, 1.0, 0.0, 1.0);
  const ShiftConstants sc = shift_constants(t);
  CHECK(sc.D == 0.0);
  // oracle: grid maximization of r1(x)/r0(x)
  double best = 0.0;
  for (double x = -10.0; x <= 10.0; x += 1e-4) {
    const std::vector<double> xv = {x};
    const double lr = t.log_joint(Side::downstream, xv, 1.0) -
                      t.log_joint(Side::pretrain, xv, 1.0);
    best = std::max(best, std::exp(lr));
  }
  CHECK(sc.M == doctest::Approx(best).epsilon(1e-6));
  CHECK(sc.M == doctest::Approx(2.0 * std::exp(1.0 / 6.0)).epsilon(1e-12));
}

TEST_CASE("shift_constants: identical sides give M=1, D=0") {
  const TaskFamily t = affine_covariate_task(1.3, 1.3, 0.4, 0.4);
  const ShiftConstants sc = shift_constants(t);
  CHECK(sc.M == 1.0);
  CHECK(sc.D == 0.0);
}

TEST_CASE("shift_constants: narrow pretraining support gives infinite M") {
  CHECK(!shift_constants(affine_covariate_task(1.0, 2.0, 0.0, 0.0)).m_finite());
  CHECK(!shift_constants(affine_covariate_task(1.0, 1.0, 0.0, 0.5)).m_finite());
  CHECK(!shift_constants(affine_nuisance_task(1.0, 2.0)).m_finite());
}

TEST_CASE("shift_constants: nuisance family") {
  const TaskFamily t = affine_nuisance_task(2.0, 1.0);
  const ShiftConstants sc = shift_constants(t);
  CHECK(sc.M == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(sc.D == doctest::Approx(std::log(2.0) + 1.0 / 8.0 - 0.5).epsilon(1e-15));
  CHECK_THROWS_AS(shift_constants(make_cluster_task(6, 2, 3.0, 1.0, 4, 2, 1)),
                  std::invalid_argument);
}

TEST_CASE("mc_shift_constants: bounded by and converging to the closed form") {
  const TaskFamily t = affine_covariate_task(2.0, 1.0, 0.0, 1.0);
  const ShiftConstants exact = shift_constants(t);
  const ShiftConstants mc = mc_shift_constants(t, 1000000, 17);
  CHECK(mc.monte_carlo);
  CHECK(mc.M <= exact.M * (1.0 + 1e-12));
  CHECK(mc.M > 0.95 * exact.M);
  CHECK(std::abs(mc.D) < 3.0 * std::max(mc.D_std_error, 1e-12));
}

TEST_CASE("mc_shift_constants: identical sides estimate M in [1, 1.01]") {
  const TaskFamily t = affine_covariate_task(1.0, 1.0, 0.0, 0.0);
  const ShiftConstants mc = mc_shift_constants(t, 100000, 23);
  CHECK(mc.M >= 1.0 - 1e-12);
  CHECK(mc.M <= 1.01);
}

TEST_CASE("mc_shift_constants: disjoint label supports are flagged non-finite") {
  const TaskFamily t = make_cluster_task(8, 2, 3.0, 0.8, 6, 2, 29);
  const ShiftConstants mc = mc_shift_constants(t, 2000, 31);
  CHECK(!mc.m_finite());
  CHECK(!std::isfinite(mc.D));
}

TEST_CASE("mc D agrees with the analytic D within three standard errors") {
  const TaskFamily t = affine_nuisance_task(2.0, 1.0);
  const ShiftConstants exact = shift_constants(t);
  const ShiftConstants mc = mc_shift_constants(t, 200000, 37);
  CHECK(std::abs(mc.D - exact.D) < 3.0 * mc.D_std_error);
}

TEST_CASE("population_loss: realizable model has zero K") {
  const TaskFamily t = affine_nuisance_task(1.0, 1.0);
  CHECK(population_loss(t.teacher_spec, t.teacher_params, t, WhichLoss::K,
                        Side::pretrain, 100, 3) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("population_loss: closed-form K matches a Monte-Carlo oracle") {
  const TaskFamily t = affine_covariate_task(1.5, 1.0, 0.5, -0.5);
  ModelSpec model = t.teacher_spec;
  ParamVector w;
  w.values = {0.6, 0.3};  // slope, bias
  w.backbone_boundary = 0;
  const double exact = population_loss(model, w, t, WhichLoss::K, Side::pretrain, 1, 1);

  // oracle: direct Monte Carlo of (1/2) E (f_w - f_t)^2 over x ~ r0
  Rng rng = Rng::seeded(51);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = 0.5 + 1.5 * rng.normal();
    const double df = (0.6 * x + 0.3) - x;
    const double v = 0.5 * df * df;
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  CHECK(std::abs(exact - mean) < 3.0 * se);
}

TEST_CASE("population_loss: L - K is constant in the parameters") {
  SUBCASE("gaussian: exact entropy offset") {
    const TaskFamily t = affine_nuisance_task(1.4, 1.0);
    ModelSpec model = t.teacher_spec;
    ParamVector w1, w2;
    w1.values = {0.2, 0.1};
    w2.values = {-1.0, 2.0};
    w1.backbone_boundary = w2.backbone_boundary = 0;
    const double d1 = population_loss(model, w1, t, WhichLoss::L, Side::pretrain, 64, 9) -
                      population_loss(model, w1, t, WhichLoss::K, Side::pretrain, 64, 9);
    const double d2 = population_loss(model, w2, t, WhichLoss::L, Side::pretrain, 64, 9) -
                      population_loss(model, w2, t, WhichLoss::K, Side::pretrain, 64, 9);
    CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
  }
  SUBCASE("cluster: shared draws make the offset exact") {
    const TaskFamily t = make_cluster_task(6, 2, 3.0, 1.0, 4, 2, 41);
    ModelSpec model = small_mlp(2, {6}, 4);
    const ParamVector w1 = random_params(model, 1);
    const ParamVector w2 = random_params(model, 2);
    const double d1 = population_loss(model, w1, t, WhichLoss::L, Side::pretrain, 512, 9) -
                      population_loss(model, w1, t, WhichLoss::K, Side::pretrain, 512, 9);
    const double d2 = population_loss(model, w2, t, WhichLoss::L, Side::pretrain, 512, 9) -
                      population_loss(model, w2, t, WhichLoss::K, Side::pretrain, 512, 9);
    CHECK(d1 == doctest::Approx(d2).epsilon(1e-10));
  }
}

TEST_CASE("MetaSplit: disjointness and size ordering are enforced") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng = Rng::seeded(s);
    const int total = 4 + static_cast<int>(rng.below(20));
    const int down = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(total / 2 - 1)));
    const int pre = total - down;
    if (pre <= down) continue;
    const MetaSplit split = MetaSplit::contiguous(total, pre, down);
    for (int c : split.downstream_class_ids)
      CHECK(!std::binary_search(split.pretrain_class_ids.begin(),
                                split.pretrain_class_ids.end(), c));
  }
  CHECK_THROWS_AS(MetaSplit::contiguous(4, 2, 2), std::invalid_argument);
}

TEST_CASE("cluster class means sit on the configured sphere") {
  const TaskFamily t = make_cluster_task(9, 4, 5.0, 1.0, 7, 2, 3);
  for (const auto& m : t.class_means) {
    double r2 = 0.0;
    for (double v : m) r2 += v * v;
    CHECK(std::sqrt(r2) == doctest::Approx(5.0).epsilon(1e-12));
  }
}

TEST_CASE("relabel_local maps global ids to contiguous side indices") {
  const TaskFamily t = make_cluster_task(8, 2, 3.0, 1.0, 6, 2, 4);
  const LabeledDataset d = sample(t, Side::downstream, 50, 5);
  const LabeledDataset l = relabel_local(t, Side::downstream, d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int global = d.label(i);
    CHECK(l.label(i) == t.local_label(Side::downstream, global));
    CHECK(l.label(i) >= 0);
    CHECK(l.label(i) < 2);
  }
}

TEST_CASE("dataset CSV round trip") {
  const TaskFamily t = make_cluster_task(6, 3, 3.0, 1.0, 4, 2, 6);
  const LabeledDataset d = sample(t, Side::pretrain, 25, 8);
  const auto dir = scratch_dir("csv_roundtrip");
  write_dataset_csv(d, dir / "data.csv");
  const LabeledDataset r = read_dataset_csv(dir / "data.csv", true, 0);
  CHECK(r.dim == d.dim);
  CHECK(r.xs == d.xs);
  CHECK(r.ys == d.ys);
}
