#include <doctest.h>

#include <cmath>
#include <vector>

#include <omp.h>

#include "fecs/model.hpp"
#include "fecs/reduce.hpp"
#include "test_util.hpp"

using namespace fecs;
using namespace fecs::test;

TEST_CASE("deterministic_sum: index order below the cutoff, pairwise above") {
  std::vector<double> v(10, 0.125);
  CHECK(deterministic_sum(v) == 1.25);
  std::vector<double> big(5000);
  Rng rng = Rng::seeded(4);
  for (double& x : big) x = rng.uniform(-1.0, 1.0);
  const double once = deterministic_sum(big);
  CHECK(once == deterministic_sum(big));  // pure function of the array
  double naive = 0.0;
  for (double x : big) naive += x;
  CHECK(once == doctest::Approx(naive).epsilon(1e-12));
}

TEST_CASE("parallel kernels match the serial reference loops") {
  const ModelSpec spec = small_mlp(5, {9, 7}, 4);
  const ParamVector p = random_params(spec, 8);
  const LabeledDataset d = random_classification(spec, 1030, 9);

  const double nll_par = batch_nll(spec, p.values, d);
  const double nll_ser = batch_nll_serial(spec, p.values, d);
  CHECK(std::abs(nll_par - nll_ser) < 1e-12);

  std::vector<double> gp(p.size()), gs(p.size());
  const double lp = batch_nll_grad(spec, p.values, d, {}, gp.data());
  const double ls = batch_nll_grad_serial(spec, p.values, d, {}, gs.data());
  CHECK(std::abs(lp - ls) < 1e-12);
  for (std::size_t j = 0; j < gp.size(); ++j)
    CHECK(gp[j] == doctest::Approx(gs[j]).epsilon(1e-12));
}

TEST_CASE("kernel output is bitwise identical across thread counts") {
  const ModelSpec spec = small_mlp(4, {8}, 3);
  const ParamVector p = random_params(spec, 12);
  const LabeledDataset d = random_classification(spec, 2050, 13);

  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const double nll1 = batch_nll(spec, p.values, d);
  std::vector<double> g1(p.size());
  batch_nll_grad(spec, p.values, d, {}, g1.data());
  const double acc1 = classification_accuracy(spec, p, d);

  omp_set_num_threads(saved > 1 ? saved : 4);
  const double nll2 = batch_nll(spec, p.values, d);
  std::vector<double> g2(p.size());
  batch_nll_grad(spec, p.values, d, {}, g2.data());
  const double acc2 = classification_accuracy(spec, p, d);
  omp_set_num_threads(saved);

  CHECK(nll1 == nll2);
  CHECK(acc1 == acc2);
  for (std::size_t j = 0; j < g1.size(); ++j) CHECK(g1[j] == g2[j]);
}

TEST_CASE("subset indices evaluate exactly the selected examples") {
  const ModelSpec spec = small_mlp(3, {5}, 2);
  const ParamVector p = random_params(spec, 77);
  const LabeledDataset d = random_classification(spec, 60, 78);
  std::vector<int> idx = {3, 17, 59, 3};  // repeats allowed
  LabeledDataset sub;
  sub.dim = d.dim;
  sub.classification = true;
  for (int i : idx) sub.push_back(d.x(static_cast<std::size_t>(i)), d.ys[static_cast<std::size_t>(i)]);
  CHECK(batch_nll(spec, p.values, d, idx) ==
        doctest::Approx(batch_nll(spec, p.values, sub)).epsilon(1e-15));
}
