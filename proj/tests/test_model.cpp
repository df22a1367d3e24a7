#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "fecs/errors.hpp"
#include "fecs/model.hpp"
#include "fecs/rng.hpp"
#include "test_util.hpp"

using namespace fecs;
using namespace fecs::test;

namespace {

// independent straight-line forward pass: explicit matrices, no shared code
std::vector<double> oracle_forward(const ModelSpec& spec,
                                   const std::vector<double>& w,
                                   std::vector<double> x) {
  std::size_t off = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int a = spec.fan_in(l), b = spec.fan_out(l);
    std::vector<double> z(static_cast<std::size_t>(b));
    for (int o = 0; o < b; ++o) {
      double s = w[off + static_cast<std::size_t>(a) * b + o];  // bias
      for (int i = 0; i < a; ++i)
        s += w[off + static_cast<std::size_t>(o) * a + i] * x[static_cast<std::size_t>(i)];
      z[static_cast<std::size_t>(o)] = s;
    }
    off += static_cast<std::size_t>(a + 1) * b;
    if (l + 1 < spec.layer_count()) {
      for (double& v : z)
        v = spec.activation == Activation::tanh ? std::tanh(v) : std::max(0.0, v);
    }
    x = std::move(z);
  }
  return x;
}

std::vector<double> finite_difference(const LossFunction& loss,
                                      const ParamVector& p, double h) {
  std::vector<double> g(p.size());
  std::vector<double> w = p.values;
  for (std::size_t j = 0; j < w.size(); ++j) {
    const double orig = w[j];
    w[j] = orig + h;
    const double up = loss.value(w);
    w[j] = orig - h;
    const double dn = loss.value(w);
    w[j] = orig;
    g[j] = (up - dn) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("forward: zero parameters give the uniform softmax") {
  const ModelSpec spec = small_mlp(3, {5}, 4);
  ParamVector p;
  p.values.assign(static_cast<std::size_t>(spec.param_count()), 0.0);
  p.backbone_boundary = spec.backbone_param_count();
  const Predictive out = forward(spec, p, std::vector<double>{0.3, -1.0, 2.0});
  REQUIRE(out.probs.size() == 4);
  for (double v : out.probs) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("forward: identity linear gaussian model returns its input") {
  ModelSpec spec = small_mlp(1, {}, 1, Activation::tanh,
                             OutputKind::gaussian_fixed_sigma);
  ParamVector p;
  p.values = {1.0, 0.0};  // weight, bias
  p.backbone_boundary = 0;
  const Predictive out = forward(spec, p, std::vector<double>{2.0});
  CHECK(out.mean[0] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("forward matches an independent matrix-product oracle") {
  const ModelSpec spec = small_mlp(2, {8}, 3);
  const ParamVector p = random_params(spec, 42);
  Rng rng = Rng::seeded(7);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x = {rng.normal(), rng.normal()};
    const auto expect = oracle_forward(spec, p.values, x);
    detail::Workspace ws;
    std::vector<double> got(3);
    detail::forward_raw(spec, p.values, x, ws, got);
    for (int k = 0; k < 3; ++k)
      CHECK(got[static_cast<std::size_t>(k)] ==
            doctest::Approx(expect[static_cast<std::size_t>(k)]).epsilon(1e-10));
  }
}

TEST_CASE("forward rejects dimension mismatches") {
  const ModelSpec spec = small_mlp(3, {4}, 2);
  const ParamVector p = random_params(spec, 1);
  CHECK_THROWS_AS(forward(spec, p, std::vector<double>{1.0, 2.0}),
                  std::invalid_argument);
  ParamVector bad = p;
  bad.values.pop_back();
  CHECK_THROWS_AS(forward(spec, bad, std::vector<double>{1.0, 2.0, 3.0}),
                  std::invalid_argument);
}

TEST_CASE("empirical_nll: certain model scores zero") {
  // +-1000 logits saturate the softmax; the log-loss underflows to exactly 0
  ModelSpec spec = small_mlp(1, {}, 2);
  ParamVector p;
  p.values = {0.0, 0.0, 1000.0, -1000.0};  // weights(2x1), biases(2)
  p.backbone_boundary = 0;
  LabeledDataset d;
  d.dim = 1;
  d.classification = true;
  d.push_back(std::vector<double>{0.0}, 0.0);
  d.push_back(std::vector<double>{1.0}, 0.0);
  CHECK(empirical_nll(spec, p, d) == 0.0);
}

TEST_CASE("empirical_nll: uniform predictive scores ln 2") {
  ModelSpec spec = small_mlp(2, {}, 2);
  ParamVector p;
  p.values.assign(static_cast<std::size_t>(spec.param_count()), 0.0);
  p.backbone_boundary = 0;
  const LabeledDataset d = random_classification(spec, 17, 3);
  CHECK(empirical_nll(spec, p, d) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("empirical_nll matches a hand-summed 3-example oracle") {
  ModelSpec spec = small_mlp(1, {}, 3);
  ParamVector p;
  // weights chosen so logits at x are (x+1, 2x, -x+0.5)
  p.values = {1.0, 2.0, -1.0, 1.0, 0.0, 0.5};
  p.backbone_boundary = 0;
  LabeledDataset d;
  d.dim = 1;
  d.classification = true;
  const std::vector<double> xs = {0.2, -1.3, 0.7};
  const std::vector<int> labels = {0, 2, 1};
  for (int i = 0; i < 3; ++i)
    d.push_back(std::vector<double>{xs[static_cast<std::size_t>(i)]},
                labels[static_cast<std::size_t>(i)]);
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double x = xs[static_cast<std::size_t>(i)];
    const double z[3] = {x + 1.0, 2.0 * x, -x + 0.5};
    const double lse = std::log(std::exp(z[0]) + std::exp(z[1]) + std::exp(z[2]));
    expect += lse - z[labels[static_cast<std::size_t>(i)]];
  }
  expect /= 3.0;
  CHECK(empirical_nll(spec, p, d) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("empirical_nll rejects an empty dataset") {
  const ModelSpec spec = small_mlp(2, {}, 2);
  const ParamVector p = random_params(spec, 1);
  LabeledDataset d;
  d.dim = 2;
  CHECK_THROWS_AS(empirical_nll(spec, p, d), std::invalid_argument);
}

TEST_CASE("gradient of the half-norm-squared penalty is the identity") {
  QuadraticPenalty loss(std::vector<double>(3, 0.0), 0.5);
  ParamVector p;
  p.values = {1.0, -2.0, 3.0};
  p.backbone_boundary = 3;
  const auto g = gradient(loss, p);
  CHECK(g[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(-2.0).epsilon(1e-15));
  CHECK(g[2] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("reverse-mode gradient agrees with central finite differences") {
  const ModelSpec spec = small_mlp(3, {6, 4}, 3);
  const LabeledDataset d = random_classification(spec, 8, 11);
  DatasetNllLoss loss(spec, d);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ParamVector p = random_params(spec, 100 + s);
    const auto g = gradient(loss, p);
    const auto fd = finite_difference(loss, p, 1e-5);
    double gmax = 0.0;
    for (double v : fd) gmax = std::max(gmax, std::abs(v));
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double denom = std::max({std::abs(g[j]), std::abs(fd[j]), 1e-6});
      CHECK(std::abs(g[j] - fd[j]) / denom < 1e-4);
    }
  }
}

TEST_CASE("linear regression gradient matches the normal-equations form") {
  ModelSpec spec = small_mlp(2, {}, 1, Activation::tanh,
                             OutputKind::gaussian_fixed_sigma);
  const LabeledDataset d = random_regression(spec, 12, 5);
  ParamVector p = random_params(spec, 9);
  DatasetNllLoss loss(spec, d);
  const auto g = gradient(loss, p);
  // closed form: X^T (X w - y) / N with a bias column appended
  const std::size_t n = d.size();
  std::vector<double> expect(3, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = d.x(i);
    const double r = p.values[0] * x[0] + p.values[1] * x[1] + p.values[2] - d.ys[i];
    expect[0] += r * x[0];
    expect[1] += r * x[1];
    expect[2] += r;
  }
  for (double& v : expect) v /= static_cast<double>(n);
  for (int j = 0; j < 3; ++j)
    CHECK(g[static_cast<std::size_t>(j)] ==
          doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-10));
}

TEST_CASE("gradient propagates non-finite losses") {
  ModelSpec spec = small_mlp(1, {}, 1, Activation::tanh,
                             OutputKind::gaussian_fixed_sigma);
  LabeledDataset d;
  d.dim = 1;
  d.classification = false;
  d.push_back(std::vector<double>{1.0}, 0.0);
  DatasetNllLoss loss(spec, d);
  ParamVector p;
  p.values = {std::numeric_limits<double>::infinity(), 0.0};
  p.backbone_boundary = 0;
  CHECK_THROWS_AS(gradient(loss, p), NonFiniteLossError);
}

TEST_CASE("softmax outputs sum to one for random finite logits") {
  Rng rng = Rng::seeded(2024);
  for (int rep = 0; rep < 100; ++rep) {
    const int c = 2 + static_cast<int>(rng.below(6));
    const ModelSpec spec = small_mlp(4, {5}, c);
    const ParamVector p = random_params(spec, 500 + static_cast<std::uint64_t>(rep));
    std::vector<double> x(4);
    for (double& v : x) v = 10.0 * rng.normal();
    const Predictive out = forward(spec, p, x);
    const double total = std::accumulate(out.probs.begin(), out.probs.end(), 0.0);
    CHECK(std::abs(total - 1.0) < 1e-9);
    for (double v : out.probs) CHECK(v >= 0.0);
  }
}

TEST_CASE("empirical_nll is permutation invariant within tolerance") {
  const ModelSpec spec = small_mlp(3, {7}, 4);
  const ParamVector p = random_params(spec, 21);
  LabeledDataset d = random_classification(spec, 257, 22);
  const double base = empirical_nll(spec, p, d);
  // reverse the dataset
  LabeledDataset r;
  r.dim = d.dim;
  r.classification = true;
  for (std::size_t i = d.size(); i-- > 0;) r.push_back(d.x(i), d.ys[i]);
  CHECK(std::abs(empirical_nll(spec, p, r) - base) < 1e-12);
}

TEST_CASE("head replacement preserves the backbone bitwise") {
  const ModelSpec spec = small_mlp(3, {6}, 4);
  const ParamVector p = random_params(spec, 33);
  Rng rng = Rng::seeded(99);
  auto [spec7, p7] = replace_head(spec, p, 7, rng);
  CHECK(spec7.head_dim == 7);
  CHECK(p7.backbone_boundary == p.backbone_boundary);
  for (int j = 0; j < p.backbone_boundary; ++j)
    CHECK(p7.values[static_cast<std::size_t>(j)] == p.values[static_cast<std::size_t>(j)]);

  // restoring the original head values reproduces forward outputs bitwise
  auto [spec4, p4] = replace_head(spec7, p7, 4, rng);
  for (std::size_t j = static_cast<std::size_t>(p.backbone_boundary); j < p.size(); ++j)
    p4.values[j] = p.values[j];
  const std::vector<double> x = {0.1, -0.4, 0.9};
  const Predictive a = forward(spec, p, x);
  const Predictive b = forward(spec4, p4, x);
  for (std::size_t k = 0; k < a.probs.size(); ++k) CHECK(a.probs[k] == b.probs[k]);
}

TEST_CASE("ModelSpec parameter count matches the layer formula") {
  const ModelSpec spec = small_mlp(3, {5, 7}, 2);
  // (3+1)*5 + (5+1)*7 + (7+1)*2
  CHECK(spec.param_count() == 20 + 42 + 16);
  CHECK(spec.head_param_count() == 16);
  const ParamVector p = random_params(spec, 3);
  const auto mask = p.backbone_mask();
  int head = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) ++head;
  CHECK(head == 16);
  // head coordinates are the contiguous tail
  for (std::size_t i = 0; i < mask.size(); ++i)
    CHECK(mask[i] == (static_cast<int>(i) < p.backbone_boundary ? 1 : 0));
}
