// Timing comparison of the OpenMP batch kernels against the serial reference
// loops, plus a consistency check between the two paths.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include <omp.h>

#include "fecs/model.hpp"
#include "fecs/rng.hpp"

using namespace fecs;
namespace chrono = std::chrono;

namespace {

LabeledDataset random_dataset(const ModelSpec& spec, int n, Rng& rng) {
  LabeledDataset d;
  d.dim = spec.input_dim;
  d.classification = true;
  std::vector<double> x(static_cast<std::size_t>(spec.input_dim));
  for (int i = 0; i < n; ++i) {
    for (double& v : x) v = rng.normal();
    d.push_back(x, static_cast<double>(rng.below(static_cast<std::uint64_t>(spec.head_dim))));
  }
  return d;
}

template <class F>
double time_ms(int reps, F&& f) {
  const auto t0 = chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) f();
  const auto t1 = chrono::steady_clock::now();
  return chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  ModelSpec spec;
  spec.input_dim = 8;
  spec.hidden_widths = {32, 32};
  spec.head_dim = 16;
  spec.activation = Activation::tanh;

  Rng rng = Rng::seeded(1);
  ParamVector params = init_params(spec, rng);

  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%8s %12s %12s %8s %12s %12s %8s\n", "n", "nll_ser(ms)",
              "nll_omp(ms)", "speedup", "grad_ser(ms)", "grad_omp(ms)", "speedup");

  for (int n : {1024, 4096, 16384, 65536}) {
    LabeledDataset data = random_dataset(spec, n, rng);
    const int reps = n <= 4096 ? 20 : 5;

    double v_ser = 0.0, v_omp = 0.0;
    const double t_nll_ser =
        time_ms(reps, [&] { v_ser = batch_nll_serial(spec, params.values, data); });
    const double t_nll_omp =
        time_ms(reps, [&] { v_omp = batch_nll(spec, params.values, data); });
    if (std::abs(v_ser - v_omp) > 1e-10 * std::abs(v_ser)) {
      std::printf("nll mismatch at n=%d: %.17g vs %.17g\n", n, v_ser, v_omp);
      return 1;
    }

    std::vector<double> g_ser(params.size()), g_omp(params.size());
    const double t_grad_ser = time_ms(reps, [&] {
      batch_nll_grad_serial(spec, params.values, data, {}, g_ser.data());
    });
    const double t_grad_omp = time_ms(
        reps, [&] { batch_nll_grad(spec, params.values, data, {}, g_omp.data()); });
    double max_diff = 0.0;
    for (std::size_t j = 0; j < g_ser.size(); ++j)
      max_diff = std::max(max_diff, std::abs(g_ser[j] - g_omp[j]));
    if (max_diff > 1e-12) {
      std::printf("grad mismatch at n=%d: max diff %.3g\n", n, max_diff);
      return 1;
    }

    std::printf("%8d %12.3f %12.3f %8.2f %12.3f %12.3f %8.2f\n", n, t_nll_ser,
                t_nll_omp, t_nll_ser / t_nll_omp, t_grad_ser, t_grad_omp,
                t_grad_ser / t_grad_omp);
  }
  return 0;
}
