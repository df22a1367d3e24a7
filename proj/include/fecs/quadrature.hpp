#pragma once

#include <functional>
#include <span>

namespace fecs {

using LowDimFn = std::function<double(std::span<const double>)>;

// Deterministic quadrature over the gaussian-localized region (the soft
// surrogate for the hard ball): integrals of the form
//   integral  h(w) * exp(-n*beta*L(w)) * exp(-gamma*||w - wstar||^2) dw
// by iterated adaptive Simpson. Test-harness oracle; dim <= 3.

// -log Z with h = 1. The localizer is unnormalized, so the pure-localizer
// value in 1-D is (1/2) log(gamma/pi).
double quadrature_free_energy(const LowDimFn& loss, int dim, long n,
                              double beta, double gamma,
                              std::span<const double> wstar);

// Posterior expectation of n*L(w) under the same density (the quantity the
// SGLD-based estimator targets).
double quadrature_posterior_mean_nll(const LowDimFn& loss, int dim, long n,
                                     double beta, double gamma,
                                     std::span<const double> wstar);

// Posterior expectation of an arbitrary functional h(w).
double quadrature_posterior_mean(const LowDimFn& loss, const LowDimFn& h,
                                 int dim, long n, double beta, double gamma,
                                 std::span<const double> wstar);

}  // namespace fecs
