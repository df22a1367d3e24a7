#include "fecs/quadrature.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace fecs {

namespace {

using Fn1 = std::function<double(double)>;

double simpson(const Fn1& f, double a, double fa, double b, double fb,
               double& fm_out) {
  const double m = 0.5 * (a + b);
  fm_out = f(m);
  return (b - a) / 6.0 * (fa + 4.0 * fm_out + fb);
}

double adapt(const Fn1& f, double a, double fa, double b, double fb, double fm,
             double whole, double eps, int depth) {
  const double m = 0.5 * (a + b);
  double flm, frm;
  const double left = simpson(f, a, fa, m, fm, flm);
  const double right = simpson(f, m, fm, b, fb, frm);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * eps)
    return left + right + delta / 15.0;
  return adapt(f, a, fa, m, fm, flm, left, 0.5 * eps, depth - 1) +
         adapt(f, m, fm, b, fb, frm, right, 0.5 * eps, depth - 1);
}

double adaptive_simpson(const Fn1& f, double a, double b) {
  // coarse scan sets the absolute tolerance and seeds the first parabola fits
  constexpr int kScan = 8;
  double peak = 0.0;
  std::vector<double> fs(kScan + 1);
  for (int i = 0; i <= kScan; ++i) {
    fs[static_cast<std::size_t>(i)] = f(a + (b - a) * i / kScan);
    peak = std::max(peak, std::abs(fs[static_cast<std::size_t>(i)]));
  }
  if (peak == 0.0) peak = 1.0;
  const double eps = peak * (b - a) * 1e-12;
  double total = 0.0;
  constexpr int kPanels = 4;  // kScan must be divisible by kPanels
  const int per = kScan / kPanels;
  for (int p = 0; p < kPanels; ++p) {
    const double pa = a + (b - a) * (p * per) / kScan;
    const double pb = a + (b - a) * ((p + 1) * per) / kScan;
    const double fa = fs[static_cast<std::size_t>(p * per)];
    const double fb = fs[static_cast<std::size_t>((p + 1) * per)];
    double fm;
    const double whole = simpson(f, pa, fa, pb, fb, fm);
    total += adapt(f, pa, fa, pb, fb, fm, whole, eps / kPanels, 40);
  }
  return total;
}

struct Box {
  std::vector<double> lo, hi, center;
};

// Posterior mass can concentrate at any scale between the localizer width and
// 1/sqrt(n beta * curvature), so each line integral is split into panels that
// refine dyadically toward the anchor. Every length scale down to ~1e-8 of
// the radius gets a panel of comparable width, which keeps narrow peaks from
// slipping between samples.
std::vector<double> panel_edges(double lo, double hi, double center) {
  constexpr int kLevels = 26;
  std::vector<double> edges;
  edges.push_back(lo);
  const double rl = center - lo, rr = hi - center;
  for (int k = 1; k <= kLevels; ++k) edges.push_back(center - rl * std::pow(0.5, k));
  for (int k = kLevels; k >= 1; --k) edges.push_back(center + rr * std::pow(0.5, k));
  edges.push_back(hi);
  return edges;
}

double line_integral(const Fn1& f, double lo, double hi, double center) {
  const auto edges = panel_edges(lo, hi, center);
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    if (edges[i + 1] > edges[i])
      total += adaptive_simpson(f, edges[i], edges[i + 1]);
  return total;
}

double integrate_box(const std::function<double(std::span<const double>)>& g,
                     const Box& box, std::vector<double>& point, int d) {
  const int dim = static_cast<int>(box.lo.size());
  if (d == 0) {
    // outermost dimension: panels are independent, run them in parallel and
    // reduce in index order
    const auto edges = panel_edges(box.lo[0], box.hi[0], box.center[0]);
    const std::size_t n_panels = edges.size() - 1;
    std::vector<double> parts(n_panels, 0.0);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < n_panels; ++i) {
      if (edges[i + 1] <= edges[i]) continue;
      std::vector<double> pt(static_cast<std::size_t>(dim));
      Fn1 line = [&](double t) {
        pt[0] = t;
        if (dim == 1) return g(pt);
        return integrate_box(g, box, pt, 1);
      };
      parts[i] = adaptive_simpson(line, edges[i], edges[i + 1]);
    }
    double total = 0.0;
    for (double p : parts) total += p;
    return total;
  }
  Fn1 line = [&](double t) {
    point[static_cast<std::size_t>(d)] = t;
    if (d == dim - 1) return g(point);
    return integrate_box(g, box, point, d + 1);
  };
  return line_integral(line, box.lo[static_cast<std::size_t>(d)],
                       box.hi[static_cast<std::size_t>(d)],
                       box.center[static_cast<std::size_t>(d)]);
}

// exp{-n beta (L(w)-L0) - gamma ||w-w*||^2} * h(w)
double weighted_integral(const LowDimFn& loss, const LowDimFn* h, int dim,
                         long n, double beta, double gamma,
                         std::span<const double> wstar, double l0) {
  Box box;
  const double radius = std::sqrt(50.0 / gamma);
  for (int j = 0; j < dim; ++j) {
    box.lo.push_back(wstar[static_cast<std::size_t>(j)] - radius);
    box.hi.push_back(wstar[static_cast<std::size_t>(j)] + radius);
    box.center.push_back(wstar[static_cast<std::size_t>(j)]);
  }
  auto g = [&](std::span<const double> w) {
    double q = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double dj = w[static_cast<std::size_t>(j)] - wstar[static_cast<std::size_t>(j)];
      q += dj * dj;
    }
    const double e = std::exp(-static_cast<double>(n) * beta * (loss(w) - l0) -
                              gamma * q);
    return h ? e * (*h)(w) : e;
  };
  std::vector<double> point(static_cast<std::size_t>(dim));
  return integrate_box(g, box, point, 0);
}

void check_args(int dim, long n, double beta, double gamma) {
  if (dim < 1 || dim > 3)
    throw std::invalid_argument("quadrature: dim must be in [1,3]");
  if (n < 1) throw std::invalid_argument("quadrature: n must be positive");
  if (beta < 0.0) throw std::invalid_argument("quadrature: beta must be >= 0");
  if (!(gamma > 0.0)) throw std::invalid_argument("quadrature: gamma must be positive");
}

}  // namespace

double quadrature_free_energy(const LowDimFn& loss, int dim, long n,
                              double beta, double gamma,
                              std::span<const double> wstar) {
  check_args(dim, n, beta, gamma);
  const double l0 = loss(wstar);
  const double z = weighted_integral(loss, nullptr, dim, n, beta, gamma, wstar, l0);
  return static_cast<double>(n) * beta * l0 - std::log(z);
}

double quadrature_posterior_mean_nll(const LowDimFn& loss, int dim, long n,
                                     double beta, double gamma,
                                     std::span<const double> wstar) {
  LowDimFn h = [&](std::span<const double> w) {
    return static_cast<double>(n) * loss(w);
  };
  return quadrature_posterior_mean(loss, h, dim, n, beta, gamma, wstar);
}

double quadrature_posterior_mean(const LowDimFn& loss, const LowDimFn& h,
                                 int dim, long n, double beta, double gamma,
                                 std::span<const double> wstar) {
  check_args(dim, n, beta, gamma);
  const double l0 = loss(wstar);
  const double z = weighted_integral(loss, nullptr, dim, n, beta, gamma, wstar, l0);
  const double num = weighted_integral(loss, &h, dim, n, beta, gamma, wstar, l0);
  return num / z;
}

}  // namespace fecs
