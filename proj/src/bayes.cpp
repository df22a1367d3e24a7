#include "fecs/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fecs/errors.hpp"
#include "fecs/quadrature.hpp"
#include "fecs/reduce.hpp"

namespace fecs {

nlohmann::json GibbsReport::to_json() const {
  nlohmann::json j;
  j["T_m"] = T_m;
  j["G_m"] = G_m;
  j["G_bma"] = G_bma;
  j["nu_hat"] = nu_hat;
  j["m"] = m;
  j["samples_used"] = samples_used;
  j["chains_failed"] = chains_failed;
  j["std_errors"] = {{"T_m", std_errors.T_m},
                     {"G_m", std_errors.G_m},
                     {"G_bma", std_errors.G_bma},
                     {"nu_hat", std_errors.nu_hat}};
  if (has_quadrature) {
    j["quad_T_m"] = quad_T_m;
    j["quad_G_m"] = quad_G_m;
  }
  return j;
}

namespace {

struct GibbsChain {
  double sum_khat = 0.0;
  double sum_keval = 0.0;
  long kept = 0;
  std::vector<double> prob_sum;      // categorical: eval_points * C
  std::vector<double> sample_means;  // gaussian: kept * eval_points
  bool failed = false;
};

// KL( N(mu_t, s_t^2) || (1/S) sum_s N(mean_s, s_m^2) ) by composite Simpson
// over the teacher's support.
double gaussian_mixture_kl(double mu_t, double s_t, double s_m,
                           std::span<const double> means) {
  constexpr int kNodes = 256;  // composite Simpson, kNodes+1 points
  const double lo = mu_t - 10.0 * s_t, hi = mu_t + 10.0 * s_t;
  const double h = (hi - lo) / kNodes;
  const double log_s = std::log(static_cast<double>(means.size()));
  const double inv2sm2 = 1.0 / (2.0 * s_m * s_m);
  const double log_norm_m = -0.5 * std::log(2.0 * std::numbers::pi) - std::log(s_m);
  double acc = 0.0;
  for (int k = 0; k <= kNodes; ++k) {
    const double y = lo + h * k;
    // log mixture density at y
    double best = -std::numeric_limits<double>::infinity();
    for (double mu : means) {
      const double d = y - mu;
      best = std::max(best, -d * d * inv2sm2);
    }
    double se = 0.0;
    for (double mu : means) {
      const double d = y - mu;
      se += std::exp(-d * d * inv2sm2 - best);
    }
    const double log_mix = log_norm_m + best + std::log(se) - log_s;
    const double rt = (y - mu_t) / s_t;
    const double r = std::exp(-0.5 * rt * rt) /
                     (s_t * std::sqrt(2.0 * std::numbers::pi));
    const double wgt = (k == 0 || k == kNodes) ? 1.0 : (k % 2 == 1 ? 4.0 : 2.0);
    acc += wgt * r * log_mix;
  }
  const double cross = acc * h / 3.0;  // integral of r log mix
  const double neg_entropy = -0.5 * (std::log(2.0 * std::numbers::pi) + 1.0) -
                             std::log(s_t);
  return neg_entropy - cross;
}

}  // namespace

GibbsReport gibbs_report(const Checkpoint& ckpt, const TaskFamily& task,
                         const LabeledDataset& downstream,
                         const SgldConfig& config, const GibbsOptions& opts) {
  task.validate();
  if (downstream.size() == 0)
    throw std::invalid_argument("gibbs_report: empty downstream dataset");
  if (opts.eval_points < 1)
    throw std::invalid_argument("gibbs_report: eval_points must be positive");

  ModelSpec spec = ckpt.spec;
  if (spec.output_kind == OutputKind::gaussian_fixed_sigma)
    spec.sigma = task.teacher_sigma_y(Side::downstream);
  const bool categorical = spec.output_kind == OutputKind::categorical_softmax;
  if (categorical && spec.head_dim != task.side_class_count(Side::downstream))
    throw std::invalid_argument(
        "gibbs_report: model head must match the downstream class count");

  const LabeledDataset model_data =
      task.classification() ? relabel_local(task, Side::downstream, downstream)
                            : downstream;
  DatasetSgldTarget target(spec, model_data, config.batch_size,
                           config.full_batch_threshold);
  SgldConfig cfg = config;
  cfg.beta = 1.0;  // the downstream posterior carries no extra temperature
  const long m = target.data_size();
  cfg.validate(m);

  // empirical teacher NLL: Khat(w) = Lhat(w) - this
  double emp_teacher_nll;
  {
    std::vector<double> vals(downstream.size());
    for (std::size_t i = 0; i < downstream.size(); ++i)
      vals[i] = -task.log_cond(Side::downstream, downstream.x(i), downstream.ys[i]);
    emp_teacher_nll = deterministic_mean(vals);
  }

  // shared eval draws from r^1(x)
  const int d = task.input_dim();
  const int E = opts.eval_points;
  std::vector<double> eval_xs(static_cast<std::size_t>(E) * d);
  {
    Rng rng = Rng::derive(opts.eval_seed, 0x6576616cULL);
    for (int e = 0; e < E; ++e)
      task.draw_x(Side::downstream, rng,
                  {eval_xs.data() + static_cast<std::size_t>(e) * d,
                   static_cast<std::size_t>(d)});
  }
  std::vector<double> teacher_eval_mean;  // gaussian: f_t at eval points
  if (!categorical) {
    teacher_eval_mean.resize(static_cast<std::size_t>(E));
    detail::Workspace ws;
    for (int e = 0; e < E; ++e)
      detail::forward_raw(task.teacher_spec, task.teacher_params.values,
                          {eval_xs.data() + static_cast<std::size_t>(e) * d,
                           static_cast<std::size_t>(d)},
                          ws, {&teacher_eval_mean[static_cast<std::size_t>(e)], 1});
  }
  const int C = categorical ? spec.head_dim : 0;

  std::vector<GibbsChain> chains(static_cast<std::size_t>(cfg.chains));
#pragma omp parallel for schedule(dynamic)
  for (int c = 0; c < cfg.chains; ++c) {
    GibbsChain& ch = chains[static_cast<std::size_t>(c)];
    if (categorical)
      ch.prob_sum.assign(static_cast<std::size_t>(E) * C, 0.0);
    detail::Workspace ws;
    std::vector<double> out(static_cast<std::size_t>(std::max(1, spec.head_dim)));
    try {
      run_sgld_chain(
          target, ckpt.params.values, cfg, 1.0, c,
          [&](std::span<const double> w, double full_loss, int) {
            ch.sum_khat += full_loss - emp_teacher_nll;
            ch.sum_keval += mean_pointwise_kl(task, Side::downstream, eval_xs, E, spec, w);
            for (int e = 0; e < E; ++e) {
              std::span<const double> x(
                  eval_xs.data() + static_cast<std::size_t>(e) * d,
                  static_cast<std::size_t>(d));
              detail::forward_raw(spec, w, x, ws, out);
              if (categorical) {
                double mx = out[0];
                for (int k = 1; k < C; ++k) mx = std::max(mx, out[static_cast<std::size_t>(k)]);
                double se = 0.0;
                for (int k = 0; k < C; ++k) se += std::exp(out[static_cast<std::size_t>(k)] - mx);
                double* ps = ch.prob_sum.data() + static_cast<std::size_t>(e) * C;
                for (int k = 0; k < C; ++k)
                  ps[k] += std::exp(out[static_cast<std::size_t>(k)] - mx) / se;
              } else {
                ch.sample_means.push_back(out[0]);
              }
            }
            ++ch.kept;
          });
    } catch (const std::exception&) {
      ch.failed = true;
    }
  }

  GibbsReport rep;
  rep.m = m;
  long total_kept = 0;
  std::vector<double> chain_T, chain_G, chain_B, chain_nu;
  for (const auto& ch : chains) {
    if (ch.failed || ch.kept == 0) {
      ++rep.chains_failed;
      continue;
    }
    total_kept += ch.kept;
    chain_T.push_back(ch.sum_khat / static_cast<double>(ch.kept));
    chain_G.push_back(ch.sum_keval / static_cast<double>(ch.kept));
  }
  if (total_kept == 0)
    throw EstimationFailedError("gibbs_report: all chains aborted");
  rep.samples_used = total_kept;

  // pooled means over surviving chains (equal kept counts per chain)
  rep.T_m = deterministic_mean(chain_T);
  rep.G_m = deterministic_mean(chain_G);

  // BMA predictive per eval point; pooled mixture and per-chain mixtures
  const auto point_bma = [&](int e, const std::vector<const GibbsChain*>& use,
                             long kept) {
    if (categorical) {
      std::vector<double> pbar(static_cast<std::size_t>(C), 0.0);
      for (const auto* ch : use) {
        const double* ps = ch->prob_sum.data() + static_cast<std::size_t>(e) * C;
        for (int k = 0; k < C; ++k) pbar[static_cast<std::size_t>(k)] += ps[k];
      }
      for (double& p : pbar) p /= static_cast<double>(kept);
      std::vector<double> q;
      task.class_posterior(Side::downstream,
                           {eval_xs.data() + static_cast<std::size_t>(e) * d,
                            static_cast<std::size_t>(d)},
                           q);
      double kl = 0.0;
      for (int k = 0; k < C; ++k)
        if (q[static_cast<std::size_t>(k)] > 0.0)
          kl += q[static_cast<std::size_t>(k)] *
                (std::log(q[static_cast<std::size_t>(k)]) -
                 std::log(pbar[static_cast<std::size_t>(k)]));
      return kl;
    }
    std::vector<double> means;
    means.reserve(static_cast<std::size_t>(kept));
    for (const auto* ch : use)
      for (long s = 0; s < ch->kept; ++s)
        means.push_back(ch->sample_means[static_cast<std::size_t>(s) * E +
                                         static_cast<std::size_t>(e)]);
    return gaussian_mixture_kl(teacher_eval_mean[static_cast<std::size_t>(e)],
                               task.teacher_sigma_y(Side::downstream), spec.sigma,
                               means);
  };

  std::vector<const GibbsChain*> alive;
  for (const auto& ch : chains)
    if (!ch.failed && ch.kept > 0) alive.push_back(&ch);

  std::vector<double> bma_vals(static_cast<std::size_t>(E));
#pragma omp parallel for schedule(dynamic)
  for (int e = 0; e < E; ++e)
    bma_vals[static_cast<std::size_t>(e)] = point_bma(e, alive, total_kept);
  rep.G_bma = deterministic_mean(bma_vals);

  for (const auto* ch : alive) {
    std::vector<double> vals(static_cast<std::size_t>(E));
#pragma omp parallel for schedule(dynamic)
    for (int e = 0; e < E; ++e)
      vals[static_cast<std::size_t>(e)] = point_bma(e, {ch}, ch->kept);
    chain_B.push_back(deterministic_mean(vals));
  }
  for (std::size_t c = 0; c < chain_T.size(); ++c)
    chain_nu.push_back(static_cast<double>(m) * (chain_G[c] - chain_T[c]) / 2.0);

  rep.nu_hat = static_cast<double>(m) * (rep.G_m - rep.T_m) / 2.0;

  const auto stderr_of = [](const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double mean = deterministic_mean(v), ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double k = static_cast<double>(v.size());
    return std::sqrt(ss / (k - 1.0) / k);
  };
  rep.std_errors.T_m = stderr_of(chain_T);
  rep.std_errors.G_m = stderr_of(chain_G);
  rep.std_errors.G_bma = stderr_of(chain_B);
  rep.std_errors.nu_hat = stderr_of(chain_nu);

  const int bb = ckpt.params.backbone_boundary;
  if (opts.exact_k1_quadrature && task.analytic() && bb >= 1 && bb <= 2) {
    // exact-K1 posterior over the backbone coordinates, head frozen
    std::vector<double> base = ckpt.params.values;
    const auto assemble = [&](std::span<const double> theta) {
      std::vector<double> w = base;
      for (int j = 0; j < bb; ++j) w[static_cast<std::size_t>(j)] = theta[static_cast<std::size_t>(j)];
      return w;
    };
    LowDimFn k1 = [&](std::span<const double> theta) {
      const auto w = assemble(theta);
      if (has_exact_population_k(task, spec))
        return population_k_exact(task, spec, w, Side::downstream);
      return mean_pointwise_kl(task, Side::downstream, eval_xs, E, spec, w);
    };
    LowDimFn khat = [&](std::span<const double> theta) {
      const auto w = assemble(theta);
      return batch_nll(spec, w, model_data, {}) - emp_teacher_nll;
    };
    std::span<const double> anchor_b(ckpt.params.values.data(),
                                     static_cast<std::size_t>(bb));
    rep.quad_T_m = quadrature_posterior_mean(k1, khat, bb, m, 1.0, cfg.gamma, anchor_b);
    rep.quad_G_m = quadrature_posterior_mean(k1, k1, bb, m, 1.0, cfg.gamma, anchor_b);
    rep.has_quadrature = true;
  }
  return rep;
}

Predictive bma_predictive(std::span<const ParamVector> samples,
                          const ModelSpec& spec, std::span<const double> x) {
  if (samples.empty())
    throw std::invalid_argument("bma_predictive: empty sample set");
  if (spec.output_kind != OutputKind::categorical_softmax)
    throw std::invalid_argument(
        "bma_predictive: defined for categorical models; gaussian posteriors "
        "average to mixtures, handled inside gibbs_report");
  Predictive out;
  out.kind = spec.output_kind;
  out.probs.assign(static_cast<std::size_t>(spec.head_dim), 0.0);
  for (const auto& s : samples) {
    const Predictive p = forward(spec, s, x);
    for (std::size_t k = 0; k < out.probs.size(); ++k) out.probs[k] += p.probs[k];
  }
  for (double& p : out.probs) p /= static_cast<double>(samples.size());
  return out;
}

}  // namespace fecs
