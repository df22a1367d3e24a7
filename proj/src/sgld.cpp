#include "fecs/sgld.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fecs/errors.hpp"
#include "fecs/io.hpp"
#include "fecs/reduce.hpp"

namespace fecs {

void SgldConfig::validate(long n) const {
  if (!(step_size > 0.0)) throw std::invalid_argument("SgldConfig: step_size must be positive");
  if (chain_length < 1) throw std::invalid_argument("SgldConfig: chain_length must be positive");
  if (burn_in < 0 || burn_in >= chain_length)
    throw std::invalid_argument("SgldConfig: need 0 <= burn_in < chain_length");
  if (batch_size < 1) throw std::invalid_argument("SgldConfig: batch_size must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("SgldConfig: gamma must be positive");
  if (chains < 1) throw std::invalid_argument("SgldConfig: chains must be positive");
  if (thin < 1) throw std::invalid_argument("SgldConfig: thin must be positive");
  if (beta.has_value()) {
    // beta = 0 is the localizer-only diagnostic chain
    if (!(*beta >= 0.0)) throw std::invalid_argument("SgldConfig: beta must be >= 0");
  } else if (n < 3) {
    throw std::invalid_argument("SgldConfig: auto WBIC temperature needs n >= 3");
  }
}

double SgldConfig::resolve_beta(long n) const {
  return beta.has_value() ? *beta : 1.0 / std::log(static_cast<double>(n));
}

nlohmann::json FreeEnergyEstimate::to_json() const {
  nlohmann::json j;
  j["wbic"] = wbic;
  j["llc"] = llc;
  j["n"] = n;
  j["anchor_loss"] = anchor_loss;
  j["per_chain_wbic"] = per_chain_wbic;
  j["std_error"] = std_error;
  j["diagnostics"] = {{"mean_drift_from_anchor", diagnostics.mean_drift_from_anchor},
                      {"max_param_excursion", diagnostics.max_param_excursion}};
  j["chains_failed"] = chains_failed;
  j["beta"] = beta;
  j["gamma"] = gamma;
  return j;
}

DatasetSgldTarget::DatasetSgldTarget(const ModelSpec& spec,
                                     const LabeledDataset& data, int batch_size,
                                     int full_batch_threshold)
    : spec_(spec), data_(data), batch_size_(batch_size) {
  if (data.size() == 0)
    throw std::invalid_argument("DatasetSgldTarget: dataset is empty");
  full_batch_ = data.size() <= static_cast<std::size_t>(full_batch_threshold) ||
                static_cast<std::size_t>(batch_size) >= data.size();
}

int DatasetSgldTarget::dim() const { return spec_.param_count(); }

int DatasetSgldTarget::backbone_boundary() const {
  return spec_.backbone_param_count();
}

double DatasetSgldTarget::full_loss(std::span<const double> w) const {
  return batch_nll(spec_, w, data_, {});
}

double DatasetSgldTarget::grad(std::span<const double> w, Rng& rng, double* g,
                               bool& exact) const {
  if (full_batch_) {
    exact = true;
    return batch_nll_grad(spec_, w, data_, {}, g);
  }
  exact = false;
  std::vector<int> idx(static_cast<std::size_t>(batch_size_));
  for (int& i : idx)
    i = static_cast<int>(rng.below(static_cast<std::uint64_t>(data_.size())));
  return batch_nll_grad(spec_, w, data_, idx, g);
}

ChainDiagnostics run_sgld_chain(const SgldTarget& target,
                                std::span<const double> anchor,
                                const SgldConfig& config, double beta,
                                int chain_index, const SampleVisitor& visit) {
  const int dim = target.dim();
  const int bb = target.backbone_boundary();
  const double n = static_cast<double>(target.data_size());
  const double eps = config.step_size;
  const double noise_sd = std::sqrt(eps);
  Rng rng = Rng::derive(config.seed, 0x73676c64ULL,
                        static_cast<std::uint64_t>(chain_index));

  std::vector<double> w(anchor.begin(), anchor.end());
  std::vector<double> g(static_cast<std::size_t>(dim));
  ChainDiagnostics diag;
  long kept = 0;
  double drift_sum = 0.0;

  for (int t = 0; t < config.chain_length; ++t) {
    bool exact = false;
    const double batch_loss = target.grad(w, rng, g.data(), exact);
    if (!std::isfinite(batch_loss))
      throw DivergenceError("sgld chain: non-finite loss", t);
    for (int j = 0; j < bb; ++j) {
      const std::size_t k = static_cast<std::size_t>(j);
      w[k] -= 0.5 * eps * (n * beta * g[k] + 2.0 * config.gamma * (w[k] - anchor[k]));
      w[k] += noise_sd * rng.normal();
    }
    if (t >= config.burn_in && (t - config.burn_in) % config.thin == 0) {
      double d2 = 0.0;
      for (int j = 0; j < bb; ++j) {
        const double dj = w[static_cast<std::size_t>(j)] - anchor[static_cast<std::size_t>(j)];
        d2 += dj * dj;
        diag.max_param_excursion = std::max(diag.max_param_excursion, std::abs(dj));
      }
      drift_sum += std::sqrt(d2);
      ++kept;
      const double full = exact ? batch_loss : target.full_loss(w);
      if (!std::isfinite(full))
        throw DivergenceError("sgld chain: non-finite loss", t);
      visit(w, full, t);
    }
  }
  diag.mean_drift_from_anchor = kept > 0 ? drift_sum / static_cast<double>(kept) : 0.0;
  return diag;
}

std::vector<ParamVector> sgld_chain(const ModelSpec& spec,
                                    const Checkpoint& anchor,
                                    const LabeledDataset& data,
                                    const SgldConfig& config) {
  if (static_cast<int>(anchor.params.size()) != spec.param_count())
    throw std::invalid_argument("sgld_chain: anchor params do not match spec");
  DatasetSgldTarget target(spec, data, config.batch_size,
                           config.full_batch_threshold);
  config.validate(target.data_size());
  const double beta = config.resolve_beta(target.data_size());
  std::vector<ParamVector> samples;
  run_sgld_chain(target, anchor.params.values, config, beta, 0,
                 [&](std::span<const double> w, double, int) {
                   ParamVector p;
                   p.values.assign(w.begin(), w.end());
                   p.backbone_boundary = anchor.params.backbone_boundary;
                   samples.push_back(std::move(p));
                 });
  return samples;
}

namespace {

struct ChainAccum {
  double sum_nll = 0.0;
  long kept = 0;
  ChainDiagnostics diag;
  bool failed = false;
  std::string error;
  std::vector<double> trace_nll;   // only when tracing
  std::vector<double> trace_drift;
  std::vector<int> trace_step;
};

}  // namespace

FreeEnergyEstimate estimate_wbic(const SgldTarget& target,
                                 std::span<const double> anchor,
                                 const SgldConfig& config,
                                 const std::filesystem::path& trace_csv) {
  const long n = target.data_size();
  config.validate(n);
  if (static_cast<int>(anchor.size()) != target.dim())
    throw std::invalid_argument("estimate_wbic: anchor length mismatch");
  const double beta = config.resolve_beta(n);
  const bool tracing = !trace_csv.empty();

  std::vector<ChainAccum> acc(static_cast<std::size_t>(config.chains));
#pragma omp parallel for schedule(dynamic)
  for (int c = 0; c < config.chains; ++c) {
    ChainAccum& a = acc[static_cast<std::size_t>(c)];
    try {
      a.diag = run_sgld_chain(
          target, anchor, config, beta, c,
          [&](std::span<const double> w, double full, int t) {
            a.sum_nll += static_cast<double>(n) * full;
            ++a.kept;
            if (tracing) {
              double d2 = 0.0;
              for (int j = 0; j < target.backbone_boundary(); ++j) {
                const double dj = w[static_cast<std::size_t>(j)] - anchor[static_cast<std::size_t>(j)];
                d2 += dj * dj;
              }
              a.trace_nll.push_back(static_cast<double>(n) * full);
              a.trace_drift.push_back(std::sqrt(d2));
              a.trace_step.push_back(t);
            }
          });
    } catch (const std::exception& e) {
      a.failed = true;
      a.error = e.what();
    }
  }

  FreeEnergyEstimate est;
  est.n = n;
  est.beta = beta;
  est.gamma = config.gamma;
  for (const auto& a : acc) {
    if (a.failed || a.kept == 0) {
      ++est.chains_failed;
      continue;
    }
    est.per_chain_wbic.push_back(a.sum_nll / static_cast<double>(a.kept));
  }
  if (est.per_chain_wbic.empty())
    throw EstimationFailedError("estimate_wbic: all chains aborted");

  est.wbic = deterministic_mean(est.per_chain_wbic);
  if (est.per_chain_wbic.size() > 1) {
    double ss = 0.0;
    for (double v : est.per_chain_wbic) {
      const double d = v - est.wbic;
      ss += d * d;
    }
    const double k = static_cast<double>(est.per_chain_wbic.size());
    est.std_error = std::sqrt(ss / (k - 1.0) / k);
  }
  est.anchor_loss = static_cast<double>(n) * target.full_loss(anchor);
  est.llc = (est.wbic - est.anchor_loss) / std::log(static_cast<double>(n));

  int ok = 0;
  for (const auto& a : acc) {
    if (a.failed || a.kept == 0) continue;
    est.diagnostics.mean_drift_from_anchor += a.diag.mean_drift_from_anchor;
    est.diagnostics.max_param_excursion =
        std::max(est.diagnostics.max_param_excursion, a.diag.max_param_excursion);
    ++ok;
  }
  if (ok > 0) est.diagnostics.mean_drift_from_anchor /= ok;

  if (tracing) {
    std::string csv = "chain,step,nll,drift\n";
    for (std::size_t c = 0; c < acc.size(); ++c) {
      const auto& a = acc[c];
      for (std::size_t i = 0; i < a.trace_nll.size(); ++i) {
        csv += std::to_string(c) + "," + std::to_string(a.trace_step[i]) + "," +
               format_double(a.trace_nll[i]) + "," +
               format_double(a.trace_drift[i]) + "\n";
      }
    }
    write_text_file(trace_csv, csv);
  }
  return est;
}

FreeEnergyEstimate estimate_wbic(const ModelSpec& spec, const Checkpoint& anchor,
                                 const LabeledDataset& data,
                                 const SgldConfig& config,
                                 const std::filesystem::path& trace_csv) {
  if (static_cast<int>(anchor.params.size()) != spec.param_count())
    throw std::invalid_argument("estimate_wbic: anchor params do not match spec");
  DatasetSgldTarget target(spec, data, config.batch_size,
                           config.full_batch_threshold);
  return estimate_wbic(target, anchor.params.values, config, trace_csv);
}

}  // namespace fecs
