#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "fecs/pretrain.hpp"
#include "fecs/sgld.hpp"
#include "fecs/task.hpp"

namespace fecs {

struct GibbsStdErrors {
  double T_m = 0.0;
  double G_m = 0.0;
  double G_bma = 0.0;
  double nu_hat = 0.0;
};

// Downstream Gibbs training error, Gibbs test error, Bayes (model-averaged)
// test error, and the singular-fluctuation estimate nu = m (G - T) / 2.
struct GibbsReport {
  double T_m = 0.0;
  double G_m = 0.0;
  double G_bma = 0.0;
  double nu_hat = 0.0;
  long m = 0;
  long samples_used = 0;
  GibbsStdErrors std_errors;
  int chains_failed = 0;
  // Exact-K1 posterior by quadrature (backbone dim <= 2, analytic task);
  // quantifies the gap to the Khat-based posterior.
  bool has_quadrature = false;
  double quad_T_m = 0.0;
  double quad_G_m = 0.0;
  nlohmann::json to_json() const;
};

struct GibbsOptions {
  int eval_points = 512;  // shared fresh x-draws for K^1 and the BMA predictive
  std::uint64_t eval_seed = 0;
  bool exact_k1_quadrature = false;
};

// Samples the downstream posterior p(w) propto exp{-m Khat^1(w)} phi_gamma(w-w*)
// (beta = 1 SGLD on the empirical loss; the gradient of Khat equals the
// gradient of Lhat). K^1 per sample is evaluated on one fixed eval set shared
// across samples, which is what makes the Jensen comparison exact.
// Cluster datasets carry global labels; they are remapped internally.
GibbsReport gibbs_report(const Checkpoint& ckpt, const TaskFamily& task,
                         const LabeledDataset& downstream,
                         const SgldConfig& config, const GibbsOptions& opts = {});

// Pointwise average of per-sample class probabilities. Defined for
// categorical models (gaussian mixtures are handled inside gibbs_report).
Predictive bma_predictive(std::span<const ParamVector> samples,
                          const ModelSpec& spec, std::span<const double> x);

}  // namespace fecs
