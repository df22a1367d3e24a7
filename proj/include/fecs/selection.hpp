#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fecs/pretrain.hpp"
#include "fecs/sgld.hpp"
#include "fecs/task.hpp"

namespace fecs {

// Per-checkpoint asymptotic free-energy score: fit term plus complexity term.
struct SelectionScore {
  std::string checkpoint_id;
  double loss_term = 0.0;        // n * beta0 * Lhat(w*) surrogate
  double complexity_term = 0.0;  // llc * log n
  double score = 0.0;            // sum of the two
  double beta0 = 1.0;
  long step = 0;                 // tie-break key
};

struct BoundInputs {
  double k1_ball_min = 0.0;  // K^1 at the localized minimizer
  double lambda1 = 0.0;
  double k0_anchor = 0.0;  // K^0 at the checkpoint
  double lambda0 = 0.0;
  double M = 1.0;
  double D = 0.0;
  long m = 0;
};

struct BoundReport {
  double lhs = 0.0;
  double rhs = 0.0;
  bool satisfied = false;  // lhs <= rhs + 1e-12
  double slack = 0.0;      // rhs - lhs
  BoundInputs inputs;
  bool hypothesis_lambda_ok = false;  // lambda1 <= lambda0 (reported separately)
  double sigma_propagated = 0.0;      // from the lambda standard errors
  double k1_at_anchor = 0.0;          // unpenalized downstream loss at w*
  nlohmann::json to_json() const;
};

// beta0 = M * m * log n / (n * log m). Infinite M means the
// pretraining/downstream relationship is uninformative.
double beta0(double M, long m, long n);

inline bool bound_satisfied(double lhs, double rhs) { return lhs <= rhs + 1e-12; }

// Fit term uses the Lhat-based surrogate (anchor_loss = n*Lhat at w*);
// complexity term is llc * log n.
SelectionScore score_checkpoint(const Checkpoint& ckpt,
                                const FreeEnergyEstimate& fe, double beta0_value,
                                long n);

// Ascending by score; ties broken by lower complexity term, then lower step,
// then id.
std::vector<SelectionScore> rank(std::vector<SelectionScore> scores);

std::string ranking_csv(const std::vector<SelectionScore>& ranked);
nlohmann::json ranking_json(const std::vector<SelectionScore>& ranked);

// Threshold on m/log m below which the higher-loss, lower-complexity
// checkpoint wins the comparison.
double observation1_threshold(double delta_k0, double delta_lambda0, double M);
bool observation1_prefers_simpler(long m, double threshold);

struct Prop1Options {
  double gamma = 1.0;
  int gd_steps = 2000;
  double gd_lr = 0.05;
  int mc_samples = 4096;  // eval-set size for the localized minimization
  std::uint64_t seed = 0;
  double lambda0_se = 0.0;
  double lambda1_se = 0.0;
};

// Empirical check of the free-energy transfer bound on an analytic task:
//   K1(w*1) + lambda1 log(m)/m  <=  M K0(w*) + D + lambda0 log(m)/m.
// The ball-local minimizer w*1 is approximated by monotone gradient descent
// on the downstream population loss with the gaussian-localizer penalty
// gamma*||theta - theta*||^2 added (head frozen).
BoundReport check_prop1_bound(const TaskFamily& task, const Checkpoint& ckpt,
                              double lambda0_hat, double lambda1_hat, long m,
                              const Prop1Options& opts = {});

}  // namespace fecs
