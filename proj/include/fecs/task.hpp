#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "fecs/model.hpp"
#include "fecs/rng.hpp"

namespace fecs {

enum class Side { pretrain, downstream };

// Disjoint class partition mirroring a meta-train / meta-test split.
struct MetaSplit {
  int n_classes_total = 0;
  std::vector<int> pretrain_class_ids;    // kept sorted
  std::vector<int> downstream_class_ids;  // kept sorted

  // pretrain = [0, n_pre), downstream = [n_pre, n_pre + n_down)
  static MetaSplit contiguous(int n_total, int n_pre, int n_down);
  void validate() const;
};

struct ShiftConstants {
  double M = 1.0;  // max joint-density ratio; +inf when unbounded
  double D = 0.0;  // conditional KL shift term
  // Monte-Carlo estimates only: spread proxies (0 for closed forms).
  double M_std_error = 0.0;
  double D_std_error = 0.0;
  bool monte_carlo = false;
  bool m_finite() const { return M < std::numeric_limits<double>::infinity(); }
};

enum class TaskKind { gaussian_covariate_shift, gaussian_nuisance, cluster_classification };

// A pretraining/downstream distribution pair with pointwise density access.
// Immutable after construction; sampling always goes through caller seeds or
// explicit Rng streams, so concurrent use is safe.
struct TaskFamily {
  TaskKind kind = TaskKind::gaussian_covariate_shift;
  std::uint64_t rng_seed = 0;

  // gaussian kinds: teacher net defines r(y|x); scalar y
  ModelSpec teacher_spec;
  ParamVector teacher_params;
  // gaussian_covariate_shift: x ~ N(mu_i, sigma_i^2 I)
  std::vector<double> mu0, mu1;
  double sigma0_x = 1.0, sigma1_x = 1.0;
  // gaussian_nuisance: x ~ N(0, I); y-noise differs per side
  double sigma0_y = 1.0, sigma1_y = 1.0;

  // cluster_classification
  std::vector<std::vector<double>> class_means;
  double class_sigma = 1.0;
  MetaSplit split;

  int input_dim() const;
  bool analytic() const { return kind != TaskKind::cluster_classification; }
  bool classification() const { return kind == TaskKind::cluster_classification; }
  const std::vector<int>& side_classes(Side s) const;
  int side_class_count(Side s) const {
    return static_cast<int>(side_classes(s).size());
  }
  // position of a global class id within the side's sorted class list
  int local_label(Side s, int global_id) const;

  double teacher_sigma_y(Side s) const;

  void draw_x(Side s, Rng& rng, std::span<double> x) const;
  // cluster only: x | class
  void draw_class_x(int class_id, Rng& rng, std::span<double> x) const;
  double draw_y_given_x(Side s, std::span<const double> x, Rng& rng) const;

  double log_joint(Side s, std::span<const double> x, double y) const;
  double log_cond(Side s, std::span<const double> x, double y) const;
  double cond_entropy(Side s, std::span<const double> x) const;

  // teacher class posterior over the side's classes (cluster only)
  void class_posterior(Side s, std::span<const double> x,
                       std::vector<double>& probs) const;

  // KL(r_side(y|x) || p(y|x,w)) for one x, exact in y.
  double pointwise_kl(Side s, std::span<const double> x, const ModelSpec& spec,
                      std::span<const double> w, detail::Workspace& ws) const;

  void validate() const;
};

TaskFamily make_covariate_shift_task(std::vector<double> mu0, double sigma0,
                                     std::vector<double> mu1, double sigma1,
                                     ModelSpec teacher_spec,
                                     ParamVector teacher_params,
                                     std::uint64_t seed);
TaskFamily make_nuisance_task(double sigma0_y, double sigma1_y,
                              ModelSpec teacher_spec, ParamVector teacher_params,
                              std::uint64_t seed);
// Class means drawn uniformly on the sphere of the given radius; the radius
// is the task-difficulty knob.
TaskFamily make_cluster_task(int n_classes, int dim, double radius,
                             double class_sigma, int n_pretrain_classes,
                             int n_downstream_classes, std::uint64_t seed);

// i.i.d. draws from the side's joint distribution; deterministic given seed.
// Cluster labels are global class ids.
LabeledDataset sample(const TaskFamily& task, Side side, int count,
                      std::uint64_t seed);

// Same draws with labels remapped to [0, side_class_count).
LabeledDataset sample_local(const TaskFamily& task, Side side, int count,
                            std::uint64_t seed);
LabeledDataset relabel_local(const TaskFamily& task, Side side,
                             const LabeledDataset& data);

// Closed-form M and D (analytic kinds only; throws std::invalid_argument for
// cluster_classification).
ShiftConstants shift_constants(const TaskFamily& task);

// Empirical surrogate: max density ratio over draws from r0 plus a support
// check on draws from r1; a lower bound on the true M. Ratios above the cap
// are reported as +inf.
ShiftConstants mc_shift_constants(const TaskFamily& task, int samples,
                                  std::uint64_t seed, double ratio_cap = 1e12);

enum class WhichLoss { K, L };

// Population test loss K^i(w) or L^i(w). Exact in y always; the expectation
// over x is closed-form when model and teacher are both affine on a gaussian
// kind, Monte Carlo otherwise.
double population_loss(const ModelSpec& spec, const ParamVector& params,
                       const TaskFamily& task, WhichLoss which, Side side,
                       int mc_samples, std::uint64_t seed);

bool has_exact_population_k(const TaskFamily& task, const ModelSpec& spec);
double population_k_exact(const TaskFamily& task, const ModelSpec& spec,
                          std::span<const double> w, Side side);

// Mean pointwise KL over a fixed set of x draws (shared eval set).
double mean_pointwise_kl(const TaskFamily& task, Side side,
                         const std::vector<double>& eval_xs, int count,
                         const ModelSpec& spec, std::span<const double> w);

}  // namespace fecs
