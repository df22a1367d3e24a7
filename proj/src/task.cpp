#include "fecs/task.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fecs/reduce.hpp"

namespace fecs {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_gauss(double y, double mean, double sigma) {
  const double r = (y - mean) / sigma;
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sigma) - 0.5 * r * r;
}

double log_gauss_iso(std::span<const double> x, std::span<const double> mu,
                     double sigma) {
  double q = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double d = x[j] - (mu.empty() ? 0.0 : mu[j]);
    q += d * d;
  }
  const double d = static_cast<double>(x.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi) - d * std::log(sigma) -
         q / (2.0 * sigma * sigma);
}

double gaussian_entropy(double sigma) {
  return 0.5 * (std::log(2.0 * std::numbers::pi) + 1.0) + std::log(sigma);
}

bool is_affine_gaussian(const ModelSpec& spec) {
  return spec.hidden_widths.empty() &&
         spec.output_kind == OutputKind::gaussian_fixed_sigma &&
         spec.head_dim == 1;
}

}  // namespace

MetaSplit MetaSplit::contiguous(int n_total, int n_pre, int n_down) {
  MetaSplit s;
  s.n_classes_total = n_total;
  for (int c = 0; c < n_pre; ++c) s.pretrain_class_ids.push_back(c);
  for (int c = n_pre; c < n_pre + n_down; ++c) s.downstream_class_ids.push_back(c);
  s.validate();
  return s;
}

void MetaSplit::validate() const {
  if (pretrain_class_ids.empty() || downstream_class_ids.empty())
    throw std::invalid_argument("MetaSplit: both class sets must be nonempty");
  if (pretrain_class_ids.size() <= downstream_class_ids.size())
    throw std::invalid_argument(
        "MetaSplit: pretrain set must be strictly larger than downstream set");
  if (!std::is_sorted(pretrain_class_ids.begin(), pretrain_class_ids.end()) ||
      !std::is_sorted(downstream_class_ids.begin(), downstream_class_ids.end()))
    throw std::invalid_argument("MetaSplit: class id lists must be sorted");
  for (int c : pretrain_class_ids)
    if (c < 0 || c >= n_classes_total)
      throw std::invalid_argument("MetaSplit: pretrain id out of range");
  for (int c : downstream_class_ids) {
    if (c < 0 || c >= n_classes_total)
      throw std::invalid_argument("MetaSplit: downstream id out of range");
    if (std::binary_search(pretrain_class_ids.begin(), pretrain_class_ids.end(), c))
      throw std::invalid_argument("MetaSplit: class sets must be disjoint");
  }
}

int TaskFamily::input_dim() const {
  if (kind == TaskKind::cluster_classification)
    return class_means.empty() ? 0 : static_cast<int>(class_means[0].size());
  return teacher_spec.input_dim;
}

const std::vector<int>& TaskFamily::side_classes(Side s) const {
  return s == Side::pretrain ? split.pretrain_class_ids
                             : split.downstream_class_ids;
}

int TaskFamily::local_label(Side s, int global_id) const {
  const auto& ids = side_classes(s);
  auto it = std::lower_bound(ids.begin(), ids.end(), global_id);
  if (it == ids.end() || *it != global_id)
    throw std::invalid_argument("local_label: class not in this side's split");
  return static_cast<int>(it - ids.begin());
}

double TaskFamily::teacher_sigma_y(Side s) const {
  if (kind == TaskKind::gaussian_nuisance)
    return s == Side::pretrain ? sigma0_y : sigma1_y;
  return teacher_spec.sigma;
}

void TaskFamily::draw_x(Side s, Rng& rng, std::span<double> x) const {
  switch (kind) {
    case TaskKind::gaussian_covariate_shift: {
      const auto& mu = s == Side::pretrain ? mu0 : mu1;
      const double sd = s == Side::pretrain ? sigma0_x : sigma1_x;
      for (std::size_t j = 0; j < x.size(); ++j)
        x[j] = mu[j] + sd * rng.normal();
      return;
    }
    case TaskKind::gaussian_nuisance:
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = rng.normal();
      return;
    case TaskKind::cluster_classification: {
      const auto& ids = side_classes(s);
      const int c = ids[rng.below(ids.size())];
      draw_class_x(c, rng, x);
      return;
    }
  }
}

void TaskFamily::draw_class_x(int class_id, Rng& rng, std::span<double> x) const {
  if (kind != TaskKind::cluster_classification)
    throw std::invalid_argument("draw_class_x: cluster task required");
  const auto& m = class_means.at(static_cast<std::size_t>(class_id));
  for (std::size_t j = 0; j < x.size(); ++j)
    x[j] = m[j] + class_sigma * rng.normal();
}

double TaskFamily::draw_y_given_x(Side s, std::span<const double> x,
                                  Rng& rng) const {
  if (kind == TaskKind::cluster_classification)
    throw std::invalid_argument("draw_y_given_x: not defined for cluster tasks");
  detail::Workspace ws;
  double f = 0.0;
  detail::forward_raw(teacher_spec, teacher_params.values, x, ws, {&f, 1});
  return f + teacher_sigma_y(s) * rng.normal();
}

void TaskFamily::class_posterior(Side s, std::span<const double> x,
                                 std::vector<double>& probs) const {
  const auto& ids = side_classes(s);
  probs.resize(ids.size());
  double best = -kInf;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& m = class_means[static_cast<std::size_t>(ids[k])];
    double q = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double d = x[j] - m[j];
      q += d * d;
    }
    probs[k] = -q / (2.0 * class_sigma * class_sigma);
    best = std::max(best, probs[k]);
  }
  double z = 0.0;
  for (double& p : probs) {
    p = std::exp(p - best);
    z += p;
  }
  for (double& p : probs) p /= z;
}

double TaskFamily::log_joint(Side s, std::span<const double> x, double y) const {
  switch (kind) {
    case TaskKind::gaussian_covariate_shift: {
      const auto& mu = s == Side::pretrain ? mu0 : mu1;
      const double sd = s == Side::pretrain ? sigma0_x : sigma1_x;
      return log_gauss_iso(x, mu, sd) + log_cond(s, x, y);
    }
    case TaskKind::gaussian_nuisance:
      return log_gauss_iso(x, {}, 1.0) + log_cond(s, x, y);
    case TaskKind::cluster_classification: {
      const auto& ids = side_classes(s);
      const int c = static_cast<int>(y);
      if (!std::binary_search(ids.begin(), ids.end(), c)) return -kInf;
      return -std::log(static_cast<double>(ids.size())) +
             log_gauss_iso(x, class_means[static_cast<std::size_t>(c)],
                           class_sigma);
    }
  }
  return -kInf;
}

double TaskFamily::log_cond(Side s, std::span<const double> x, double y) const {
  if (kind == TaskKind::cluster_classification) {
    const auto& ids = side_classes(s);
    const int c = static_cast<int>(y);
    if (!std::binary_search(ids.begin(), ids.end(), c)) return -kInf;
    std::vector<double> probs;
    class_posterior(s, x, probs);
    return std::log(probs[static_cast<std::size_t>(local_label(s, c))]);
  }
  detail::Workspace ws;
  double f = 0.0;
  detail::forward_raw(teacher_spec, teacher_params.values, x, ws, {&f, 1});
  return log_gauss(y, f, teacher_sigma_y(s));
}

double TaskFamily::cond_entropy(Side s, std::span<const double> x) const {
  if (kind != TaskKind::cluster_classification)
    return gaussian_entropy(teacher_sigma_y(s));
  std::vector<double> probs;
  class_posterior(s, x, probs);
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double TaskFamily::pointwise_kl(Side s, std::span<const double> x,
                                const ModelSpec& spec, std::span<const double> w,
                                detail::Workspace& ws) const {
  if (kind == TaskKind::cluster_classification) {
    if (spec.output_kind != OutputKind::categorical_softmax ||
        spec.head_dim != side_class_count(s))
      throw std::invalid_argument(
          "pointwise_kl: model head must match the side's class count");
    std::vector<double> q;
    class_posterior(s, x, q);
    std::vector<double> logits(q.size());
    detail::forward_raw(spec, w, x, ws, logits);
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double se = 0.0;
    for (double v : logits) se += std::exp(v - m);
    const double lse = m + std::log(se);
    double kl = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (q[k] > 0.0)
        kl += q[k] * (std::log(q[k]) - (logits[k] - lse));
    }
    return kl;
  }
  if (spec.output_kind != OutputKind::gaussian_fixed_sigma || spec.head_dim != 1)
    throw std::invalid_argument("pointwise_kl: gaussian task needs a scalar gaussian model");
  double ft = 0.0, fm = 0.0;
  detail::forward_raw(teacher_spec, teacher_params.values, x, ws, {&ft, 1});
  detail::forward_raw(spec, w, x, ws, {&fm, 1});
  const double st = teacher_sigma_y(s), sm = spec.sigma;
  const double d = ft - fm;
  return std::log(sm / st) + (st * st + d * d) / (2.0 * sm * sm) - 0.5;
}

void TaskFamily::validate() const {
  if (kind == TaskKind::cluster_classification) {
    if (class_means.empty())
      throw std::invalid_argument("TaskFamily: cluster task needs class means");
    const std::size_t d = class_means[0].size();
    for (const auto& m : class_means)
      if (m.size() != d)
        throw std::invalid_argument("TaskFamily: inconsistent class mean dims");
    if (!(class_sigma > 0.0))
      throw std::invalid_argument("TaskFamily: class_sigma must be positive");
    split.validate();
    if (split.n_classes_total != static_cast<int>(class_means.size()))
      throw std::invalid_argument("TaskFamily: split size != number of means");
    return;
  }
  teacher_spec.validate();
  if (teacher_spec.output_kind != OutputKind::gaussian_fixed_sigma ||
      teacher_spec.head_dim != 1)
    throw std::invalid_argument("TaskFamily: teacher must be scalar gaussian");
  if (static_cast<int>(teacher_params.size()) != teacher_spec.param_count())
    throw std::invalid_argument("TaskFamily: teacher params length mismatch");
  if (kind == TaskKind::gaussian_covariate_shift) {
    if (static_cast<int>(mu0.size()) != teacher_spec.input_dim ||
        static_cast<int>(mu1.size()) != teacher_spec.input_dim)
      throw std::invalid_argument("TaskFamily: mean dims must match input_dim");
    if (!(sigma0_x > 0.0) || !(sigma1_x > 0.0))
      throw std::invalid_argument("TaskFamily: x sigmas must be positive");
  } else {
    if (!(sigma0_y > 0.0) || !(sigma1_y > 0.0))
      throw std::invalid_argument("TaskFamily: y sigmas must be positive");
  }
}

TaskFamily make_covariate_shift_task(std::vector<double> mu0, double sigma0,
                                     std::vector<double> mu1, double sigma1,
                                     ModelSpec teacher_spec,
                                     ParamVector teacher_params,
                                     std::uint64_t seed) {
  TaskFamily t;
  t.kind = TaskKind::gaussian_covariate_shift;
  t.rng_seed = seed;
  t.mu0 = std::move(mu0);
  t.mu1 = std::move(mu1);
  t.sigma0_x = sigma0;
  t.sigma1_x = sigma1;
  t.teacher_spec = std::move(teacher_spec);
  t.teacher_params = std::move(teacher_params);
  t.validate();
  return t;
}

TaskFamily make_nuisance_task(double sigma0_y, double sigma1_y,
                              ModelSpec teacher_spec, ParamVector teacher_params,
                              std::uint64_t seed) {
  TaskFamily t;
  t.kind = TaskKind::gaussian_nuisance;
  t.rng_seed = seed;
  t.sigma0_y = sigma0_y;
  t.sigma1_y = sigma1_y;
  t.teacher_spec = std::move(teacher_spec);
  t.teacher_params = std::move(teacher_params);
  t.validate();
  return t;
}

TaskFamily make_cluster_task(int n_classes, int dim, double radius,
                             double class_sigma, int n_pretrain_classes,
                             int n_downstream_classes, std::uint64_t seed) {
  if (n_classes < 2 || dim < 1 || !(radius > 0.0))
    throw std::invalid_argument("make_cluster_task: bad geometry parameters");
  TaskFamily t;
  t.kind = TaskKind::cluster_classification;
  t.rng_seed = seed;
  t.class_sigma = class_sigma;
  for (int c = 0; c < n_classes; ++c) {
    Rng rng = Rng::derive(seed, 0x6d65616eULL, static_cast<std::uint64_t>(c));
    std::vector<double> g(static_cast<std::size_t>(dim));
    double norm = 0.0;
    for (double& v : g) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : g) v = radius * v / norm;
    t.class_means.push_back(std::move(g));
  }
  t.split = MetaSplit::contiguous(n_classes, n_pretrain_classes, n_downstream_classes);
  t.validate();
  return t;
}

LabeledDataset sample(const TaskFamily& task, Side side, int count,
                      std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("sample: count must be >= 1");
  task.validate();
  Rng rng = Rng::derive(seed, task.rng_seed, static_cast<std::uint64_t>(side));
  const int d = task.input_dim();
  LabeledDataset data;
  data.dim = d;
  data.classification = task.classification();
  data.source_tag = side == Side::pretrain ? SourceTag::pretrain : SourceTag::downstream;
  std::vector<double> x(static_cast<std::size_t>(d));
  for (int i = 0; i < count; ++i) {
    if (task.kind == TaskKind::cluster_classification) {
      const auto& ids = task.side_classes(side);
      const int c = ids[rng.below(ids.size())];
      task.draw_class_x(c, rng, x);
      data.push_back(x, static_cast<double>(c));
    } else {
      task.draw_x(side, rng, x);
      data.push_back(x, task.draw_y_given_x(side, x, rng));
    }
  }
  return data;
}

LabeledDataset relabel_local(const TaskFamily& task, Side side,
                             const LabeledDataset& data) {
  LabeledDataset out = data;
  if (!task.classification()) return out;
  for (double& y : out.ys)
    y = static_cast<double>(task.local_label(side, static_cast<int>(y)));
  return out;
}

LabeledDataset sample_local(const TaskFamily& task, Side side, int count,
                            std::uint64_t seed) {
  return relabel_local(task, side, sample(task, side, count, seed));
}

ShiftConstants shift_constants(const TaskFamily& task) {
  task.validate();
  ShiftConstants sc;
  if (task.kind == TaskKind::gaussian_covariate_shift) {
    sc.D = 0.0;  // shared r(y|x)
    const bool same_mu = task.mu0 == task.mu1;
    if (task.sigma0_x == task.sigma1_x) {
      sc.M = same_mu ? 1.0 : kInf;
      return sc;
    }
    if (task.sigma0_x < task.sigma1_x) {
      sc.M = kInf;
      return sc;
    }
    double d2 = 0.0;
    for (std::size_t j = 0; j < task.mu0.size(); ++j) {
      const double d = task.mu0[j] - task.mu1[j];
      d2 += d * d;
    }
    const double dims = static_cast<double>(task.mu0.size());
    sc.M = std::pow(task.sigma0_x / task.sigma1_x, dims) *
           std::exp(d2 / (2.0 * (task.sigma0_x * task.sigma0_x -
                                 task.sigma1_x * task.sigma1_x)));
    return sc;
  }
  if (task.kind == TaskKind::gaussian_nuisance) {
    const double s0 = task.sigma0_y, s1 = task.sigma1_y;
    sc.D = std::log(s0 / s1) + s1 * s1 / (2.0 * s0 * s0) - 0.5;
    if (s0 == s1)
      sc.M = 1.0;
    else if (s0 > s1)
      sc.M = s0 / s1;
    else
      sc.M = kInf;
    return sc;
  }
  throw std::invalid_argument(
      "shift_constants: no closed form for cluster_classification; "
      "use mc_shift_constants");
}

namespace {

// joint draw; returns y (cluster: global class id)
double draw_joint(const TaskFamily& task, Side side, Rng& rng,
                  std::span<double> x) {
  if (task.kind == TaskKind::cluster_classification) {
    const auto& ids = task.side_classes(side);
    const int c = ids[rng.below(ids.size())];
    task.draw_class_x(c, rng, x);
    return static_cast<double>(c);
  }
  task.draw_x(side, rng, x);
  return task.draw_y_given_x(side, x, rng);
}

}  // namespace

ShiftConstants mc_shift_constants(const TaskFamily& task, int samples,
                                  std::uint64_t seed, double ratio_cap) {
  if (samples < 2) throw std::invalid_argument("mc_shift_constants: samples >= 2");
  task.validate();
  ShiftConstants sc;
  sc.monte_carlo = true;
  const int d = task.input_dim();
  std::vector<double> x(static_cast<std::size_t>(d));

  // max density ratio over draws from r0
  Rng rng0 = Rng::derive(seed, task.rng_seed, 0x30);
  double max1 = 0.0, max2 = 0.0;
  bool unbounded = false;
  for (int i = 0; i < samples; ++i) {
    const double y = draw_joint(task, Side::pretrain, rng0, x);
    const double lr = task.log_joint(Side::downstream, x, y) -
                      task.log_joint(Side::pretrain, x, y);
    const double r = std::exp(lr);
    if (!(r < ratio_cap)) unbounded = true;
    if (r > max1) {
      max2 = max1;
      max1 = r;
    } else if (r > max2) {
      max2 = r;
    }
  }
  // support check on draws from r1: any point the pretraining density cannot
  // explain makes M infinite
  Rng rng1 = Rng::derive(seed, task.rng_seed, 0x31);
  double dsum = 0.0, dsq = 0.0;
  bool d_unbounded = false;
  for (int i = 0; i < samples; ++i) {
    const double y = draw_joint(task, Side::downstream, rng1, x);
    const double lr = task.log_joint(Side::downstream, x, y) -
                      task.log_joint(Side::pretrain, x, y);
    if (!(std::exp(lr) < ratio_cap)) unbounded = true;
    const double ld = task.log_cond(Side::downstream, x, y) -
                      task.log_cond(Side::pretrain, x, y);
    if (!std::isfinite(ld)) d_unbounded = true;
    dsum += ld;
    dsq += ld * ld;
  }
  sc.M = unbounded ? kInf : max1;
  sc.M_std_error = unbounded ? 0.0 : max1 - max2;  // order-statistic spacing
  if (d_unbounded) {
    sc.D = kInf;
    sc.D_std_error = 0.0;
  } else {
    const double n = static_cast<double>(samples);
    sc.D = dsum / n;
    const double var = std::max(0.0, dsq / n - sc.D * sc.D);
    sc.D_std_error = std::sqrt(var / n);
  }
  return sc;
}

bool has_exact_population_k(const TaskFamily& task, const ModelSpec& spec) {
  return task.analytic() && is_affine_gaussian(spec) &&
         is_affine_gaussian(task.teacher_spec) &&
         spec.input_dim == task.teacher_spec.input_dim;
}

double population_k_exact(const TaskFamily& task, const ModelSpec& spec,
                          std::span<const double> w, Side side) {
  if (!has_exact_population_k(task, spec))
    throw std::invalid_argument("population_k_exact: closed form unavailable");
  const int d = spec.input_dim;
  // affine layout: d slope coords then the bias
  double slope2 = 0.0, mean_term;
  double dot_mu = 0.0;
  const double* tw = task.teacher_params.values.data();
  for (int j = 0; j < d; ++j) {
    const double da = w[j] - tw[j];
    slope2 += da * da;
    if (task.kind == TaskKind::gaussian_covariate_shift) {
      const auto& mu = side == Side::pretrain ? task.mu0 : task.mu1;
      dot_mu += da * mu[static_cast<std::size_t>(j)];
    }
  }
  const double db = w[d] - tw[d];
  const double sx = task.kind == TaskKind::gaussian_covariate_shift
                        ? (side == Side::pretrain ? task.sigma0_x : task.sigma1_x)
                        : 1.0;
  mean_term = dot_mu + db;
  const double e_df2 = sx * sx * slope2 + mean_term * mean_term;
  const double st = task.teacher_sigma_y(side), sm = spec.sigma;
  return std::log(sm / st) + (st * st + e_df2) / (2.0 * sm * sm) - 0.5;
}

double population_loss(const ModelSpec& spec, const ParamVector& params,
                       const TaskFamily& task, WhichLoss which, Side side,
                       int mc_samples, std::uint64_t seed) {
  if (mc_samples < 1)
    throw std::invalid_argument("population_loss: mc_samples must be >= 1");
  spec.validate();
  task.validate();
  if (spec.input_dim != task.input_dim())
    throw std::invalid_argument("population_loss: input dimension mismatch");

  if (has_exact_population_k(task, spec)) {
    const double k = population_k_exact(task, spec, params.values, side);
    if (which == WhichLoss::K) return k;
    return k + gaussian_entropy(task.teacher_sigma_y(side));
  }

  Rng rng = Rng::derive(seed, task.rng_seed, 0x4b, static_cast<std::uint64_t>(side));
  const int d = task.input_dim();
  std::vector<double> x(static_cast<std::size_t>(d));
  std::vector<double> vals(static_cast<std::size_t>(mc_samples));
  detail::Workspace ws;
  for (int i = 0; i < mc_samples; ++i) {
    task.draw_x(side, rng, x);
    double v = task.pointwise_kl(side, x, spec, params.values, ws);
    if (which == WhichLoss::L) v += task.cond_entropy(side, x);
    vals[static_cast<std::size_t>(i)] = v;
  }
  return deterministic_mean(vals);
}

double mean_pointwise_kl(const TaskFamily& task, Side side,
                         const std::vector<double>& eval_xs, int count,
                         const ModelSpec& spec, std::span<const double> w) {
  const int d = task.input_dim();
  detail::Workspace ws;
  std::vector<double> vals(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::span<const double> x(eval_xs.data() + static_cast<std::size_t>(i) * d,
                              static_cast<std::size_t>(d));
    vals[static_cast<std::size_t>(i)] = task.pointwise_kl(side, x, spec, w, ws);
  }
  return deterministic_mean(vals);
}

}  // namespace fecs
