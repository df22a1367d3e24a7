#include "fecs/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fecs/errors.hpp"
#include "fecs/reduce.hpp"

namespace fecs {

int ModelSpec::fan_in(int layer) const {
  return layer == 0 ? input_dim : hidden_widths[layer - 1];
}

int ModelSpec::fan_out(int layer) const {
  return layer == layer_count() - 1 ? head_dim
                                    : hidden_widths[static_cast<std::size_t>(layer)];
}

int ModelSpec::param_count() const {
  int total = 0;
  for (int l = 0; l < layer_count(); ++l) total += (fan_in(l) + 1) * fan_out(l);
  return total;
}

int ModelSpec::head_param_count() const {
  return (fan_in(layer_count() - 1) + 1) * head_dim;
}

void ModelSpec::validate() const {
  if (input_dim < 1) throw std::invalid_argument("ModelSpec: input_dim must be positive");
  if (head_dim < 1) throw std::invalid_argument("ModelSpec: head_dim must be positive");
  for (int h : hidden_widths)
    if (h < 1) throw std::invalid_argument("ModelSpec: hidden widths must be positive");
  if (output_kind == OutputKind::gaussian_fixed_sigma && !(sigma > 0.0))
    throw std::invalid_argument("ModelSpec: sigma must be positive");
}

ParamVector init_params(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  ParamVector p;
  p.values.resize(static_cast<std::size_t>(spec.param_count()));
  p.backbone_boundary = spec.backbone_param_count();
  std::size_t off = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int a = spec.fan_in(l), b = spec.fan_out(l);
    const double bound = std::sqrt(6.0 / (a + b));
    for (int k = 0; k < a * b; ++k) p.values[off++] = rng.uniform(-bound, bound);
    for (int k = 0; k < b; ++k) p.values[off++] = 0.0;  // biases start at zero
  }
  return p;
}

std::pair<ModelSpec, ParamVector> replace_head(const ModelSpec& spec,
                                               const ParamVector& params,
                                               int new_head_dim, Rng& rng) {
  if (new_head_dim < 1) throw std::invalid_argument("replace_head: head_dim must be positive");
  if (static_cast<int>(params.size()) != spec.param_count())
    throw std::invalid_argument("replace_head: params length mismatch");
  ModelSpec out = spec;
  out.head_dim = new_head_dim;
  ParamVector q;
  q.backbone_boundary = spec.backbone_param_count();
  q.values.assign(params.values.begin(),
                  params.values.begin() + q.backbone_boundary);
  const int a = out.fan_in(out.layer_count() - 1);
  const double bound = std::sqrt(6.0 / (a + new_head_dim));
  for (int k = 0; k < a * new_head_dim; ++k)
    q.values.push_back(rng.uniform(-bound, bound));
  for (int k = 0; k < new_head_dim; ++k) q.values.push_back(0.0);
  return {out, q};
}

namespace detail {

namespace {

double act_fn(Activation a, double z) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

double act_deriv(Activation a, double z, double act_value) {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0)
                               : 1.0 - act_value * act_value;
}

void ensure_ws(const ModelSpec& spec, Workspace& ws) {
  std::size_t acts = static_cast<std::size_t>(spec.input_dim);
  std::size_t pre = 0;
  std::size_t widest = static_cast<std::size_t>(spec.input_dim);
  for (int l = 0; l < spec.layer_count(); ++l) {
    acts += static_cast<std::size_t>(spec.fan_out(l));
    pre += static_cast<std::size_t>(spec.fan_out(l));
    widest = std::max(widest, static_cast<std::size_t>(spec.fan_out(l)));
  }
  if (ws.acts.size() < acts) ws.acts.resize(acts);
  if (ws.preact.size() < pre) ws.preact.resize(pre);
  if (ws.delta.size() < 2 * widest) ws.delta.resize(2 * widest);
  if (ws.out.size() < static_cast<std::size_t>(spec.head_dim))
    ws.out.resize(static_cast<std::size_t>(spec.head_dim));
}

}  // namespace

void forward_raw(const ModelSpec& spec, std::span<const double> w,
                 std::span<const double> x, Workspace& ws,
                 std::span<double> out) {
  ensure_ws(spec, ws);
  std::copy(x.begin(), x.end(), ws.acts.begin());
  std::size_t act_off = 0;    // start of this layer's input in acts
  std::size_t pre_off = 0;
  std::size_t w_off = 0;
  const int L = spec.layer_count();
  for (int l = 0; l < L; ++l) {
    const int a = spec.fan_in(l), b = spec.fan_out(l);
    const double* in = ws.acts.data() + act_off;
    double* z = ws.preact.data() + pre_off;
    const double* weight = w.data() + w_off;
    const double* bias = weight + static_cast<std::size_t>(a) * b;
    for (int o = 0; o < b; ++o) {
      double s = bias[o];
      const double* row = weight + static_cast<std::size_t>(o) * a;
      for (int i = 0; i < a; ++i) s += row[i] * in[i];
      z[o] = s;
    }
    double* next = ws.acts.data() + act_off + a;
    if (l == L - 1) {
      std::copy(z, z + b, out.begin());
    } else {
      for (int o = 0; o < b; ++o) next[o] = act_fn(spec.activation, z[o]);
    }
    act_off += static_cast<std::size_t>(a);
    pre_off += static_cast<std::size_t>(b);
    w_off += static_cast<std::size_t>(a + 1) * b;
  }
}

namespace {

// nll of one example given final-layer outputs; writes d nll / d logits when
// dz != nullptr.
double output_nll(const ModelSpec& spec, std::span<const double> logits,
                  double y, double* dz) {
  if (spec.output_kind == OutputKind::categorical_softmax) {
    const int c = static_cast<int>(y);
    if (c < 0 || c >= spec.head_dim)
      throw std::invalid_argument("empirical_nll: label out of range");
    const int C = spec.head_dim;
    double m = logits[0];
    for (int k = 1; k < C; ++k) m = std::max(m, logits[k]);
    double se = 0.0;
    for (int k = 0; k < C; ++k) se += std::exp(logits[k] - m);
    const double lse = m + std::log(se);
    if (dz) {
      for (int k = 0; k < C; ++k) dz[k] = std::exp(logits[k] - lse);
      dz[c] -= 1.0;
    }
    return lse - logits[c];
  }
  if (spec.head_dim != 1)
    throw std::invalid_argument(
        "empirical_nll: gaussian dataset targets are scalar; head_dim must be 1");
  const double s2 = spec.sigma * spec.sigma;
  const double r = logits[0] - y;
  if (dz) dz[0] = r / s2;
  return 0.5 * std::log(2.0 * std::numbers::pi * s2) + r * r / (2.0 * s2);
}

}  // namespace

double example_nll(const ModelSpec& spec, std::span<const double> w,
                   std::span<const double> x, double y, Workspace& ws) {
  ensure_ws(spec, ws);
  std::span<double> out(ws.out.data(), static_cast<std::size_t>(spec.head_dim));
  forward_raw(spec, w, x, ws, out);
  return output_nll(spec, out, y, nullptr);
}

double example_nll_grad(const ModelSpec& spec, std::span<const double> w,
                        std::span<const double> x, double y, Workspace& ws,
                        double* grad) {
  ensure_ws(spec, ws);
  std::span<double> out(ws.out.data(), static_cast<std::size_t>(spec.head_dim));
  forward_raw(spec, w, x, ws, out);

  const int L = spec.layer_count();
  double* cur = ws.delta.data();
  double* nxt = ws.delta.data() + ws.delta.size() / 2;
  const double nll = output_nll(spec, out, y, cur);

  // offsets of the last layer
  std::size_t act_off = static_cast<std::size_t>(spec.input_dim);
  std::size_t pre_off = 0;
  std::size_t w_off = 0;
  for (int l = 0; l + 1 < L; ++l) {
    act_off += static_cast<std::size_t>(spec.fan_out(l));
    pre_off += static_cast<std::size_t>(spec.fan_out(l));
    w_off += static_cast<std::size_t>(spec.fan_in(l) + 1) * spec.fan_out(l);
  }
  act_off -= static_cast<std::size_t>(spec.fan_in(L - 1));

  for (int l = L - 1; l >= 0; --l) {
    const int a = spec.fan_in(l), b = spec.fan_out(l);
    const double* in = ws.acts.data() + act_off;
    const double* weight = w.data() + w_off;
    double* gw = grad + w_off;
    double* gb = gw + static_cast<std::size_t>(a) * b;
    for (int o = 0; o < b; ++o) {
      const double d = cur[o];
      double* grow = gw + static_cast<std::size_t>(o) * a;
      for (int i = 0; i < a; ++i) grow[i] += d * in[i];
      gb[o] += d;
    }
    if (l > 0) {
      const int a_prev = spec.fan_in(l - 1);
      const double* z_prev = ws.preact.data() + pre_off - a;
      for (int i = 0; i < a; ++i) {
        double s = 0.0;
        for (int o = 0; o < b; ++o)
          s += weight[static_cast<std::size_t>(o) * a + i] * cur[o];
        nxt[i] = s * act_deriv(spec.activation, z_prev[i], in[i]);
      }
      std::swap(cur, nxt);
      act_off -= static_cast<std::size_t>(a_prev);
      pre_off -= static_cast<std::size_t>(a);
      w_off -= static_cast<std::size_t>(a_prev + 1) * a;
    }
  }
  return nll;
}

}  // namespace detail

Predictive forward(const ModelSpec& spec, const ParamVector& params,
                   std::span<const double> x) {
  spec.validate();
  if (static_cast<int>(x.size()) != spec.input_dim)
    throw std::invalid_argument("forward: input dimension mismatch");
  if (static_cast<int>(params.size()) != spec.param_count())
    throw std::invalid_argument("forward: params length mismatch");
  detail::Workspace ws;
  std::vector<double> out(static_cast<std::size_t>(spec.head_dim));
  detail::forward_raw(spec, params.values, x, ws, out);
  Predictive p;
  p.kind = spec.output_kind;
  if (spec.output_kind == OutputKind::categorical_softmax) {
    double m = out[0];
    for (double v : out) m = std::max(m, v);
    double se = 0.0;
    for (double v : out) se += std::exp(v - m);
    p.probs.resize(out.size());
    for (std::size_t k = 0; k < out.size(); ++k)
      p.probs[k] = std::exp(out[k] - m) / se;
  } else {
    p.mean = out;
    p.sigma = spec.sigma;
  }
  return p;
}

namespace {

void check_dataset(const ModelSpec& spec, std::span<const double> w,
                   const LabeledDataset& data) {
  if (data.size() == 0)
    throw std::invalid_argument("empirical_nll: empty dataset");
  if (data.dim != spec.input_dim)
    throw std::invalid_argument("empirical_nll: input dimension mismatch");
  if (static_cast<int>(w.size()) != spec.param_count())
    throw std::invalid_argument("empirical_nll: params length mismatch");
  if (data.classification && spec.output_kind != OutputKind::categorical_softmax)
    throw std::invalid_argument("empirical_nll: class labels need a categorical model");
  if (!data.classification && spec.output_kind != OutputKind::gaussian_fixed_sigma)
    throw std::invalid_argument("empirical_nll: real targets need a gaussian model");
}

std::size_t pick(std::span<const int> idx, std::size_t i) {
  return idx.empty() ? i : static_cast<std::size_t>(idx[i]);
}

}  // namespace

double batch_nll(const ModelSpec& spec, std::span<const double> w,
                 const LabeledDataset& data, std::span<const int> idx) {
  check_dataset(spec, w, data);
  const std::size_t n = idx.empty() ? data.size() : idx.size();
  std::vector<double> vals(n);
  const std::size_t nb = block_count(n);
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < nb; ++b) {
    detail::Workspace ws;
    const std::size_t lo = b * kGradBlock, hi = std::min(n, lo + kGradBlock);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t e = pick(idx, i);
      vals[i] = detail::example_nll(spec, w, data.x(e), data.ys[e], ws);
    }
  }
  return deterministic_mean(vals);
}

double batch_nll_serial(const ModelSpec& spec, std::span<const double> w,
                        const LabeledDataset& data, std::span<const int> idx) {
  check_dataset(spec, w, data);
  const std::size_t n = idx.empty() ? data.size() : idx.size();
  detail::Workspace ws;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t e = pick(idx, i);
    s += detail::example_nll(spec, w, data.x(e), data.ys[e], ws);
  }
  return s / static_cast<double>(n);
}

double batch_nll_grad(const ModelSpec& spec, std::span<const double> w,
                      const LabeledDataset& data, std::span<const int> idx,
                      double* grad) {
  check_dataset(spec, w, data);
  const std::size_t n = idx.empty() ? data.size() : idx.size();
  const std::size_t dim = w.size();
  const std::size_t nb = block_count(n);
  std::vector<double> vals(n);
  std::vector<double> block_buf(nb * dim, 0.0);
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < nb; ++b) {
    detail::Workspace ws;
    double* g = block_buf.data() + b * dim;
    const std::size_t lo = b * kGradBlock, hi = std::min(n, lo + kGradBlock);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t e = pick(idx, i);
      vals[i] = detail::example_nll_grad(spec, w, data.x(e), data.ys[e], ws, g);
    }
  }
  reduce_blocks(block_buf, nb, dim, grad);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < dim; ++j) grad[j] *= inv;
  return deterministic_mean(vals);
}

double batch_nll_grad_serial(const ModelSpec& spec, std::span<const double> w,
                             const LabeledDataset& data,
                             std::span<const int> idx, double* grad) {
  check_dataset(spec, w, data);
  const std::size_t n = idx.empty() ? data.size() : idx.size();
  const std::size_t dim = w.size();
  detail::Workspace ws;
  std::fill(grad, grad + dim, 0.0);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t e = pick(idx, i);
    s += detail::example_nll_grad(spec, w, data.x(e), data.ys[e], ws, grad);
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < dim; ++j) grad[j] *= inv;
  return s * inv;
}

double empirical_nll(const ModelSpec& spec, const ParamVector& params,
                     const LabeledDataset& data) {
  return batch_nll(spec, params.values, data);
}

double classification_accuracy(const ModelSpec& spec, const ParamVector& params,
                               const LabeledDataset& data) {
  check_dataset(spec, params.values, data);
  if (!data.classification)
    throw std::invalid_argument("accuracy: classification dataset required");
  const std::size_t n = data.size();
  std::vector<int> hit(n, 0);
  const std::size_t nb = block_count(n);
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < nb; ++b) {
    detail::Workspace ws;
    std::vector<double> out(static_cast<std::size_t>(spec.head_dim));
    const std::size_t lo = b * kGradBlock, hi = std::min(n, lo + kGradBlock);
    for (std::size_t i = lo; i < hi; ++i) {
      detail::forward_raw(spec, params.values, data.x(i), ws, out);
      int arg = 0;
      for (int k = 1; k < spec.head_dim; ++k)
        if (out[k] > out[arg]) arg = k;
      hit[i] = arg == data.label(i) ? 1 : 0;
    }
  }
  long c = 0;
  for (int h : hit) c += h;
  return static_cast<double>(c) / static_cast<double>(n);
}

double DatasetNllLoss::value_and_grad(std::span<const double> w,
                                      double* grad) const {
  if (grad) return batch_nll_grad(spec_, w, data_, {}, grad);
  return batch_nll(spec_, w, data_, {});
}

double QuadraticPenalty::value_and_grad(std::span<const double> w,
                                        double* grad) const {
  if (w.size() != center_.size())
    throw std::invalid_argument("QuadraticPenalty: dimension mismatch");
  double s = 0.0;
  if (grad) std::fill(grad, grad + w.size(), 0.0);
  for (int j = 0; j < active_below_; ++j) {
    const double d = w[j] - center_[j];
    s += d * d;
    if (grad) grad[j] = 2.0 * coeff_ * d;
  }
  return coeff_ * s;
}

double SumLoss::value_and_grad(std::span<const double> w, double* grad) const {
  if (!grad) return a_.value(w) + b_.value(w);
  std::vector<double> gb(w.size());
  const double va = a_.value_and_grad(w, grad);
  const double vb = b_.value_and_grad(w, gb.data());
  for (std::size_t j = 0; j < w.size(); ++j) grad[j] += gb[j];
  return va + vb;
}

std::vector<double> gradient(const LossFunction& loss, const ParamVector& params) {
  if (static_cast<int>(params.size()) != loss.dim())
    throw std::invalid_argument("gradient: params length mismatch");
  std::vector<double> g(params.size());
  const double v = loss.value_and_grad(params.values, g.data());
  if (!std::isfinite(v))
    throw NonFiniteLossError("gradient: loss is not finite at params");
  return g;
}

}  // namespace fecs
