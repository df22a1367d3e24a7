#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fecs/rng.hpp"

namespace fecs {

enum class Activation { relu, tanh };
enum class OutputKind { categorical_softmax, gaussian_fixed_sigma };

// MLP family with an explicit backbone/head split. The head is always the
// final linear layer (weights + bias); everything before it is backbone.
struct ModelSpec {
  int input_dim = 1;
  std::vector<int> hidden_widths;
  int head_dim = 1;
  Activation activation = Activation::tanh;
  OutputKind output_kind = OutputKind::categorical_softmax;
  double sigma = 1.0;  // gaussian_fixed_sigma only; fixed, never learned

  int layer_count() const { return static_cast<int>(hidden_widths.size()) + 1; }
  // fan_in of layer l (0-based; layer_count()-1 is the head)
  int fan_in(int layer) const;
  int fan_out(int layer) const;
  int param_count() const;
  int head_param_count() const;
  int backbone_param_count() const { return param_count() - head_param_count(); }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelSpec&) const = default;
};

// Flat parameter array. Layout is layer-major, weights row-major by output
// unit, biases after weights within each layer; head coordinates last, so the
// backbone mask collapses to one boundary index.
struct ParamVector {
  std::vector<double> values;
  int backbone_boundary = 0;  // values[i] is backbone iff i < boundary

  std::size_t size() const { return values.size(); }
  bool is_backbone(std::size_t i) const {
    return static_cast<int>(i) < backbone_boundary;
  }
  std::vector<std::uint8_t> backbone_mask() const {
    std::vector<std::uint8_t> m(values.size(), 0);
    for (std::size_t i = 0; i < values.size(); ++i) m[i] = is_backbone(i) ? 1 : 0;
    return m;
  }
};

enum class SourceTag { pretrain, downstream };

// Inputs stored flat (row-major); targets are class indices for
// classification datasets and real values for regression ones.
struct LabeledDataset {
  std::vector<double> xs;  // n * dim
  std::vector<double> ys;  // n
  int dim = 0;
  bool classification = true;
  SourceTag source_tag = SourceTag::pretrain;

  std::size_t size() const { return ys.size(); }
  std::span<const double> x(std::size_t i) const {
    return {xs.data() + i * static_cast<std::size_t>(dim),
            static_cast<std::size_t>(dim)};
  }
  int label(std::size_t i) const { return static_cast<int>(ys[i]); }
  void push_back(std::span<const double> x, double y) {
    xs.insert(xs.end(), x.begin(), x.end());
    ys.push_back(y);
  }
};

struct Predictive {
  OutputKind kind;
  std::vector<double> probs;  // categorical: sums to 1
  std::vector<double> mean;   // gaussian: f_w(x)
  double sigma = 0.0;
};

ParamVector init_params(const ModelSpec& spec, Rng& rng);

// Re-initializes the final layer for a (possibly different) head dimension.
// Backbone coordinates are copied bitwise.
std::pair<ModelSpec, ParamVector> replace_head(const ModelSpec& spec,
                                               const ParamVector& params,
                                               int new_head_dim, Rng& rng);

Predictive forward(const ModelSpec& spec, const ParamVector& params,
                   std::span<const double> x);

// Mean negative log likelihood over the dataset (cross-entropy for
// categorical outputs). Deterministic accumulation; see reduce.hpp.
double empirical_nll(const ModelSpec& spec, const ParamVector& params,
                     const LabeledDataset& data);

// ---------------------------------------------------------------------------
// Differentiable losses. The model family is closed, so gradients come from a
// fixed reverse-mode tape over the MLP structure rather than a general graph.
// Scalar losses of the parameters compose through this interface; SGD, SGLD
// and the penalized minimizers all consume it.
class LossFunction {
 public:
  virtual ~LossFunction() = default;
  virtual int dim() const = 0;
  // Returns the loss; when grad != nullptr also writes d(loss)/dw into it.
  virtual double value_and_grad(std::span<const double> w,
                                double* grad) const = 0;
  double value(std::span<const double> w) const { return value_and_grad(w, nullptr); }
};

// Mean NLL over a dataset (optionally a subset given by indices).
class DatasetNllLoss : public LossFunction {
 public:
  DatasetNllLoss(const ModelSpec& spec, const LabeledDataset& data)
      : spec_(spec), data_(data) {}
  int dim() const override { return spec_.param_count(); }
  double value_and_grad(std::span<const double> w, double* grad) const override;

 private:
  const ModelSpec& spec_;
  const LabeledDataset& data_;
};

// coeff * sum_j mask_j * (w_j - center_j)^2 ; used for the Gaussian localizer
// penalty in ball-constrained minimization.
class QuadraticPenalty : public LossFunction {
 public:
  QuadraticPenalty(std::vector<double> center, double coeff,
                   int active_below = -1)
      : center_(std::move(center)),
        coeff_(coeff),
        active_below_(active_below < 0 ? static_cast<int>(center_.size())
                                       : active_below) {}
  int dim() const override { return static_cast<int>(center_.size()); }
  double value_and_grad(std::span<const double> w, double* grad) const override;

 private:
  std::vector<double> center_;
  double coeff_;
  int active_below_;
};

class SumLoss : public LossFunction {
 public:
  SumLoss(const LossFunction& a, const LossFunction& b) : a_(a), b_(b) {}
  int dim() const override { return a_.dim(); }
  double value_and_grad(std::span<const double> w, double* grad) const override;

 private:
  const LossFunction& a_;
  const LossFunction& b_;
};

// Gradient of an arbitrary composed loss; throws NonFiniteLossError if the
// loss is not finite at params.
std::vector<double> gradient(const LossFunction& loss, const ParamVector& params);

// ---------------------------------------------------------------------------
// Batch kernels. The OpenMP versions are the production path: per-example
// work runs in parallel, reductions use a fixed order (reduce.hpp) so output
// is bitwise identical for any thread count. The _serial variants are naive
// reference loops kept for testing and benchmarking.

// Mean NLL over data[idx] (idx empty = whole dataset).
double batch_nll(const ModelSpec& spec, std::span<const double> w,
                 const LabeledDataset& data, std::span<const int> idx = {});
double batch_nll_serial(const ModelSpec& spec, std::span<const double> w,
                        const LabeledDataset& data,
                        std::span<const int> idx = {});

// Mean NLL and its gradient; returns the loss, writes into grad.
double batch_nll_grad(const ModelSpec& spec, std::span<const double> w,
                      const LabeledDataset& data, std::span<const int> idx,
                      double* grad);
double batch_nll_grad_serial(const ModelSpec& spec, std::span<const double> w,
                             const LabeledDataset& data,
                             std::span<const int> idx, double* grad);

// Fraction of examples whose argmax class matches the label.
double classification_accuracy(const ModelSpec& spec, const ParamVector& params,
                               const LabeledDataset& data);

// Single-example pieces, exposed for the task module and tests.
namespace detail {
struct Workspace {
  std::vector<double> acts;    // concatenated activations incl. input copy
  std::vector<double> preact;  // concatenated pre-activations
  std::vector<double> delta;   // scratch for backward
  std::vector<double> out;     // final-layer outputs
};
void forward_raw(const ModelSpec& spec, std::span<const double> w,
                 std::span<const double> x, Workspace& ws,
                 std::span<double> out);
double example_nll(const ModelSpec& spec, std::span<const double> w,
                   std::span<const double> x, double y, Workspace& ws);
// Accumulates (not overwrites) d nll / dw into grad.
double example_nll_grad(const ModelSpec& spec, std::span<const double> w,
                        std::span<const double> x, double y, Workspace& ws,
                        double* grad);
}  // namespace detail

}  // namespace fecs
