#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "fecs/model.hpp"
#include "fecs/pretrain.hpp"
#include "fecs/rng.hpp"

namespace fecs {

struct SgldConfig {
  double step_size = 1e-5;
  int chain_length = 2000;
  int burn_in = 500;  // defaults hold the 25% convention
  int batch_size = 2048;
  int full_batch_threshold = 4096;  // datasets this small use exact gradients
  double gamma = 1.0;
  std::optional<double> beta;  // nullopt: WBIC temperature beta* = 1/log n
  int chains = 4;
  std::uint64_t seed = 0;
  int thin = 1;
  void validate(long n) const;
  double resolve_beta(long n) const;
};

struct ChainDiagnostics {
  double mean_drift_from_anchor = 0.0;  // mean ||w - w*||_2 over kept samples
  double max_param_excursion = 0.0;     // max_j |w_j - w*_j| over the run
};

struct FreeEnergyEstimate {
  double wbic = 0.0;
  double llc = 0.0;
  long n = 0;
  double anchor_loss = 0.0;  // n * mean NLL at the anchor
  std::vector<double> per_chain_wbic;
  double std_error = 0.0;  // between-chain standard error
  ChainDiagnostics diagnostics;
  int chains_failed = 0;
  double beta = 0.0;
  double gamma = 0.0;
  nlohmann::json to_json() const;
};

// What a chain samples against: mean loss over the data and a (possibly
// minibatched) gradient estimate of it. Analytic test losses plug in through
// FunctionSgldTarget.
class SgldTarget {
 public:
  virtual ~SgldTarget() = default;
  virtual int dim() const = 0;
  virtual long data_size() const = 0;
  // coordinates >= this index are head coordinates, frozen at the anchor
  virtual int backbone_boundary() const { return dim(); }
  virtual double full_loss(std::span<const double> w) const = 0;
  // returns the batch mean loss; sets exact when the gradient (and the
  // returned loss) covered the whole dataset
  virtual double grad(std::span<const double> w, Rng& rng, double* g,
                      bool& exact) const = 0;
};

class DatasetSgldTarget : public SgldTarget {
 public:
  DatasetSgldTarget(const ModelSpec& spec, const LabeledDataset& data,
                    int batch_size, int full_batch_threshold);
  int dim() const override;
  long data_size() const override { return static_cast<long>(data_.size()); }
  int backbone_boundary() const override;
  double full_loss(std::span<const double> w) const override;
  double grad(std::span<const double> w, Rng& rng, double* g,
              bool& exact) const override;

 private:
  const ModelSpec& spec_;
  const LabeledDataset& data_;
  int batch_size_;
  bool full_batch_;
};

class FunctionSgldTarget : public SgldTarget {
 public:
  FunctionSgldTarget(const LossFunction& f, long n) : f_(f), n_(n) {}
  int dim() const override { return f_.dim(); }
  long data_size() const override { return n_; }
  double full_loss(std::span<const double> w) const override { return f_.value(w); }
  double grad(std::span<const double> w, Rng&, double* g,
              bool& exact) const override {
    exact = true;
    return f_.value_and_grad(w, g);
  }

 private:
  const LossFunction& f_;
  long n_;
};

// Called once per kept sample with the current state and its full-data nll.
using SampleVisitor =
    std::function<void(std::span<const double> w, double full_loss, int t)>;

// One SGLD chain against the localized tempered posterior
//   p(w) propto exp{-n beta Lhat(w)} exp{-gamma ||w - w*||^2},
// discretized as w += -(eps/2)[n beta grad + 2 gamma (w - w*)] + N(0, eps I)
// on backbone coordinates only; head coordinates stay at the anchor.
// Throws DivergenceError if the loss goes non-finite.
ChainDiagnostics run_sgld_chain(const SgldTarget& target,
                                std::span<const double> anchor,
                                const SgldConfig& config, double beta,
                                int chain_index, const SampleVisitor& visit);

// Spec-level chain op: post-burn-in samples of a single chain (chain 0).
std::vector<ParamVector> sgld_chain(const ModelSpec& spec,
                                    const Checkpoint& anchor,
                                    const LabeledDataset& data,
                                    const SgldConfig& config);

// Localized WBIC: posterior mean of n*Lhat under the chain above, averaged
// over chains; llc = (wbic - anchor_loss) / log n. Failed chains are dropped
// with a warning count; all chains failing raises EstimationFailedError.
FreeEnergyEstimate estimate_wbic(const SgldTarget& target,
                                 std::span<const double> anchor,
                                 const SgldConfig& config,
                                 const std::filesystem::path& trace_csv = {});
FreeEnergyEstimate estimate_wbic(const ModelSpec& spec, const Checkpoint& anchor,
                                 const LabeledDataset& data,
                                 const SgldConfig& config,
                                 const std::filesystem::path& trace_csv = {});

}  // namespace fecs
