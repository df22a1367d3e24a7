#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "fecs/model.hpp"
#include "fecs/rng.hpp"

namespace fecs::test {

inline ModelSpec small_mlp(int in, std::vector<int> hidden, int out,
                           Activation act = Activation::tanh,
                           OutputKind kind = OutputKind::categorical_softmax,
                           double sigma = 1.0) {
  ModelSpec s;
  s.input_dim = in;
  s.hidden_widths = std::move(hidden);
  s.head_dim = out;
  s.activation = act;
  s.output_kind = kind;
  s.sigma = sigma;
  return s;
}

inline ParamVector random_params(const ModelSpec& spec, std::uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  ParamVector p = init_params(spec, rng);
  for (double& v : p.values) v = rng.uniform(-1.0, 1.0);
  return p;
}

inline LabeledDataset random_classification(const ModelSpec& spec, int n,
                                            std::uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  LabeledDataset d;
  d.dim = spec.input_dim;
  d.classification = true;
  std::vector<double> x(static_cast<std::size_t>(spec.input_dim));
  for (int i = 0; i < n; ++i) {
    for (double& v : x) v = rng.normal();
    d.push_back(x, static_cast<double>(rng.below(static_cast<std::uint64_t>(spec.head_dim))));
  }
  return d;
}

inline LabeledDataset random_regression(const ModelSpec& spec, int n,
                                        std::uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  LabeledDataset d;
  d.dim = spec.input_dim;
  d.classification = false;
  std::vector<double> x(static_cast<std::size_t>(spec.input_dim));
  for (int i = 0; i < n; ++i) {
    for (double& v : x) v = rng.normal();
    d.push_back(x, rng.normal());
  }
  return d;
}

// scratch directory unique to a test, cleaned before use
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / "fecs_tests" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fecs::test
