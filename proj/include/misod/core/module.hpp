#pragma once

#include <string>
#include <utility>
#include <vector>

#include "misod/core/autograd.hpp"
#include "misod/core/rng.hpp"

namespace misod {

// Flat registry of a model's trainable parameters and persistent buffers
// (batch-norm running statistics). Modules append themselves under a dotted
// prefix; the optimizer and checkpointing work off this view.
template <typename T>
struct ParamRefs {
  std::vector<std::pair<std::string, Var<T>*>> params;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;

  void add_param(const std::string& name, Var<T>* v) {
    params.emplace_back(name, v);
  }
  void add_buffer(const std::string& name, Tensor<T>* t) {
    buffers.emplace_back(name, t);
  }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (const auto& [name, v] : params) total += v->value().numel();
    return total;
  }
};

inline std::string join_name(const std::string& prefix,
                             const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
Var<T> make_param(Tensor<T> init) {
  return Var<T>(std::move(init), /*requires_grad=*/true);
}

template <typename T>
Tensor<T> he_normal_init(Shape4 shape, int fan_in, RngStream& rng) {
  Tensor<T> t(shape);
  const double stddev = std::sqrt(2.0 / fan_in);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

}  // namespace misod
