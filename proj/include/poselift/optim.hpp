#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "poselift/common.hpp"
#include "poselift/tensor.hpp"

namespace poselift {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<double>> m;  // first moment per parameter
  std::vector<std::vector<double>> v;  // second moment per parameter

  static AdamState init(const std::vector<Tensor>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const Tensor& p : params) {
      st.m.emplace_back(p.data().size(), 0.0);
      st.v.emplace_back(p.data().size(), 0.0);
    }
    return st;
  }
};

// Standard bias-corrected Adam update, reading each parameter's accumulated
// gradient. Caller zeroes gradients afterwards.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
  if (params.size() != state.m.size())
    throw shape_error("adam_step: state tracks " + std::to_string(state.m.size()) +
                      " params, got " + std::to_string(params.size()));
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const std::vector<double>& g = p.grad();
    std::vector<double>& m = state.m[pi];
    std::vector<double>& v = state.v[pi];
    if (m.size() != p.data().size())
      throw shape_error("adam_step: moment size mismatch on param " +
                        std::to_string(pi));
    for (size_t i = 0; i < m.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p.data()[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace poselift
