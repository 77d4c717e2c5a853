#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "mvm/numerics.hpp"

namespace mvm {

struct AdamWSettings {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
struct OptimizerState {
  AdamWSettings settings;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  static OptimizerState for_parameters(const std::vector<Array<T>>& params, AdamWSettings s) {
    OptimizerState st;
    st.settings = s;
    for (const auto& p : params) {
      st.first_moment.emplace_back(p.size(), T{0});
      st.second_moment.emplace_back(p.size(), T{0});
    }
    return st;
  }
};

/// One AdamW update with decoupled weight decay:
///   p <- p - lr*wd*p
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Parameters without a gradient buffer are treated as having zero gradient.
/// Throws NumericalError (leaving everything untouched) on a non-finite
/// gradient.
template <class T>
void adamw_step(std::vector<Array<T>>& params, OptimizerState<T>& state) {
  if (params.size() != state.first_moment.size())
    throw std::invalid_argument("adamw_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                                " parameters, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != state.first_moment[i].size())
      throw std::invalid_argument("adamw_step: moment buffer shape mismatch for parameter " + std::to_string(i));
    if (!params[i].has_grad()) continue;
    auto g = params[i].grad();
    for (std::size_t k = 0; k < g.size(); ++k)
      if (!std::isfinite(g[k])) {
        std::ostringstream os;
        os << "adamw_step: non-finite gradient in parameter " << i << " " << shape_str(params[i].shape())
           << " at coordinate " << k << " (value " << g[k] << ") at step " << state.step + 1;
        throw NumericalError(os.str());
      }
  }

  const auto& s = state.settings;
  ++state.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  const T lr = static_cast<T>(s.lr);
  const T decay = static_cast<T>(1.0 - s.lr * s.weight_decay);
  const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
  const T inv_bc1 = static_cast<T>(1.0 / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(s.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool has = params[i].has_grad();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const T g = has ? params[i].grad()[k] : T{0};
      p[k] *= decay;
      m[k] = b1 * m[k] + (T{1} - b1) * g;
      v[k] = b2 * v[k] + (T{1} - b2) * g * g;
      const T mhat = m[k] * inv_bc1;
      const T vhat = v[k] * inv_bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <class T>
void zero_grads(std::vector<Array<T>>& params) {
  for (auto& p : params) p.clear_grad();
}

}  // namespace mvm
