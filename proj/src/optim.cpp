#include "taylorseg/optim.hpp"

#include <cassert>
#include <cmath>
#include <limits>

#include "taylorseg/errors.hpp"

namespace taylorseg {

void adamw_step(ParamStore& params, const GradMap& grads, std::span<const std::string> names,
                OptimState& state, double lr, const AdamWConfig& cfg) {
  if (!(lr > 0.0)) throw ConfigError("adamw learning rate must be positive");
  assert(state.step < std::numeric_limits<std::uint64_t>::max());
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);

  for (const std::string& name : names) {
    Tensor& p = params.get(name);
    auto git = grads.find(name);
    if (git == grads.end()) throw ConfigError("missing gradient for parameter " + name);
    const Tensor& g = git->second;
    if (g.size() != p.size()) throw ShapeError("gradient shape mismatch for " + name);

    Tensor& m = state.first_moment.try_emplace(name, p.shape(), 0.0).first->second;
    Tensor& v = state.second_moment.try_emplace(name, p.shape(), 0.0).first->second;

    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= lr * cfg.weight_decay * p[i];
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    require_finite(p, "adamw_step");
  }
}

double lr_schedule(std::int64_t iter, double base_lr, std::int64_t half_every) {
  if (iter < 0) throw ConfigError("lr_schedule iteration must be non-negative");
  if (half_every <= 0) throw ConfigError("lr_schedule half_every must be positive");
  return base_lr * std::pow(0.5, static_cast<double>(iter / half_every));
}

}  // namespace taylorseg
