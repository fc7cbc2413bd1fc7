#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "taylorseg/params.hpp"
#include "taylorseg/tensor.hpp"

namespace taylorseg {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Moment estimates for the parameters one optimizer has touched.
struct OptimState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::uint64_t step = 0;
};

// One AdamW update of `names` in `params`. Weight decay is decoupled: it
// scales the parameter directly and never enters the moment estimates.
void adamw_step(ParamStore& params, const GradMap& grads, std::span<const std::string> names,
                OptimState& state, double lr, const AdamWConfig& cfg = {});

// base_lr * 0.5^floor(iter / half_every)
double lr_schedule(std::int64_t iter, double base_lr = 1e-3, std::int64_t half_every = 7000);

}  // namespace taylorseg
