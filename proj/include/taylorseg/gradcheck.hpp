#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taylorseg/autodiff.hpp"
#include "taylorseg/fewshot.hpp"
#include "taylorseg/params.hpp"
#include "taylorseg/segnet.hpp"

namespace taylorseg {

struct GradcheckEntry {
  std::string name;
  std::size_t size = 0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error() const;
};

// ||a - b|| / max(||a||, ||b||), zero when both vanish.
double relative_error(std::span<const double> a, std::span<const double> b);

using LossFn = std::function<Var(TapeParams&)>;

// Compares tape gradients of every tensor in `params` with central
// differences of step h. `params` is restored before returning.
GradcheckReport gradcheck(ParamStore& params, const LossFn& loss, double h = 1e-5);

// A 64-point, 2-way 1-shot episode with a small learnable network and APP.
struct ToyProblem {
  SegNet net;
  Episode episode;
  FewShotConfig fewshot;
};
ToyProblem toy_problem(std::uint64_t seed);

GradcheckReport gradcheck_pipeline(std::uint64_t seed, double h = 1e-5);
// Each differentiable operation on random inputs.
GradcheckReport gradcheck_ops(std::uint64_t seed, double h = 1e-5);

}  // namespace taylorseg
