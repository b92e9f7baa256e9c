#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dpm/tensor.hpp"

namespace dpm {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kOpTolerance = 1e-4;         // primitive ops and losses
inline constexpr double kCompositeTolerance = 1e-3;  // MDTA, GDFN, UNet, model

// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over the
// checked entries. `f` must return a scalar built from `inputs` (64-bit
// leaves). When `entries` is non-empty it lists, per input, the flat indices
// to perturb; otherwise every entry is perturbed.
double max_gradient_error(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                          const std::vector<std::vector<int64_t>>& entries = {}, double step = kGradcheckStep);

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0;
  double threshold = 0;
  int64_t entries = 0;
  bool passed() const { return max_rel_err < threshold; }
};

struct GradcheckSuite {
  std::string module;
  std::vector<GradcheckCase> cases;
  bool passed() const;
  double max_rel_err() const;
};

// "tensor", "mdta", "gdfn", "unet", "losses", "model".
const std::vector<std::string>& gradcheck_modules();

GradcheckSuite run_gradcheck_suite(const std::string& module, uint64_t seed = 0);

}  // namespace dpm
