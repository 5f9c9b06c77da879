#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mcas/tape.hpp"

namespace mcas {

struct GradCheckOptions {
  double step = 1e-5;
  // Tensors larger than this are checked at a random sample of coordinates.
  std::size_t max_coords = 24;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  std::size_t tensors = 0;
  std::size_t coords = 0;
  double max_rel_err = 0;
};

// Builds a scalar from the current contents of the checked tensors. Must read
// them through tape.param() so analytic gradients can be collected.
using ScalarFn = std::function<Var(Tape&)>;

// Central differences against reverse mode. Per tensor the error is
// max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-6) over the
// checked coordinates; the result keeps the worst tensor.
GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn, std::vector<Tensor*> tensors,
                                const GradCheckOptions& options = {});

// <out, r> for a fixed pseudo-random r, so every output element contributes.
Var random_projection(Var out, std::uint64_t seed);

// The full suite: every tape op, the fusion blocks, CFM, relaxed supernet
// pieces, chained cost, supernet end to end at test width, stem, head and
// losses.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options = {});

}  // namespace mcas
