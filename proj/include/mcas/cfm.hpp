#pragma once

#include <cstddef>

#include "mcas/tape.hpp"
#include "mcas/tensor.hpp"

namespace mcas {

// Box on a feature grid, inclusive-exclusive.
struct BBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  // ContractError when empty or outside an H x W grid.
  void validate(std::size_t height, std::size_t width) const;
  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
  bool operator==(const BBox&) const = default;
};

struct CfmParams {
  Tensor weight;  // HtWt x C'
  Tensor bias;    // HsWs x C'

  std::vector<Tensor*> tensors() { return {&weight, &bias}; }
};

inline constexpr std::size_t kCfmOutChannels = 256;

// weight uniform in +-1/sqrt(HtWt), bias 0.
CfmParams init_cfm_params(std::size_t ht, std::size_t wt, std::size_t hs, std::size_t ws, std::size_t c_out,
                          Rng& rng);

// Mean of Ft over the box: 1 x 1 x C.
Var roi_align(Var ft, const BBox& bbox);

// Ft: Ht x Wt x C, Fs: Hs x Ws x C. Returns HsWs x C'.
Var cfm_forward(Tape& tape, Var ft, Var fs, const BBox& bbox, CfmParams& params);

// Loop evaluation of the expanded sum
//   z = sum_psi Fs[phi,psi] (sum_j Ft[psi,j] w[j,zeta])
//     + sum_psi r[psi]     (sum_j Ft[psi,j] w[j,zeta]) + b[phi,zeta].
Tensor cfm_closed_form(const Tensor& ft, const Tensor& fs, const BBox& bbox, const CfmParams& params);

}  // namespace mcas
