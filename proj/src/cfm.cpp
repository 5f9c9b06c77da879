#include "mcas/cfm.hpp"

#include <cmath>
#include <string>

#include "mcas/errors.hpp"

namespace mcas {

void BBox::validate(std::size_t height, std::size_t width) const {
  if (x0 >= x1 || y0 >= y1 || x1 > width || y1 > height) {
    throw ContractError("bbox (" + std::to_string(x0) + "," + std::to_string(y0) + "," + std::to_string(x1) + "," +
                        std::to_string(y1) + ") is degenerate or outside a " + std::to_string(height) + "x" +
                        std::to_string(width) + " grid");
  }
}

CfmParams init_cfm_params(std::size_t ht, std::size_t wt, std::size_t hs, std::size_t ws, std::size_t c_out,
                          Rng& rng) {
  CfmParams p;
  p.weight = Tensor::uniform({ht * wt, c_out}, 1.0 / std::sqrt(static_cast<double>(ht * wt)), rng, true);
  p.bias = Tensor::zeros({hs * ws, c_out}, true);
  return p;
}

Var roi_align(Var ft, const BBox& bbox) {
  if (ft.shape().size() != 3) throw DimensionError("roi_align: expected H x W x C template, got " + shape_string(ft.shape()));
  bbox.validate(ft.shape()[0], ft.shape()[1]);
  return mean_pool(ft, bbox.y0, bbox.x0, bbox.y1, bbox.x1);
}

namespace {

struct CfmDims {
  std::size_t nt, ns, c, c_out;
};

CfmDims check_cfm(const Shape& ft, const Shape& fs, const BBox& bbox, const CfmParams& params) {
  if (ft.size() != 3 || fs.size() != 3) {
    throw DimensionError("cfm: expected H x W x C maps, got " + shape_string(ft) + " and " + shape_string(fs));
  }
  if (ft[2] != fs[2]) {
    throw DimensionError("cfm: template channels " + std::to_string(ft[2]) + " != search channels " +
                         std::to_string(fs[2]));
  }
  bbox.validate(ft[0], ft[1]);
  CfmDims d{ft[0] * ft[1], fs[0] * fs[1], ft[2], 0};
  if (params.weight.shape.size() != 2 || params.weight.shape[0] != d.nt) {
    throw DimensionError("cfm: weight " + shape_string(params.weight.shape) + " does not match " +
                         std::to_string(d.nt) + " template cells");
  }
  d.c_out = params.weight.shape[1];
  if (params.bias.shape != Shape{d.ns, d.c_out}) {
    throw DimensionError("cfm: bias " + shape_string(params.bias.shape) + " should be " +
                         shape_string({d.ns, d.c_out}));
  }
  return d;
}

}  // namespace

Var cfm_forward(Tape& tape, Var ft, Var fs, const BBox& bbox, CfmParams& params) {
  const CfmDims d = check_cfm(ft.shape(), fs.shape(), bbox, params);
  Var r = reshape(roi_align(ft, bbox), {d.c});
  Var x = reshape(broadcast_add(fs, r), {d.ns, d.c});
  Var ft_t = transpose(reshape(ft, {d.nt, d.c}));
  Var y = matmul(x, ft_t);
  return add(matmul(y, tape.param(params.weight)), tape.param(params.bias));
}

Tensor cfm_closed_form(const Tensor& ft, const Tensor& fs, const BBox& bbox, const CfmParams& params) {
  const CfmDims d = check_cfm(ft.shape, fs.shape, bbox, params);
  const std::size_t wt = ft.shape[1];
  std::vector<double> r(d.c, 0.0);
  for (std::size_t y = bbox.y0; y < bbox.y1; ++y)
    for (std::size_t x = bbox.x0; x < bbox.x1; ++x)
      for (std::size_t c = 0; c < d.c; ++c) r[c] += ft[(y * wt + x) * d.c + c];
  for (double& v : r) v /= static_cast<double>(bbox.area());

  Tensor z = Tensor::zeros({d.ns, d.c_out});
  for (std::size_t phi = 0; phi < d.ns; ++phi)
    for (std::size_t zeta = 0; zeta < d.c_out; ++zeta) {
      double search_term = 0.0, template_term = 0.0;
      for (std::size_t psi = 0; psi < d.c; ++psi) {
        double inner = 0.0;
        for (std::size_t j = 0; j < d.nt; ++j) inner += ft[j * d.c + psi] * params.weight[j * d.c_out + zeta];
        search_term += fs[phi * d.c + psi] * inner;
        template_term += r[psi] * inner;
      }
      z[phi * d.c_out + zeta] = search_term + template_term + params.bias[phi * d.c_out + zeta];
    }
  return z;
}

}  // namespace mcas
