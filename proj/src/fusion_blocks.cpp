#include "mcas/fusion_blocks.hpp"

#include <cmath>

#include "mcas/errors.hpp"

namespace mcas {

std::string BlockConfig::id() const {
  if (is_skip) return "skip";
  std::string s = "k" + std::to_string(kernel_size) + "_t" + std::to_string(expansion_ratio);
  if (depthwise) s += "_dw";
  return s;
}

BlockConfig BlockConfig::skip(std::size_t channels) {
  BlockConfig c;
  c.is_skip = true;
  c.in_channels = channels;
  c.out_channels = channels;
  return c;
}

BlockConfig BlockConfig::parse(std::string_view id, std::size_t in_channels, std::size_t out_channels) {
  if (id == "skip") {
    if (in_channels != out_channels) {
      throw ConfigError("skip candidate cannot map " + std::to_string(in_channels) + " to " +
                        std::to_string(out_channels) + " channels");
    }
    return skip(in_channels);
  }
  for (const auto& known : wave_mlp_variant_ids()) {
    if (known != id) continue;
    BlockConfig c;
    c.kernel_size = known[1] - '0';
    c.expansion_ratio = known[4] - '0';
    c.depthwise = known.size() > 5;
    c.in_channels = in_channels;
    c.out_channels = out_channels;
    c.validate();
    return c;
  }
  throw ConfigError("unknown block id '" + std::string(id) + "'");
}

void BlockConfig::validate() const {
  if (in_channels == 0 || out_channels == 0) throw ConfigError("block channels must be positive");
  if (is_skip) {
    if (in_channels != out_channels) throw ConfigError("skip block requires in_channels == out_channels");
    return;
  }
  if (kernel_size != 3 && kernel_size != 5 && kernel_size != 7) {
    throw ConfigError("kernel size must be 3, 5 or 7, got " + std::to_string(kernel_size));
  }
  if (expansion_ratio != 4 && expansion_ratio != 8) {
    throw ConfigError("expansion ratio must be 4 or 8, got " + std::to_string(expansion_ratio));
  }
}

const std::vector<std::string>& wave_mlp_variant_ids() {
  static const std::vector<std::string> ids = {"k3_t4", "k3_t4_dw", "k3_t8", "k3_t8_dw", "k5_t4", "k5_t4_dw",
                                               "k5_t8", "k5_t8_dw", "k7_t4", "k7_t4_dw", "k7_t8", "k7_t8_dw"};
  return ids;
}

std::vector<BlockConfig> wave_mlp_variants(std::size_t in_channels, std::size_t out_channels) {
  std::vector<BlockConfig> out;
  for (const auto& id : wave_mlp_variant_ids()) out.push_back(BlockConfig::parse(id, in_channels, out_channels));
  return out;
}

void PatmParams::embed_shared_as_general() {
  const std::size_t n = mix_cos.shape[0];
  const std::size_t c = amplitude.shape[0];
  mix_cos_general = Tensor::zeros({n, n, c, c}, mix_cos.grad_enabled);
  mix_sin_general = Tensor::zeros({n, n, c, c}, mix_sin.grad_enabled);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t i = 0; i < c; ++i) {
        mix_cos_general[((p * n + q) * c + i) * c + i] = mix_cos[p * n + q];
        mix_sin_general[((p * n + q) * c + i) * c + i] = mix_sin[p * n + q];
      }
}

std::vector<Tensor*> BlockParams::tensors() {
  std::vector<Tensor*> out;
  for (Tensor* t : {&proj, &proj_bias, &norm1_scale, &norm1_offset, &patm.amplitude, &patm.phase_proj,
                    &patm.phase_kernel, &patm.mix_cos, &patm.mix_sin, &norm2_scale, &norm2_offset, &mlp.fc1,
                    &mlp.fc1_bias, &mlp.fc2, &mlp.fc2_bias}) {
    if (!t->empty()) out.push_back(t);
  }
  return out;
}

std::size_t BlockParams::parameter_count() const {
  std::size_t n = 0;
  for (Tensor* t : const_cast<BlockParams*>(this)->tensors()) n += t->size();
  return n;
}

std::size_t block_parameter_count(const BlockConfig& config, std::size_t height, std::size_t width) {
  if (config.is_skip) return 0;
  const std::size_t c = config.out_channels, cin = config.in_channels;
  const std::size_t k = static_cast<std::size_t>(config.kernel_size);
  const std::size_t hidden = c * static_cast<std::size_t>(config.expansion_ratio);
  const std::size_t tokens = height * width;
  std::size_t n = 0;
  if (config.projects()) n += cin * c + c;
  n += 4 * c;                                    // two norms
  n += 2 * c * c + k * k * c + 2 * tokens * tokens;  // PATM
  if (config.depthwise) {
    n += kMlpDepthwiseKernel * kMlpDepthwiseKernel * hidden + hidden;
  } else {
    n += c * hidden + hidden;
  }
  n += hidden * c + c;
  return n;
}

BlockParams init_block_params(const BlockConfig& config, std::size_t height, std::size_t width, Rng& rng) {
  config.validate();
  BlockParams p;
  if (config.is_skip) return p;
  const std::size_t c = config.out_channels, cin = config.in_channels;
  const std::size_t k = static_cast<std::size_t>(config.kernel_size);
  const std::size_t hidden = c * static_cast<std::size_t>(config.expansion_ratio);
  const std::size_t tokens = height * width;
  auto bound = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  if (config.projects()) {
    p.proj = Tensor::uniform({cin, c}, bound(cin), rng, true);
    p.proj_bias = Tensor::zeros({c}, true);
  }
  p.norm1_scale = Tensor::filled({c}, 1.0, true);
  p.norm1_offset = Tensor::zeros({c}, true);
  p.patm.amplitude = Tensor::uniform({c, c}, bound(c), rng, true);
  p.patm.phase_proj = Tensor::uniform({c, c}, bound(c), rng, true);
  p.patm.phase_kernel = Tensor::uniform({k, k, c}, bound(k * k), rng, true);
  std::normal_distribution<double> noise(0.0, 0.01);
  p.patm.mix_cos = Tensor::zeros({tokens, tokens}, true);
  p.patm.mix_sin = Tensor::zeros({tokens, tokens}, true);
  for (Tensor* m : {&p.patm.mix_cos, &p.patm.mix_sin}) {
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t j = 0; j < tokens; ++j) (*m)[i * tokens + j] = (i == j ? 1.0 : 0.0) + noise(rng);
  }
  p.norm2_scale = Tensor::filled({c}, 1.0, true);
  p.norm2_offset = Tensor::zeros({c}, true);
  const std::size_t dk = kMlpDepthwiseKernel;
  if (config.depthwise) {
    p.mlp.fc1 = Tensor::uniform({dk, dk, hidden}, bound(dk * dk), rng, true);
  } else {
    p.mlp.fc1 = Tensor::uniform({c, hidden}, bound(c), rng, true);
  }
  p.mlp.fc1_bias = Tensor::zeros({hidden}, true);
  p.mlp.fc2 = Tensor::uniform({hidden, c}, bound(hidden), rng, true);
  p.mlp.fc2_bias = Tensor::zeros({c}, true);
  return p;
}

namespace {

// o[p] = sum_q a[q] Wc[p,q] + s[q] Ws[p,q] with full C x C matrices per pair.
Var general_token_mix(Var a, Var s, Var wc, Var ws) {
  Tape& tape = a.tape();
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  const Shape expect{n, n, c, c};
  if (wc.shape() != expect || ws.shape() != expect) {
    throw DimensionError("patm general: mixing tensors must be " + shape_string(expect) + ", got " +
                         shape_string(wc.shape()) + " and " + shape_string(ws.shape()));
  }
  auto av = a.value(), sv = s.value(), wcv = wc.value(), wsv = ws.value();
  std::vector<double> out(n * c, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t i = 0; i < c; ++i) {
        const double ai = av[q * c + i], si = sv[q * c + i];
        const std::size_t base = ((p * n + q) * c + i) * c;
        for (std::size_t o = 0; o < c; ++o) out[p * c + o] += ai * wcv[base + o] + si * wsv[base + o];
      }
  tape.add_macs(2 * n * n * c * c);
  const auto ia = a.id(), is = s.id(), iwc = wc.id(), iws = ws.id();
  return tape.record("patm_general_mix", {n, c}, std::move(out), {a, s, wc, ws},
                     [ia, is, iwc, iws, n, c](Tape& t, std::size_t self) {
                       auto g = t.grad_of(self);
                       const std::size_t ids[2][2] = {{ia, iwc}, {is, iws}};
                       for (const auto& pair : ids) {
                         const std::size_t ix = pair[0], iw = pair[1];
                         auto xv = t.value_of(ix);
                         auto wv = t.value_of(iw);
                         std::span<double> gx, gw;
                         if (t.needs_grad(ix)) gx = t.grad_buffer(ix);
                         if (t.needs_grad(iw)) gw = t.grad_buffer(iw);
                         for (std::size_t p = 0; p < n; ++p)
                           for (std::size_t q = 0; q < n; ++q)
                             for (std::size_t i = 0; i < c; ++i) {
                               const std::size_t base = ((p * n + q) * c + i) * c;
                               double acc = 0.0;
                               for (std::size_t o = 0; o < c; ++o) {
                                 acc += g[p * c + o] * wv[base + o];
                                 if (!gw.empty()) gw[base + o] += g[p * c + o] * xv[q * c + i];
                               }
                               if (!gx.empty()) gx[q * c + i] += acc;
                             }
                       }
                     });
}

}  // namespace

Var patm_forward(Tape& tape, Var z, PatmParams& params, PatmMode mode, std::size_t general_cap) {
  if (z.shape().size() != 3) throw DimensionError("patm: expected H x W x C input, got " + shape_string(z.shape()));
  const std::size_t h = z.shape()[0], w = z.shape()[1], c = z.shape()[2];
  const std::size_t n = h * w;
  if (params.amplitude.shape != Shape{c, c} || params.phase_proj.shape != Shape{c, c}) {
    throw DimensionError("patm: channel maps must be " + std::to_string(c) + " x " + std::to_string(c));
  }
  if (params.phase_kernel.shape.size() != 3 || params.phase_kernel.shape[2] != c) {
    throw DimensionError("patm: phase kernel " + shape_string(params.phase_kernel.shape) + " does not match width " +
                         std::to_string(c));
  }
  if (mode == PatmMode::general && n * c > general_cap) {
    throw CapacityError("patm general mode: N*C = " + std::to_string(n * c) + " exceeds cap " +
                        std::to_string(general_cap));
  }
  Var tokens = reshape(z, {n, c});
  Var amp = linear(tokens, tape.param(params.amplitude));
  Var phase_in = reshape(linear(tokens, tape.param(params.phase_proj)), {h, w, c});
  Var theta = reshape(conv2d_same(phase_in, tape.param(params.phase_kernel), true), {n, c});
  Var real = mul(amp, cos(theta));
  Var imag = mul(amp, sin(theta));
  Var mixed;
  if (mode == PatmMode::shared) {
    if (params.mix_cos.shape != Shape{n, n} || params.mix_sin.shape != Shape{n, n}) {
      throw DimensionError("patm: mixing matrices must be " + std::to_string(n) + " x " + std::to_string(n) +
                           ", got " + shape_string(params.mix_cos.shape));
    }
    mixed = add(matmul(tape.param(params.mix_cos), real), matmul(tape.param(params.mix_sin), imag));
  } else {
    if (params.mix_cos_general.empty() || params.mix_sin_general.empty()) {
      throw ContractError("patm general mode: per-pair mixing tensors are not populated");
    }
    mixed = general_token_mix(real, imag, tape.param(params.mix_cos_general), tape.param(params.mix_sin_general));
  }
  return reshape(mixed, {h, w, c});
}

Var skip_forward(Var z) { return z; }

Var wave_mlp_block_forward(Tape& tape, Var z, const BlockConfig& config, BlockParams& params) {
  if (config.is_skip) throw ContractError("wave_mlp_block_forward called with a skip config");
  if (z.shape().size() != 3) throw DimensionError("block: expected H x W x C input, got " + shape_string(z.shape()));
  if (z.shape()[2] != config.in_channels) {
    throw DimensionError("block " + config.id() + ": input width " + std::to_string(z.shape()[2]) +
                         " but config expects " + std::to_string(config.in_channels));
  }
  const std::size_t c = config.out_channels;
  const std::size_t t_ratio = static_cast<std::size_t>(config.expansion_ratio);
  const Shape expect_fc2{c * t_ratio, c};
  if (params.mlp.fc2.shape != expect_fc2 || (config.projects() && params.proj.shape != Shape{config.in_channels, c}) ||
      (!config.projects() && !params.proj.empty())) {
    throw DimensionError("block " + config.id() + ": parameters do not match config " +
                         std::to_string(config.in_channels) + "->" + std::to_string(c));
  }
  Var x = z;
  if (config.projects()) x = linear(z, tape.param(params.proj), tape.param(params.proj_bias));

  Var u = layer_norm(x, tape.param(params.norm1_scale), tape.param(params.norm1_offset));
  x = add(x, patm_forward(tape, u, params.patm));

  Var v = layer_norm(x, tape.param(params.norm2_scale), tape.param(params.norm2_offset));
  Var hidden;
  if (config.depthwise) {
    Var spread = repeat_channels(v, t_ratio);
    hidden = gelu(broadcast_add(conv2d_same(spread, tape.param(params.mlp.fc1), true), tape.param(params.mlp.fc1_bias)));
  } else {
    hidden = gelu(linear(v, tape.param(params.mlp.fc1), tape.param(params.mlp.fc1_bias)));
  }
  Var y = linear(hidden, tape.param(params.mlp.fc2), tape.param(params.mlp.fc2_bias));
  return add(x, y);
}

Var candidate_forward(Tape& tape, Var z, const BlockConfig& config, BlockParams& params) {
  if (config.is_skip) {
    if (z.shape().back() != config.in_channels) {
      throw DimensionError("skip: input width " + std::to_string(z.shape().back()) + " but layer width " +
                           std::to_string(config.in_channels));
    }
    return skip_forward(z);
  }
  return wave_mlp_block_forward(tape, z, config, params);
}

}  // namespace mcas
