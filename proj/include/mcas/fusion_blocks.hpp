#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mcas/tape.hpp"
#include "mcas/tensor.hpp"

namespace mcas {

// One Wave-MLP variant (or the skip candidate) at a given channel mapping.
struct BlockConfig {
  int kernel_size = 3;      // phase-estimator kernel: 3, 5 or 7
  int expansion_ratio = 4;  // channel-MLP hidden width multiplier: 4 or 8
  bool depthwise = false;   // depthwise-separable channel MLP
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  bool is_skip = false;

  // "k5_t4_dw", "k3_t8", ... or "skip".
  std::string id() const;
  static BlockConfig parse(std::string_view id, std::size_t in_channels, std::size_t out_channels);
  static BlockConfig skip(std::size_t channels);
  void validate() const;
  bool projects() const { return !is_skip && in_channels != out_channels; }
};

// The twelve variants in table order: k3_t4, k3_t4_dw, k3_t8, k3_t8_dw, k5_t4, ...
const std::vector<std::string>& wave_mlp_variant_ids();
std::vector<BlockConfig> wave_mlp_variants(std::size_t in_channels, std::size_t out_channels);

// Phase-aware token mixing weights for a block of width C over N = H*W tokens.
struct PatmParams {
  Tensor amplitude;     // W^h, C x C
  Tensor phase_proj;    // W^theta, C x C
  Tensor phase_kernel;  // depthwise k x k x C applied to z W^theta
  Tensor mix_cos;       // N x N, shared across channels
  Tensor mix_sin;       // N x N
  // Literal per-token-pair form: N x N x C x C, indexed (out token, in token,
  // in channel, out channel). Only populated for oracle checks.
  Tensor mix_cos_general;
  Tensor mix_sin_general;

  // Fills the general tensors with w_{ij} * I from the shared matrices.
  void embed_shared_as_general();
};

struct ChannelMlpParams {
  // dense: fc1 is C x tC; depthwise: fc1 is a 3 x 3 x tC depthwise kernel
  // applied after repeating each channel t times.
  Tensor fc1;
  Tensor fc1_bias;  // tC
  Tensor fc2;       // tC x C
  Tensor fc2_bias;  // C
};

struct BlockParams {
  Tensor proj;  // Cin x Cout, only when Cin != Cout
  Tensor proj_bias;
  Tensor norm1_scale, norm1_offset;
  PatmParams patm;
  Tensor norm2_scale, norm2_offset;
  ChannelMlpParams mlp;

  std::vector<Tensor*> tensors();
  std::size_t parameter_count() const;
};

inline constexpr int kMlpDepthwiseKernel = 3;

// Weights uniform in +-1/sqrt(fan_in), norm scale 1, offsets and biases 0,
// mixing matrices identity plus N(0, 0.01^2) noise.
BlockParams init_block_params(const BlockConfig& config, std::size_t height, std::size_t width, Rng& rng);

// Closed-form parameter count; equals init_block_params(...).parameter_count().
std::size_t block_parameter_count(const BlockConfig& config, std::size_t height, std::size_t width);

enum class PatmMode { shared, general };

inline constexpr std::size_t kGeneralPatmCap = 64;  // max N * C in general mode

// z: H x W x C. Returns H x W x C.
Var patm_forward(Tape& tape, Var z, PatmParams& params, PatmMode mode = PatmMode::shared,
                 std::size_t general_cap = kGeneralPatmCap);

// z: H x W x Cin. Returns H x W x Cout:
//   x = proj(z) if Cin != Cout else z
//   x = x + PATM(LN1(x))
//   x = x + MLP(LN2(x))
Var wave_mlp_block_forward(Tape& tape, Var z, const BlockConfig& config, BlockParams& params);

Var skip_forward(Var z);

// Dispatches to skip_forward or wave_mlp_block_forward.
Var candidate_forward(Tape& tape, Var z, const BlockConfig& config, BlockParams& params);

}  // namespace mcas
