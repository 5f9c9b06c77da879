#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcas/cfm.hpp"
#include "mcas/tape.hpp"

namespace mcas {

struct DatasetConfig {
  std::size_t n_samples = 200;
  std::size_t template_size = 8;  // raw pixels per side
  std::size_t search_size = 12;
  std::size_t raw_channels = 8;
  std::size_t pool = 2;           // raw pixels per feature cell
  std::size_t min_box = 2;        // box side in feature cells
  std::size_t max_box = 3;
  double noise = 0.25;            // std of white noise
  double smooth = 0.3;            // amplitude of the smooth background
  double train_fraction = 0.8;
};

struct SyntheticSample {
  Tensor template_image;  // T x T x C_raw
  Tensor search_image;    // S x S x C_raw
  BBox template_bbox;     // template feature grid
  BBox gt_bbox;           // search feature grid
  std::vector<double> cls_labels;  // search feature grid, row-major
};

struct Dataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<double> signature;  // shared object pattern, one value per raw channel
  std::vector<SyntheticSample> train, val;

  std::size_t template_grid() const { return config.template_size / config.pool; }
  std::size_t search_grid() const { return config.search_size / config.pool; }
  std::vector<const SyntheticSample*> all() const;
};

// Deterministic per seed. Each sample paints the signature over its boxes on
// top of a smooth pattern plus white noise.
Dataset generate_dataset(std::uint64_t seed, const DatasetConfig& config);

// Cell accuracy of thresholding <signature, mean cell pixel> at C_raw / 2 on
// the search grids of every sample.
double linear_probe_accuracy(const Dataset& data);

// Binary little-endian doubles plus a JSON sidecar. Returns the sidecar.
nlohmann::json export_dataset(const Dataset& data, const std::string& bin_path);

struct StemParams {
  Tensor conv1, bias1;  // 3 x 3 x C_raw x 32
  Tensor conv2, bias2;  // 3 x 3 x 32 x C

  std::vector<Tensor*> tensors() { return {&conv1, &bias1, &conv2, &bias2}; }
};

inline constexpr std::size_t kStemHidden = 32;

StemParams init_stem_params(std::size_t raw_channels, std::size_t out_channels, Rng& rng);
// conv3x3 -> relu -> conv3x3 -> avg_pool(pool).
Var stem_forward(Var image, StemParams& params, std::size_t pool);

struct HeadParams {
  Tensor trunk, trunk_bias;  // C x 64
  Tensor cls, cls_bias;      // 64 x 1
  Tensor reg, reg_bias;      // 64 x 4

  std::vector<Tensor*> tensors() { return {&trunk, &trunk_bias, &cls, &cls_bias, &reg, &reg_bias}; }
};

inline constexpr std::size_t kHeadHidden = 64;

HeadParams init_head_params(std::size_t in_channels, Rng& rng);
HeadParams zero_head_params(std::size_t in_channels);

struct HeadOutput {
  Var cls;  // H x W, in (0, 1)
  Var reg;  // H x W x 4, distances (left, top, right, bottom) >= 0
};

HeadOutput head_forward(Var response, HeadParams& params);

// Box corners {x0, y0, x1, y1} from cell (y, x) and its side distances.
std::array<double, 4> decode_box(std::size_t y, std::size_t x, std::span<const double> dist);
double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);
std::array<double, 4> to_corners(const BBox& b);

using NeckFn = std::function<Var(Tape&, Var ft, Var fs, const BBox&)>;

struct TrackerOutput {
  HeadOutput head;
  Var response;
};

TrackerOutput tracker_forward(Tape& tape, const SyntheticSample& s, StemParams& stem, const NeckFn& neck,
                              HeadParams& head, std::size_t pool);

struct Prediction {
  std::vector<double> cls;  // H*W
  std::vector<double> reg;  // H*W*4
};

struct EvalMetrics {
  double mean_iou = 0;
  double cls_accuracy = 0;
  double flops = 0;
  std::size_t samples = 0;

  nlohmann::json to_json() const;
};

// Argmax cls cell decoded into a box vs gt; cells thresholded at 0.5 vs labels.
EvalMetrics evaluate_predictions(std::span<const Prediction> preds, std::span<const SyntheticSample* const> samples,
                                 std::size_t grid);
EvalMetrics evaluate(std::span<const SyntheticSample* const> samples, StemParams& stem, const NeckFn& neck,
                     HeadParams& head, std::size_t pool, double flops);

}  // namespace mcas
