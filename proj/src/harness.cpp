#include "mcas/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "mcas/errors.hpp"

namespace mcas {

std::vector<const SyntheticSample*> Dataset::all() const {
  std::vector<const SyntheticSample*> out;
  for (const auto& s : train) out.push_back(&s);
  for (const auto& s : val) out.push_back(&s);
  return out;
}

namespace {

void check_config(const DatasetConfig& c) {
  if (c.n_samples < 2) throw ConfigError("dataset needs at least 2 samples");
  if (c.pool == 0 || c.raw_channels == 0) throw ConfigError("pool and raw_channels must be positive");
  if (c.template_size % c.pool != 0 || c.search_size % c.pool != 0) {
    throw ConfigError("image sizes must be multiples of pool (" + std::to_string(c.pool) + ")");
  }
  if (c.min_box == 0 || c.min_box > c.max_box) throw ConfigError("box sizes need 1 <= min_box <= max_box");
  const std::size_t grid = std::min(c.template_size, c.search_size) / c.pool;
  if (c.max_box > grid) {
    throw ConfigError("max_box " + std::to_string(c.max_box) + " does not fit a " + std::to_string(grid) + "-cell grid");
  }
  if (c.noise < 0 || c.smooth < 0) throw ConfigError("noise and smooth amplitudes must be non-negative");
  if (!(c.train_fraction > 0 && c.train_fraction < 1)) throw ConfigError("train_fraction must lie in (0, 1)");
}

BBox random_box(std::size_t grid, const DatasetConfig& c, Rng& rng) {
  std::uniform_int_distribution<std::size_t> side(c.min_box, c.max_box);
  const std::size_t w = side(rng), h = side(rng);
  std::uniform_int_distribution<std::size_t> px(0, grid - w), py(0, grid - h);
  const std::size_t x0 = px(rng), y0 = py(rng);
  return {x0, y0, x0 + w, y0 + h};
}

Tensor paint(std::size_t size, const BBox& box, const std::vector<double>& signature, const DatasetConfig& c,
             Rng& rng) {
  const std::size_t ch = c.raw_channels;
  Tensor img = Tensor::zeros({size, size, ch});
  std::uniform_real_distribution<double> freq(0.3, 0.8), phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> fx(ch), fy(ch), ph(ch);
  for (std::size_t k = 0; k < ch; ++k) {
    fx[k] = freq(rng);
    fy[k] = freq(rng);
    ph[k] = phase(rng);
  }
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const bool inside = x >= box.x0 * c.pool && x < box.x1 * c.pool && y >= box.y0 * c.pool && y < box.y1 * c.pool;
      for (std::size_t k = 0; k < ch; ++k) {
        const double base = inside ? signature[k]
                                   : c.smooth * std::sin(fx[k] * static_cast<double>(x) + fy[k] * static_cast<double>(y) + ph[k]);
        img[(y * size + x) * ch + k] = base + c.noise * gauss(rng);
      }
    }
  return img;
}

}  // namespace

Dataset generate_dataset(std::uint64_t seed, const DatasetConfig& config) {
  check_config(config);
  Rng rng(seed);
  Dataset d;
  d.config = config;
  d.seed = seed;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < config.raw_channels; ++k) d.signature.push_back(coin(rng) ? 1.0 : -1.0);
  const std::size_t tg = d.template_grid(), sg = d.search_grid();
  std::size_t n_train = static_cast<std::size_t>(std::floor(static_cast<double>(config.n_samples) * config.train_fraction + 0.5));
  n_train = std::clamp<std::size_t>(n_train, 1, config.n_samples - 1);
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    SyntheticSample s;
    s.template_bbox = random_box(tg, config, rng);
    s.gt_bbox = random_box(sg, config, rng);
    s.template_image = paint(config.template_size, s.template_bbox, d.signature, config, rng);
    s.search_image = paint(config.search_size, s.gt_bbox, d.signature, config, rng);
    s.cls_labels.assign(sg * sg, 0.0);
    for (std::size_t y = s.gt_bbox.y0; y < s.gt_bbox.y1; ++y)
      for (std::size_t x = s.gt_bbox.x0; x < s.gt_bbox.x1; ++x) s.cls_labels[y * sg + x] = 1.0;
    (i < n_train ? d.train : d.val).push_back(std::move(s));
  }
  return d;
}

double linear_probe_accuracy(const Dataset& data) {
  const auto& c = data.config;
  const std::size_t sg = data.search_grid(), ch = c.raw_channels;
  const double threshold = static_cast<double>(ch) / 2.0;
  std::size_t correct = 0, total = 0;
  for (const SyntheticSample* s : data.all()) {
    for (std::size_t gy = 0; gy < sg; ++gy)
      for (std::size_t gx = 0; gx < sg; ++gx) {
        double score = 0.0;
        for (std::size_t y = gy * c.pool; y < (gy + 1) * c.pool; ++y)
          for (std::size_t x = gx * c.pool; x < (gx + 1) * c.pool; ++x)
            for (std::size_t k = 0; k < ch; ++k)
              score += data.signature[k] * s->search_image[(y * c.search_size + x) * ch + k];
        score /= static_cast<double>(c.pool * c.pool);
        const double predicted = score > threshold ? 1.0 : 0.0;
        correct += predicted == s->cls_labels[gy * sg + gx];
        ++total;
      }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

nlohmann::json export_dataset(const Dataset& data, const std::string& bin_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + bin_path + "' for writing");
  auto put = [&](double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  };
  auto put_box = [&](const BBox& b) {
    for (std::size_t v : {b.x0, b.y0, b.x1, b.y1}) put(static_cast<double>(v));
  };
  for (const SyntheticSample* s : data.all()) {
    for (double v : s->template_image.data) put(v);
    for (double v : s->search_image.data) put(v);
    put_box(s->template_bbox);
    put_box(s->gt_bbox);
    for (double v : s->cls_labels) put(v);
  }
  if (!out) throw IoError("write to '" + bin_path + "' failed");
  const auto& c = data.config;
  const std::size_t sg = data.search_grid();
  nlohmann::json j;
  j["format"] = "float64 little-endian, records back to back";
  j["seed"] = data.seed;
  j["n_train"] = data.train.size();
  j["n_val"] = data.val.size();
  j["split"] = "first n_train records are train, the rest val";
  j["signature"] = data.signature;
  j["config"] = {{"n_samples", c.n_samples},   {"template_size", c.template_size}, {"search_size", c.search_size},
                 {"raw_channels", c.raw_channels}, {"pool", c.pool},             {"min_box", c.min_box},
                 {"max_box", c.max_box},       {"noise", c.noise},               {"smooth", c.smooth},
                 {"train_fraction", c.train_fraction}};
  j["record"] = nlohmann::json::array({
      {{"name", "template_image"}, {"shape", {c.template_size, c.template_size, c.raw_channels}}},
      {{"name", "search_image"}, {"shape", {c.search_size, c.search_size, c.raw_channels}}},
      {{"name", "template_bbox"}, {"shape", {4}}, {"order", "x0,y0,x1,y1"}},
      {{"name", "gt_bbox"}, {"shape", {4}}, {"order", "x0,y0,x1,y1"}},
      {{"name", "cls_labels"}, {"shape", {sg, sg}}},
  });
  j["record_doubles"] = c.template_size * c.template_size * c.raw_channels +
                        c.search_size * c.search_size * c.raw_channels + 8 + sg * sg;
  return j;
}

StemParams init_stem_params(std::size_t raw_channels, std::size_t out_channels, Rng& rng) {
  StemParams p;
  p.conv1 = Tensor::uniform({3, 3, raw_channels, kStemHidden}, 1.0 / std::sqrt(9.0 * static_cast<double>(raw_channels)),
                            rng, true);
  p.bias1 = Tensor::zeros({kStemHidden}, true);
  p.conv2 = Tensor::uniform({3, 3, kStemHidden, out_channels}, 1.0 / std::sqrt(9.0 * kStemHidden), rng, true);
  p.bias2 = Tensor::zeros({out_channels}, true);
  return p;
}

Var stem_forward(Var image, StemParams& params, std::size_t pool) {
  Tape& tape = image.tape();
  Var h = relu(broadcast_add(conv2d_same(image, tape.param(params.conv1), false), tape.param(params.bias1)));
  Var y = broadcast_add(conv2d_same(h, tape.param(params.conv2), false), tape.param(params.bias2));
  return pool > 1 ? avg_pool(y, pool) : y;
}

HeadParams init_head_params(std::size_t in_channels, Rng& rng) {
  HeadParams p;
  p.trunk = Tensor::uniform({in_channels, kHeadHidden}, 1.0 / std::sqrt(static_cast<double>(in_channels)), rng, true);
  p.trunk_bias = Tensor::zeros({kHeadHidden}, true);
  const double b = 1.0 / std::sqrt(static_cast<double>(kHeadHidden));
  p.cls = Tensor::uniform({kHeadHidden, 1}, b, rng, true);
  p.cls_bias = Tensor::zeros({1}, true);
  p.reg = Tensor::uniform({kHeadHidden, 4}, b, rng, true);
  p.reg_bias = Tensor::zeros({4}, true);
  return p;
}

HeadParams zero_head_params(std::size_t in_channels) {
  HeadParams p;
  p.trunk = Tensor::zeros({in_channels, kHeadHidden}, true);
  p.trunk_bias = Tensor::zeros({kHeadHidden}, true);
  p.cls = Tensor::zeros({kHeadHidden, 1}, true);
  p.cls_bias = Tensor::zeros({1}, true);
  p.reg = Tensor::zeros({kHeadHidden, 4}, true);
  p.reg_bias = Tensor::zeros({4}, true);
  return p;
}

HeadOutput head_forward(Var response, HeadParams& params) {
  if (response.shape().size() != 3 || response.shape()[2] != params.trunk.shape[0]) {
    throw DimensionError("head: response " + shape_string(response.shape()) + " but head expects width " +
                         std::to_string(params.trunk.shape[0]));
  }
  Tape& tape = response.tape();
  const std::size_t h = response.shape()[0], w = response.shape()[1];
  Var t = relu(linear(response, tape.param(params.trunk), tape.param(params.trunk_bias)));
  Var cls = reshape(sigmoid(linear(t, tape.param(params.cls), tape.param(params.cls_bias))), {h, w});
  Var reg = softplus(linear(t, tape.param(params.reg), tape.param(params.reg_bias)));
  return {cls, reg};
}

std::array<double, 4> decode_box(std::size_t y, std::size_t x, std::span<const double> dist) {
  const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
  return {cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]};
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::array<double, 4> to_corners(const BBox& b) {
  return {static_cast<double>(b.x0), static_cast<double>(b.y0), static_cast<double>(b.x1), static_cast<double>(b.y1)};
}

TrackerOutput tracker_forward(Tape& tape, const SyntheticSample& s, StemParams& stem, const NeckFn& neck,
                              HeadParams& head, std::size_t pool) {
  Var ft = stem_forward(tape.constant(s.template_image), stem, pool);
  Var fs = stem_forward(tape.constant(s.search_image), stem, pool);
  Var response = neck(tape, ft, fs, s.template_bbox);
  return {head_forward(response, head), response};
}

nlohmann::json EvalMetrics::to_json() const {
  return {{"mean_iou", mean_iou}, {"cls_accuracy", cls_accuracy}, {"flops", flops}, {"samples", samples}};
}

EvalMetrics evaluate_predictions(std::span<const Prediction> preds, std::span<const SyntheticSample* const> samples,
                                 std::size_t grid) {
  if (samples.empty()) throw ContractError("evaluate: empty dataset");
  if (preds.size() != samples.size()) throw DimensionError("evaluate: prediction count does not match samples");
  EvalMetrics m;
  m.samples = samples.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = preds[i];
    const auto& s = *samples[i];
    if (p.cls.size() != grid * grid || p.reg.size() != grid * grid * 4 || s.cls_labels.size() != grid * grid) {
      throw DimensionError("evaluate: prediction maps do not match the " + std::to_string(grid) + "x" +
                           std::to_string(grid) + " grid");
    }
    const auto best = static_cast<std::size_t>(std::max_element(p.cls.begin(), p.cls.end()) - p.cls.begin());
    const auto box = decode_box(best / grid, best % grid, std::span<const double>(p.reg).subspan(best * 4, 4));
    m.mean_iou += box_iou(box, to_corners(s.gt_bbox));
    std::size_t correct = 0;
    for (std::size_t c = 0; c < p.cls.size(); ++c) correct += (p.cls[c] > 0.5 ? 1.0 : 0.0) == s.cls_labels[c];
    m.cls_accuracy += static_cast<double>(correct) / static_cast<double>(p.cls.size());
  }
  m.mean_iou /= static_cast<double>(samples.size());
  m.cls_accuracy /= static_cast<double>(samples.size());
  return m;
}

EvalMetrics evaluate(std::span<const SyntheticSample* const> samples, StemParams& stem, const NeckFn& neck,
                     HeadParams& head, std::size_t pool, double flops) {
  if (samples.empty()) throw ContractError("evaluate: empty dataset");
  std::vector<Prediction> preds;
  std::size_t grid = 0;
  for (const SyntheticSample* s : samples) {
    Tape tape;
    auto out = tracker_forward(tape, *s, stem, neck, head, pool);
    grid = out.head.cls.shape()[0];
    auto c = out.head.cls.value();
    auto r = out.head.reg.value();
    preds.push_back({{c.begin(), c.end()}, {r.begin(), r.end()}});
  }
  EvalMetrics m = evaluate_predictions(preds, samples, grid);
  m.flops = flops;
  return m;
}

}  // namespace mcas
