#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcas/cost_model.hpp"
#include "mcas/harness.hpp"
#include "mcas/supernet.hpp"

namespace mcas {

// ---- losses

inline constexpr double kIouFloor = 1e-6;
inline constexpr double kProbClamp = 1e-7;

// -ln(max(IoU, 1e-6)) for pred = {x0, y0, x1, y1}. Gradient is zero while the
// floor is active.
Var iou_loss(Var pred, const std::array<double, 4>& gt);
double iou_loss_value(const std::array<double, 4>& pred, const std::array<double, 4>& gt);

// Mean binary cross-entropy, p clamped to [1e-7, 1 - 1e-7].
Var bce_loss(Var p, std::span<const double> labels);

// Mean IoU loss over the cells inside gt, with each cell's box decoded from its
// side distances. reg: H x W x 4.
Var regression_loss(Var reg, const BBox& gt);

struct LossWeights {
  double eta = 1.0, lambda = 1.0, mu = 1.0;
};

Var total_loss(Var sea, Var reg, Var cls, const LossWeights& w);
double total_loss(double sea, double reg, double cls, const LossWeights& w);

// ---- schedule and optimizers

struct ScheduleConfig {
  double base_lr = 5e-3;
  double final_lr = 1e-5;
  std::size_t total_epochs = 48;
  std::size_t warmup_epochs = 5;

  void validate() const;
};

// Linear warmup from base/10 to base over epochs 0..w-1, then geometric decay
// reaching final_lr at the last epoch.
double lr_at(std::size_t epoch, const ScheduleConfig& s);

struct SgdState {
  double momentum = 0.9;
  std::vector<std::vector<double>> velocity;
  std::uint64_t steps = 0;
};

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 1e-3;
  std::vector<std::vector<double>> m, v;
  std::uint64_t steps = 0;
};

// v = momentum * v + g;  p -= lr * v.  Reads each tensor's grad.
void sgd_step(std::span<Tensor* const> params, SgdState& state, double lr);
// Adam with L2 weight decay folded into the gradient, bias corrected.
void adam_step(std::span<Tensor* const> params, AdamState& state, double lr);

// ---- search driver

struct SearchConfig {
  LossWeights weights;
  std::size_t stage1_epochs = 8, stage2_epochs = 8, stage3_epochs = 12;
  std::size_t batch_size = 8;
  // total_epochs is overridden by the stage sum.
  ScheduleConfig gamma_schedule;
  double gamma_momentum = 0.9;
  double alpha_lr = 1e-3, alpha_momentum = 0.9;
  double beta_lr = 1e-4, beta_weight_decay = 1e-3;
  bool normalize_cost = true;
  std::size_t threads = 1;
  std::uint64_t shuffle_seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  int stage = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  double sea_cost = 0;  // normalized
  double lr_gamma = 0, lr_alpha = 0, lr_beta = 0;
  std::string derived_path_snapshot;
  // Mean data terms over the epoch's training batches.
  double train_reg = 0, train_cls = 0;

  nlohmann::json to_json() const;
};

struct AuditResult {
  std::string name;
  bool pass = false;
};

struct SearchResult {
  std::vector<EpochRecord> records;
  std::vector<AuditResult> audits;
  DerivedArchitecture arch;
  double cost_scale = 1;        // raw chained cost at uniform architecture parameters
  double initial_sea_raw = 0;   // raw chained cost before stage 3
  double final_sea_raw = 0;
  std::size_t stage3_steps = 0; // architecture updates performed

  bool audits_pass() const;
};

// Everything trained by the search besides the architecture parameters.
struct TrackerWeights {
  StemParams stem;
  HeadParams head;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

SearchResult run_search(Supernet& net, TrackerWeights& weights, const Dataset& data, const CostTable& table,
                        const SearchConfig& config, const EpochCallback& on_epoch = {});

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  ScheduleConfig schedule;  // total_epochs overridden by epochs
  double momentum = 0.9;
  LossWeights weights{0.0, 1.0, 1.0};
  std::size_t threads = 1;
  std::uint64_t shuffle_seed = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  EvalMetrics val_metrics;
  std::uint64_t initial_hash = 0;
  std::uint64_t final_hash = 0;
};

// Trains stem, derived neck and head from their current values on data.train
// and evaluates on data.val.
TrainResult train_derived(DerivedNetwork& net, TrackerWeights& weights, const Dataset& data, const CostTable& table,
                          const TrainConfig& config);

std::uint64_t hash_tensors(std::vector<Tensor*> tensors);

}  // namespace mcas
