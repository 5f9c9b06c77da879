#include "mcas/search.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <memory>
#include <thread>

#include "mcas/errors.hpp"

namespace mcas {

// ---- losses

double iou_loss_value(const std::array<double, 4>& pred, const std::array<double, 4>& gt) {
  for (const auto* b : {&pred, &gt}) {
    if (!((*b)[2] > (*b)[0] && (*b)[3] > (*b)[1])) throw ContractError("iou_loss: box has non-positive area");
  }
  return -std::log(std::max(box_iou(pred, gt), kIouFloor));
}

Var iou_loss(Var pred, const std::array<double, 4>& gt) {
  if (pred.size() != 4) throw DimensionError("iou_loss: prediction must hold 4 coordinates, got " + shape_string(pred.shape()));
  auto p = pred.value();
  const std::array<double, 4> box{p[0], p[1], p[2], p[3]};
  const double value = iou_loss_value(box, gt);
  const auto ip = pred.id();
  return pred.tape().record("iou_loss", {1}, {value}, {pred}, [ip, box, gt](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    const double ix0 = std::max(box[0], gt[0]), ix1 = std::min(box[2], gt[2]);
    const double iy0 = std::max(box[1], gt[1]), iy1 = std::min(box[3], gt[3]);
    const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
    const double inter = iw * ih;
    const double pw = box[2] - box[0], phh = box[3] - box[1];
    const double uni = pw * phh + (gt[2] - gt[0]) * (gt[3] - gt[1]) - inter;
    const double iou = inter / uni;
    if (iou <= kIouFloor) return;
    const double d_iou = -g / iou;
    const double d_inter = d_iou * (uni + inter) / (uni * uni);
    const double d_area = d_iou * (-inter / (uni * uni));
    std::array<double, 4> d{};
    if (iw > 0 && ih > 0) {
      if (box[0] > gt[0]) d[0] -= ih * d_inter;
      if (box[2] < gt[2]) d[2] += ih * d_inter;
      if (box[1] > gt[1]) d[1] -= iw * d_inter;
      if (box[3] < gt[3]) d[3] += iw * d_inter;
    }
    d[0] -= phh * d_area;
    d[2] += phh * d_area;
    d[1] -= pw * d_area;
    d[3] += pw * d_area;
    auto gp = t.grad_buffer(ip);
    for (std::size_t k = 0; k < 4; ++k) gp[k] += d[k];
  });
}

Var bce_loss(Var p, std::span<const double> labels) {
  if (p.size() != labels.size()) {
    throw DimensionError("bce_loss: " + std::to_string(p.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  auto pv = p.value();
  const double n = static_cast<double>(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double q = std::clamp(pv[i], kProbClamp, 1.0 - kProbClamp);
    total -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  std::vector<double> y(labels.begin(), labels.end());
  const auto ip = p.id();
  return p.tape().record("bce_loss", {1}, {total / n}, {p}, [ip, y, n](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    auto pv = t.value_of(ip);
    auto gp = t.grad_buffer(ip);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double q = pv[i];
      if (q < kProbClamp || q > 1.0 - kProbClamp) continue;
      gp[i] += g * (q - y[i]) / (q * (1.0 - q)) / n;
    }
  });
}

Var regression_loss(Var reg, const BBox& gt) {
  if (reg.shape().size() != 3 || reg.shape()[2] != 4) {
    throw DimensionError("regression_loss: expected H x W x 4 map, got " + shape_string(reg.shape()));
  }
  const std::size_t h = reg.shape()[0], w = reg.shape()[1];
  gt.validate(h, w);
  Tape& tape = reg.tape();
  Var flat = reshape(reg, {h * w * 4});
  const auto target = to_corners(gt);
  std::vector<Var> losses;
  for (std::size_t y = gt.y0; y < gt.y1; ++y)
    for (std::size_t x = gt.x0; x < gt.x1; ++x) {
      const std::size_t base = (y * w + x) * 4;
      const std::size_t idx[4] = {base, base + 1, base + 2, base + 3};
      const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
      Var box = add(tape.constant({4}, {cx, cy, cx, cy}), mul(tape.constant({4}, {-1, -1, 1, 1}), gather(flat, idx)));
      losses.push_back(iou_loss(box, target));
    }
  return mean(stack(losses));
}

Var total_loss(Var sea, Var reg, Var cls, const LossWeights& w) {
  return add(add(scale(sea, w.eta), scale(reg, w.lambda)), scale(cls, w.mu));
}

double total_loss(double sea, double reg, double cls, const LossWeights& w) {
  return w.eta * sea + w.lambda * reg + w.mu * cls;
}

// ---- schedule and optimizers

void ScheduleConfig::validate() const {
  if (!(final_lr > 0 && final_lr <= base_lr)) throw ConfigError("schedule needs 0 < final_lr <= base_lr");
  if (total_epochs == 0 || warmup_epochs >= total_epochs) throw ConfigError("schedule needs warmup_epochs < total_epochs");
}

double lr_at(std::size_t epoch, const ScheduleConfig& s) {
  s.validate();
  if (epoch >= s.total_epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) + ")");
  }
  const std::size_t w = s.warmup_epochs;
  if (epoch < w) {
    if (w == 1) return s.base_lr;
    const double f = static_cast<double>(epoch) / static_cast<double>(w - 1);
    return s.base_lr / 10.0 + f * (s.base_lr - s.base_lr / 10.0);
  }
  const std::size_t span = s.total_epochs - 1 - w;
  if (span == 0) return s.base_lr;
  const double f = static_cast<double>(epoch - w) / static_cast<double>(span);
  return s.base_lr * std::pow(s.final_lr / s.base_lr, f);
}

namespace {

void check_buffers(std::span<Tensor* const> params, std::vector<std::vector<double>>& buf, const char* what) {
  if (buf.empty()) {
    for (Tensor* p : params) buf.emplace_back(p->size(), 0.0);
  }
  if (buf.size() != params.size()) throw DimensionError(std::string(what) + ": parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buf[i].size() != params[i]->size() || params[i]->grad.size() != params[i]->size()) {
      throw DimensionError(std::string(what) + ": parameter " + std::to_string(i) + " " +
                           shape_string(params[i]->shape) + " does not match its state or gradient");
    }
  }
}

}  // namespace

void sgd_step(std::span<Tensor* const> params, SgdState& state, double lr) {
  check_buffers(params, state.velocity, "sgd_step");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + p.grad[j];
      p.data[j] -= lr * v[j];
    }
  }
  ++state.steps;
}

void adam_step(std::span<Tensor* const> params, AdamState& state, double lr) {
  check_buffers(params, state.m, "adam_step");
  check_buffers(params, state.v, "adam_step");
  ++state.steps;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j] + state.weight_decay * p.data[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      p.data[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

std::uint64_t hash_tensors(std::vector<Tensor*> tensors) {
  std::vector<const Tensor*> c(tensors.begin(), tensors.end());
  return hash_values(c);
}

// ---- driver

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["stage"] = stage;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr);
  j["sea_cost"] = sea_cost;
  j["lr_gamma"] = lr_gamma;
  j["lr_alpha"] = lr_alpha;
  j["lr_beta"] = lr_beta;
  j["derived_path_snapshot"] = derived_path_snapshot;
  return j;
}

bool SearchResult::audits_pass() const {
  return std::all_of(audits.begin(), audits.end(), [](const AuditResult& a) { return a.pass; });
}

namespace {

void set_trainable(const std::vector<Tensor*>& ts, bool on) {
  for (Tensor* t : ts) t->set_grad_enabled(on);
}

void zero_grads(const std::vector<Tensor*>& ts) {
  for (Tensor* t : ts)
    if (t->grad_enabled) t->zero_grad();
}

std::vector<Tensor*> concat(std::vector<Tensor*> a, const std::vector<Tensor*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct DataTerms {
  double reg = 0, cls = 0;
};

// Per-sample tapes, optionally on worker threads; gradients reduced in sample order.
DataTerms data_gradient(std::span<const SyntheticSample* const> batch, TrackerWeights& w, const NeckFn& neck,
                        std::size_t pool, const LossWeights& lw, std::size_t threads) {
  const std::size_t n = batch.size();
  const double inv = 1.0 / static_cast<double>(n);
  DataTerms out;
  threads = std::max<std::size_t>(1, std::min(threads, n));
  for (std::size_t start = 0; start < n; start += threads) {
    const std::size_t count = std::min(threads, n - start);
    std::vector<std::unique_ptr<Tape>> tapes(count);
    std::vector<DataTerms> terms(count);
    std::vector<std::exception_ptr> errors(count);
    auto work = [&](std::size_t k) {
      try {
        tapes[k] = std::make_unique<Tape>();
        Tape& tape = *tapes[k];
        const SyntheticSample& s = *batch[start + k];
        auto o = tracker_forward(tape, s, w.stem, neck, w.head, pool);
        Var reg = regression_loss(o.head.reg, s.gt_bbox);
        Var cls = bce_loss(o.head.cls, s.cls_labels);
        terms[k] = {reg.value()[0], cls.value()[0]};
        tape.backward(add(scale(reg, lw.lambda), scale(cls, lw.mu)));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    };
    if (count == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool_threads;
      for (std::size_t k = 0; k < count; ++k) pool_threads.emplace_back(work, k);
      for (auto& t : pool_threads) t.join();
    }
    for (std::size_t k = 0; k < count; ++k) {
      if (errors[k]) std::rethrow_exception(errors[k]);
      tapes[k]->accumulate_param_grads(inv);
      out.reg += inv * terms[k].reg;
      out.cls += inv * terms[k].cls;
    }
  }
  if (!std::isfinite(out.reg)) throw NumericalError("non-finite regression loss");
  if (!std::isfinite(out.cls)) throw NumericalError("non-finite classification loss");
  return out;
}

double sea_term(Supernet& net, const CostTable& table, double cost_scale, double eta, bool backward) {
  Tape tape;
  Var s = scale(chained_cost(tape, net, table), 1.0 / cost_scale);
  const double v = s.value()[0];
  if (!std::isfinite(v)) throw NumericalError("non-finite chained cost");
  if (backward && eta != 0.0) {
    tape.backward(scale(s, eta));
    tape.accumulate_param_grads(1.0);
  }
  return v;
}

std::vector<std::vector<const SyntheticSample*>> make_batches(std::vector<const SyntheticSample*> samples,
                                                              std::size_t batch_size, Rng& rng) {
  std::shuffle(samples.begin(), samples.end(), rng);
  std::vector<std::vector<const SyntheticSample*>> out;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    out.emplace_back(samples.begin() + static_cast<std::ptrdiff_t>(i),
                     samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), i + batch_size)));
  }
  return out;
}

std::vector<const SyntheticSample*> pointers(const std::vector<SyntheticSample>& v) {
  std::vector<const SyntheticSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

std::string context(std::size_t epoch, std::size_t batch, const char* phase) {
  return "epoch " + std::to_string(epoch) + ", " + phase + " batch " + std::to_string(batch) + ": ";
}

}  // namespace

SearchResult run_search(Supernet& net, TrackerWeights& weights, const Dataset& data, const CostTable& table,
                        const SearchConfig& config, const EpochCallback& on_epoch) {
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::size_t s1 = config.stage1_epochs, s2 = config.stage2_epochs, s3 = config.stage3_epochs;
  const std::size_t total = s1 + s2 + s3;
  if (total == 0) throw ConfigError("search needs at least one epoch");
  ScheduleConfig sched = config.gamma_schedule;
  sched.total_epochs = total;
  sched.warmup_epochs = std::min(sched.warmup_epochs, total - 1);
  sched.validate();

  const auto& lw = config.weights;
  const bool data_terms = lw.lambda != 0.0 || lw.mu != 0.0;
  std::vector<Tensor*> gamma = concat(net.weight_tensors(), weights.head.tensors());
  std::vector<Tensor*> stem = weights.stem.tensors();
  std::vector<Tensor*> arch = net.arch_tensors();
  std::vector<Tensor*> alpha(arch.begin(), arch.end() - 1);
  std::vector<Tensor*> beta{arch.back()};
  const std::vector<Tensor*> gamma_stem = concat(gamma, stem);

  SearchResult result;
  {
    std::vector<std::vector<double>> saved;
    for (Tensor* t : arch) {
      saved.push_back(t->data);
      std::fill(t->data.begin(), t->data.end(), 0.0);
    }
    result.cost_scale = config.normalize_cost ? chained_cost_value(net, table) : 1.0;
    for (std::size_t i = 0; i < arch.size(); ++i) arch[i]->data = std::move(saved[i]);
  }
  if (!(result.cost_scale > 0)) throw NumericalError("chained cost at uniform architecture is not positive");
  // Stages 1-2 never move alpha/beta, so this is also the pre-stage-3 cost.
  result.initial_sea_raw = chained_cost_value(net, table);

  NeckFn neck = [&net](Tape& tape, Var ft, Var fs, const BBox& b) { return supernet_forward(tape, net, ft, fs, b); };
  const std::size_t pool = data.config.pool;
  Rng rng(config.shuffle_seed);
  SgdState gamma_opt{config.gamma_momentum, {}, 0}, stem_opt{config.gamma_momentum, {}, 0};
  SgdState alpha_opt{config.alpha_momentum, {}, 0};
  AdamState beta_opt;
  beta_opt.weight_decay = config.beta_weight_decay;

  bool s1_arch = true, s1_stem = true, s2_arch = true, s3_gamma = true, s3_arch = true;

  auto run_batch = [&](const std::vector<const SyntheticSample*>& batch, const std::vector<Tensor*>& live,
                       bool sea_grad, std::size_t epoch, std::size_t b, const char* phase) {
    zero_grads(live);
    DataTerms d;
    double sea = 0;
    try {
      if (data_terms) d = data_gradient(batch, weights, neck, pool, lw, config.threads);
      sea = sea_term(net, table, result.cost_scale, lw.eta, sea_grad);
    } catch (const NumericalError& e) {
      throw NumericalError(context(epoch, b, phase) + e.what());
    }
    return std::tuple{d, sea, total_loss(sea, d.reg, d.cls, lw)};
  };

  for (std::size_t e = 0; e < total; ++e) {
    EpochRecord rec;
    rec.epoch = e;
    rec.stage = e < s1 ? 1 : (e < s1 + s2 ? 2 : 3);
    rec.lr_gamma = lr_at(e, sched);
    rec.lr_alpha = rec.stage == 3 ? config.alpha_lr : 0.0;
    rec.lr_beta = rec.stage == 3 ? config.beta_lr : 0.0;

    if (rec.stage < 3) {
      const auto arch_before = hash_tensors(arch);
      const auto stem_before = hash_tensors(stem);
      set_trainable(arch, false);
      set_trainable(stem, rec.stage == 2);
      set_trainable(gamma, true);
      const auto live = rec.stage == 2 ? gamma_stem : gamma;
      const auto batches = make_batches(pointers(data.train), config.batch_size, rng);
      for (std::size_t b = 0; b < batches.size(); ++b) {
        auto [d, sea, loss] = run_batch(batches[b], live, false, e, b, "train");
        rec.train_loss += loss / static_cast<double>(batches.size());
        rec.train_reg += d.reg / static_cast<double>(batches.size());
        rec.train_cls += d.cls / static_cast<double>(batches.size());
        if (data_terms) {
          sgd_step(gamma, gamma_opt, rec.lr_gamma);
          if (rec.stage == 2) sgd_step(stem, stem_opt, rec.lr_gamma);
        }
      }
      const bool arch_ok = hash_tensors(arch) == arch_before;
      if (rec.stage == 1) {
        s1_arch = s1_arch && arch_ok;
        s1_stem = s1_stem && hash_tensors(stem) == stem_before;
      } else {
        s2_arch = s2_arch && arch_ok;
      }
    } else {
      // Weights on train batches.
      const auto arch_before = hash_tensors(arch);
      set_trainable(arch, false);
      set_trainable(gamma_stem, true);
      const auto train_batches = make_batches(pointers(data.train), config.batch_size, rng);
      for (std::size_t b = 0; b < train_batches.size(); ++b) {
        auto [d, sea, loss] = run_batch(train_batches[b], gamma_stem, false, e, b, "train");
        rec.train_loss += loss / static_cast<double>(train_batches.size());
        rec.train_reg += d.reg / static_cast<double>(train_batches.size());
        rec.train_cls += d.cls / static_cast<double>(train_batches.size());
        if (data_terms) {
          sgd_step(gamma, gamma_opt, rec.lr_gamma);
          sgd_step(stem, stem_opt, rec.lr_gamma);
        }
      }
      s3_arch = s3_arch && hash_tensors(arch) == arch_before;

      // Architecture on val batches.
      const auto gamma_before = hash_tensors(gamma_stem);
      set_trainable(gamma_stem, false);
      set_trainable(arch, true);
      const auto val_batches = make_batches(pointers(data.val), config.batch_size, rng);
      double val_loss = 0;
      for (std::size_t b = 0; b < val_batches.size(); ++b) {
        auto [d, sea, loss] = run_batch(val_batches[b], arch, true, e, b, "val");
        val_loss += loss / static_cast<double>(val_batches.size());
        sgd_step(alpha, alpha_opt, config.alpha_lr);
        adam_step(beta, beta_opt, config.beta_lr);
        ++result.stage3_steps;
      }
      rec.val_loss = val_loss;
      s3_gamma = s3_gamma && hash_tensors(gamma_stem) == gamma_before;
    }
    rec.sea_cost = chained_cost_value(net, table) / result.cost_scale;
    rec.derived_path_snapshot = path_string(derive_architecture(net).path);
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  set_trainable(gamma_stem, true);
  set_trainable(arch, true);
  result.final_sea_raw = chained_cost_value(net, table);
  result.arch = derive_architecture(net);
  result.audits = {
      {"stage 1: alpha and beta bit-identical", s1_arch},
      {"stage 1: stem bit-identical", s1_stem},
      {"stage 2: alpha and beta bit-identical", s2_arch},
      {"stage 3: weights untouched by val batches", s3_gamma},
      {"stage 3: alpha and beta untouched by train batches", s3_arch},
  };
  return result;
}

TrainResult train_derived(DerivedNetwork& net, TrackerWeights& weights, const Dataset& data, const CostTable& table,
                          const TrainConfig& config) {
  if (config.batch_size == 0 || config.epochs == 0) throw ConfigError("training needs positive epochs and batch_size");
  ScheduleConfig sched = config.schedule;
  sched.total_epochs = config.epochs;
  sched.warmup_epochs = std::min(sched.warmup_epochs, config.epochs - 1);
  sched.validate();
  std::vector<Tensor*> params = concat(concat(net.tensors(), weights.head.tensors()), weights.stem.tensors());
  set_trainable(params, true);
  TrainResult result;
  result.initial_hash = hash_tensors(params);
  NeckFn neck = [&net](Tape& tape, Var ft, Var fs, const BBox& b) { return net.forward(tape, ft, fs, b); };
  const std::size_t pool = data.config.pool;
  Rng rng(config.shuffle_seed);
  SgdState opt{config.momentum, {}, 0};
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double lr = lr_at(e, sched);
    const auto batches = make_batches(pointers(data.train), config.batch_size, rng);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      zero_grads(params);
      DataTerms d;
      try {
        d = data_gradient(batches[b], weights, neck, pool, config.weights, config.threads);
      } catch (const NumericalError& err) {
        throw NumericalError(context(e, b, "train") + err.what());
      }
      epoch_loss += total_loss(0.0, d.reg, d.cls, config.weights) / static_cast<double>(batches.size());
      sgd_step(params, opt, lr);
    }
    result.epoch_loss.push_back(epoch_loss);
  }
  result.final_hash = hash_tensors(params);
  const double flops = derived_cost(net.spec, net.arch, table);
  result.val_metrics = evaluate(pointers(data.val), weights.stem, neck, weights.head, pool, flops);
  return result;
}

}  // namespace mcas
