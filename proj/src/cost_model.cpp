#include "mcas/cost_model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "mcas/errors.hpp"

namespace mcas {

namespace {

const std::vector<std::pair<FusionKind, std::string>>& kind_names() {
  static const std::vector<std::pair<FusionKind, std::string>> names = {
      {FusionKind::conv_fusion, "conv-fusion"},
      {FusionKind::cross_attention_fusion, "cross-attention-fusion"},
      {FusionKind::cfm, "cfm"},
      {FusionKind::standard_cnn_3x3, "standard-cnn-3x3"},
      {FusionKind::depthwise_cnn, "depthwise-cnn"},
      {FusionKind::transformer_4head, "transformer-4head"},
      {FusionKind::wave_mlp, "wave-mlp"},
      {FusionKind::skip, "skip"},
  };
  return names;
}

}  // namespace

FusionKind parse_fusion_kind(const std::string& name) {
  for (const auto& [k, n] : kind_names())
    if (n == name) return k;
  throw ConfigError("unknown fusion kind '" + name + "'");
}

std::string fusion_kind_name(FusionKind kind) {
  for (const auto& [k, n] : kind_names())
    if (k == kind) return n;
  throw ConfigError("unknown fusion kind");
}

std::uint64_t analytic_flops(FusionKind kind, const FlopsShape& s) {
  if (kind == FusionKind::skip) return 0;
  if (s.h == 0 || s.w == 0 || s.c == 0 || s.c_out == 0) {
    throw ConfigError(fusion_kind_name(kind) + ": dimensions must be positive");
  }
  const std::uint64_t n = s.h * s.w, c = s.c, co = s.c_out;
  const std::uint64_t nt = s.ht * s.wt;
  const bool needs_template =
      kind == FusionKind::conv_fusion || kind == FusionKind::cross_attention_fusion || kind == FusionKind::cfm;
  if (needs_template && nt == 0) throw ConfigError(fusion_kind_name(kind) + ": template size must be positive");
  switch (kind) {
    case FusionKind::conv_fusion:
      return n * nt * c * co;
    case FusionKind::cross_attention_fusion:
      return 2 * n * nt * c + n * c * co;
    case FusionKind::cfm:
      return n * nt * (c + co) + nt * c;
    case FusionKind::standard_cnn_3x3:
      return 9 * n * c * co;
    case FusionKind::depthwise_cnn:
      return n * (9 * c + c * co);
    case FusionKind::transformer_4head:
      return 4 * n * n * c + 4 * n * c * co;
    case FusionKind::wave_mlp:
      return 2 * n * n * c + 2 * n * c * co;
    case FusionKind::skip:
      break;
  }
  return 0;
}

std::uint64_t analytic_flops(const std::string& kind, const FlopsShape& shape) {
  return analytic_flops(parse_fusion_kind(kind), shape);
}

std::uint64_t block_flops(const BlockConfig& config, std::size_t h, std::size_t w) {
  config.validate();
  if (config.is_skip) return 0;
  const std::uint64_t n = h * w, cin = config.in_channels, c = config.out_channels;
  const std::uint64_t k = static_cast<std::uint64_t>(config.kernel_size);
  const std::uint64_t hidden = c * static_cast<std::uint64_t>(config.expansion_ratio);
  std::uint64_t total = 0;
  if (config.projects()) total += n * cin * c;
  total += analytic_flops(FusionKind::wave_mlp, {h, w, 0, 0, c, c});
  total += k * k * n * c;
  if (config.depthwise) {
    const std::uint64_t dk = kMlpDepthwiseKernel;
    total += dk * dk * n * hidden + n * hidden * c;
  } else {
    total += 2 * n * c * hidden;
  }
  return total;
}

std::uint64_t cfm_flops(std::size_t ht, std::size_t wt, std::size_t hs, std::size_t ws, std::size_t c,
                        std::size_t c_out) {
  return analytic_flops(FusionKind::cfm, {hs, ws, ht, wt, c, c_out});
}

QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("fit_quadratic: x and y lengths differ");
  std::set<double> distinct(x.begin(), x.end());
  if (distinct.size() < 6) {
    throw ContractError("fit_quadratic: insufficient points (" + std::to_string(distinct.size()) +
                        " distinct x values, need 6)");
  }
  const auto m = static_cast<Eigen::Index>(x.size());
  // Scale x to keep the normal equations well conditioned.
  const double sx = *std::max_element(x.begin(), x.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
  const double scale = sx == 0 ? 1.0 : std::abs(sx);
  Eigen::MatrixXd a(m, 3);
  Eigen::VectorXd b(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double u = x[static_cast<std::size_t>(i)] / scale;
    a(i, 0) = u * u;
    a(i, 1) = u;
    a(i, 2) = 1.0;
    b(i) = y[static_cast<std::size_t>(i)];
  }
  const Eigen::Vector3d coef = a.colPivHouseholderQr().solve(b);
  QuadraticFit f;
  f.a = coef(0) / (scale * scale);
  f.b = coef(1) / scale;
  f.c = coef(2);
  const double mean = b.mean();
  const double ss_res = (a * coef - b).squaredNorm();
  const double ss_tot = (b.array() - mean).square().sum();
  f.r2 = ss_tot == 0 ? (ss_res == 0 ? 1.0 : 0.0) : 1.0 - ss_res / ss_tot;
  return f;
}

QuadraticFit verify_quadratic_scaling(FusionKind kind, std::size_t h, std::size_t w,
                                      const std::vector<std::size_t>& channels) {
  std::vector<double> x, y;
  for (std::size_t c : channels) {
    x.push_back(static_cast<double>(c));
    y.push_back(static_cast<double>(analytic_flops(kind, {h, w, h, w, c, c})));
  }
  return fit_quadratic(x, y);
}

void CostTable::insert(const CostEntry& e) {
  if (!(e.cost >= 0) || !std::isfinite(e.cost)) {
    throw ContractError("cost entry " + e.key.config_id + " must be finite and non-negative");
  }
  entries_[e.key] = e;
}

const CostEntry& CostTable::lookup(const CostKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw LookupError("no cost entry for " + key.config_id + " at " + std::to_string(key.h) + "x" +
                      std::to_string(key.w) + " (" + std::to_string(key.cin) + "->" + std::to_string(key.cout) + ")");
  }
  return it->second;
}

std::vector<CostEntry> CostTable::entries() const {
  std::vector<CostEntry> out;
  for (const auto& [k, e] : entries_) out.push_back(e);
  return out;
}

std::string CostTable::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "config_id,H,W,Cin,Cout,cost,source\n";
  for (const auto& [k, e] : entries_) {
    os << k.config_id << ',' << k.h << ',' << k.w << ',' << k.cin << ',' << k.cout << ',' << e.cost << ','
       << (e.source == CostSource::analytic ? "analytic" : "measured") << '\n';
  }
  return os.str();
}

CostTable CostTable::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "config_id,H,W,Cin,Cout,cost,source") {
    throw ConfigError("cost table CSV: missing or unexpected header");
  }
  CostTable t;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw ConfigError("cost table CSV line " + std::to_string(lineno) + ": expected 7 fields");
    try {
      CostEntry e;
      e.key = {f[0], std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[3]), std::stoul(f[4])};
      e.cost = std::stod(f[5]);
      if (f[6] == "analytic") {
        e.source = CostSource::analytic;
      } else if (f[6] == "measured") {
        e.source = CostSource::measured;
      } else {
        throw ConfigError("unknown source '" + f[6] + "'");
      }
      t.insert(e);
    } catch (const std::logic_error&) {
      throw ConfigError("cost table CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return t;
}

CostKey cfm_cost_key(const SupernetSpec& spec) {
  return {"cfm", spec.search_h, spec.search_w, spec.feature_channels, spec.widths[0]};
}

CostKey candidate_cost_key(const SupernetSpec& spec, const BlockConfig& config) {
  return {config.id(), spec.search_h, spec.search_w, config.in_channels, config.out_channels};
}

namespace {

// Every distinct candidate appearing in the spec's basic layers.
std::vector<BlockConfig> all_candidates(const SupernetSpec& spec) {
  std::vector<BlockConfig> out;
  std::set<std::tuple<std::string, std::size_t, std::size_t>> seen;
  auto add = [&](const std::string& id, std::size_t in, std::size_t o) {
    if (seen.insert({id, in, o}).second) out.push_back(BlockConfig::parse(id, in, o));
  };
  for (std::size_t dest = 1; dest < spec.block_count(); ++dest) {
    for (std::size_t src : spec.incoming_sources(dest)) {
      const auto& ch = spec.ch_layer(src, dest);
      for (const auto& id : spec.ch_candidates) add(id, ch.in_channels, ch.out_channels);
    }
    for (const auto& id : spec.ph_candidates) add(id, spec.widths[dest], spec.widths[dest]);
  }
  return out;
}

}  // namespace

CostTable analytic_cost_table(const SupernetSpec& spec) {
  spec.validate();
  CostTable t;
  t.insert({cfm_cost_key(spec),
            static_cast<double>(cfm_flops(spec.template_h, spec.template_w, spec.search_h, spec.search_w,
                                          spec.feature_channels, spec.widths[0])),
            CostSource::analytic});
  for (const auto& cfg : all_candidates(spec)) {
    t.insert({candidate_cost_key(spec, cfg), static_cast<double>(block_flops(cfg, spec.search_h, spec.search_w)),
              CostSource::analytic});
  }
  return t;
}

MeasureMode parse_measure_mode(const std::string& name) {
  if (name == "opcount") return MeasureMode::opcount;
  if (name == "walltime") return MeasureMode::walltime;
  throw ConfigError("unknown cost mode '" + name + "' (expected opcount or walltime)");
}

namespace {

template <class Fn>
double measure_one(MeasureMode mode, std::size_t repetitions, Fn&& forward) {
  if (mode == MeasureMode::opcount) {
    Tape tape;
    forward(tape);
    return static_cast<double>(tape.macs());
  }
  std::vector<double> ms;
  for (std::size_t r = 0; r < repetitions; ++r) {
    Tape tape;
    const auto t0 = std::chrono::steady_clock::now();
    forward(tape);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2), ms.end());
  return ms[ms.size() / 2];
}

}  // namespace

CostTable measure_costs(const SupernetSpec& spec, MeasureMode mode, std::uint64_t seed, std::size_t repetitions) {
  spec.validate();
  if (mode == MeasureMode::walltime && repetitions < 11) {
    throw ConfigError("walltime measurement needs at least 11 repetitions");
  }
  Rng rng(seed);
  CostTable t;
  {
    CfmParams p = init_cfm_params(spec.template_h, spec.template_w, spec.search_h, spec.search_w, spec.widths[0], rng);
    const Tensor ft = Tensor::uniform({spec.template_h, spec.template_w, spec.feature_channels}, 1.0, rng);
    const Tensor fs = Tensor::uniform({spec.search_h, spec.search_w, spec.feature_channels}, 1.0, rng);
    const BBox box{0, 0, spec.template_w, spec.template_h};
    const double cost = measure_one(mode, repetitions, [&](Tape& tape) {
      cfm_forward(tape, tape.variable(ft), tape.variable(fs), box, p);
    });
    t.insert({cfm_cost_key(spec), cost, CostSource::measured});
  }
  for (const auto& cfg : all_candidates(spec)) {
    if (cfg.is_skip) {
      t.insert({candidate_cost_key(spec, cfg), 0.0, CostSource::measured});
      continue;
    }
    BlockParams p = init_block_params(cfg, spec.search_h, spec.search_w, rng);
    const Tensor x = Tensor::uniform({spec.search_h, spec.search_w, cfg.in_channels}, 1.0, rng);
    const double cost = measure_one(mode, repetitions, [&](Tape& tape) {
      wave_mlp_block_forward(tape, tape.variable(x), cfg, p);
    });
    t.insert({candidate_cost_key(spec, cfg), cost, CostSource::measured});
  }
  return t;
}

std::uint64_t patm_opcount(int kernel_size, std::size_t h, std::size_t w, std::size_t c) {
  BlockConfig cfg = BlockConfig::parse("k" + std::to_string(kernel_size) + "_t4", c, c);
  Rng rng(0);
  BlockParams p = init_block_params(cfg, h, w, rng);
  const Tensor x = Tensor::uniform({h, w, c}, 1.0, rng);
  Tape tape;
  patm_forward(tape, tape.variable(x), p.patm);
  return tape.macs();
}

std::vector<double> layer_costs(const SupernetSpec& spec, const BasicLayer& layer, const CostTable& table) {
  std::vector<double> out;
  for (const auto& cfg : layer.candidates) out.push_back(table.cost(candidate_cost_key(spec, cfg)));
  return out;
}

Var layer_expected_cost(Var alpha, std::span<const double> costs) {
  if (alpha.size() != costs.size()) {
    throw DimensionError("layer cost: " + std::to_string(alpha.size()) + " alphas for " +
                         std::to_string(costs.size()) + " costs");
  }
  Tape& tape = alpha.tape();
  return sum(mul(softmax(alpha), tape.constant({costs.size()}, std::vector<double>(costs.begin(), costs.end()))));
}

Var chained_cost_from(Tape& tape, Supernet& net, const CostTable& table, std::size_t start) {
  const auto& spec = net.spec;
  if (start >= spec.block_count()) throw ContractError("chained cost: no block H" + std::to_string(start));
  std::vector<Var> alpha;
  for (auto& a : net.arch.alpha) alpha.push_back(tape.param(a));
  Var beta = tape.param(net.arch.beta);
  auto layer_cost = [&](std::size_t li) { return layer_expected_cost(alpha[li], layer_costs(spec, net.layers[li], table)); };

  std::vector<Var> hat(spec.block_count());
  for (std::size_t i = spec.block_count(); i-- > start;) {
    Var c;
    if (i == 0) {
      c = tape.scalar(table.cost(cfm_cost_key(spec)));
    } else {
      for (std::size_t li : net.ph_layer_indices(i)) c = c.valid() ? add(c, layer_cost(li)) : layer_cost(li);
    }
    const auto out = spec.outgoing_edges(i);
    if (!out.empty()) {
      Var w = softmax(gather(beta, out));
      std::vector<Var> terms;
      for (std::size_t k = 0; k < out.size(); ++k) {
        const std::size_t j = spec.edges()[out[k]].second;
        terms.push_back(add(layer_cost(net.ch_layer_index(i, j)), hat[j]));
      }
      c = add(c, mix(w, terms));
    }
    hat[i] = c;
  }
  return hat[start];
}

Var chained_cost(Tape& tape, Supernet& net, const CostTable& table) { return chained_cost_from(tape, net, table, 0); }

double chained_cost_value(Supernet& net, const CostTable& table) {
  Tape tape;
  return chained_cost(tape, net, table).value()[0];
}

double derived_cost(const SupernetSpec& spec, const DerivedArchitecture& arch, const CostTable& table) {
  arch.check_member(spec);
  double total = table.cost(cfm_cost_key(spec));
  for (const auto& l : arch.layers) {
    std::size_t in = spec.widths[l.block];
    if (l.layer_name[0] == 'C') {
      const auto it = std::find(arch.path.begin(), arch.path.end(), l.block);
      in = spec.widths[*(it - 1)];
    }
    total += table.cost(candidate_cost_key(spec, BlockConfig::parse(l.choice, in, spec.widths[l.block])));
  }
  return total;
}

}  // namespace mcas
