#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "mcas/supernet.hpp"

namespace mcas {

enum class FusionKind {
  conv_fusion,
  cross_attention_fusion,
  cfm,
  standard_cnn_3x3,
  depthwise_cnn,
  transformer_4head,
  wave_mlp,
  skip,
};

FusionKind parse_fusion_kind(const std::string& name);
std::string fusion_kind_name(FusionKind kind);

// h, w: fused map (Hz x Wz) or search grid (Hs x Ws) for the CFM-stage kinds,
// which also read ht, wt. c, c_out: input/output channels.
struct FlopsShape {
  std::size_t h = 0, w = 0;
  std::size_t ht = 0, wt = 0;
  std::size_t c = 0, c_out = 0;
};

// Table-style FLOPs expression for one fusion block, bias terms omitted.
std::uint64_t analytic_flops(FusionKind kind, const FlopsShape& shape);
std::uint64_t analytic_flops(const std::string& kind, const FlopsShape& shape);

// Multiply-accumulates of one full Wave-MLP candidate as implemented:
// projection (when Cin != Cout) + token mixing + phase kernel + channel MLP.
// Skip is 0. Equals the instrumented opcount exactly.
std::uint64_t block_flops(const BlockConfig& config, std::size_t h, std::size_t w);

// MACs of the implemented CFM (the two products plus template pooling).
std::uint64_t cfm_flops(std::size_t ht, std::size_t wt, std::size_t hs, std::size_t ws, std::size_t c,
                        std::size_t c_out);

struct QuadraticFit {
  double a = 0, b = 0, c = 0;  // a x^2 + b x + c
  double r2 = 0;
};

// Least squares over (x, y). Needs at least 6 distinct x values.
QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y);
// Fits analytic_flops(kind) at fixed N = h*w over a channel sweep with C = C'.
QuadraticFit verify_quadratic_scaling(FusionKind kind, std::size_t h, std::size_t w,
                                      const std::vector<std::size_t>& channels);

enum class CostSource { analytic, measured };

struct CostKey {
  std::string config_id;
  std::size_t h = 0, w = 0, cin = 0, cout = 0;
  auto operator<=>(const CostKey&) const = default;
};

struct CostEntry {
  CostKey key;
  double cost = 0;
  CostSource source = CostSource::analytic;
};

class CostTable {
 public:
  void insert(const CostEntry& e);
  const CostEntry& lookup(const CostKey& key) const;  // LookupError when absent
  double cost(const CostKey& key) const { return lookup(key).cost; }
  bool contains(const CostKey& key) const { return entries_.count(key) > 0; }
  std::size_t size() const { return entries_.size(); }
  std::vector<CostEntry> entries() const;

  // Columns: config_id,H,W,Cin,Cout,cost,source
  std::string to_csv() const;
  static CostTable from_csv(const std::string& text);

 private:
  std::map<CostKey, CostEntry> entries_;
};

// Keys used for the CFM and for a basic-layer candidate on spec's search grid.
CostKey cfm_cost_key(const SupernetSpec& spec);
CostKey candidate_cost_key(const SupernetSpec& spec, const BlockConfig& config);

// Analytic table over the CFM plus every candidate of every basic layer.
CostTable analytic_cost_table(const SupernetSpec& spec);

enum class MeasureMode { opcount, walltime };
MeasureMode parse_measure_mode(const std::string& name);

// opcount: instrumented MAC count of one forward. walltime: median of
// `repetitions` (>= 11) forward timings in milliseconds. Skip is 0.
CostTable measure_costs(const SupernetSpec& spec, MeasureMode mode, std::uint64_t seed = 0,
                        std::size_t repetitions = 11);

// Instrumented MACs of PATM alone (token mixing with its phase estimator).
std::uint64_t patm_opcount(int kernel_size, std::size_t h, std::size_t w, std::size_t c);

std::vector<double> layer_costs(const SupernetSpec& spec, const BasicLayer& layer, const CostTable& table);

// softmax(alpha) . costs
Var layer_expected_cost(Var alpha, std::span<const double> costs);

// Expected cost of H_start and everything downstream:
//   c^i = PH^i + sum_j w_ij (CH^ij + c^j),  w_ij = softmax of beta over i's outgoing edges,
// where PH^0 is the fixed CFM cost. chained_cost() is c^0.
Var chained_cost_from(Tape& tape, Supernet& net, const CostTable& table, std::size_t start);
Var chained_cost(Tape& tape, Supernet& net, const CostTable& table);
double chained_cost_value(Supernet& net, const CostTable& table);

// Summed cost of a discrete architecture: CFM plus every retained layer.
double derived_cost(const SupernetSpec& spec, const DerivedArchitecture& arch, const CostTable& table);

}  // namespace mcas
