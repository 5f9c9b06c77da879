#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mcas/cfm.hpp"
#include "mcas/fusion_blocks.hpp"

namespace mcas {

// CH layer C_{dest, dest-source}: maps the output of H_source to the width of H_dest.
struct ChLayerSpec {
  std::size_t source = 0;
  std::size_t dest = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;

  std::string name() const;
};

struct SupernetSpec {
  std::string preset = "custom";
  // widths[0] is H0 (the CFM output); widths[i] is harmonization block H_i.
  std::vector<std::size_t> widths;
  // One entry per edge (source < dest), any order; validate() checks coverage.
  std::vector<ChLayerSpec> ch_layers;
  std::size_t ph_layers_per_block = 3;
  std::vector<std::string> ch_candidates;
  std::vector<std::string> ph_candidates;
  // Feature grids seen by the neck.
  std::size_t template_h = 4, template_w = 4;
  std::size_t search_h = 6, search_w = 6;
  // Channels produced by the stem and consumed by the CFM.
  std::size_t feature_channels = 32;

  static SupernetSpec paper_width();
  static SupernetSpec test_width();
  static SupernetSpec mini();
  static SupernetSpec from_preset(const std::string& name);

  // Dense forward topology over the given widths with CH pairs filled in.
  static SupernetSpec dense(std::vector<std::size_t> widths);

  // ConfigError on any structural violation.
  void validate() const;

  std::size_t block_count() const { return widths.size(); }  // includes H0
  std::size_t terminal() const { return widths.size() - 1; }
  // All (source, dest) pairs, ordered by source then dest. This is the beta order.
  std::vector<std::pair<std::size_t, std::size_t>> edges() const;
  std::size_t edge_index(std::size_t source, std::size_t dest) const;
  std::vector<std::size_t> outgoing_edges(std::size_t source) const;
  std::vector<std::size_t> incoming_sources(std::size_t dest) const;
  const ChLayerSpec& ch_layer(std::size_t source, std::size_t dest) const;

  // Copy with the last harmonization block (and its edges) dropped.
  SupernetSpec without_last_block() const;
  // True for the four-block dense topology with 12 CH and 13 PH candidates and
  // three PH layers per block. Widths do not matter.
  bool is_reference_topology() const;
};

// One searchable slot.
struct BasicLayer {
  std::string name;  // "C32", "P21", ...
  std::size_t block = 0;
  bool is_ch = false;
  std::size_t source = 0;  // CH only
  std::size_t ph_index = 0;  // PH only, 1-based
  std::vector<BlockConfig> candidates;
  std::vector<BlockParams> params;
};

struct ArchParams {
  std::vector<Tensor> alpha;  // one vector per basic layer, in Supernet::layers order
  Tensor beta;                // one entry per edge, SupernetSpec::edges() order

  std::vector<Tensor*> tensors();
  std::size_t alpha_count() const;
};

struct Supernet {
  SupernetSpec spec;
  CfmParams cfm;
  // For each block i >= 1: CH layers in source order, then P_i1..P_i3.
  std::vector<BasicLayer> layers;
  ArchParams arch;

  std::size_t ch_layer_index(std::size_t source, std::size_t dest) const;
  std::vector<std::size_t> ph_layer_indices(std::size_t block) const;
  std::size_t layer_index(const std::string& name) const;

  std::size_t ch_layer_count() const;
  std::size_t ph_layer_count() const;

  // gamma: CFM plus every candidate's weights.
  std::vector<Tensor*> weight_tensors();
  std::vector<Tensor*> arch_tensors() { return arch.tensors(); }
};

// Weights per fusion-block policy, alpha = beta = 0.
Supernet build_supernet(const SupernetSpec& spec, std::uint64_t seed);

// sum_o softmax(alpha)_o * outputs[o].
Var relaxed_mixture(Var alpha, std::span<const Var> outputs);

Var relaxed_basic_layer_output(Tape& tape, BasicLayer& layer, Var input, Var alpha);

// Weight of edge (source -> dest): softmax of beta over source's outgoing edges.
std::vector<double> edge_weight_values(const SupernetSpec& spec, std::span<const double> beta);
Var edge_weight(const SupernetSpec& spec, Var beta, std::size_t source, std::size_t dest);

// features[j] is H_j's output for j < dest (entries for non-sources may be invalid).
Var relaxed_ch_output(Tape& tape, Supernet& net, std::size_t dest, std::span<const Var> features,
                      std::span<const Var> alpha, Var beta);

// Relaxed neck: CFM, then every harmonization block. Returns Hs x Ws x C_terminal.
Var supernet_forward(Tape& tape, Supernet& net, Var ft, Var fs, const BBox& bbox);
// Same, starting from an already computed H0 map (Hs x Ws x C0).
Var supernet_forward_from_h0(Tape& tape, Supernet& net, Var h0);

struct PathCount {
  std::vector<std::size_t> path;
  std::uint64_t count = 0;
};

struct Enumeration {
  std::vector<PathCount> paths;  // ordered by terminal block, then lexicographically
  std::uint64_t total = 0;
};

// Every path from H0 to any block; each traversed block contributes
// |CH candidates| * |PH candidates|^(PH layers).
Enumeration enumerate_architectures(const SupernetSpec& spec);
std::string path_string(const std::vector<std::size_t>& path);

struct DerivedLayer {
  std::size_t block = 0;
  std::string layer_name;
  std::string choice;  // config id or "skip"

  bool operator==(const DerivedLayer&) const = default;
};

struct DerivedArchitecture {
  std::vector<std::size_t> path;
  std::vector<DerivedLayer> layers;
  std::vector<std::string> tie_breaks;
  std::vector<std::size_t> widths;

  nlohmann::json to_json() const;
  static DerivedArchitecture from_json(const nlohmann::json& j);
  // ContractError unless the architecture is a member of spec's enumerated space.
  void check_member(const SupernetSpec& spec) const;
  // Ignores tie_breaks.
  bool operator==(const DerivedArchitecture& o) const {
    return path == o.path && layers == o.layers && widths == o.widths;
  }
};

// Backtracks from the terminal block along max incoming beta; argmax alpha per
// retained layer. Ties go to the lowest index and are listed in tie_breaks.
DerivedArchitecture derive_architecture(const Supernet& net);
DerivedArchitecture derive_architecture(const SupernetSpec& spec, const std::vector<BasicLayer>& layers,
                                        const ArchParams& arch);

// Standalone network for one derived architecture.
struct DerivedNetwork {
  struct Layer {
    std::string name;
    BlockConfig config;
    BlockParams params;
  };
  SupernetSpec spec;
  DerivedArchitecture arch;
  CfmParams cfm;
  std::vector<Layer> layers;  // execution order

  // Fresh initialization; nothing is inherited from a supernet.
  static DerivedNetwork build(const SupernetSpec& spec, const DerivedArchitecture& arch, std::uint64_t seed);
  // Copies the chosen candidates' weights out of a supernet.
  static DerivedNetwork from_supernet(const Supernet& net, const DerivedArchitecture& arch);

  Var forward(Tape& tape, Var ft, Var fs, const BBox& bbox);
  std::vector<Tensor*> tensors();
};

}  // namespace mcas
