#include "mcas/supernet.hpp"

#include <algorithm>
#include <functional>
#include <set>

#include "mcas/errors.hpp"

namespace mcas {

std::string ChLayerSpec::name() const { return "C" + std::to_string(dest) + std::to_string(dest - source); }

namespace {

std::vector<std::string> ph_with_skip() {
  auto ids = wave_mlp_variant_ids();
  ids.push_back("skip");
  return ids;
}

std::string block_name(std::size_t i) { return "H" + std::to_string(i); }

}  // namespace

SupernetSpec SupernetSpec::dense(std::vector<std::size_t> widths) {
  SupernetSpec s;
  s.widths = std::move(widths);
  for (std::size_t dest = 1; dest < s.widths.size(); ++dest)
    for (std::size_t src = 0; src < dest; ++src) s.ch_layers.push_back({src, dest, s.widths[src], s.widths[dest]});
  s.ch_candidates = wave_mlp_variant_ids();
  s.ph_candidates = ph_with_skip();
  return s;
}

SupernetSpec SupernetSpec::paper_width() {
  auto s = dense({256, 256, 320, 384});
  s.preset = "paper-width";
  return s;
}

SupernetSpec SupernetSpec::test_width() {
  auto s = dense({32, 32, 40, 48});
  s.preset = "test-width";
  return s;
}

SupernetSpec SupernetSpec::mini() {
  auto s = dense({8, 8, 12});
  s.preset = "mini";
  s.ch_candidates = {"k3_t4", "k3_t4_dw", "k5_t8"};
  s.ph_candidates = {"k3_t4", "k3_t8_dw", "skip"};
  return s;
}

SupernetSpec SupernetSpec::from_preset(const std::string& name) {
  if (name == "paper-width") return paper_width();
  if (name == "test-width") return test_width();
  if (name == "mini") return mini();
  throw ConfigError("unknown preset '" + name + "' (expected paper-width, test-width or mini)");
}

void SupernetSpec::validate() const {
  if (widths.size() < 2) throw ConfigError("spec needs H0 and at least one harmonization block");
  for (std::size_t i = 0; i < widths.size(); ++i)
    if (widths[i] == 0) throw ConfigError("width of " + block_name(i) + " must be positive");
  if (ph_layers_per_block == 0) throw ConfigError("ph_layers_per_block must be positive");
  if (template_h == 0 || template_w == 0 || search_h == 0 || search_w == 0 || feature_channels == 0) {
    throw ConfigError("feature grid sizes and channels must be positive");
  }
  if (ch_candidates.empty() || ph_candidates.empty()) throw ConfigError("candidate sets must be non-empty");
  auto check_set = [](const std::vector<std::string>& ids, bool allow_skip, const char* what) {
    std::set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) throw ConfigError(std::string(what) + " candidate '" + id + "' listed twice");
      if (id == "skip") {
        if (!allow_skip) throw ConfigError(std::string(what) + " candidates cannot include skip");
        continue;
      }
      BlockConfig::parse(id, 1, 1);
    }
  };
  check_set(ch_candidates, false, "CH");
  check_set(ph_candidates, true, "PH");

  std::set<std::pair<std::size_t, std::size_t>> covered;
  for (const auto& ch : ch_layers) {
    if (ch.dest >= widths.size() || ch.source >= ch.dest) {
      throw ConfigError("CH layer " + std::to_string(ch.source) + "->" + std::to_string(ch.dest) +
                        " is not a forward edge of this topology");
    }
    if (!covered.insert({ch.source, ch.dest}).second) throw ConfigError("duplicate CH layer " + ch.name());
    if (ch.in_channels != widths[ch.source] || ch.out_channels != widths[ch.dest]) {
      throw ConfigError("CH layer " + ch.name() + " is (" + std::to_string(ch.in_channels) + "," +
                        std::to_string(ch.out_channels) + ") but " + block_name(ch.source) + "->" +
                        block_name(ch.dest) + " requires (" + std::to_string(widths[ch.source]) + "," +
                        std::to_string(widths[ch.dest]) + ")");
    }
  }
  for (const auto& [src, dest] : edges()) {
    if (!covered.count({src, dest})) {
      throw ConfigError("edge " + block_name(src) + "->" + block_name(dest) + " has no CH layer");
    }
  }
}

std::vector<std::pair<std::size_t, std::size_t>> SupernetSpec::edges() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t src = 0; src < widths.size(); ++src)
    for (std::size_t dest = src + 1; dest < widths.size(); ++dest) out.emplace_back(src, dest);
  return out;
}

std::size_t SupernetSpec::edge_index(std::size_t source, std::size_t dest) const {
  const auto e = edges();
  for (std::size_t i = 0; i < e.size(); ++i)
    if (e[i].first == source && e[i].second == dest) return i;
  throw LookupError("no edge " + block_name(source) + "->" + block_name(dest));
}

std::vector<std::size_t> SupernetSpec::outgoing_edges(std::size_t source) const {
  std::vector<std::size_t> out;
  const auto e = edges();
  for (std::size_t i = 0; i < e.size(); ++i)
    if (e[i].first == source) out.push_back(i);
  return out;
}

std::vector<std::size_t> SupernetSpec::incoming_sources(std::size_t dest) const {
  std::vector<std::size_t> out;
  for (std::size_t src = 0; src < dest && dest < widths.size(); ++src) out.push_back(src);
  return out;
}

const ChLayerSpec& SupernetSpec::ch_layer(std::size_t source, std::size_t dest) const {
  for (const auto& ch : ch_layers)
    if (ch.source == source && ch.dest == dest) return ch;
  throw LookupError("no CH layer for " + block_name(source) + "->" + block_name(dest));
}

SupernetSpec SupernetSpec::without_last_block() const {
  if (widths.size() <= 2) throw ConfigError("cannot drop the only harmonization block");
  SupernetSpec s = *this;
  s.widths.pop_back();
  const std::size_t last = widths.size() - 1;
  std::erase_if(s.ch_layers, [last](const ChLayerSpec& ch) { return ch.dest == last; });
  return s;
}

bool SupernetSpec::is_reference_topology() const {
  if (block_count() != 4) return false;
  if (ph_layers_per_block != 3 || ch_candidates.size() != 12 || ph_candidates.size() != 13) return false;
  try {
    validate();
  } catch (const ConfigError&) {
    return false;
  }
  return true;
}

std::vector<Tensor*> ArchParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& a : alpha) out.push_back(&a);
  out.push_back(&beta);
  return out;
}

std::size_t ArchParams::alpha_count() const {
  std::size_t n = 0;
  for (const auto& a : alpha) n += a.size();
  return n;
}

std::size_t Supernet::ch_layer_index(std::size_t source, std::size_t dest) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].is_ch && layers[i].block == dest && layers[i].source == source) return i;
  throw LookupError("no CH layer for " + block_name(source) + "->" + block_name(dest));
}

std::vector<std::size_t> Supernet::ph_layer_indices(std::size_t block) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (!layers[i].is_ch && layers[i].block == block) out.push_back(i);
  return out;
}

std::size_t Supernet::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return i;
  throw LookupError("no basic layer named '" + name + "'");
}

std::size_t Supernet::ch_layer_count() const {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const auto& l) { return l.is_ch; }));
}

std::size_t Supernet::ph_layer_count() const { return layers.size() - ch_layer_count(); }

std::vector<Tensor*> Supernet::weight_tensors() {
  std::vector<Tensor*> out = cfm.tensors();
  for (auto& layer : layers)
    for (auto& p : layer.params)
      for (Tensor* t : p.tensors()) out.push_back(t);
  return out;
}

Supernet build_supernet(const SupernetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Supernet net;
  net.spec = spec;
  net.cfm = init_cfm_params(spec.template_h, spec.template_w, spec.search_h, spec.search_w, spec.widths[0], rng);
  auto add_layer = [&](BasicLayer layer, const std::vector<std::string>& ids, std::size_t in, std::size_t out) {
    for (const auto& id : ids) {
      layer.candidates.push_back(BlockConfig::parse(id, in, out));
      layer.params.push_back(init_block_params(layer.candidates.back(), spec.search_h, spec.search_w, rng));
    }
    net.arch.alpha.push_back(Tensor::zeros({ids.size()}, true));
    net.layers.push_back(std::move(layer));
  };
  for (std::size_t dest = 1; dest < spec.block_count(); ++dest) {
    for (std::size_t src : spec.incoming_sources(dest)) {
      const auto& ch = spec.ch_layer(src, dest);
      BasicLayer layer;
      layer.name = ch.name();
      layer.block = dest;
      layer.is_ch = true;
      layer.source = src;
      add_layer(std::move(layer), spec.ch_candidates, ch.in_channels, ch.out_channels);
    }
    for (std::size_t j = 1; j <= spec.ph_layers_per_block; ++j) {
      BasicLayer layer;
      layer.name = "P" + std::to_string(dest) + std::to_string(j);
      layer.block = dest;
      layer.ph_index = j;
      add_layer(std::move(layer), spec.ph_candidates, spec.widths[dest], spec.widths[dest]);
    }
  }
  net.arch.beta = Tensor::zeros({spec.edges().size()}, true);
  return net;
}

Var relaxed_mixture(Var alpha, std::span<const Var> outputs) {
  if (alpha.size() != outputs.size()) {
    throw DimensionError("relaxed mixture: " + std::to_string(alpha.size()) + " alphas for " +
                         std::to_string(outputs.size()) + " candidates");
  }
  return mix(softmax(alpha), outputs);
}

Var relaxed_basic_layer_output(Tape& tape, BasicLayer& layer, Var input, Var alpha) {
  const std::size_t in = layer.candidates.front().in_channels;
  if (input.shape().empty() || input.shape().back() != in) {
    throw DimensionError("layer " + layer.name + ": input " + shape_string(input.shape()) + " but layer expects width " +
                         std::to_string(in));
  }
  std::vector<Var> outs;
  outs.reserve(layer.candidates.size());
  for (std::size_t o = 0; o < layer.candidates.size(); ++o) {
    outs.push_back(candidate_forward(tape, input, layer.candidates[o], layer.params[o]));
  }
  return relaxed_mixture(alpha, outs);
}

std::vector<double> edge_weight_values(const SupernetSpec& spec, std::span<const double> beta) {
  const auto e = spec.edges();
  if (beta.size() != e.size()) {
    throw DimensionError("beta has " + std::to_string(beta.size()) + " entries for " + std::to_string(e.size()) +
                         " edges");
  }
  std::vector<double> w(e.size(), 0.0);
  for (std::size_t src = 0; src < spec.block_count(); ++src) {
    const auto out = spec.outgoing_edges(src);
    if (out.empty()) continue;
    std::vector<double> b;
    for (std::size_t idx : out) b.push_back(beta[idx]);
    const auto s = softmax_values(b);
    for (std::size_t k = 0; k < out.size(); ++k) w[out[k]] = s[k];
  }
  return w;
}

Var edge_weight(const SupernetSpec& spec, Var beta, std::size_t source, std::size_t dest) {
  const auto out = spec.outgoing_edges(source);
  const std::size_t target = spec.edge_index(source, dest);
  const auto pos = static_cast<std::size_t>(std::find(out.begin(), out.end(), target) - out.begin());
  return element(softmax(gather(beta, out)), pos);
}

Var relaxed_ch_output(Tape& tape, Supernet& net, std::size_t dest, std::span<const Var> features,
                      std::span<const Var> alpha, Var beta) {
  std::vector<Var> weights, outs;
  for (std::size_t src : net.spec.incoming_sources(dest)) {
    if (src >= features.size() || !features[src].valid()) {
      throw ContractError(block_name(dest) + ": missing incoming feature from " + block_name(src));
    }
    const std::size_t li = net.ch_layer_index(src, dest);
    outs.push_back(relaxed_basic_layer_output(tape, net.layers[li], features[src], alpha[li]));
    weights.push_back(edge_weight(net.spec, beta, src, dest));
  }
  if (outs.empty()) throw ContractError(block_name(dest) + " has no incoming edges");
  return mix(stack(weights), outs);
}

Var supernet_forward_from_h0(Tape& tape, Supernet& net, Var h0) {
  std::vector<Var> alpha;
  for (auto& a : net.arch.alpha) alpha.push_back(tape.param(a));
  Var beta = tape.param(net.arch.beta);
  std::vector<Var> features(net.spec.block_count());
  features[0] = h0;
  for (std::size_t i = 1; i < net.spec.block_count(); ++i) {
    Var x = relaxed_ch_output(tape, net, i, features, alpha, beta);
    for (std::size_t li : net.ph_layer_indices(i)) x = relaxed_basic_layer_output(tape, net.layers[li], x, alpha[li]);
    features[i] = x;
  }
  return features.back();
}

Var supernet_forward(Tape& tape, Supernet& net, Var ft, Var fs, const BBox& bbox) {
  const auto& s = net.spec;
  if (fs.shape() != Shape{s.search_h, s.search_w, s.feature_channels} ||
      ft.shape() != Shape{s.template_h, s.template_w, s.feature_channels}) {
    throw DimensionError("supernet: features " + shape_string(ft.shape()) + " / " + shape_string(fs.shape()) +
                         " do not match spec grids");
  }
  Var h0 = reshape(cfm_forward(tape, ft, fs, bbox, net.cfm), {s.search_h, s.search_w, s.widths[0]});
  return supernet_forward_from_h0(tape, net, h0);
}

std::string path_string(const std::vector<std::size_t>& path) {
  std::string s;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) s += "->";
    s += std::to_string(path[i]);
  }
  return s;
}

Enumeration enumerate_architectures(const SupernetSpec& spec) {
  spec.validate();
  std::uint64_t per_block = spec.ch_candidates.size();
  for (std::size_t j = 0; j < spec.ph_layers_per_block; ++j) {
    if (__builtin_mul_overflow(per_block, spec.ph_candidates.size(), &per_block)) {
      throw CapacityError("architecture count overflows 64 bits");
    }
  }
  Enumeration e;
  std::vector<std::size_t> path{0};
  std::function<void(std::uint64_t)> walk = [&](std::uint64_t count) {
    const std::size_t last = path.back();
    for (std::size_t next = last + 1; next < spec.block_count(); ++next) {
      std::uint64_t c = 0;
      if (__builtin_mul_overflow(count, per_block, &c)) throw CapacityError("architecture count overflows 64 bits");
      path.push_back(next);
      e.paths.push_back({path, c});
      walk(c);
      path.pop_back();
    }
  };
  walk(1);
  std::sort(e.paths.begin(), e.paths.end(), [](const PathCount& a, const PathCount& b) {
    if (a.path.back() != b.path.back()) return a.path.back() < b.path.back();
    return a.path < b.path;
  });
  for (const auto& p : e.paths) {
    if (__builtin_add_overflow(e.total, p.count, &e.total)) throw CapacityError("architecture total overflows 64 bits");
  }
  return e;
}

nlohmann::json DerivedArchitecture::to_json() const {
  nlohmann::json j;
  j["path"] = path;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : layers) j["layers"].push_back({{"block", l.block}, {"layer_name", l.layer_name}, {"choice", l.choice}});
  j["tie_breaks"] = tie_breaks;
  j["widths"] = widths;
  return j;
}

DerivedArchitecture DerivedArchitecture::from_json(const nlohmann::json& j) {
  try {
    DerivedArchitecture a;
    a.path = j.at("path").get<std::vector<std::size_t>>();
    for (const auto& l : j.at("layers")) {
      a.layers.push_back({l.at("block").get<std::size_t>(), l.at("layer_name").get<std::string>(),
                          l.at("choice").get<std::string>()});
    }
    if (j.contains("tie_breaks")) a.tie_breaks = j.at("tie_breaks").get<std::vector<std::string>>();
    if (j.contains("widths")) a.widths = j.at("widths").get<std::vector<std::size_t>>();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed architecture document: ") + e.what());
  }
}

void DerivedArchitecture::check_member(const SupernetSpec& spec) const {
  if (path.size() < 2 || path.front() != 0) throw ContractError("path must start at H0 and reach a harmonization block");
  std::vector<DerivedLayer> expected;
  for (std::size_t k = 1; k < path.size(); ++k) {
    if (path[k] <= path[k - 1] || path[k] >= spec.block_count()) {
      throw ContractError("path " + path_string(path) + " is not a forward path of this topology");
    }
    const std::size_t i = path[k];
    expected.push_back({i, spec.ch_layer(path[k - 1], i).name(), ""});
    for (std::size_t j = 1; j <= spec.ph_layers_per_block; ++j) {
      expected.push_back({i, "P" + std::to_string(i) + std::to_string(j), ""});
    }
  }
  if (layers.size() != expected.size()) {
    throw ContractError("architecture lists " + std::to_string(layers.size()) + " layers, path " + path_string(path) +
                        " needs " + std::to_string(expected.size()));
  }
  for (std::size_t n = 0; n < layers.size(); ++n) {
    if (layers[n].block != expected[n].block || layers[n].layer_name != expected[n].layer_name) {
      throw ContractError("layer " + std::to_string(n) + " should be " + expected[n].layer_name + " of H" +
                          std::to_string(expected[n].block) + ", got " + layers[n].layer_name);
    }
    const auto& pool = layers[n].layer_name[0] == 'C' ? spec.ch_candidates : spec.ph_candidates;
    if (std::find(pool.begin(), pool.end(), layers[n].choice) == pool.end()) {
      throw ContractError("layer " + layers[n].layer_name + ": '" + layers[n].choice + "' is not a candidate");
    }
  }
  if (!widths.empty()) {
    for (std::size_t k = 0; k < path.size(); ++k) {
      if (k >= widths.size() || widths[k] != spec.widths[path[k]]) throw ContractError("architecture widths disagree with spec");
    }
  }
}

DerivedArchitecture derive_architecture(const SupernetSpec& spec, const std::vector<BasicLayer>& layers,
                                        const ArchParams& arch) {
  if (arch.beta.size() != spec.edges().size() || arch.alpha.size() != layers.size()) {
    throw DimensionError("architecture parameters do not match the supernet layout");
  }
  DerivedArchitecture out;
  std::vector<std::size_t> path{spec.terminal()};
  while (path.front() != 0) {
    const std::size_t dest = path.front();
    const auto sources = spec.incoming_sources(dest);
    std::size_t best = sources.front();
    double best_v = arch.beta[spec.edge_index(best, dest)];
    std::vector<std::size_t> tied{best};
    for (std::size_t n = 1; n < sources.size(); ++n) {
      const double v = arch.beta[spec.edge_index(sources[n], dest)];
      if (v > best_v) {
        best = sources[n];
        best_v = v;
        tied = {best};
      } else if (v == best_v) {
        tied.push_back(sources[n]);
      }
    }
    if (tied.size() > 1) {
      std::string names;
      for (std::size_t t : tied) names += (names.empty() ? "" : ",") + block_name(t);
      out.tie_breaks.push_back(block_name(dest) + " incoming beta tie among " + names + ": chose " + block_name(best));
    }
    path.insert(path.begin(), best);
  }
  auto pick = [&](const std::string& name) {
    std::size_t li = layers.size();
    for (std::size_t n = 0; n < layers.size(); ++n)
      if (layers[n].name == name) li = n;
    if (li == layers.size()) throw LookupError("no basic layer named '" + name + "'");
    const Tensor& a = arch.alpha[li];
    std::size_t best = 0;
    std::vector<std::size_t> tied{0};
    for (std::size_t o = 1; o < a.size(); ++o) {
      if (a[o] > a[best]) {
        best = o;
        tied = {o};
      } else if (a[o] == a[best]) {
        tied.push_back(o);
      }
    }
    const std::string choice = layers[li].candidates[best].id();
    if (tied.size() > 1) {
      std::string names;
      for (std::size_t t : tied) names += (names.empty() ? "" : ",") + layers[li].candidates[t].id();
      out.tie_breaks.push_back(name + " alpha tie among " + names + ": chose " + choice);
    }
    return choice;
  };
  for (std::size_t k = 1; k < path.size(); ++k) {
    const std::size_t i = path[k];
    const std::string ch = spec.ch_layer(path[k - 1], i).name();
    out.layers.push_back({i, ch, pick(ch)});
    for (std::size_t j = 1; j <= spec.ph_layers_per_block; ++j) {
      const std::string ph = "P" + std::to_string(i) + std::to_string(j);
      out.layers.push_back({i, ph, pick(ph)});
    }
  }
  out.path = path;
  for (std::size_t b : path) out.widths.push_back(spec.widths[b]);
  return out;
}

DerivedArchitecture derive_architecture(const Supernet& net) { return derive_architecture(net.spec, net.layers, net.arch); }

namespace {

BlockConfig derived_config(const SupernetSpec& spec, const DerivedArchitecture& arch, std::size_t n) {
  const auto& l = arch.layers[n];
  if (l.layer_name[0] == 'C') {
    const auto it = std::find(arch.path.begin(), arch.path.end(), l.block);
    const std::size_t src = *(it - 1);
    return BlockConfig::parse(l.choice, spec.widths[src], spec.widths[l.block]);
  }
  return BlockConfig::parse(l.choice, spec.widths[l.block], spec.widths[l.block]);
}

}  // namespace

DerivedNetwork DerivedNetwork::build(const SupernetSpec& spec, const DerivedArchitecture& arch, std::uint64_t seed) {
  spec.validate();
  arch.check_member(spec);
  Rng rng(seed);
  DerivedNetwork d;
  d.spec = spec;
  d.arch = arch;
  d.cfm = init_cfm_params(spec.template_h, spec.template_w, spec.search_h, spec.search_w, spec.widths[0], rng);
  for (std::size_t n = 0; n < arch.layers.size(); ++n) {
    Layer layer{arch.layers[n].layer_name, derived_config(spec, arch, n), {}};
    layer.params = init_block_params(layer.config, spec.search_h, spec.search_w, rng);
    d.layers.push_back(std::move(layer));
  }
  return d;
}

DerivedNetwork DerivedNetwork::from_supernet(const Supernet& net, const DerivedArchitecture& arch) {
  arch.check_member(net.spec);
  DerivedNetwork d;
  d.spec = net.spec;
  d.arch = arch;
  d.cfm = net.cfm;
  for (std::size_t n = 0; n < arch.layers.size(); ++n) {
    const BasicLayer& src = net.layers[net.layer_index(arch.layers[n].layer_name)];
    std::size_t o = 0;
    while (o < src.candidates.size() && src.candidates[o].id() != arch.layers[n].choice) ++o;
    if (o == src.candidates.size()) throw LookupError("candidate '" + arch.layers[n].choice + "' not in " + src.name);
    d.layers.push_back({src.name, src.candidates[o], src.params[o]});
  }
  return d;
}

Var DerivedNetwork::forward(Tape& tape, Var ft, Var fs, const BBox& bbox) {
  Var x = reshape(cfm_forward(tape, ft, fs, bbox, cfm), {spec.search_h, spec.search_w, spec.widths[0]});
  for (auto& layer : layers) x = candidate_forward(tape, x, layer.config, layer.params);
  return x;
}

std::vector<Tensor*> DerivedNetwork::tensors() {
  std::vector<Tensor*> out = cfm.tensors();
  for (auto& layer : layers)
    for (Tensor* t : layer.params.tensors()) out.push_back(t);
  return out;
}

}  // namespace mcas
