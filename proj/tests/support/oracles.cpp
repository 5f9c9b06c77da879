#include "oracles.hpp"

#include <cmath>
#include <limits>

namespace mcas::oracle {

namespace {

std::vector<double> plain_softmax(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  std::vector<double> out(v.size());
  double z = 0;
  for (std::size_t i = 0; i < v.size(); ++i) z += out[i] = std::exp(v[i] - m);
  for (double& x : out) x /= z;
  return out;
}

void extend(const SupernetSpec& spec, std::vector<std::size_t>& cur, std::vector<std::vector<std::size_t>>& out) {
  if (cur.back() == spec.terminal()) {
    out.push_back(cur);
    return;
  }
  for (std::size_t next = cur.back() + 1; next <= spec.terminal(); ++next) {
    cur.push_back(next);
    extend(spec, cur, out);
    cur.pop_back();
  }
}

// Layer indices (into net.layers) retained along a path, in derivation order.
std::vector<std::size_t> path_layers(const Supernet& net, const std::vector<std::size_t>& path) {
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k < path.size(); ++k) {
    out.push_back(net.ch_layer_index(path[k - 1], path[k]));
    for (std::size_t li : net.ph_layer_indices(path[k])) out.push_back(li);
  }
  return out;
}

double candidate_cost(const Supernet& net, const CostTable& table, std::size_t layer, std::size_t choice) {
  return table.cost(candidate_cost_key(net.spec, net.layers[layer].candidates[choice]));
}

// Calls fn(choices) for every assignment of candidates to `layers`.
template <class Fn>
void for_each_assignment(const Supernet& net, const std::vector<std::size_t>& layers, Fn&& fn) {
  std::vector<std::size_t> choice(layers.size(), 0);
  while (true) {
    fn(choice);
    std::size_t k = 0;
    while (k < layers.size()) {
      if (++choice[k] < net.layers[layers[k]].candidates.size()) break;
      choice[k] = 0;
      ++k;
    }
    if (k == layers.size()) return;
  }
}

}  // namespace

std::vector<std::vector<std::size_t>> terminal_paths(const SupernetSpec& spec) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur{0};
  extend(spec, cur, out);
  return out;
}

double exhaustive_expected_cost(const Supernet& net, const CostTable& table) {
  const auto& spec = net.spec;
  const auto edges = spec.edges();
  const double cfm = table.cost(cfm_cost_key(spec));
  double total = 0;
  for (const auto& path : terminal_paths(spec)) {
    double p_path = 1;
    for (std::size_t k = 1; k < path.size(); ++k) {
      std::vector<double> logits;
      std::size_t pick = 0;
      for (std::size_t e = 0; e < edges.size(); ++e) {
        if (edges[e].first != path[k - 1]) continue;
        if (edges[e].second == path[k]) pick = logits.size();
        logits.push_back(net.arch.beta[e]);
      }
      p_path *= plain_softmax(logits)[pick];
    }
    const auto layers = path_layers(net, path);
    std::vector<std::vector<double>> probs;
    for (std::size_t li : layers) probs.push_back(plain_softmax(net.arch.alpha[li].data));
    for_each_assignment(net, layers, [&](const std::vector<std::size_t>& choice) {
      double p = p_path, cost = cfm;
      for (std::size_t k = 0; k < layers.size(); ++k) {
        p *= probs[k][choice[k]];
        cost += candidate_cost(net, table, layers[k], choice[k]);
      }
      total += p * cost;
    });
  }
  return total;
}

MinCost min_cost_architecture(const Supernet& net, const CostTable& table) {
  const auto& spec = net.spec;
  const double cfm = table.cost(cfm_cost_key(spec));
  MinCost best;
  best.cost = std::numeric_limits<double>::infinity();
  for (const auto& path : terminal_paths(spec)) {
    const auto layers = path_layers(net, path);
    for_each_assignment(net, layers, [&](const std::vector<std::size_t>& choice) {
      double cost = cfm;
      for (std::size_t k = 0; k < layers.size(); ++k) cost += candidate_cost(net, table, layers[k], choice[k]);
      if (cost < best.cost) {
        best.cost = cost;
        best.minimizers = 1;
        best.arch = DerivedArchitecture{};
        best.arch.path = path;
        for (std::size_t b : path) best.arch.widths.push_back(spec.widths[b]);
        for (std::size_t k = 0; k < layers.size(); ++k) {
          const auto& l = net.layers[layers[k]];
          best.arch.layers.push_back({l.block, l.name, l.candidates[choice[k]].id()});
        }
      } else if (cost == best.cost) {
        ++best.minimizers;
      }
    });
  }
  return best;
}

void saturate(Supernet& net, const DerivedArchitecture& arch, double gap) {
  for (Tensor* t : net.arch_tensors()) std::fill(t->data.begin(), t->data.end(), 0.0);
  for (std::size_t k = 1; k < arch.path.size(); ++k) net.arch.beta[net.spec.edge_index(arch.path[k - 1], arch.path[k])] = gap;
  for (const auto& l : arch.layers) {
    const std::size_t li = net.layer_index(l.layer_name);
    const auto& cands = net.layers[li].candidates;
    for (std::size_t o = 0; o < cands.size(); ++o)
      if (cands[o].id() == l.choice) net.arch.alpha[li][o] = gap;
  }
}

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m, std::size_t k,
                           std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

std::vector<double> conv_same(const Tensor& x, const Tensor& w, bool depthwise) {
  const std::size_t h = x.shape[0], wd = x.shape[1], cin = x.shape[2];
  const std::size_t k = w.shape[0];
  const std::size_t cout = depthwise ? cin : w.shape[3];
  const long pad = static_cast<long>(k / 2);
  std::vector<double> out(h * wd * cout, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < wd; ++xx)
      for (std::size_t co = 0; co < cout; ++co) {
        double s = 0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const long sy = static_cast<long>(y + dy) - pad, sx = static_cast<long>(xx + dx) - pad;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(wd)) continue;
            const std::size_t base = (static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * cin;
            if (depthwise) {
              s += x.data[base + co] * w.data[(dy * k + dx) * cin + co];
            } else {
              for (std::size_t ci = 0; ci < cin; ++ci) s += x.data[base + ci] * w.data[((dy * k + dx) * cin + ci) * cout + co];
            }
          }
        out[(y * wd + xx) * cout + co] = s;
      }
  return out;
}

}  // namespace mcas::oracle
