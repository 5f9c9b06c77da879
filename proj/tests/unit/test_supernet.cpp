#include <cmath>

#include "doctest.h"
#include "mcas/errors.hpp"
#include "mcas/supernet.hpp"
#include "mcas/gradcheck.hpp"
#include "oracles.hpp"

using namespace mcas;

namespace {

std::vector<double> values(Var v) { return {v.value().begin(), v.value().end()}; }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

SupernetSpec small_grid(SupernetSpec s, std::size_t n) {
  s.template_h = s.template_w = 2;
  s.search_h = s.search_w = n;
  s.feature_channels = 4;
  return s;
}

std::vector<const Tensor*> all_tensors(Supernet& net) {
  std::vector<const Tensor*> out;
  for (Tensor* t : net.weight_tensors()) out.push_back(t);
  for (Tensor* t : net.arch_tensors()) out.push_back(t);
  return out;
}

}  // namespace

TEST_SUITE("supernet") {
  TEST_CASE("reference topology structure") {
    const SupernetSpec wide = SupernetSpec::paper_width();
    CHECK_NOTHROW(wide.validate());
    CHECK(wide.is_reference_topology());
    CHECK(wide.widths == std::vector<std::size_t>{256, 256, 320, 384});
    CHECK(wide.edges().size() == 6);
    CHECK(wide.ch_layer(0, 2).name() == "C22");
    CHECK(wide.ch_layer(1, 2).in_channels == 256);
    CHECK(wide.ch_layer(1, 2).out_channels == 320);
    CHECK(wide.ch_layer(2, 3).in_channels == 320);
    CHECK(wide.ch_layer(2, 3).out_channels == 384);
    CHECK(wide.ch_candidates.size() == 12);
    CHECK(wide.ph_candidates.size() == 13);

    // Same topology at test width: counts only depend on structure.
    Supernet net = build_supernet(SupernetSpec::test_width(), 1);
    CHECK(net.ch_layer_count() == 6);
    CHECK(net.ph_layer_count() == 9);
    CHECK(net.arch.beta.size() == 6);
    CHECK(net.arch.alpha_count() == 6 * 12 + 9 * 13);
    CHECK(net.arch.alpha_count() == 189);
    for (Tensor* t : net.arch_tensors())
      for (double v : t->data) CHECK(v == 0.0);
  }

  TEST_CASE("altered CH pair is rejected") {
    SupernetSpec s = SupernetSpec::paper_width();
    for (auto& ch : s.ch_layers)
      if (ch.source == 0 && ch.dest == 2) ch.out_channels = 321;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK_THROWS_AS(build_supernet(s, 0), ConfigError);
    SupernetSpec missing = SupernetSpec::test_width();
    missing.ch_layers.pop_back();
    CHECK_THROWS_AS(missing.validate(), ConfigError);
    SupernetSpec skip_ch = SupernetSpec::test_width();
    skip_ch.ch_candidates.push_back("skip");
    CHECK_THROWS_AS(skip_ch.validate(), ConfigError);
  }

  TEST_CASE("build is deterministic per seed") {
    const auto spec = small_grid(SupernetSpec::mini(), 3);
    Supernet a = build_supernet(spec, 5), b = build_supernet(spec, 5), c = build_supernet(spec, 6);
    CHECK(hash_values(all_tensors(a)) == hash_values(all_tensors(b)));
    CHECK(hash_values(all_tensors(a)) != hash_values(all_tensors(c)));
  }

  TEST_CASE("edge weights normalise over the source's outgoing edges") {
    const auto spec = SupernetSpec::test_width();
    std::vector<double> beta(6, 0.0);
    auto w = edge_weight_values(spec, beta);
    CHECK(w[spec.edge_index(2, 3)] == 1.0);  // H2 has a single outgoing edge
    CHECK(std::abs(w[spec.edge_index(0, 2)] - 1.0 / 3.0) < 1e-15);
    CHECK(w[spec.edge_index(1, 2)] == 0.5);

    Rng rng(3);
    for (double& b : beta) b = std::uniform_real_distribution<double>(-2, 2)(rng);
    w = edge_weight_values(spec, beta);
    for (std::size_t src = 0; src < 3; ++src) {
      double z = 0;
      for (std::size_t e : spec.outgoing_edges(src)) z += std::exp(beta[e]);
      for (std::size_t e : spec.outgoing_edges(src)) CHECK(std::abs(w[e] - std::exp(beta[e]) / z) < 1e-12);
    }
    Tape tape;
    Var bv = tape.constant({6}, beta);
    for (auto [s, d] : spec.edges()) CHECK(std::abs(values(edge_weight(spec, bv, s, d))[0] - w[spec.edge_index(s, d)]) < 1e-15);
  }

  TEST_CASE("relaxed mixture examples") {
    Tape tape;
    std::vector<Var> outs;
    double mean = 0;
    for (int k = 0; k < 13; ++k) {
      outs.push_back(tape.constant(Tensor::filled({2, 2}, 0.5 * k)));
      mean += 0.5 * k / 13;
    }
    for (double v : values(relaxed_mixture(tape.constant(Tensor::zeros({13})), outs))) CHECK(std::abs(v - mean) < 1e-14);

    std::vector<double> sat(13, 0.0);
    sat[4] = 1e6;
    for (double v : values(relaxed_mixture(tape.constant({13}, sat), outs))) CHECK(std::abs(v - 2.0) < 1e-9);

    Rng rng(9);
    Tensor a = Tensor::uniform({3}, 2.0, rng);
    std::vector<Var> three;
    std::vector<Tensor> raw;
    for (int k = 0; k < 3; ++k) {
      raw.push_back(Tensor::uniform({4}, 1.0, rng));
      three.push_back(tape.constant(raw.back()));
    }
    auto p = softmax_values(a.data);
    auto got = values(relaxed_mixture(tape.constant(a), three));
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::abs(got[i] - (p[0] * raw[0][i] + p[1] * raw[1][i] + p[2] * raw[2][i])) < 1e-12);
  }

  TEST_CASE("basic layer saturation and width check") {
    const auto spec = small_grid(SupernetSpec::test_width(), 3);
    Supernet net = build_supernet(spec, 2);
    BasicLayer& layer = net.layers[net.layer_index("P21")];
    Rng rng(4);
    Tensor x = Tensor::uniform({3, 3, 40}, 1.0, rng);
    for (std::size_t o : {std::size_t(0), std::size_t(5), layer.candidates.size() - 1}) {
      std::vector<double> alpha(layer.candidates.size(), 0.0);
      alpha[o] = 40.0;
      Tape tape;
      Var xi = tape.constant(x);
      auto mixed = values(relaxed_basic_layer_output(tape, layer, xi, tape.constant({alpha.size()}, alpha)));
      auto single = values(candidate_forward(tape, xi, layer.candidates[o], layer.params[o]));
      CHECK(max_abs_diff(mixed, single) < 1e-9);
    }
    Tape tape;
    CHECK_THROWS_AS(relaxed_basic_layer_output(tape, layer, tape.constant(Tensor::zeros({3, 3, 32})),
                                               tape.constant(Tensor::zeros({13}))),
                    DimensionError);
  }

  TEST_CASE("supernet forward shape and gradient reach") {
    const auto spec = small_grid(SupernetSpec::test_width(), 4);
    Supernet net = build_supernet(spec, 3);
    Rng rng(5);
    for (Tensor* t : net.arch_tensors())
      for (double& v : t->data) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    for (Tensor* t : net.weight_tensors()) t->set_grad_enabled(true);
    for (Tensor* t : net.arch_tensors()) t->set_grad_enabled(true);
    Tensor ft = Tensor::uniform({2, 2, 4}, 1.0, rng), fs = Tensor::uniform({4, 4, 4}, 1.0, rng);
    Tape tape;
    Var out = supernet_forward(tape, net, tape.constant(ft), tape.constant(fs), {0, 0, 2, 1});
    CHECK(out.shape() == Shape{4, 4, 48});
    tape.backward(random_projection(out, 1));
    tape.accumulate_param_grads();
    std::size_t dead_weights = 0;
    for (Tensor* t : net.weight_tensors()) {
      bool any = false;
      for (double g : t->grad) any = any || g != 0.0;
      dead_weights += !any;
    }
    CHECK(dead_weights == 0);
    for (const Tensor& a : net.arch.alpha)
      for (double g : a.grad) CHECK(g != 0.0);
    for (auto [s, d] : spec.edges()) {
      INFO(s << "->" << d);
      // H2 has a single outgoing edge, so its weight is the constant 1.
      if (s == 2) CHECK(net.arch.beta.grad[spec.edge_index(s, d)] == 0.0);
      else CHECK(net.arch.beta.grad[spec.edge_index(s, d)] != 0.0);
    }
  }

  TEST_CASE("saturated full path matches the derived network") {
    const auto spec = small_grid(SupernetSpec::test_width(), 3);
    Supernet net = build_supernet(spec, 4);
    DerivedArchitecture arch;
    arch.path = {0, 1, 2, 3};
    arch.widths = {32, 32, 40, 48};
    const char* ch[] = {"k3_t4", "k5_t8_dw", "k7_t4"};
    for (std::size_t i = 1; i <= 3; ++i) {
      arch.layers.push_back({i, spec.ch_layer(i - 1, i).name(), ch[i - 1]});
      for (std::size_t j = 1; j <= 3; ++j) arch.layers.push_back({i, "P" + std::to_string(i) + std::to_string(j), "skip"});
    }
    arch.check_member(spec);
    oracle::saturate(net, arch, 60.0);
    for (std::size_t e = 0; e < 6; ++e)
      if (net.arch.beta[e] == 0.0) net.arch.beta[e] = -60.0;
    CHECK(derive_architecture(net) == arch);
    DerivedNetwork derived = DerivedNetwork::from_supernet(net, arch);
    Rng rng(6);
    Tensor ft = Tensor::uniform({2, 2, 4}, 1.0, rng), fs = Tensor::uniform({3, 3, 4}, 1.0, rng);
    Tape tape;
    auto relaxed = values(supernet_forward(tape, net, tape.constant(ft), tape.constant(fs), {1, 0, 2, 2}));
    auto discrete = values(derived.forward(tape, tape.constant(ft), tape.constant(fs), {1, 0, 2, 2}));
    CHECK(max_abs_diff(relaxed, discrete) < 1e-9);

  }

  TEST_CASE("enumeration reproduces the reference counts") {
    const Enumeration e = enumerate_architectures(SupernetSpec::paper_width());
    REQUIRE(e.paths.size() == 7);
    const std::pair<const char*, std::uint64_t> want[] = {
        {"0->1", 26364ULL},           {"0->1->2", 695060496ULL}, {"0->2", 26364ULL}, {"0->1->2->3", 18324574916544ULL},
        {"0->1->3", 695060496ULL}, {"0->2->3", 695060496ULL}, {"0->3", 26364ULL}};
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(path_string(e.paths[i].path) == want[i].first);
      CHECK(e.paths[i].count == want[i].second);
    }
    CHECK(e.total == 18326660177124ULL);
    CHECK(enumerate_architectures(SupernetSpec::test_width()).total == e.total);
    const Enumeration three = enumerate_architectures(SupernetSpec::paper_width().without_last_block());
    CHECK(three.paths.size() == 3);
    CHECK(three.total == 26364ULL * 2 + 695060496ULL);
    const Enumeration mini = enumerate_architectures(SupernetSpec::mini());
    CHECK(mini.total == 81 + 81 + 81 * 81);
  }

  TEST_CASE("derivation follows argmax and records ties") {
    const auto spec = small_grid(SupernetSpec::test_width(), 2);
    Supernet net = build_supernet(spec, 7);
    DerivedArchitecture uniform = derive_architecture(net);
    CHECK(uniform.path == std::vector<std::size_t>{0, 3});
    CHECK(!uniform.tie_breaks.empty());
    CHECK(uniform.layers.front().choice == "k3_t4");

    net.arch.beta[spec.edge_index(0, 1)] = 1;
    net.arch.beta[spec.edge_index(1, 2)] = 1;
    net.arch.beta[spec.edge_index(2, 3)] = 1;
    CHECK(derive_architecture(net).path == std::vector<std::size_t>{0, 1, 2, 3});
    std::fill(net.arch.beta.data.begin(), net.arch.beta.data.end(), 0.0);
    net.arch.beta[spec.edge_index(0, 3)] = 2;
    net.arch.beta[spec.edge_index(1, 3)] = 1;
    net.arch.beta[spec.edge_index(2, 3)] = 1;
    auto a = derive_architecture(net);
    CHECK(a.path == std::vector<std::size_t>{0, 3});
    CHECK(a.layers.size() == 4);
    CHECK(a.layers[0].layer_name == "C33");

    Rng rng(8);
    for (int draw = 0; draw < 1000; ++draw) {
      for (Tensor* t : net.arch_tensors())
        for (double& v : t->data) v = std::normal_distribution<double>(0, 1)(rng);
      auto d = derive_architecture(net);
      CHECK_NOTHROW(d.check_member(spec));
      CHECK(d.path.back() == 3);
      CHECK(d.tie_breaks.empty());
    }
  }

  TEST_CASE("derived architecture serialisation") {
    const auto spec = small_grid(SupernetSpec::test_width(), 2);
    Supernet net = build_supernet(spec, 1);
    Rng rng(2);
    for (Tensor* t : net.arch_tensors())
      for (double& v : t->data) v = std::normal_distribution<double>(0, 1)(rng);
    auto a = derive_architecture(net);
    auto j = a.to_json();
    CHECK(j.contains("path"));
    CHECK(j.contains("layers"));
    CHECK(j.contains("tie_breaks"));
    auto b = DerivedArchitecture::from_json(j);
    CHECK(a == b);
    CHECK(b.tie_breaks == a.tie_breaks);
    CHECK_THROWS_AS(DerivedArchitecture::from_json(nlohmann::json{{"path", "x"}}), ConfigError);

    auto bad = a;
    bad.layers.back().choice = "k9_t4";
    CHECK_THROWS_AS(bad.check_member(spec), ContractError);
    bad = a;
    bad.layers.front().choice = "skip";  // CH layers have no skip
    CHECK_THROWS_AS(bad.check_member(spec), ContractError);
    bad = a;
    bad.path = {0, 2, 1};
    CHECK_THROWS_AS(bad.check_member(spec), ContractError);
  }

  TEST_CASE("fresh derived network shares nothing with the supernet") {
    const auto spec = small_grid(SupernetSpec::test_width(), 2);
    Supernet net = build_supernet(spec, 1);
    auto arch = derive_architecture(net);
    DerivedNetwork inherited = DerivedNetwork::from_supernet(net, arch);
    DerivedNetwork fresh = DerivedNetwork::build(spec, arch, 99);
    auto ti = inherited.tensors(), tf = fresh.tensors();
    REQUIRE(ti.size() == tf.size());
    CHECK(hash_values(std::vector<const Tensor*>(ti.begin(), ti.end())) !=
          hash_values(std::vector<const Tensor*>(tf.begin(), tf.end())));
    for (std::size_t i = 0; i < ti.size(); ++i) CHECK(ti[i]->shape == tf[i]->shape);
  }
}
