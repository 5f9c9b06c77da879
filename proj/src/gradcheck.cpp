#include "mcas/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <tuple>

#include "mcas/cfm.hpp"
#include "mcas/cost_model.hpp"
#include "mcas/errors.hpp"
#include "mcas/fusion_blocks.hpp"
#include "mcas/harness.hpp"
#include "mcas/search.hpp"
#include "mcas/supernet.hpp"

namespace mcas {

namespace {

double eval_scalar(const ScalarFn& fn) {
  Tape tape;
  Var v = fn(tape);
  if (v.size() != 1) throw DimensionError("gradcheck: function must return a scalar, got " + shape_string(v.shape()));
  return v.value()[0];
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= max_coords) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Values bounded away from zero so relu-like kinks stay out of reach of the
// finite-difference step.
Tensor away_from_zero(Shape s, Rng& rng, bool grad = true) {
  Tensor t = Tensor::uniform(std::move(s), 1.0, rng, grad);
  for (double& v : t.data) v = v < 0 ? v - 0.1 : v + 0.1;
  return t;
}

Tensor rand(Shape s, Rng& rng, double bound = 1.0) { return Tensor::uniform(std::move(s), bound, rng, true); }

struct Suite {
  GradCheckOptions options;
  Rng rng;
  std::vector<GradCheckResult> results;

  explicit Suite(const GradCheckOptions& o) : options(o), rng(o.seed ^ 0x9e3779b97f4a7c15ULL) {}

  void run(const std::string& name, const ScalarFn& fn, std::vector<Tensor*> tensors, std::size_t max_coords = 0) {
    GradCheckOptions o = options;
    if (max_coords) o.max_coords = std::min(max_coords, o.max_coords);
    o.seed = options.seed + results.size() + 1;
    results.push_back(check_gradients(name, fn, std::move(tensors), o));
  }

  // Unary op on one random tensor, reduced with a random projection.
  void unary(const std::string& name, Shape s, const std::function<Var(Var)>& op, bool avoid_zero = false) {
    auto t = std::make_shared<Tensor>(avoid_zero ? away_from_zero(s, rng) : rand(s, rng));
    std::uint64_t seed = rng();
    run(name, [t, op, seed](Tape& tape) { return random_projection(op(tape.param(*t)), seed); }, {t.get()});
  }

  void binary(const std::string& name, Shape sa, Shape sb, const std::function<Var(Var, Var)>& op) {
    auto a = std::make_shared<Tensor>(rand(sa, rng));
    auto b = std::make_shared<Tensor>(rand(sb, rng));
    std::uint64_t seed = rng();
    run(name, [a, b, op, seed](Tape& tape) { return random_projection(op(tape.param(*a), tape.param(*b)), seed); },
        {a.get(), b.get()});
  }
};

void tape_ops(Suite& s) {
  s.binary("matmul", {3, 4}, {4, 5}, [](Var a, Var b) { return matmul(a, b); });
  s.unary("transpose", {3, 5}, [](Var a) { return transpose(a); });
  s.binary("add", {2, 3, 4}, {2, 3, 4}, [](Var a, Var b) { return add(a, b); });
  s.binary("sub", {2, 3, 4}, {2, 3, 4}, [](Var a, Var b) { return sub(a, b); });
  s.binary("mul", {2, 3, 4}, {2, 3, 4}, [](Var a, Var b) { return mul(a, b); });
  s.unary("scale", {7}, [](Var a) { return scale(a, -1.7); });
  s.binary("broadcast_add", {3, 2, 4}, {4}, [](Var a, Var b) { return broadcast_add(a, b); });
  s.unary("reshape", {2, 6}, [](Var a) { return reshape(a, {3, 4}); });
  s.unary("sin", {10}, [](Var a) { return sin(a); });
  s.unary("cos", {10}, [](Var a) { return cos(a); });
  s.unary("relu", {10}, [](Var a) { return relu(a); }, true);
  s.unary("gelu", {10}, [](Var a) { return gelu(a); });
  s.unary("sigmoid", {10}, [](Var a) { return sigmoid(a); });
  s.unary("softplus", {10}, [](Var a) { return softplus(a); });
  s.binary("linear", {2, 3, 4}, {4, 5}, [](Var x, Var w) { return linear(x, w); });
  {
    auto x = std::make_shared<Tensor>(rand({6, 3}, s.rng));
    auto w = std::make_shared<Tensor>(rand({3, 2}, s.rng));
    auto b = std::make_shared<Tensor>(rand({2}, s.rng));
    std::uint64_t seed = s.rng();
    s.run("linear_bias",
          [=](Tape& t) { return random_projection(linear(t.param(*x), t.param(*w), t.param(*b)), seed); },
          {x.get(), w.get(), b.get()});
  }
  s.unary("mean_pool", {4, 5, 3}, [](Var a) { return mean_pool(a, 1, 0, 3, 4); });
  s.unary("avg_pool", {4, 6, 3}, [](Var a) { return avg_pool(a, 2); });
  s.binary("conv2d_dense", {4, 5, 3}, {3, 3, 3, 2}, [](Var x, Var w) { return conv2d_same(x, w, false); });
  s.binary("conv2d_depthwise", {5, 4, 3}, {5, 5, 3}, [](Var x, Var w) { return conv2d_same(x, w, true); });
  s.unary("repeat_channels", {2, 3, 3}, [](Var a) { return repeat_channels(a, 4); });
  {
    auto x = std::make_shared<Tensor>(rand({3, 2, 5}, s.rng));
    auto g = std::make_shared<Tensor>(rand({5}, s.rng));
    auto b = std::make_shared<Tensor>(rand({5}, s.rng));
    std::uint64_t seed = s.rng();
    s.run("layer_norm",
          [=](Tape& t) { return random_projection(layer_norm(t.param(*x), t.param(*g), t.param(*b)), seed); },
          {x.get(), g.get(), b.get()});
  }
  s.unary("softmax", {6}, [](Var a) { return softmax(a); });
  s.unary("sum", {3, 4}, [](Var a) { return sum(a); });
  s.unary("mean", {3, 4}, [](Var a) { return mean(a); });
  s.unary("gather", {6}, [](Var a) {
    const std::size_t idx[] = {4, 0, 4, 2};
    return gather(a, idx);
  });
  s.unary("element", {6}, [](Var a) { return element(a, 3); });
  s.unary("stack", {4}, [](Var a) {
    const Var items[] = {element(a, 2), sum(a), element(a, 0)};
    return stack(items);
  });
  {
    auto w = std::make_shared<Tensor>(rand({3}, s.rng));
    std::vector<std::shared_ptr<Tensor>> items;
    for (int k = 0; k < 3; ++k) items.push_back(std::make_shared<Tensor>(rand({2, 4}, s.rng)));
    std::uint64_t seed = s.rng();
    s.run("mix",
          [=](Tape& t) {
            std::vector<Var> v;
            for (auto& it : items) v.push_back(t.param(*it));
            return random_projection(mix(t.param(*w), v), seed);
          },
          {w.get(), items[0].get(), items[1].get(), items[2].get()});
  }
  s.unary("gather_rows", {3, 2, 4}, [](Var a) {
    const std::size_t rows[] = {5, 1, 1, 3};
    return gather_rows(a, rows);
  });
}

void fusion_blocks(Suite& s) {
  for (PatmMode mode : {PatmMode::shared, PatmMode::general}) {
    const char* name = mode == PatmMode::shared ? "patm_shared" : "patm_general";
    BlockConfig cfg = BlockConfig::parse("k3_t4", 4, 4);
    auto p = std::make_shared<BlockParams>(init_block_params(cfg, 3, 3, s.rng));
    auto z = std::make_shared<Tensor>(rand({3, 3, 4}, s.rng));
    if (mode == PatmMode::general) {
      p->patm.embed_shared_as_general();
      // Off-diagonal entries too, so every coordinate is exercised.
      for (double& v : p->patm.mix_cos_general.data) v += 0.05 * std::uniform_real_distribution<double>(-1, 1)(s.rng);
      for (double& v : p->patm.mix_sin_general.data) v += 0.05 * std::uniform_real_distribution<double>(-1, 1)(s.rng);
    }
    std::uint64_t seed = s.rng();
    auto& pt = p->patm;
    std::vector<Tensor*> ts{z.get(), &pt.amplitude, &pt.phase_proj, &pt.phase_kernel};
    if (mode == PatmMode::shared) {
      ts.push_back(&pt.mix_cos);
      ts.push_back(&pt.mix_sin);
    } else {
      ts.push_back(&pt.mix_cos_general);
      ts.push_back(&pt.mix_sin_general);
    }
    s.run(name, [=](Tape& t) { return random_projection(patm_forward(t, t.param(*z), p->patm, mode), seed); }, ts);
  }
  for (auto [id, cin, cout] : {std::tuple{"k3_t4", 4, 4}, std::tuple{"k5_t8_dw", 4, 4}, std::tuple{"k3_t4", 3, 5},
                               std::tuple{"k7_t4_dw", 5, 3}}) {
    BlockConfig cfg = BlockConfig::parse(id, cin, cout);
    auto p = std::make_shared<BlockParams>(init_block_params(cfg, 3, 4, s.rng));
    auto z = std::make_shared<Tensor>(rand({3, 4, std::size_t(cin)}, s.rng));
    std::uint64_t seed = s.rng();
    std::vector<Tensor*> ts{z.get()};
    for (Tensor* t : p->tensors()) ts.push_back(t);
    s.run("wave_mlp_block_" + cfg.id() + "_" + std::to_string(cin) + "to" + std::to_string(cout),
          [=](Tape& t) { return random_projection(wave_mlp_block_forward(t, t.param(*z), cfg, *p), seed); }, ts);
  }
}

void cfm(Suite& s) {
  auto ft = std::make_shared<Tensor>(rand({3, 4, 5}, s.rng));
  auto fs = std::make_shared<Tensor>(rand({4, 5, 5}, s.rng));
  auto p = std::make_shared<CfmParams>(init_cfm_params(3, 4, 4, 5, 6, s.rng));
  for (double& v : p->bias.data) v = std::uniform_real_distribution<double>(-1, 1)(s.rng);
  BBox box{1, 0, 3, 2};
  std::uint64_t seed = s.rng();
  s.run("roi_align", [=](Tape& t) { return random_projection(roi_align(t.param(*ft), box), seed); }, {ft.get()});
  s.run("cfm_forward",
        [=](Tape& t) { return random_projection(cfm_forward(t, t.param(*ft), t.param(*fs), box, *p), seed); },
        {ft.get(), fs.get(), &p->weight, &p->bias});
}

void supernet_pieces(Suite& s) {
  auto mini = std::make_shared<Supernet>(build_supernet(SupernetSpec::mini(), s.rng()));
  for (Tensor* a : mini->arch_tensors())
    for (double& v : a->data) v = std::uniform_real_distribution<double>(-1, 1)(s.rng);
  auto table = std::make_shared<CostTable>(analytic_cost_table(mini->spec));

  {
    BasicLayer* layer = &mini->layers.front();
    Tensor* alpha = &mini->arch.alpha.front();
    std::size_t c = layer->candidates.front().in_channels;
    auto x = std::make_shared<Tensor>(rand({mini->spec.search_h, mini->spec.search_w, c}, s.rng));
    std::uint64_t seed = s.rng();
    s.run("relaxed_basic_layer",
          [=](Tape& t) {
            return random_projection(relaxed_basic_layer_output(t, *layer, t.param(*x), t.param(*alpha)), seed);
          },
          {x.get(), alpha});
  }
  {
    Tensor* beta = &mini->arch.beta;
    std::uint64_t seed = s.rng();
    s.run("edge_weight",
          [=](Tape& t) {
            Var b = t.param(*beta);
            std::vector<Var> items;
            for (auto [src, dst] : mini->spec.edges()) items.push_back(edge_weight(mini->spec, b, src, dst));
            return random_projection(stack(items), seed);
          },
          {beta});
  }
  {
    auto alpha = std::make_shared<Tensor>(rand({4}, s.rng));
    std::vector<double> costs{3.0, 1.5, 0.0, 7.25};
    s.run("layer_expected_cost", [=](Tape& t) { return layer_expected_cost(t.param(*alpha), costs); },
          {alpha.get()});
  }
  {
    std::vector<Tensor*> ts = mini->arch_tensors();
    s.run("chained_cost_mini", [=](Tape& t) { return chained_cost(t, *mini, *table); }, ts);
  }
  auto net = std::make_shared<Supernet>(build_supernet(SupernetSpec::test_width(), s.rng()));
  for (Tensor* a : net->arch_tensors())
    for (double& v : a->data) v = std::uniform_real_distribution<double>(-1, 1)(s.rng);
  auto big_table = std::make_shared<CostTable>(analytic_cost_table(net->spec));
  {
    std::vector<Tensor*> ts = net->arch_tensors();
    // Costs are FLOPs; normalise so the step is meaningful relative to the value.
    double scale_by = 1.0 / chained_cost_value(*net, *big_table);
    s.run("chained_cost_test_width",
          [=](Tape& t) { return scale(chained_cost(t, *net, *big_table), scale_by); }, ts);
  }
  {
    const auto& sp = net->spec;
    auto ft = std::make_shared<Tensor>(rand({sp.template_h, sp.template_w, sp.feature_channels}, s.rng));
    auto fs = std::make_shared<Tensor>(rand({sp.search_h, sp.search_w, sp.feature_channels}, s.rng));
    BBox box{1, 1, 3, 4};
    std::uint64_t seed = s.rng();
    std::vector<Tensor*> ts{ft.get(), fs.get()};
    for (Tensor* a : net->arch_tensors()) ts.push_back(a);
    // A spread of weight tensors from across the neck.
    std::vector<Tensor*> w = net->weight_tensors();
    std::size_t stride = std::max<std::size_t>(1, w.size() / 24);
    for (std::size_t i = 0; i < w.size(); i += stride) ts.push_back(w[i]);
    s.run("supernet_forward_test_width",
          [=](Tape& t) { return random_projection(supernet_forward(t, *net, t.param(*ft), t.param(*fs), box), seed); },
          ts, 4);
  }
}

void harness_and_losses(Suite& s) {
  {
    auto p = std::make_shared<StemParams>(init_stem_params(3, 4, s.rng));
    auto img = std::make_shared<Tensor>(rand({4, 4, 3}, s.rng));
    std::uint64_t seed = s.rng();
    std::vector<Tensor*> ts{img.get()};
    for (Tensor* t : p->tensors()) ts.push_back(t);
    s.run("stem_forward", [=](Tape& t) { return random_projection(stem_forward(t.param(*img), *p, 2), seed); }, ts);
  }
  {
    auto p = std::make_shared<HeadParams>(init_head_params(384, s.rng));
    auto r = std::make_shared<Tensor>(rand({4, 4, 384}, s.rng));
    std::uint64_t s1 = s.rng(), s2 = s.rng();
    std::vector<Tensor*> ts{r.get()};
    for (Tensor* t : p->tensors()) ts.push_back(t);
    s.run("head_forward",
          [=](Tape& t) {
            HeadOutput h = head_forward(t.param(*r), *p);
            return add(random_projection(h.cls, s1), random_projection(h.reg, s2));
          },
          ts);
  }
  {
    auto pred = std::make_shared<Tensor>(Shape{4}, std::vector<double>{0.3, 0.2, 2.1, 1.7}, true);
    std::array<double, 4> gt{0.0, 0.5, 2.5, 2.0};
    s.run("iou_loss", [=](Tape& t) { return iou_loss(t.param(*pred), gt); }, {pred.get()});
  }
  {
    auto p = std::make_shared<Tensor>(Shape{6}, std::vector<double>{0.1, 0.8, 0.45, 0.3, 0.97, 0.6}, true);
    std::vector<double> y{0, 1, 1, 0, 1, 0};
    s.run("bce_loss", [=](Tape& t) { return bce_loss(t.param(*p), y); }, {p.get()});
  }
  {
    auto reg = std::make_shared<Tensor>(rand({4, 5, 4}, s.rng));
    for (double& v : reg->data) v = 0.6 + 0.5 * v;
    BBox gt{1, 1, 4, 3};
    s.run("regression_loss", [=](Tape& t) { return regression_loss(t.param(*reg), gt); }, {reg.get()});
  }
  {
    auto v = std::make_shared<Tensor>(rand({3}, s.rng));
    LossWeights w{0.5, 2.0, 1.5};
    s.run("total_loss",
          [=](Tape& t) {
            Var x = t.param(*v);
            return total_loss(element(x, 0), element(x, 1), element(x, 2), w);
          },
          {v.get()});
  }
}

}  // namespace

Var random_projection(Var out, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> r(out.size());
  for (double& v : r) v = u(rng);
  Var c = out.tape().constant(out.shape(), std::move(r));
  return sum(mul(out, c));
}

GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn, std::vector<Tensor*> tensors,
                                const GradCheckOptions& options) {
  if (tensors.empty()) throw ContractError("gradcheck " + name + ": no tensors to check");
  std::vector<bool> was_enabled;
  for (Tensor* t : tensors) {
    was_enabled.push_back(t->grad_enabled);
    t->set_grad_enabled(true);
    t->zero_grad();
  }
  {
    Tape tape;
    Var v = fn(tape);
    if (v.size() != 1) throw DimensionError("gradcheck " + name + ": function must return a scalar");
    tape.backward(v);
    tape.accumulate_param_grads();
  }

  GradCheckResult result;
  result.name = name;
  result.tensors = tensors.size();
  Rng rng(options.seed);
  for (Tensor* t : tensors) {
    auto coords = pick_coords(t->size(), options.max_coords, rng);
    double max_diff = 0, max_a = 0, max_n = 0;
    for (std::size_t i : coords) {
      const double orig = t->data[i];
      t->data[i] = orig + options.step;
      const double up = eval_scalar(fn);
      t->data[i] = orig - options.step;
      const double down = eval_scalar(fn);
      t->data[i] = orig;
      const double numeric = (up - down) / (2 * options.step);
      const double analytic = t->grad[i];
      max_diff = std::max(max_diff, std::abs(analytic - numeric));
      max_a = std::max(max_a, std::abs(analytic));
      max_n = std::max(max_n, std::abs(numeric));
    }
    result.coords += coords.size();
    result.max_rel_err = std::max(result.max_rel_err, max_diff / std::max({max_a, max_n, 1e-6}));
  }
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    tensors[k]->zero_grad();
    tensors[k]->set_grad_enabled(was_enabled[k]);
  }
  return result;
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options) {
  Suite s(options);
  tape_ops(s);
  fusion_blocks(s);
  cfm(s);
  supernet_pieces(s);
  harness_and_losses(s);
  return s.results;
}

}  // namespace mcas
