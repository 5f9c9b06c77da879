#include <cmath>

#include "doctest.h"
#include "mcas/errors.hpp"
#include "mcas/gradcheck.hpp"
#include "mcas/search.hpp"
#include "oracles.hpp"

using namespace mcas;

namespace {

SupernetSpec on_grid(SupernetSpec s, const DatasetConfig& dc) {
  s.template_h = s.template_w = dc.template_size / dc.pool;
  s.search_h = s.search_w = dc.search_size / dc.pool;
  return s;
}

struct Fixture {
  DatasetConfig dc;
  Dataset data;
  SupernetSpec spec;
  Supernet net;
  TrackerWeights weights;
  CostTable table;

  explicit Fixture(std::size_t n, std::uint64_t seed = 3, SupernetSpec base = SupernetSpec::mini()) {
    dc.n_samples = n;
    data = generate_dataset(seed, dc);
    spec = on_grid(base, dc);
    net = build_supernet(spec, seed + 1);
    Rng rng(seed + 2);
    weights = {init_stem_params(dc.raw_channels, spec.feature_channels, rng), init_head_params(spec.widths.back(), rng)};
    table = analytic_cost_table(spec);
  }
};

}  // namespace

TEST_SUITE("search") {
  TEST_CASE("iou loss examples") {
    CHECK(iou_loss_value({0, 0, 2, 2}, {0, 0, 2, 2}) == 0.0);
    CHECK(std::abs(iou_loss_value({0, 0, 2, 2}, {1, 0, 3, 2}) - std::log(3.0)) < 1e-12);
    CHECK(std::abs(iou_loss_value({0, 0, 1, 1}, {2, 2, 3, 3}) - 13.815510557964274) < 1e-9);
    CHECK_THROWS_AS(iou_loss_value({0, 0, 0, 1}, {0, 0, 1, 1}), ContractError);
    Tape tape;
    Var p = tape.variable(Tensor({4}, {0, 0, 2, 2}, true));
    CHECK(std::abs(iou_loss(p, {1, 0, 3, 2}).value()[0] - std::log(3.0)) < 1e-12);
    Tape t2;
    Var far = t2.variable(Tensor({4}, {0, 0, 1, 1}, true));
    t2.backward(iou_loss(far, {2, 2, 3, 3}));
    for (double g : t2.grad(far)) CHECK(g == 0.0);
  }

  TEST_CASE("bce loss examples") {
    Tape tape;
    const std::vector<double> y{1, 0, 0, 1};
    CHECK(std::abs(bce_loss(tape.constant(Tensor::filled({2, 2}, 0.5)), y).value()[0] - std::log(2.0)) < 1e-15);
    CHECK(bce_loss(tape.constant({4}, y), y).value()[0] < 1e-6);
    const std::vector<double> p{0.9, 0.2, 0.35, 0.6};
    double want = 0;
    for (std::size_t i = 0; i < 4; ++i) want -= (y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i])) / 4;
    CHECK(std::abs(bce_loss(tape.constant({4}, p), y).value()[0] - want) < 1e-12);
    CHECK_THROWS_AS(bce_loss(tape.constant({3}, {0.5, 0.5, 0.5}), y), DimensionError);
  }

  TEST_CASE("total loss examples and gradient split") {
    CHECK(total_loss(1, 2, 3, {}) == 6.0);
    CHECK(total_loss(0.5, 1.0, 0.25, {2, 1, 4}) == 3.0);
    CHECK(total_loss(0.7, 123.0, -5.0, {1, 0, 0}) == 0.7);
    Tape tape;
    Var s = tape.variable(Tensor({1}, {0.5}, true)), r = tape.variable(Tensor({1}, {1.0}, true)),
        c = tape.variable(Tensor({1}, {0.25}, true));
    Var l = total_loss(s, r, c, {2, 1, 4});
    CHECK(l.value()[0] == 3.0);
    tape.backward(l);
    CHECK(tape.grad(s)[0] == 2.0);
    CHECK(tape.grad(r)[0] == 1.0);
    CHECK(tape.grad(c)[0] == 4.0);
  }

  TEST_CASE("learning-rate schedule") {
    const ScheduleConfig s;
    CHECK(std::abs(lr_at(5, s) - 5e-3) < 1e-18);
    CHECK(std::abs(lr_at(47, s) - 1e-5) < 1e-18);
    CHECK(std::abs(lr_at(26, s) - std::sqrt(5e-3 * 1e-5)) < 1e-15);
    CHECK(std::abs(lr_at(0, s) - 5e-4) < 1e-18);
    CHECK(std::abs(lr_at(4, s) - 5e-3) < 1e-18);  // warmup ends at base, decay starts at base
    for (std::size_t e = 0; e < 4; ++e) CHECK(lr_at(e + 1, s) > lr_at(e, s));
    for (std::size_t e = 5; e < 47; ++e) CHECK(lr_at(e + 1, s) < lr_at(e, s));
    CHECK_THROWS_AS(lr_at(48, s), ContractError);
    ScheduleConfig bad = s;
    bad.warmup_epochs = 48;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.final_lr = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("optimizer steps") {
    Tensor p({3}, {1, -2, 3}, true);
    std::vector<Tensor*> ps{&p};
    SgdState sgd{0.0, {}, 0};
    sgd_step(ps, sgd, 0.1);
    CHECK(p.data == std::vector<double>{1, -2, 3});

    Tensor q({1}, {0.0}, true);
    std::vector<Tensor*> qs{&q};
    SgdState mom{0.9, {}, 0};
    q.grad = {2.0};
    sgd_step(qs, mom, 0.01);
    sgd_step(qs, mom, 0.01);
    CHECK(std::abs(q[0] + 0.01 * 2.0 * (2 + 0.9)) < 1e-15);
    CHECK(mom.steps == 2);

    Tensor a({1}, {0.3}, true);
    std::vector<Tensor*> as{&a};
    AdamState adam;
    adam.weight_decay = 0;
    a.grad = {-7.5};
    adam_step(as, adam, 1e-4);
    CHECK(std::abs(a[0] - (0.3 + 1e-4)) < 1e-12);

    Tensor w({1}, {2.0}, true);
    std::vector<Tensor*> ws{&w};
    AdamState decayed;  // weight decay alone pulls towards zero
    w.grad = {0.0};
    adam_step(ws, decayed, 1e-4);
    CHECK(w[0] < 2.0);

    Tensor other({2}, {0, 0}, true);
    std::vector<Tensor*> os{&other};
    CHECK_THROWS_AS(sgd_step(os, mom, 0.1), DimensionError);
    CHECK_THROWS_AS(adam_step(os, adam, 0.1), DimensionError);
  }

  TEST_CASE("regression loss averages positive cells") {
    Tape tape;
    Tensor reg = Tensor::zeros({3, 3, 4});
    const BBox gt{1, 1, 3, 2};  // two cells: (y=1, x=1), (y=1, x=2)
    for (std::size_t x : {1, 2}) {
      auto d = &reg.data[(1 * 3 + x) * 4];
      // Cell centres at (x + 0.5, 1.5); exact distances to the box sides.
      d[0] = x + 0.5 - 1;
      d[1] = 0.5;
      d[2] = 3 - (x + 0.5);
      d[3] = 0.5;
    }
    CHECK(std::abs(regression_loss(tape.constant(reg), gt).value()[0]) < 1e-12);
    reg.data[(1 * 3 + 2) * 4 + 2] += 1.0;  // widen one prediction: IoU 2/3 on that cell
    CHECK(std::abs(regression_loss(tape.constant(reg), gt).value()[0] - std::log(1.5) / 2) < 1e-12);
    CHECK_THROWS_AS(regression_loss(tape.constant(Tensor::zeros({3, 3, 2})), gt), DimensionError);
  }

  TEST_CASE("zero stage-3 epochs leave the architecture untouched") {
    Fixture f(10);
    const auto before = hash_tensors(f.net.arch_tensors());
    SearchConfig c;
    c.stage1_epochs = 1;
    c.stage2_epochs = 1;
    c.stage3_epochs = 0;
    auto r = run_search(f.net, f.weights, f.data, f.table, c);
    CHECK(hash_tensors(f.net.arch_tensors()) == before);
    CHECK(r.stage3_steps == 0);
    CHECK(r.audits.size() == 5);
    CHECK(r.audits_pass());
    CHECK(r.records.size() == 2);
    CHECK(r.records[0].stage == 1);
    CHECK(r.records[1].stage == 2);
    CHECK(!r.records[1].val_loss.has_value());
    CHECK(r.initial_sea_raw == r.final_sea_raw);
    CHECK(r.cost_scale == r.initial_sea_raw);
  }

  TEST_CASE("full short search passes every audit") {
    Fixture f(10);
    SearchConfig c;
    c.stage1_epochs = c.stage2_epochs = c.stage3_epochs = 1;
    std::vector<nlohmann::json> seen;
    auto r = run_search(f.net, f.weights, f.data, f.table, c, [&](const EpochRecord& e) { seen.push_back(e.to_json()); });
    CHECK(r.audits_pass());
    REQUIRE(seen.size() == 3);
    for (const char* k : {"epoch", "stage", "train_loss", "val_loss", "sea_cost", "lr_gamma", "lr_alpha", "lr_beta",
                          "derived_path_snapshot"})
      CHECK(seen[2].contains(k));
    CHECK(seen[2]["stage"] == 3);
    CHECK(seen[2]["val_loss"].is_number());
    CHECK(r.stage3_steps == 1);  // two val samples, one batch
    CHECK_NOTHROW(r.arch.check_member(f.spec));

    // Same seeds, same run.
    Fixture g(10);
    auto r2 = run_search(g.net, g.weights, g.data, g.table, c);
    CHECK(hash_tensors(g.net.arch_tensors()) == hash_tensors(f.net.arch_tensors()));
    CHECK(r2.records.back().train_loss == r.records.back().train_loss);

    SearchConfig none = c;
    none.stage1_epochs = none.stage2_epochs = none.stage3_epochs = 0;
    CHECK_THROWS_AS(run_search(g.net, g.weights, g.data, g.table, none), ConfigError);
  }

  TEST_CASE("pure cost search finds the exhaustive minimum") {
    Fixture f(10);
    SearchConfig c;
    c.weights = {1.0, 0.0, 0.0};
    c.stage1_epochs = c.stage2_epochs = 0;
    c.stage3_epochs = 4;
    auto r = run_search(f.net, f.weights, f.data, f.table, c);
    const auto best = oracle::min_cost_architecture(f.net, f.table);
    CHECK(best.minimizers == 1);
    CHECK(r.arch == best.arch);
    CHECK(r.final_sea_raw < r.initial_sea_raw);
    for (std::size_t i = 1; i < r.records.size(); ++i) CHECK(r.records[i].sea_cost <= r.records[i - 1].sea_cost);
  }

  TEST_CASE("data terms fit with the cost term disabled") {
    Fixture f(40, 3, SupernetSpec::test_width());
    SearchConfig c;
    c.weights = {0.0, 1.0, 1.0};
    c.stage1_epochs = 8;
    c.stage2_epochs = 8;
    c.stage3_epochs = 0;
    c.batch_size = 2;
    c.gamma_schedule.base_lr = 2e-2;
    auto r = run_search(f.net, f.weights, f.data, f.table, c);
    const double first = r.records.front().train_loss, last = r.records.back().train_loss;
    MESSAGE("train loss " << first << " -> " << last);
    CHECK(last <= 0.5 * first);
  }

  TEST_CASE("retraining a derived architecture starts from fresh weights") {
    Fixture f(10);
    auto arch = derive_architecture(f.net);
    DerivedNetwork fresh = DerivedNetwork::build(f.spec, arch, 77);
    Rng rng(78);
    TrackerWeights w{init_stem_params(f.dc.raw_channels, f.spec.feature_channels, rng),
                     init_head_params(f.spec.widths.back(), rng)};
    TrainConfig tc;
    tc.epochs = 2;
    auto r = train_derived(fresh, w, f.data, f.table, tc);
    CHECK(r.epoch_loss.size() == 2);
    CHECK(r.initial_hash != r.final_hash);
    CHECK(r.val_metrics.samples == 2);
    CHECK(r.val_metrics.flops == derived_cost(f.spec, arch, f.table));
    std::vector<Tensor*> search_side = f.net.weight_tensors();
    CHECK(hash_tensors(search_side) != r.initial_hash);
  }
}
