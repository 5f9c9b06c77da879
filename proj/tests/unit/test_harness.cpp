#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mcas/cost_model.hpp"
#include "mcas/errors.hpp"
#include "mcas/gradcheck.hpp"
#include "mcas/harness.hpp"
#include "mcas/search.hpp"

using namespace mcas;

namespace {

SupernetSpec on_grid(SupernetSpec s, const Dataset& d) {
  s.template_h = s.template_w = d.template_grid();
  s.search_h = s.search_w = d.search_grid();
  return s;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("dataset determinism and split") {
    DatasetConfig c;
    c.n_samples = 10;
    const Dataset a = generate_dataset(4, c), b = generate_dataset(4, c), other = generate_dataset(5, c);
    CHECK(a.train.size() == 8);
    CHECK(a.val.size() == 2);
    auto hash = [](const Dataset& d) {
      std::vector<const Tensor*> ts;
      for (const auto* s : d.all()) {
        ts.push_back(&s->template_image);
        ts.push_back(&s->search_image);
      }
      return hash_values(ts);
    };
    CHECK(hash(a) == hash(b));
    CHECK(hash(a) != hash(other));
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].gt_bbox == b.train[i].gt_bbox);
    CHECK(a.signature == b.signature);

    DatasetConfig bad = c;
    bad.max_box = 7;  // 6-cell search grid
    CHECK_THROWS_AS(generate_dataset(0, bad), ConfigError);
    bad = c;
    bad.n_samples = 1;
    CHECK_THROWS_AS(generate_dataset(0, bad), ConfigError);
    bad = c;
    bad.search_size = 13;
    CHECK_THROWS_AS(generate_dataset(0, bad), ConfigError);
  }

  TEST_CASE("noise-free signature is linearly separable") {
    DatasetConfig c;
    c.n_samples = 50;
    c.noise = 0;
    CHECK(linear_probe_accuracy(generate_dataset(1, c)) == 1.0);
    c.noise = 0.25;
    CHECK(linear_probe_accuracy(generate_dataset(1, c)) > 0.9);
  }

  TEST_CASE("labels mark exactly the cells inside the box") {
    DatasetConfig c;
    c.n_samples = 60;
    const Dataset d = generate_dataset(2, c);
    const std::size_t g = d.search_grid();
    for (const auto* s : d.all()) {
      CHECK_NOTHROW(s->gt_bbox.validate(g, g));
      CHECK_NOTHROW(s->template_bbox.validate(d.template_grid(), d.template_grid()));
      for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) {
          const double cx = x + 0.5, cy = y + 0.5;
          const bool inside = cx > s->gt_bbox.x0 && cx < s->gt_bbox.x1 && cy > s->gt_bbox.y0 && cy < s->gt_bbox.y1;
          CHECK(s->cls_labels[y * g + x] == (inside ? 1.0 : 0.0));
        }
    }
  }

  TEST_CASE("head examples") {
    HeadParams zero = zero_head_params(384);
    Rng rng(1);
    Tape tape;
    auto out = head_forward(tape.constant(Tensor::uniform({4, 5, 384}, 1.0, rng)), zero);
    CHECK(out.cls.shape() == Shape{4, 5});
    CHECK(out.reg.shape() == Shape{4, 5, 4});
    for (double v : out.cls.value()) CHECK(v == 0.5);
    for (double v : out.reg.value()) CHECK(std::abs(v - std::log(2.0)) < 1e-15);
    HeadParams h = init_head_params(48, rng);
    auto o2 = head_forward(tape.constant(Tensor::uniform({3, 3, 48}, 3.0, rng)), h);
    for (double v : o2.cls.value()) CHECK((v > 0 && v < 1));
    for (double v : o2.reg.value()) CHECK(v >= 0);
    CHECK_THROWS_AS(head_forward(tape.constant(Tensor::zeros({3, 3, 40})), h), DimensionError);

    HeadParams g = init_head_params(384, rng);
    const Tensor x = Tensor::uniform({4, 4, 384}, 1.0, rng);
    std::vector<Tensor*> ts = g.tensors();
    for (Tensor* t : ts) t->set_grad_enabled(true);
    auto r = check_gradients(
        "head",
        [&](Tape& t) {
          auto o = head_forward(t.constant(x), g);
          return add(random_projection(o.cls, 1), random_projection(o.reg, 2));
        },
        ts, {1e-5, 12, 3});
    CHECK(r.max_rel_err < 1e-5);
  }

  TEST_CASE("evaluation examples") {
    DatasetConfig c;
    c.n_samples = 60;
    const Dataset d = generate_dataset(6, c);
    const auto samples = d.all();
    const std::size_t g = d.search_grid();

    std::vector<Prediction> perfect;
    for (const auto* s : samples) {
      Prediction p{s->cls_labels, std::vector<double>(g * g * 4, 0.0)};
      for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) {
          double* r = &p.reg[(y * g + x) * 4];
          r[0] = x + 0.5 - s->gt_bbox.x0;
          r[1] = y + 0.5 - s->gt_bbox.y0;
          r[2] = s->gt_bbox.x1 - (x + 0.5);
          r[3] = s->gt_bbox.y1 - (y + 0.5);
        }
      perfect.push_back(std::move(p));
    }
    auto m = evaluate_predictions(perfect, samples, g);
    CHECK(std::abs(m.mean_iou - 1.0) < 1e-12);
    CHECK(m.cls_accuracy == 1.0);
    CHECK(m.samples == 60);
    CHECK_THROWS_AS(evaluate_predictions({}, {}, g), ContractError);
    CHECK_THROWS_AS(evaluate_predictions(std::span(perfect).first(2), samples, g), DimensionError);

    // Untrained tracker on the skip-free supernet neck.
    const auto spec = on_grid(SupernetSpec::test_width(), d);
    Supernet net = build_supernet(spec, 8);
    Rng rng(9);
    TrackerWeights w{init_stem_params(c.raw_channels, spec.feature_channels, rng), init_head_params(48, rng)};
    NeckFn neck = [&](Tape& t, Var ft, Var fs, const BBox& b) { return supernet_forward(t, net, ft, fs, b); };
    auto r1 = evaluate(samples, w.stem, neck, w.head, c.pool, 1.0);
    auto r2 = evaluate(samples, w.stem, neck, w.head, c.pool, 1.0);
    CHECK(r1.to_json() == r2.to_json());
    CHECK((r1.mean_iou >= 0 && r1.mean_iou <= 1));
    double base = 0;
    for (const auto* s : samples)
      for (double l : s->cls_labels) base += l;
    base /= static_cast<double>(samples.size() * g * g);
    // An untrained head is close to a constant predictor, which scores the
    // majority rate 1 - base or the minority rate base.
    MESSAGE("untrained cls accuracy " << r1.cls_accuracy << ", positive rate " << base);
    CHECK(std::min(std::abs(r1.cls_accuracy - base), std::abs(r1.cls_accuracy - (1 - base))) <= 0.15);
    CHECK_THROWS_AS(evaluate({}, w.stem, neck, w.head, c.pool, 1.0), ContractError);
  }

  TEST_CASE("skip-everything architecture costs only the CFM and CH choices") {
    DatasetConfig c;
    c.n_samples = 10;
    const Dataset d = generate_dataset(6, c);
    const auto spec = on_grid(SupernetSpec::test_width(), d);
    const CostTable table = analytic_cost_table(spec);
    Supernet net = build_supernet(spec, 1);
    for (auto& l : net.layers) {
      // Saturate every PH layer on skip and every CH layer on its last candidate.
      auto& a = net.arch.alpha[&l - net.layers.data()];
      a[l.candidates.size() - 1] = 10;
    }
    auto arch = derive_architecture(net);
    double want = table.cost(cfm_cost_key(spec));
    for (const auto& l : arch.layers)
      if (l.layer_name[0] == 'P') CHECK(l.choice == "skip");
    for (std::size_t k = 1; k < arch.path.size(); ++k) {
      const auto& ch = spec.ch_layer(arch.path[k - 1], arch.path[k]);
      const auto it = std::find_if(arch.layers.begin(), arch.layers.end(),
                                   [&](const DerivedLayer& l) { return l.layer_name == ch.name(); });
      REQUIRE(it != arch.layers.end());
      CHECK(it->choice == "k7_t8_dw");
      want += table.cost(candidate_cost_key(spec, BlockConfig::parse(it->choice, ch.in_channels, ch.out_channels)));
    }
    DerivedNetwork dn = DerivedNetwork::build(spec, arch, 3);
    Rng rng(4);
    TrackerWeights w{init_stem_params(c.raw_channels, spec.feature_channels, rng), init_head_params(48, rng)};
    NeckFn neck = [&](Tape& t, Var ft, Var fs, const BBox& b) { return dn.forward(t, ft, fs, b); };
    const double flops = derived_cost(spec, arch, table);
    CHECK(flops == want);
    CHECK(evaluate(d.all(), w.stem, neck, w.head, c.pool, flops).flops == want);
  }

  TEST_CASE("gradients reach the first stem layer") {
    DatasetConfig c;
    c.n_samples = 4;
    const Dataset d = generate_dataset(7, c);
    const auto spec = on_grid(SupernetSpec::test_width(), d);
    Supernet net = build_supernet(spec, 1);
    Rng rng(2);
    TrackerWeights w{init_stem_params(c.raw_channels, spec.feature_channels, rng), init_head_params(48, rng)};
    for (Tensor* t : w.stem.tensors()) t->set_grad_enabled(true);
    NeckFn neck = [&](Tape& t, Var ft, Var fs, const BBox& b) { return supernet_forward(t, net, ft, fs, b); };
    Tape tape;
    const auto& s = d.train[0];
    auto o = tracker_forward(tape, s, w.stem, neck, w.head, c.pool);
    tape.backward(add(regression_loss(o.head.reg, s.gt_bbox), bce_loss(o.head.cls, s.cls_labels)));
    tape.accumulate_param_grads();
    std::size_t nonzero = 0;
    for (double g : w.stem.conv1.grad) nonzero += g != 0.0;
    CHECK(nonzero > w.stem.conv1.size() / 2);
  }

  TEST_CASE("dataset export layout") {
    DatasetConfig c;
    c.n_samples = 5;
    const Dataset d = generate_dataset(3, c);
    const auto dir = std::filesystem::temp_directory_path() / "mcas_harness_export";
    std::filesystem::create_directories(dir);
    const auto bin = (dir / "d.bin").string();
    auto j = export_dataset(d, bin);
    const std::size_t rec = j["record_doubles"];
    CHECK(std::filesystem::file_size(bin) == 5 * rec * sizeof(double));
    CHECK(j["n_train"] == 4);
    CHECK(j["seed"] == 3);
    std::ifstream in(bin, std::ios::binary);
    std::vector<double> first(rec);
    in.read(reinterpret_cast<char*>(first.data()), static_cast<std::streamsize>(rec * sizeof(double)));
    const auto& s = d.train[0];
    CHECK(first[0] == s.template_image[0]);
    const std::size_t boxes = s.template_image.size() + s.search_image.size();
    CHECK(first[boxes + 4] == static_cast<double>(s.gt_bbox.x0));
    CHECK(first.back() == s.cls_labels.back());
    CHECK_THROWS_AS(export_dataset(d, (dir / "missing" / "x.bin").string()), IoError);
    std::filesystem::remove_all(dir);
  }
}
