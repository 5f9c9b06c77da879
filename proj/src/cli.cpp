#include "mcas/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "mcas/errors.hpp"
#include "mcas/gradcheck.hpp"

namespace mcas {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config

json RunConfig::to_json() const {
  const auto& d = dataset;
  const auto& s = search;
  const auto& t = train;
  return {
      {"preset", preset},
      {"blocks", blocks},
      {"seed", seed},
      {"out", out},
      {"threads", threads},
      {"dataset",
       {{"n_samples", d.n_samples},
        {"template_size", d.template_size},
        {"search_size", d.search_size},
        {"raw_channels", d.raw_channels},
        {"pool", d.pool},
        {"min_box", d.min_box},
        {"max_box", d.max_box},
        {"noise", d.noise},
        {"smooth", d.smooth},
        {"train_fraction", d.train_fraction}}},
      {"loss", {{"eta", s.weights.eta}, {"lambda", s.weights.lambda}, {"mu", s.weights.mu}}},
      {"search",
       {{"stage1_epochs", s.stage1_epochs},
        {"stage2_epochs", s.stage2_epochs},
        {"stage3_epochs", s.stage3_epochs},
        {"batch_size", s.batch_size},
        {"normalize_cost", s.normalize_cost},
        {"gamma",
         {{"base_lr", s.gamma_schedule.base_lr},
          {"final_lr", s.gamma_schedule.final_lr},
          {"warmup_epochs", s.gamma_schedule.warmup_epochs},
          {"momentum", s.gamma_momentum}}},
        {"alpha", {{"lr", s.alpha_lr}, {"momentum", s.alpha_momentum}}},
        {"beta", {{"lr", s.beta_lr}, {"weight_decay", s.beta_weight_decay}}}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"base_lr", t.schedule.base_lr},
        {"final_lr", t.schedule.final_lr},
        {"warmup_epochs", t.schedule.warmup_epochs},
        {"momentum", t.momentum}}},
      {"cost", {{"mode", cost_mode}, {"repetitions", cost_repetitions}, {"table", cost_table}}},
  };
}

namespace {

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_unsigned()) return "non-negative integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_object()) return "object";
  return j.type_name();
}

bool compatible(const json& def, const json& v) {
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_number()) return v.is_number();
  return def.type() == v.type();
}

// Overlays `user` on `defaults`, collecting every unknown or mistyped key.
void overlay(json& target, const json& user, const std::string& prefix, std::vector<std::string>& problems) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!target.contains(it.key())) {
      problems.push_back("unknown key '" + path + "'");
      continue;
    }
    json& slot = target[it.key()];
    if (slot.is_object()) {
      if (!it->is_object()) {
        problems.push_back("key '" + path + "' must be an object");
        continue;
      }
      overlay(slot, *it, path, problems);
    } else if (!compatible(slot, *it)) {
      problems.push_back("key '" + path + "' must be a " + type_name(slot) + ", got " + type_name(*it));
    } else if (slot.is_number_unsigned()) {
      slot = it->get<std::uint64_t>();
    } else {
      slot = *it;
    }
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  json m = RunConfig{}.to_json();
  std::vector<std::string> problems;
  overlay(m, j, "", problems);
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  RunConfig c;
  c.preset = m["preset"];
  c.blocks = m["blocks"];
  c.seed = m["seed"];
  c.out = m["out"];
  c.threads = m["threads"];
  const json& d = m["dataset"];
  c.dataset.n_samples = d["n_samples"];
  c.dataset.template_size = d["template_size"];
  c.dataset.search_size = d["search_size"];
  c.dataset.raw_channels = d["raw_channels"];
  c.dataset.pool = d["pool"];
  c.dataset.min_box = d["min_box"];
  c.dataset.max_box = d["max_box"];
  c.dataset.noise = d["noise"];
  c.dataset.smooth = d["smooth"];
  c.dataset.train_fraction = d["train_fraction"];
  const json& l = m["loss"];
  c.search.weights = {l["eta"], l["lambda"], l["mu"]};
  const json& s = m["search"];
  c.search.stage1_epochs = s["stage1_epochs"];
  c.search.stage2_epochs = s["stage2_epochs"];
  c.search.stage3_epochs = s["stage3_epochs"];
  c.search.batch_size = s["batch_size"];
  c.search.normalize_cost = s["normalize_cost"];
  c.search.gamma_schedule.base_lr = s["gamma"]["base_lr"];
  c.search.gamma_schedule.final_lr = s["gamma"]["final_lr"];
  c.search.gamma_schedule.warmup_epochs = s["gamma"]["warmup_epochs"];
  c.search.gamma_momentum = s["gamma"]["momentum"];
  c.search.alpha_lr = s["alpha"]["lr"];
  c.search.alpha_momentum = s["alpha"]["momentum"];
  c.search.beta_lr = s["beta"]["lr"];
  c.search.beta_weight_decay = s["beta"]["weight_decay"];
  const json& t = m["train"];
  c.train.epochs = t["epochs"];
  c.train.batch_size = t["batch_size"];
  c.train.schedule.base_lr = t["base_lr"];
  c.train.schedule.final_lr = t["final_lr"];
  c.train.schedule.warmup_epochs = t["warmup_epochs"];
  c.train.momentum = t["momentum"];
  c.train.weights = {0.0, c.search.weights.lambda, c.search.weights.mu};
  c.cost_mode = m["cost"]["mode"];
  c.cost_repetitions = m["cost"]["repetitions"];
  c.cost_table = m["cost"]["table"];
  if (c.cost_mode != "analytic") parse_measure_mode(c.cost_mode);
  return c;
}

SupernetSpec RunConfig::spec() const {
  SupernetSpec s = SupernetSpec::from_preset(preset);
  if (blocks != 0) {
    if (blocks < 2 || blocks > s.block_count()) {
      throw ConfigError("blocks must lie in [2, " + std::to_string(s.block_count()) + "], got " +
                        std::to_string(blocks));
    }
    while (s.block_count() > blocks) s = s.without_last_block();
  }
  if (dataset.pool == 0) throw ConfigError("dataset.pool must be positive");
  s.template_h = s.template_w = dataset.template_size / dataset.pool;
  s.search_h = s.search_w = dataset.search_size / dataset.pool;
  s.validate();
  return s;
}

const std::vector<std::pair<std::string, std::uint64_t>>& reference_path_counts() {
  static const std::vector<std::pair<std::string, std::uint64_t>> v{
      {"0->1", 26364ULL},           {"0->1->2", 695060496ULL},          {"0->2", 26364ULL},
      {"0->1->2->3", 18324574916544ULL}, {"0->1->3", 695060496ULL}, {"0->2->3", 695060496ULL},
      {"0->3", 26364ULL},
  };
  return v;
}

namespace {

// ---- helpers

std::string arrow(const std::string& path) {
  std::string out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (path.compare(i, 2, "->") == 0) {
      out += "→";
      ++i;
    } else {
      out += path[i];
    }
  }
  return out;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + p.string() + "' failed");
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

struct Context {
  RunConfig config;
  std::ostream& out;

  fs::path out_dir() const {
    fs::path d(config.out);
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) throw IoError("cannot create output directory '" + d.string() + "': " + ec.message());
    return d;
  }

  void echo(const std::string& command) const {
    out << "command: " << command << "\n";
    out << "config: " << config.to_json().dump() << "\n";
  }

  // Writes the resolved config beside the outputs and echoes it.
  fs::path begin(const std::string& command) {
    fs::path d = out_dir();
    write_text(d / "resolved_config.json", config.to_json().dump(2) + "\n");
    echo(command);
    return d;
  }
};

std::size_t effective_threads(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(1, requested);
  if (const char* env = std::getenv("MCAS_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0) throw ConfigError("MCAS_THREADS must be a positive integer");
    n = std::min<std::size_t>(n, cap);
  }
  return n;
}

CostTable build_cost_table(const RunConfig& c, const SupernetSpec& spec) {
  if (!c.cost_table.empty()) return CostTable::from_csv(read_text(c.cost_table));
  if (c.cost_mode == "analytic") return analytic_cost_table(spec);
  return measure_costs(spec, parse_measure_mode(c.cost_mode), c.seed, c.cost_repetitions);
}

TrackerWeights fresh_tracker(const RunConfig& c, const SupernetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  TrackerWeights w{init_stem_params(c.dataset.raw_channels, spec.feature_channels, rng), {}};
  w.head = init_head_params(spec.widths[spec.terminal()], rng);
  return w;
}

// ---- commands

int cmd_enumerate(Context& ctx) {
  ctx.echo("enumerate");
  const SupernetSpec spec = ctx.config.spec();
  const Enumeration e = enumerate_architectures(spec);
  const bool reference = spec.is_reference_topology();
  if (!reference) ctx.out << "non-paper topology: " << spec.block_count() << " blocks, counts recomputed\n";
  for (const auto& p : e.paths) ctx.out << arrow(path_string(p.path)) << ": " << p.count << "\n";
  ctx.out << "total: " << e.total << "\n";
  if (!reference) return 0;
  bool ok = e.total == kReferenceTotal && e.paths.size() == reference_path_counts().size();
  for (const auto& [path, count] : reference_path_counts()) {
    auto it = std::find_if(e.paths.begin(), e.paths.end(),
                           [&](const PathCount& p) { return path_string(p.path) == path; });
    if (it == e.paths.end() || it->count != count) {
      ctx.out << "MISMATCH " << arrow(path) << ": expected " << count << "\n";
      ok = false;
    }
  }
  ctx.out << (ok ? "table matches reference counts\n" : "table does NOT match reference counts\n");
  return ok ? 0 : 1;
}

int cmd_cost_table(Context& ctx) {
  fs::path dir = ctx.begin("cost-table");
  const SupernetSpec spec = ctx.config.spec();
  const CostTable table = build_cost_table(ctx.config, spec);
  write_text(dir / "cost_table.csv", table.to_csv());
  ctx.out << "cost table: " << table.size() << " entries -> " << (dir / "cost_table.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(Context& ctx) {
  fs::path dir = ctx.begin("gradcheck");
  GradCheckOptions o;
  o.seed = ctx.config.seed;
  const auto results = run_gradcheck_suite(o);
  double worst = 0;
  json j = json::array();
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_err);
    char line[160];
    std::snprintf(line, sizeof line, "%-36s tensors %3zu coords %4zu rel err %.3e", r.name.c_str(), r.tensors,
                  r.coords, r.max_rel_err);
    ctx.out << line << "\n";
    j.push_back({{"name", r.name}, {"tensors", r.tensors}, {"coords", r.coords}, {"max_rel_err", r.max_rel_err}});
  }
  write_text(dir / "gradcheck.json", j.dump(2) + "\n");
  char summary[96];
  std::snprintf(summary, sizeof summary, "%zu ops checked, max rel err %.3e", results.size(), worst);
  ctx.out << summary << "\n";
  return worst < 1e-4 ? 0 : 2;
}

int cmd_search(Context& ctx) {
  fs::path dir = ctx.begin("search");
  const RunConfig& c = ctx.config;
  const SupernetSpec spec = c.spec();
  const Dataset data = generate_dataset(c.seed, c.dataset);
  const CostTable table = build_cost_table(c, spec);
  Supernet net = build_supernet(spec, c.seed + 1);
  TrackerWeights weights = fresh_tracker(c, spec, c.seed + 2);
  SearchConfig sc = c.search;
  sc.threads = effective_threads(c.threads);
  sc.shuffle_seed = c.seed + 3;

  const fs::path report_path = dir / "search_report.jsonl";
  std::ofstream report(report_path, std::ios::binary);
  if (!report) throw IoError("cannot open '" + report_path.string() + "' for writing");
  const SearchResult r = run_search(net, weights, data, table, sc, [&](const EpochRecord& rec) {
    report << rec.to_json().dump() << "\n";
    report.flush();
    char line[200];
    std::snprintf(line, sizeof line, "epoch %3zu stage %d train_loss %.6f sea_cost %.6f path %s", rec.epoch,
                  rec.stage, rec.train_loss, rec.sea_cost, rec.derived_path_snapshot.c_str());
    ctx.out << line << "\n";
  });
  report.close();
  if (!report) throw IoError("write to '" + report_path.string() + "' failed");

  write_text(dir / "derived_arch.json", r.arch.to_json().dump(2) + "\n");
  DerivedNetwork inherited = DerivedNetwork::from_supernet(net, r.arch);
  std::vector<Tensor*> ts = inherited.tensors();
  for (Tensor* t : weights.stem.tensors()) ts.push_back(t);
  for (Tensor* t : weights.head.tensors()) ts.push_back(t);

  json summary;
  summary["audits"] = json::array();
  for (const auto& a : r.audits) summary["audits"].push_back({{"name", a.name}, {"pass", a.pass}});
  summary["audits_pass"] = r.audits_pass();
  summary["derived_path"] = path_string(r.arch.path);
  summary["derived_flops"] = derived_cost(spec, r.arch, table);
  summary["uniform_expected_flops"] = r.cost_scale;
  summary["initial_sea_raw"] = r.initial_sea_raw;
  summary["final_sea_raw"] = r.final_sea_raw;
  summary["stage3_steps"] = r.stage3_steps;
  summary["search_weights_hash"] = hex(hash_tensors(ts));
  // cost_scale is 1 when normalisation is off; report the uniform cost either way.
  if (!c.search.normalize_cost) {
    std::vector<std::vector<double>> saved;
    for (Tensor* t : net.arch_tensors()) {
      saved.push_back(t->data);
      std::fill(t->data.begin(), t->data.end(), 0.0);
    }
    summary["uniform_expected_flops"] = chained_cost_value(net, table);
    auto at = net.arch_tensors();
    for (std::size_t i = 0; i < at.size(); ++i) at[i]->data = std::move(saved[i]);
  }
  write_text(dir / "search_summary.json", summary.dump(2) + "\n");
  ctx.out << "derived path " << arrow(path_string(r.arch.path)) << ", audits " << (r.audits_pass() ? "pass" : "FAIL")
          << "\n";
  return r.audits_pass() ? 0 : 1;
}

int cmd_train_derived(Context& ctx, const std::string& arch_file) {
  fs::path dir = ctx.begin("train-derived");
  const RunConfig& c = ctx.config;
  const SupernetSpec spec = c.spec();
  const fs::path arch_path = arch_file.empty() ? dir / "derived_arch.json" : fs::path(arch_file);
  const DerivedArchitecture arch = DerivedArchitecture::from_json(read_json(arch_path));
  arch.check_member(spec);
  const Dataset data = generate_dataset(c.seed, c.dataset);
  const CostTable table = build_cost_table(c, spec);
  // Fresh weights: nothing from the search is loaded.
  DerivedNetwork net = DerivedNetwork::build(spec, arch, c.seed + 11);
  TrackerWeights weights = fresh_tracker(c, spec, c.seed + 12);
  TrainConfig tc = c.train;
  tc.threads = effective_threads(c.threads);
  tc.shuffle_seed = c.seed + 13;
  const TrainResult r = train_derived(net, weights, data, table, tc);

  json j;
  j["arch_path"] = path_string(arch.path);
  j["epoch_loss"] = r.epoch_loss;
  j["val"] = r.val_metrics.to_json();
  j["initial_weights_hash"] = hex(r.initial_hash);
  j["final_weights_hash"] = hex(r.final_hash);
  write_text(dir / "train_metrics.json", j.dump(2) + "\n");
  char line[160];
  std::snprintf(line, sizeof line, "val mean IoU %.4f, cls accuracy %.4f, flops %.0f", r.val_metrics.mean_iou,
                r.val_metrics.cls_accuracy, r.val_metrics.flops);
  ctx.out << line << "\n";
  return 0;
}

std::string csv_number(const json& v) {
  if (v.is_null()) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v.get<double>();
  return os.str();
}

int cmd_report(Context& ctx, const std::string& dir_arg) {
  ctx.echo("report");
  const fs::path dir = dir_arg.empty() ? fs::path(ctx.config.out) : fs::path(dir_arg);
  bool any = false;
  json agg;
  if (fs::exists(dir / "search_report.jsonl")) {
    std::istringstream in(read_text(dir / "search_report.jsonl"));
    std::string csv = "epoch,stage,train_loss,val_loss,sea_cost,lr_gamma,lr_alpha,lr_beta,derived_path_snapshot\n";
    std::string line;
    std::size_t n = 0;
    json last;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json r;
      try {
        r = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ConfigError("malformed search report line " + std::to_string(n + 1) + ": " + e.what());
      }
      csv += std::to_string(r.at("epoch").get<std::size_t>()) + "," + std::to_string(r.at("stage").get<int>()) + "," +
             csv_number(r.at("train_loss")) + "," + csv_number(r.at("val_loss")) + "," + csv_number(r.at("sea_cost")) +
             "," + csv_number(r.at("lr_gamma")) + "," + csv_number(r.at("lr_alpha")) + "," +
             csv_number(r.at("lr_beta")) + "," + r.at("derived_path_snapshot").get<std::string>() + "\n";
      last = r;
      ++n;
    }
    write_text(dir / "search_trace.csv", csv);
    agg["search_epochs"] = n;
    if (n) agg["search_final"] = last;
    if (fs::exists(dir / "search_summary.json")) agg["search_summary"] = read_json(dir / "search_summary.json");
    ctx.out << "search trace: " << n << " epochs -> " << (dir / "search_trace.csv").string() << "\n";
    any = true;
  }
  if (fs::exists(dir / "train_metrics.json")) {
    json m = read_json(dir / "train_metrics.json");
    std::string csv = "epoch,loss\n";
    const auto& losses = m.at("epoch_loss");
    for (std::size_t e = 0; e < losses.size(); ++e) csv += std::to_string(e) + "," + csv_number(losses[e]) + "\n";
    write_text(dir / "train_trace.csv", csv);
    agg["train"] = m;
    ctx.out << "train trace: " << losses.size() << " epochs -> " << (dir / "train_trace.csv").string() << "\n";
    any = true;
  }
  if (!any) throw IoError("no search_report.jsonl or train_metrics.json in '" + dir.string() + "'");
  write_text(dir / "report.json", agg.dump(2) + "\n");
  return 0;
}

int cmd_export_dataset(Context& ctx) {
  fs::path dir = ctx.begin("export-dataset");
  const Dataset data = generate_dataset(ctx.config.seed, ctx.config.dataset);
  json side = export_dataset(data, (dir / "dataset.bin").string());
  write_text(dir / "dataset.json", side.dump(2) + "\n");
  ctx.out << "dataset: " << data.train.size() << " train, " << data.val.size() << " val -> "
          << (dir / "dataset.bin").string() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"mcas: differentiable search over Wave-MLP fusion necks"};
  app.require_subcommand(1);
  std::string config_path, out_dir, preset, arch_file, report_dir;
  std::uint64_t seed = 0;
  std::size_t blocks = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--preset", preset, "paper-width | test-width | mini");
    sub->add_option("--blocks", blocks, "harmonization blocks including H0");
  };
  auto* enumerate = app.add_subcommand("enumerate", "count the architectures in the search space");
  auto* cost_table = app.add_subcommand("cost-table", "write the candidate cost table as CSV");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  auto* search = app.add_subcommand("search", "three-stage search, writes the report and derived architecture");
  auto* train = app.add_subcommand("train-derived", "retrain a derived architecture from scratch");
  auto* report = app.add_subcommand("report", "aggregate JSON records into CSV traces");
  auto* export_data = app.add_subcommand("export-dataset", "write the synthetic dataset to disk");
  for (auto* s : {enumerate, cost_table, gradcheck, search, train, report, export_data}) add_common(s);
  train->add_option("--arch", arch_file, "derived architecture JSON (default: <out>/derived_arch.json)");
  report->add_option("--dir", report_dir, "directory holding the records (default: --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    RunConfig config;
    if (!config_path.empty()) config = RunConfig::from_json(read_json(config_path));
    // Command-line flags override the file.
    auto was_set = [&](const char* flag) {
      for (auto* s : app.get_subcommands())
        if (s->count(flag)) return true;
      return false;
    };
    if (was_set("--seed")) config.seed = seed;
    if (was_set("--out")) config.out = out_dir;
    if (was_set("--preset")) config.preset = preset;
    if (was_set("--blocks")) config.blocks = blocks;
    config.spec();  // validate early

    Context ctx{config, out};
    if (*enumerate) return cmd_enumerate(ctx);
    if (*cost_table) return cmd_cost_table(ctx);
    if (*gradcheck) return cmd_gradcheck(ctx);
    if (*search) return cmd_search(ctx);
    if (*train) return cmd_train_derived(ctx, arch_file);
    if (*report) return cmd_report(ctx, report_dir);
    if (*export_data) return cmd_export_dataset(ctx);
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mcas
