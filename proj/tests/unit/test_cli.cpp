#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mcas/cli.hpp"
#include "mcas/errors.hpp"
#include "oracles.hpp"

using namespace mcas;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mcas");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("mcas_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void write(const std::string& path, const nlohmann::json& j) { std::ofstream(path) << j.dump(2); }

nlohmann::json small_config(const std::string& preset) {
  return {{"preset", preset},
          {"dataset", {{"n_samples", 10}}},
          {"search", {{"stage1_epochs", 1}, {"stage2_epochs", 1}, {"stage3_epochs", 1}}},
          {"train", {{"epochs", 1}}}};
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("enumerate reproduces the reference table") {
    auto r = cli({"enumerate"});
    CHECK(r.code == 0);
    CHECK(r.out.find("0→1: 26364\n") != std::string::npos);
    CHECK(r.out.find("0→1→2→3: 18324574916544\n") != std::string::npos);
    CHECK(r.out.find("18326660177124") != std::string::npos);
    CHECK(r.out.find("table matches reference counts") != std::string::npos);
    CHECK(r.out.find("non-paper topology") == std::string::npos);
    CHECK(cli({"enumerate", "--preset", "paper-width"}).code == 0);

    auto three = cli({"enumerate", "--blocks", "3"});
    CHECK(three.code == 0);
    CHECK(three.out.find("non-paper topology: 3 blocks") != std::string::npos);
    CHECK(three.out.find("695113224") != std::string::npos);

    std::uint64_t sum = 0;
    for (const auto& [path, count] : reference_path_counts()) sum += count;
    CHECK(sum == kReferenceTotal);
  }

  TEST_CASE("config errors and exit codes") {
    TempDir tmp("config");
    write(tmp / "bad.json", {{"presett", "mini"}, {"search", {{"stage1_epochs", "eight"}, {"gamma", {{"lr", 1}}}}}});
    auto r = cli({"enumerate", "--config", tmp / "bad.json"});
    CHECK(r.code == 1);
    CHECK(r.err.find("presett") != std::string::npos);
    CHECK(r.err.find("search.stage1_epochs") != std::string::npos);
    CHECK(r.err.find("search.gamma.lr") != std::string::npos);

    CHECK(cli({"enumerate", "--config", tmp / "missing.json"}).code == 1);
    CHECK(cli({"enumerate", "--preset", "huge"}).code == 1);
    CHECK(cli({"enumerate", "--blocks", "9"}).code == 1);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({}).code == 1);
    CHECK(cli({"train-derived", "--preset", "mini", "--out", tmp / "none", "--arch", tmp / "nope.json"}).code == 1);
    CHECK(cli({"report", "--dir", tmp / "empty"}).code == 1);

    auto j = small_config("mini");
    j["search"]["gamma"] = {{"base_lr", 1e200}, {"final_lr", 1e-5}};
    write(tmp / "blowup.json", j);
    auto blow = cli({"search", "--config", tmp / "blowup.json", "--out", tmp / "blowup"});
    CHECK(blow.code == 2);
    CHECK(blow.err.find("numerical error") != std::string::npos);
  }

  TEST_CASE("resolved config round trip") {
    RunConfig c;
    c.preset = "mini";
    c.search.stage3_epochs = 5;
    c.cost_mode = "opcount";
    const auto j = c.to_json();
    const RunConfig back = RunConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(RunConfig::from_json(nlohmann::json::object()).to_json() == RunConfig().to_json());
    CHECK_THROWS_AS(RunConfig::from_json({{"cost", {{"mode", "latency"}}}}), ConfigError);
  }

  TEST_CASE("cost table command") {
    TempDir tmp("cost");
    auto r = cli({"cost-table", "--preset", "mini", "--out", tmp.path.string()});
    CHECK(r.code == 0);
    const CostTable t = CostTable::from_csv(slurp(tmp / "cost_table.csv"));
    RunConfig c;
    c.preset = "mini";
    CHECK(t.to_csv() == analytic_cost_table(c.spec()).to_csv());
    CHECK(fs::exists(tmp / "resolved_config.json"));
    CHECK(r.out.find("config:") != std::string::npos);
  }

  TEST_CASE("search, retrain and report") {
    TempDir tmp("search");
    write(tmp / "c.json", small_config("mini"));
    const std::string a = tmp / "a", b = tmp / "b";
    auto ra = cli({"search", "--config", tmp / "c.json", "--out", a, "--seed", "4"});
    REQUIRE(ra.code == 0);
    auto rb = cli({"search", "--config", tmp / "c.json", "--out", b, "--seed", "4"});
    REQUIRE(rb.code == 0);
    for (const char* f : {"search_report.jsonl", "derived_arch.json", "search_summary.json"})
      CHECK(slurp(a + "/" + f) == slurp(b + "/" + f));
    auto ca = nlohmann::json::parse(slurp(a + "/resolved_config.json")),
         cb = nlohmann::json::parse(slurp(b + "/resolved_config.json"));
    CHECK(ca["out"] == a);
    ca.erase("out");
    cb.erase("out");
    CHECK(ca == cb);
    const auto summary = nlohmann::json::parse(slurp(a + "/search_summary.json"));
    CHECK(summary["audits_pass"] == true);
    CHECK(summary["audits"].size() == 5);
    const auto resolved = nlohmann::json::parse(slurp(a + "/resolved_config.json"));
    CHECK(resolved["seed"] == 4);
    CHECK(RunConfig::from_json(resolved).to_json() == resolved);

    auto rc = cli({"search", "--config", tmp / "c.json", "--out", tmp / "c", "--seed", "5"});
    REQUIRE(rc.code == 0);
    CHECK(slurp(a + "/search_report.jsonl") != slurp(tmp / "c/search_report.jsonl"));

    auto tr = cli({"train-derived", "--config", tmp / "c.json", "--out", a, "--seed", "4"});
    REQUIRE(tr.code == 0);
    const auto metrics = nlohmann::json::parse(slurp(a + "/train_metrics.json"));
    CHECK(metrics["initial_weights_hash"] != summary["search_weights_hash"]);
    CHECK(metrics["initial_weights_hash"] != metrics["final_weights_hash"]);
    CHECK(metrics["val"]["samples"] == 2);
    auto tr2 = cli({"train-derived", "--config", tmp / "c.json", "--out", b, "--seed", "4"});
    REQUIRE(tr2.code == 0);
    CHECK(slurp(a + "/train_metrics.json") == slurp(b + "/train_metrics.json"));

    auto rep = cli({"report", "--dir", a});
    CHECK(rep.code == 0);
    const std::string trace = slurp(a + "/search_trace.csv");
    CHECK(trace.rfind("epoch,stage,train_loss", 0) == 0);
    CHECK(std::count(trace.begin(), trace.end(), '\n') == 4);
    CHECK(fs::exists(a + "/train_trace.csv"));
    CHECK(nlohmann::json::parse(slurp(a + "/report.json")).contains("search_summary"));
  }

  TEST_CASE("pure cost search matches the exhaustive minimum") {
    TempDir tmp("purecost");
    auto j = small_config("mini");
    j["loss"] = {{"eta", 1.0}, {"lambda", 0.0}, {"mu", 0.0}};
    j["search"] = {{"stage1_epochs", 0}, {"stage2_epochs", 0}, {"stage3_epochs", 5}};
    write(tmp / "c.json", j);
    auto r = cli({"search", "--config", tmp / "c.json", "--out", tmp.path.string()});
    REQUIRE(r.code == 0);
    const auto arch = DerivedArchitecture::from_json(nlohmann::json::parse(slurp(tmp / "derived_arch.json")));
    const RunConfig c = RunConfig::from_json(j);
    Supernet net = build_supernet(c.spec(), 0);
    const auto best = oracle::min_cost_architecture(net, analytic_cost_table(c.spec()));
    CHECK(arch == best.arch);
  }

  TEST_CASE("dataset export command") {
    TempDir tmp("export");
    auto r = cli({"export-dataset", "--preset", "mini", "--out", tmp.path.string(), "--seed", "2"});
    CHECK(r.code == 0);
    const auto side = nlohmann::json::parse(slurp(tmp / "dataset.json"));
    CHECK(side["seed"] == 2);
    CHECK(fs::file_size(tmp / "dataset.bin") ==
          side["record_doubles"].get<std::size_t>() * side["config"]["n_samples"].get<std::size_t>() * 8);
  }
}
