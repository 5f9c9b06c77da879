#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "json.hpp"
#include "mcas/cost_model.hpp"
#include "mcas/harness.hpp"
#include "mcas/search.hpp"

namespace mcas {

// Everything a command can be configured with. Loaded from JSON; any key not
// present in the defaults is rejected with its dotted path.
struct RunConfig {
  std::string preset = "test-width";
  std::size_t blocks = 0;  // blocks including H0; 0 keeps the preset's topology
  std::uint64_t seed = 0;
  std::string out = "mcas_out";
  std::size_t threads = 1;

  DatasetConfig dataset;
  // Desk-scale weight learning rates; the library defaults keep 5e-3.
  SearchConfig search = [] {
    SearchConfig s;
    s.gamma_schedule.base_lr = 2e-2;
    return s;
  }();
  TrainConfig train = [] {
    TrainConfig t;
    t.schedule.base_lr = 3e-2;
    return t;
  }();

  std::string cost_mode = "analytic";  // analytic | opcount | walltime
  std::size_t cost_repetitions = 11;
  std::string cost_table;              // CSV to load instead of building one

  nlohmann::json to_json() const;
  // ConfigError listing every unknown key or mistyped value.
  static RunConfig from_json(const nlohmann::json& j);

  // Spec for the preset with grids matched to the dataset.
  SupernetSpec spec() const;
};

// Reference path counts keyed by path string ("0->1", ...), plus the total.
const std::vector<std::pair<std::string, std::uint64_t>>& reference_path_counts();
inline constexpr std::uint64_t kReferenceTotal = 18326660177124ULL;

// Exit codes: 0 success, 1 contract/config/io error, 2 numerical failure.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace mcas
