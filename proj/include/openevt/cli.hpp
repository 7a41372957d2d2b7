#ifndef OPENEVT_CLI_HPP
#define OPENEVT_CLI_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "openevt/interval_maps.hpp"

namespace openevt {

//----------------------------------------------------------------------
// Config-driven experiment runner. A single JSON document fixes the
// map, hole, target, grids, and sampling budget; run_experiment
// executes one pipeline (or all applicable ones) and emits CSV files
// plus manifest.json into an output directory. Identical config and
// seed give byte-identical CSVs for any worker count.
//----------------------------------------------------------------------

struct BranchSpec {
  double lo = 0.0;
  double hi = 0.0;
  double slope = 0.0;
  double offset = 0.0;
};

struct ExperimentConfig {
  // Map: either a builtin name (doubling | tent | linear_markov, the
  // latter with a slope table) or an explicit affine branch list.
  std::string builtin;
  std::vector<double> slopes;
  std::vector<BranchSpec> branches;

  std::vector<Interval> hole;
  double z = 0.0;
  std::vector<double> tau_grid;
  std::vector<int> n_values;
  int bins = 1024;
  bool markov_mode = true;
  int n_particles = 100000;
  std::uint64_t seed = 0;  // mandatory in the file; no entropy fallback
  double d_const = 1.01;
  int p_max = 16;
  std::string out_dir;    // optional; --out overrides
  std::string pipeline = "all";
};

// Parses and structurally checks a JSON config file; throws NamedError
// ("config_schema") on missing or ill-typed fields, unknown keys, or a
// missing seed.
ExperimentConfig load_config(const std::string& path);

// Builds the configured map; throws the interval_maps constructor
// errors for non-expanding or non-tiling branch lists.
PiecewiseExpandingMap build_map_from_config(const ExperimentConfig& cfg);

struct Diagnostic {
  bool fatal = false;
  std::string name;
  std::string message;
};

// Static invariant checks plus dynamic ones on a capped-size spectral
// solve: operator-closeness surrogate vs m(H) (informational),
// hole-smallness gate, singular-set distance at z (zero distance is
// the fatal ambiguous-point case), and MC horizon feasibility.
std::vector<Diagnostic> validate_config(const ExperimentConfig& cfg);

// Runs cfg.pipeline, writing CSVs and manifest.json under out_dir.
// Returns the process exit code: 0 success, 1 when a pipeline recorded
// an error, 2 when the config is invalid (nothing is written then).
int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                   int workers);

// openevt run --config <file> --out <dir> [--pipeline <name>]
//                                         [--workers <n>]
// openevt validate --config <file>
// OPENEVT_WORKERS is the fallback for --workers.
int cli_main(int argc, const char* const* argv);

}  // namespace openevt

#endif
