#pragma once

#include "homz/cache.hpp"
#include "homz/errors.hpp"
#include "homz/cell_problems.hpp"
#include "homz/coefficients.hpp"
#include "homz/fbsde.hpp"
#include "homz/homogenized.hpp"
#include "homz/pde.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace homz {

/// Ergodic statistic requested in the config: φ source and its companion ("x_hat", "constant" or "aux:<n>").
struct ErgodicSpec {
    std::string label;
    std::string phi;
    std::string companion = "constant";
};

/// Parsed experiment configuration. Key names are documented in the README.
struct ExperimentConfig {
    CoefficientSources coefficients;
    std::string preset;  ///< empty when the coefficients were given as expressions

    int cell_nodes = 32;      ///< [grid] N
    int pde_nodes = 128;      ///< [grid] M, limit and regularized solves
    int nodes_per_k = 16;     ///< [grid] M_per_k, ε-solves use max(M, M_per_k·k)

    YBox y_box;
    int y_nodes = 17;
    CellOptions cell;

    YBox z_box;
    int z_nodes = 17;

    double T = 0.1;
    SolverSettings pde;

    double t0 = 0.0;
    std::vector<double> x0;
    int n_paths = 1000;
    int n_steps = 0;          ///< 0 applies the Euler step rule per ε
    double fast_step = 0.05;  ///< step rule bound on h·k²
    int min_steps = 64;
    int brownian_steps = 0;   ///< shared increment grid; 0 uses the lcm of the Euler step counts
    std::optional<std::uint64_t> seed;  ///< required; the CLI --seed flag may supply it
    int record_paths = 0;               ///< paths kept in full when output.raw_paths is set
    bool remainders = true;
    bool limit_simulation = true;
    std::vector<ErgodicSpec> ergodic;

    std::vector<int> k_list;        ///< ε = 1/k
    std::vector<int> n_list;        ///< mollification indices (empty: no auxiliary SDE)
    std::vector<int> m_candidates;  ///< candidates for m(n); empty uses n, 2n, 4n, 8n, 16n
    double y_bound = 0.0;           ///< 0 picks sup|θ_ε| over the sweep
    int density_points = 16;
    std::vector<std::string> decreasing;  ///< metrics whose decay along ε is judged

    std::vector<std::string> formats = {"json"};
    bool raw_paths = false;
    int profile_points = 64;

    std::string source_text;  ///< the config file as read
};

/// Parses TOML text. Throws ConfigError with the offending key.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& file);

/// Stage failure: carries the stage name and the content hash of the artifact being built.
class StageError : public Error {
public:
    StageError(std::string stage, std::string hash, const std::string& message, ErrorKind kind = ErrorKind::usage);
    const std::string& stage() const { return stage_; }
    const std::string& hash() const { return hash_; }

private:
    std::string stage_, hash_;
};

enum class Stage { validate, cells, table, pde, simulate, sweep, report };
Stage stage_from_name(const std::string& name);
const char* stage_name(Stage s);

struct RunOptions {
    std::filesystem::path cache_dir;  ///< empty disables the cache
    int threads = 1;
    bool quiet = true;
    std::function<void(const std::string&)> log;
};

/// One (ε, n) row of the sweep table.
struct SweepRow {
    int k = 1;
    int n = 0;  ///< 0 when the config has no n list
    std::map<std::string, Estimate> metrics;
};

/// Runs the stages in order, reusing cached artifacts by content hash, and assembles the report.
class Pipeline {
public:
    Pipeline(ExperimentConfig config, RunOptions options = {});

    /// Runs every stage up to and including `last`.
    void run(Stage last = Stage::report);

    const ExperimentConfig& config() const { return config_; }
    const CoefficientSpec& spec() const { return *spec_; }
    std::shared_ptr<const CellTable> cells() const { return cells_; }
    std::shared_ptr<const HomogenizedTable> table() const { return table_; }
    const DecouplingField& limit_field() const { return limit_; }
    const DecouplingField& epsilon_field(int k) const { return eps_.at(k); }
    /// Regularized field ζ_n and its m(n) choice (pde stage).
    const DecouplingField& regularized_field(int n) const { return zeta_.at(n); }
    const MollificationChoice& mollification(int n) const { return mchoice_.at(n); }
    const std::vector<SweepRow>& rows() const { return rows_; }
    /// Per-path samples of a metric at ε = 1/k (simulate stage).
    const PathFunctionals& functionals(int k) const { return ensembles_.at(k); }

    /// Deterministic report; run-dependent stamps live under "run".
    const nlohmann::json& report() const { return report_; }
    /// Recorded paths per k (only with output.raw_paths).
    const std::map<int, std::vector<RecordedPath>>& recorded() const { return recorded_; }
    /// True when no sweep verdict failed.
    bool verdicts_pass() const { return verdicts_pass_; }
    std::string config_hash() const { return config_hash_; }

private:
    void stage_validate();
    void stage_cells();
    void stage_table();
    void stage_pde();
    void stage_simulate();
    void stage_sweep();
    void stage_report();
    void note(const std::string& message) const;
    template <class F>
    void guarded(Stage stage, const std::string& hash, F&& body);

    ExperimentConfig config_;
    RunOptions options_;
    ArrayCache cache_;
    std::string config_hash_, cells_key_, table_key_;
    std::optional<CoefficientSpec> spec_;
    std::shared_ptr<const CellTable> cells_;
    std::shared_ptr<const HomogenizedTable> table_;
    DecouplingField limit_;
    std::map<int, DecouplingField> eps_;
    std::map<int, DecouplingField> zeta_;
    std::map<int, MollificationChoice> mchoice_;
    std::map<int, PathFunctionals> ensembles_;
    std::map<int, std::vector<RecordedPath>> recorded_;
    std::vector<SweepRow> rows_;
    nlohmann::json report_ = nlohmann::json::object();
    nlohmann::json run_ = nlohmann::json::object();
    bool verdicts_pass_ = true;
    int done_ = -1;
};

/// Writes the report in one format under `dir` and returns the file written.
/// json: full report; csv: sweep table (one row per (ε, n)); plotdata: long format
/// (metric, epsilon, n, x, value, se) including θ_ε(0, ·) and θ(0, ·) profile samples.
std::filesystem::path export_report(const nlohmann::json& report, const std::string& format,
                                    const std::filesystem::path& dir, const std::string& stem = "report");

/// Report without the run-dependent "run" block, serialized for byte comparison.
std::string deterministic_dump(const nlohmann::json& report);

}  // namespace homz
