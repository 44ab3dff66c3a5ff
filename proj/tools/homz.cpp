#include "homz/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace homz;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string cache;
    int threads = 1;
    std::vector<std::string> formats;
    bool verbose = false;
};

void add_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "experiment config (TOML)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "override mc.seed");
    cmd->add_option("--out", f.out, "output directory")->capture_default_str();
    cmd->add_option("--cache", f.cache, "artifact cache directory (disabled when empty)");
    cmd->add_option("--threads", f.threads, "worker threads for cell and table stages")->check(CLI::Range(1, 256));
    cmd->add_option("--format", f.formats, "json, csv or plotdata (repeatable)")
        ->check(CLI::IsMember({"json", "csv", "plotdata"}));
    cmd->add_flag("-v,--verbose", f.verbose, "log stage progress to stderr");
}

/// Records of every recorded path as one bundle per ε.
ArrayBundle paths_bundle(int k, const std::vector<RecordedPath>& paths, const std::string& key) {
    ArrayBundle b;
    b.kind = "paths";
    b.key = key;
    b.meta = {{"k", k}, {"paths", paths.size()}};
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const RecordedPath& r = paths[i];
        const std::string p = "path" + std::to_string(i) + ".";
        b.put(p + "t", r.t);
        b.put(p + "X", r.X);
        b.put(p + "Y", r.Y);
        b.put(p + "Z", r.Z);
        b.put(p + "dB", r.dB);
        if (r.X_hat.size()) b.put(p + "X_hat", r.X_hat), b.put(p + "Y_hat", r.Y_hat), b.put(p + "Z_hat", r.Z_hat);
        if (r.R.size()) b.put(p + "R", r.R), b.put(p + "S", r.S);
        if (r.N.size()) b.put(p + "N", r.N), b.put(p + "M", r.M);
        for (std::size_t a = 0; a < r.U.size(); ++a) {
            const std::string s = p + "aux" + std::to_string(a) + ".";
            b.put(s + "U", r.U[a]);
            b.put(s + "V", r.V[a]);
            b.put(s + "W_hat", r.W_hat[a]);
        }
    }
    return b;
}

int run(Stage stage, const Flags& f) {
    try {
        ExperimentConfig cfg = load_config(f.config);
        if (f.seed) cfg.seed = f.seed;
        RunOptions opts;
        opts.cache_dir = f.cache;
        opts.threads = f.threads;
        if (f.verbose) opts.log = [](const std::string& m) { std::cerr << "[homz] " << m << "\n"; };
        Pipeline pipe(cfg, opts);
        pipe.run(stage);
        const std::vector<std::string> formats = f.formats.empty() ? cfg.formats : f.formats;
        for (const auto& fmt : formats) {
            const auto file = export_report(pipe.report(), fmt, f.out, stage_name(stage));
            std::cout << "wrote " << file.string() << "\n";
        }
        for (const auto& [k, paths] : pipe.recorded()) {
            const auto file = std::filesystem::path(f.out) / ("paths-k" + std::to_string(k) + ".homz");
            write_bundle(file, paths_bundle(k, paths, pipe.config_hash()));
            std::cout << "wrote " << file.string() << "\n";
        }
        if ((stage == Stage::sweep || stage == Stage::report) && !pipe.verdicts_pass()) {
            std::cerr << "verdict: fail\n";
            return 2;
        }
        return 0;
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Periodic homogenization experiments: cell problems, limit PDEs and FBSDE Monte Carlo"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<Stage, std::string>> commands = {
        {Stage::validate, "check the coefficient hypotheses"},
        {Stage::cells, "solve the cell problems on the y-grid"},
        {Stage::table, "build the homogenized coefficient table"},
        {Stage::pde, "solve the limit, oscillatory and regularized PDEs"},
        {Stage::simulate, "run the Monte Carlo ensembles"},
        {Stage::sweep, "tabulate metrics over (epsilon, n) with verdicts"},
        {Stage::report, "run every stage and write the full report"}};
    std::vector<std::pair<CLI::App*, Stage>> subs;
    for (const auto& [stage, help] : commands) {
        CLI::App* cmd = app.add_subcommand(stage_name(stage), help);
        add_flags(cmd, flags);
        subs.emplace_back(cmd, stage);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    for (const auto& [cmd, stage] : subs)
        if (cmd->parsed()) return run(stage, flags);
    return 1;
}
