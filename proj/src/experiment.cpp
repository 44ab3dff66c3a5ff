#include "homz/experiment.hpp"

#include "homz/errors.hpp"

#define TOML_ENABLE_FORMATTERS 0
#include <toml.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace homz {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

const std::map<std::string, std::set<std::string>>& allowed_keys() {
    static const std::map<std::string, std::set<std::string>> keys = {
        {"coefficient", {"preset", "name", "P", "Q", "sigma", "b", "c", "e", "f", "H", "constants"}},
        {"grid", {"N", "M", "M_per_k", "P", "Q"}},
        {"cell", {"y_box", "y_nodes", "comp_tol", "residual_target", "h_y", "centering_mode"}},
        {"table", {"z_box", "z_nodes"}},
        {"pde", {"T", "dt_init", "rtol", "atol", "dt_min", "fixed_dt", "n_out", "dealias", "max_steps"}},
        {"mc", {"t0", "x0", "n_paths", "n_steps", "fast_step", "min_steps", "brownian_steps", "seed", "record_paths",
                "remainders", "limit_simulation", "ergodic"}},
        {"sweep", {"k", "n", "m_candidates", "y_bound", "density_points", "decreasing"}},
        {"output", {"formats", "raw_paths", "profile_points"}},
    };
    return keys;
}

class Reader {
public:
    Reader(const toml::table& root, std::string origin) : root_(root), origin_(std::move(origin)) {}

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw ConfigError(origin_ + ": " + key + ": " + what);
    }

    const toml::node* node(const std::string& path) const {
        const toml::node* n = root_.at_path(path).node();
        return n;
    }

    template <class T>
    T get(const std::string& path, T fallback) const {
        const toml::node* n = node(path);
        if (!n) return fallback;
        return as<T>(*n, path);
    }

    template <class T>
    std::optional<T> maybe(const std::string& path) const {
        const toml::node* n = node(path);
        if (!n) return std::nullopt;
        return as<T>(*n, path);
    }

    template <class T>
    T as(const toml::node& n, const std::string& path) const {
        if constexpr (std::is_same_v<T, bool>) {
            if (auto v = n.value<bool>(); v && n.is_boolean()) return *v;
            fail(path, "expected a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!n.is_integer()) fail(path, "expected an integer");
            return static_cast<T>(*n.value<std::int64_t>());
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!n.is_number()) fail(path, "expected a number");
            return *n.value<double>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!n.is_string()) fail(path, "expected a string");
            return *n.value<std::string>();
        } else {
            using E = typename T::value_type;
            const toml::array* a = n.as_array();
            if (!a) fail(path, "expected an array");
            T out;
            for (std::size_t i = 0; i < a->size(); ++i) out.push_back(as<E>(*a->get(i), path + "[" + std::to_string(i) + "]"));
            return out;
        }
    }

    YBox box(const std::string& path, const YBox& fallback) const {
        const toml::node* n = node(path);
        if (!n) return fallback;
        const toml::array* a = n->as_array();
        if (!a || a->empty()) fail(path, "expected an array of [lo, hi] pairs");
        YBox out;
        for (std::size_t i = 0; i < a->size(); ++i) {
            auto pair = as<std::vector<double>>(*a->get(i), path + "[" + std::to_string(i) + "]");
            if (pair.size() != 2 || !(pair[0] <= pair[1])) fail(path, "each entry must be [lo, hi] with lo <= hi");
            out.emplace_back(pair[0], pair[1]);
        }
        return out;
    }

private:
    const toml::table& root_;
    std::string origin_;
};

json sources_json(const CoefficientSources& s) {
    json K = json::array();
    for (const auto& [r, v] : s.constants.K) K.push_back({r, v});
    return {{"name", s.name}, {"P", s.P},   {"Q", s.Q},   {"sigma", s.sigma}, {"b", s.b},
            {"c", s.c},       {"e", s.e},   {"f", s.f},   {"H", s.H},
            {"constants", {{"k", s.constants.k}, {"lambda", s.constants.lambda}, {"Lambda", s.constants.Lambda}, {"K", K}}}};
}

json box_json(const YBox& b) {
    json a = json::array();
    for (const auto& [lo, hi] : b) a.push_back({lo, hi});
    return a;
}

json settings_json(const SolverSettings& s) {
    return {{"dt_init", s.dt_init}, {"rtol", s.rtol},         {"atol", s.atol},
            {"dt_min", s.dt_min},   {"fixed_dt", s.fixed_dt}, {"n_out", s.n_out},
            {"dealias", s.dealias == Dealias::on ? "on" : (s.dealias == Dealias::off ? "off" : "auto")},
            {"max_steps", s.max_steps}};
}

/// Canonical form of everything that influences results (the basis of the config hash).
json config_json(const ExperimentConfig& c) {
    json erg = json::array();
    for (const auto& e : c.ergodic) erg.push_back({{"label", e.label}, {"phi", e.phi}, {"companion", e.companion}});
    return {
        {"coefficient", sources_json(c.coefficients)},
        {"preset", c.preset},
        {"grid", {{"N", c.cell_nodes}, {"M", c.pde_nodes}, {"M_per_k", c.nodes_per_k}}},
        {"cell",
         {{"y_box", box_json(c.y_box)},
          {"y_nodes", c.y_nodes},
          {"comp_tol", c.cell.comp_tol},
          {"residual_target", c.cell.residual_target},
          {"h_y", c.cell.h_y},
          {"centering_mode", centering_name(c.cell.centering)}}},
        {"table", {{"z_box", box_json(c.z_box)}, {"z_nodes", c.z_nodes}}},
        {"pde", {{"T", c.T}, {"settings", settings_json(c.pde)}}},
        {"mc",
         {{"t0", c.t0},
          {"x0", c.x0},
          {"n_paths", c.n_paths},
          {"n_steps", c.n_steps},
          {"fast_step", c.fast_step},
          {"min_steps", c.min_steps},
          {"brownian_steps", c.brownian_steps},
          {"seed", c.seed ? std::to_string(*c.seed) : ""},
          {"record_paths", c.record_paths},
          {"remainders", c.remainders},
          {"limit_simulation", c.limit_simulation},
          {"ergodic", erg}}},
        {"sweep",
         {{"k", c.k_list},
          {"n", c.n_list},
          {"m_candidates", c.m_candidates},
          {"y_bound", c.y_bound},
          {"density_points", c.density_points},
          {"decreasing", c.decreasing}}},
        {"output", {{"raw_paths", c.raw_paths}, {"profile_points", c.profile_points}}},
    };
}

std::string hash_of(const json& j) { return sha256_hex(j.dump()); }

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
    toml::table root;
    try {
        root = toml::parse(text, origin);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << origin << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
        throw ConfigError(os.str());
    }
    for (const auto& [section, value] : root) {
        const std::string name(section.str());
        auto it = allowed_keys().find(name);
        if (it == allowed_keys().end()) throw ConfigError(origin + ": unknown section [" + name + "]");
        const toml::table* t = value.as_table();
        if (!t) throw ConfigError(origin + ": [" + name + "] must be a table");
        for (const auto& [key, v] : *t)
            if (!it->second.count(std::string(key.str())))
                throw ConfigError(origin + ": unknown key " + name + "." + std::string(key.str()));
    }
    Reader r(root, origin);
    ExperimentConfig c;
    c.source_text = text;

    if (auto p = r.maybe<std::string>("coefficient.preset")) {
        c.preset = *p;
        try {
            c.coefficients = preset_sources(*p);
        } catch (const Error& e) {
            r.fail("coefficient.preset", e.what());
        }
        for (const char* k : {"sigma", "b", "c", "e", "f", "H", "constants"})
            if (r.node(std::string("coefficient.") + k)) r.fail(std::string("coefficient.") + k, "cannot be combined with a preset");
    } else {
        if (!r.node("coefficient")) r.fail("coefficient", "a preset or expressions are required");
        CoefficientSources& s = c.coefficients;
        s.name = r.get<std::string>("coefficient.name", "custom");
        s.P = r.get<int>("coefficient.P", 1);
        s.Q = r.get<int>("coefficient.Q", 1);
        auto exprs = [&](const char* key, std::vector<std::string>& out) {
            const std::string path = std::string("coefficient.") + key;
            if (!r.node(path)) r.fail(path, "missing");
            out = r.get<std::vector<std::string>>(path, {});
        };
        exprs("sigma", s.sigma);
        exprs("b", s.b);
        exprs("c", s.c);
        exprs("e", s.e);
        exprs("f", s.f);
        exprs("H", s.H);
        s.constants.k = r.get<double>("coefficient.constants.k", 1.0);
        s.constants.lambda = r.get<double>("coefficient.constants.lambda", 1.0);
        s.constants.Lambda = r.get<double>("coefficient.constants.Lambda", 1.0);
        for (const auto& pair : r.get<std::vector<std::vector<double>>>("coefficient.constants.K", {})) {
            if (pair.size() != 2) r.fail("coefficient.constants.K", "entries must be [radius, value]");
            s.constants.K.emplace_back(pair[0], pair[1]);
        }
    }
    const int P = c.coefficients.P, Q = c.coefficients.Q;
    if (r.get<int>("grid.P", P) != P) r.fail("grid.P", "disagrees with the coefficient block");
    if (r.get<int>("grid.Q", Q) != Q) r.fail("grid.Q", "disagrees with the coefficient block");
    c.cell_nodes = r.get<int>("grid.N", c.cell_nodes);
    c.pde_nodes = r.get<int>("grid.M", c.pde_nodes);
    c.nodes_per_k = r.get<int>("grid.M_per_k", c.nodes_per_k);

    c.y_box = r.box("cell.y_box", YBox(static_cast<std::size_t>(Q), {-2.0, 2.0}));
    if (static_cast<int>(c.y_box.size()) != Q) r.fail("cell.y_box", "needs one interval per y component");
    c.y_nodes = r.get<int>("cell.y_nodes", c.y_nodes);
    c.cell.comp_tol = r.get<double>("cell.comp_tol", c.cell.comp_tol);
    c.cell.residual_target = r.get<double>("cell.residual_target", c.cell.residual_target);
    c.cell.h_y = r.get<double>("cell.h_y", c.cell.h_y);
    if (auto m = r.maybe<std::string>("cell.centering_mode")) {
        try {
            c.cell.centering = centering_from_name(*m);
        } catch (const Error& e) {
            r.fail("cell.centering_mode", e.what());
        }
    }
    c.z_box = r.box("table.z_box", YBox(static_cast<std::size_t>(Q * P), {-8.0, 8.0}));
    if (static_cast<int>(c.z_box.size()) != Q * P) r.fail("table.z_box", "needs one interval per entry of z");
    c.z_nodes = r.get<int>("table.z_nodes", c.z_nodes);

    c.T = r.get<double>("pde.T", c.T);
    c.pde.dt_init = r.get<double>("pde.dt_init", c.pde.dt_init);
    c.pde.rtol = r.get<double>("pde.rtol", c.pde.rtol);
    c.pde.atol = r.get<double>("pde.atol", c.pde.atol);
    c.pde.dt_min = r.get<double>("pde.dt_min", c.pde.dt_min);
    c.pde.fixed_dt = r.get<double>("pde.fixed_dt", c.pde.fixed_dt);
    c.pde.n_out = r.get<int>("pde.n_out", c.pde.n_out);
    c.pde.max_steps = r.get<long>("pde.max_steps", c.pde.max_steps);
    if (auto d = r.maybe<std::string>("pde.dealias")) {
        try {
            c.pde.dealias = dealias_from_name(*d);
        } catch (const Error& e) {
            r.fail("pde.dealias", e.what());
        }
    }

    c.t0 = r.get<double>("mc.t0", c.t0);
    c.x0 = r.get<std::vector<double>>("mc.x0", std::vector<double>(static_cast<std::size_t>(P), 0.3));
    if (static_cast<int>(c.x0.size()) != P) r.fail("mc.x0", "needs P entries");
    c.n_paths = r.get<int>("mc.n_paths", c.n_paths);
    c.n_steps = r.get<int>("mc.n_steps", c.n_steps);
    c.fast_step = r.get<double>("mc.fast_step", c.fast_step);
    c.min_steps = r.get<int>("mc.min_steps", c.min_steps);
    c.brownian_steps = r.get<int>("mc.brownian_steps", c.brownian_steps);
    if (c.brownian_steps < 0) r.fail("mc.brownian_steps", "must be nonnegative");
    if (const toml::node* s = r.node("mc.seed")) {
        if (s->is_integer()) {
            const std::int64_t v = *s->value<std::int64_t>();
            if (v < 0) r.fail("mc.seed", "must be nonnegative");
            c.seed = static_cast<std::uint64_t>(v);
        } else if (s->is_string()) {
            try {
                std::size_t used = 0;
                const std::string text = *s->value<std::string>();
                c.seed = std::stoull(text, &used, 0);
                if (used != text.size()) throw std::invalid_argument(text);
            } catch (const std::exception&) {
                r.fail("mc.seed", "not an unsigned 64-bit integer");
            }
        } else {
            r.fail("mc.seed", "expected an integer or a decimal string");
        }
    }
    c.record_paths = r.get<int>("mc.record_paths", c.record_paths);
    c.remainders = r.get<bool>("mc.remainders", c.remainders);
    c.limit_simulation = r.get<bool>("mc.limit_simulation", c.limit_simulation);
    if (const toml::node* e = r.node("mc.ergodic")) {
        const toml::array* a = e->as_array();
        if (!a) r.fail("mc.ergodic", "expected an array of tables");
        for (std::size_t i = 0; i < a->size(); ++i) {
            const std::string path = "mc.ergodic[" + std::to_string(i) + "]";
            const toml::table* t = a->get(i)->as_table();
            if (!t) r.fail(path, "expected a table");
            ErgodicSpec es;
            for (const auto& [key, v] : *t) {
                const std::string k(key.str());
                if (k == "label") es.label = r.as<std::string>(v, path + ".label");
                else if (k == "phi") es.phi = r.as<std::string>(v, path + ".phi");
                else if (k == "companion") es.companion = r.as<std::string>(v, path + ".companion");
                else r.fail(path + "." + k, "unknown key");
            }
            if (es.phi.empty()) r.fail(path + ".phi", "missing");
            if (es.label.empty()) es.label = "ergodic" + std::to_string(i);
            c.ergodic.push_back(es);
        }
    }

    c.k_list = r.get<std::vector<int>>("sweep.k", {});
    if (c.k_list.empty()) r.fail("sweep.k", "at least one integer reciprocal 1/ε is required");
    for (int k : c.k_list)
        if (k < 1) r.fail("sweep.k", "entries must be positive integers (ε = 1/k)");
    c.n_list = r.get<std::vector<int>>("sweep.n", {});
    for (int n : c.n_list)
        if (n < 1) r.fail("sweep.n", "entries must be positive integers");
    c.m_candidates = r.get<std::vector<int>>("sweep.m_candidates", {});
    c.y_bound = r.get<double>("sweep.y_bound", c.y_bound);
    c.density_points = r.get<int>("sweep.density_points", c.density_points);
    c.decreasing = r.get<std::vector<std::string>>("sweep.decreasing", {"pde_sup_err", "sup_Y_theta2", "int_Z_theta2"});

    c.formats = r.get<std::vector<std::string>>("output.formats", c.formats);
    for (const auto& f : c.formats)
        if (f != "json" && f != "csv" && f != "plotdata") r.fail("output.formats", "unknown format '" + f + "'");
    c.raw_paths = r.get<bool>("output.raw_paths", c.raw_paths);
    c.profile_points = r.get<int>("output.profile_points", c.profile_points);
    if (c.raw_paths && c.record_paths == 0) c.record_paths = 8;

    std::sort(c.k_list.begin(), c.k_list.end());
    c.k_list.erase(std::unique(c.k_list.begin(), c.k_list.end()), c.k_list.end());
    std::sort(c.n_list.begin(), c.n_list.end());
    c.n_list.erase(std::unique(c.n_list.begin(), c.n_list.end()), c.n_list.end());
    return c;
}

ExperimentConfig load_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), file.string());
}

// ---------------------------------------------------------------------------
// Pipeline

StageError::StageError(std::string stage, std::string hash, const std::string& message, ErrorKind kind)
    : Error(kind, "stage " + stage + " (artifact " + hash.substr(0, 16) + "): " + message),
      stage_(std::move(stage)),
      hash_(std::move(hash)) {}

Stage stage_from_name(const std::string& name) {
    static const std::map<std::string, Stage> names = {{"validate", Stage::validate}, {"cells", Stage::cells},
                                                       {"table", Stage::table},       {"pde", Stage::pde},
                                                       {"simulate", Stage::simulate}, {"sweep", Stage::sweep},
                                                       {"report", Stage::report}};
    auto it = names.find(name);
    if (it == names.end()) throw UsageError("unknown stage '" + name + "'");
    return it->second;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::validate: return "validate";
        case Stage::cells: return "cells";
        case Stage::table: return "table";
        case Stage::pde: return "pde";
        case Stage::simulate: return "simulate";
        case Stage::sweep: return "sweep";
        case Stage::report: return "report";
    }
    return "?";
}

namespace {

json estimate_json(const Estimate& e) { return {{"value", e.mean}, {"se", e.se}}; }

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Row metric name for an auxiliary functional column ("aux<i>_<what>").
const std::vector<std::pair<std::string, std::string>>& aux_metrics() {
    static const std::vector<std::pair<std::string, std::string>> m = {
        {"sup_UX2", "sup_U_X2"}, {"sup_VY2", "sup_V_Y2"}, {"int_WZ2", "int_What_Zhat2"},
        {"sup_abs_UX", "sup_abs_U_X"}, {"local_int_WZ2", "local_int_What_Zhat2"}};
    return m;
}

json holder_json(const HolderMonitor& h) {
    return {{"eta", h.eta}, {"shifts", h.shifts}, {"increments", h.increments}, {"exponent", h.exponent},
            {"quotient", h.quotient}};
}

bool is_aux_metric(const std::string& name) {
    for (const auto& [col, metric] : aux_metrics())
        if (metric == name) return true;
    return false;
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig config, RunOptions options)
    : config_(std::move(config)), options_(std::move(options)) {
    if (!config_.seed) throw ConfigError("mc.seed is required (or pass --seed)");
    if (!options_.cache_dir.empty()) cache_ = ArrayCache(options_.cache_dir);
    config_hash_ = hash_of(config_json(config_));
    run_["cache"] = json::array();
    run_["stage_seconds"] = json::object();
}

void Pipeline::note(const std::string& message) const {
    if (options_.log) options_.log(message);
}

template <class F>
void Pipeline::guarded(Stage stage, const std::string& hash, F&& body) {
    try {
        body();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        // Drop the "<kind> error: " prefix; the stage error repeats the kind.
        const std::string what = e.what();
        const std::string prefix = std::string(to_string(e.kind())) + " error: ";
        throw StageError(stage_name(stage), hash, what.rfind(prefix, 0) == 0 ? what.substr(prefix.size()) : what,
                         e.kind());
    } catch (const std::exception& e) {
        throw StageError(stage_name(stage), hash, e.what());
    }
}

void Pipeline::run(Stage last) {
    const int target = static_cast<int>(last);
    for (int s = done_ + 1; s <= target; ++s) {
        const auto start = std::chrono::steady_clock::now();
        switch (static_cast<Stage>(s)) {
            case Stage::validate: stage_validate(); break;
            case Stage::cells: stage_cells(); break;
            case Stage::table: stage_table(); break;
            case Stage::pde: stage_pde(); break;
            case Stage::simulate: stage_simulate(); break;
            case Stage::sweep: stage_sweep(); break;
            case Stage::report: break;
        }
        if (static_cast<Stage>(s) != Stage::report)
            run_["stage_seconds"][stage_name(static_cast<Stage>(s))] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        done_ = s;
    }
    stage_report();
}

void Pipeline::stage_validate() {
    guarded(Stage::validate, config_hash_, [&] {
        note("validate");
        spec_ = CoefficientSpec::build(config_.coefficients);
        if (config_.nodes_per_k < 16) throw ConfigError("grid.M_per_k must be at least 16");
        const ValidationReport v = validate_assumptions(*spec_, 64);
        json checks = json::array();
        std::string failed;
        for (const auto& c : v.checks) {
            checks.push_back({{"id", c.id},
                              {"passed", c.passed},
                              {"report_only", c.report_only},
                              {"measured", c.measured},
                              {"bound", c.bound},
                              {"note", c.note}});
            if (!c.passed && !c.report_only) failed += (failed.empty() ? "" : ", ") + c.id;
        }
        report_["validation"] = {{"checks", checks}, {"all_passed", failed.empty()}};
        if (!failed.empty()) throw DefinitionError("hypotheses failed: " + failed);
    });
}

void Pipeline::stage_cells() {
    cells_key_ = hash_of({{"coefficient", sources_json(config_.coefficients)},
                          {"N", config_.cell_nodes},
                          {"y_box", box_json(config_.y_box)},
                          {"y_nodes", config_.y_nodes},
                          {"options",
                           {config_.cell.comp_tol, config_.cell.residual_target, config_.cell.h_y,
                            centering_name(config_.cell.centering)}}});
    guarded(Stage::cells, cells_key_, [&] {
        note("cells");
        if (auto b = cache_.load("cells", cells_key_)) {
            cells_ = std::make_shared<CellTable>(cell_table_from_bundle(*b));
            run_["cache"].push_back({{"kind", "cells"}, {"hit", true}});
        } else {
            auto t = build_cell_table(*spec_, config_.y_box, config_.y_nodes,
                                      make_grid(config_.coefficients.P, config_.cell_nodes), config_.cell,
                                      options_.threads);
            cache_.store(to_bundle(t, cells_key_));
            cells_ = std::make_shared<CellTable>(std::move(t));
            run_["cache"].push_back({{"kind", "cells"}, {"hit", false}});
        }
        double res = 0.0, rec = 0.0;
        for (const auto& n : cells_->nodes()) {
            res = std::max(res, n.max_residual);
            rec = std::max(rec, n.max_recentering);
        }
        report_["cells"] = {{"key", cells_key_},
                            {"nodes", cells_->size()},
                            {"N", config_.cell_nodes},
                            {"max_residual", res},
                            {"max_recentering", rec}};
    });
}

void Pipeline::stage_table() {
    table_key_ = hash_of({{"cells", cells_key_}, {"z_box", box_json(config_.z_box)}, {"z_nodes", config_.z_nodes}});
    guarded(Stage::table, table_key_, [&] {
        note("table");
        if (auto b = cache_.load("table", table_key_)) {
            table_ = std::make_shared<HomogenizedTable>(homogenized_table_from_bundle(*b));
            run_["cache"].push_back({{"kind", "table"}, {"hit", true}});
        } else {
            auto t = build_homogenized_table(*spec_, *cells_, config_.z_box, config_.z_nodes, options_.threads);
            cache_.store(to_bundle(t, table_key_));
            table_ = std::make_shared<HomogenizedTable>(std::move(t));
            run_["cache"].push_back({{"kind", "table"}, {"hit", false}});
        }
        json alpha = json::array();
        const int P = table_->P();
        for (std::size_t i = 0; i < table_->y_grid().size(); ++i) {
            Eigen::MatrixXd a = table_->alpha_node(i);
            std::vector<double> flat;
            for (int r = 0; r < P; ++r)
                for (int c = 0; c < P; ++c) flat.push_back(a(r, c));
            alpha.push_back({{"y", table_->y_grid().node(i)}, {"alpha", flat}});
        }
        const auto ell = check_ellipticity(*table_, config_.coefficients.constants.lambda);
        report_["table"] = {{"key", table_key_},
                            {"alpha_bar", alpha},
                            {"sup_abs_v_bar", table_->sup_abs_v_bar()},
                            {"elliptic", ell.passed},
                            {"min_eigenvalue", ell.min_eigenvalue}};
    });
}

void Pipeline::stage_pde() {
    const json settings = settings_json(config_.pde);
    const int P = config_.coefficients.P;
    auto solve_cached = [&](const std::string& kind, const json& inputs, auto&& solve) {
        const std::string key = hash_of(inputs);
        DecouplingField f;
        guarded(Stage::pde, key, [&] {
            if (auto b = cache_.load(kind, key)) {
                f = decoupling_field_from_bundle(*b);
                run_["cache"].push_back({{"kind", kind}, {"hit", true}});
            } else {
                f = solve();
                ArrayBundle bundle = to_bundle(f, key);
                bundle.kind = kind;
                cache_.store(bundle);
                run_["cache"].push_back({{"kind", kind}, {"hit", false}});
            }
        });
        return std::make_pair(f, key);
    };
    const TorusGrid grid = make_grid(P, config_.pde_nodes);
    const json H = config_.coefficients.H;
    note("pde: limit");
    auto [lim, lim_key] = solve_cached(
        "limit", {{"table", table_key_}, {"H", H}, {"M", config_.pde_nodes}, {"T", config_.T}, {"settings", settings}},
        [&] { return solve_limit_system(table_, sample_terminal(*spec_, grid), config_.T, grid, config_.pde); });
    limit_ = std::move(lim);
    json pde = {{"limit",
                 {{"key", lim_key},
                  {"M", config_.pde_nodes},
                  {"sup_abs", limit_.sup_abs()},
                  {"sup_grad", limit_.sup_grad()},
                  {"grad_holder", holder_json(gradient_holder_monitor(limit_, 0.1 * config_.T))},
                  {"steps", limit_.stats.steps},
                  {"rejected", limit_.stats.rejected}}}};
    FieldSampler theta(limit_);
    json eps = json::array();
    double y_bound = std::max(config_.y_bound, 0.0);
    const bool auto_bound = config_.y_bound <= 0.0;
    if (auto_bound) y_bound = limit_.sup_abs();
    for (int k : config_.k_list) {
        const int M = std::max(config_.pde_nodes, config_.nodes_per_k * k);
        note("pde: epsilon 1/" + std::to_string(k) + " on M=" + std::to_string(M));
        auto [f, key] = solve_cached(
            "epsilon",
            {{"coefficient", sources_json(config_.coefficients)}, {"k", k}, {"M", M}, {"T", config_.T}, {"settings", settings}},
            [&] { return solve_epsilon_system(*spec_, k, config_.T, make_grid(P, M), config_.pde); });
        // sup_x |θ_ε(0, x) − θ(0, x)| at the ε-grid nodes.
        double err = 0.0;
        std::vector<double> th(static_cast<std::size_t>(f.Q));
        for (Eigen::Index i = 0; i < f.grid.size(); ++i) {
            Eigen::VectorXd x = f.grid.node(i);
            theta.eval(0.0, x.data(), th.data(), nullptr);
            for (int j = 0; j < f.Q; ++j) err = std::max(err, std::fabs(f.theta.front()(i, j) - th[static_cast<std::size_t>(j)]));
        }
        if (auto_bound) y_bound = std::max(y_bound, f.sup_abs());
        eps.push_back({{"k", k},
                       {"epsilon", 1.0 / k},
                       {"key", key},
                       {"M", M},
                       {"sup_abs", f.sup_abs()},
                       {"sup_grad", f.sup_grad()},
                       {"sup_err", err},
                       {"steps", f.stats.steps},
                       {"rejected", f.stats.rejected},
                       {"dealiased", f.stats.dealiased}});
        eps_[k] = std::move(f);
    }
    pde["epsilon"] = eps;
    json reg = json::array();
    for (int n : config_.n_list) {
        note("pde: regularized n=" + std::to_string(n));
        MollificationChoice choice;
        auto [z, key] = solve_cached(
            "regularized",
            {{"table", table_key_}, {"H", H}, {"M", config_.pde_nodes}, {"T", config_.T}, {"n", n},
             {"density_points", config_.density_points}, {"settings", settings}},
            [&] {
                auto data = mollify_terminal_and_driver(table_, sample_terminal(*spec_, grid), grid, n,
                                                        config_.density_points);
                return solve_regularized_system(data, config_.T, grid, config_.pde);
            });
        guarded(Stage::pde, key, [&] {
            std::vector<int> candidates = config_.m_candidates;
            if (candidates.empty())
                for (int m = n; m <= 16 * n; m *= 2) candidates.push_back(m);
            choice = select_mollification_index(cells_, z, n, candidates, y_bound);
        });
        const std::size_t pick =
            static_cast<std::size_t>(std::find(choice.candidates.begin(), choice.candidates.end(), choice.m) -
                                     choice.candidates.begin());
        reg.push_back({{"n", n},
                       {"key", key},
                       {"m", choice.m},
                       {"warning", choice.warning},
                       {"hessian_sup", choice.hessian_sup},
                       {"y_bound", choice.y_bound},
                       {"ball_truncated", choice.ball_truncated},
                       {"candidates", choice.candidates},
                       {"density_gaps", choice.density_gaps},
                       {"products", choice.products},
                       {"inequality_holds", pick < choice.products.size() && choice.products[pick] <= 1.0 / n},
                       {"sup_abs", z.sup_abs()}});
        if (choice.warning) run_["warnings"].push_back("no m candidate satisfied the m(n) inequality for n=" + std::to_string(n));
        zeta_[n] = std::move(z);
        mchoice_[n] = choice;
    }
    pde["regularized"] = reg;
    pde["y_bound"] = y_bound;

    // θ(0, ·) and θ_ε(0, ·) profiles along the first axis.
    json profiles = json::array();
    auto profile = [&](const DecouplingField& f, const std::string& system, int k) {
        FieldSampler s(f);
        std::vector<double> xs, vs;
        std::vector<double> x(static_cast<std::size_t>(P), 0.0), th(static_cast<std::size_t>(f.Q));
        for (int i = 0; i < config_.profile_points; ++i) {
            x[0] = static_cast<double>(i) / config_.profile_points;
            s.eval(0.0, x.data(), th.data(), nullptr);
            xs.push_back(x[0]);
            vs.push_back(th[0]);
        }
        profiles.push_back({{"system", system}, {"k", k}, {"x", xs}, {"theta", vs}});
    };
    profile(limit_, "limit", 0);
    for (const auto& [k, f] : eps_) profile(f, "epsilon", k);
    pde["profiles"] = profiles;
    report_["pde"] = pde;
}

void Pipeline::stage_simulate() {
    guarded(Stage::simulate, config_hash_, [&] {
        const int P = config_.coefficients.P;
        FieldSampler theta(limit_);
        CellFieldSampler cells(cells_);
        std::vector<FieldSampler> zetas;
        std::vector<TorusFieldTable> densities;
        zetas.reserve(config_.n_list.size());
        densities.reserve(config_.n_list.size());
        for (int n : config_.n_list) {
            zetas.emplace_back(zeta_.at(n));
            densities.push_back(
                mollified_density_table(MollifiedDensity(cells_, mchoice_.at(n).m, config_.density_points)));
        }
        std::vector<ErgodicInput> ergodic;
        for (const auto& e : config_.ergodic) {
            ErgodicInput in;
            in.label = e.label;
            in.phi = compile_test_function(e.phi, P, config_.coefficients.Q);
            if (e.companion == "x_hat") {
                in.companion = Companion::x_hat;
            } else if (e.companion == "constant") {
                in.companion = Companion::constant;
            } else if (e.companion.rfind("aux:", 0) == 0) {
                const int n = std::stoi(e.companion.substr(4));
                auto it = std::find(config_.n_list.begin(), config_.n_list.end(), n);
                if (it == config_.n_list.end()) throw ConfigError("ergodic companion " + e.companion + " is not in sweep.n");
                in.companion = Companion::auxiliary;
                in.auxiliary = static_cast<int>(it - config_.n_list.begin());
            } else {
                throw ConfigError("unknown ergodic companion '" + e.companion + "'");
            }
            ergodic.push_back(std::move(in));
        }
        std::map<int, int> steps;
        int brownian = 1;
        for (int k : config_.k_list) {
            steps[k] = config_.n_steps > 0 ? config_.n_steps
                                           : euler_steps(k, config_.T - config_.t0, config_.fast_step, config_.min_steps);
            brownian = std::lcm(brownian, steps[k]);
        }
        if (config_.brownian_steps > 0) {
            if (config_.brownian_steps % brownian != 0)
                throw ConfigError("mc.brownian_steps must be a multiple of " + std::to_string(brownian));
            brownian = config_.brownian_steps;
        }
        json mc = json::array();
        for (int k : config_.k_list) {
            note("simulate: epsilon 1/" + std::to_string(k) + ", " + std::to_string(steps[k]) + " steps");
            FieldSampler theta_eps(eps_.at(k));
            SimInputs in;
            in.spec = &*spec_;
            in.theta_eps = &theta_eps;
            in.theta = &theta;
            in.cells = &cells;
            in.table = config_.limit_simulation ? table_.get() : nullptr;
            in.remainders = config_.remainders;
            for (std::size_t i = 0; i < config_.n_list.size(); ++i)
                in.auxiliary.push_back(AuxiliaryInput{config_.n_list[i], mchoice_.at(config_.n_list[i]).m, &zetas[i],
                                                      &densities[i]});
            in.ergodic = ergodic;
            SimConfig sc;
            sc.k = k;
            sc.t0 = config_.t0;
            sc.T = config_.T;
            sc.x0 = Eigen::Map<const Eigen::VectorXd>(config_.x0.data(), P);
            sc.n_paths = config_.n_paths;
            sc.n_steps = steps[k];
            sc.brownian_steps = brownian;
            sc.seed = *config_.seed;
            sc.record_paths = config_.raw_paths ? config_.record_paths : 0;
            PathEnsemble ens = simulate(sc, in);
            mc.push_back({{"k", k},
                          {"epsilon", 1.0 / k},
                          {"n_steps", steps[k]},
                          {"brownian_steps", brownian},
                          {"h", ens.h},
                          {"sup_abs_Y", ens.sup_abs_Y},
                          {"sup_abs_theta_eps", eps_.at(k).sup_abs()},
                          {"cell_clamps", ens.cell_clamps},
                          {"density_clamps", ens.density_clamps},
                          {"min_density_ratio", ens.min_density_ratio}});
            if (config_.raw_paths) recorded_[k] = std::move(ens.recorded);
            ensembles_[k] = std::move(ens.f);
        }
        report_["mc"] = {{"n_paths", config_.n_paths}, {"seed", std::to_string(*config_.seed)}, {"ensembles", mc}};
    });
}

void Pipeline::stage_sweep() {
    guarded(Stage::sweep, config_hash_, [&] {
        rows_.clear();
        const std::vector<int> ns = config_.n_list.empty() ? std::vector<int>{0} : config_.n_list;
        std::map<int, double> pde_err;
        for (const auto& e : report_["pde"]["epsilon"]) pde_err[e["k"].get<int>()] = e["sup_err"].get<double>();
        const std::set<std::string> skip = {fn::sup_Xhat_gap};
        for (int k : config_.k_list) {
            const PathFunctionals& f = ensembles_.at(k);
            for (std::size_t ni = 0; ni < ns.size(); ++ni) {
                SweepRow row;
                row.k = k;
                row.n = ns[ni];
                row.metrics["pde_sup_err"] = Estimate{pde_err.at(k), 0.0};
                for (const auto& name : f.names()) {
                    if (name.rfind("aux", 0) == 0) continue;
                    row.metrics[name] = f.estimate(name);
                }
                for (int i = 0; i < config_.coefficients.P; ++i)
                    if (f.has(fn::lim_X_T(i))) {
                        row.metrics["X_T_minus_lim_" + std::to_string(i + 1)] =
                            paired_difference(f.column(fn::X_T(i)), f.column(fn::lim_X_T(i)));
                        row.metrics["X_T_sq_minus_lim_" + std::to_string(i + 1)] =
                            paired_difference(f.column(fn::X_T2(i)), f.column(fn::lim_X_T2(i)));
                    }
                for (std::size_t e = 0; e < config_.ergodic.size(); ++e) {
                    const auto name = fn::ergodic(static_cast<int>(e));
                    row.metrics.erase(name);
                    row.metrics["ergodic_" + config_.ergodic[e].label] = f.estimate(name);
                }
                if (!config_.n_list.empty()) {
                    for (const auto& [col, metric] : aux_metrics())
                        row.metrics[metric] = f.estimate(fn::aux(static_cast<int>(ni), col));
                    row.metrics["m_n"] = Estimate{static_cast<double>(mchoice_.at(ns[ni]).m), 0.0};
                }
                rows_.push_back(std::move(row));
            }
        }

        // Per-path samples behind a row metric, for paired comparisons across ε.
        auto samples = [&](int k, int ni, const std::string& metric) -> std::optional<Eigen::VectorXd> {
            const PathFunctionals& f = ensembles_.at(k);
            for (const auto& [col, m] : aux_metrics())
                if (m == metric) return f.column(fn::aux(ni, col));
            if (metric.rfind("ergodic_", 0) == 0)
                for (std::size_t e = 0; e < config_.ergodic.size(); ++e)
                    if (metric == "ergodic_" + config_.ergodic[e].label) return f.column(fn::ergodic(static_cast<int>(e)));
            if (f.has(metric)) return f.column(metric);
            return std::nullopt;
        };
        auto judge = [&](const std::vector<Estimate>& est, const std::vector<std::optional<Eigen::VectorXd>>& s,
                         json& steps) {
            Verdict overall = Verdict::pass;
            bool any_fail = false;
            for (std::size_t i = 0; i + 1 < est.size(); ++i) {
                Estimate d;
                if (s[i] && s[i + 1]) {
                    d = paired_difference(*s[i], *s[i + 1]);
                } else {
                    d = Estimate{est[i].mean - est[i + 1].mean, std::hypot(est[i].se, est[i + 1].se)};
                }
                Verdict v = decrease_verdict(d);
                // Deterministic metrics within solver tolerance, or both values at roundoff, do not count.
                const double scale = std::max(std::fabs(est[i].mean), std::fabs(est[i + 1].mean));
                if ((d.se == 0.0 && std::fabs(d.mean) <= 1e-10) || scale <= 1e-18) v = Verdict::abstain;
                steps.push_back({{"difference", d.mean}, {"se", d.se}, {"verdict", verdict_name(v)}});
                if (v == Verdict::fail) any_fail = true;
                if (v != Verdict::pass) overall = Verdict::abstain;
            }
            return any_fail ? Verdict::fail : overall;
        };
        json verdicts = json::array();
        verdicts_pass_ = true;
        if (config_.k_list.size() > 1) {
            for (const auto& metric : config_.decreasing) {
                const bool aux = is_aux_metric(metric);
                const std::vector<int> over_n = aux ? ns : std::vector<int>{ns.front()};
                for (std::size_t ni = 0; ni < over_n.size(); ++ni) {
                    std::vector<Estimate> est;
                    std::vector<std::optional<Eigen::VectorXd>> s;
                    for (const auto& row : rows_)
                        if (row.n == over_n[ni]) {
                            auto it = row.metrics.find(metric);
                            if (it == row.metrics.end()) throw ConfigError("sweep.decreasing names an unknown metric '" + metric + "'");
                            est.push_back(it->second);
                            s.push_back(samples(row.k, static_cast<int>(ni), metric));
                        }
                    json steps = json::array();
                    const Verdict v = judge(est, s, steps);
                    if (v == Verdict::fail) verdicts_pass_ = false;
                    verdicts.push_back({{"metric", metric}, {"axis", "epsilon"}, {"n", over_n[ni]},
                                        {"verdict", verdict_name(v)}, {"steps", steps}});
                }
            }
        }
        if (ns.size() > 1) {
            // Floors along n at the smallest ε.
            const int k = config_.k_list.back();
            for (const auto& metric : config_.decreasing) {
                if (!is_aux_metric(metric)) continue;
                std::vector<Estimate> est;
                std::vector<std::optional<Eigen::VectorXd>> s;
                for (std::size_t ni = 0; ni < ns.size(); ++ni) {
                    for (const auto& row : rows_)
                        if (row.k == k && row.n == ns[ni]) est.push_back(row.metrics.at(metric));
                    s.push_back(samples(k, static_cast<int>(ni), metric));
                }
                json steps = json::array();
                const Verdict v = judge(est, s, steps);
                if (v == Verdict::fail) verdicts_pass_ = false;
                verdicts.push_back({{"metric", metric}, {"axis", "n"}, {"k", k}, {"verdict", verdict_name(v)},
                                    {"steps", steps}});
            }
        }
        json rows = json::array();
        for (const auto& r : rows_) {
            json m = json::object();
            for (const auto& [name, e] : r.metrics) m[name] = estimate_json(e);
            rows.push_back({{"k", r.k}, {"epsilon", 1.0 / r.k}, {"n", r.n}, {"metrics", m}});
        }
        report_["sweep"] = {{"rows", rows}, {"verdicts", verdicts}};
        report_["acceptance"] = {{"verdict", verdicts_pass_ ? "pass" : "fail"}};
    });
}

void Pipeline::stage_report() {
    json cfg = config_json(config_);
    report_["config"] = {{"hash", config_hash_}, {"parsed", cfg}, {"text", config_.source_text}};
    report_["format"] = "homz-report-1";
    report_["last_stage"] = stage_name(static_cast<Stage>(std::max(done_, 0)));
    run_["finished_utc"] = utc_now();
    run_["compiler"] = __VERSION__;
    report_["run"] = run_;
}

// ---------------------------------------------------------------------------
// Export

namespace {

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

fs::path export_report(const json& report, const std::string& format, const fs::path& dir, const std::string& stem) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw UsageError("cannot create " + dir.string() + ": " + ec.message());
    fs::path file;
    std::string body;
    if (format == "json") {
        file = dir / (stem + ".json");
        body = report.dump(2) + "\n";
    } else if (format == "csv") {
        file = dir / (stem + "_sweep.csv");
        std::set<std::string> names;
        const json rows = report.contains("sweep") ? report["sweep"]["rows"] : json::array();
        for (const auto& r : rows)
            for (const auto& [name, v] : r["metrics"].items()) names.insert(name);
        std::ostringstream os;
        os << "k,epsilon,n";
        for (const auto& n : names) os << "," << n << "," << n << "_se";
        os << "\n";
        for (const auto& r : rows) {
            os << r["k"].get<int>() << "," << num(r["epsilon"].get<double>()) << "," << r["n"].get<int>();
            for (const auto& n : names) {
                if (r["metrics"].contains(n))
                    os << "," << num(r["metrics"][n]["value"].get<double>()) << "," << num(r["metrics"][n]["se"].get<double>());
                else
                    os << ",,";
            }
            os << "\n";
        }
        body = os.str();
    } else if (format == "plotdata") {
        file = dir / (stem + "_plot.csv");
        std::ostringstream os;
        os << "metric,epsilon,n,x,value,se\n";
        if (report.contains("sweep"))
            for (const auto& r : report["sweep"]["rows"])
                for (const auto& [name, v] : r["metrics"].items())
                    os << name << "," << num(r["epsilon"].get<double>()) << "," << r["n"].get<int>() << ",,"
                       << num(v["value"].get<double>()) << "," << num(v["se"].get<double>()) << "\n";
        if (report.contains("pde") && report["pde"].contains("profiles"))
            for (const auto& p : report["pde"]["profiles"]) {
                const bool lim = p["system"] == "limit";
                const std::string metric = lim ? "theta_profile" : "theta_eps_profile";
                const std::string eps = lim ? "0" : num(1.0 / p["k"].get<int>());
                const auto& xs = p["x"];
                const auto& vs = p["theta"];
                for (std::size_t i = 0; i < xs.size(); ++i)
                    os << metric << "," << eps << ",0," << num(xs[i].get<double>()) << "," << num(vs[i].get<double>())
                       << ",0\n";
            }
        body = os.str();
    } else {
        throw UsageError("unknown export format '" + format + "' (json, csv, plotdata)");
    }
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + file.string());
    out << body;
    if (!out) throw UsageError("short write to " + file.string());
    return file;
}

std::string deterministic_dump(const json& report) {
    json copy = report;
    copy.erase("run");
    return copy.dump(2);
}

}  // namespace homz
