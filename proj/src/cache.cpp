#include "homz/cache.hpp"

#include "homz/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace homz {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[] = "HOMZ1";
constexpr std::size_t kMagicSize = 5;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

json axes_json(const TensorGrid& g) {
    json a = json::array();
    for (const auto& ax : g.axes()) a.push_back({ax.lo, ax.hi, ax.n});
    return a;
}

TensorGrid axes_from_json(const json& a) {
    std::vector<UniformAxis> axes;
    for (const auto& e : a) axes.push_back(UniformAxis{e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<int>()});
    return TensorGrid(axes);
}

json stats_json(const SolverStats& s) {
    return {{"steps", s.steps},     {"rejected", s.rejected}, {"rhs_evals", s.rhs_evals},
            {"min_dt", s.min_dt},   {"max_dt", s.max_dt},     {"dealiased", s.dealiased}};
}

SolverStats stats_from_json(const json& j) {
    SolverStats s;
    s.steps = j.at("steps");
    s.rejected = j.at("rejected");
    s.rhs_evals = j.at("rhs_evals");
    s.min_dt = j.at("min_dt");
    s.max_dt = j.at("max_dt");
    s.dealiased = j.at("dealiased");
    return s;
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw CacheError("SHA-256 computation failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

void ArrayBundle::put(const std::string& name, const Eigen::MatrixXd& m) {
    CachedArray a;
    a.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    a.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) a.data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    arrays[name] = std::move(a);
}

void ArrayBundle::put(const std::string& name, const Eigen::VectorXd& v) {
    arrays[name] = CachedArray{{static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size())};
}

void ArrayBundle::put(const std::string& name, const std::vector<double>& v) {
    arrays[name] = CachedArray{{v.size()}, v};
}

Eigen::MatrixXd ArrayBundle::matrix(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end() || it->second.shape.size() != 2)
        throw CacheError("bundle '" + kind + "' lacks the matrix '" + name + "'");
    const auto& a = it->second;
    Eigen::MatrixXd m(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = a.data[static_cast<std::size_t>(r * m.cols() + c)];
    return m;
}

std::vector<double> ArrayBundle::vector(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw CacheError("bundle '" + kind + "' lacks the array '" + name + "'");
    return it->second.data;
}

void write_bundle(const fs::path& file, const ArrayBundle& bundle) {
    std::string payload;
    json list = json::array();
    std::size_t offset = 0;
    for (const auto& [name, a] : bundle.arrays) {
        list.push_back({{"name", name}, {"shape", a.shape}, {"dtype", "f64"}, {"offset", offset}});
        for (double v : a.data) put_u64(payload, std::bit_cast<std::uint64_t>(v));
        offset += a.data.size();
    }
    json header = {{"format", kMagic},       {"kind", bundle.kind},   {"key", bundle.key},
                   {"meta", bundle.meta},    {"arrays", list},        {"byte_order", "little"},
                   {"content_hash", sha256_hex(payload)}};
    const std::string h = header.dump();
    std::string bytes(kMagic, kMagicSize);
    put_u64(bytes, h.size());
    bytes += h;
    bytes += payload;

    std::error_code ec;
    if (file.has_parent_path()) fs::create_directories(file.parent_path(), ec);
    fs::path tmp = file;
    tmp += ".tmp" + std::to_string(std::hash<std::string>{}(bundle.key + file.string()) % 1000000);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CacheError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CacheError("short write to " + tmp.string());
    }
    fs::rename(tmp, file, ec);
    if (ec) throw CacheError("cannot move " + tmp.string() + " to " + file.string() + ": " + ec.message());
}

ArrayBundle read_bundle(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw CacheError("cannot open " + file.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < kMagicSize + 8 || bytes.compare(0, kMagicSize, kMagic) != 0)
        throw CacheError("bad magic in " + file.string());
    const std::uint64_t hlen = get_u64(bytes.data() + kMagicSize);
    if (bytes.size() < kMagicSize + 8 + hlen) throw CacheError("truncated header in " + file.string());
    json header;
    try {
        header = json::parse(bytes.substr(kMagicSize + 8, hlen));
    } catch (const json::exception& e) {
        throw CacheError("unreadable header in " + file.string() + ": " + e.what());
    }
    const std::string payload = bytes.substr(kMagicSize + 8 + hlen);
    if (sha256_hex(payload) != header.value("content_hash", ""))
        throw CacheError("checksum mismatch in " + file.string());
    ArrayBundle b;
    b.kind = header.at("kind");
    b.key = header.at("key");
    b.meta = header.at("meta");
    for (const auto& a : header.at("arrays")) {
        CachedArray arr;
        arr.shape = a.at("shape").get<std::vector<std::size_t>>();
        std::size_t count = 1;
        for (std::size_t s : arr.shape) count *= s;
        const std::size_t off = a.at("offset");
        if ((off + count) * 8 > payload.size()) throw CacheError("truncated payload in " + file.string());
        arr.data.resize(count);
        for (std::size_t i = 0; i < count; ++i) arr.data[i] = std::bit_cast<double>(get_u64(payload.data() + 8 * (off + i)));
        b.arrays[a.at("name").get<std::string>()] = std::move(arr);
    }
    return b;
}

ArrayCache::ArrayCache(fs::path dir) : dir_(std::move(dir)) {}

fs::path ArrayCache::path_for(const std::string& kind, const std::string& key) const {
    return dir_ / (kind + "-" + key.substr(0, 16) + ".homz");
}

std::optional<ArrayBundle> ArrayCache::load(const std::string& kind, const std::string& key) const {
    if (!enabled()) return std::nullopt;
    const fs::path p = path_for(kind, key);
    if (!fs::exists(p)) return std::nullopt;
    ArrayBundle b = read_bundle(p);
    if (b.kind != kind || b.key != key) return std::nullopt;
    return b;
}

void ArrayCache::store(const ArrayBundle& bundle) const {
    if (enabled()) write_bundle(path_for(bundle.kind, bundle.key), bundle);
}

// ---------------------------------------------------------------------------

ArrayBundle to_bundle(const CellTable& table, const std::string& key) {
    ArrayBundle b;
    b.kind = "cells";
    b.key = key;
    b.meta = {{"P", table.P()}, {"Q", table.Q()}, {"N", table.grid().N()}, {"y_axes", axes_json(table.y_grid())}};
    for (std::size_t i = 0; i < table.size(); ++i) {
        const CellSolution& c = table.node(i);
        const std::string pre = "node" + std::to_string(i) + ".";
        b.put(pre + "y", c.y);
        b.put(pre + "b_shift", c.b_shift);
        b.put(pre + "e_shift", c.e_shift);
        b.put(pre + "diagnostics", std::vector<double>{c.max_residual, c.max_recentering});
        for (int f = 0; f < kCellFieldCount; ++f) {
            const auto field = static_cast<CellField>(f);
            const PeriodicField& pf = cell_field(c, field);
            if (pf.values.size() > 0) b.put(pre + cell_field_name(field), pf.values);
        }
    }
    return b;
}

CellTable cell_table_from_bundle(const ArrayBundle& b) {
    const int P = b.meta.at("P"), Q = b.meta.at("Q");
    const TorusGrid grid = make_grid(P, b.meta.at("N").get<int>());
    TensorGrid yg = axes_from_json(b.meta.at("y_axes"));
    std::vector<CellSolution> nodes(yg.size());
    for (std::size_t i = 0; i < yg.size(); ++i) {
        CellSolution& c = nodes[i];
        const std::string pre = "node" + std::to_string(i) + ".";
        auto vec = [&](const std::string& n) {
            auto v = b.vector(pre + n);
            return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        c.y = vec("y");
        c.b_shift = vec("b_shift");
        c.e_shift = vec("e_shift");
        auto d = b.vector(pre + "diagnostics");
        c.max_residual = d.at(0);
        c.max_recentering = d.at(1);
        for (int f = 0; f < kCellFieldCount; ++f) {
            const auto field = static_cast<CellField>(f);
            const std::string name = pre + cell_field_name(field);
            if (b.arrays.count(name)) cell_field(c, field) = PeriodicField(grid, b.matrix(name));
        }
    }
    return CellTable(yg, grid, std::move(nodes), P, Q);
}

ArrayBundle to_bundle(const HomogenizedTable& table, const std::string& key) {
    ArrayBundle b;
    b.kind = "table";
    b.key = key;
    b.meta = {{"P", table.P()},
              {"Q", table.Q()},
              {"y_axes", axes_json(table.y_grid())},
              {"z_axes", axes_json(table.z_grid())},
              {"provenance", table.provenance}};
    b.put("alpha", table.alpha_values());
    b.put("u", table.u_values());
    b.put("v", table.v_values());
    return b;
}

HomogenizedTable homogenized_table_from_bundle(const ArrayBundle& b) {
    HomogenizedTable t(axes_from_json(b.meta.at("y_axes")), axes_from_json(b.meta.at("z_axes")), b.meta.at("P"),
                       b.meta.at("Q"), b.vector("alpha"), b.vector("u"), b.vector("v"));
    t.provenance = b.meta.at("provenance");
    return t;
}

ArrayBundle to_bundle(const DecouplingField& f, const std::string& key) {
    ArrayBundle b;
    b.kind = "field";
    b.key = key;
    b.meta = {{"system", f.system}, {"P", f.grid.P()}, {"M", f.grid.N()}, {"Q", f.Q},
              {"T", f.T},           {"stats", stats_json(f.stats)}, {"hessian", !f.hess.empty()}};
    b.put("times", f.times);
    b.put("hess_sup", f.hess_sup);
    for (std::size_t s = 0; s < f.slices(); ++s) {
        const std::string i = std::to_string(s);
        b.put("theta." + i, f.theta[s]);
        b.put("theta_t." + i, f.theta_t[s]);
        b.put("grad." + i, f.grad[s]);
        b.put("grad_t." + i, f.grad_t[s]);
        if (!f.hess.empty()) b.put("hess." + i, f.hess[s]);
    }
    return b;
}

DecouplingField decoupling_field_from_bundle(const ArrayBundle& b) {
    DecouplingField f;
    f.system = b.meta.at("system");
    f.grid = make_grid(b.meta.at("P").get<int>(), b.meta.at("M").get<int>());
    f.Q = b.meta.at("Q");
    f.T = b.meta.at("T");
    f.stats = stats_from_json(b.meta.at("stats"));
    f.times = b.vector("times");
    f.hess_sup = b.vector("hess_sup");
    const bool hess = b.meta.at("hessian");
    for (std::size_t s = 0; s < f.times.size(); ++s) {
        const std::string i = std::to_string(s);
        f.theta.push_back(b.matrix("theta." + i));
        f.theta_t.push_back(b.matrix("theta_t." + i));
        f.grad.push_back(b.matrix("grad." + i));
        f.grad_t.push_back(b.matrix("grad_t." + i));
        if (hess) f.hess.push_back(b.matrix("hess." + i));
    }
    return f;
}

}  // namespace homz
