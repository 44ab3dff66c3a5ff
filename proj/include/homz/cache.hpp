#pragma once

#include "homz/cell_problems.hpp"
#include "homz/homogenized.hpp"
#include "homz/pde.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace homz {

/// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

/// One named array of doubles in C (row-major) order.
struct CachedArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

/// Named arrays plus a JSON metadata block, persisted as one HOMZ1 file:
/// "HOMZ1", a little-endian u64 header length, the JSON header, then little-endian f64 payload.
/// The header lists each array (name, shape, dtype "f64", offset in doubles) and the SHA-256 of the payload.
struct ArrayBundle {
    std::string kind;
    std::string key;  ///< content hash of the inputs that produced the bundle
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, CachedArray> arrays;

    void put(const std::string& name, const Eigen::MatrixXd& m);
    void put(const std::string& name, const Eigen::VectorXd& v);
    void put(const std::string& name, const std::vector<double>& v);
    Eigen::MatrixXd matrix(const std::string& name) const;
    std::vector<double> vector(const std::string& name) const;
};

/// Writes to a temporary sibling and renames it into place.
void write_bundle(const std::filesystem::path& file, const ArrayBundle& bundle);
/// Throws CacheError naming the file on a bad magic, truncated payload or checksum mismatch.
ArrayBundle read_bundle(const std::filesystem::path& file);

/// Content-addressed store of bundles under a directory (`<dir>/<kind>-<key16>.homz`).
class ArrayCache {
public:
    ArrayCache() = default;  ///< disabled cache: every lookup misses and stores are dropped
    explicit ArrayCache(std::filesystem::path dir);

    bool enabled() const { return !dir_.empty(); }
    std::filesystem::path path_for(const std::string& kind, const std::string& key) const;
    std::optional<ArrayBundle> load(const std::string& kind, const std::string& key) const;
    void store(const ArrayBundle& bundle) const;

private:
    std::filesystem::path dir_;
};

ArrayBundle to_bundle(const CellTable& table, const std::string& key);
CellTable cell_table_from_bundle(const ArrayBundle& bundle);
ArrayBundle to_bundle(const HomogenizedTable& table, const std::string& key);
HomogenizedTable homogenized_table_from_bundle(const ArrayBundle& bundle);
ArrayBundle to_bundle(const DecouplingField& field, const std::string& key);
DecouplingField decoupling_field_from_bundle(const ArrayBundle& bundle);

}  // namespace homz
