#pragma once

#include <stdexcept>
#include <string>

namespace homz {

/// Broad classes of failure surfaced by the library.
enum class ErrorKind {
    definition,     ///< malformed or non-evaluable coefficient/expression
    numeric,        ///< non-finite value at a concrete point
    usage,          ///< wrong arity, bad argument, invalid configuration
    domain,         ///< query outside a supported region (mollifier support, table box)
    discretization, ///< singular or under-resolved discrete problem
    compatibility,  ///< Poisson right-hand side not centered against p
    solver,         ///< time stepper failure (step underflow, NaN)
    cache,          ///< unreadable or corrupted cache artifact
    config          ///< invalid experiment configuration
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define HOMZ_DEFINE_ERROR(Name, Kind)                                                      \
    class Name : public Error {                                                           \
    public:                                                                               \
        explicit Name(const std::string& message) : Error(ErrorKind::Kind, message) {}    \
    };

HOMZ_DEFINE_ERROR(DefinitionError, definition)
HOMZ_DEFINE_ERROR(NumericError, numeric)
HOMZ_DEFINE_ERROR(UsageError, usage)
HOMZ_DEFINE_ERROR(DomainError, domain)
HOMZ_DEFINE_ERROR(DiscretizationError, discretization)
HOMZ_DEFINE_ERROR(CompatibilityError, compatibility)
HOMZ_DEFINE_ERROR(SolverError, solver)
HOMZ_DEFINE_ERROR(CacheError, cache)
HOMZ_DEFINE_ERROR(ConfigError, config)

#undef HOMZ_DEFINE_ERROR

}  // namespace homz
