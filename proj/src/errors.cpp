#include "homz/errors.hpp"

namespace homz {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::definition: return "definition";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::usage: return "usage";
        case ErrorKind::domain: return "domain";
        case ErrorKind::discretization: return "discretization";
        case ErrorKind::compatibility: return "compatibility";
        case ErrorKind::solver: return "solver";
        case ErrorKind::cache: return "cache";
        case ErrorKind::config: return "config";
    }
    return "unknown";
}

}  // namespace homz
