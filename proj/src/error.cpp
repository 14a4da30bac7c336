#include "twophase/error.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <string>

#include "twophase/parallel.hpp"

namespace twophase {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io: return "io";
        case ErrorKind::parse: return "parse";
        case ErrorKind::schema: return "schema";
        case ErrorKind::partition: return "partition";
        case ErrorKind::ledger: return "ledger";
        case ErrorKind::domain: return "domain";
        case ErrorKind::convergence: return "convergence";
        case ErrorKind::infeasible: return "infeasible";
        case ErrorKind::degenerate: return "degenerate";
        case ErrorKind::ill_conditioned: return "ill_conditioned";
        case ErrorKind::invalid_argument: return "invalid_argument";
    }
    return "unknown";
}


namespace {
std::atomic<unsigned> worker_override{0};
}

void set_worker_count(unsigned n) { worker_override = n; }

unsigned worker_count() {
    if (const unsigned n = worker_override.load()) return n;
    return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace twophase
