#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace twophase {

/// Error classes surfaced to callers and mapped to CLI exit codes.
enum class ErrorKind {
    io,
    parse,
    schema,
    partition,
    ledger,
    domain,
    convergence,
    infeasible,
    degenerate,
    ill_conditioned,
    invalid_argument,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace twophase
