#pragma once

#include <stdexcept>
#include <string>

namespace kvsched {

// Violation of an API precondition or internal invariant. These indicate a
// programming error in the caller, not bad data.
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Rejected input data: non-finite numbers, malformed files, infeasible specs.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

#define KVSCHED_REQUIRE(cond, msg) \
    do { if (!(cond)) throw ::kvsched::ContractError(msg); } while (0)

#define KVSCHED_INPUT_CHECK(cond, msg) \
    do { if (!(cond)) throw ::kvsched::InputError(msg); } while (0)

} // namespace kvsched
