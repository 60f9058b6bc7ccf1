#pragma once

#include <stdexcept>
#include <string>

namespace sparsekit {

// Raised for anything a user can fix before a run starts: bad documents,
// bad configs, infeasible plans. The CLI maps this to exit code 2; every
// other exception maps to 3.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace sparsekit
