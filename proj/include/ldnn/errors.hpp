#pragma once

#include <stdexcept>
#include <string>

namespace ldnn {

/// Raised when a computation cannot produce a usable number (divergent
/// estimate, inconclusive experiment); the CLI maps it to exit code 2.
struct NumericalFailure : std::runtime_error {
    explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

} // namespace ldnn
