#pragma once

#include <stdexcept>
#include <string>

namespace smarteff {

/// Malformed input, failed validation, or an option combination that cannot
/// be analyzed. The CLI maps this to exit status 2.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

/// Singular systems, non-convergence, separation. The CLI maps this to exit
/// status 3.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace smarteff
