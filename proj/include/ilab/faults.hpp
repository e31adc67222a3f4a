#pragma once

#include <stdexcept>
#include <string>

namespace ilab {

// Contract violations are caller errors: bad shapes, empty inputs,
// out-of-range arguments. Numeric faults are runtime numerical breakdowns
// (NaN/Inf escaping a node). Training faults signal diverged optimization.

struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg)
        : std::runtime_error("contract violation: " + msg) {}
};

struct NumericFault : std::runtime_error {
    explicit NumericFault(const std::string& msg)
        : std::runtime_error("numeric fault: " + msg) {}
};

struct TrainingFault : std::runtime_error {
    explicit TrainingFault(const std::string& msg)
        : std::runtime_error("training fault: " + msg) {}
};

} // namespace ilab
