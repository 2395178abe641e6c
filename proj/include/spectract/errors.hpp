#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace spectract {

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct GeometryError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Raised when a callable violates its shape contract (e.g. a denoiser
// returning the wrong latent length).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite objective during an optimization run. Carries the trajectory
// recorded up to the failure.
struct TrainingError : std::runtime_error {
    TrainingError(const std::string& what, std::vector<double> trajectory)
        : std::runtime_error(what), trajectory(std::move(trajectory)) {}
    std::vector<double> trajectory;
};

}  // namespace spectract
