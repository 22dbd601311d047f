#pragma once

#include <stdexcept>
#include <string>

namespace tamed_sde {

/// Invalid argument to an operation (step sizes, ratios, sample counts).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A model or experiment was wired in a way the operation cannot use
/// (e.g. second variations requested on a model without Hessians).
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameter combination outside the supported range (e.g. alpha3 = 0 with a
/// Duffing-van der Pol certificate).
class UnsupportedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A callback produced NaN or infinity.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lyapunov candidate evaluated at a point where it is not positive.
class CertificateDomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tamed_sde
