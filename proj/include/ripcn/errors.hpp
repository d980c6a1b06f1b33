#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ripcn {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// config_error -> 2, data/state errors -> 3, numeric failures -> 4.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up for the requested operation.
struct dimension_error : error {
  using error::error;
};

// An argument value is outside the operation's contract.
struct parameter_error : error {
  using error::error;
};

// A configuration file or key is invalid.
struct config_error : error {
  using error::error;
};

// Input data is missing, malformed, or degenerate at the dataset level.
struct data_error : error {
  using error::error;
};

// An object was used before being fitted/loaded.
struct state_error : error {
  using error::error;
};

// A formula input is degenerate (zero occupancy, nonpositive flow, ...);
// the caller is expected to fall back to a proxy.
struct degenerate_input_error : error {
  using error::error;
};

// Numeric failure during computation: NaN gradients, colinear directions.
struct numeric_error : error {
  using error::error;
};

// Near-colinear direction enountered during orthogonalization; carries the
// index of the offending component.
struct degeneracy_error : numeric_error {
  degeneracy_error(std::size_t k, const std::string& what)
      : numeric_error(what), component(k) {}
  std::size_t component;
};

}  // namespace ripcn
