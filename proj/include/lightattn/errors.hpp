#pragma once

#include <stdexcept>
#include <string>

namespace lightattn {

// Shape or size disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values or otherwise out-of-domain inputs.
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A configuration value outside its legal range.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An API contract broken by the caller (non-scalar loss, empty buffer, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// A softmax row with every entry masked out.
struct DegenerateRowError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed on-disk data (feature files, manifests, checkpoints, configs).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Semantically invalid data (bad labels, duplicate ids, missing files).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lightattn
