#pragma once

#include "dsn/matrix.hpp"

namespace dsn::grl {

/// Gradient reversal coefficient. Constant for a whole run.
struct GrlConfig {
  double alpha = 1.0;

  /// Throws ConfigError unless alpha is finite and >= 0.
  void validate() const;
};

/// Identity.
Matrix forward(const Matrix& x);

/// -alpha * g, elementwise.
Matrix backward(const Matrix& g, const GrlConfig& cfg);

}  // namespace dsn::grl
