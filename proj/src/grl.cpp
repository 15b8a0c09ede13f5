#include "dsn/grl.hpp"

#include <cmath>
#include <string>

#include "dsn/error.hpp"

namespace dsn::grl {

void GrlConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw ConfigError("reversal coefficient alpha must be finite and >= 0, got " +
                      std::to_string(alpha));
  }
}

Matrix forward(const Matrix& x) { return x; }

Matrix backward(const Matrix& g, const GrlConfig& cfg) {
  cfg.validate();
  Matrix out = g;
  const double factor = -cfg.alpha;
  for (double& v : out.values()) v *= factor;
  return out;
}

}  // namespace dsn::grl
