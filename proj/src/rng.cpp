#include "percept/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "percept/error.hpp"

namespace percept {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(theta);
  has_spare_ = true;
  return radius * std::cos(theta);
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  out.precision(17);
  out << spare_;
  return out.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream in(state);
  int spare_flag = 0;
  in >> engine_ >> spare_flag >> spare_;
  if (!in) throw DataSchemaMismatch("corrupt RNG state");
  has_spare_ = spare_flag != 0;
}

}  // namespace percept
