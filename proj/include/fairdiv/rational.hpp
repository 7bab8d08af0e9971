#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairdiv {

/// Exact rational scalar used wherever the library makes exact claims
/// (Pareto-weight vectors, barycenters, cake allocations, LP pivoting).
using Rat = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

inline double to_double(const Rat& r) { return r.convert_to<double>(); }

/// Exact conversion: every finite double is a dyadic rational.
inline Rat rat_from_double(double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("rat_from_double: non-finite value");
  return Rat(x);
}

/// Canonical "num/den" rendering ("num" when the denominator is 1).
inline std::string rat_to_string(const Rat& r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

inline Rat rat_from_string(const std::string& s) {
  try {
    return Rat(s);
  } catch (const std::exception&) {
    throw std::invalid_argument("rat_from_string: cannot parse '" + s + "'");
  }
}

inline std::vector<double> to_double_vec(const std::vector<Rat>& v) {
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& r : v) out.push_back(to_double(r));
  return out;
}

}  // namespace fairdiv
