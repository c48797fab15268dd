#include "pcas/tensor.hpp"

#include <cmath>
#include <sstream>

#include "pcas/logging.hpp"

namespace pcas {

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d < 0) throw Error("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor Tensor::from(Shape s, std::vector<double> values) {
  if (static_cast<int>(values.size()) != shape_numel(s))
    throw Error("Tensor::from: " + std::to_string(values.size()) +
                " values for shape " + shape_str(s));
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(values);
  return t;
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Tensor& t) { return all_finite(t.data); }

}  // namespace pcas
