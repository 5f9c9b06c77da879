#include "mcas/tensor.hpp"

#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "mcas/errors.hpp"

namespace mcas {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values, bool requires_grad)
    : shape(std::move(s)), data(std::move(values)) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  set_grad_enabled(requires_grad);
}

Tensor Tensor::zeros(Shape s, bool requires_grad) { return filled(std::move(s), 0.0, requires_grad); }

Tensor Tensor::filled(Shape s, double value, bool requires_grad) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::uniform(Shape s, double bound, Rng& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(s), std::move(v), requires_grad);
}

void Tensor::set_grad_enabled(bool on) {
  grad_enabled = on;
  if (on) {
    grad.resize(data.size(), 0.0);
  } else {
    grad.clear();
    grad.shrink_to_fit();
  }
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

std::uint64_t hash_values(std::span<const Tensor* const> tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Tensor* t : tensors) {
    for (double v : t->data) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

}  // namespace mcas
