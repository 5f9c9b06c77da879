#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mcas {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. When grad_enabled, `grad` mirrors `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool grad_enabled = false;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor filled(Shape s, double value, bool requires_grad = false);
  static Tensor uniform(Shape s, double bound, Rng& rng, bool requires_grad = false);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  void set_grad_enabled(bool on);
  void zero_grad();

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

// FNV-1a over the raw bytes of every value, in order.
std::uint64_t hash_values(std::span<const Tensor* const> tensors);

}  // namespace mcas
