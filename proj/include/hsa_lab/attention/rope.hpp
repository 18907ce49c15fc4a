#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace hsa_lab {

/// Rotary position embedding. Dimension i is paired with i + head_dim/2 and
/// the pair is rotated by pos * base^(-2i/head_dim).
template <class T>
class RopeTable {
 public:
  RopeTable(std::size_t head_dim, double base = 10000.0) : head_dim_(head_dim), base_(base) {
    if (head_dim == 0 || head_dim % 2 != 0) throw std::invalid_argument("rope: head_dim must be even");
    inv_freq_.resize(head_dim / 2);
    for (std::size_t i = 0; i < inv_freq_.size(); ++i) {
      inv_freq_[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
  }

  std::size_t head_dim() const { return head_dim_; }
  double base() const { return base_; }

  /// Rotates one head vector in place; `inverse` applies the transpose.
  void rotate(std::span<T> v, std::size_t pos, bool inverse = false) const {
    const std::size_t half = head_dim_ / 2;
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(pos) * inv_freq_[i];
      const T c = static_cast<T>(std::cos(angle));
      const T s = inverse ? static_cast<T>(-std::sin(angle)) : static_cast<T>(std::sin(angle));
      const T a = v[i], b = v[i + half];
      v[i] = a * c - b * s;
      v[i + half] = a * s + b * c;
    }
  }

 private:
  std::size_t head_dim_;
  double base_;
  std::vector<double> inv_freq_;
};

}  // namespace hsa_lab
