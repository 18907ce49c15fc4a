#pragma once

#include <map>
#include <string>
#include <vector>

#include "hsa_lab/numerics/tensor.hpp"

namespace hsa_lab {

template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered, name-unique collection of trainable tensors.
template <std::floating_point T>
class ParameterSet {
 public:
  Tensor<T>& add(std::string name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.push_back({std::move(name), Tensor<T>::zeros(std::move(shape), true)});
    return items_.back().tensor;
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return items_[it->second].tensor;
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter<T>>& items() { return items_; }
  const std::vector<Parameter<T>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

  /// Deep copy into another element type (e.g. float weights -> double for
  /// gradient checks).
  template <std::floating_point U>
  ParameterSet<U> convert() const {
    ParameterSet<U> out;
    for (const auto& p : items_) {
      auto& t = out.add(p.name, p.tensor.shape());
      auto dst = t.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<U>(p.tensor.data()[i]);
    }
    return out;
  }

  ParameterSet clone() const { return convert<T>(); }

 private:
  std::vector<Parameter<T>> items_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace hsa_lab
