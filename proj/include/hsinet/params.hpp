#pragma once

#include <map>
#include <string>
#include <vector>

#include "hsinet/rng.hpp"
#include "hsinet/tensor.hpp"

namespace hsinet {

template <typename T>
struct Param {
  std::string name;       // dotted path, e.g. "encoder2.attn.q.weight"
  std::string component;  // report bucket, e.g. "encoder2"
  Tensor<T> tensor;
  bool trainable = true;  // false for normalization running statistics
};

/// Ordered registry of every tensor a model owns. Registration order is the
/// checkpoint order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(std::string name, std::string component, Shape shape, bool trainable = true);

  /// Uniform(-bound, bound) fill.
  static void fill_uniform(Tensor<T>& t, double bound, Rng& rng);
  static void fill_normal(Tensor<T>& t, double stddev, Rng& rng);

  const std::vector<Param<T>>& entries() const { return entries_; }
  std::vector<Param<T>>& entries() { return entries_; }
  std::vector<Tensor<T>> trainable() const;
  const Param<T>& find(const std::string& name) const;

  std::size_t count(bool trainable_only = true) const;
  std::map<std::string, std::size_t> count_by_component(bool trainable_only = true) const;

  void zero_grad();

 private:
  std::vector<Param<T>> entries_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace hsinet
