#include "hsinet/params.hpp"

#include <stdexcept>

namespace hsinet {

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, std::string component, Shape shape, bool trainable) {
  for (const auto& e : entries_)
    if (e.name == name) throw std::logic_error("duplicate parameter name " + name);
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), trainable);
  entries_.push_back({std::move(name), std::move(component), t, trainable});
  return t;
}

template <typename T>
void ParamStore<T>::fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void ParamStore<T>::fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
std::vector<Tensor<T>> ParamStore<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

template <typename T>
const Param<T>& ParamStore<T>::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw std::out_of_range("no parameter named " + name);
}

template <typename T>
std::size_t ParamStore<T>::count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable || !trainable_only) n += e.tensor.size();
  return n;
}

template <typename T>
std::map<std::string, std::size_t> ParamStore<T>::count_by_component(bool trainable_only) const {
  std::map<std::string, std::size_t> out;
  for (const auto& e : entries_)
    if (e.trainable || !trainable_only) out[e.component] += e.tensor.size();
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace hsinet
