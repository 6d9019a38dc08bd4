#include "gpw/parameters.hpp"

namespace gpw::nd {

Tensor ParameterSet::add(std::string name, Tensor tensor) {
  if (!find(name).defined()) {
    tensor.set_requires_grad(true);
    items_.push_back({std::move(name), tensor});
    return tensor;
  }
  throw ContractError("duplicate parameter name '" + name + "'");
}

Tensor ParameterSet::normal(std::string name, Shape shape, std::mt19937_64& rng,
                            double stddev) {
  return add(std::move(name), Tensor::randn(std::move(shape), rng, stddev));
}

Tensor ParameterSet::constant(std::string name, Shape shape, double value) {
  return add(std::move(name), Tensor::full(std::move(shape), value));
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.size();
  return n;
}

Tensor ParameterSet::find(std::string_view name) const {
  for (const auto& p : items_) {
    if (p.name == name) return p.tensor;
  }
  return {};
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

}  // namespace gpw::nd
