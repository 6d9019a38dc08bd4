#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gpw/ndgrad.hpp"

namespace gpw::nd {

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Ordered registry of trainable tensors; names are unique. Handles share
// storage with the modules that registered them, so in-place optimizer
// updates are visible everywhere.
class ParameterSet {
 public:
  Tensor add(std::string name, Tensor tensor);

  Tensor normal(std::string name, Shape shape, std::mt19937_64& rng, double stddev);
  Tensor constant(std::string name, Shape shape, double value);

  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t total_elements() const;
  // Undefined tensor when absent.
  Tensor find(std::string_view name) const;
  void zero_grad();

 private:
  std::vector<Parameter> items_;
};

}  // namespace gpw::nd
