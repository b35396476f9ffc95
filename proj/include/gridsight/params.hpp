#pragma once

#include <unordered_map>

#include "gridsight/tensor.hpp"

namespace gridsight {

// Named model state. Running statistics register as non-trainable entries so
// checkpoints capture them; auxiliary-branch entries are flagged so the
// branch can be stripped for inference.
template <typename T>
struct Parameter {
  Tensor<T> tensor;
  std::string name;
  bool trainable = true;
  bool aux_only = false;
};

template <typename T>
class ParamRegistry {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (index_.count(name)) throw input_error("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_[name] = params_.size();
    params_.push_back(Parameter<T>{t, name, trainable, aux_scope_});
    return t;
  }

  // While building the auxiliary branch every registration is tagged aux.
  void set_aux_scope(bool v) { aux_scope_ = v; }
  bool aux_scope() const { return aux_scope_; }

  const std::vector<Parameter<T>>& entries() const { return params_; }
  std::vector<Parameter<T>>& entries() { return params_; }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  int64_t total_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  int64_t aux_values() const {
    int64_t n = 0;
    for (const auto& p : params_)
      if (p.aux_only) n += p.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, size_t> index_;
  bool aux_scope_ = false;
};

}  // namespace gridsight
