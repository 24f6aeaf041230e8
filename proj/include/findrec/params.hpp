#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "findrec/autodiff.hpp"
#include "findrec/rng.hpp"

namespace findrec {

struct Parameter {
  std::string name;
  ad::Var var;
  // Row 0 is the padding row: excluded from gradients, decay and updates.
  bool frozen_row0 = false;
};

// Ordered set of named trainable tensors. Modules register their weights at
// construction; order of registration is the serialization order.
class ParamStore {
 public:
  ad::Var add(const std::string& name, Tensor init, bool frozen_row0 = false) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back(Parameter{name, ad::leaf(std::move(init), true), frozen_row0});
    return params_.back().var;
  }

  const std::vector<Parameter>& params() const noexcept { return params_; }
  std::vector<Parameter>& params() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  Parameter& get(const std::string& name) {
    return const_cast<Parameter&>(static_cast<const ParamStore&>(*this).get(name));
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
  }

  std::map<std::string, Tensor> snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& p : params_) out.emplace(p.name, p.var.value());
    return out;
  }

  void restore(const std::map<std::string, Tensor>& values) {
    for (auto& p : params_) {
      auto it = values.find(p.name);
      if (it == values.end()) throw CorruptRecord("missing parameter '" + p.name + "'");
      if (it->second.shape() != p.var.shape()) {
        throw CorruptRecord("parameter '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                            ", expected " + shape_str(p.var.shape()));
      }
      p.var.mutable_value() = it->second;
    }
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Affine map x W + b, applied to the last axis.
struct Linear {
  ad::Var weight;
  ad::Var bias;  // undefined when the layer has no bias

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = store.add(name + ".weight", rng.uniform_tensor({in, out}, -bound, bound));
    if (with_bias) bias = store.add(name + ".bias", rng.uniform_tensor({out}, -bound, bound));
  }

  ad::Var operator()(const ad::Var& x) const {
    ad::Var y = ad::matmul(x, weight);
    return bias.defined() ? ad::add(y, bias) : y;
  }
};

struct LayerNormParams {
  ad::Var gamma;
  ad::Var beta;

  LayerNormParams() = default;
  LayerNormParams(ParamStore& store, const std::string& name, std::size_t d) {
    gamma = store.add(name + ".gamma", Tensor({d}, 1.0));
    beta = store.add(name + ".beta", Tensor({d}, 0.0));
  }

  ad::Var operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

}  // namespace findrec
