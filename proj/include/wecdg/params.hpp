#pragma once

// Named trainable tensors plus the Adam update. Entries live in a sorted map
// so iteration order (and therefore optimizer state and checkpoints) is
// deterministic. Each tensor is initialized from an RNG seeded by
// (tree seed, entry name), making initialization independent of insertion
// order.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

template <typename Real>
class ParameterTree {
 public:
  explicit ParameterTree(uint64_t seed = 0) : seed_(seed) {}

  uint64_t seed() const { return seed_; }

  Tensor<Real> &add(const std::string &name, Tensor<Real> t) {
    t.set_requires_grad(true);
    auto [it, fresh] = entries_.emplace(name, std::move(t));
    if (!fresh) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
  }

  // uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
  Tensor<Real> &add_weight(const std::string &name, Shape shape, int fan_in) {
    Rng rng = rng_for(seed_, name);
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    return add(name, Tensor<Real>::uniform(std::move(shape), rng, -bound, bound));
  }

  Tensor<Real> &add_zeros(const std::string &name, Shape shape) {
    return add(name, Tensor<Real>::zeros(std::move(shape)));
  }

  Tensor<Real> &at(const std::string &name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<Real> &at(const std::string &name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  bool contains(const std::string &name) const { return entries_.count(name) > 0; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  size_t count() const { return entries_.size(); }

  size_t total_size() const {
    size_t n = 0;
    for (const auto &[name, t] : entries_) n += t.size();
    return n;
  }

  // Allocate-and-zero the gradient buffer of every entry. Call before each
  // forward/backward pass; entries untouched by the pass keep zero gradients.
  void zero_grad() {
    for (auto &[name, t] : entries_) t.zero_grad();
  }

 private:
  uint64_t seed_;
  std::map<std::string, Tensor<Real>> entries_;
};

// Adam with bias correction. Moment state is kept per parameter name and
// persists across steps.
template <typename Real>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps() const { return t_; }

  void step(ParameterTree<Real> &params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto &[name, p] : params) {
      if (!p.has_grad())
        throw MissingGrad("parameter '" + name + "' has no gradient; call zero_grad + backward");
      auto &m = m_[name];
      auto &v = v_[name];
      if (m.size() != p.size()) m.assign(p.size(), 0.0);
      if (v.size() != p.size()) v.assign(p.size(), 0.0);
      const Real *g = p.grad().data();
      Real *w = p.data();
      for (size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= static_cast<Real>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  // moments in double regardless of Real, so f32 training stays stable
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace wecdg
