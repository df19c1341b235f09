#pragma once

// Central finite-difference gradient verification. The checker re-evaluates
// the forward function with perturbed leaf values, so it exercises none of
// the backward-pass code it validates.

#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

struct GradCheckResult {
  bool pass = true;
  double max_rel_err = 0.0;
  std::string worst;  // "<leaf>[<index>]" of the worst coordinate
  size_t checked = 0;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "ok" : "FAIL") << "  max_rel_err=" << std::scientific << std::setprecision(3)
       << max_rel_err << "  coords=" << checked;
    if (!pass) os << "  worst=" << worst;
    return os.str();
  }
};

// Compare reverse-mode gradients of scalar fn() against central differences
// at sampled coordinates of each leaf. A coordinate passes when
//   |ad - fd| <= tol * max(|ad|, |fd|)  or  |ad - fd| <= abs_floor.
// samples_per_leaf <= 0 checks every coordinate.
template <typename Real>
GradCheckResult check_gradients(const std::function<Tensor<Real>()> &fn,
                                std::vector<std::pair<std::string, Tensor<Real>>> leaves,
                                double h = 1e-5, double tol = 1e-4, uint64_t seed = 1,
                                int samples_per_leaf = 24, double abs_floor = 1e-7) {
  GradCheckResult res;
  for (auto &[name, leaf] : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  auto loss = fn();
  backward(loss);

  std::vector<DataVec<Real>> ad;
  ad.reserve(leaves.size());
  for (auto &[name, leaf] : leaves) ad.push_back(leaf.grad());

  Rng rng(seed ^ 0x5ca1ab1eULL);
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto &[name, leaf] = leaves[li];
    std::vector<size_t> coords;
    if (samples_per_leaf <= 0 || static_cast<size_t>(samples_per_leaf) >= leaf.size()) {
      coords.resize(leaf.size());
      for (size_t i = 0; i < leaf.size(); ++i) coords[i] = i;
    } else {
      for (int i = 0; i < samples_per_leaf; ++i) coords.push_back(rng.below(leaf.size()));
    }
    for (size_t ci : coords) {
      const Real v0 = leaf[ci];
      double fplus, fminus;
      {
        NoGradGuard ng;
        leaf[ci] = v0 + static_cast<Real>(h);
        fplus = static_cast<double>(fn().item());
        leaf[ci] = v0 - static_cast<Real>(h);
        fminus = static_cast<double>(fn().item());
        leaf[ci] = v0;
      }
      const double fd = (fplus - fminus) / (2.0 * h);
      const double adv = static_cast<double>(ad[li][ci]);
      const double diff = std::abs(adv - fd);
      const double denom = std::max(std::abs(adv), std::abs(fd));
      const double rel = denom > 0 ? diff / denom : 0.0;
      ++res.checked;
      const bool ok = diff <= tol * denom || diff <= abs_floor;
      if (rel > res.max_rel_err && diff > abs_floor) {
        res.max_rel_err = rel;
        res.worst = name + "[" + std::to_string(ci) + "]";
      }
      if (!ok) res.pass = false;
    }
  }
  return res;
}

}  // namespace wecdg
