#pragma once

// Training objective: weighted sum of L1, SSIM, contrastive and perceptual
// terms. The perceptual/contrastive feature extractor is a fixed, seeded,
// frozen three-stage convnet ("critic"); random features define a valid
// distance and keep every term differentiable and reproducible without
// pretrained weights.

#include <cmath>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/nn.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

struct LossWeights {
  double l1 = 0.7;
  double ssim = 0.3;
  double contrastive = 0.1;
  double perceptual = 0.3;
};

template <typename Real>
Tensor<Real> l1_loss(const Tensor<Real> &out, const Tensor<Real> &gt) {
  if (out.shape() != gt.shape())
    throw ShapeMismatch("l1_loss shapes " + shape_str(out.shape()) + " vs " +
                        shape_str(gt.shape()));
  return mean_all(abs(sub(out, gt)));
}

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on unit
// dynamic range; valid windows only (no padding), mean over windows and
// channels.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> gaussian_window_1d(int size = 11, double sigma = 1.5) {
  std::vector<double> w(static_cast<size_t>(size));
  const int half = size / 2;
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    w[static_cast<size_t>(i)] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
    sum += w[static_cast<size_t>(i)];
  }
  for (auto &v : w) v /= sum;
  return w;
}

// separable valid-window Gaussian blur of an [H,W,C] tensor
template <typename Real>
Tensor<Real> gaussian_blur_valid(const Tensor<Real> &x) {
  const int c = x.dim(2);
  const auto g = gaussian_window_1d();
  const int k = static_cast<int>(g.size());
  Tensor<Real> kh({1, k, c});
  Tensor<Real> kv({k, 1, c});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < c; ++j) {
      kh[static_cast<size_t>(i * c + j)] = static_cast<Real>(g[static_cast<size_t>(i)]);
      kv[static_cast<size_t>(i * c + j)] = static_cast<Real>(g[static_cast<size_t>(i)]);
    }
  auto h = dwconv2d(x, kh, static_cast<const Tensor<Real> *>(nullptr), 0);
  return dwconv2d(h, kv, static_cast<const Tensor<Real> *>(nullptr), 0);
}

}  // namespace detail

template <typename Real>
Tensor<Real> ssim(const Tensor<Real> &a, const Tensor<Real> &b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("ssim shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 3 || a.dim(0) < 11 || a.dim(1) < 11)
    throw ShapeMismatch("ssim needs [H,W,C] with H,W >= 11, got " + shape_str(a.shape()));
  const Real c1 = static_cast<Real>(0.01 * 0.01);
  const Real c2 = static_cast<Real>(0.03 * 0.03);
  auto mu_a = detail::gaussian_blur_valid(a);
  auto mu_b = detail::gaussian_blur_valid(b);
  auto mu_aa = mul(mu_a, mu_a);
  auto mu_bb = mul(mu_b, mu_b);
  auto mu_ab = mul(mu_a, mu_b);
  auto var_a = sub(detail::gaussian_blur_valid(mul(a, a)), mu_aa);
  auto var_b = sub(detail::gaussian_blur_valid(mul(b, b)), mu_bb);
  auto cov = sub(detail::gaussian_blur_valid(mul(a, b)), mu_ab);
  auto num = mul(add_const(scale(mu_ab, Real(2)), c1), add_const(scale(cov, Real(2)), c2));
  auto den = mul(add_const(add(mu_aa, mu_bb), c1), add_const(add(var_a, var_b), c2));
  return mean_all(div(num, den));
}

template <typename Real>
Tensor<Real> ssim_loss(const Tensor<Real> &out, const Tensor<Real> &gt) {
  return add_const(neg(ssim(out, gt)), Real(1));
}

// ---------------------------------------------------------------------------
// frozen random critic
// ---------------------------------------------------------------------------

template <typename Real>
struct CriticNet {
  Tensor<Real> w0, b0, w1, b1, w2, b2;

  static CriticNet seeded(uint64_t seed) {
    CriticNet net;
    auto make = [&](const std::string &name, Shape shape, int fan_in) {
      Rng rng = rng_for(seed, "critic." + name);
      const double bound = std::sqrt(1.0 / fan_in);
      return Tensor<Real>::uniform(std::move(shape), rng, -bound, bound);
    };
    net.w0 = make("w0", {3, 3, 3, 8}, 27);
    net.b0 = make("b0", {8}, 27);
    net.w1 = make("w1", {3, 3, 8, 16}, 72);
    net.b1 = make("b1", {16}, 72);
    net.w2 = make("w2", {3, 3, 16, 32}, 144);
    net.b2 = make("b2", {32}, 144);
    return net;
  }

  // three stride-2 stages; features at increasingly coarse scales
  std::vector<Tensor<Real>> stages(const Tensor<Real> &x) const {
    auto s0 = silu(conv2d(x, w0, &b0, 2, 1));
    auto s1 = silu(conv2d(s0, w1, &b1, 2, 1));
    auto s2 = silu(conv2d(s1, w2, &b2, 2, 1));
    return {s0, s1, s2};
  }
};

// squared L2 feature distance over the two coarsest critic stages
template <typename Real>
Tensor<Real> perceptual_loss(const Tensor<Real> &out, const Tensor<Real> &gt,
                             const CriticNet<Real> &critic) {
  if (out.shape() != gt.shape())
    throw ShapeMismatch("perceptual_loss shapes " + shape_str(out.shape()) + " vs " +
                        shape_str(gt.shape()));
  auto fo = critic.stages(out);
  auto fg = critic.stages(gt);
  auto term = [&](size_t s) { return mean_all(square(sub(fo[s], fg[s]))); };
  return add(term(1), term(2));
}

// per-stage ratio of the distance-to-target over the distance-to-negative,
// summed over all critic stages; the degraded input serves as the negative
template <typename Real>
Tensor<Real> contrastive_loss(const Tensor<Real> &out, const Tensor<Real> &gt,
                              const Tensor<Real> &neg, const CriticNet<Real> &critic) {
  if (out.shape() != gt.shape() || out.shape() != neg.shape())
    throw ShapeMismatch("contrastive_loss shape mismatch");
  auto fo = critic.stages(out);
  auto fg = critic.stages(gt);
  auto fn = critic.stages(neg);
  Tensor<Real> total = Tensor<Real>::scalar(Real(0));
  for (size_t s = 0; s < fo.size(); ++s) {
    auto num = mean_all(abs(sub(fo[s], fg[s])));
    auto den = add_const(mean_all(abs(sub(fo[s], fn[s]))), static_cast<Real>(1e-7));
    total = add(total, div(num, den));
  }
  return total;
}

template <typename Real>
struct LossReport {
  Tensor<Real> total;  // taped scalar
  double l1 = 0, ssim = 0, contrastive = 0, perceptual = 0;
};

template <typename Real>
LossReport<Real> total_loss(const Tensor<Real> &out, const Tensor<Real> &gt,
                            const Tensor<Real> &neg, const LossWeights &w,
                            const CriticNet<Real> &critic) {
  LossReport<Real> rep;
  auto l1 = l1_loss(out, gt);
  auto ss = ssim_loss(out, gt);
  auto con = contrastive_loss(out, gt, neg, critic);
  auto per = perceptual_loss(out, gt, critic);
  rep.l1 = static_cast<double>(l1.item());
  rep.ssim = static_cast<double>(ss.item());
  rep.contrastive = static_cast<double>(con.item());
  rep.perceptual = static_cast<double>(per.item());
  rep.total = add(add(scale(l1, static_cast<Real>(w.l1)), scale(ss, static_cast<Real>(w.ssim))),
                  add(scale(con, static_cast<Real>(w.contrastive)),
                      scale(per, static_cast<Real>(w.perceptual))));
  return rep;
}

// PSNR on unit dynamic range, capped at 99 dB for identical images
template <typename Real>
double psnr(const Tensor<Real> &a, const Tensor<Real> &b) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("psnr shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double mse = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

}  // namespace wecdg
