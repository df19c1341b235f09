#pragma once

// One-level 2D discrete wavelet transform (orthonormal Haar) and its exact
// inverse, per channel of an [H, W, C] tensor. For each 2x2 block
// [a b; c d]:
//   approx     cA = (a+b+c+d)/2
//   horizontal cH = (a-b+c-d)/2
//   vertical   cV = (a+b-c-d)/2
//   diagonal   cD = (a-b-c+d)/2
// The analysis matrix is orthogonal, so reconstruction is the transpose and
// energy is preserved exactly. The global mean of an image lives entirely in
// cA: mean(image) == mean(cA)/2.

#include <array>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

template <typename Real>
struct WaveletSubbands {
  Tensor<Real> approx;      // cA
  Tensor<Real> horizontal;  // cH
  Tensor<Real> vertical;    // cV
  Tensor<Real> diagonal;    // cD
};

enum class SubbandKind { Approx, Horizontal, Vertical, Diagonal };

namespace detail {

// per-kind coefficients for block cells (a, b, c, d), all scaled by 1/2
inline std::array<double, 4> haar_signs(SubbandKind kind) {
  switch (kind) {
    case SubbandKind::Approx: return {1, 1, 1, 1};
    case SubbandKind::Horizontal: return {1, -1, 1, -1};
    case SubbandKind::Vertical: return {1, 1, -1, -1};
    default: return {1, -1, -1, 1};
  }
}

}  // namespace detail

template <typename Real>
Tensor<Real> haar_subband(const Tensor<Real> &x, SubbandKind kind) {
  if (x.rank() != 3) throw ShapeMismatch("haar_subband needs [H,W,C], got " + shape_str(x.shape()));
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw OddDimensions("wavelet analysis needs even H and W, got " + shape_str(x.shape()));
  const auto sg = detail::haar_signs(kind);
  const Real sa = static_cast<Real>(sg[0] * 0.5), sb = static_cast<Real>(sg[1] * 0.5);
  const Real sc = static_cast<Real>(sg[2] * 0.5), sd = static_cast<Real>(sg[3] * 0.5);
  const int oh = h / 2, ow = w / 2;
  auto out = detail::make_result<Real>(Shape{oh, ow, c}, {x.node()});
  const Real *px = x.data();
  Real *po = out.data();
  for (int y = 0; y < oh; ++y) {
    for (int xx = 0; xx < ow; ++xx) {
      const Real *ra = px + (static_cast<size_t>(2 * y) * w + 2 * xx) * c;
      const Real *rb = ra + c;
      const Real *rc = px + (static_cast<size_t>(2 * y + 1) * w + 2 * xx) * c;
      const Real *rd = rc + c;
      Real *orow = po + (static_cast<size_t>(y) * ow + xx) * c;
      for (int j = 0; j < c; ++j) orow[j] = sa * ra[j] + sb * rb[j] + sc * rc[j] + sd * rd[j];
    }
  }
  detail::set_backward(out, [x, out, h, w, c, oh, ow, sa, sb, sc, sd]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const Real *drow = dy + (static_cast<size_t>(y) * ow + xx) * c;
        Real *ga = gx + (static_cast<size_t>(2 * y) * w + 2 * xx) * c;
        Real *gb = ga + c;
        Real *gc = gx + (static_cast<size_t>(2 * y + 1) * w + 2 * xx) * c;
        Real *gd = gc + c;
        for (int j = 0; j < c; ++j) {
          ga[j] += sa * drow[j];
          gb[j] += sb * drow[j];
          gc[j] += sc * drow[j];
          gd[j] += sd * drow[j];
        }
      }
    }
  });
  return out;
}

template <typename Real>
WaveletSubbands<Real> dwt2(const Tensor<Real> &x) {
  return {haar_subband(x, SubbandKind::Approx), haar_subband(x, SubbandKind::Horizontal),
          haar_subband(x, SubbandKind::Vertical), haar_subband(x, SubbandKind::Diagonal)};
}

template <typename Real>
Tensor<Real> iwt2(const Tensor<Real> &ca, const Tensor<Real> &ch, const Tensor<Real> &cv,
                  const Tensor<Real> &cd) {
  if (ca.shape() != ch.shape() || ca.shape() != cv.shape() || ca.shape() != cd.shape())
    throw ShapeMismatch("iwt2 subband shapes differ: " + shape_str(ca.shape()) + " " +
                        shape_str(ch.shape()) + " " + shape_str(cv.shape()) + " " +
                        shape_str(cd.shape()));
  if (ca.rank() != 3) throw ShapeMismatch("iwt2 needs [H/2,W/2,C] subbands");
  const int sh = ca.dim(0), sw = ca.dim(1), c = ca.dim(2);
  const int h = 2 * sh, w = 2 * sw;
  auto out =
      detail::make_result<Real>(Shape{h, w, c}, {ca.node(), ch.node(), cv.node(), cd.node()});
  const Real *pa = ca.data(), *ph = ch.data(), *pv = cv.data(), *pd = cd.data();
  Real *po = out.data();
  const Real half = Real(0.5);
  for (int y = 0; y < sh; ++y) {
    for (int xx = 0; xx < sw; ++xx) {
      const size_t si = (static_cast<size_t>(y) * sw + xx) * c;
      Real *ra = po + (static_cast<size_t>(2 * y) * w + 2 * xx) * c;
      Real *rb = ra + c;
      Real *rc = po + (static_cast<size_t>(2 * y + 1) * w + 2 * xx) * c;
      Real *rd = rc + c;
      for (int j = 0; j < c; ++j) {
        const Real A = pa[si + j], H = ph[si + j], V = pv[si + j], D = pd[si + j];
        ra[j] = half * (A + H + V + D);
        rb[j] = half * (A - H + V - D);
        rc[j] = half * (A + H - V - D);
        rd[j] = half * (A - H - V + D);
      }
    }
  }
  detail::set_backward(out, [ca, ch, cv, cd, out, sh, sw, c, w]() {
    const Real *dy = out.node()->grad.data();
    const Real half = Real(0.5);
    auto acc = [&](const Tensor<Real> &t, SubbandKind kind) {
      if (!t.node()->requires_grad) return;
      Real *g = t.node()->grad.data();
      const auto sg = detail::haar_signs(kind);
      for (int y = 0; y < sh; ++y) {
        for (int xx = 0; xx < sw; ++xx) {
          const size_t si = (static_cast<size_t>(y) * sw + xx) * c;
          const Real *da = dy + (static_cast<size_t>(2 * y) * w + 2 * xx) * c;
          const Real *db = da + c;
          const Real *dc = dy + (static_cast<size_t>(2 * y + 1) * w + 2 * xx) * c;
          const Real *dd = dc + c;
          for (int j = 0; j < c; ++j)
            g[si + j] += half * (static_cast<Real>(sg[0]) * da[j] + static_cast<Real>(sg[1]) * db[j] +
                                 static_cast<Real>(sg[2]) * dc[j] + static_cast<Real>(sg[3]) * dd[j]);
        }
      }
    };
    acc(ca, SubbandKind::Approx);
    acc(ch, SubbandKind::Horizontal);
    acc(cv, SubbandKind::Vertical);
    acc(cd, SubbandKind::Diagonal);
  });
  return out;
}

template <typename Real>
Tensor<Real> iwt2(const WaveletSubbands<Real> &sb) {
  return iwt2(sb.approx, sb.horizontal, sb.vertical, sb.diagonal);
}

// Multi-level decomposition by recursion on the approximation band.
// levels[0] is the finest level; the last entry holds the coarsest approx.
template <typename Real>
std::vector<WaveletSubbands<Real>> dwt2_multi(const Tensor<Real> &x, int levels) {
  std::vector<WaveletSubbands<Real>> out;
  Tensor<Real> cur = x;
  for (int l = 0; l < levels; ++l) {
    out.push_back(dwt2(cur));
    cur = out.back().approx;
  }
  return out;
}

enum class SwapBand { LowFrequency, HighFrequency };

// Exchange wavelet content between two same-shape images and reconstruct.
// LowFrequency swaps the approximation band (each output inherits the donor's
// global mean); HighFrequency swaps the three detail bands (each output keeps
// its own global mean). Returned images are the raw reconstructions, not
// clamped; callers that need display images clamp afterwards.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> swap_subbands(const Tensor<Real> &a, const Tensor<Real> &b,
                                                    SwapBand which) {
  if (a.shape() != b.shape())
    throw ShapeMismatch("swap_subbands inputs differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  auto sa = dwt2(a);
  auto sb = dwt2(b);
  if (which == SwapBand::LowFrequency) {
    return {iwt2(sb.approx, sa.horizontal, sa.vertical, sa.diagonal),
            iwt2(sa.approx, sb.horizontal, sb.vertical, sb.diagonal)};
  }
  return {iwt2(sa.approx, sb.horizontal, sb.vertical, sb.diagonal),
          iwt2(sb.approx, sa.horizontal, sa.vertical, sa.diagonal)};
}

}  // namespace wecdg
