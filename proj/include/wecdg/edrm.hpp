#pragma once

// Exposure restoration and detail reconstruction. Two cascaded stages:
//  - the illumination stage transforms the input into the wavelet domain,
//    enhances the low-frequency band with a selective-scan block and a gated
//    FFN (at half resolution), and reconstructs with a 1x1-conv-adjusted
//    high-frequency band;
//  - the detail stage upsamples a prior from the raw high-frequency band and
//    uses it as the query source of a cross attention over the enhanced
//    image, followed by a gated FFN.
// A residual connection around the whole block makes the zero-initialized
// configuration an exact identity.

#include <string>
#include <utility>

#include "wecdg/nn.hpp"
#include "wecdg/params.hpp"
#include "wecdg/tensor.hpp"
#include "wecdg/wavelet.hpp"

namespace wecdg {

struct EdrmConfig {
  int channels = 16;
  double expansion = 2.0;  // low-frequency width multiplier and FFN width
  int state_dim = 4;
  int token_budget = 1024;
};

// ---------------------------------------------------------------------------
// illumination restoration stage
// ---------------------------------------------------------------------------

template <typename Real>
void init_irs(ParameterTree<Real> &tree, const std::string &p, const EdrmConfig &cfg) {
  const int c = cfg.channels;
  const int e = static_cast<int>(std::ceil(cfg.expansion * c));
  init_linear(tree, p + ".in_proj", c, e);
  init_dwconv(tree, p + ".dw", 3, e);
  init_ss2d(tree, p + ".ss2d", e, cfg.state_dim);
  init_linear(tree, p + ".back_proj", e, c);
  init_layer_norm(tree, p + ".ln", c);
  init_linear(tree, p + ".res_linear", c, c);
  init_gffn(tree, p + ".gffn", c, cfg.expansion);
  init_linear(tree, p + ".hf_conv", 3 * c, 3 * c);
}

// Returns the spatially restored image (same shape as x) and the raw
// high-frequency band [H/2, W/2, 3C] for the detail stage prior.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> irs(const Tensor<Real> &x, const ParameterTree<Real> &ps,
                                          const std::string &p) {
  auto sb = dwt2(x);
  auto low = sb.approx;
  auto high = concat_lastdim<Real>({sb.horizontal, sb.vertical, sb.diagonal});

  auto z = conv1x1(low, ps.at(p + ".in_proj.w"), ps.at(p + ".in_proj.b"));
  z = silu(dwconv3x3(z, ps.at(p + ".dw.w"), ps.at(p + ".dw.b")));
  z = ss2d(z, ps, p + ".ss2d");
  z = conv1x1(z, ps.at(p + ".back_proj.w"), ps.at(p + ".back_proj.b"));
  auto stage1 = layer_norm(z, ps.at(p + ".ln.gamma"), ps.at(p + ".ln.beta"));
  auto stage2 = add(stage1, conv1x1(low, ps.at(p + ".res_linear.w"), ps.at(p + ".res_linear.b")));
  auto low_enhanced = gffn(stage2, ps, p + ".gffn");

  auto high_adjusted = conv1x1(high, ps.at(p + ".hf_conv.w"), ps.at(p + ".hf_conv.b"));
  const int c = x.dim(2);
  auto restored = iwt2(low_enhanced, slice_lastdim(high_adjusted, 0, c),
                       slice_lastdim(high_adjusted, c, c), slice_lastdim(high_adjusted, 2 * c, c));
  return {restored, high};
}

// ---------------------------------------------------------------------------
// high-frequency prior and detail reconstruction stage
// ---------------------------------------------------------------------------

template <typename Real>
void init_hf_prior(ParameterTree<Real> &tree, const std::string &p, int c) {
  init_linear(tree, p + ".conv1", 3 * c, 3 * c);
  init_linear(tree, p + ".conv2", 3 * c, c);
  init_layer_norm(tree, p + ".ln", c);
}

// [H/2, W/2, 3C] -> [H, W, C]: spatial 1x1 adjustment, channel alignment,
// bilinear upsampling, layer norm.
template <typename Real>
Tensor<Real> hf_prior(const Tensor<Real> &x_hf, const ParameterTree<Real> &ps,
                      const std::string &p) {
  auto adjusted = conv1x1(x_hf, ps.at(p + ".conv1.w"), ps.at(p + ".conv1.b"));
  auto aligned = conv1x1(adjusted, ps.at(p + ".conv2.w"), ps.at(p + ".conv2.b"));
  return layer_norm(upsample2x(aligned), ps.at(p + ".ln.gamma"), ps.at(p + ".ln.beta"));
}

template <typename Real>
void init_hfca(ParameterTree<Real> &tree, const std::string &p, int c) {
  init_layer_norm(tree, p + ".ln_q", c);
  init_layer_norm(tree, p + ".ln_kv", c);
  init_linear(tree, p + ".q", c, c);
  init_linear(tree, p + ".k", c, c);
  init_linear(tree, p + ".v", c, c);
  init_token_down(tree, p + ".down", c);
  tree.add(p + ".log_lambda", Tensor<Real>::scalar(static_cast<Real>(default_log_temperature(c))));
  init_linear(tree, p + ".fuse", c, c);
}

// Cross attention with per-pixel queries from the prior and K/V from the
// enhanced image; residual around the enhanced image.
template <typename Real>
Tensor<Real> hfca(const Tensor<Real> &x_prior, const Tensor<Real> &x_en,
                  const ParameterTree<Real> &ps, const std::string &p, int token_budget) {
  if (x_prior.shape() != x_en.shape())
    throw ShapeMismatch("hfca prior " + shape_str(x_prior.shape()) + " vs enhanced " +
                        shape_str(x_en.shape()));
  auto qsrc = layer_norm(x_prior, ps.at(p + ".ln_q.gamma"), ps.at(p + ".ln_q.beta"));
  auto queries = linear(flatten_hwc(qsrc), ps.at(p + ".q.w"), ps.at(p + ".q.b"));
  auto kvsrc = layer_norm(x_en, ps.at(p + ".ln_kv.gamma"), ps.at(p + ".ln_kv.beta"));
  auto kv = tokens_within_budget(kvsrc, ps.at(p + ".down.w"), token_budget);
  auto keys = linear(kv, ps.at(p + ".k.w"), ps.at(p + ".k.b"));
  auto values = linear(kv, ps.at(p + ".v.w"), ps.at(p + ".v.b"));
  auto attended = attention(queries, keys, values, ps.at(p + ".log_lambda"));
  auto fused = linear(attended, ps.at(p + ".fuse.w"), ps.at(p + ".fuse.b"));
  return add(x_en, reshape(fused, x_en.shape()));
}

template <typename Real>
void init_drs(ParameterTree<Real> &tree, const std::string &p, const EdrmConfig &cfg) {
  init_hfca(tree, p + ".hfca", cfg.channels);
  init_gffn(tree, p + ".gffn", cfg.channels, cfg.expansion);
}

template <typename Real>
Tensor<Real> drs(const Tensor<Real> &x_prior, const Tensor<Real> &x_en,
                 const ParameterTree<Real> &ps, const std::string &p, const EdrmConfig &cfg) {
  auto attended = hfca(x_prior, x_en, ps, p + ".hfca", cfg.token_budget);
  return gffn(attended, ps, p + ".gffn");
}

// ---------------------------------------------------------------------------
// full block
// ---------------------------------------------------------------------------

template <typename Real>
void init_edrm(ParameterTree<Real> &tree, const std::string &p, const EdrmConfig &cfg) {
  init_irs(tree, p + ".irs", cfg);
  init_hf_prior(tree, p + ".prior", cfg.channels);
  init_drs(tree, p + ".drs", cfg);
}

template <typename Real>
Tensor<Real> edrm_forward(const Tensor<Real> &x, const ParameterTree<Real> &ps,
                          const std::string &p, const EdrmConfig &cfg) {
  auto [restored, high] = irs(x, ps, p + ".irs");
  auto prior = hf_prior(high, ps, p + ".prior");
  auto detailed = drs(prior, restored, ps, p + ".drs", cfg);
  return add(detailed, x);
}

}  // namespace wecdg
