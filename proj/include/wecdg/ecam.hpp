#pragma once

// Exposure consistency alignment: a transformer block chaining
// descriptor-conditioned cross attention (DCA), channel-wise self attention
// and the gated FFN. Pre-norm ordering with a residual around each sub-op, so
// zeroing the output-side projections turns the whole block into the
// identity. Instantiated once in front of the backbone (coarse exposure
// modulation) and once behind it (fine alignment), with independent weights.

#include <string>

#include "wecdg/nn.hpp"
#include "wecdg/params.hpp"
#include "wecdg/sdgm.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

struct EcamConfig {
  int channels = 16;
  int descriptor_dim = 50;
  int query_tokens = 4;     // how many query tokens the descriptor expands into
  int token_budget = 1024;  // max K/V tokens before strided downsampling
  double expansion = 2.0;   // gated FFN width
};

template <typename Real>
void init_dca(ParameterTree<Real> &tree, const std::string &p, const EcamConfig &cfg) {
  const int c = cfg.channels, d = cfg.descriptor_dim, t = cfg.query_tokens;
  init_layer_norm(tree, p + ".ln", c);
  tree.add_weight(p + ".w_q", {d, t * c}, d);
  init_linear(tree, p + ".k", c, c);
  init_linear(tree, p + ".v", c, c);
  init_token_down(tree, p + ".down", c);
  tree.add(p + ".log_lambda", Tensor<Real>::scalar(static_cast<Real>(default_log_temperature(c))));
  init_linear(tree, p + ".fuse", t * c, c);
}

// Descriptor-conditioned cross attention. The descriptor embedding expands to
// query tokens through a linear map; keys/values come from the (optionally
// downsampled) feature tokens; the attended tokens fuse into one channel
// vector that is broadcast-added to every position.
template <typename Real>
Tensor<Real> dca(const Tensor<Real> &x, const Tensor<Real> &descriptor,
                 const ParameterTree<Real> &ps, const std::string &p, const EcamConfig &cfg) {
  const int c = cfg.channels, d = cfg.descriptor_dim, t = cfg.query_tokens;
  if (x.dim(2) != c)
    throw ShapeMismatch("dca features have " + std::to_string(x.dim(2)) + " channels, expected " +
                        std::to_string(c));
  if (descriptor.size() != static_cast<size_t>(d))
    throw ShapeMismatch("descriptor dim " + std::to_string(descriptor.size()) + ", expected " +
                        std::to_string(d));
  auto normed = layer_norm(x, ps.at(p + ".ln.gamma"), ps.at(p + ".ln.beta"));
  auto kv = tokens_within_budget(normed, ps.at(p + ".down.w"), cfg.token_budget);
  auto keys = linear(kv, ps.at(p + ".k.w"), ps.at(p + ".k.b"));
  auto values = linear(kv, ps.at(p + ".v.w"), ps.at(p + ".v.b"));
  auto queries = reshape(matmul(reshape(descriptor, {1, d}), ps.at(p + ".w_q")), {t, c});
  auto attended = attention(queries, keys, values, ps.at(p + ".log_lambda"));
  auto fused = linear(reshape(attended, {1, t * c}), ps.at(p + ".fuse.w"), ps.at(p + ".fuse.b"));
  return add(x, reshape(fused, {1, 1, c}));
}

template <typename Real>
void init_self_attention(ParameterTree<Real> &tree, const std::string &p, int c) {
  init_layer_norm(tree, p + ".ln", c);
  init_linear(tree, p + ".q", c, c);
  init_linear(tree, p + ".k", c, c);
  init_linear(tree, p + ".v", c, c);
  tree.add(p + ".log_lambda", Tensor<Real>::scalar(static_cast<Real>(default_log_temperature(c))));
  init_linear(tree, p + ".o", c, c);
}

// Transposed (channel-wise) self attention: the C x C attention map mixes
// channels, keeping cost linear in the pixel count.
template <typename Real>
Tensor<Real> self_attention(const Tensor<Real> &x, const ParameterTree<Real> &ps,
                            const std::string &p) {
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto tok = flatten_hwc(layer_norm(x, ps.at(p + ".ln.gamma"), ps.at(p + ".ln.beta")));
  auto q = linear(tok, ps.at(p + ".q.w"), ps.at(p + ".q.b"));
  auto k = linear(tok, ps.at(p + ".k.w"), ps.at(p + ".k.b"));
  auto v = linear(tok, ps.at(p + ".v.w"), ps.at(p + ".v.b"));
  auto logits = div(matmul(transpose2d(q), k), exp(ps.at(p + ".log_lambda")));  // [C, C]
  auto mixed = matmul(v, transpose2d(softmax_lastdim(logits)));                 // [T, C]
  auto projected = linear(mixed, ps.at(p + ".o.w"), ps.at(p + ".o.b"));
  return add(x, reshape(projected, {h, w, c}));
}

template <typename Real>
void init_ecam(ParameterTree<Real> &tree, const std::string &p, const EcamConfig &cfg) {
  init_dca(tree, p + ".dca", cfg);
  init_self_attention(tree, p + ".sa", cfg.channels);
  init_gffn(tree, p + ".gffn", cfg.channels, cfg.expansion);
}

template <typename Real>
Tensor<Real> ecam_forward(const Tensor<Real> &x, const Tensor<Real> &descriptor,
                          const ParameterTree<Real> &ps, const std::string &p,
                          const EcamConfig &cfg) {
  auto a = dca(x, descriptor, ps, p + ".dca", cfg);
  auto b = self_attention(a, ps, p + ".sa");
  return gffn(b, ps, p + ".gffn");
}

}  // namespace wecdg
