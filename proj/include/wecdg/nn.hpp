#pragma once

// Shared learned blocks: layer norm, linear/conv wrappers, softmax attention,
// the gated feed-forward network and the four-direction 2D selective scan.
// Blocks read their weights from a ParameterTree under a caller-chosen name
// prefix; init_* registers the matching entries.

#include <cmath>
#include <string>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/params.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

struct BlockConfig {
  int channels = 16;
  double expansion = 2.0;    // width multiplier inside gated FFN / scan input
  int state_dim = 4;         // selective-scan hidden state size per channel
  double attn_temperature = 0.0;  // initial temperature; 0 -> sqrt(channels)

  void validate() const {
    if (expansion < 1.0) throw ConfigError("expansion must be >= 1");
    if (state_dim < 1) throw ConfigError("state_dim must be >= 1");
    if (channels < 1) throw ConfigError("channels must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// layer norm (over the trailing channel dimension, eps = 1e-6)
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real> &x, const Tensor<Real> &gamma, const Tensor<Real> &beta) {
  const int c = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeMismatch("layer_norm affine params must be [C], C=" + std::to_string(c));
  auto mu = mean_lastdim(x);
  auto centered = sub(x, mu);
  auto variance = mean_lastdim(square(centered));
  auto denom = sqrt(add_const(variance, static_cast<Real>(1e-6)));
  return add(mul(div(centered, denom), gamma), beta);
}

template <typename Real>
void init_layer_norm(ParameterTree<Real> &tree, const std::string &prefix, int c) {
  tree.add(prefix + ".gamma", Tensor<Real>::full({c}, Real(1)));
  tree.add_zeros(prefix + ".beta", {c});
}

// ---------------------------------------------------------------------------
// linear / conv wrappers
// ---------------------------------------------------------------------------

// y = x @ w + b for token matrices [T, Cin]
template <typename Real>
Tensor<Real> linear(const Tensor<Real> &x, const Tensor<Real> &w, const Tensor<Real> &b) {
  return add(matmul(x, w), b);
}

template <typename Real>
Tensor<Real> flatten_hwc(const Tensor<Real> &x) {
  return reshape(x, {x.dim(0) * x.dim(1), x.dim(2)});
}

// pointwise (1x1) convolution over [H, W, Cin] with w [Cin, Cout]
template <typename Real>
Tensor<Real> conv1x1(const Tensor<Real> &x, const Tensor<Real> &w, const Tensor<Real> &b) {
  const int h = x.dim(0), wd = x.dim(1);
  auto y = linear(flatten_hwc(x), w, b);
  return reshape(y, {h, wd, y.dim(1)});
}

template <typename Real>
Tensor<Real> dwconv3x3(const Tensor<Real> &x, const Tensor<Real> &w, const Tensor<Real> &b) {
  return dwconv2d(x, w, &b, 1);
}

template <typename Real>
void init_linear(ParameterTree<Real> &tree, const std::string &prefix, int cin, int cout) {
  tree.add_weight(prefix + ".w", {cin, cout}, cin);
  tree.add_zeros(prefix + ".b", {cout});
}

template <typename Real>
void init_conv(ParameterTree<Real> &tree, const std::string &prefix, int k, int cin, int cout) {
  tree.add_weight(prefix + ".w", {k, k, cin, cout}, k * k * cin);
  tree.add_zeros(prefix + ".b", {cout});
}

template <typename Real>
void init_dwconv(ParameterTree<Real> &tree, const std::string &prefix, int k, int c) {
  tree.add_weight(prefix + ".w", {k, k, c}, k * k);
  tree.add_zeros(prefix + ".b", {c});
}

// ---------------------------------------------------------------------------
// softmax attention
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> attention_from_logits(const Tensor<Real> &logits, const Tensor<Real> &v) {
  return matmul(softmax_lastdim(logits), v);
}

// softmax(Q K^T / temperature) V with a fixed temperature
template <typename Real>
Tensor<Real> attention(const Tensor<Real> &q, const Tensor<Real> &k, const Tensor<Real> &v,
                       Real temperature) {
  if (!(temperature > Real(0)))
    throw NonPositiveTemperature("attention temperature must be > 0, got " +
                                 std::to_string(static_cast<double>(temperature)));
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0))
    throw ShapeMismatch("attention Q" + shape_str(q.shape()) + " K" + shape_str(k.shape()) + " V" +
                        shape_str(v.shape()));
  auto logits = scale(matmul(q, transpose2d(k)), Real(1) / temperature);
  return attention_from_logits(logits, v);
}

// variant with a learnable positive temperature, parameterized as exp(log_t)
template <typename Real>
Tensor<Real> attention(const Tensor<Real> &q, const Tensor<Real> &k, const Tensor<Real> &v,
                       const Tensor<Real> &log_temperature) {
  auto logits = div(matmul(q, transpose2d(k)), exp(log_temperature));
  return attention_from_logits(logits, v);
}

inline double default_log_temperature(int key_width) {
  return 0.5 * std::log(static_cast<double>(key_width));
}

// ---------------------------------------------------------------------------
// gated feed-forward network
// y = x + W_out( GELU(DWConv3x3(W1 LN(x))) * DWConv3x3(W2 LN(x)) )
// ---------------------------------------------------------------------------

template <typename Real>
void init_gffn(ParameterTree<Real> &tree, const std::string &p, int c, double expansion) {
  const int e = static_cast<int>(std::ceil(expansion * c));
  init_layer_norm(tree, p + ".ln", c);
  init_linear(tree, p + ".w1", c, e);
  init_linear(tree, p + ".w2", c, e);
  init_dwconv(tree, p + ".dw1", 3, e);
  init_dwconv(tree, p + ".dw2", 3, e);
  init_linear(tree, p + ".out", e, c);
}

template <typename Real>
Tensor<Real> gffn(const Tensor<Real> &x, const ParameterTree<Real> &ps, const std::string &p) {
  auto normed = layer_norm(x, ps.at(p + ".ln.gamma"), ps.at(p + ".ln.beta"));
  auto gate = gelu(dwconv3x3(conv1x1(normed, ps.at(p + ".w1.w"), ps.at(p + ".w1.b")),
                             ps.at(p + ".dw1.w"), ps.at(p + ".dw1.b")));
  auto value = dwconv3x3(conv1x1(normed, ps.at(p + ".w2.w"), ps.at(p + ".w2.b")),
                         ps.at(p + ".dw2.w"), ps.at(p + ".dw2.b"));
  auto fused = conv1x1(mul(gate, value), ps.at(p + ".out.w"), ps.at(p + ".out.b"));
  return add(x, fused);
}

// ---------------------------------------------------------------------------
// four-direction 2D selective scan
// ---------------------------------------------------------------------------
//
// The spatial grid is flattened into four 1D sequences (row-major and
// column-major, each forward and backward). Each direction k runs an
// input-dependent state-space recurrence with its own parameters; per step t,
// channel c and state n:
//   delta_t[c] = softplus(w_delta[k,c] * u_t[c] + b_delta[k,c])
//   A[c,n]     = -exp(a_log[k,c,n])
//   Abar       = exp(delta_t[c] * A[c,n])
//   B_t[n]     = sum_c w_b[k,n,c] * u_t[c]
//   C_t[n]     = sum_c w_c[k,n,c] * u_t[c]
//   h_t[c,n]   = Abar * h_{t-1}[c,n] + delta_t[c] * B_t[n] * u_t[c]
//   y_t[c]     = <C_t, h_t[c,:]> + d[k,c] * u_t[c]        (h_0 = 0)
// The four directional outputs are summed; the ss2d() wrapper applies the
// output projection.

namespace detail {

// flat spatial index of step i for direction k on an h-by-w grid
inline size_t scan_index(int k, size_t i, int h, int w) {
  const size_t t = static_cast<size_t>(h) * w;
  switch (k) {
    case 0: return i;                                  // row-major forward
    case 1: return t - 1 - i;                          // row-major backward
    case 2: {                                          // column-major forward
      const size_t x = i / static_cast<size_t>(h), y = i % static_cast<size_t>(h);
      return y * static_cast<size_t>(w) + x;
    }
    default: {                                         // column-major backward
      const size_t j = t - 1 - i;
      const size_t x = j / static_cast<size_t>(h), y = j % static_cast<size_t>(h);
      return y * static_cast<size_t>(w) + x;
    }
  }
}

}  // namespace detail

template <typename Real>
Tensor<Real> selective_scan_4dir(const Tensor<Real> &x, const Tensor<Real> &w_delta,
                                 const Tensor<Real> &b_delta, const Tensor<Real> &a_log,
                                 const Tensor<Real> &w_b, const Tensor<Real> &w_c,
                                 const Tensor<Real> &d_skip) {
  if (x.rank() != 3) throw ShapeMismatch("selective scan needs [H,W,C]");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const int n = a_log.dim(2);
  const size_t t_len = static_cast<size_t>(h) * w;
  if (w_delta.shape() != Shape{4, c} || b_delta.shape() != Shape{4, c} ||
      a_log.shape() != Shape{4, c, n} || w_b.shape() != Shape{4, n, c} ||
      w_c.shape() != Shape{4, n, c} || d_skip.shape() != Shape{4, c})
    throw ShapeMismatch("selective scan parameter shapes inconsistent with input " +
                        shape_str(x.shape()));

  auto out = detail::make_result<Real>(
      x.shape(), {x.node(), w_delta.node(), b_delta.node(), a_log.node(), w_b.node(), w_c.node(),
                  d_skip.node()});

  // saved per direction for the backward sweep
  auto saved_h = std::make_shared<std::vector<std::vector<Real>>>();
  auto saved_delta = std::make_shared<std::vector<std::vector<Real>>>();
  auto saved_b = std::make_shared<std::vector<std::vector<Real>>>();
  auto saved_c = std::make_shared<std::vector<std::vector<Real>>>();
  const bool keep = out.node()->requires_grad;
  if (keep) {
    saved_h->resize(4);
    saved_delta->resize(4);
    saved_b->resize(4);
    saved_c->resize(4);
  }

  const Real *px = x.data();
  Real *po = out.data();
  detail::zero_fill(out);
  std::vector<Real> h_state(static_cast<size_t>(c) * n);
  std::vector<Real> bt(n), ct(n), a_neg(static_cast<size_t>(c) * n);
  for (int k = 0; k < 4; ++k) {
    const Real *wd = w_delta.data() + static_cast<size_t>(k) * c;
    const Real *bd = b_delta.data() + static_cast<size_t>(k) * c;
    const Real *al = a_log.data() + static_cast<size_t>(k) * c * n;
    const Real *wb = w_b.data() + static_cast<size_t>(k) * n * c;
    const Real *wc = w_c.data() + static_cast<size_t>(k) * n * c;
    const Real *dd = d_skip.data() + static_cast<size_t>(k) * c;
    for (size_t i = 0; i < static_cast<size_t>(c) * n; ++i) a_neg[i] = -std::exp(al[i]);
    std::fill(h_state.begin(), h_state.end(), Real(0));
    if (keep) {
      (*saved_h)[k].resize(t_len * c * n);
      (*saved_delta)[k].resize(t_len * c);
      (*saved_b)[k].resize(t_len * n);
      (*saved_c)[k].resize(t_len * n);
    }
    for (size_t i = 0; i < t_len; ++i) {
      const size_t pos = detail::scan_index(k, i, h, w);
      const Real *u = px + pos * c;
      for (int s = 0; s < n; ++s) {
        Real accb = Real(0), accc = Real(0);
        const Real *wbrow = wb + static_cast<size_t>(s) * c;
        const Real *wcrow = wc + static_cast<size_t>(s) * c;
        for (int j = 0; j < c; ++j) {
          accb += wbrow[j] * u[j];
          accc += wcrow[j] * u[j];
        }
        bt[static_cast<size_t>(s)] = accb;
        ct[static_cast<size_t>(s)] = accc;
      }
      Real *orow = po + pos * c;
      for (int j = 0; j < c; ++j) {
        const Real z = wd[j] * u[j] + bd[j];
        const Real delta = z > Real(30) ? z : static_cast<Real>(std::log1p(std::exp(z)));
        Real *hrow = h_state.data() + static_cast<size_t>(j) * n;
        const Real *arow = a_neg.data() + static_cast<size_t>(j) * n;
        Real y = dd[j] * u[j];
        for (int s = 0; s < n; ++s) {
          const Real abar = std::exp(delta * arow[s]);
          hrow[s] = abar * hrow[s] + delta * bt[static_cast<size_t>(s)] * u[j];
          y += ct[static_cast<size_t>(s)] * hrow[s];
        }
        orow[j] += y;
        if (keep) (*saved_delta)[k][i * c + static_cast<size_t>(j)] = delta;
      }
      if (keep) {
        std::copy(h_state.begin(), h_state.end(), (*saved_h)[k].begin() + i * c * n);
        std::copy(bt.begin(), bt.end(), (*saved_b)[k].begin() + i * n);
        std::copy(ct.begin(), ct.end(), (*saved_c)[k].begin() + i * n);
      }
    }
  }

  detail::set_backward(out, [x, w_delta, b_delta, a_log, w_b, w_c, d_skip, out, saved_h,
                             saved_delta, saved_b, saved_c, h, w, c, n, t_len]() {
    const Real *dy = out.node()->grad.data();
    const Real *px2 = x.data();
    const bool nx = x.node()->requires_grad;
    Real *gx = nx ? x.node()->grad.data() : nullptr;
    std::vector<Real> dh(static_cast<size_t>(c) * n);
    std::vector<Real> dbt(n), dct(n), a_neg(static_cast<size_t>(c) * n);
    const std::vector<Real> h_zero(static_cast<size_t>(c) * n, Real(0));
    for (int k = 0; k < 4; ++k) {
      const Real *wd = w_delta.data() + static_cast<size_t>(k) * c;
      const Real *al = a_log.data() + static_cast<size_t>(k) * c * n;
      const Real *wb = w_b.data() + static_cast<size_t>(k) * n * c;
      const Real *wc = w_c.data() + static_cast<size_t>(k) * n * c;
      const Real *dd = d_skip.data() + static_cast<size_t>(k) * c;
      Real *gwd = w_delta.node()->requires_grad
                      ? w_delta.node()->grad.data() + static_cast<size_t>(k) * c
                      : nullptr;
      Real *gbd = b_delta.node()->requires_grad
                      ? b_delta.node()->grad.data() + static_cast<size_t>(k) * c
                      : nullptr;
      Real *gal = a_log.node()->requires_grad
                      ? a_log.node()->grad.data() + static_cast<size_t>(k) * c * n
                      : nullptr;
      Real *gwb = w_b.node()->requires_grad
                      ? w_b.node()->grad.data() + static_cast<size_t>(k) * n * c
                      : nullptr;
      Real *gwc = w_c.node()->requires_grad
                      ? w_c.node()->grad.data() + static_cast<size_t>(k) * n * c
                      : nullptr;
      Real *gdd = d_skip.node()->requires_grad
                      ? d_skip.node()->grad.data() + static_cast<size_t>(k) * c
                      : nullptr;
      for (size_t i = 0; i < static_cast<size_t>(c) * n; ++i) a_neg[i] = -std::exp(al[i]);
      std::fill(dh.begin(), dh.end(), Real(0));
      const auto &hs = (*saved_h)[k];
      const auto &ds = (*saved_delta)[k];
      const auto &bs = (*saved_b)[k];
      const auto &cs = (*saved_c)[k];
      for (size_t i = t_len; i-- > 0;) {
        const size_t pos = detail::scan_index(k, i, h, w);
        const Real *u = px2 + pos * c;
        const Real *drow = dy + pos * c;
        const Real *h_cur = hs.data() + i * c * n;
        const Real *h_prev = i == 0 ? h_zero.data() : hs.data() + (i - 1) * c * n;
        const Real *b_cur = bs.data() + i * n;
        const Real *c_cur = cs.data() + i * n;
        std::fill(dbt.begin(), dbt.end(), Real(0));
        std::fill(dct.begin(), dct.end(), Real(0));
        for (int j = 0; j < c; ++j) {
          const Real dyv = drow[j];
          const Real delta = ds[i * c + static_cast<size_t>(j)];
          Real *dhrow = dh.data() + static_cast<size_t>(j) * n;
          const Real *hrow = h_cur + static_cast<size_t>(j) * n;
          const Real *hprow = h_prev + static_cast<size_t>(j) * n;
          const Real *arow = a_neg.data() + static_cast<size_t>(j) * n;
          // y_t[c] = <C_t, h_t[c,:]> + d*u
          Real ddelta = Real(0);
          Real du = dyv * dd[j];
          if (gdd) gdd[j] += dyv * u[j];
          for (int s = 0; s < n; ++s) {
            dct[static_cast<size_t>(s)] += dyv * hrow[s];
            Real dhv = dhrow[s] + dyv * c_cur[s];
            // h_t = abar * h_prev + delta * B * u
            const Real abar = std::exp(delta * arow[s]);
            const Real da = dhv * hprow[s] * abar;  // d/d(delta*A[c,s]) term
            ddelta += da * arow[s];
            if (gal) gal[static_cast<size_t>(j) * n + s] += da * delta * arow[s];
            ddelta += dhv * b_cur[s] * u[j];
            dbt[static_cast<size_t>(s)] += dhv * delta * u[j];
            du += dhv * delta * b_cur[s];
            dhrow[s] = dhv * abar;  // becomes dh_{t-1}
          }
          // delta = softplus(z), z = wd*u + bd
          const Real z = wd[j] * u[j] +
                         (b_delta.data() + static_cast<size_t>(k) * c)[j];
          const Real sig = Real(1) / (Real(1) + std::exp(-z));
          const Real dz = ddelta * sig;
          if (gwd) gwd[j] += dz * u[j];
          if (gbd) gbd[j] += dz;
          du += dz * wd[j];
          if (nx) gx[pos * c + static_cast<size_t>(j)] += du;
        }
        // B_t = w_b u, C_t = w_c u
        for (int s = 0; s < n; ++s) {
          const Real dbv = dbt[static_cast<size_t>(s)];
          const Real dcv = dct[static_cast<size_t>(s)];
          const Real *wbrow = wb + static_cast<size_t>(s) * c;
          const Real *wcrow = wc + static_cast<size_t>(s) * c;
          Real *gwbrow = gwb ? gwb + static_cast<size_t>(s) * c : nullptr;
          Real *gwcrow = gwc ? gwc + static_cast<size_t>(s) * c : nullptr;
          for (int j = 0; j < c; ++j) {
            if (gwbrow) gwbrow[j] += dbv * u[j];
            if (gwcrow) gwcrow[j] += dcv * u[j];
            if (nx) gx[pos * c + static_cast<size_t>(j)] += dbv * wbrow[j] + dcv * wcrow[j];
          }
        }
      }
    }
  });
  return out;
}

template <typename Real>
void init_ss2d(ParameterTree<Real> &tree, const std::string &p, int c, int state_dim) {
  tree.add_weight(p + ".w_delta", {4, c}, 1);
  tree.add_zeros(p + ".b_delta", {4, c});
  // A = -exp(a_log); init a_log[.,.,s] = log(s+1) so states span decay rates
  Tensor<Real> al({4, c, state_dim});
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < c; ++j)
      for (int s = 0; s < state_dim; ++s)
        al[(static_cast<size_t>(k) * c + j) * state_dim + s] =
            static_cast<Real>(std::log(static_cast<double>(s + 1)));
  tree.add(p + ".a_log", std::move(al));
  tree.add_weight(p + ".w_b", {4, state_dim, c}, c);
  tree.add_weight(p + ".w_c", {4, state_dim, c}, c);
  tree.add(p + ".d", Tensor<Real>::full({4, c}, Real(1)));
  init_linear(tree, p + ".out", c, c);
}

// selective scan plus its output projection; preserves [H, W, C]
template <typename Real>
Tensor<Real> ss2d(const Tensor<Real> &x, const ParameterTree<Real> &ps, const std::string &p) {
  auto scanned = selective_scan_4dir(x, ps.at(p + ".w_delta"), ps.at(p + ".b_delta"),
                                     ps.at(p + ".a_log"), ps.at(p + ".w_b"), ps.at(p + ".w_c"),
                                     ps.at(p + ".d"));
  return conv1x1(scanned, ps.at(p + ".out.w"), ps.at(p + ".out.b"));
}

// ---------------------------------------------------------------------------
// token helpers for cross attention
// ---------------------------------------------------------------------------

// Flatten [H,W,C] features into tokens, downsampling with a strided 1x1 conv
// first when H*W exceeds the token budget.
template <typename Real>
Tensor<Real> tokens_within_budget(const Tensor<Real> &x, const Tensor<Real> &down_w,
                                  int token_budget) {
  const int h = x.dim(0), w = x.dim(1);
  if (static_cast<long>(h) * w <= token_budget) return flatten_hwc(x);
  int s = 2;
  while (static_cast<long>((h + s - 1) / s) * ((w + s - 1) / s) > token_budget) ++s;
  auto down = conv2d(x, down_w, static_cast<const Tensor<Real> *>(nullptr), s, 0);
  return flatten_hwc(down);
}

template <typename Real>
void init_token_down(ParameterTree<Real> &tree, const std::string &p, int c) {
  tree.add_weight(p + ".w", {1, 1, c, c}, c);
}

}  // namespace wecdg
