#pragma once

// The full finite-difference verification suite: every learned block, the
// complete model forward and the training objective, each checked against
// central differences in double precision. Used by the `gradcheck` CLI
// subcommand and the acceptance tests.

#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "wecdg/data.hpp"
#include "wecdg/ecam.hpp"
#include "wecdg/edrm.hpp"
#include "wecdg/gradcheck.hpp"
#include "wecdg/losses.hpp"
#include "wecdg/nn.hpp"
#include "wecdg/pipeline.hpp"
#include "wecdg/wavelet.hpp"

namespace wecdg {

struct GradSuiteResult {
  bool pass = true;
  std::vector<std::pair<std::string, GradCheckResult>> blocks;
};

// Runs in f64 regardless of the runtime precision: central differences need
// the headroom to resolve a 1e-4 relative tolerance.
inline GradSuiteResult run_gradcheck_suite(uint64_t seed, std::ostream *out = nullptr) {
  using T = Tensor<double>;
  GradSuiteResult suite;
  auto record = [&](const std::string &name, GradCheckResult res) {
    if (out) *out << (res.pass ? "ok   " : "FAIL ") << name << "  " << res.summary() << "\n";
    if (!res.pass) suite.pass = false;
    suite.blocks.emplace_back(name, std::move(res));
  };
  auto leaves_of = [](ParameterTree<double> &ps, std::vector<std::pair<std::string, T>> head) {
    for (auto &[name, t] : ps) head.emplace_back(name, t);
    return head;
  };
  Rng rng(seed);

  {
    T x = T::uniform({4, 6}, rng, -1.0, 1.0);
    T g = T::uniform({6}, rng, 0.5, 1.5);
    T b = T::uniform({6}, rng, -0.5, 0.5);
    T w = T::uniform({4, 6}, rng, -1.0, 1.0);
    record("layer_norm", check_gradients<double>(
                             [&]() { return sum_all(mul(layer_norm(x, g, b), w)); },
                             {{"x", x}, {"gamma", g}, {"beta", b}}, 1e-5, 1e-4, seed, 0));
  }
  {
    T q = T::uniform({3, 4}, rng, -1.0, 1.0);
    T k = T::uniform({5, 4}, rng, -1.0, 1.0);
    T v = T::uniform({5, 3}, rng, -1.0, 1.0);
    T lt = T::scalar(default_log_temperature(4));
    T w = T::uniform({3, 3}, rng, -1.0, 1.0);
    record("attention",
           check_gradients<double>([&]() { return sum_all(mul(attention(q, k, v, lt), w)); },
                                   {{"q", q}, {"k", k}, {"v", v}, {"log_temp", lt}}, 1e-5, 1e-4,
                                   seed, 0));
  }
  {
    T x = T::uniform({5, 4, 3}, rng, -1.0, 1.0);
    T w = T::uniform({3, 3, 3, 2}, rng, -0.5, 0.5);
    T b = T::uniform({2}, rng, -0.5, 0.5);
    T m1 = T::uniform({3, 2, 2}, rng, -1.0, 1.0);
    record("conv2d_stride2", check_gradients<double>(
                                 [&]() { return sum_all(mul(conv2d(x, w, &b, 2, 1), m1)); },
                                 {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-4, seed, 0));
    T w1 = T::uniform({3, 3, 3, 4}, rng, -0.5, 0.5);
    T b1 = T::uniform({4}, rng, -0.5, 0.5);
    T m2 = T::uniform({5, 4, 4}, rng, -1.0, 1.0);
    record("conv2d_stride1", check_gradients<double>(
                                 [&]() { return sum_all(mul(conv2d(x, w1, &b1, 1, 1), m2)); },
                                 {{"x", x}, {"w", w1}, {"b", b1}}, 1e-5, 1e-4, seed, 0));
    T dw = T::uniform({3, 3, 3}, rng, -0.5, 0.5);
    T db = T::uniform({3}, rng, -0.5, 0.5);
    T m3 = T::uniform({5, 4, 3}, rng, -1.0, 1.0);
    record("dwconv3x3", check_gradients<double>(
                            [&]() { return sum_all(mul(dwconv2d(x, dw, &db, 1), m3)); },
                            {{"x", x}, {"w", dw}, {"b", db}}, 1e-5, 1e-4, seed, 0));
  }
  {
    T x = T::uniform({3, 4, 2}, rng, -1.0, 1.0);
    T m = T::uniform({6, 8, 2}, rng, -1.0, 1.0);
    record("upsample2x", check_gradients<double>(
                             [&]() { return sum_all(mul(upsample2x(x), m)); }, {{"x", x}}, 1e-5,
                             1e-4, seed, 0));
  }
  {
    T x = T::uniform({4, 6, 2}, rng, 0.0, 1.0);
    T m = T::uniform({2, 3, 2}, rng, -1.0, 1.0);
    record("wavelet", check_gradients<double>(
                          [&]() {
                            auto sb = dwt2(x);
                            auto rec = iwt2(sb);
                            return add(sum_all(mul(sb.approx, m)), sum_all(square(rec)));
                          },
                          {{"x", x}}, 1e-5, 1e-4, seed, 0));
  }
  {
    ParameterTree<double> ps(seed + 1);
    init_gffn(ps, "g", 3, 2.0);
    T x = T::uniform({4, 4, 3}, rng, -1.0, 1.0);
    T w = T::uniform({4, 4, 3}, rng, -1.0, 1.0);
    record("gffn", check_gradients<double>([&]() { return sum_all(mul(gffn(x, ps, "g"), w)); },
                                           leaves_of(ps, {{"x", x}}), 1e-5, 1e-4, seed, 12));
  }
  {
    ParameterTree<double> ps(seed + 2);
    init_ss2d(ps, "s", 2, 2);
    T x = T::uniform({4, 4, 2}, rng, -1.0, 1.0);
    T w = T::uniform({4, 4, 2}, rng, -1.0, 1.0);
    record("ss2d", check_gradients<double>([&]() { return sum_all(mul(ss2d(x, ps, "s"), w)); },
                                           leaves_of(ps, {{"x", x}}), 1e-5, 1e-4, seed, 12));
  }
  {
    EdrmConfig cfg{2, 2.0, 2, 1024};
    ParameterTree<double> ps(seed + 3);
    init_irs(ps, "irs", cfg);
    T x = T::uniform({8, 8, 2}, rng, 0.0, 1.0);
    T w = T::uniform({8, 8, 2}, rng, -1.0, 1.0);
    T w2 = T::uniform({4, 4, 6}, rng, -1.0, 1.0);
    record("irs", check_gradients<double>(
                      [&]() {
                        auto [restored, high] = irs(x, ps, "irs");
                        return add(sum_all(mul(restored, w)), sum_all(mul(high, w2)));
                      },
                      leaves_of(ps, {{"x", x}}), 1e-5, 1e-4, seed, 8));
  }
  {
    EdrmConfig cfg{2, 2.0, 2, 1024};
    ParameterTree<double> ps(seed + 4);
    init_drs(ps, "drs", cfg);
    T prior = T::uniform({8, 8, 2}, rng, -1.0, 1.0);
    T en = T::uniform({8, 8, 2}, rng, 0.0, 1.0);
    T w = T::uniform({8, 8, 2}, rng, -1.0, 1.0);
    record("drs",
           check_gradients<double>(
               [&]() { return sum_all(mul(drs(prior, en, ps, "drs", cfg), w)); },
               leaves_of(ps, {{"prior", prior}, {"enhanced", en}}), 1e-5, 1e-4, seed, 8));
  }
  {
    EcamConfig cfg{2, 4, 2, 1024, 2.0};
    ParameterTree<double> ps(seed + 5);
    init_ecam(ps, "ecam", cfg);
    T x = T::uniform({4, 4, 2}, rng, 0.0, 1.0);
    T e = T::uniform({4}, rng, -1.0, 1.0);
    T w = T::uniform({4, 4, 2}, rng, -1.0, 1.0);
    record("ecam_forward",
           check_gradients<double>(
               [&]() { return sum_all(mul(ecam_forward(x, e, ps, "ecam", cfg), w)); },
               leaves_of(ps, {{"x", x}, {"descriptor", e}}), 1e-5, 1e-4, seed, 8));
  }
  {
    // complete model forward at 16x16 with a reduced-width config
    ModelConfig cfg;
    cfg.seed = seed + 6;
    cfg.base_channels = 4;
    cfg.unet_levels = 2;
    cfg.edrm_count = 1;
    cfg.descriptor_dim = 8;
    cfg.query_tokens = 2;
    cfg.state_dim = 2;
    auto model = WecdgModel<double>::init(cfg);
    T img = T::uniform({16, 16, 3}, rng, 0.2, 0.8);
    T e = T::uniform({8}, rng, -1.0, 1.0);
    T w = T::uniform({16, 16, 3}, rng, -1.0, 1.0);
    record("pipeline_forward_16x16",
           check_gradients<double>(
               [&]() { return sum_all(mul(model.forward_padded(img, e), w)); },
               leaves_of(model.params, {{"img", img}, {"descriptor", e}}), 1e-5, 1e-4, seed, 4));
  }
  {
    auto critic = CriticNet<double>::seeded(seed + 7);
    LossWeights lw;
    T gt = T::uniform({16, 16, 3}, rng, 0.1, 0.9);
    T neg = T::uniform({16, 16, 3}, rng, 0.1, 0.9);
    T out = T::uniform({16, 16, 3}, rng, 0.1, 0.9);
    record("total_loss",
           check_gradients<double>([&]() { return total_loss(out, gt, neg, lw, critic).total; },
                                   {{"out", out}}, 1e-5, 1e-4, seed, 48));
  }
  return suite;
}

}  // namespace wecdg
