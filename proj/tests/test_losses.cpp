#include <catch2/catch_amalgamated.hpp>

#include "wecdg/gradcheck.hpp"
#include "wecdg/losses.hpp"

using namespace wecdg;
using T = Tensor<double>;

TEST_CASE("l1 loss") {
  Rng rng(1);
  T gt = T::uniform({8, 8, 3}, rng, 0.0, 1.0);
  CHECK(l1_loss(gt, gt).item() == 0.0);

  auto shifted = add_const(gt, 0.1);
  CHECK(l1_loss(shifted, gt).item() == Catch::Approx(0.1).epsilon(1e-12));

  T out = T::uniform({8, 8, 3}, rng, 0.0, 1.0);
  double brute = 0;
  for (size_t i = 0; i < out.size(); ++i) brute += std::abs(out[i] - gt[i]);
  brute /= static_cast<double>(out.size());
  CHECK(std::abs(l1_loss(out, gt).item() - brute) < 1e-12);

  CHECK_THROWS_AS(l1_loss(T::zeros({2, 2, 1}), T::zeros({2, 2, 3})), ShapeMismatch);
}

TEST_CASE("ssim oracle cases") {
  Rng rng(2);
  T img = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  CHECK(ssim(img, img).item() == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(ssim_loss(img, img).item() == Catch::Approx(0.0).margin(1e-12));

  // inverted checkerboard: strongly negative structural similarity
  T cb({16, 16, 1});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) cb[static_cast<size_t>(y * 16 + x)] = (x + y) % 2 ? 1.0 : 0.0;
  auto inv = add_const(neg(cb), 1.0);
  CHECK(ssim(cb, inv).item() < -0.9);
  CHECK(ssim_loss(cb, inv).item() > 1.0);

  // constants: variance terms cancel, luminance term remains exactly
  const double m1 = 0.4, m2 = 0.65, c1 = 0.01 * 0.01;
  auto s = ssim(T::full({16, 16, 2}, m1), T::full({16, 16, 2}, m2));
  const double expect = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
  CHECK(s.item() == Catch::Approx(expect).epsilon(1e-12));

  // symmetry
  T a = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  T b = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  CHECK(ssim(a, b).item() == Catch::Approx(ssim(b, a).item()).margin(1e-12));
  CHECK(ssim(a, b).item() <= 1.0);
}

TEST_CASE("perceptual loss") {
  auto critic = CriticNet<double>::seeded(900);
  Rng rng(3);
  T gt = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  T out = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  CHECK(perceptual_loss(gt, gt, critic).item() == 0.0);
  CHECK(perceptual_loss(out, gt, critic).item() >= 0.0);
  CHECK(perceptual_loss(out, gt, critic).item() ==
        Catch::Approx(perceptual_loss(gt, out, critic).item()).margin(1e-14));
}

TEST_CASE("contrastive loss") {
  auto critic = CriticNet<double>::seeded(900);
  Rng rng(4);
  T gt = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  T neg = T::uniform({16, 16, 3}, rng, 0.0, 1.0);

  CHECK(contrastive_loss(gt, gt, neg, critic).item() == Catch::Approx(0.0).margin(1e-12));
  // out collapsed onto the negative: denominator is just epsilon
  CHECK(contrastive_loss(neg, gt, neg, critic).item() > 1e3);

  // moving from neg toward gt decreases the loss
  auto lerp = [&](double t) {
    T out(gt.shape());
    for (size_t i = 0; i < gt.size(); ++i) out[i] = (1 - t) * neg[i] + t * gt[i];
    return contrastive_loss(out, gt, neg, critic).item();
  };
  const double v0 = lerp(0.0), v1 = lerp(0.5), v2 = lerp(1.0);
  CHECK(v0 > v1);
  CHECK(v1 > v2);
}

TEST_CASE("total loss composition") {
  auto critic = CriticNet<double>::seeded(900);
  LossWeights w;
  CHECK(w.l1 == 0.7);
  CHECK(w.ssim == 0.3);
  CHECK(w.contrastive == 0.1);
  CHECK(w.perceptual == 0.3);

  Rng rng(5);
  T gt = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  T neg = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  auto perfect = total_loss(gt, gt, neg, w, critic);
  CHECK(perfect.total.item() == Catch::Approx(0.0).margin(1e-12));

  T out = T::uniform({16, 16, 3}, rng, 0.0, 1.0);
  auto rep = total_loss(out, gt, neg, w, critic);
  CHECK(rep.total.item() > 0.0);
  CHECK(rep.total.item() ==
        Catch::Approx(0.7 * rep.l1 + 0.3 * rep.ssim + 0.1 * rep.contrastive + 0.3 * rep.perceptual)
            .epsilon(1e-12));

  LossWeights dbl{1.4, 0.6, 0.2, 0.6};
  auto rep2 = total_loss(out, gt, neg, dbl, critic);
  CHECK(rep2.total.item() == Catch::Approx(2.0 * rep.total.item()).epsilon(1e-12));
}

TEST_CASE("total loss gradient vs finite differences") {
  auto critic = CriticNet<double>::seeded(901);
  LossWeights w;
  Rng rng(6);
  T gt = T::uniform({16, 16, 3}, rng, 0.1, 0.9);
  T neg = T::uniform({16, 16, 3}, rng, 0.1, 0.9);
  T out = T::uniform({16, 16, 3}, rng, 0.1, 0.9);
  auto res = check_gradients<double>(
      [&]() { return total_loss(out, gt, neg, w, critic).total; }, {{"out", out}}, 1e-5, 1e-4,
      41, 48);
  INFO(res.summary());
  CHECK(res.pass);
}

TEST_CASE("psnr") {
  Rng rng(7);
  T a = T::uniform({8, 8, 3}, rng, 0.0, 1.0);
  CHECK(psnr(a, a) == 99.0);
  // uniform error of 0.1 -> MSE 0.01 -> 20 dB
  auto b = add_const(a, 0.1);
  CHECK(psnr(b, a) == Catch::Approx(20.0).epsilon(1e-12));
}
