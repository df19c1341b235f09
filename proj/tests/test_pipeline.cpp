#include <catch2/catch_amalgamated.hpp>
#include <cstdio>

#include "test_support.hpp"
#include "wecdg/pipeline.hpp"

using namespace wecdg;
using namespace wecdg::testsupport;
using T = Tensor<double>;

namespace {

ModelConfig tiny_cfg(uint64_t seed = 77) {
  ModelConfig cfg;
  cfg.seed = seed;
  cfg.base_channels = 4;
  cfg.unet_levels = 2;
  cfg.edrm_count = 1;
  cfg.descriptor_dim = 8;
  cfg.query_tokens = 2;
  cfg.state_dim = 2;
  return cfg;
}

ImageBuffer<double> random_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  return ImageBuffer<double>::from_pixels(T::uniform({h, w, 3}, rng, 0.05, 0.95));
}

}  // namespace

TEST_CASE("config validation and json round trip") {
  auto cfg = tiny_cfg();
  auto j = cfg.to_json();
  auto back = ModelConfig::from_json(j);
  CHECK(back.base_channels == cfg.base_channels);
  CHECK(back.seed == cfg.seed);
  CHECK(back.to_json() == j);

  CHECK_THROWS_AS(ModelConfig::from_json({{"no_such_key", 1}}), ConfigError);
  ModelConfig bad = cfg;
  bad.edrm_count = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.wavelet = "db4";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("size round trip for odd and even sizes") {
  auto model = WecdgModel<double>::init(tiny_cfg());
  auto desc = model.sdgm.embed_text("underexposed");
  for (auto [h, w] : {std::pair{37, 53}, std::pair{64, 64}, std::pair{100, 100},
                      std::pair{8, 8}, std::pair{9, 17}}) {
    auto img = random_image(h, w, static_cast<uint64_t>(h * 1000 + w));
    auto out = model.forward(img, desc);
    CHECK(out.height() == h);
    CHECK(out.width() == w);
    for (size_t i = 0; i < out.pixels.size(); ++i) {
      CHECK(out.pixels[i] >= 0.0);
      CHECK(out.pixels[i] <= 1.0);
    }
  }
  CHECK_THROWS_AS(model.forward(ImageBuffer<double>{}, desc), EmptyImage);
}

TEST_CASE("zero-initialized head makes forward the identity") {
  auto model = WecdgModel<double>::init(tiny_cfg());
  zero_params(model.params, {std::string("head")});
  auto desc = model.sdgm.embed_text("overexposed");
  auto img = random_image(19, 23, 5);
  auto out = model.forward(img, desc);
  CHECK(max_abs_diff(out.pixels, img.pixels) < 1e-12);
}

TEST_CASE("descriptor changes the output under random parameters") {
  auto model = WecdgModel<double>::init(tiny_cfg(13));
  auto img = random_image(24, 24, 6);
  auto under = model.forward(img, model.sdgm.embed_text("underexposed"));
  auto over = model.forward(img, model.sdgm.embed_text("overexposed"));
  CHECK(max_abs_diff(under.pixels, over.pixels) > 1e-6);
}

TEST_CASE("forward determinism") {
  auto m1 = WecdgModel<double>::init(tiny_cfg(21));
  auto m2 = WecdgModel<double>::init(tiny_cfg(21));
  auto img = random_image(16, 16, 7);
  auto d1 = m1.sdgm.embed_text("underexposed");
  auto d2 = m2.sdgm.embed_text("underexposed");
  auto o1 = m1.forward(img, d1);
  auto o2 = m2.forward(img, d2);
  CHECK(max_abs_diff(o1.pixels, o2.pixels) == 0.0);
}

TEST_CASE("manual mix endpoints equal base labels") {
  auto model = WecdgModel<double>::init(tiny_cfg(31));
  auto img = random_image(16, 16, 8);
  auto a = model.correct_manual(img, DescriptorLabel::base(ExposureClass::Underexposed));
  auto b = model.correct_manual(
      img, DescriptorLabel::mix(ExposureClass::Underexposed, ExposureClass::Overexposed, 1.0));
  CHECK(max_abs_diff(a.pixels, b.pixels) == 0.0);
}

TEST_CASE("auto mode returns the argmax descriptor and a distribution") {
  auto model = WecdgModel<double>::init(tiny_cfg(41));
  auto img = random_image(32, 32, 9);
  auto res = model.correct_auto(img);
  double sum = 0;
  double best = -1;
  size_t best_i = 0;
  for (size_t i = 0; i < res.probabilities.size(); ++i) {
    sum += res.probabilities[i];
    if (res.probabilities[i] > best) {
      best = res.probabilities[i];
      best_i = i;
    }
  }
  CHECK(std::abs(sum - 1.0) < 1e-12);
  const ExposureClass classes[3] = {ExposureClass::Underexposed, ExposureClass::WellExposed,
                                    ExposureClass::Overexposed};
  CHECK(res.descriptor.label.primary == classes[best_i]);
  CHECK(res.descriptor.source == DescriptorSource::Auto);
  CHECK(res.image.height() == 32);
}

TEST_CASE("checkpoint save/load round trip") {
  const char *path = "pipeline_test.ckpt";
  auto model = WecdgModel<double>::init(tiny_cfg(51));
  save_checkpoint(model, path);
  auto loaded = load_checkpoint<double>(path);

  CHECK(loaded.cfg.to_json() == model.cfg.to_json());
  CHECK(loaded.param_count() == model.param_count());
  for (const auto &[name, t] : model.params) {
    const auto &lt = loaded.params.at(name);
    REQUIRE(lt.shape() == t.shape());
    CHECK(max_abs_diff(lt, t) == 0.0);
  }
  for (const auto &[name, t] : model.sdgm.params)
    CHECK(max_abs_diff(loaded.sdgm.params.at(name), t) == 0.0);

  // identical outputs after reload
  auto img = random_image(17, 19, 10);
  auto desc = model.sdgm.embed_text("overexposed");
  auto desc2 = loaded.sdgm.embed_text("overexposed");
  CHECK(max_abs_diff(model.forward(img, desc).pixels, loaded.forward(img, desc2).pixels) == 0.0);

  // two saves of the same model are byte-identical
  const char *path2 = "pipeline_test_2.ckpt";
  save_checkpoint(loaded, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);

  std::remove(path);
  std::remove(path2);

  CHECK_THROWS_AS(load_checkpoint<double>("missing.ckpt"), IoError);
}

TEST_CASE("parameter count is stable for a fixed config") {
  auto m1 = WecdgModel<double>::init(tiny_cfg(1));
  auto m2 = WecdgModel<double>::init(tiny_cfg(2));
  CHECK(m1.param_count() == m2.param_count());
  CHECK(m1.param_count() > 0);
  CHECK(m1.sdgm_param_count() > 0);

  // golden counts for the default configuration
  auto dflt = WecdgModel<double>::init(ModelConfig{});
  CHECK(dflt.param_count() == 911947);
  CHECK(dflt.sdgm_param_count() == 74062);
}
