#pragma once

// Full model assembly: shallow stem, front alignment block (coarse exposure
// modulation), U-shaped encoder/decoder with a stack of wavelet
// restoration blocks at the bottleneck, back alignment block (fine), output
// head with a global input residual, and clamping to [0,1]. Arbitrary image
// sizes are accepted via reflect padding to a multiple of 2^(levels+1)
// (levels encoder downsamples plus one wavelet halving) and cropping back.
//
// Checkpoints are a flat binary container of named float64 arrays plus a
// JSON config echo; see docs/checkpoint-format.md.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/ecam.hpp"
#include "wecdg/edrm.hpp"
#include "wecdg/image.hpp"
#include "wecdg/nn.hpp"
#include "wecdg/params.hpp"
#include "wecdg/sdgm.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

struct ModelConfig {
  uint64_t seed = 1;
  std::string precision = "f64";
  int base_channels = 16;
  int unet_levels = 2;
  int edrm_count = 4;
  int descriptor_dim = 50;
  int query_tokens = 4;
  int token_budget = 1024;
  int state_dim = 4;
  double expansion = 2.0;
  double sdgm_delta = 10.0;
  double mix_weight = 0.5;
  std::string wavelet = "haar";
  std::string embedding_file;

  void validate() const {
    if (edrm_count < 1) throw ConfigError("edrm_count must be >= 1");
    if (base_channels < 4) throw ConfigError("base_channels must be >= 4");
    if (unet_levels < 1) throw ConfigError("unet_levels must be >= 1");
    if (descriptor_dim < 1) throw ConfigError("descriptor_dim must be >= 1");
    if (query_tokens < 1) throw ConfigError("query_tokens must be >= 1");
    if (token_budget < 1) throw ConfigError("token_budget must be >= 1");
    if (state_dim < 1) throw ConfigError("state_dim must be >= 1");
    if (expansion < 1.0) throw ConfigError("expansion must be >= 1");
    if (sdgm_delta <= 0.0) throw ConfigError("sdgm_delta must be > 0");
    if (mix_weight < 0.0 || mix_weight > 1.0) throw ConfigError("mix_weight must be in [0,1]");
    if (wavelet != "haar") throw ConfigError("unsupported wavelet '" + wavelet + "'");
    if (precision != "f64" && precision != "f32")
      throw ConfigError("precision must be f64 or f32");
  }

  int pad_multiple() const { return 1 << (unet_levels + 1); }
  int bottleneck_channels() const { return base_channels << unet_levels; }

  nlohmann::json to_json() const {
    return nlohmann::json{{"seed", seed},
                          {"precision", precision},
                          {"base_channels", base_channels},
                          {"unet_levels", unet_levels},
                          {"edrm_count", edrm_count},
                          {"descriptor_dim", descriptor_dim},
                          {"query_tokens", query_tokens},
                          {"token_budget", token_budget},
                          {"state_dim", state_dim},
                          {"expansion", expansion},
                          {"sdgm_delta", sdgm_delta},
                          {"mix_weight", mix_weight},
                          {"wavelet", wavelet},
                          {"embedding_file", embedding_file}};
  }

  static ModelConfig from_json(const nlohmann::json &j) {
    ModelConfig cfg;
    for (const auto &[key, value] : j.items()) {
      if (key == "seed") cfg.seed = value.get<uint64_t>();
      else if (key == "precision") cfg.precision = value.get<std::string>();
      else if (key == "base_channels") cfg.base_channels = value.get<int>();
      else if (key == "unet_levels") cfg.unet_levels = value.get<int>();
      else if (key == "edrm_count") cfg.edrm_count = value.get<int>();
      else if (key == "descriptor_dim") cfg.descriptor_dim = value.get<int>();
      else if (key == "query_tokens") cfg.query_tokens = value.get<int>();
      else if (key == "token_budget") cfg.token_budget = value.get<int>();
      else if (key == "state_dim") cfg.state_dim = value.get<int>();
      else if (key == "expansion") cfg.expansion = value.get<double>();
      else if (key == "sdgm_delta") cfg.sdgm_delta = value.get<double>();
      else if (key == "mix_weight") cfg.mix_weight = value.get<double>();
      else if (key == "wavelet") cfg.wavelet = value.get<std::string>();
      else if (key == "embedding_file") cfg.embedding_file = value.get<std::string>();
      else throw ConfigError("unknown model config key '" + key + "'");
    }
    cfg.validate();
    return cfg;
  }

  EcamConfig ecam_config() const {
    return {base_channels, descriptor_dim, query_tokens, token_budget, expansion};
  }
  EdrmConfig edrm_config() const {
    return {bottleneck_channels(), expansion, state_dim, token_budget};
  }
  SdgmConfig sdgm_config() const { return {descriptor_dim, sdgm_delta, mix_weight, embedding_file}; }
};

template <typename Real>
class WecdgModel {
 public:
  ModelConfig cfg;
  ParameterTree<Real> params;  // restoration network
  Sdgm<Real> sdgm;             // descriptor generation / matching

  static WecdgModel init(const ModelConfig &cfg) {
    cfg.validate();
    WecdgModel m;
    m.cfg = cfg;
    m.params = ParameterTree<Real>(cfg.seed);
    m.sdgm = Sdgm<Real>::init(cfg.sdgm_config(), cfg.seed ^ 0x5d9fACEULL);

    const int b = cfg.base_channels;
    init_conv(m.params, "stem", 3, 3, b);
    init_ecam(m.params, "ecam_front", cfg.ecam_config());
    for (int l = 0; l < cfg.unet_levels; ++l)
      init_conv(m.params, "enc." + std::to_string(l), 3, b << l, b << (l + 1));
    for (int i = 0; i < cfg.edrm_count; ++i)
      init_edrm(m.params, "edrm." + std::to_string(i), cfg.edrm_config());
    for (int l = cfg.unet_levels - 1; l >= 0; --l)
      init_conv(m.params, "dec." + std::to_string(l), 3, (b << (l + 1)) + (b << l), b << l);
    init_ecam(m.params, "ecam_back", cfg.ecam_config());
    init_conv(m.params, "head", 3, b, 3);
    return m;
  }

  size_t param_count() const { return params.total_size(); }
  size_t sdgm_param_count() const { return sdgm.params.total_size(); }

  // Taped forward on an already-padded [H, W, 3] tensor (H, W multiples of
  // pad_multiple()). Returns the clamped restoration.
  Tensor<Real> forward_padded(const Tensor<Real> &x, const Tensor<Real> &descriptor) const {
    return clamp01(forward_padded_raw(x, descriptor));
  }

  // Pre-clamp output. Training losses use this so saturated pixels keep a
  // gradient; the clamp stays an inference-time contract.
  Tensor<Real> forward_padded_raw(const Tensor<Real> &x, const Tensor<Real> &descriptor) const {
    const int pm = cfg.pad_multiple();
    if (x.rank() != 3 || x.dim(2) != 3 || x.dim(0) % pm != 0 || x.dim(1) % pm != 0)
      throw ShapeMismatch("forward_padded needs [H,W,3] with H,W multiples of " +
                          std::to_string(pm) + ", got " + shape_str(x.shape()));
    auto ecam_cfg = cfg.ecam_config();
    auto edrm_cfg = cfg.edrm_config();

    auto f = silu(conv2d(x, params.at("stem.w"), &params.at("stem.b"), 1, 1));
    f = ecam_forward(f, descriptor, params, "ecam_front", ecam_cfg);

    std::vector<Tensor<Real>> skips;
    for (int l = 0; l < cfg.unet_levels; ++l) {
      skips.push_back(f);
      const std::string name = "enc." + std::to_string(l);
      f = silu(conv2d(f, params.at(name + ".w"), &params.at(name + ".b"), 2, 1));
    }
    for (int i = 0; i < cfg.edrm_count; ++i)
      f = edrm_forward(f, params, "edrm." + std::to_string(i), edrm_cfg);
    for (int l = cfg.unet_levels - 1; l >= 0; --l) {
      const std::string name = "dec." + std::to_string(l);
      auto cat = concat_lastdim<Real>({upsample2x(f), skips[static_cast<size_t>(l)]});
      f = silu(conv2d(cat, params.at(name + ".w"), &params.at(name + ".b"), 1, 1));
    }
    f = ecam_forward(f, descriptor, params, "ecam_back", ecam_cfg);
    auto delta = conv2d(f, params.at("head.w"), &params.at("head.b"), 1, 1);
    return add(delta, x);
  }

  // Inference on an arbitrary-size image: reflect-pad, run, crop back.
  ImageBuffer<Real> forward(const ImageBuffer<Real> &img,
                            const DegradationDescriptor<Real> &descriptor) const {
    if (img.pixels.size() == 0) throw EmptyImage("forward on an empty image");
    NoGradGuard ng;
    const int h = img.height(), w = img.width();
    const int pm = cfg.pad_multiple();
    const int th = ((h + pm - 1) / pm) * pm;
    const int tw = ((w + pm - 1) / pm) * pm;
    auto padded = reflect_pad_to(img.pixels, th, tw);
    auto out = crop_to(forward_padded(padded, descriptor.embedding), h, w);
    ImageBuffer<Real> res;
    res.pixels = std::move(out);
    res.source_path = img.source_path;
    res.original_height = h;
    res.original_width = w;
    return res;
  }

  ImageBuffer<Real> correct_manual(const ImageBuffer<Real> &img, const DescriptorLabel &label) const {
    return forward(img, sdgm.embed_text(label));
  }

  struct AutoResult {
    ImageBuffer<Real> image;
    DegradationDescriptor<Real> descriptor;
    std::vector<double> probabilities;
  };

  AutoResult correct_auto(const ImageBuffer<Real> &img) const {
    if (img.pixels.size() == 0) throw EmptyImage("correct_auto on an empty image");
    auto e_v = sdgm.embed_image(img.pixels);
    auto res = match(e_v.embedding, sdgm.class_descriptors(), static_cast<Real>(cfg.sdgm_delta));
    return {forward(img, res.descriptor), res.descriptor, res.probabilities};
  }
};

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCheckpointMagic[8] = {'W', 'E', 'C', 'D', 'G', 'C', 'P', '1'};
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ofstream &out, const T &v) {
  out.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream &in) {
  T v{};
  in.read(reinterpret_cast<char *>(&v), sizeof(T));
  if (!in) throw CorruptFile("truncated checkpoint");
  return v;
}

template <typename Real>
void write_entry(std::ofstream &out, const std::string &name, const Tensor<Real> &t) {
  write_pod(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_pod(out, static_cast<int64_t>(t.dim(i)));
  for (size_t i = 0; i < t.size(); ++i) write_pod(out, static_cast<double>(t[i]));
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const WecdgModel<Real> &model, const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(detail::kCheckpointMagic, 8);
  detail::write_pod(out, detail::kCheckpointVersion);
  const std::string config = model.cfg.to_json().dump();
  detail::write_pod(out, static_cast<uint64_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  detail::write_pod(out, static_cast<uint64_t>(model.params.count() + model.sdgm.params.count()));
  for (const auto &[name, t] : model.params) detail::write_entry(out, "model." + name, t);
  for (const auto &[name, t] : model.sdgm.params) detail::write_entry(out, "sdgm." + name, t);
  if (!out) throw IoError("short write to checkpoint " + path);
}

template <typename Real>
WecdgModel<Real> load_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw CorruptFile(path + " is not a checkpoint file");
  const auto version = detail::read_pod<uint32_t>(in);
  if (version != detail::kCheckpointVersion)
    throw UnsupportedFormat("checkpoint format version " + std::to_string(version));
  const auto json_len = detail::read_pod<uint64_t>(in);
  std::string config_text(json_len, '\0');
  in.read(config_text.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw CorruptFile("truncated checkpoint config");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(nlohmann::json::parse(config_text));
  } catch (const nlohmann::json::exception &e) {
    throw CorruptFile(std::string("bad checkpoint config: ") + e.what());
  }

  // The embedding file only seeds the base table; checkpoint data overwrites
  // it below, so a stale path must not fail the load.
  ModelConfig init_cfg = cfg;
  init_cfg.embedding_file.clear();
  auto model = WecdgModel<Real>::init(init_cfg);
  model.cfg = cfg;
  model.sdgm.cfg = cfg.sdgm_config();
  const auto n_entries = detail::read_pod<uint64_t>(in);
  size_t expected = model.params.count() + model.sdgm.params.count();
  if (n_entries != expected)
    throw CorruptFile("checkpoint has " + std::to_string(n_entries) + " entries, config implies " +
                      std::to_string(expected));
  for (uint64_t e = 0; e < n_entries; ++e) {
    const auto name_len = detail::read_pod<uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw CorruptFile("truncated checkpoint entry name");
    const auto ndim = detail::read_pod<uint32_t>(in);
    Shape shape(ndim);
    for (uint32_t i = 0; i < ndim; ++i) shape[i] = static_cast<int>(detail::read_pod<int64_t>(in));

    Tensor<Real> *target = nullptr;
    if (name.rfind("model.", 0) == 0 && model.params.contains(name.substr(6)))
      target = &model.params.at(name.substr(6));
    else if (name.rfind("sdgm.", 0) == 0 && model.sdgm.params.contains(name.substr(5)))
      target = &model.sdgm.params.at(name.substr(5));
    if (!target) throw CorruptFile("unexpected checkpoint entry '" + name + "'");
    if (target->shape() != shape)
      throw CorruptFile("checkpoint entry '" + name + "' has shape " + shape_str(shape) +
                        ", expected " + shape_str(target->shape()));
    for (size_t i = 0; i < target->size(); ++i)
      (*target)[i] = static_cast<Real>(detail::read_pod<double>(in));
  }
  return model;
}

}  // namespace wecdg
