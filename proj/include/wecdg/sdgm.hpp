#pragma once

// Scene description generation: maps exposure-degradation classes (or
// interpolations between them) to embedding vectors, and matches images to
// the nearest class by scaled cosine similarity. Base class vectors come from
// a seeded random-orthonormal table (optionally overridden by an embedding
// file with one token + d floats per line) and are refined by a small MLP;
// the visual side is a compact strided convnet with global average pooling.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wecdg/common.hpp"
#include "wecdg/nn.hpp"
#include "wecdg/params.hpp"
#include "wecdg/tensor.hpp"

namespace wecdg {

enum class ExposureClass { Underexposed, WellExposed, Overexposed };

inline const char *exposure_class_name(ExposureClass c) {
  switch (c) {
    case ExposureClass::Underexposed: return "underexposed";
    case ExposureClass::WellExposed: return "well-exposed";
    default: return "overexposed";
  }
}

// A descriptor label: a base exposure class, or a convex mix of two classes.
struct DescriptorLabel {
  ExposureClass primary = ExposureClass::WellExposed;
  ExposureClass secondary = ExposureClass::WellExposed;
  double weight = 1.0;  // weight of primary; 1.0 means pure primary

  static DescriptorLabel base(ExposureClass c) { return {c, c, 1.0}; }

  static DescriptorLabel mix(ExposureClass a, ExposureClass b, double w) {
    if (w < 0.0 || w > 1.0) throw UnknownLabel("mix weight must be in [0,1]");
    return {a, b, w};
  }

  bool is_mix() const { return weight < 1.0 && primary != secondary; }

  std::string str() const {
    if (!is_mix()) return exposure_class_name(primary);
    std::ostringstream os;
    os << "mix(" << exposure_class_name(primary) << "," << exposure_class_name(secondary) << ","
       << weight << ")";
    return os.str();
  }

  // Accepts descriptor names (underexposed / well-exposed / overexposed and
  // the short forms under / well / over / gt), dataset exposure codes
  // (N1.5, N1, 0, P1, P1.5) and "mix:<a>,<b>,<w>". Codes N1/P1 map to a mix
  // with the configured interpolation weight.
  static DescriptorLabel parse(const std::string &text, double mix_weight = 0.5) {
    auto cls = [](const std::string &s) -> ExposureClass {
      if (s == "underexposed" || s == "under") return ExposureClass::Underexposed;
      if (s == "well-exposed" || s == "well" || s == "gt" || s == "GT")
        return ExposureClass::WellExposed;
      if (s == "overexposed" || s == "over") return ExposureClass::Overexposed;
      throw UnknownLabel("unknown exposure class '" + s + "'");
    };
    if (text == "N1.5" || text == "underexposed" || text == "under")
      return base(ExposureClass::Underexposed);
    if (text == "P1.5" || text == "overexposed" || text == "over")
      return base(ExposureClass::Overexposed);
    if (text == "GT" || text == "gt" || text == "0" || text == "well-exposed" || text == "well")
      return base(ExposureClass::WellExposed);
    if (text == "N1") return mix(ExposureClass::Underexposed, ExposureClass::WellExposed, mix_weight);
    if (text == "P1") return mix(ExposureClass::Overexposed, ExposureClass::WellExposed, mix_weight);
    if (text.rfind("mix:", 0) == 0) {
      std::string body = text.substr(4);
      std::replace(body.begin(), body.end(), ',', ' ');
      std::istringstream is(body);
      std::string a, b;
      double w;
      if (!(is >> a >> b >> w)) throw UnknownLabel("expected mix:<a>,<b>,<weight>, got '" + text + "'");
      return mix(cls(a), cls(b), w);
    }
    throw UnknownLabel("unknown descriptor label '" + text + "'");
  }
};

enum class DescriptorSource { Manual, Auto };

template <typename Real>
struct DegradationDescriptor {
  DescriptorLabel label;
  Tensor<Real> embedding;  // [d]
  DescriptorSource source = DescriptorSource::Manual;
};

template <typename Real>
struct VisualEmbedding {
  Tensor<Real> embedding;  // [d]
};

struct SdgmConfig {
  int descriptor_dim = 50;
  double delta = 10.0;      // cosine scaling factor
  double mix_weight = 0.5;  // interpolation weight for intermediate exposure codes
  std::string embedding_file;  // optional override of the seeded base table
};

// scaled cosine similarity; taped when inputs are
template <typename Real>
Tensor<Real> cosine_score(const Tensor<Real> &e_v, const Tensor<Real> &e_t, Real delta) {
  auto norm = [](const Tensor<Real> &t) { return sqrt(sum_all(square(t))); };
  auto nv = norm(e_v);
  auto nt = norm(e_t);
  if (nv.item() == Real(0) || nt.item() == Real(0))
    throw ZeroVector("cosine_score on a zero vector");
  return scale(div(sum_all(mul(e_v, e_t)), mul(nv, nt)), delta);
}

template <typename Real>
class Sdgm {
 public:
  SdgmConfig cfg;
  ParameterTree<Real> params;

  static Sdgm init(const SdgmConfig &cfg, uint64_t seed) {
    Sdgm s;
    s.cfg = cfg;
    s.params = ParameterTree<Real>(seed);
    const int d = cfg.descriptor_dim;
    if (!cfg.embedding_file.empty()) {
      s.params.add("text.table", load_embedding_table(cfg.embedding_file, d));
    } else {
      s.params.add("text.table", orthonormal_rows(3, d, seed));
    }
    init_linear(s.params, "text.mlp.l1", d, 2 * d);
    init_linear(s.params, "text.mlp.l2", 2 * d, d);
    init_conv(s.params, "vis.conv0", 3, 3, 16);
    init_conv(s.params, "vis.conv1", 3, 16, 32);
    init_conv(s.params, "vis.conv2", 3, 32, 64);
    init_conv(s.params, "vis.conv3", 3, 64, 64);
    init_linear(s.params, "vis.head", 64, d);
    return s;
  }

  // refined embedding of one base class, taped through the MLP
  Tensor<Real> class_embedding(ExposureClass c) const {
    const int d = cfg.descriptor_dim;
    auto row = slice_lastdim(reshape(params.at("text.table"), {1, 3 * d}),
                             static_cast<int>(c) * d, d);
    auto h = silu(linear(row, params.at("text.mlp.l1.w"), params.at("text.mlp.l1.b")));
    return linear(h, params.at("text.mlp.l2.w"), params.at("text.mlp.l2.b"));  // [1,d]
  }

  Tensor<Real> label_embedding(const DescriptorLabel &label) const {
    auto ea = class_embedding(label.primary);
    if (!label.is_mix() || label.weight == 1.0) return reshape(ea, {cfg.descriptor_dim});
    auto eb = class_embedding(label.secondary);
    auto mixed = add(scale(ea, static_cast<Real>(label.weight)),
                     scale(eb, static_cast<Real>(1.0 - label.weight)));
    return reshape(mixed, {cfg.descriptor_dim});
  }

  DegradationDescriptor<Real> embed_text(const DescriptorLabel &label) const {
    NoGradGuard ng;
    return {label, label_embedding(label), DescriptorSource::Manual};
  }

  DegradationDescriptor<Real> embed_text(const std::string &text) const {
    return embed_text(DescriptorLabel::parse(text, cfg.mix_weight));
  }

  // visual embedding, taped (used by classifier training)
  Tensor<Real> image_embedding(const Tensor<Real> &img) const {
    if (img.rank() != 3 || img.size() == 0)
      throw EmptyImage("image embedding needs a nonempty [H,W,C] image");
    auto f = silu(conv2d(img, params.at("vis.conv0.w"), &params.at("vis.conv0.b"), 2, 1));
    f = silu(conv2d(f, params.at("vis.conv1.w"), &params.at("vis.conv1.b"), 2, 1));
    f = silu(conv2d(f, params.at("vis.conv2.w"), &params.at("vis.conv2.b"), 2, 1));
    f = silu(conv2d(f, params.at("vis.conv3.w"), &params.at("vis.conv3.b"), 2, 1));
    auto pooled = mean_rows(flatten_hwc(f));  // [64]
    auto head = linear(reshape(pooled, {1, 64}), params.at("vis.head.w"), params.at("vis.head.b"));
    return reshape(head, {cfg.descriptor_dim});
  }

  VisualEmbedding<Real> embed_image(const Tensor<Real> &img) const {
    NoGradGuard ng;
    return {image_embedding(img)};
  }

  // the three base-class descriptors, in enum order
  std::vector<DegradationDescriptor<Real>> class_descriptors() const {
    std::vector<DegradationDescriptor<Real>> out;
    for (auto c : {ExposureClass::Underexposed, ExposureClass::WellExposed,
                   ExposureClass::Overexposed})
      out.push_back(embed_text(DescriptorLabel::base(c)));
    return out;
  }

 private:
  static Tensor<Real> orthonormal_rows(int rows, int cols, uint64_t seed) {
    Rng rng = rng_for(seed, "text.table.init");
    std::vector<std::vector<double>> basis;
    while (static_cast<int>(basis.size()) < rows) {
      std::vector<double> v(static_cast<size_t>(cols));
      for (auto &x : v) x = rng.normal();
      for (const auto &u : basis) {
        double dot = 0;
        for (int j = 0; j < cols; ++j) dot += v[static_cast<size_t>(j)] * u[static_cast<size_t>(j)];
        for (int j = 0; j < cols; ++j) v[static_cast<size_t>(j)] -= dot * u[static_cast<size_t>(j)];
      }
      double norm = 0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;  // resample a degenerate draw
      for (auto &x : v) x /= norm;
      basis.push_back(std::move(v));
    }
    Tensor<Real> t({rows, cols});
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        t[static_cast<size_t>(i * cols + j)] = static_cast<Real>(basis[static_cast<size_t>(i)][static_cast<size_t>(j)]);
    return t;
  }

  static Tensor<Real> load_embedding_table(const std::string &path, int d) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embedding file " + path);
    std::map<std::string, std::vector<double>> vecs;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream is(line);
      std::string token;
      is >> token;
      std::vector<double> v;
      double x;
      while (is >> x) v.push_back(x);
      if (static_cast<int>(v.size()) != d)
        throw CorruptFile("embedding for '" + token + "' has " + std::to_string(v.size()) +
                          " values, expected " + std::to_string(d));
      vecs[token] = std::move(v);
    }
    Tensor<Real> t({3, d});
    const char *names[3] = {"underexposed", "well-exposed", "overexposed"};
    for (int i = 0; i < 3; ++i) {
      auto it = vecs.find(names[i]);
      if (it == vecs.end())
        throw CorruptFile("embedding file missing token '" + std::string(names[i]) + "'");
      for (int j = 0; j < d; ++j)
        t[static_cast<size_t>(i * d + j)] = static_cast<Real>(it->second[static_cast<size_t>(j)]);
    }
    return t;
  }
};

template <typename Real>
struct MatchResult {
  DegradationDescriptor<Real> descriptor;
  std::vector<double> probabilities;
  int argmax = 0;
};

// Softmax over scaled cosine scores against each candidate descriptor.
// Ties break toward the earlier list entry.
template <typename Real>
MatchResult<Real> match(const Tensor<Real> &e_v,
                        const std::vector<DegradationDescriptor<Real>> &descriptors, Real delta) {
  if (descriptors.empty()) throw EmptyDescriptorSet("match needs at least one descriptor");
  NoGradGuard ng;
  std::vector<double> scores;
  scores.reserve(descriptors.size());
  for (const auto &d : descriptors)
    scores.push_back(static_cast<double>(cosine_score(e_v, d.embedding, delta).item()));
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  std::vector<double> probs(scores.size());
  double denom = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    probs[i] = std::exp(scores[i] - mx);
    denom += probs[i];
  }
  int best = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    probs[i] /= denom;
    if (probs[i] > probs[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  MatchResult<Real> res{descriptors[static_cast<size_t>(best)], std::move(probs), best};
  res.descriptor.source = DescriptorSource::Auto;
  return res;
}

// ---------------------------------------------------------------------------
// classifier training (cross-entropy over match probabilities)
// ---------------------------------------------------------------------------

template <typename Real>
struct SdgmSample {
  Tensor<Real> image;  // [H,W,3] in [0,1]
  ExposureClass label;
};

// One loss evaluation for a sample: -log softmax(scores)[label].
template <typename Real>
Tensor<Real> sdgm_sample_loss(const Sdgm<Real> &sdgm, const SdgmSample<Real> &sample) {
  auto e_v = sdgm.image_embedding(sample.image);
  std::vector<Tensor<Real>> scores;
  for (auto c : {ExposureClass::Underexposed, ExposureClass::WellExposed,
                 ExposureClass::Overexposed}) {
    auto e_t = reshape(sdgm.class_embedding(c), {sdgm.cfg.descriptor_dim});
    scores.push_back(reshape(cosine_score(e_v, e_t, static_cast<Real>(sdgm.cfg.delta)), {1}));
  }
  auto logits = reshape(concat_lastdim(scores), {1, 3});
  auto probs = softmax_lastdim(logits);
  auto p_true = slice_lastdim(probs, static_cast<int>(sample.label), 1);
  return neg(log(reshape(p_true, {1})));
}

// Minimize cross-entropy of match probabilities against the true class. The
// base embedding table stays frozen (only the refining MLP and the visual
// encoder train), mirroring the use of fixed pretrained word vectors.
template <typename Real>
void train_sdgm(Sdgm<Real> &sdgm, const std::vector<SdgmSample<Real>> &dataset, int epochs,
                double lr, int batch, Rng &rng,
                const std::function<void(int, double)> &on_epoch = {}) {
  if (dataset.empty()) throw EmptyDataset("train_sdgm needs a nonempty dataset");
  Adam<Real> opt(lr);
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int e = 0; e < epochs; ++e) {
    // Fisher-Yates with the run RNG so epochs are reproducible
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = rng.below(i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0;
    size_t cursor = 0;
    while (cursor < order.size()) {
      const size_t take = std::min<size_t>(static_cast<size_t>(batch), order.size() - cursor);
      sdgm.params.zero_grad();
      double batch_loss = 0;
      for (size_t k = 0; k < take; ++k) {
        auto loss = scale(sdgm_sample_loss(sdgm, dataset[order[cursor + k]]),
                          static_cast<Real>(1.0 / static_cast<double>(take)));
        backward(loss);
        batch_loss += static_cast<double>(loss.item());
      }
      // frozen base table: clear its gradient so Adam leaves it untouched
      sdgm.params.at("text.table").zero_grad();
      opt.step(sdgm.params);
      epoch_loss += batch_loss * static_cast<double>(take);
      cursor += take;
    }
    if (on_epoch) on_epoch(e, epoch_loss / static_cast<double>(dataset.size()));
  }
}

}  // namespace wecdg
