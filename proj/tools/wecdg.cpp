// Command-line surface: dataset synthesis, training, evaluation, correction,
// classification, wavelet experiments and the gradient verification suite.
//
// Exit codes: 0 success, 1 runtime failure (structured error message on
// stderr), 2 usage error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "wecdg/data.hpp"
#include "wecdg/gradsuite.hpp"
#include "wecdg/pipeline.hpp"
#include "wecdg/wavelet.hpp"

namespace {

using namespace wecdg;

struct GlobalOptions {
  std::optional<uint64_t> seed;
  std::string config_path;
  std::string precision;  // empty: from config (default f64)
};

struct Settings {
  ModelConfig model;
  TrainConfig train;
};

// precedence: --seed flag > WECDG_SEED env > config file > default
Settings merge_settings(const GlobalOptions &opts) {
  Settings s;
  if (!opts.config_path.empty()) {
    std::ifstream in(opts.config_path);
    if (!in) throw IoError("cannot open config " + opts.config_path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception &e) {
      throw ConfigError("config " + opts.config_path + ": " + e.what());
    }
    for (const auto &[key, value] : j.items()) {
      if (key == "model") s.model = ModelConfig::from_json(value);
      else if (key == "train") s.train = TrainConfig::from_json(value);
      else throw ConfigError("unknown top-level config key '" + key + "' (expected model/train)");
    }
  }
  if (const char *env = std::getenv("WECDG_SEED")) {
    try {
      s.model.seed = std::stoull(env);
    } catch (const std::exception &) {
      throw ConfigError("WECDG_SEED is not an integer: " + std::string(env));
    }
    s.train.seed = s.model.seed;
  }
  if (opts.seed) {
    s.model.seed = *opts.seed;
    s.train.seed = *opts.seed;
  }
  if (!opts.precision.empty()) s.model.precision = opts.precision;
  s.model.validate();
  return s;
}

std::string out_name(const std::string &input, const std::string &suffix,
                     const std::string &out_dir) {
  std::filesystem::path p(input);
  std::filesystem::path dir = out_dir.empty() ? p.parent_path() : std::filesystem::path(out_dir);
  return (dir / (p.stem().string() + suffix + ".png")).string();
}

double tensor_mean(const Tensor<double> &t) {
  double acc = 0;
  for (size_t i = 0; i < t.size(); ++i) acc += t[i];
  return acc / static_cast<double>(t.size());
}

// ---------------------------------------------------------------------------
// subcommand bodies (templated on the runtime scalar type)
// ---------------------------------------------------------------------------

template <typename Real>
int cmd_synth(const Settings &s, const std::string &out_dir, int count, int size) {
  auto manifest = synth_dataset<Real>(out_dir, count, s.model.seed, size);
  std::cout << "wrote " << manifest.entries.size() << " entries ("
            << count << " scenes) to " << out_dir << "/manifest.json\n";
  return 0;
}

template <typename Real>
int cmd_train(const Settings &s, const std::string &data, const std::string &out,
              const std::string &log_path) {
  auto manifest = DatasetManifest::load(data);
  std::ofstream log_file;
  std::ostream *log_to = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw IoError("cannot write log " + log_path);
    log_to = &log_file;
  }
  auto model = train<Real>(manifest, s.model, s.train,
                           [&](const std::string &line) { *log_to << line << "\n"; });
  save_checkpoint(model, out);
  std::cout << "checkpoint written to " << out << " (" << model.param_count()
            << " model parameters, " << model.sdgm_param_count() << " descriptor parameters)\n";
  return 0;
}

template <typename Real>
int cmd_eval(const std::string &data, const std::string &ckpt, const std::string &mode) {
  auto manifest = DatasetManifest::load(data);
  auto model = load_checkpoint<Real>(ckpt);
  auto report = evaluate(manifest, model, mode == "auto");
  std::cout << "mode: " << mode << "\n" << report.render();
  return 0;
}

template <typename Real>
int cmd_correct(const std::string &ckpt, const std::string &mode, const std::string &descriptor,
                const std::string &input, std::string output) {
  auto model = load_checkpoint<Real>(ckpt);
  auto img = load_image<Real>(input);
  if (output.empty()) output = out_name(input, ".corrected", "");
  if (mode == "manual") {
    if (descriptor.empty())
      throw UnknownLabel("manual mode needs --descriptor (underexposed, well-exposed, "
                         "overexposed, a dataset code, or mix:<a>,<b>,<w>)");
    auto label = DescriptorLabel::parse(descriptor, model.cfg.mix_weight);
    save_image(model.correct_manual(img, label), output);
    std::cout << "descriptor: " << label.str() << " (manual)\n";
  } else {
    auto res = model.correct_auto(img);
    save_image(res.image, output);
    std::cout << "descriptor: " << res.descriptor.label.str() << " (auto)  p = [";
    for (size_t i = 0; i < res.probabilities.size(); ++i)
      std::cout << (i ? ", " : "") << res.probabilities[i];
    std::cout << "]\n";
  }
  std::cout << "wrote " << output << "\n";
  return 0;
}

template <typename Real>
int cmd_classify(const std::string &ckpt, const std::vector<std::string> &images) {
  auto model = load_checkpoint<Real>(ckpt);
  auto descriptors = model.sdgm.class_descriptors();
  for (const auto &path : images) {
    auto img = load_image<Real>(path);
    auto e_v = model.sdgm.embed_image(img.pixels);
    auto res = match(e_v.embedding, descriptors, static_cast<Real>(model.cfg.sdgm_delta));
    std::cout << path << "  " << res.descriptor.label.str() << "  p = [";
    for (size_t i = 0; i < res.probabilities.size(); ++i)
      std::cout << (i ? ", " : "") << res.probabilities[i];
    std::cout << "]\n";
  }
  return 0;
}

// Subband images are rescaled for display: the approximation by 2^-level,
// detail bands recentered around mid-gray.
int cmd_decompose(const std::string &input, int levels, const std::string &out_dir) {
  auto img = load_image<double>(input);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  auto bands = dwt2_multi(img.pixels, levels);
  for (int l = 0; l < levels; ++l) {
    const double scale_a = std::pow(0.5, l + 1);
    const double scale_d = std::pow(0.5, l + 1);
    auto write_band = [&](const Tensor<double> &band, const std::string &tag, bool is_approx) {
      Tensor<double> vis(band.shape());
      for (size_t i = 0; i < band.size(); ++i)
        vis[i] = is_approx ? band[i] * scale_a : 0.5 + band[i] * scale_d;
      auto path = out_name(input, "_L" + std::to_string(l + 1) + "_" + tag, out_dir);
      save_image(ImageBuffer<double>::from_pixels(clamp01(vis)), path);
      std::cout << "wrote " << path << "\n";
    };
    const auto &sb = bands[static_cast<size_t>(l)];
    write_band(sb.approx, "ca", true);
    write_band(sb.horizontal, "ch", false);
    write_band(sb.vertical, "cv", false);
    write_band(sb.diagonal, "cd", false);
  }
  return 0;
}

int cmd_swap(const std::string &which, const std::string &path_a, const std::string &path_b,
             const std::string &out_dir) {
  auto a = load_image<double>(path_a);
  auto b = load_image<double>(path_b);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  const auto band = which == "lf" ? SwapBand::LowFrequency : SwapBand::HighFrequency;
  auto [ra, rb] = swap_subbands(a.pixels, b.pixels, band);
  const double ma_in = tensor_mean(a.pixels), mb_in = tensor_mean(b.pixels);
  const double ma_out = tensor_mean(ra), mb_out = tensor_mean(rb);
  std::cout.precision(17);
  if (band == SwapBand::HighFrequency) {
    std::cout << "pre-clamp mean delta a: " << std::abs(ma_out - ma_in) << "\n";
    std::cout << "pre-clamp mean delta b: " << std::abs(mb_out - mb_in) << "\n";
  } else {
    std::cout << "pre-clamp |mean(out_a) - mean(in_b)|: " << std::abs(ma_out - mb_in) << "\n";
    std::cout << "pre-clamp |mean(out_b) - mean(in_a)|: " << std::abs(mb_out - ma_in) << "\n";
  }
  const auto pa = out_name(path_a, "_" + which + "swap", out_dir);
  const auto pb = out_name(path_b, "_" + which + "swap", out_dir);
  save_image(ImageBuffer<double>::from_pixels(clamp01(ra)), pa);
  save_image(ImageBuffer<double>::from_pixels(clamp01(rb)), pb);
  std::cout << "wrote " << pa << "\nwrote " << pb << "\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  auto res = run_gradcheck_suite(seed, &std::cout);
  std::cout << (res.pass ? "gradcheck passed" : "gradcheck FAILED") << " (" << res.blocks.size()
            << " blocks, seed " << seed << ")\n";
  return res.pass ? 0 : 1;
}

template <typename Real>
int cmd_paramcount(const Settings &s, const std::string &ckpt) {
  if (!ckpt.empty()) {
    auto model = load_checkpoint<Real>(ckpt);
    std::cout << "model parameters: " << model.param_count() << "\n";
    std::cout << "descriptor parameters: " << model.sdgm_param_count() << "\n";
    return 0;
  }
  auto model = WecdgModel<Real>::init(s.model);
  std::cout << "model parameters: " << model.param_count() << "\n";
  std::cout << "descriptor parameters: " << model.sdgm_param_count() << "\n";
  return 0;
}

template <typename F32Fn, typename F64Fn>
int dispatch_precision(const std::string &precision, F32Fn f32, F64Fn f64) {
  if (precision == "f32") return f32();
  return f64();
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"wavelet exposure correction with degradation guidance"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may appear after the subcommand name

  GlobalOptions opts;
  app.add_option("--seed", opts.seed, "override the run seed");
  app.add_option("--config", opts.config_path, "JSON config file with model/train sections");
  app.add_option("--precision", opts.precision, "numeric precision")
      ->check(CLI::IsMember({"f32", "f64"}));

  auto *synth = app.add_subcommand("synth", "generate a synthetic exposure dataset");
  std::string synth_out;
  int synth_count = 64, synth_size = 64;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of scenes");
  synth->add_option("--size", synth_size, "image side length");

  auto *train_cmd = app.add_subcommand("train", "train classifier and restoration network");
  std::string train_data, train_out, train_log;
  std::optional<int> train_steps, train_batch, train_crop, train_stride, train_sdgm_epochs;
  std::optional<double> train_lr;
  train_cmd->add_option("--data", train_data, "dataset manifest")->required();
  train_cmd->add_option("--out", train_out, "checkpoint output path")->required();
  train_cmd->add_option("--log", train_log, "training log file (default stdout)");
  train_cmd->add_option("--steps", train_steps, "restoration training steps");
  train_cmd->add_option("--batch", train_batch, "batch size");
  train_cmd->add_option("--lr", train_lr, "learning rate");
  train_cmd->add_option("--crop", train_crop, "crop size");
  train_cmd->add_option("--stride", train_stride, "crop sampling stride");
  train_cmd->add_option("--sdgm-epochs", train_sdgm_epochs, "classifier training epochs");

  auto *eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string eval_data, eval_ckpt, eval_mode = "manual";
  eval_cmd->add_option("--data", eval_data, "dataset manifest")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--mode", eval_mode, "descriptor source")
      ->check(CLI::IsMember({"manual", "auto"}));

  auto *correct = app.add_subcommand("correct", "correct a single image");
  std::string cor_ckpt, cor_mode = "auto", cor_desc, cor_in, cor_out;
  correct->add_option("--checkpoint", cor_ckpt, "checkpoint path")->required();
  correct->add_option("--mode", cor_mode, "descriptor source")
      ->check(CLI::IsMember({"auto", "manual"}));
  correct->add_option("--descriptor", cor_desc, "descriptor label for manual mode");
  correct->add_option("--output", cor_out, "output image path");
  correct->add_option("input", cor_in, "input image")->required();

  auto *classify = app.add_subcommand("classify", "classify exposure degradation");
  std::string cls_ckpt;
  std::vector<std::string> cls_inputs;
  classify->add_option("--checkpoint", cls_ckpt, "checkpoint path")->required();
  classify->add_option("inputs", cls_inputs, "input images")->required();

  auto *decompose = app.add_subcommand("decompose", "emit wavelet subband images");
  std::string dec_in, dec_out_dir;
  int dec_levels = 1;
  decompose->add_option("input", dec_in, "input image")->required();
  decompose->add_option("--levels", dec_levels, "decomposition levels")
      ->check(CLI::PositiveNumber);
  decompose->add_option("--out-dir", dec_out_dir, "output directory");

  auto *swap = app.add_subcommand("swap", "exchange wavelet bands between two images");
  std::string swap_which, swap_a, swap_b, swap_out_dir;
  swap->add_option("--which", swap_which, "band to exchange")
      ->required()
      ->check(CLI::IsMember({"lf", "hf"}));
  swap->add_option("a", swap_a, "first image")->required();
  swap->add_option("b", swap_b, "second image")->required();
  swap->add_option("--out-dir", swap_out_dir, "output directory");

  auto *gradcheck = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");

  auto *paramcount = app.add_subcommand("paramcount", "report parameter counts");
  std::string pc_ckpt;
  paramcount->add_option("--checkpoint", pc_ckpt, "count a checkpoint instead of the config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Settings s = merge_settings(opts);
    if (train_steps) s.train.steps = *train_steps;
    if (train_batch) s.train.batch = *train_batch;
    if (train_lr) s.train.lr = *train_lr;
    if (train_crop) s.train.crop_size = *train_crop;
    if (train_stride) s.train.stride = *train_stride;
    if (train_sdgm_epochs) s.train.sdgm_epochs = *train_sdgm_epochs;
    const std::string precision = s.model.precision;

    if (*synth)
      return dispatch_precision(
          precision, [&] { return cmd_synth<float>(s, synth_out, synth_count, synth_size); },
          [&] { return cmd_synth<double>(s, synth_out, synth_count, synth_size); });
    if (*train_cmd)
      return dispatch_precision(
          precision, [&] { return cmd_train<float>(s, train_data, train_out, train_log); },
          [&] { return cmd_train<double>(s, train_data, train_out, train_log); });
    if (*eval_cmd)
      return dispatch_precision(
          precision, [&] { return cmd_eval<float>(eval_data, eval_ckpt, eval_mode); },
          [&] { return cmd_eval<double>(eval_data, eval_ckpt, eval_mode); });
    if (*correct)
      return dispatch_precision(
          precision,
          [&] { return cmd_correct<float>(cor_ckpt, cor_mode, cor_desc, cor_in, cor_out); },
          [&] { return cmd_correct<double>(cor_ckpt, cor_mode, cor_desc, cor_in, cor_out); });
    if (*classify)
      return dispatch_precision(
          precision, [&] { return cmd_classify<float>(cls_ckpt, cls_inputs); },
          [&] { return cmd_classify<double>(cls_ckpt, cls_inputs); });
    if (*decompose) return cmd_decompose(dec_in, dec_levels, dec_out_dir);
    if (*swap) return cmd_swap(swap_which, swap_a, swap_b, swap_out_dir);
    if (*gradcheck) return cmd_gradcheck(s.model.seed);
    if (*paramcount)
      return dispatch_precision(
          precision, [&] { return cmd_paramcount<float>(s, pc_ckpt); },
          [&] { return cmd_paramcount<double>(s, pc_ckpt); });
  } catch (const wecdg::Error &e) {
    std::cerr << "error" << e.what() << "\n";
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error[Internal] " << e.what() << "\n";
    return 1;
  }
  return 2;
}
