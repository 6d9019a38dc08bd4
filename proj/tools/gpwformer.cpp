#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "gpw/ablation.hpp"
#include "gpw/checkpoint.hpp"
#include "gpw/config.hpp"
#include "gpw/counter.hpp"
#include "gpw/data.hpp"
#include "gpw/model.hpp"
#include "gpw/train.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

gpw::data::Dataset load_data(const std::string& source, const gpw::RunConfig& cfg) {
  if (source == "synthetic") {
    gpw::data::SynthSpec spec;
    spec.size = cfg.model.image_height;
    spec.classes = cfg.model.classes;
    return gpw::data::make_synthetic(spec);
  }
  gpw::data::Dataset ds = gpw::data::load_dataset(source);
  if (ds.empty()) throw gpw::DataError("no image_*.ppm files in " + source);
  if (ds.classes > cfg.model.classes) {
    throw gpw::DataError("dataset has " + std::to_string(ds.classes) + " classes, model " +
                         std::to_string(cfg.model.classes));
  }
  return ds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw gpw::DataError("cannot write " + path.string());
  out << text;
}

struct TrainArgs {
  std::string config, data = "synthetic", out = "run", resume;
  std::optional<std::uint64_t> iters;
};

int run_train(const TrainArgs& a) {
  gpw::RunConfig cfg = gpw::load_config(a.config);
  if (a.iters) cfg.train.total_iters = *a.iters;
  cfg.validate();
  const gpw::data::Dataset ds = load_data(a.data, cfg);
  fs::create_directories(a.out);

  gpw::Model model(cfg.model, cfg.train.seed);
  gpw::Trainer trainer(model, ds, cfg.train);
  if (!a.resume.empty()) {
    const gpw::Checkpoint ck = gpw::read_checkpoint(a.resume);
    gpw::restore(ck, model, &trainer.optimizer());
    trainer.set_iteration(ck.iteration);
  }
  write_text(fs::path(a.out) / "config.cfg", gpw::to_text(cfg));
  std::ofstream log(fs::path(a.out) / "train.log", std::ios::app);
  const auto every = cfg.train.checkpoint_every;
  trainer.run(cfg.train.total_iters, [&](const gpw::LogRecord& r) {
    const std::string line = r.to_line();
    std::cout << line << '\n';
    log << line << '\n' << std::flush;
    if (every > 0 && (r.iter + 1) % every == 0) {
      gpw::write_checkpoint(fs::path(a.out) / ("checkpoint_" + std::to_string(r.iter + 1) + ".bin"),
                            gpw::capture(cfg, model, trainer.optimizer(), r.iter + 1));
    }
  });
  gpw::write_checkpoint(fs::path(a.out) / "checkpoint.bin",
                        gpw::capture(cfg, model, trainer.optimizer(), trainer.iteration()));
  const auto report = gpw::evaluate(model, ds);
  write_text(fs::path(a.out) / "metrics.json", report.to_json() + "\n");
  std::cout << report.to_json() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data = "synthetic", masks, out;
};

int run_eval(const EvalArgs& a) {
  const gpw::Checkpoint ck = gpw::read_checkpoint(a.checkpoint);
  const gpw::RunConfig cfg = gpw::parse_config(ck.config_text);
  gpw::Model model(cfg.model, cfg.train.seed);
  gpw::restore(ck, model);
  const gpw::data::Dataset ds = load_data(a.data, cfg);
  const auto report = gpw::evaluate(model, ds);
  if (!a.masks.empty()) {
    fs::create_directories(a.masks);
    const auto pred = gpw::predict(model, ds);
    for (std::size_t i = 0; i < pred.n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "mask_%04zu.pgm", i);
      gpw::data::write_pgm(fs::path(a.masks) / name, pred, i);
    }
  }
  if (!a.out.empty()) write_text(a.out, report.to_json() + "\n");
  std::cout << report.to_json() << '\n';
  return kOk;
}

struct AblateArgs {
  std::string mode, config, data = "synthetic", out;
  std::vector<std::string> settings;
  std::optional<std::uint64_t> iters;
};

int run_ablate(const AblateArgs& a) {
  const auto mode = gpw::parse_ablation_mode(a.mode);
  gpw::RunConfig cfg = gpw::load_config(a.config);
  if (a.iters) cfg.train.total_iters = *a.iters;
  cfg.validate();
  const auto ds = load_data(a.data, cfg);
  const auto settings = a.settings.empty() ? gpw::default_settings(mode) : a.settings;
  const auto table = gpw::ablation_run(mode, settings, cfg, ds,
                                       [](const std::string& s, const gpw::LogRecord& r) {
                                         std::cerr << "[" << s << "] " << r.to_line() << '\n';
                                       });
  if (!a.out.empty()) write_text(a.out, table.to_text());
  std::cout << table.to_text();
  return kOk;
}

int run_synth(const std::string& spec_path, const std::string& out) {
  std::ifstream in(spec_path);
  if (!in) throw gpw::ConfigError("cannot open synth spec " + spec_path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto spec = gpw::data::parse_synth_spec(ss.str());
  const auto ds = gpw::data::make_synthetic(spec);
  gpw::data::save_dataset(out, ds);
  std::cout << "wrote " << ds.size() << " samples to " << out << '\n';
  return kOk;
}

int run_profile(const std::string& config) {
  const gpw::RunConfig cfg = gpw::load_config(config);
  gpw::Model model(cfg.model, cfg.train.seed);
  const auto image = gpw::nd::Tensor::full(
      {1, 3, cfg.model.image_height, cfg.model.image_width}, 0.5);
  const auto counts = gpw::nd::counter_scope([&] { (void)model.forward(image); });
  std::cout << "{\n"
            << "  \"mul_adds\": " << counts.mul_adds << ",\n"
            << "  \"attention_mul_adds\": " << counts.attention_mul_adds << ",\n"
            << "  \"peak_live_elements\": " << counts.peak_live_elements << ",\n"
            << "  \"parameters\": " << model.parameters().total_elements() << "\n}\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch wavelet transformer segmentation"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "Train a model and write log, checkpoint and metrics");
  tr->add_option("--config", train.config, "Config file")->required();
  tr->add_option("--data", train.data, "Dataset directory or 'synthetic'");
  tr->add_option("--out", train.out, "Output directory");
  tr->add_option("--resume", train.resume, "Checkpoint to resume from");
  tr->add_option("--iters", train.iters, "Override total_iters");

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", eval.data, "Dataset directory or 'synthetic'");
  ev->add_option("--emit-masks", eval.masks, "Write predicted masks as PGM here");
  ev->add_option("--out", eval.out, "Write metrics JSON here");

  AblateArgs ablate;
  auto* ab = app.add_subcommand("ablate", "Compare settings under one training budget");
  ab->add_option("--mode", ablate.mode, "grouping | downsampling | rbf-order")->required();
  ab->add_option("--config", ablate.config, "Base config file")->required();
  ab->add_option("--data", ablate.data, "Dataset directory or 'synthetic'");
  ab->add_option("--settings", ablate.settings, "Settings to compare")->delimiter(',');
  ab->add_option("--iters", ablate.iters, "Override total_iters");
  ab->add_option("--out", ablate.out, "Write the table here");

  std::string spec, synth_out;
  auto* sy = app.add_subcommand("synth", "Write a synthetic dataset");
  sy->add_option("--spec", spec, "Spec file (count, size, classes, seed, noise)")->required();
  sy->add_option("--out", synth_out, "Output directory")->required();

  std::string profile_config;
  auto* pr = app.add_subcommand("profile", "Operation and activation counts of one forward");
  pr->add_option("--config", profile_config, "Config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*tr) return run_train(train);
    if (*ev) return run_eval(eval);
    if (*ab) return run_ablate(ablate);
    if (*sy) return run_synth(spec, synth_out);
    if (*pr) return run_profile(profile_config);
  } catch (const gpw::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const gpw::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const gpw::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kData;
  } catch (const gpw::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
