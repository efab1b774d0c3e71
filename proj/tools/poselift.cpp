#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poselift.hpp"

namespace {

using namespace poselift;

struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> keyed;
};

// --config FILE, repeated --set key=value, and one --<key> flag per config key.
void add_config_flags(CLI::App* app, ConfigFlags& flags) {
  app->add_option("--config", flags.file, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--set", flags.sets, "override one key, e.g. --set backbone.depth=8");
  for (const auto& key : harness::config_keys())
    app->add_option("--" + key, flags.keyed[key], "config key " + key);
}

harness::RunConfig resolve(const ConfigFlags& flags) {
  harness::RunConfig cfg =
      flags.file.empty() ? harness::default_config() : harness::load_config(flags.file);
  for (const auto& s : flags.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    harness::set_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [key, value] : flags.keyed)
    if (!value.empty()) harness::set_value(cfg, key, value);
  cfg.validate();
  return cfg;
}

void write_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

harness::Dataset test_data(const harness::RunConfig& cfg, const std::string& dir) {
  if (dir.empty()) return harness::make_dataset(cfg, "test");
  return harness::load_dataset(dir, "test", cfg.backbone.joints);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"poselift: diffusion-refined 2D-to-3D pose lifting"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-data", "write synthetic train/test pose files");
  add_config_flags(gen, gen_flags);
  gen->add_option("--out", gen_out, "output directory");

  ConfigFlags train_flags;
  std::string train_data, train_out;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "train a model, write checkpoint and loss log");
  add_config_flags(train, train_flags);
  train->add_option("--data", train_data, "directory from gen-data (default: synthesize)");
  train->add_option("--out", train_out, "output directory (default: output_dir key)");
  train->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  std::string ckpt_path, data_dir, eval_out;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  auto* eval = app.add_subcommand("eval", "sample and score a checkpoint on test data");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint.bin")->required();
  eval->add_option("--data", data_dir, "directory from gen-data (default: synthesize)");
  eval->add_option("--steps", steps, "DDIM sampling steps (default: diffusion.steps)");
  eval->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { seed = s; seed_set = true; },
                                           "sampling seed (default: seed key)");
  eval->add_option("--out", eval_out, "directory for metrics.json and metrics.csv");

  std::string sweep_ckpt, sweep_data, sweep_out;
  std::vector<double> sigmas = harness::default_sigmas();
  std::size_t sweep_steps = 0;
  auto* sweep = app.add_subcommand("noise-sweep", "evaluate under Gaussian 2D input noise");
  sweep->add_option("--checkpoint", sweep_ckpt, "checkpoint.bin")->required();
  sweep->add_option("--data", sweep_data, "directory from gen-data (default: synthesize)");
  sweep->add_option("--sigmas", sigmas, "noise standard deviations, ascending");
  sweep->add_option("--steps", sweep_steps, "DDIM sampling steps (default: diffusion.steps)");
  sweep->add_option("--out", sweep_out, "CSV path (default: stdout)");

  std::string bench_ckpt;
  std::size_t window = 243, repeats = 10, bench_steps = 0;
  auto* bench = app.add_subcommand("bench", "inference throughput in frames per second");
  bench->add_option("--checkpoint", bench_ckpt, "checkpoint.bin")->required();
  bench->add_option("--window", window, "frames per window");
  bench->add_option("--repeats", repeats, "timed windows");
  bench->add_option("--steps", bench_steps, "DDIM sampling steps (default: diffusion.steps)");

  ConfigFlags count_flags;
  auto* count = app.add_subcommand("param-count", "parameter totals with a per-component breakdown");
  add_config_flags(count, count_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(gen_flags);
      harness::save_dataset(gen_out, "train", harness::make_dataset(cfg, "train"));
      harness::save_dataset(gen_out, "test", harness::make_dataset(cfg, "test"));
      write_file(gen_out + "/config.txt", harness::to_text(cfg));
      std::cout << "wrote " << cfg.train_sequences << " train and " << cfg.test_sequences
                << " test sequences to " << gen_out << "\n";
    } else if (train->parsed()) {
      const auto cfg = resolve(train_flags);
      const std::string out = train_out.empty() ? cfg.output_dir : train_out;
      const harness::Dataset data = train_data.empty()
                                        ? harness::make_dataset(cfg, "train")
                                        : harness::load_dataset(train_data, "train", cfg.backbone.joints);
      harness::EpochCallback progress;
      if (!quiet)
        progress = [&](std::size_t epoch, double loss, double sec) {
          std::cerr << "epoch " << epoch << "/" << cfg.epochs << "  loss " << loss << "  ("
                    << sec << " s)\n";
        };
      harness::train(cfg, data, out, progress);
      std::cout << out << "/checkpoint.bin\n";
    } else if (eval->parsed()) {
      const auto ck = harness::load_checkpoint(ckpt_path);
      const auto data = test_data(ck.config, data_dir);
      const auto report = harness::evaluate(ck, data, steps ? steps : ck.config.sampling_steps,
                                            seed_set ? seed : ck.config.seed);
      const std::string json = report.to_json().dump(2) + "\n";
      if (!eval_out.empty()) {
        write_file(eval_out + "/metrics.json", json);
        write_file(eval_out + "/metrics.csv",
                   metrics::MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
      }
      std::cout << json;
    } else if (sweep->parsed()) {
      const auto ck = harness::load_checkpoint(sweep_ckpt);
      const auto data = test_data(ck.config, sweep_data);
      const auto res = harness::noise_sweep(ck, data, sigmas,
                                            sweep_steps ? sweep_steps : ck.config.sampling_steps,
                                            ck.config.seed);
      if (sweep_out.empty()) std::cout << res.csv();
      else write_file(sweep_out, res.csv());
    } else if (bench->parsed()) {
      const auto ck = harness::load_checkpoint(bench_ckpt);
      const auto res = harness::bench(ck, window, repeats,
                                      bench_steps ? bench_steps : ck.config.sampling_steps);
      std::cout << res.to_json().dump(2) << "\n";
    } else if (count->parsed()) {
      const auto cfg = resolve(count_flags);
      std::cout << harness::param_count(cfg).to_json().dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
