#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rcnet/commands.hpp"
#include "rcnet/config.hpp"

namespace {

namespace fs = std::filesystem;

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(',', start);
    const auto item = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw std::invalid_argument("not a number: '" + item + "'");
    out.push_back(v);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Renormalized connections toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, dataset_dir, checkpoint_dir, detections_file;
  std::optional<std::uint64_t> seed;
  std::string factors, strengths;
  std::size_t max_images = 4;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (YAML)")->required();
    cmd->add_option("--seed", seed, "override scene and training seeds");
    cmd->add_option("--out", out_dir, "output directory (default: output.directory from the config)");
  };

  auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(generate);

  auto* train = app.add_subcommand("train", "train one detector per seed");
  add_common(train);
  train->add_option("--dataset", dataset_dir, "dataset directory (default: generate in memory)");

  auto* eval = app.add_subcommand("eval", "score the test split");
  eval->add_option("--checkpoint", checkpoint_dir, "checkpoint directory");
  eval->add_option("--dataset", dataset_dir, "dataset directory")->required();
  eval->add_option("--detections", detections_file, "JSON detections to score instead of a model");
  eval->add_option("--config", config_path, "config for the IoU threshold with --detections");
  eval->add_option("--out", out_dir, "output directory")->required();

  auto* analyze = app.add_subcommand("analyze", "saliency, interference and gradient decomposition");
  analyze->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  analyze->add_option("--dataset", dataset_dir, "dataset directory")->required();
  analyze->add_option("--out", out_dir, "output directory")->required();
  analyze->add_option("--images", max_images, "number of test images to render")->capture_default_str();

  auto* derive = app.add_subcommand("derive-strengths", "map amplification factors to strengths and back");
  auto* f_opt = derive->add_option("--factors", factors, "comma-separated factors, e.g. 1,1,1");
  auto* s_opt = derive->add_option("--strengths", strengths, "comma-separated strengths, e.g. 4,2,1");
  f_opt->excludes(s_opt);
  s_opt->excludes(f_opt);

  CLI11_PARSE(app, argc, argv);

  try {
    namespace cmd = rcnet::commands;
    auto load = [&] {
      auto cfg = rcnet::load_config(config_path);
      cmd::apply_seed_override(cfg, seed);
      if (out_dir.empty()) out_dir = cfg.output_dir;
      return cfg;
    };
    if (*generate) {
      const auto cfg = load();
      cmd::generate(cfg, out_dir, std::cout);
    } else if (*train) {
      const auto cfg = load();
      std::optional<fs::path> ds;
      if (!dataset_dir.empty()) ds = dataset_dir;
      cmd::train(cfg, ds, out_dir, std::cout);
    } else if (*eval) {
      std::optional<fs::path> ck, dets;
      std::optional<rcnet::ExperimentConfig> cfg;
      if (!checkpoint_dir.empty()) ck = checkpoint_dir;
      if (!detections_file.empty()) dets = detections_file;
      if (!config_path.empty()) cfg = rcnet::load_config(config_path);
      cmd::eval(ck, dataset_dir, dets, out_dir, std::cout, cfg);
    } else if (*analyze) {
      cmd::analyze(checkpoint_dir, dataset_dir, out_dir, max_images, std::cout);
    } else if (*derive) {
      std::optional<std::vector<double>> f, s;
      if (!factors.empty()) f = parse_list(factors);
      if (!strengths.empty()) s = parse_list(strengths);
      cmd::derive_strengths(f, s, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
