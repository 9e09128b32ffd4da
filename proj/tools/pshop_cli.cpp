#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pshop/pshop.hpp"

namespace fs = std::filesystem;
using namespace pshop;

namespace {

std::vector<Case> load_cases(const std::string& dir) {
  auto r = ingest(dir);
  for (const auto& e : r.errors) std::cerr << "warning: " << e << "\n";
  if (r.cases.empty()) throw Error(ErrorCode::insufficient_data, "no readable cases in " + dir);
  return std::move(r.cases);
}

PipelineConfig load_config(const std::string& path, const std::string& task) {
  PipelineConfig cfg = default_config(parse_task(task));
  if (path.empty()) return cfg;
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::io, "cannot open config " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  j["task"] = task;  // the command line wins
  return j.get<PipelineConfig>();
}

void print_energy_tree(const EncoderModel& enc) {
  for (const auto& hop : enc.hops) {
    std::printf("hop %d: %d -> %d channels (threshold %g)\n", hop.hop, hop.in_channels(), hop.out_channels(),
                hop.energy_threshold);
    for (const auto& n : hop.nodes) {
      if (!n.kept) continue;
      std::printf("  parent %3d  component %2d  energy %.6g\n", n.parent_channel, n.component_index, n.energy);
    }
    int dropped = 0;
    for (const auto& n : hop.nodes) dropped += !n.kept;
    if (dropped) std::printf("  (%d children below threshold)\n", dropped);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Successive-subspace-learning prostate segmentation"};
  app.require_subcommand(1);

  std::string data, task = "gland", config_path, model_path, out, report, gland_path;
  std::uint64_t seed = 42;
  bool seed_given = false;
  int workers = 0, n = 5;
  bool overlays = false;
  bool three_class = false;

  auto* train_cmd = app.add_subcommand("train", "Fit a model on a directory of image/mask pairs");
  train_cmd->add_option("--data", data, "Training directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--task", task, "gland or zonal")->check(CLI::IsMember({"gland", "zonal"}));
  train_cmd->add_option("--config", config_path, "JSON configuration")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", model_path, "Model file to write")->required();
  train_cmd->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { seed = s, seed_given = true; },
                                                "Random seed (default 42)");
  train_cmd->add_option("--workers", workers, "Worker threads (0 = all cores)");

  auto* predict_cmd = app.add_subcommand("predict", "Segment every image in a directory");
  predict_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  predict_cmd->add_option("--out", out)->required();
  predict_cmd->add_option("--gland-model", gland_path, "Gland model locating the zonal crop")->check(CLI::ExistingFile);
  predict_cmd->add_flag("--emit-overlays", overlays, "Write per-slice PNG overlays");
  predict_cmd->add_option("--workers", workers);

  auto* eval_cmd = app.add_subcommand("eval", "Score a model against reference masks");
  eval_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--report", report)->required();
  eval_cmd->add_option("--gland-model", gland_path)->check(CLI::ExistingFile);
  eval_cmd->add_option("--workers", workers);

  auto* phantoms_cmd = app.add_subcommand("phantoms", "Write synthetic T2-like volumes with masks");
  phantoms_cmd->add_option("--n", n)->required()->check(CLI::PositiveNumber);
  phantoms_cmd->add_option("--seed", seed)->required();
  phantoms_cmd->add_option("--out", out)->required();
  phantoms_cmd->add_flag("--zonal", three_class, "Background/TZ/PZ labels instead of background/gland");

  auto* inspect_cmd = app.add_subcommand("inspect", "Print parameter count, FLOPs and the energy tree");
  inspect_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);

  auto* config_cmd = app.add_subcommand("config", "Print the default configuration as JSON");
  config_cmd->add_option("--task", task, "gland or zonal")->check(CLI::IsMember({"gland", "zonal"}));

  CLI11_PARSE(app, argc, argv);

  try {
    set_worker_count(workers);

    if (*train_cmd) {
      PipelineConfig cfg = load_config(config_path, task);
      if (seed_given) cfg.seed = seed;
      const auto cases = load_cases(data);
      TrainTrace trace;
      const auto model = train(cases, cfg, &trace);
      save_model(model, model_path);
      const auto pc = count_params(model);
      std::printf("trained on %zu cases in %.1f s; %llu parameters; wrote %s\n", cases.size(),
                  trace.preprocess_seconds + trace.encoder_seconds + trace.decoder_seconds,
                  static_cast<unsigned long long>(pc.total()), model_path.c_str());
    } else if (*predict_cmd) {
      const auto model = load_model(model_path);
      std::optional<SegmentationModel> gland;
      if (!gland_path.empty()) gland = load_model(gland_path);
      const auto cases = load_cases(data);
      fs::create_directories(out);
      int failures = 0;
      for (const auto& c : cases) {
        try {
          const auto p = predict(model, c, gland ? &*gland : nullptr);
          const auto path = write_prediction(out, c, p.labels);
          if (overlays) write_overlays(out, c.id, c.image, p.labels);
          std::printf("%s -> %s\n", c.id.c_str(), path.c_str());
        } catch (const std::exception& e) {
          ++failures;
          std::fprintf(stderr, "error: %s: %s\n", c.id.c_str(), e.what());
        }
      }
      return failures ? 2 : 0;
    } else if (*eval_cmd) {
      const auto model = load_model(model_path);
      std::optional<SegmentationModel> gland;
      if (!gland_path.empty()) gland = load_model(gland_path);
      const auto rep = evaluate(model, load_cases(data), gland ? &*gland : nullptr);
      std::ofstream f(report);
      if (!f) throw Error(ErrorCode::io, "cannot write " + report);
      f << to_json(rep).dump(2) << "\n";
      const auto names = class_names(model.config.task);
      for (std::size_t k = 0; k < rep.per_class.size(); ++k)
        std::printf("DSC %s: %.4f +/- %.4f\n", names[k].c_str(), rep.per_class[k].mean, rep.per_class[k].std);
      for (const auto& [id, msg] : rep.errors) std::fprintf(stderr, "error: %s: %s\n", id.c_str(), msg.c_str());
      return rep.errors.empty() ? 0 : 2;
    } else if (*phantoms_cmd) {
      PhantomOptions opt;
      opt.three_class = three_class;
      fs::create_directories(out);
      for (const auto& c : make_phantoms(n, seed, opt)) {
        nifti::write((fs::path(out) / (c.id + ".nii.gz")).string(), c.image);
        nifti::write((fs::path(out) / (c.id + "_mask.nii.gz")).string(), *c.mask);
      }
      std::printf("wrote %d phantoms to %s\n", n, out.c_str());
    } else if (*config_cmd) {
      std::printf("%s\n", nlohmann::json(default_config(parse_task(task))).dump(2).c_str());
    } else if (*inspect_cmd) {
      const auto model = load_model(model_path);
      const auto pc = count_params(model);
      const Dims ref = reference_dims(model.config);
      const auto fl = estimate_flops(model, ref);
      std::printf("task: %s\n", to_string(model.config.task).c_str());
      std::printf("parameters: %llu (encoder %llu, decoder %llu)\n", static_cast<unsigned long long>(pc.total()),
                  static_cast<unsigned long long>(pc.encoder), static_cast<unsigned long long>(pc.decoder));
      std::printf("FLOPs per slice at %s: %llu (encoder %llu, decoder %llu, post %llu over %d slices)\n",
                  to_string(ref).c_str(), static_cast<unsigned long long>(fl.per_slice()),
                  static_cast<unsigned long long>(fl.encoder), static_cast<unsigned long long>(fl.decoder),
                  static_cast<unsigned long long>(fl.post), fl.slices);
      for (const auto& hop : model.decoder.hops)
        std::printf("decoder hop %d: %zu main trees, %zu refinement stages\n", hop.hop, hop.main.trees.size(),
                    hop.refine.size());
      print_energy_tree(model.encoder);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
