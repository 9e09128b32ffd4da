#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "json.hpp"
#include "pshop/decoder.hpp"
#include "pshop/encoder.hpp"
#include "pshop/error.hpp"

namespace pshop {

enum class Task { gland, zonal };

inline std::string to_string(Task t) { return t == Task::gland ? "gland" : "zonal"; }

inline Task parse_task(const std::string& s) {
  if (s == "gland") return Task::gland;
  if (s == "zonal") return Task::zonal;
  throw Error(ErrorCode::invalid_spec, "unknown task '" + s + "' (expected gland or zonal)");
}

inline int task_classes(Task t) { return t == Task::gland ? 2 : 3; }

struct PreprocessConfig {
  Spacing target_spacing{0.625, 0.625, 1.5};
  int resize_h = 128;
  int resize_w = 128;
  int zonal_crop = 256;        // in-plane crop (voxels at target spacing) around the gland
  bool zonal_gt_crop = false;  // centre zonal crops on the ground-truth gland
  bool clahe = true;
  double clahe_clip = 2.0;
  int clahe_tiles_y = 8;
  int clahe_tiles_x = 8;
  int clahe_bins = 256;
};

struct PipelineConfig {
  Task task = Task::gland;
  PreprocessConfig preprocess;
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::uint64_t seed = 42;
};

// ---------------------------------------------------------------------------
// JSON. Readers start from the defaults, so partial documents are accepted.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

/// Rejects keys that the serialised defaults of `T` do not have, so a typo
/// is an error instead of a silently ignored setting.
template <typename T>
void reject_unknown_keys(const nlohmann::json& j, const char* section) {
  if (!j.is_object()) throw Error(ErrorCode::format, std::string(section) + " must be a JSON object");
  const nlohmann::json known = T{};
  for (const auto& item : j.items())
    if (!known.contains(item.key()))
      throw Error(ErrorCode::format, "unknown key '" + item.key() + "' in " + section + " config");
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const Spacing& s) { j = {s.dy, s.dx, s.dz}; }
inline void from_json(const nlohmann::json& j, Spacing& s) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::format, "spacing must be a 3-element array");
  s = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline void to_json(nlohmann::json& j, const Dims& d) { j = {d.h, d.w, d.c}; }
inline void from_json(const nlohmann::json& j, Dims& d) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::format, "shape must be a 3-element array");
  d = {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline void to_json(nlohmann::json& j, const NeighborhoodSpec& s) {
  j = {{"size", s.size}, {"stride", s.stride}, {"padding", s.padding == Padding::reflect ? "reflect" : "zero"}};
}
inline void from_json(const nlohmann::json& j, NeighborhoodSpec& s) {
  detail::reject_unknown_keys<NeighborhoodSpec>(j, "neighborhood");
  detail::read_field(j, "size", s.size);
  detail::read_field(j, "stride", s.stride);
  if (j.contains("padding")) {
    const auto p = j.at("padding").get<std::string>();
    if (p != "reflect" && p != "zero") throw Error(ErrorCode::format, "padding must be reflect or zero");
    s.padding = p == "reflect" ? Padding::reflect : Padding::zero;
  }
  s.validate();
}

inline void to_json(nlohmann::json& j, const BoostParams& p) {
  j = {{"max_depth", p.max_depth},
       {"rounds", p.rounds},
       {"learning_rate", p.learning_rate},
       {"subsample", p.subsample},
       {"colsample", p.colsample},
       {"min_child_weight", p.min_child_weight},
       {"lambda", p.lambda},
       {"gamma", p.gamma},
       {"exact_max_samples", p.exact_max_samples},
       {"max_bins", p.max_bins}};
}
inline void from_json(const nlohmann::json& j, BoostParams& p) {
  detail::reject_unknown_keys<BoostParams>(j, "boosting");
  detail::read_field(j, "max_depth", p.max_depth);
  detail::read_field(j, "rounds", p.rounds);
  detail::read_field(j, "learning_rate", p.learning_rate);
  detail::read_field(j, "subsample", p.subsample);
  detail::read_field(j, "colsample", p.colsample);
  detail::read_field(j, "min_child_weight", p.min_child_weight);
  detail::read_field(j, "lambda", p.lambda);
  detail::read_field(j, "gamma", p.gamma);
  detail::read_field(j, "exact_max_samples", p.exact_max_samples);
  detail::read_field(j, "max_bins", p.max_bins);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"levels", c.levels},
       {"neighborhood", c.spec},
       {"energy_threshold", c.energy_threshold},
       {"max_components", c.saab.max_components},
       {"sample_cap", c.saab.sample_cap}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  detail::reject_unknown_keys<EncoderConfig>(j, "encoder");
  detail::read_field(j, "levels", c.levels);
  detail::read_field(j, "neighborhood", c.spec);
  detail::read_field(j, "energy_threshold", c.energy_threshold);
  detail::read_field(j, "max_components", c.saab.max_components);
  detail::read_field(j, "sample_cap", c.saab.sample_cap);
}

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"n_classes", c.n_classes},
       {"confidence_threshold", c.confidence_threshold},
       {"refine_iterations", c.refine_iterations},
       {"refine_window", c.refine_window},
       {"main", c.main},
       {"refine", c.refine},
       {"sample_budget", c.sample_budget},
       {"majority_cap", c.majority_cap},
       {"median_window", c.median_window}};
}
inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  detail::reject_unknown_keys<DecoderConfig>(j, "decoder");
  detail::read_field(j, "n_classes", c.n_classes);
  detail::read_field(j, "confidence_threshold", c.confidence_threshold);
  detail::read_field(j, "refine_iterations", c.refine_iterations);
  detail::read_field(j, "refine_window", c.refine_window);
  detail::read_field(j, "main", c.main);
  detail::read_field(j, "refine", c.refine);
  detail::read_field(j, "sample_budget", c.sample_budget);
  detail::read_field(j, "majority_cap", c.majority_cap);
  detail::read_field(j, "median_window", c.median_window);
}

inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"target_spacing", c.target_spacing},
       {"resize", {c.resize_h, c.resize_w}},
       {"zonal_crop", c.zonal_crop},
       {"zonal_gt_crop", c.zonal_gt_crop},
       {"clahe", c.clahe},
       {"clahe_clip", c.clahe_clip},
       {"clahe_tiles", {c.clahe_tiles_y, c.clahe_tiles_x}},
       {"clahe_bins", c.clahe_bins}};
}
inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  detail::reject_unknown_keys<PreprocessConfig>(j, "preprocess");
  detail::read_field(j, "target_spacing", c.target_spacing);
  if (j.contains("resize")) {
    const auto& r = j.at("resize");
    c.resize_h = r.at(0).get<int>();
    c.resize_w = r.at(1).get<int>();
  }
  detail::read_field(j, "zonal_crop", c.zonal_crop);
  detail::read_field(j, "zonal_gt_crop", c.zonal_gt_crop);
  detail::read_field(j, "clahe", c.clahe);
  detail::read_field(j, "clahe_clip", c.clahe_clip);
  if (j.contains("clahe_tiles")) {
    const auto& t = j.at("clahe_tiles");
    c.clahe_tiles_y = t.at(0).get<int>();
    c.clahe_tiles_x = t.at(1).get<int>();
  }
  detail::read_field(j, "clahe_bins", c.clahe_bins);
}

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"task", to_string(c.task)},
       {"preprocess", c.preprocess},
       {"encoder", c.encoder},
       {"decoder", c.decoder},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  detail::reject_unknown_keys<PipelineConfig>(j, "pipeline");
  if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
  c.decoder.n_classes = task_classes(c.task);
  detail::read_field(j, "preprocess", c.preprocess);
  detail::read_field(j, "encoder", c.encoder);
  detail::read_field(j, "decoder", c.decoder);
  detail::read_field(j, "seed", c.seed);
}

/// Defaults for `task` with the class count filled in.
inline PipelineConfig default_config(Task task = Task::gland) {
  PipelineConfig c;
  c.task = task;
  c.decoder.n_classes = task_classes(task);
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open config " + path);
  try {
    return nlohmann::json::parse(in).get<PipelineConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, "bad config " + path + ": " + e.what());
  }
}

}  // namespace pshop
