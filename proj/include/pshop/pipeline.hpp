#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pshop/complexity.hpp"
#include "pshop/config.hpp"
#include "pshop/decoder.hpp"
#include "pshop/encoder.hpp"
#include "pshop/error.hpp"
#include "pshop/io.hpp"
#include "pshop/metrics.hpp"
#include "pshop/model.hpp"
#include "pshop/png.hpp"
#include "pshop/preprocess.hpp"

namespace pshop {

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Labels as the task sees them: any foreground is "gland" for the 2-class task.
inline LabelVolume task_labels(const LabelVolume& m, Task task, const std::string& id) {
  LabelVolume out = m;
  const int nc = task_classes(task);
  for (auto& y : out.data()) {
    if (task == Task::gland) y = y > 0;
    else if (y >= nc)
      throw Error(ErrorCode::invalid_shape, "case " + id + ": label " + std::to_string(y) + " outside the " +
                                                std::to_string(nc) + "-class set");
  }
  return out;
}

inline std::array<double, 3> image_center(Dims d) { return {(d.h - 1) / 2.0, (d.w - 1) / 2.0, (d.c - 1) / 2.0}; }

}  // namespace detail

/// Per-stage outputs of a training run, for diagnostics and tests.
struct TrainTrace {
  std::vector<Preprocessed> cases;                 // preprocessed training cases
  std::vector<std::vector<Volume4D>> features;     // [case][hop - 1]
  DecoderTrace decoder;
  double preprocess_seconds = 0.0;
  double encoder_seconds = 0.0;
  double decoder_seconds = 0.0;
};

/// Preprocess, fit the encoder, encode, fit the decoder. Zonal crops are
/// centred on each case's reference gland.
inline SegmentationModel train(const std::vector<Case>& cases, const PipelineConfig& config, TrainTrace* trace = nullptr) {
  if (cases.empty()) throw Error(ErrorCode::insufficient_data, "no training cases");
  PipelineConfig cfg = config;
  cfg.decoder.n_classes = task_classes(cfg.task);
  auto t0 = std::chrono::steady_clock::now();

  std::vector<Preprocessed> prep;
  for (const auto& c : cases) {
    if (!c.mask) throw Error(ErrorCode::insufficient_data, "training case " + c.id + " has no mask");
    try {
      Case tc{c.id, c.image, detail::task_labels(*c.mask, cfg.task, c.id), c.source};
      std::optional<std::array<double, 3>> center;
      if (cfg.task == Task::zonal) center = mask_centroid(*tc.mask).value_or(detail::image_center(c.image.dims()));
      prep.push_back(preprocess(tc, cfg.preprocess, cfg.encoder.size_multiple(), center));
    } catch (const Error& e) {
      throw Error(e.code(), "case " + c.id + ": " + e.what());
    }
  }
  const double t_prep = detail::seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  std::vector<Volume4D> images;
  std::vector<LabelVolume> masks;
  for (const auto& p : prep) {
    images.push_back(p.image);
    masks.push_back(*p.mask);
  }
  std::vector<std::vector<Volume4D>> features;
  SegmentationModel model;
  model.config = cfg;
  model.encoder = encoder_fit(images, cfg.encoder, &features);
  const double t_enc = detail::seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  model.decoder = decoder_fit(features, masks, cfg.decoder, cfg.seed, trace ? &trace->decoder : nullptr);
  if (trace) {
    trace->preprocess_seconds = t_prep;
    trace->encoder_seconds = t_enc;
    trace->decoder_seconds = detail::seconds_since(t0);
    trace->cases = std::move(prep);
    trace->features = std::move(features);
  }
  return model;
}

struct CasePrediction {
  std::string id;
  LabelVolume labels;         // original voxel grid
  Volume4D soft;              // model grid, after refinement
  Volume4D soft_pre_refine;   // model grid
  LabelVolume model_labels;   // model grid, after the median filter
  LabelVolume raw_labels;     // model grid, before the median filter
  Geometry geometry;
  std::vector<detail::HopOutput> hops;  // [hop - 1]
};

/// Segments one case. Zonal models crop around the gland found by
/// `gland_model` when given, else around the reference mask (if the config
/// asks for it and one exists), else around the image centre.
inline CasePrediction predict(const SegmentationModel& model, const Case& c, const SegmentationModel* gland_model = nullptr) {
  std::optional<std::array<double, 3>> center;
  if (model.config.task == Task::zonal) {
    if (gland_model) {
      if (gland_model->config.task != Task::gland) throw Error(ErrorCode::invalid_spec, "crop model must be a gland model");
      center = mask_centroid(predict(*gland_model, c).labels);
    } else if (model.config.preprocess.zonal_gt_crop && c.mask) {
      center = mask_centroid(*c.mask);
    }
    if (!center) center = detail::image_center(c.image.dims());
  }
  Case input{c.id, c.image, std::nullopt, c.source};
  const Preprocessed p = preprocess(input, model.config.preprocess, model.encoder.config.size_multiple(), center);
  const auto features = encoder_apply(model.encoder, p.image);
  CasePrediction out;
  out.id = c.id;
  DecoderPrediction d = decoder_predict(model.decoder, features, &out.hops);
  out.geometry = p.geometry;
  out.labels = restore_labels(d.labels, p.geometry);
  out.labels.spacing = c.image.spacing;
  out.soft = std::move(d.soft);
  out.soft_pre_refine = std::move(d.soft_pre_refine);
  out.model_labels = std::move(d.labels);
  out.raw_labels = std::move(d.raw_labels);
  return out;
}

struct BatchResult {
  std::vector<CasePrediction> predictions;
  std::vector<std::pair<std::string, std::string>> errors;  // (case id, message)
};

/// Predicts every case; a failing case is reported and skipped.
inline BatchResult predict_batch(const SegmentationModel& model, const std::vector<Case>& cases,
                                 const SegmentationModel* gland_model = nullptr) {
  BatchResult r;
  for (const auto& c : cases) {
    try {
      r.predictions.push_back(predict(model, c, gland_model));
    } catch (const std::exception& e) {
      r.errors.emplace_back(c.id, e.what());
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct CaseScore {
  std::string id;
  std::vector<double> dsc;  // per foreground class
  double seconds = 0.0;
};

struct EvalReport {
  std::string task;
  std::vector<CaseScore> cases;
  std::vector<MeanStd> per_class;  // over cases
  std::vector<std::pair<std::string, std::string>> errors;
  ParamCount params;
  FlopEstimate flops;
  Dims flops_input;
  double total_seconds = 0.0;
};

/// Nominal input used for FLOP reporting: the in-plane model size with 32 slices.
inline Dims reference_dims(const PipelineConfig& c) { return {c.preprocess.resize_h, c.preprocess.resize_w, 32}; }

inline EvalReport evaluate(const SegmentationModel& model, const std::vector<Case>& cases,
                           const SegmentationModel* gland_model = nullptr) {
  EvalReport rep;
  rep.task = to_string(model.config.task);
  const int nc = task_classes(model.config.task);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<double>> by_class(nc - 1);
  for (const auto& c : cases) {
    const auto t1 = std::chrono::steady_clock::now();
    try {
      if (!c.mask) throw Error(ErrorCode::insufficient_data, "no reference mask");
      const CasePrediction p = predict(model, c, gland_model);
      CaseScore s{c.id, dsc_per_class(p.labels, detail::task_labels(*c.mask, model.config.task, c.id), nc),
                  detail::seconds_since(t1)};
      for (int k = 0; k + 1 < nc; ++k) by_class[k].push_back(s.dsc[k]);
      rep.cases.push_back(std::move(s));
    } catch (const std::exception& e) {
      rep.errors.emplace_back(c.id, e.what());
    }
  }
  for (const auto& xs : by_class) rep.per_class.push_back(mean_std(xs));
  rep.params = count_params(model);
  rep.flops_input = reference_dims(model.config);
  rep.flops = estimate_flops(model, rep.flops_input);
  rep.total_seconds = detail::seconds_since(t0);
  return rep;
}

inline std::vector<std::string> class_names(Task t) {
  return t == Task::gland ? std::vector<std::string>{"gland"} : std::vector<std::string>{"tz", "pz"};
}

inline nlohmann::json to_json(const EvalReport& r) {
  const auto names = class_names(parse_task(r.task));
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases) {
    nlohmann::json d;
    for (std::size_t k = 0; k < c.dsc.size(); ++k) d[names[k]] = c.dsc[k];
    cases.push_back({{"id", c.id}, {"dsc", d}, {"seconds", c.seconds}});
  }
  nlohmann::json summary;
  for (std::size_t k = 0; k < r.per_class.size(); ++k)
    summary[names[k]] = {{"mean", r.per_class[k].mean}, {"std", r.per_class[k].std}};
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& [id, msg] : r.errors) errors.push_back({{"id", id}, {"error", msg}});
  return {{"task", r.task},
          {"cases", cases},
          {"dsc", summary},
          {"errors", errors},
          {"parameters", {{"encoder", r.params.encoder}, {"decoder", r.params.decoder}, {"total", r.params.total()}}},
          {"flops",
           {{"input", r.flops_input},
            {"encoder", r.flops.encoder},
            {"decoder", r.flops.decoder},
            {"post", r.flops.post},
            {"total", r.flops.total()},
            {"per_slice", r.flops.per_slice()}}},
          {"seconds", r.total_seconds}};
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

/// Writes one PNG per slice: the normalised image in grey with the outline
/// of each predicted class drawn in colour.
inline void write_overlays(const std::string& dir, const std::string& id, const Volume4D& image, const LabelVolume& labels) {
  static constexpr std::uint8_t colours[4][3] = {{0, 0, 0}, {255, 40, 40}, {40, 220, 40}, {60, 120, 255}};
  Volume4D img = extract_channel(image, 0);
  normalize_minmax(img);
  const Dims d = labels.dims();
  for (int c = 0; c < d.c; ++c) {
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(d.h) * d.w * 3);
    for (int h = 0; h < d.h; ++h)
      for (int w = 0; w < d.w; ++w) {
        std::uint8_t* px = rgb.data() + (static_cast<std::size_t>(h) * d.w + w) * 3;
        const auto g = static_cast<std::uint8_t>(std::lround(255.0 * img.at(h, w, c)));
        px[0] = px[1] = px[2] = g;
        const int y = labels.at(h, w, c);
        if (y == 0) continue;
        const bool edge = h == 0 || w == 0 || h + 1 == d.h || w + 1 == d.w || labels.at(h - 1, w, c) != y ||
                          labels.at(h + 1, w, c) != y || labels.at(h, w - 1, c) != y || labels.at(h, w + 1, c) != y;
        if (edge) std::copy_n(colours[std::min(y, 3)], 3, px);
      }
    char name[32];
    std::snprintf(name, sizeof name, "_slice%03d.png", c);
    png::write_rgb((std::filesystem::path(dir) / (id + name)).string(), d.w, d.h, rgb);
  }
}

/// Writes a label volume next to its source format: raw in, raw out.
inline std::string write_prediction(const std::string& dir, const Case& c, const LabelVolume& labels) {
  const bool raw_format = c.source.ends_with(".raw");
  const auto path = (std::filesystem::path(dir) / (c.id + (raw_format ? "_pred.raw" : "_pred.nii.gz"))).string();
  if (raw_format) raw::write(path, labels);
  else nifti::write(path, labels);
  return path;
}

}  // namespace pshop
