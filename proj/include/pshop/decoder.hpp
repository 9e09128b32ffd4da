#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/gbdt.hpp"
#include "pshop/volume.hpp"

namespace pshop {

struct DecoderConfig {
  int n_classes = 2;
  double confidence_threshold = 0.9;
  int refine_iterations = 2;
  NeighborhoodSpec refine_window{};  // 3x3x3 reflect
  BoostParams main{};
  BoostParams refine{.rounds = 100};
  std::size_t sample_budget = 500'000;
  double majority_cap = 3.0;  // majority classes capped at this multiple of the rarest class
  int median_window = 7;
};

/// Classifiers for one decoder hop: the main stage plus the soft-label
/// smoothing stages.
struct DecoderHop {
  int hop = 1;
  TreeEnsemble main;
  std::vector<TreeEnsemble> refine;

  friend bool operator==(const DecoderHop&, const DecoderHop&) = default;
};

struct DecoderModel {
  DecoderConfig config;
  std::vector<DecoderHop> hops;  // coarsest first: hops[0] is hop L

  int levels() const noexcept { return static_cast<int>(hops.size()); }
};

/// Soft decisions of every hop, indexed [hop - 1][volume].
struct DecoderTrace {
  std::vector<std::vector<Volume4D>> pre_refine;
  std::vector<std::vector<Volume4D>> post_refine;
};

/// Normalised voxel coordinates: channel 0 = w/(W-1), 1 = h/(H-1),
/// 2 = c/(C-1); singleton axes give 0.5.
inline Volume4D position_encoding(Dims d) {
  Volume4D out(d, 3);
  auto norm = [](int i, int n) { return n > 1 ? static_cast<float>(static_cast<double>(i) / (n - 1)) : 0.5f; };
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int c = 0; c < d.c; ++c) {
        float* p = out.voxel(out.voxel_index(h, w, c)).data();
        p[0] = norm(w, d.w);
        p[1] = norm(h, d.h);
        p[2] = norm(c, d.c);
      }
  return out;
}

inline Volume4D one_hot(const LabelVolume& mask, int n_classes) {
  Volume4D out(mask.dims(), n_classes);
  for (std::size_t v = 0; v < mask.voxels(); ++v) {
    const int y = mask.data()[v];
    if (y >= n_classes)
      throw Error(ErrorCode::invalid_shape, "label " + std::to_string(y) + " outside " + std::to_string(n_classes) + " classes");
    out.data()[v * n_classes + y] = 1.0f;
  }
  out.spacing = mask.spacing;
  return out;
}

/// Per-voxel argmax; ties resolve to the lowest class index.
inline LabelVolume argmax_labels(const Volume4D& soft) {
  LabelVolume out(soft.dims(), 1);
  out.spacing = soft.spacing;
  for (std::size_t v = 0; v < soft.voxels(); ++v) {
    auto p = soft.voxel(v);
    out.data()[v] = static_cast<std::uint8_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  return out;
}

struct Supervision {
  Volume4D soft;                       // interpolated one-hot labels
  std::vector<std::uint8_t> selected;  // per voxel
  std::vector<std::uint8_t> labels;    // argmax per voxel
  std::size_t count = 0;               // number of selected voxels
};

/// Interpolates a full-resolution mask down to `hop_dims` and keeps the
/// voxels whose strongest class reaches `confidence_threshold`.
inline Supervision downsample_labels(const LabelVolume& mask, int n_classes, Dims hop_dims,
                                     double confidence_threshold) {
  Supervision s;
  s.soft = resize_trilinear(one_hot(mask, n_classes), hop_dims, Align::half_pixel);
  const std::size_t n = s.soft.voxels();
  s.selected.assign(n, 0);
  s.labels.assign(n, 0);
  for (std::size_t v = 0; v < n; ++v) {
    auto p = s.soft.voxel(v);
    const auto top = std::max_element(p.begin(), p.end());
    s.labels[v] = static_cast<std::uint8_t>(top - p.begin());
    if (*top >= confidence_threshold) {
      s.selected[v] = 1;
      ++s.count;
    }
  }
  if (s.count == 0)
    throw Error(ErrorCode::empty_supervision,
                "no voxel reaches confidence " + std::to_string(confidence_threshold) + " at " + to_string(hop_dims));
  return s;
}

/// F_p for the next finer hop: the previous F_p and the new soft decisions,
/// concatenated and upsampled together to `finer`.
inline Volume4D propagate_probabilities(const std::optional<Volume4D>& coarse_fp, const Volume4D& soft, Dims finer) {
  if (coarse_fp) {
    const Volume4D* parts[] = {&*coarse_fp, &soft};
    return resize_trilinear(concat_channels(parts), finer, Align::half_pixel);
  }
  return resize_trilinear(soft, finer, Align::half_pixel);
}

/// Voxel-wise concatenation (F_s, F_p, F_e); F_p may be absent at hop L.
inline Volume4D aggregate_features(const Volume4D& encoder_features, const std::optional<Volume4D>& fp) {
  const Volume4D fs = position_encoding(encoder_features.dims());
  if (fp && fp->dims() != encoder_features.dims())
    throw Error(ErrorCode::invalid_shape, "F_p is " + to_string(fp->dims()) + " but F_e is " +
                                              to_string(encoder_features.dims()));
  std::vector<const Volume4D*> parts{&fs};
  if (fp) parts.push_back(&*fp);
  parts.push_back(&encoder_features);
  return concat_channels(parts);
}

namespace detail {

inline Matrix<float> as_rows(const Volume4D& v) { return Matrix<float>(v.voxels(), v.channels(), v.data()); }

inline Volume4D as_volume(const Matrix<float>& m, Dims d) { return Volume4D(d, static_cast<int>(m.cols()), m.data()); }

inline Matrix<float> sls_features(const Volume4D& soft, const NeighborhoodSpec& window) {
  return gather_neighborhoods(soft, window);
}

inline Matrix<float> take_rows(const Matrix<float>& m, std::span<const std::uint32_t> rows) {
  Matrix<float> out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(m.row(rows[i]).data(), m.cols(), out.row(i).data());
  return out;
}

/// Training rows `chosen[v]` of `make(items[v])`, stacked over every v.
template <typename Make>
Matrix<float> stack_rows(const std::vector<Volume4D>& items, const std::vector<std::vector<std::uint32_t>>& chosen,
                         Make&& make) {
  std::vector<float> buf;
  std::size_t cols = 0, rows = 0;
  for (std::size_t v = 0; v < items.size(); ++v) {
    const Matrix<float> part = take_rows(make(items[v]), chosen[v]);
    cols = part.cols();
    rows += part.rows();
    buf.insert(buf.end(), part.data().begin(), part.data().end());
  }
  return Matrix<float>(rows, cols, std::move(buf));
}

struct HopOutput {
  Volume4D pre_refine;
  Volume4D post_refine;
};

/// Inference path of one hop, shared by fitting and prediction.
inline HopOutput run_hop(const DecoderHop& hop, const DecoderConfig& cfg, const Volume4D& aggregated) {
  HopOutput out;
  out.pre_refine = as_volume(predict_proba(hop.main, as_rows(aggregated)), aggregated.dims());
  out.post_refine = out.pre_refine;
  for (const auto& ens : hop.refine)
    out.post_refine = as_volume(predict_proba(ens, sls_features(out.post_refine, cfg.refine_window)), aggregated.dims());
  return out;
}

/// Class-balanced, budgeted choice of training voxels. Returns, per volume,
/// the sorted voxel indices to train on.
inline std::vector<std::vector<std::uint32_t>> choose_training_voxels(const std::vector<Supervision>& sup,
                                                                      int n_classes, const DecoderConfig& cfg,
                                                                      std::uint64_t seed) {
  std::vector<std::vector<std::uint64_t>> by_class(n_classes);
  for (std::size_t v = 0; v < sup.size(); ++v)
    for (std::size_t i = 0; i < sup[v].selected.size(); ++i)
      if (sup[v].selected[i]) by_class[sup[v].labels[i]].push_back((static_cast<std::uint64_t>(v) << 32) | i);

  std::size_t minority = 0;
  for (const auto& c : by_class)
    if (!c.empty() && (minority == 0 || c.size() < minority)) minority = c.size();
  const auto cap = static_cast<std::size_t>(cfg.majority_cap * static_cast<double>(minority));
  std::vector<std::size_t> target(n_classes);
  std::size_t total = 0;
  for (int k = 0; k < n_classes; ++k) {
    target[k] = std::min(by_class[k].size(), std::max<std::size_t>(cap, minority));
    total += target[k];
  }
  if (total > cfg.sample_budget)
    for (int k = 0; k < n_classes; ++k)
      if (target[k] > 0)
        target[k] = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(target[k]) *
                                                                      cfg.sample_budget / total));

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::uint32_t>> chosen(sup.size());
  for (int k = 0; k < n_classes; ++k) {
    auto& pool = by_class[k];
    const std::size_t m = target[k];
    if (m < pool.size())
      for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
    for (std::size_t i = 0; i < std::min(m, pool.size()); ++i)
      chosen[pool[i] >> 32].push_back(static_cast<std::uint32_t>(pool[i] & 0xffffffffu));
  }
  for (auto& c : chosen) std::sort(c.begin(), c.end());
  return chosen;
}

}  // namespace detail

/// Soft-label smoothing: each stage re-classifies every voxel from the
/// 3x3x3 neighborhood of the current soft decisions.
inline Volume4D sls_refine(const Volume4D& soft, std::span<const TreeEnsemble> ensembles,
                           const NeighborhoodSpec& window = {}) {
  Volume4D cur = soft;
  for (const auto& ens : ensembles) cur = detail::as_volume(predict_proba(ens, detail::sls_features(cur, window)), soft.dims());
  return cur;
}

/// Coarse-to-fine supervised fit. `features[v]` holds F_e^1..F_e^L of
/// training volume v; `masks[v]` is its full-resolution label map.
inline DecoderModel decoder_fit(const std::vector<std::vector<Volume4D>>& features, std::span<const LabelVolume> masks,
                                const DecoderConfig& config, std::uint64_t seed, DecoderTrace* trace = nullptr) {
  if (features.empty() || features.size() != masks.size())
    throw Error(ErrorCode::insufficient_data, "decoder needs one mask per training volume");
  if (config.n_classes < 2) throw Error(ErrorCode::degenerate_labels, "decoder needs at least 2 classes");
  const int L = static_cast<int>(features.front().size());
  for (std::size_t v = 0; v < features.size(); ++v) {
    if (static_cast<int>(features[v].size()) != L) throw Error(ErrorCode::invalid_shape, "hop count differs between volumes");
    if (masks[v].dims() != features[v].front().dims())
      throw Error(ErrorCode::invalid_shape, "mask " + to_string(masks[v].dims()) + " does not match features " +
                                                to_string(features[v].front().dims()));
  }
  const std::size_t V = features.size();
  const int nc = config.n_classes;
  DecoderModel model;
  model.config = config;
  if (trace) {
    trace->pre_refine.assign(L, {});
    trace->post_refine.assign(L, {});
  }

  std::vector<std::optional<Volume4D>> fp(V);
  for (int hop = L; hop >= 1; --hop) {
    try {
      std::vector<Supervision> sup;
      sup.reserve(V);
      for (std::size_t v = 0; v < V; ++v)
        sup.push_back(downsample_labels(masks[v], nc, features[v][hop - 1].dims(), config.confidence_threshold));
      const auto chosen = detail::choose_training_voxels(sup, nc, config, mix_seed(seed, 100 + hop));
      std::vector<int> y;
      for (std::size_t v = 0; v < V; ++v)
        for (auto i : chosen[v]) y.push_back(sup[v].labels[i]);

      std::vector<Volume4D> aggregated(V);
      for (std::size_t v = 0; v < V; ++v) aggregated[v] = aggregate_features(features[v][hop - 1], fp[v]);
      const Matrix<float> x = detail::stack_rows(aggregated, chosen, [](const Volume4D& a) { return detail::as_rows(a); });
      DecoderHop hm;
      hm.hop = hop;
      BoostParams main_params = config.main;
      main_params.seed = mix_seed(seed, 16 * hop);
      hm.main = ensemble_fit(x, y, nc, main_params);

      std::vector<Volume4D> soft(V);
      for (std::size_t v = 0; v < V; ++v)
        soft[v] = detail::as_volume(predict_proba(hm.main, detail::as_rows(aggregated[v])), aggregated[v].dims());
      if (trace) trace->pre_refine[hop - 1] = soft;

      for (int r = 0; r < config.refine_iterations; ++r) {
        const Matrix<float> xr = detail::stack_rows(
            soft, chosen, [&](const Volume4D& s) { return detail::sls_features(s, config.refine_window); });
        BoostParams rp = config.refine;
        rp.seed = mix_seed(seed, 16 * hop + 1 + r);
        hm.refine.push_back(ensemble_fit(xr, y, nc, rp));
        for (std::size_t v = 0; v < V; ++v)
          soft[v] = detail::as_volume(predict_proba(hm.refine.back(), detail::sls_features(soft[v], config.refine_window)),
                                      soft[v].dims());
      }
      if (trace) trace->post_refine[hop - 1] = soft;

      if (hop > 1)
        for (std::size_t v = 0; v < V; ++v)
          fp[v] = propagate_probabilities(fp[v], soft[v], features[v][hop - 2].dims());
      model.hops.push_back(std::move(hm));
    } catch (const Error& e) {
      throw e.at_hop(hop);
    }
  }
  return model;
}

struct DecoderPrediction {
  Volume4D soft;               // hop-1 soft decisions after refinement
  Volume4D soft_pre_refine;    // hop-1 soft decisions before refinement
  LabelVolume raw_labels;      // argmax before the median filter
  LabelVolume labels;          // final labels
};

/// Coarse-to-fine inference on the encoder features F_e^1..F_e^L of one volume.
inline DecoderPrediction decoder_predict(const DecoderModel& model, const std::vector<Volume4D>& features,
                                         std::vector<detail::HopOutput>* per_hop = nullptr) {
  const int L = model.levels();
  if (static_cast<int>(features.size()) != L)
    throw Error(ErrorCode::invalid_shape, "expected " + std::to_string(L) + " feature maps, got " +
                                              std::to_string(features.size()));
  std::optional<Volume4D> fp;
  detail::HopOutput out;
  if (per_hop) per_hop->assign(L, {});
  for (int idx = 0; idx < L; ++idx) {
    const int hop = L - idx;
    const auto& hm = model.hops[idx];
    const Volume4D agg = aggregate_features(features[hop - 1], fp);
    if (agg.channels() != hm.main.n_features)
      throw Error(ErrorCode::invalid_shape, "hop " + std::to_string(hop) + " feature width " +
                                                std::to_string(agg.channels()) + " does not match model " +
                                                std::to_string(hm.main.n_features));
    out = detail::run_hop(hm, model.config, agg);
    if (per_hop) (*per_hop)[hop - 1] = out;
    if (hop > 1) fp = propagate_probabilities(fp, out.post_refine, features[hop - 2].dims());
  }
  DecoderPrediction pred;
  pred.raw_labels = argmax_labels(out.post_refine);
  pred.labels = median_filter_2d(pred.raw_labels, model.config.median_window);
  pred.soft = std::move(out.post_refine);
  pred.soft_pre_refine = std::move(out.pre_refine);
  return pred;
}

}  // namespace pshop
