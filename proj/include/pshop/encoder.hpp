#pragma once

#include <span>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/saab.hpp"
#include "pshop/volume.hpp"

namespace pshop {

struct EncoderConfig {
  int levels = 4;
  NeighborhoodSpec spec{};            // 3x3x3, stride 1, reflect
  double energy_threshold = 0.002;    // fraction of the root energy
  SaabParams saab{};

  /// Every spatial extent fed to the encoder must be a multiple of this.
  int size_multiple() const noexcept { return 1 << (levels - 1); }
};

/// Cascade of VoxelHop units with 2x2x2 max-pooling between them.
struct EncoderModel {
  EncoderConfig config;
  std::vector<VoxelHopModel> hops;

  int levels() const noexcept { return static_cast<int>(hops.size()); }
  int in_channels() const noexcept { return hops.empty() ? 0 : hops.front().in_channels(); }

  /// Spatial shape of the hop-`hop` feature map (1-based) for an input of `d`.
  static Dims hop_dims(Dims d, int hop) {
    for (int i = 1; i < hop; ++i) d = {d.h / 2, d.w / 2, d.c / 2};
    return d;
  }
};

namespace detail {

inline void check_encoder_input(Dims d, int levels) {
  const int m = 1 << (levels - 1);
  if (d.h % m != 0 || d.w % m != 0 || d.c % m != 0)
    throw Error(ErrorCode::invalid_shape,
                "encoder input " + to_string(d) + " is not divisible by " + std::to_string(m));
}

}  // namespace detail

/// Unsupervised fit of every hop. When `features` is given it receives the
/// per-volume, per-hop feature maps computed along the way.
inline EncoderModel encoder_fit(std::span<const Volume4D> volumes, const EncoderConfig& config,
                                std::vector<std::vector<Volume4D>>* features = nullptr) {
  if (config.levels < 1) throw Error(ErrorCode::invalid_spec, "encoder needs at least one hop");
  if (volumes.empty()) throw Error(ErrorCode::insufficient_data, "encoder needs at least one training volume");
  for (const auto& v : volumes) {
    detail::check_encoder_input(v.dims(), config.levels);
    if (v.channels() != volumes.front().channels())
      throw Error(ErrorCode::invalid_shape, "training volumes disagree on channel count");
  }
  EncoderModel model;
  model.config = config;
  if (features) features->assign(volumes.size(), {});

  std::vector<Volume4D> inputs(volumes.begin(), volumes.end());
  std::vector<double> energies(volumes.front().channels(), 1.0);
  for (int hop = 1; hop <= config.levels; ++hop) {
    if (hop > 1)
      for (auto& v : inputs) v = max_pool(v);
    model.hops.push_back(cw_saab_fit(inputs, config.spec, config.energy_threshold, energies, config.saab, hop));
    const auto& hm = model.hops.back();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      inputs[i] = cw_saab_apply(hm, inputs[i]);
      if (features) (*features)[i].push_back(inputs[i]);
    }
    energies = hm.output_energies();
  }
  return model;
}

/// Feature maps F_e^1 ... F_e^L of one volume.
inline std::vector<Volume4D> encoder_apply(const EncoderModel& model, const Volume4D& v) {
  if (model.hops.empty()) throw Error(ErrorCode::invalid_spec, "encoder model has no hops");
  detail::check_encoder_input(v.dims(), model.levels());
  if (v.channels() != model.in_channels())
    throw Error(ErrorCode::invalid_shape, "input has " + std::to_string(v.channels()) + " channels, encoder expects " +
                                              std::to_string(model.in_channels()));
  std::vector<Volume4D> out;
  out.reserve(model.hops.size());
  Volume4D cur = v;
  for (const auto& hop : model.hops) {
    if (!out.empty()) cur = max_pool(cur);
    cur = cw_saab_apply(hop, cur);
    out.push_back(cur);
  }
  return out;
}

}  // namespace pshop
