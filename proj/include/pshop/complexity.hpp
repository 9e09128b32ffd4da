#pragma once

#include <cstdint>

#include "pshop/encoder.hpp"
#include "pshop/model.hpp"

namespace pshop {

struct ParamCount {
  std::uint64_t encoder = 0;
  std::uint64_t decoder = 0;
  std::uint64_t total() const noexcept { return encoder + decoder; }
};

/// N * (M - 1) AC weights plus one bias per Saab unit.
inline std::uint64_t count_params(const SaabUnit& u) {
  return static_cast<std::uint64_t>(u.n_in) * static_cast<std::uint64_t>(u.num_ac()) + 1;
}

/// Two values (feature, threshold) per split and one per leaf.
inline std::uint64_t count_params(const TreeEnsemble& e) {
  std::uint64_t n = 0;
  for (const auto& t : e.trees) n += 2 * static_cast<std::uint64_t>(t.splits()) + static_cast<std::uint64_t>(t.leaves());
  return n;
}

inline std::uint64_t count_params(const EncoderModel& m) {
  std::uint64_t n = 0;
  for (const auto& hop : m.hops)
    for (const auto& u : hop.units) n += count_params(u);
  return n;
}

inline std::uint64_t count_params(const DecoderModel& m) {
  std::uint64_t n = 0;
  for (const auto& hop : m.hops) {
    n += count_params(hop.main);
    for (const auto& e : hop.refine) n += count_params(e);
  }
  return n;
}

inline ParamCount count_params(const SegmentationModel& m) { return {count_params(m.encoder), count_params(m.decoder)}; }

struct FlopEstimate {
  std::uint64_t encoder = 0;   // Saab projections and pooling
  std::uint64_t decoder = 0;   // tree traversals, softmax, upsampling, feature gathers
  std::uint64_t post = 0;      // median filter
  int slices = 1;
  std::uint64_t total() const noexcept { return encoder + decoder + post; }
  std::uint64_t per_slice() const noexcept { return total() / static_cast<std::uint64_t>(slices); }
};

/// Inference cost of one ensemble per voxel: one comparison per level of each
/// tree (its depth) plus the softmax (exp, sum, divide per class).
inline std::uint64_t ensemble_flops_per_voxel(const TreeEnsemble& e) {
  std::uint64_t n = 3 * static_cast<std::uint64_t>(e.n_classes);
  for (const auto& t : e.trees) n += static_cast<std::uint64_t>(t.depth());
  return n;
}

/// Floating-point operation estimate for one inference on a volume of shape
/// `input` (see docs/complexity.md for the formula sheet).
inline FlopEstimate estimate_flops(const SegmentationModel& m, Dims input) {
  FlopEstimate f;
  f.slices = input.c;
  const int L = m.encoder.levels();
  std::vector<Dims> dims;
  for (int hop = 1; hop <= L; ++hop) dims.push_back(EncoderModel::hop_dims(input, hop));

  for (int i = 0; i < L; ++i) {
    const auto& hop = m.encoder.hops[i];
    const std::uint64_t vox = dims[i].voxels();
    for (const auto& u : hop.units) f.encoder += vox * 2 * static_cast<std::uint64_t>(u.n_in) * u.num_components();
    if (i + 1 < L) f.encoder += dims[i + 1].voxels() * 7 * static_cast<std::uint64_t>(hop.out_channels());
  }

  const int nc = m.decoder.config.n_classes;
  for (const auto& hop : m.decoder.hops) {
    if (hop.hop < 1 || hop.hop > L) continue;
    const std::uint64_t vox = dims[hop.hop - 1].voxels();
    f.decoder += vox * ensemble_flops_per_voxel(hop.main);
    for (const auto& e : hop.refine) f.decoder += vox * ensemble_flops_per_voxel(e);
    if (hop.hop > 1) {
      // F_p upsampling: 8 taps, multiply and add, per output channel.
      const std::uint64_t width = static_cast<std::uint64_t>(nc) * (L - hop.hop + 1);
      f.decoder += dims[hop.hop - 2].voxels() * 16 * width;
    }
  }
  const int w = m.decoder.config.median_window;
  f.post = input.voxels() * static_cast<std::uint64_t>(w) * w;
  return f;
}

}  // namespace pshop
