#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/volume.hpp"

namespace pshop {

/// Dice similarity of two binary masks (non-zero = member). Two empty masks
/// agree perfectly and score 1.
inline double dsc(std::span<const std::uint8_t> x, std::span<const std::uint8_t> y) {
  if (x.size() != y.size())
    throw Error(ErrorCode::invalid_shape, "dsc inputs differ in size: " + std::to_string(x.size()) + " vs " +
                                              std::to_string(y.size()));
  std::size_t nx = 0, ny = 0, both = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool a = x[i] != 0, b = y[i] != 0;
    nx += a;
    ny += b;
    both += a && b;
  }
  if (nx + ny == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

inline double dsc(const LabelVolume& x, const LabelVolume& y) {
  if (x.dims() != y.dims())
    throw Error(ErrorCode::invalid_shape, "dsc inputs differ in shape: " + to_string(x.dims()) + " vs " + to_string(y.dims()));
  return dsc(std::span<const std::uint8_t>(x.data()), std::span<const std::uint8_t>(y.data()));
}

/// One-vs-rest DSC for classes 1..n_classes-1.
inline std::vector<double> dsc_per_class(const LabelVolume& pred, const LabelVolume& truth, int n_classes) {
  if (pred.dims() != truth.dims())
    throw Error(ErrorCode::invalid_shape, "dsc inputs differ in shape: " + to_string(pred.dims()) + " vs " +
                                              to_string(truth.dims()));
  std::vector<double> out;
  std::vector<std::uint8_t> a(pred.voxels()), b(truth.voxels());
  for (int k = 1; k < n_classes; ++k) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = pred.data()[i] == k;
      b[i] = truth.data()[i] == k;
    }
    out.push_back(dsc(a, b));
  }
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  for (double x : xs) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(xs.size()));
  return r;
}

}  // namespace pshop
