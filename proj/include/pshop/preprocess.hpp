#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>

#include "pshop/config.hpp"
#include "pshop/error.hpp"
#include "pshop/io.hpp"
#include "pshop/volume.hpp"

namespace pshop {

/// Every grid a case passes through on its way to the model, so labels can
/// be mapped back to the original voxel grid.
struct Geometry {
  Dims original;
  Dims resampled;                   // after spacing regularization
  std::array<int, 2> crop_origin{}; // (h, w) in the resampled grid
  Dims cropped;                     // equals `resampled` when no crop is taken
  Dims resized;                     // after the in-plane resize
  Dims padded;                      // model grid
};

struct Preprocessed {
  Volume4D image;
  std::optional<LabelVolume> mask;
  Geometry geometry;
};

/// Maps a voxel coordinate between grids that span the same physical extent.
inline double map_coordinate(double x, int n_from, int n_to) {
  return (x + 0.5) * static_cast<double>(n_to) / n_from - 0.5;
}

/// Mean (h, w, c) voxel coordinate of the non-zero labels, if any.
inline std::optional<std::array<double, 3>> mask_centroid(const LabelVolume& m) {
  const Dims d = m.dims();
  std::array<double, 3> s{};
  std::size_t n = 0;
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int c = 0; c < d.c; ++c)
        if (m.at(h, w, c)) {
          s[0] += h;
          s[1] += w;
          s[2] += c;
          ++n;
        }
  if (n == 0) return std::nullopt;
  for (double& x : s) x /= static_cast<double>(n);
  return s;
}

/// Spacing regularization, intensity normalization, CLAHE, the optional
/// in-plane crop around `crop_center` (original voxel coordinates), in-plane
/// resize and reflect padding to a multiple of `size_multiple`. Masks follow
/// the same geometry with nearest-neighbour sampling.
inline Preprocessed preprocess(const Case& c, const PreprocessConfig& cfg, int size_multiple,
                               std::optional<std::array<double, 3>> crop_center = std::nullopt) {
  if (!c.image.spacing) throw Error(ErrorCode::metadata, "case " + c.id + " has no spacing metadata");
  if (c.image.channels() != 1) throw Error(ErrorCode::invalid_shape, "case " + c.id + " must have a single channel");
  if (c.mask && c.mask->dims() != c.image.dims())
    throw Error(ErrorCode::invalid_shape, "case " + c.id + ": mask " + to_string(c.mask->dims()) + " vs image " +
                                              to_string(c.image.dims()));
  Preprocessed p;
  Geometry& g = p.geometry;
  g.original = c.image.dims();

  Volume4D img = resample_lanczos(c.image, cfg.target_spacing);
  g.resampled = img.dims();
  std::optional<LabelVolume> mask;
  if (c.mask) mask = resize_nearest(*c.mask, g.resampled, Align::half_pixel);

  normalize_minmax(img);
  if (cfg.clahe)
    for (int k = 0; k < img.dims().c; ++k)
      set_slice(img, k, clahe(slice_image(img, k), cfg.clahe_clip, cfg.clahe_tiles_y, cfg.clahe_tiles_x, cfg.clahe_bins));

  g.cropped = g.resampled;
  if (crop_center && cfg.zonal_crop > 0) {
    const int sh = std::min(cfg.zonal_crop, g.resampled.h), sw = std::min(cfg.zonal_crop, g.resampled.w);
    const double ch = map_coordinate((*crop_center)[0], g.original.h, g.resampled.h);
    const double cw = map_coordinate((*crop_center)[1], g.original.w, g.resampled.w);
    g.crop_origin = {std::clamp(static_cast<int>(std::lround(ch - sh / 2.0)), 0, g.resampled.h - sh),
                     std::clamp(static_cast<int>(std::lround(cw - sw / 2.0)), 0, g.resampled.w - sw)};
    g.cropped = {sh, sw, g.resampled.c};
    img = crop(img, {g.crop_origin[0], g.crop_origin[1], 0}, g.cropped);
    if (mask) mask = crop(*mask, {g.crop_origin[0], g.crop_origin[1], 0}, g.cropped);
  }

  g.resized = {cfg.resize_h > 0 ? cfg.resize_h : g.cropped.h, cfg.resize_w > 0 ? cfg.resize_w : g.cropped.w, g.cropped.c};
  img = resize_trilinear(img, g.resized, Align::corners);
  if (mask) mask = resize_nearest(*mask, g.resized, Align::corners);

  g.padded = {round_up(g.resized.h, size_multiple), round_up(g.resized.w, size_multiple),
              round_up(g.resized.c, size_multiple)};
  p.image = pad_end_reflect(img, g.padded);
  if (mask) p.mask = pad_end_reflect(*mask, g.padded);
  return p;
}

/// Maps labels on the model grid back to the original voxel grid.
inline LabelVolume restore_labels(const LabelVolume& labels, const Geometry& g) {
  if (labels.dims() != g.padded)
    throw Error(ErrorCode::invalid_shape, "labels " + to_string(labels.dims()) + " are not on the model grid " +
                                              to_string(g.padded));
  LabelVolume cur = crop(labels, {0, 0, 0}, g.resized);
  cur = resize_nearest(cur, g.cropped, Align::corners);
  if (g.cropped != g.resampled) {
    LabelVolume full(g.resampled, 1);
    for (int h = 0; h < g.cropped.h; ++h)
      for (int w = 0; w < g.cropped.w; ++w)
        for (int c = 0; c < g.cropped.c; ++c) full.at(h + g.crop_origin[0], w + g.crop_origin[1], c) = cur.at(h, w, c);
    cur = std::move(full);
  }
  cur = resize_nearest(cur, g.original, Align::half_pixel);
  cur.spacing = std::nullopt;
  return cur;
}

}  // namespace pshop
