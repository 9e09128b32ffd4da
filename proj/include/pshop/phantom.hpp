#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/io.hpp"
#include "pshop/volume.hpp"

namespace pshop {

/// Geometry of one synthetic gland. Radii and centre are in voxels; the
/// ellipsoid is rotated in-plane by `angle` radians.
struct PhantomShape {
  std::array<double, 3> center{};  // (h, w, c)
  std::array<double, 3> radii{};   // (h, w, c)
  double angle = 0.0;
  double tz_scale = 0.55;   // inner "TZ" ellipsoid radii relative to the gland
  double tz_offset = -0.15; // TZ centre shift along h, relative to the gland h-radius
  double wobble = 0.0;      // relative amplitude of the lobed boundary perturbation
  std::array<double, 4> phases{};
};

struct PhantomOptions {
  Dims dims{64, 64, 16};
  bool three_class = false;  // background / TZ / PZ instead of background / gland
  double noise = 0.05;
  double wobble = 0.0;   // irregular gland outline; 0 gives exact ellipsoids
  double texture = 0.0;  // amplitude of a smooth random intensity field; 0 disables it
  int texture_blobs = 60;
  Spacing spacing{0.625, 0.625, 1.5};
};

namespace detail {

inline double ellipsoid_value(const std::array<double, 3>& center, const std::array<double, 3>& radii, double angle,
                              int h, int w, int c) {
  const double dh = h - center[0], dw = w - center[1], dc = c - center[2];
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double u = ca * dh + sa * dw, v = -sa * dh + ca * dw;
  return (u / radii[0]) * (u / radii[0]) + (v / radii[1]) * (v / radii[1]) + (dc / radii[2]) * (dc / radii[2]);
}

/// Squared radius scale of the gland outline in the direction of (h, w, c).
inline double outline_scale(const PhantomShape& s, int h, int w, int c) {
  if (s.wobble == 0.0) return 1.0;
  const double dh = h - s.center[0], dw = w - s.center[1];
  const double theta = std::atan2(dw / s.radii[1], dh / s.radii[0]);
  const double zeta = (c - s.center[2]) / s.radii[2];
  const double r = 1.0 + s.wobble * (0.5 * std::sin(3.0 * theta + s.phases[0]) +
                                     0.3 * std::sin(5.0 * theta + s.phases[1] + 2.0 * zeta) +
                                     0.2 * std::sin(8.0 * theta + s.phases[2]) * std::cos(3.0 * zeta + s.phases[3]));
  return r * r;
}

}  // namespace detail

/// Analytic label map: 1 inside the gland (or 1 = TZ, 2 = PZ when
/// `three_class`), 0 elsewhere. Voxel centres sit at integer coordinates.
inline LabelVolume phantom_mask(const PhantomShape& s, Dims d, bool three_class) {
  LabelVolume m(d, 1);
  std::array<double, 3> tz_center = s.center;
  tz_center[0] += s.tz_offset * s.radii[0] * std::cos(s.angle);
  tz_center[1] -= s.tz_offset * s.radii[0] * std::sin(s.angle);
  const std::array<double, 3> tz_radii{s.radii[0] * s.tz_scale, s.radii[1] * s.tz_scale, s.radii[2] * s.tz_scale};
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int c = 0; c < d.c; ++c) {
        if (detail::ellipsoid_value(s.center, s.radii, s.angle, h, w, c) > detail::outline_scale(s, h, w, c)) continue;
        std::uint8_t y = 1;
        if (three_class) y = detail::ellipsoid_value(tz_center, tz_radii, s.angle, h, w, c) <= 1.0 ? 1 : 2;
        m.at(h, w, c) = y;
      }
  return m;
}

/// Random gland geometry scaled to `d`.
inline PhantomShape random_phantom_shape(Dims d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PhantomShape s;
  s.center = {d.h * (0.42 + 0.16 * u(rng)), d.w * (0.42 + 0.16 * u(rng)), (d.c - 1) * (0.45 + 0.1 * u(rng))};
  s.radii = {d.h * (0.18 + 0.10 * u(rng)), d.w * (0.18 + 0.10 * u(rng)), d.c * (0.25 + 0.10 * u(rng))};
  s.angle = (u(rng) - 0.5) * std::numbers::pi / 3.0;
  return s;
}

/// T2-like synthetic volume for a given gland geometry: dark background with
/// a horizontal gradient, brighter gland with a vertical gradient, darker TZ,
/// a dark rectum-like blob below the gland, optional smooth texture, and
/// Gaussian noise.
inline Case make_phantom(const PhantomShape& s, const PhantomOptions& opt, std::mt19937_64& rng, std::string id) {
  const Dims d = opt.dims;
  Case c;
  c.id = std::move(id);
  c.source = "phantom";
  c.mask = phantom_mask(s, d, true);
  const LabelVolume& zones = *c.mask;
  const std::array<double, 3> rectum_center{s.center[0] + 1.35 * s.radii[0], s.center[1], s.center[2]};
  const std::array<double, 3> rectum_radii{0.3 * s.radii[0], 0.45 * s.radii[1], 0.8 * s.radii[2]};
  std::normal_distribution<double> noise(0.0, opt.noise);

  // Texture: signed Gaussian blobs scattered over the whole volume, so that
  // gland and background intensities overlap locally as in real T2 scans.
  struct Blob {
    std::array<double, 3> c, inv_s2;
    double a;
  };
  std::vector<Blob> blobs;
  if (opt.texture > 0.0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int b = 0; b < opt.texture_blobs; ++b) {
      Blob bl;
      const double sigma = 0.03 + 0.07 * u(rng);
      bl.c = {u(rng) * d.h, u(rng) * d.w, u(rng) * d.c};
      bl.inv_s2 = {1.0 / std::pow(sigma * d.h, 2), 1.0 / std::pow(sigma * d.w, 2),
                   1.0 / std::pow(std::max(1.0, 2.0 * sigma * d.c), 2)};
      bl.a = opt.texture * (2.0 * u(rng) - 1.0);
      blobs.push_back(bl);
    }
  }
  c.image = Volume4D(d, 1);
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int k = 0; k < d.c; ++k) {
        const double fy = d.h > 1 ? static_cast<double>(h) / (d.h - 1) : 0.5;
        const double fx = d.w > 1 ? static_cast<double>(w) / (d.w - 1) : 0.5;
        double x = 0.15 + 0.1 * fx;
        if (detail::ellipsoid_value(rectum_center, rectum_radii, 0.0, h, w, k) <= 1.0) x = 0.05;
        const int z = zones.at(h, w, k);
        if (z == 1) x = 0.45;
        if (z == 2) x = 0.65 + 0.1 * fy;
        for (const Blob& b : blobs) {
          const double dh = h - b.c[0], dw = w - b.c[1], dk = k - b.c[2];
          x += b.a * std::exp(-0.5 * (dh * dh * b.inv_s2[0] + dw * dw * b.inv_s2[1] + dk * dk * b.inv_s2[2]));
        }
        c.image.at(h, w, k) = static_cast<float>(x + noise(rng));
      }
  c.image.spacing = opt.spacing;
  if (!opt.three_class)
    for (auto& y : c.mask->data()) y = y > 0;
  c.mask->spacing = opt.spacing;
  return c;
}

/// `n` phantoms from one seed; identical seeds give identical sets.
inline std::vector<Case> make_phantoms(int n, std::uint64_t seed, const PhantomOptions& opt = {}) {
  if (n < 1) throw Error(ErrorCode::invalid_spec, "phantom count must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<Case> out;
  for (int i = 0; i < n; ++i) {
    PhantomShape s = random_phantom_shape(opt.dims, rng);
    if (opt.wobble > 0.0) {
      std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
      s.wobble = opt.wobble;
      for (double& p : s.phases) p = u(rng);
    }
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    out.push_back(make_phantom(s, opt, rng, id));
  }
  return out;
}

}  // namespace pshop
