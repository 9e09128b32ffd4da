#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/matrix.hpp"

namespace pshop {

/// Spatial extent: H and W are the in-plane axes, C is the slice axis.
struct Dims {
  int h = 1;
  int w = 1;
  int c = 1;

  std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c);
  }
  int operator[](int axis) const noexcept { return axis == 0 ? h : axis == 1 ? w : c; }
  int& operator[](int axis) noexcept { return axis == 0 ? h : axis == 1 ? w : c; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.h) + "x" + std::to_string(d.w) + "x" + std::to_string(d.c);
}

/// Voxel spacing in millimetres along (H, W, C).
struct Spacing {
  double dy = 1.0;
  double dx = 1.0;
  double dz = 1.0;

  double operator[](int axis) const noexcept { return axis == 0 ? dy : axis == 1 ? dx : dz; }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Dense H x W x C x K grid, channel-last, H outermost.
/// Flat index of (h, w, c, k) is ((h * W + w) * C + c) * K + k.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(Dims dims, int channels, T fill = T{}) : dims_(dims), channels_(channels) {
    validate();
    data_.assign(dims_.voxels() * static_cast<std::size_t>(channels_), fill);
  }
  Grid(Dims dims, int channels, std::vector<T> data)
      : dims_(dims), channels_(channels), data_(std::move(data)) {
    validate();
    if (data_.size() != dims_.voxels() * static_cast<std::size_t>(channels_))
      throw Error(ErrorCode::invalid_shape, "grid data length " + std::to_string(data_.size()) +
                                                " does not match " + to_string(dims_) + "x" +
                                                std::to_string(channels_));
  }

  const Dims& dims() const noexcept { return dims_; }
  int channels() const noexcept { return channels_; }
  std::size_t voxels() const noexcept { return dims_.voxels(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t voxel_index(int h, int w, int c) const noexcept {
    return (static_cast<std::size_t>(h) * dims_.w + w) * dims_.c + c;
  }
  std::size_t index(int h, int w, int c, int k = 0) const noexcept {
    return voxel_index(h, w, c) * channels_ + k;
  }

  T& at(int h, int w, int c, int k = 0) { return data_[index(h, w, c, k)]; }
  const T& at(int h, int w, int c, int k = 0) const { return data_[index(h, w, c, k)]; }

  std::span<T> voxel(std::size_t v) { return {data_.data() + v * channels_, static_cast<std::size_t>(channels_)}; }
  std::span<const T> voxel(std::size_t v) const {
    return {data_.data() + v * channels_, static_cast<std::size_t>(channels_)};
  }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  std::optional<Spacing> spacing;

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.dims_ == b.dims_ && a.channels_ == b.channels_ && a.data_ == b.data_;
  }

 private:
  void validate() const {
    if (dims_.h < 1 || dims_.w < 1 || dims_.c < 1 || channels_ < 1)
      throw Error(ErrorCode::invalid_shape,
                  "grid shape must be positive, got " + to_string(dims_) + "x" + std::to_string(channels_));
  }

  Dims dims_{};
  int channels_ = 1;
  std::vector<T> data_;
};

using Volume4D = Grid<float>;
using LabelVolume = Grid<std::uint8_t>;

inline bool all_finite(const Volume4D& v) {
  return std::all_of(v.data().begin(), v.data().end(), [](float x) { return std::isfinite(x); });
}

/// Single channel `k` of `v` as a K=1 volume.
inline Volume4D extract_channel(const Volume4D& v, int k) {
  Volume4D out(v.dims(), 1);
  const std::size_t n = v.voxels();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = v.data()[i * v.channels() + k];
  out.spacing = v.spacing;
  return out;
}

/// Voxel-wise concatenation along the channel axis.
inline Volume4D concat_channels(std::span<const Volume4D* const> parts) {
  if (parts.empty()) throw Error(ErrorCode::invalid_shape, "nothing to concatenate");
  const Dims dims = parts.front()->dims();
  int total = 0;
  for (const auto* p : parts) {
    if (p->dims() != dims)
      throw Error(ErrorCode::invalid_shape,
                  "cannot concatenate " + to_string(p->dims()) + " with " + to_string(dims));
    total += p->channels();
  }
  Volume4D out(dims, total);
  const std::size_t n = out.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    float* dst = out.voxel(v).data();
    for (const auto* p : parts) {
      auto src = p->voxel(v);
      dst = std::copy(src.begin(), src.end(), dst);
    }
  }
  out.spacing = parts.front()->spacing;
  return out;
}

// ---------------------------------------------------------------------------
// Neighborhoods
// ---------------------------------------------------------------------------

enum class Padding { reflect, zero };

struct NeighborhoodSpec {
  std::array<int, 3> size{3, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  Padding padding = Padding::reflect;

  int length() const noexcept { return size[0] * size[1] * size[2]; }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (size[a] < 1 || size[a] % 2 == 0)
        throw Error(ErrorCode::invalid_spec, "neighborhood sizes must be odd and >= 1");
      if (stride[a] < 1) throw Error(ErrorCode::invalid_spec, "neighborhood strides must be >= 1");
    }
  }
  friend bool operator==(const NeighborhoodSpec&, const NeighborhoodSpec&) = default;
};

/// Mirror index without edge repetition (-1 -> 1, n -> n-2).
inline int reflect_index(int i, int n) noexcept {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

namespace detail {

/// Source index per window offset for every output position along one axis;
/// -1 marks a zero-padded tap.
inline std::vector<int> axis_taps(int n, int size, int stride, Padding padding) {
  const int radius = size / 2;
  const int outs = (n + stride - 1) / stride;
  std::vector<int> taps(static_cast<std::size_t>(outs) * size);
  for (int o = 0; o < outs; ++o)
    for (int d = 0; d < size; ++d) {
      int i = o * stride + d - radius;
      if (i < 0 || i >= n) i = padding == Padding::reflect ? reflect_index(i, n) : -1;
      taps[static_cast<std::size_t>(o) * size + d] = i;
    }
  return taps;
}

}  // namespace detail

/// One row per output voxel (H, then W, then C order); within a row the
/// layout is spatial offset major, channel minor.
inline Matrix<float> gather_neighborhoods(const Volume4D& v, const NeighborhoodSpec& spec) {
  spec.validate();
  const Dims d = v.dims();
  for (int a = 0; a < 3; ++a)
    if ((spec.size[a] - 1) / 2 > d[a])
      throw Error(ErrorCode::invalid_spec, "neighborhood of size " + std::to_string(spec.size[a]) +
                                               " exceeds twice the volume extent " +
                                               std::to_string(d[a]) + " on axis " + std::to_string(a));
  const auto th = detail::axis_taps(d.h, spec.size[0], spec.stride[0], spec.padding);
  const auto tw = detail::axis_taps(d.w, spec.size[1], spec.stride[1], spec.padding);
  const auto tc = detail::axis_taps(d.c, spec.size[2], spec.stride[2], spec.padding);
  const int oh = static_cast<int>(th.size()) / spec.size[0];
  const int ow = static_cast<int>(tw.size()) / spec.size[1];
  const int oc = static_cast<int>(tc.size()) / spec.size[2];
  const int K = v.channels();
  const std::size_t row_len = static_cast<std::size_t>(spec.length()) * K;
  Matrix<float> out(static_cast<std::size_t>(oh) * ow * oc, row_len);

#pragma omp parallel for schedule(static)
  for (int h = 0; h < oh; ++h)
    for (int w = 0; w < ow; ++w)
      for (int c = 0; c < oc; ++c) {
        float* dst = out.row((static_cast<std::size_t>(h) * ow + w) * oc + c).data();
        for (int dh = 0; dh < spec.size[0]; ++dh) {
          const int sh = th[static_cast<std::size_t>(h) * spec.size[0] + dh];
          for (int dw = 0; dw < spec.size[1]; ++dw) {
            const int sw = tw[static_cast<std::size_t>(w) * spec.size[1] + dw];
            for (int dc = 0; dc < spec.size[2]; ++dc) {
              const int sc = tc[static_cast<std::size_t>(c) * spec.size[2] + dc];
              if (sh < 0 || sw < 0 || sc < 0) {
                std::fill_n(dst, K, 0.0f);
              } else {
                auto src = v.voxel(v.voxel_index(sh, sw, sc));
                std::copy(src.begin(), src.end(), dst);
              }
              dst += K;
            }
          }
        }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and interpolation
// ---------------------------------------------------------------------------

/// 2x2x2 max-pooling with stride 2; trailing odd planes are dropped.
inline Volume4D max_pool(const Volume4D& v) {
  const Dims d = v.dims();
  if (d.h < 2 || d.w < 2 || d.c < 2)
    throw Error(ErrorCode::invalid_shape, "max_pool needs every spatial extent >= 2, got " + to_string(d));
  const Dims o{d.h / 2, d.w / 2, d.c / 2};
  const int K = v.channels();
  Volume4D out(o, K);
#pragma omp parallel for schedule(static)
  for (int h = 0; h < o.h; ++h)
    for (int w = 0; w < o.w; ++w)
      for (int c = 0; c < o.c; ++c) {
        float* dst = out.voxel(out.voxel_index(h, w, c)).data();
        auto first = v.voxel(v.voxel_index(2 * h, 2 * w, 2 * c));
        std::copy(first.begin(), first.end(), dst);
        for (int i = 0; i < 8; ++i) {
          auto src = v.voxel(v.voxel_index(2 * h + (i >> 2), 2 * w + ((i >> 1) & 1), 2 * c + (i & 1)));
          for (int k = 0; k < K; ++k) dst[k] = std::max(dst[k], src[k]);
        }
      }
  if (v.spacing) out.spacing = Spacing{v.spacing->dy * 2, v.spacing->dx * 2, v.spacing->dz * 2};
  return out;
}

/// Coordinate convention when mapping between grids of different sizes.
/// `corners` aligns the first and last voxel centres; `half_pixel` aligns the
/// outer voxel edges, so a factor-2 change matches 2x2x2 pooling blocks.
enum class Align { corners, half_pixel };

inline double source_coordinate(int j, int n_in, int n_out, Align align) {
  if (align == Align::corners) {
    if (n_out == 1) return 0.5 * (n_in - 1);
    return static_cast<double>(j) * (n_in - 1) / (n_out - 1);
  }
  const double s = (j + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(n_in - 1));
}

namespace detail {

struct LinearTap {
  int i0;
  int i1;
  double w1;
};

inline std::vector<LinearTap> linear_taps(int n_in, int n_out, Align align) {
  std::vector<LinearTap> taps(n_out);
  for (int j = 0; j < n_out; ++j) {
    const double s = source_coordinate(j, n_in, n_out, align);
    int i0 = static_cast<int>(std::floor(s));
    i0 = std::clamp(i0, 0, n_in - 1);
    const int i1 = std::min(i0 + 1, n_in - 1);
    taps[j] = {i0, i1, i1 == i0 ? 0.0 : s - i0};
  }
  return taps;
}

inline std::vector<int> nearest_taps(int n_in, int n_out, Align align) {
  std::vector<int> taps(n_out);
  for (int j = 0; j < n_out; ++j)
    taps[j] = std::clamp(static_cast<int>(std::lround(source_coordinate(j, n_in, n_out, align))), 0, n_in - 1);
  return taps;
}

}  // namespace detail

/// Three-axis linear interpolation to `target`; channels are preserved.
inline Volume4D resize_trilinear(const Volume4D& v, Dims target, Align align = Align::corners) {
  if (target.h < 1 || target.w < 1 || target.c < 1)
    throw Error(ErrorCode::invalid_shape, "resize target must be positive, got " + to_string(target));
  const Dims d = v.dims();
  if (d == target) return v;
  const auto th = detail::linear_taps(d.h, target.h, align);
  const auto tw = detail::linear_taps(d.w, target.w, align);
  const auto tc = detail::linear_taps(d.c, target.c, align);
  const int K = v.channels();
  Volume4D out(target, K);
#pragma omp parallel for schedule(static)
  for (int h = 0; h < target.h; ++h) {
    std::vector<double> acc(K);
    for (int w = 0; w < target.w; ++w)
      for (int c = 0; c < target.c; ++c) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int corner = 0; corner < 8; ++corner) {
          const bool bh = corner & 4, bw = corner & 2, bc = corner & 1;
          const double wt = (bh ? th[h].w1 : 1.0 - th[h].w1) * (bw ? tw[w].w1 : 1.0 - tw[w].w1) *
                            (bc ? tc[c].w1 : 1.0 - tc[c].w1);
          if (wt == 0.0) continue;
          auto src = v.voxel(v.voxel_index(bh ? th[h].i1 : th[h].i0, bw ? tw[w].i1 : tw[w].i0,
                                           bc ? tc[c].i1 : tc[c].i0));
          for (int k = 0; k < K; ++k) acc[k] += wt * src[k];
        }
        float* dst = out.voxel(out.voxel_index(h, w, c)).data();
        for (int k = 0; k < K; ++k) dst[k] = static_cast<float>(acc[k]);
      }
  }
  out.spacing = v.spacing;
  if (v.spacing)
    out.spacing = Spacing{v.spacing->dy * d.h / target.h, v.spacing->dx * d.w / target.w,
                          v.spacing->dz * d.c / target.c};
  return out;
}

/// Nearest-neighbour resize; the interpolation used for label maps.
template <typename T>
Grid<T> resize_nearest(const Grid<T>& v, Dims target, Align align = Align::corners) {
  if (target.h < 1 || target.w < 1 || target.c < 1)
    throw Error(ErrorCode::invalid_shape, "resize target must be positive, got " + to_string(target));
  const Dims d = v.dims();
  const auto th = detail::nearest_taps(d.h, target.h, align);
  const auto tw = detail::nearest_taps(d.w, target.w, align);
  const auto tc = detail::nearest_taps(d.c, target.c, align);
  Grid<T> out(target, v.channels());
  for (int h = 0; h < target.h; ++h)
    for (int w = 0; w < target.w; ++w)
      for (int c = 0; c < target.c; ++c) {
        auto src = v.voxel(v.voxel_index(th[h], tw[w], tc[c]));
        std::copy(src.begin(), src.end(), out.voxel(out.voxel_index(h, w, c)).begin());
      }
  if (v.spacing)
    out.spacing = Spacing{v.spacing->dy * d.h / target.h, v.spacing->dx * d.w / target.w,
                          v.spacing->dz * d.c / target.c};
  return out;
}

// ---------------------------------------------------------------------------
// Lanczos resampling
// ---------------------------------------------------------------------------

inline double lanczos3(double x) {
  constexpr double a = 3.0;
  x = std::abs(x);
  if (x < 1e-12) return 1.0;
  if (x >= a) return 0.0;
  const double px = std::numbers::pi * x;
  return a * std::sin(px) * std::sin(px / a) / (px * px);
}

namespace detail {

struct WeightedTaps {
  std::vector<int> first;   // per output sample, offset into index/weight
  std::vector<int> index;
  std::vector<double> weight;
};

/// Normalised Lanczos-3 taps; the kernel is stretched when downsampling.
inline WeightedTaps lanczos_taps(int n_in, int n_out) {
  WeightedTaps t;
  const double scale = static_cast<double>(n_in) / n_out;
  const double stretch = std::max(1.0, scale);
  const double support = 3.0 * stretch;
  t.first.reserve(n_out + 1);
  for (int j = 0; j < n_out; ++j) {
    t.first.push_back(static_cast<int>(t.index.size()));
    const double center = (j + 0.5) * scale - 0.5;
    const int lo = static_cast<int>(std::ceil(center - support));
    const int hi = static_cast<int>(std::floor(center + support));
    const std::size_t start = t.index.size();
    double total = 0.0;
    for (int i = lo; i <= hi; ++i) {
      const double wt = lanczos3((i - center) / stretch);
      if (wt == 0.0) continue;
      t.index.push_back(std::clamp(i, 0, n_in - 1));
      t.weight.push_back(wt);
      total += wt;
    }
    for (std::size_t q = start; q < t.weight.size(); ++q) t.weight[q] /= total;
  }
  t.first.push_back(static_cast<int>(t.index.size()));
  return t;
}

/// Applies 1-D taps along `axis` of `v`.
inline Volume4D filter_axis(const Volume4D& v, int axis, int n_out, const WeightedTaps& taps) {
  Dims od = v.dims();
  od[axis] = n_out;
  const int K = v.channels();
  Volume4D out(od, K);
#pragma omp parallel for schedule(static)
  for (int h = 0; h < od.h; ++h) {
    std::vector<double> acc(K);
    for (int w = 0; w < od.w; ++w)
      for (int c = 0; c < od.c; ++c) {
        const int j = axis == 0 ? h : axis == 1 ? w : c;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int q = taps.first[j]; q < taps.first[j + 1]; ++q) {
          const int i = taps.index[q];
          const auto src = v.voxel(axis == 0   ? v.voxel_index(i, w, c)
                                   : axis == 1 ? v.voxel_index(h, i, c)
                                               : v.voxel_index(h, w, i));
          for (int k = 0; k < K; ++k) acc[k] += taps.weight[q] * src[k];
        }
        float* dst = out.voxel(out.voxel_index(h, w, c)).data();
        for (int k = 0; k < K; ++k) dst[k] = static_cast<float>(acc[k]);
      }
  }
  return out;
}

}  // namespace detail

/// Output grid size when resampling `dims` from `spacing` to `target` spacing.
inline Dims resampled_dims(Dims dims, const Spacing& spacing, const Spacing& target) {
  Dims out;
  for (int a = 0; a < 3; ++a)
    out[a] = std::max(1, static_cast<int>(std::lround(dims[a] * spacing[a] / target[a])));
  return out;
}

/// Separable Lanczos-3 resampling onto `target` (edge-aligned grids).
inline Volume4D resample_lanczos(const Volume4D& v, Dims target) {
  Volume4D cur = v;
  for (int a = 0; a < 3; ++a) {
    if (cur.dims()[a] == target[a]) continue;
    cur = detail::filter_axis(cur, a, target[a], detail::lanczos_taps(cur.dims()[a], target[a]));
  }
  cur.spacing = v.spacing;
  return cur;
}

/// Lanczos-3 resampling to a physical voxel spacing (mm).
inline Volume4D resample_lanczos(const Volume4D& v, const Spacing& target_spacing) {
  if (!v.spacing) throw Error(ErrorCode::metadata, "volume has no spacing metadata");
  for (int a = 0; a < 3; ++a)
    if (!((*v.spacing)[a] > 0.0) || !(target_spacing[a] > 0.0))
      throw Error(ErrorCode::metadata, "voxel spacing must be positive");
  Volume4D out = resample_lanczos(v, resampled_dims(v.dims(), *v.spacing, target_spacing));
  out.spacing = target_spacing;
  return out;
}

// ---------------------------------------------------------------------------
// Padding and cropping
// ---------------------------------------------------------------------------

/// Extends each axis at its far end by mirroring, up to `target`.
template <typename T>
Grid<T> pad_end_reflect(const Grid<T>& v, Dims target) {
  const Dims d = v.dims();
  if (target.h < d.h || target.w < d.w || target.c < d.c)
    throw Error(ErrorCode::invalid_shape, "pad target " + to_string(target) + " smaller than " + to_string(d));
  if (target == d) return v;
  Grid<T> out(target, v.channels());
  for (int h = 0; h < target.h; ++h)
    for (int w = 0; w < target.w; ++w)
      for (int c = 0; c < target.c; ++c) {
        auto src = v.voxel(v.voxel_index(reflect_index(h, d.h), reflect_index(w, d.w), reflect_index(c, d.c)));
        std::copy(src.begin(), src.end(), out.voxel(out.voxel_index(h, w, c)).begin());
      }
  out.spacing = v.spacing;
  return out;
}

/// Sub-block starting at `origin` with extent `size`; voxels outside `v`
/// are filled with `fill`.
template <typename T>
Grid<T> crop(const Grid<T>& v, std::array<int, 3> origin, Dims size, T fill = T{}) {
  Grid<T> out(size, v.channels(), fill);
  const Dims d = v.dims();
  for (int h = 0; h < size.h; ++h)
    for (int w = 0; w < size.w; ++w)
      for (int c = 0; c < size.c; ++c) {
        const int sh = origin[0] + h, sw = origin[1] + w, sc = origin[2] + c;
        if (sh < 0 || sw < 0 || sc < 0 || sh >= d.h || sw >= d.w || sc >= d.c) continue;
        auto src = v.voxel(v.voxel_index(sh, sw, sc));
        std::copy(src.begin(), src.end(), out.voxel(out.voxel_index(h, w, c)).begin());
      }
  out.spacing = v.spacing;
  return out;
}

inline int round_up(int n, int multiple) { return (n + multiple - 1) / multiple * multiple; }

// ---------------------------------------------------------------------------
// Label post-processing
// ---------------------------------------------------------------------------

/// Per-slice in-plane median over a `window` x `window` reflect-padded
/// neighbourhood. Uses the lower median of the window values.
inline LabelVolume median_filter_2d(const LabelVolume& labels, int window = 7) {
  if (window < 1 || window % 2 == 0) throw Error(ErrorCode::invalid_spec, "median window must be odd");
  const Dims d = labels.dims();
  const int r = window / 2;
  const int rank = (window * window - 1) / 2;  // zero-based lower median
  LabelVolume out(d, 1);
  out.spacing = labels.spacing;
#pragma omp parallel for schedule(static)
  for (int h = 0; h < d.h; ++h) {
    std::array<int, 256> counts{};
    for (int w = 0; w < d.w; ++w)
      for (int c = 0; c < d.c; ++c) {
        counts.fill(0);
        for (int dh = -r; dh <= r; ++dh) {
          const int sh = reflect_index(h + dh, d.h);
          for (int dw = -r; dw <= r; ++dw) ++counts[labels.at(sh, reflect_index(w + dw, d.w), c)];
        }
        int seen = 0;
        int label = 0;
        for (; label < 256; ++label) {
          seen += counts[label];
          if (seen > rank) break;
        }
        out.at(h, w, c) = static_cast<std::uint8_t>(label);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CLAHE
// ---------------------------------------------------------------------------

struct Image2D {
  int h = 0;
  int w = 0;
  std::vector<float> data;

  float& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

/// Contrast-limited adaptive histogram equalisation of an image with values
/// in [0, 1]. `clip_limit` is relative to the uniform bin height.
inline Image2D clahe(const Image2D& img, double clip_limit = 2.0, int tiles_y = 8, int tiles_x = 8,
                     int bins = 256) {
  if (img.h < 1 || img.w < 1) throw Error(ErrorCode::invalid_shape, "empty image");
  tiles_y = std::clamp(tiles_y, 1, img.h);
  tiles_x = std::clamp(tiles_x, 1, img.w);
  auto bin_of = [&](float v) {
    const double x = std::isfinite(v) ? std::clamp(static_cast<double>(v), 0.0, 1.0) : 0.0;
    return std::min(bins - 1, static_cast<int>(x * bins));
  };
  auto edge = [](int t, int tiles, int n) { return static_cast<int>(static_cast<long>(t) * n / tiles); };

  std::vector<std::vector<double>> luts(static_cast<std::size_t>(tiles_y) * tiles_x);
  std::vector<double> hist(bins);
  for (int ty = 0; ty < tiles_y; ++ty)
    for (int tx = 0; tx < tiles_x; ++tx) {
      const int y0 = edge(ty, tiles_y, img.h), y1 = edge(ty + 1, tiles_y, img.h);
      const int x0 = edge(tx, tiles_x, img.w), x1 = edge(tx + 1, tiles_x, img.w);
      std::fill(hist.begin(), hist.end(), 0.0);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) hist[bin_of(img.at(y, x))] += 1.0;
      const double npix = static_cast<double>(y1 - y0) * (x1 - x0);
      const double limit = std::max(1.0, clip_limit * npix / bins);
      double excess = 0.0;
      for (double& b : hist)
        if (b > limit) {
          excess += b - limit;
          b = limit;
        }
      const double spread = excess / bins;
      for (double& b : hist) b += spread;

      auto& lut = luts[static_cast<std::size_t>(ty) * tiles_x + tx];
      lut.resize(bins);
      double cdf = 0.0, cdf_min = -1.0;
      for (int b = 0; b < bins; ++b) {
        cdf += hist[b];
        if (cdf_min < 0.0 && hist[b] > 0.0) cdf_min = cdf;
        lut[b] = cdf;
      }
      const double denom = cdf - cdf_min;
      for (int b = 0; b < bins; ++b)
        lut[b] = denom > 0.0 ? std::clamp((lut[b] - cdf_min) / denom, 0.0, 1.0)
                             : static_cast<double>(b) / std::max(1, bins - 1);
    }

  Image2D out{img.h, img.w, std::vector<float>(img.data.size())};
  const double tile_h = static_cast<double>(img.h) / tiles_y;
  const double tile_w = static_cast<double>(img.w) / tiles_x;
  for (int y = 0; y < img.h; ++y) {
    const double fy = std::clamp((y + 0.5) / tile_h - 0.5, 0.0, tiles_y - 1.0);
    const int ty0 = static_cast<int>(fy);
    const int ty1 = std::min(ty0 + 1, tiles_y - 1);
    const double ay = fy - ty0;
    for (int x = 0; x < img.w; ++x) {
      const double fx = std::clamp((x + 0.5) / tile_w - 0.5, 0.0, tiles_x - 1.0);
      const int tx0 = static_cast<int>(fx);
      const int tx1 = std::min(tx0 + 1, tiles_x - 1);
      const double ax = fx - tx0;
      const int b = bin_of(img.at(y, x));
      auto lut = [&](int ty, int tx) { return luts[static_cast<std::size_t>(ty) * tiles_x + tx][b]; };
      const double v = (1 - ay) * ((1 - ax) * lut(ty0, tx0) + ax * lut(ty0, tx1)) +
                       ay * ((1 - ax) * lut(ty1, tx0) + ax * lut(ty1, tx1));
      out.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

/// Slice `c`, channel `k` as an image.
inline Image2D slice_image(const Volume4D& v, int c, int k = 0) {
  const Dims d = v.dims();
  Image2D img{d.h, d.w, std::vector<float>(static_cast<std::size_t>(d.h) * d.w)};
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w) img.at(h, w) = v.at(h, w, c, k);
  return img;
}

inline void set_slice(Volume4D& v, int c, const Image2D& img, int k = 0) {
  for (int h = 0; h < img.h; ++h)
    for (int w = 0; w < img.w; ++w) v.at(h, w, c, k) = img.at(h, w);
}

/// Rescales every value to [0, 1]; constant volumes map to 0.
inline void normalize_minmax(Volume4D& v) {
  if (v.empty()) return;
  auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
  const double a = *lo, range = static_cast<double>(*hi) - a;
  for (float& x : v.data()) x = range > 0.0 ? static_cast<float>((x - a) / range) : 0.0f;
}

}  // namespace pshop
