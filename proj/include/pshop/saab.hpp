#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/matrix.hpp"
#include "pshop/volume.hpp"

namespace pshop {

/// Learned Saab transform for one input channel.
///
/// Component 0 projects onto the DC anchor (1/sqrt(N))(1,...,1); components
/// 1..M-1 project onto the AC anchors, the leading principal directions of the
/// DC-removed neighborhoods. A single bias is added to every component.
struct SaabUnit {
  int n_in = 0;
  std::vector<double> ac_anchors;  // num_ac x n_in, row-major
  double bias = 0.0;
  std::vector<double> energies;    // per component, DC first

  int num_ac() const noexcept { return n_in > 0 ? static_cast<int>(ac_anchors.size()) / n_in : 0; }
  int num_components() const noexcept { return 1 + num_ac(); }
  double dc_weight() const noexcept { return 1.0 / std::sqrt(static_cast<double>(n_in)); }
  std::span<const double> ac_anchor(int m) const {
    return {ac_anchors.data() + static_cast<std::size_t>(m) * n_in, static_cast<std::size_t>(n_in)};
  }
  std::vector<double> dc_anchor() const { return std::vector<double>(n_in, dc_weight()); }

  /// Projections of one neighborhood (without the bias).
  void project(const float* x, double* y) const {
    double s = 0.0;
    for (int i = 0; i < n_in; ++i) s += x[i];
    y[0] = s * dc_weight();
    const double* a = ac_anchors.data();
    for (int m = 0, M = num_ac(); m < M; ++m, a += n_in) {
      double d = 0.0;
      for (int i = 0; i < n_in; ++i) d += a[i] * x[i];
      y[m + 1] = d;
    }
  }

  /// Drops AC anchors beyond the first `keep`.
  void truncate(int keep) {
    keep = std::clamp(keep, 0, num_ac());
    ac_anchors.resize(static_cast<std::size_t>(keep) * n_in);
    energies.resize(static_cast<std::size_t>(keep) + 1);
  }

  friend bool operator==(const SaabUnit&, const SaabUnit&) = default;
};

/// First and second raw moments of a stream of length-n vectors.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(int n = 0) : n_(n), sum_(n, 0.0), outer_(static_cast<std::size_t>(n) * n, 0.0) {}

  void add(const float* x) {
    ++count_;
    for (int i = 0; i < n_; ++i) {
      const double xi = x[i];
      sum_[i] += xi;
      double* row = outer_.data() + static_cast<std::size_t>(i) * n_;
      for (int j = i; j < n_; ++j) row[j] += xi * x[j];
    }
  }

  int dim() const noexcept { return n_; }
  std::uint64_t count() const noexcept { return count_; }

  /// Sum of several accumulators. Each entry is added in ascending value
  /// order, so the result does not depend on the order of `parts`.
  static MomentAccumulator combine(std::span<const MomentAccumulator> parts) {
    if (parts.empty()) return MomentAccumulator();
    MomentAccumulator out(parts.front().n_);
    std::vector<double> vals(parts.size());
    auto reduce = [&](auto get) {
      for (std::size_t p = 0; p < parts.size(); ++p) vals[p] = get(parts[p]);
      std::sort(vals.begin(), vals.end());
      double s = 0.0;
      for (double v : vals) s += v;
      return s;
    };
    for (const auto& p : parts) out.count_ += p.count_;
    for (int i = 0; i < out.n_; ++i) {
      out.sum_[i] = reduce([i](const MomentAccumulator& m) { return m.sum_[i]; });
      for (int j = i; j < out.n_; ++j) {
        const std::size_t q = static_cast<std::size_t>(i) * out.n_ + j;
        out.outer_[q] = reduce([q](const MomentAccumulator& m) { return m.outer_[q]; });
      }
    }
    return out;
  }

  /// Mean of the squared norm; scales the cancellation error of covariance().
  double mean_square() const {
    double t = 0.0;
    for (int i = 0; i < n_; ++i) t += outer_[static_cast<std::size_t>(i) * n_ + i];
    return t / static_cast<double>(count_);
  }

  /// Population covariance.
  Eigen::MatrixXd covariance() const {
    Eigen::MatrixXd cov(n_, n_);
    const double inv = 1.0 / static_cast<double>(count_);
    for (int i = 0; i < n_; ++i)
      for (int j = i; j < n_; ++j) {
        const double c = outer_[static_cast<std::size_t>(i) * n_ + j] * inv - (sum_[i] * inv) * (sum_[j] * inv);
        cov(i, j) = c;
        cov(j, i) = c;
      }
    return cov;
  }

 private:
  int n_ = 0;
  std::uint64_t count_ = 0;
  std::vector<double> sum_;
  std::vector<double> outer_;  // upper triangle used
};

namespace detail {

/// Flips `v` so its entry of largest magnitude is positive.
inline void canonical_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
  if (v(arg) < 0) v = -v;
}

constexpr double kBiasMargin = 1e-6;
constexpr double kRankTolerance = 1e-10;
constexpr double kCancellationFloor = 1e-12;  // relative to mean_square()

}  // namespace detail

/// Anchors and energies from neighborhood moments; bias left at zero.
inline SaabUnit saab_from_moments(const MomentAccumulator& moments, int max_components) {
  if (moments.count() < 2) throw Error(ErrorCode::insufficient_data, "Saab fit needs at least 2 samples");
  const int n = moments.dim();
  if (n < 1) throw Error(ErrorCode::invalid_shape, "Saab fit needs a neighborhood of length >= 1");
  const Eigen::MatrixXd cov = moments.covariance();
  const Eigen::VectorXd dc = Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
  const Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(n, n) - dc * dc.transpose();
  const Eigen::MatrixXd ac_cov = proj * cov * proj;
  const double dc_var = std::max(0.0, dc.dot(cov * dc));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ac_cov);
  const Eigen::VectorXd& lambda = eig.eigenvalues();  // ascending
  const Eigen::MatrixXd& vecs = eig.eigenvectors();

  double ac_total = 0.0;
  for (int i = 0; i < n; ++i) ac_total += std::max(0.0, lambda(i));
  const double total = dc_var + ac_total;
  // Variance at rounding level of the raw moments is indistinguishable from zero.
  const double floor = detail::kCancellationFloor * moments.mean_square();

  SaabUnit unit;
  unit.n_in = n;
  if (!(total > std::max(floor, std::numeric_limits<double>::min()))) {
    unit.energies = {1.0};
    return unit;
  }
  unit.energies.push_back(dc_var / total);
  const int limit = std::max(0, std::min(max_components - 1, n - 1));
  for (int r = n - 1; r >= 0 && unit.num_ac() < limit; --r) {
    if (!(lambda(r) > std::max(detail::kRankTolerance * total, floor))) break;
    Eigen::VectorXd v = vecs.col(r);
    v -= v.dot(dc) * dc;
    v.normalize();
    detail::canonical_sign(v);
    unit.ac_anchors.insert(unit.ac_anchors.end(), v.data(), v.data() + n);
    unit.energies.push_back(lambda(r) / total);
  }
  return unit;
}

/// Smallest projection (over every retained component) of the given rows.
inline double min_projection(const SaabUnit& unit, const Matrix<float>& rows) {
  std::vector<double> y(unit.num_components());
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    unit.project(rows.row(r).data(), y.data());
    for (double v : y) lo = std::min(lo, v);
  }
  return lo;
}

inline double bias_for_min_projection(double lo) { return std::max(0.0, -lo) + detail::kBiasMargin; }

/// Learns a Saab unit from `rows` (one flattened neighborhood per row).
inline SaabUnit saab_fit(const Matrix<float>& rows, int max_components) {
  if (rows.rows() < 2) throw Error(ErrorCode::insufficient_data, "Saab fit needs at least 2 rows");
  if (rows.cols() < 1) throw Error(ErrorCode::invalid_shape, "Saab fit needs rows of length >= 1");
  MomentAccumulator acc(static_cast<int>(rows.cols()));
  for (std::size_t r = 0; r < rows.rows(); ++r) acc.add(rows.row(r).data());
  SaabUnit unit = saab_from_moments(acc, max_components);
  unit.bias = bias_for_min_projection(min_projection(unit, rows));
  return unit;
}

/// y_m = a_m . x + b for every component m; column 0 is the DC response.
inline Matrix<float> saab_apply(const SaabUnit& unit, const Matrix<float>& rows) {
  if (rows.cols() != static_cast<std::size_t>(unit.n_in))
    throw Error(ErrorCode::invalid_shape, "row length " + std::to_string(rows.cols()) +
                                              " does not match unit input " + std::to_string(unit.n_in));
  const int M = unit.num_components();
  Matrix<float> out(rows.rows(), M);
  std::vector<double> y(M);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    unit.project(rows.row(r).data(), y.data());
    for (int m = 0; m < M; ++m) out(r, m) = static_cast<float>(y[m] + unit.bias);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel-wise Saab
// ---------------------------------------------------------------------------

/// One child in the channel energy tree.
struct EnergyNode {
  int hop = 1;
  int parent_channel = 0;
  int component_index = 0;
  double energy = 0.0;
  bool kept = false;

  friend bool operator==(const EnergyNode&, const EnergyNode&) = default;
};

struct SaabParams {
  int max_components = 27;
  std::size_t sample_cap = 2'000'000;  // neighborhoods used for each covariance
};

/// One encoder hop: a Saab unit per input channel plus energy bookkeeping.
struct VoxelHopModel {
  int hop = 1;
  NeighborhoodSpec spec;
  double energy_threshold = 0.0;
  std::vector<double> parent_energies;
  std::vector<SaabUnit> units;    // truncated to the retained components
  std::vector<EnergyNode> nodes;  // every child, (parent, component) order

  int in_channels() const noexcept { return static_cast<int>(units.size()); }
  int out_channels() const noexcept {
    int k = 0;
    for (const auto& u : units) k += u.num_components();
    return k;
  }
  /// Energies of the retained children, in output channel order.
  std::vector<double> output_energies() const {
    std::vector<double> e;
    for (const auto& n : nodes)
      if (n.kept) e.push_back(n.energy);
    return e;
  }

  friend bool operator==(const VoxelHopModel&, const VoxelHopModel&) = default;
};

namespace detail {

/// Visits every output position of a single-channel plane with its gathered
/// neighborhood. `fn(out_index, const float* neighborhood)`.
template <typename Fn>
void for_each_neighborhood(const float* plane, Dims d, const NeighborhoodSpec& spec, Fn&& fn,
                           std::size_t every = 1) {
  const auto th = axis_taps(d.h, spec.size[0], spec.stride[0], spec.padding);
  const auto tw = axis_taps(d.w, spec.size[1], spec.stride[1], spec.padding);
  const auto tc = axis_taps(d.c, spec.size[2], spec.stride[2], spec.padding);
  const int oh = static_cast<int>(th.size()) / spec.size[0];
  const int ow = static_cast<int>(tw.size()) / spec.size[1];
  const int oc = static_cast<int>(tc.size()) / spec.size[2];
  std::vector<float> buf(spec.length());
  std::size_t idx = 0;
  for (int h = 0; h < oh; ++h)
    for (int w = 0; w < ow; ++w)
      for (int c = 0; c < oc; ++c, ++idx) {
        if (idx % every != 0) continue;
        float* dst = buf.data();
        for (int dh = 0; dh < spec.size[0]; ++dh) {
          const int sh = th[static_cast<std::size_t>(h) * spec.size[0] + dh];
          for (int dw = 0; dw < spec.size[1]; ++dw) {
            const int sw = tw[static_cast<std::size_t>(w) * spec.size[1] + dw];
            const float* src = sh < 0 || sw < 0 ? nullptr : plane + (static_cast<std::size_t>(sh) * d.w + sw) * d.c;
            for (int dc = 0; dc < spec.size[2]; ++dc) {
              const int sc = tc[static_cast<std::size_t>(c) * spec.size[2] + dc];
              *dst++ = src && sc >= 0 ? src[sc] : 0.0f;
            }
          }
        }
        fn(idx, buf.data());
      }
}

inline Dims strided_dims(Dims d, const NeighborhoodSpec& spec) {
  return {(d.h + spec.stride[0] - 1) / spec.stride[0], (d.w + spec.stride[1] - 1) / spec.stride[1],
          (d.c + spec.stride[2] - 1) / spec.stride[2]};
}

inline void check_extent(Dims d, const NeighborhoodSpec& spec) {
  for (int a = 0; a < 3; ++a)
    if ((spec.size[a] - 1) / 2 > d[a])
      throw Error(ErrorCode::invalid_spec, "neighborhood exceeds twice the volume extent " + to_string(d));
}

}  // namespace detail

/// Fits a channel-wise Saab hop on one or more feature maps sharing a
/// channel count. Children whose energy (parent energy times the local
/// energy fraction) is below `energy_threshold` are discarded; DC children
/// are always retained.
inline VoxelHopModel cw_saab_fit(std::span<const Volume4D> volumes, const NeighborhoodSpec& spec,
                                 double energy_threshold, std::span<const double> parent_energies,
                                 const SaabParams& params = {}, int hop = 1) {
  spec.validate();
  if (volumes.empty()) throw Error(ErrorCode::insufficient_data, "no feature maps to fit", hop);
  const int K = volumes.front().channels();
  if (static_cast<int>(parent_energies.size()) != K)
    throw Error(ErrorCode::invalid_shape, "parent energy count " + std::to_string(parent_energies.size()) +
                                              " does not match " + std::to_string(K) + " channels", hop);
  std::size_t total_rows = 0;
  for (const auto& v : volumes) {
    if (v.channels() != K) throw Error(ErrorCode::invalid_shape, "feature maps disagree on channel count", hop);
    detail::check_extent(v.dims(), spec);
    total_rows += detail::strided_dims(v.dims(), spec).voxels();
  }
  const std::size_t every = std::max<std::size_t>(1, (total_rows + params.sample_cap - 1) / params.sample_cap);
  const int N = spec.length();

  VoxelHopModel model;
  model.hop = hop;
  model.spec = spec;
  model.energy_threshold = energy_threshold;
  model.parent_energies.assign(parent_energies.begin(), parent_energies.end());
  model.units.resize(K);

  std::vector<std::string> failures(K);
#pragma omp parallel for schedule(dynamic)
  for (int k = 0; k < K; ++k) {
    try {
      std::vector<MomentAccumulator> parts;
      for (const auto& v : volumes) {
        const Volume4D plane = extract_channel(v, k);
        MomentAccumulator acc(N);
        detail::for_each_neighborhood(plane.data().data(), v.dims(), spec,
                                      [&](std::size_t, const float* x) { acc.add(x); }, every);
        parts.push_back(std::move(acc));
      }
      model.units[k] = saab_from_moments(MomentAccumulator::combine(parts), params.max_components);
    } catch (const std::exception& e) {
      failures[k] = e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(ErrorCode::insufficient_data, f, hop);

  bool any = false;
  for (int k = 0; k < K; ++k) {
    const auto& u = model.units[k];
    for (int m = 0; m < u.num_components(); ++m) {
      const double e = parent_energies[k] * u.energies[m];
      const bool kept = !(e < energy_threshold);
      any = any || kept;
      model.nodes.push_back({hop, k, m, e, kept});
    }
  }
  if (!any)
    throw Error(ErrorCode::empty_hop,
                "no channel reaches energy threshold " + std::to_string(energy_threshold), hop);

  // Retained AC children form a prefix because local energies are sorted.
  std::size_t pos = 0;
  for (int k = 0; k < K; ++k) {
    auto& u = model.units[k];
    model.nodes[pos].kept = true;
    int keep_ac = 0;
    for (int m = 1; m < u.num_components(); ++m)
      if (model.nodes[pos + m].kept) keep_ac = m;
    for (int m = 1; m <= keep_ac; ++m) model.nodes[pos + m].kept = true;
    pos += u.num_components();
    u.truncate(keep_ac);
  }

  // Shared bias makes every training response non-negative.
#pragma omp parallel for schedule(dynamic)
  for (int k = 0; k < K; ++k) {
    auto& u = model.units[k];
    std::vector<double> y(u.num_components());
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& v : volumes) {
      const Volume4D plane = extract_channel(v, k);
      detail::for_each_neighborhood(plane.data().data(), v.dims(), spec, [&](std::size_t, const float* x) {
        u.project(x, y.data());
        for (double val : y) lo = std::min(lo, val);
      });
    }
    u.bias = bias_for_min_projection(lo);
  }
  return model;
}

inline VoxelHopModel cw_saab_fit(const Volume4D& fmap, const NeighborhoodSpec& spec, double energy_threshold,
                                 std::span<const double> parent_energies, const SaabParams& params = {},
                                 int hop = 1) {
  return cw_saab_fit(std::span<const Volume4D>(&fmap, 1), spec, energy_threshold, parent_energies, params, hop);
}

/// Applies every unit to its channel; output channels are ordered by
/// (parent channel, component).
inline Volume4D cw_saab_apply(const VoxelHopModel& model, const Volume4D& fmap) {
  if (fmap.channels() != model.in_channels())
    throw Error(ErrorCode::invalid_shape,
                "feature map has " + std::to_string(fmap.channels()) + " channels, hop " +
                    std::to_string(model.hop) + " expects " + std::to_string(model.in_channels()));
  detail::check_extent(fmap.dims(), model.spec);
  const Dims od = detail::strided_dims(fmap.dims(), model.spec);
  const int out_k = model.out_channels();
  Volume4D out(od, out_k);
  std::vector<int> offset(model.units.size() + 1, 0);
  for (std::size_t k = 0; k < model.units.size(); ++k) offset[k + 1] = offset[k] + model.units[k].num_components();

#pragma omp parallel for schedule(dynamic)
  for (int k = 0; k < model.in_channels(); ++k) {
    const auto& u = model.units[k];
    const Volume4D plane = extract_channel(fmap, k);
    std::vector<double> y(u.num_components());
    detail::for_each_neighborhood(plane.data().data(), fmap.dims(), model.spec, [&](std::size_t idx, const float* x) {
      u.project(x, y.data());
      float* dst = out.data().data() + idx * out_k + offset[k];
      for (std::size_t m = 0; m < y.size(); ++m) dst[m] = static_cast<float>(y[m] + u.bias);
    });
  }
  out.spacing = fmap.spacing;
  return out;
}

}  // namespace pshop
