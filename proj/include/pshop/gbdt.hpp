#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pshop/error.hpp"
#include "pshop/matrix.hpp"

namespace pshop {

struct BoostParams {
  int max_depth = 6;
  int rounds = 300;
  double learning_rate = 0.1;
  double subsample = 0.8;
  double colsample = 0.8;
  double min_child_weight = 1.0;
  double lambda = 1.0;  // L2 penalty on leaf weights
  double gamma = 0.0;   // minimum split gain
  std::size_t exact_max_samples = 262144;
  int max_bins = 256;
  std::uint64_t seed = 42;

  friend bool operator==(const BoostParams&, const BoostParams&) = default;
};

/// Axis-aligned node. Leaves have `feature == -1`; rows with
/// `x[feature] < threshold` go left.
struct TreeNode {
  std::int32_t feature = -1;
  float threshold = 0.0f;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;

  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict(const float* x) const {
    std::int32_t i = 0;
    while (nodes[i].feature >= 0) i = x[nodes[i].feature] < nodes[i].threshold ? nodes[i].left : nodes[i].right;
    return nodes[i].value;
  }

  int depth() const {
    std::vector<int> d(nodes.size(), 0);
    int best = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      best = std::max(best, d[i]);
      if (nodes[i].feature >= 0) {
        d[nodes[i].left] = d[i] + 1;
        d[nodes[i].right] = d[i] + 1;
      }
    }
    return best;
  }
  int splits() const {
    return static_cast<int>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature >= 0; }));
  }
  int leaves() const { return static_cast<int>(nodes.size()) - splits(); }

  friend bool operator==(const Tree&, const Tree&) = default;
};

/// Multi-class softmax boosting ensemble. `trees` is round-major: the tree for
/// round r and class k is `trees[r * n_classes + k]`. Leaf values already
/// include the learning rate.
struct TreeEnsemble {
  int n_classes = 2;
  int n_features = 0;
  double learning_rate = 0.1;
  std::vector<double> base_score;
  std::vector<Tree> trees;

  int rounds() const noexcept { return n_classes > 0 ? static_cast<int>(trees.size()) / n_classes : 0; }

  void margins(const float* x, double* out) const {
    for (int k = 0; k < n_classes; ++k) out[k] = base_score[k];
    for (std::size_t t = 0; t < trees.size(); ++t) out[t % n_classes] += trees[t].predict(x);
  }

  friend bool operator==(const TreeEnsemble&, const TreeEnsemble&) = default;
};

/// In-place softmax over `n` margins.
inline void softmax(double* m, int n) {
  const double top = *std::max_element(m, m + n);
  double s = 0.0;
  for (int k = 0; k < n; ++k) {
    m[k] = std::exp(m[k] - top);
    s += m[k];
  }
  for (int k = 0; k < n; ++k) m[k] /= s;
}

namespace detail {

/// Uniform double in [0, 1) from 53 random bits.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  float threshold = 0.0f;
};

struct GainModel {
  double lambda;
  double min_child_weight;

  double score(double g, double h) const { return g * g / (h + lambda); }
  double gain(double gl, double hl, double g, double h) const {
    const double gr = g - gl, hr = h - hl;
    if (hl < min_child_weight || hr < min_child_weight) return -1.0;
    return 0.5 * (score(gl, hl) + score(gr, hr) - score(g, h));
  }
};

inline float split_between(float lo, float hi) {
  const float mid = static_cast<float>(0.5 * (static_cast<double>(lo) + hi));
  return lo < mid ? mid : hi;
}

/// Grows one regression tree level by level on pre-computed gradients.
class TreeBuilder {
 public:
  TreeBuilder(const std::vector<float>& columns, std::size_t n, int d, const BoostParams& p)
      : cols_(columns), n_(n), d_(d), p_(p), gm_{p.lambda, p.min_child_weight} {
    exact_ = n <= p.exact_max_samples;
    if (exact_) presort();
    else bin();
  }

  Tree build(std::span<const double> g, std::span<const double> h, std::span<const std::uint8_t> in_sample,
             std::span<const int> features) {
    node_of_.assign(n_, -1);
    struct Stat {
      double g = 0, h = 0;
    };
    std::vector<Stat> stats(1);
    for (std::size_t r = 0; r < n_; ++r)
      if (in_sample[r]) {
        node_of_[r] = 0;
        stats[0].g += g[r];
        stats[0].h += h[r];
      }
    Tree tree;
    tree.nodes.emplace_back();
    std::vector<int> active{0};

    for (int depth = 0; depth < p_.max_depth && !active.empty(); ++depth) {
      std::vector<int> slot(tree.nodes.size(), -1);
      std::vector<double> node_g(active.size()), node_h(active.size());
      for (std::size_t s = 0; s < active.size(); ++s) {
        slot[active[s]] = static_cast<int>(s);
        node_g[s] = stats[active[s]].g;
        node_h[s] = stats[active[s]].h;
      }
      const auto best = exact_ ? find_exact(g, h, features, slot, node_g, node_h)
                               : find_hist(g, h, features, slot, node_g, node_h);

      std::vector<int> next;
      std::vector<int> child_of(tree.nodes.size(), -1);
      for (std::size_t s = 0; s < active.size(); ++s) {
        const auto& c = best[s];
        if (c.feature < 0 || !(c.gain > p_.gamma) || !(c.gain > 1e-12)) continue;
        const int id = active[s];
        const int l = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        stats.resize(tree.nodes.size());
        tree.nodes[id].feature = c.feature;
        tree.nodes[id].threshold = c.threshold;
        tree.nodes[id].left = l;
        tree.nodes[id].right = l + 1;
        child_of[id] = l;
        next.push_back(l);
        next.push_back(l + 1);
      }
      for (std::size_t r = 0; r < n_; ++r) {
        const int id = node_of_[r];
        if (id < 0 || slot[id] < 0) continue;
        if (child_of[id] < 0) {
          node_of_[r] = -1;
          continue;
        }
        const auto& nd = tree.nodes[id];
        const int child = cols_[static_cast<std::size_t>(nd.feature) * n_ + r] < nd.threshold ? nd.left : nd.right;
        node_of_[r] = child;
        stats[child].g += g[r];
        stats[child].h += h[r];
      }
      active = std::move(next);
    }
    for (std::size_t i = 0; i < tree.nodes.size(); ++i)
      if (tree.nodes[i].feature < 0)
        tree.nodes[i].value = -stats[i].g / (stats[i].h + p_.lambda) * p_.learning_rate;
    return tree;
  }

  bool exact() const noexcept { return exact_; }

 private:
  void presort() {
    sorted_.resize(static_cast<std::size_t>(d_) * n_);
#pragma omp parallel for schedule(dynamic)
    for (int f = 0; f < d_; ++f) {
      auto first = sorted_.begin() + static_cast<std::ptrdiff_t>(f) * n_;
      std::iota(first, first + n_, 0);
      const float* col = cols_.data() + static_cast<std::size_t>(f) * n_;
      std::stable_sort(first, first + n_, [col](std::int32_t a, std::int32_t b) { return col[a] < col[b]; });
    }
  }

  void bin() {
    bins_.resize(static_cast<std::size_t>(d_) * n_);
    cuts_.assign(d_, {});
    const int max_bins = std::clamp(p_.max_bins, 2, 256);
#pragma omp parallel for schedule(dynamic)
    for (int f = 0; f < d_; ++f) {
      const float* col = cols_.data() + static_cast<std::size_t>(f) * n_;
      std::vector<float> v(col, col + n_);
      std::sort(v.begin(), v.end());
      std::vector<float> uniq(v.begin(), v.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      auto& cuts = cuts_[f];
      if (static_cast<int>(uniq.size()) <= max_bins) {
        for (std::size_t i = 1; i < uniq.size(); ++i) cuts.push_back(split_between(uniq[i - 1], uniq[i]));
      } else {
        for (int b = 1; b < max_bins; ++b) {
          const float c = v[static_cast<std::size_t>(b) * n_ / max_bins];
          if (c > v.front() && (cuts.empty() || c > cuts.back())) cuts.push_back(c);
        }
      }
      std::uint8_t* out = bins_.data() + static_cast<std::size_t>(f) * n_;
      for (std::size_t r = 0; r < n_; ++r)
        out[r] = static_cast<std::uint8_t>(std::upper_bound(cuts.begin(), cuts.end(), col[r]) - cuts.begin());
    }
  }

  std::vector<SplitCandidate> reduce(const std::vector<std::vector<SplitCandidate>>& per_feature,
                                     std::size_t slots) const {
    std::vector<SplitCandidate> best(slots);
    for (const auto& cands : per_feature)
      for (std::size_t s = 0; s < slots; ++s)
        if (cands[s].feature >= 0 && cands[s].gain > best[s].gain) best[s] = cands[s];
    return best;
  }

  std::vector<SplitCandidate> find_exact(std::span<const double> g, std::span<const double> h,
                                         std::span<const int> features, const std::vector<int>& slot,
                                         const std::vector<double>& node_g, const std::vector<double>& node_h) const {
    const std::size_t slots = node_g.size();
    std::vector<std::vector<SplitCandidate>> per_feature(features.size(), std::vector<SplitCandidate>(slots));
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t fi = 0; fi < static_cast<std::ptrdiff_t>(features.size()); ++fi) {
      const int f = features[fi];
      const float* col = cols_.data() + static_cast<std::size_t>(f) * n_;
      const std::int32_t* order = sorted_.data() + static_cast<std::size_t>(f) * n_;
      std::vector<double> gl(slots, 0.0), hl(slots, 0.0);
      std::vector<float> last(slots);
      std::vector<std::uint8_t> seen(slots, 0);
      auto& out = per_feature[fi];
      for (std::size_t q = 0; q < n_; ++q) {
        const std::int32_t r = order[q];
        const int id = node_of_[r];
        if (id < 0) continue;
        const int s = slot[id];
        if (s < 0) continue;
        const float x = col[r];
        if (seen[s] && x != last[s]) {
          const double gain = gm_.gain(gl[s], hl[s], node_g[s], node_h[s]);
          if (gain > out[s].gain) out[s] = {gain, f, split_between(last[s], x)};
        }
        gl[s] += g[r];
        hl[s] += h[r];
        last[s] = x;
        seen[s] = 1;
      }
    }
    return reduce(per_feature, slots);
  }

  std::vector<SplitCandidate> find_hist(std::span<const double> g, std::span<const double> h,
                                        std::span<const int> features, const std::vector<int>& slot,
                                        const std::vector<double>& node_g, const std::vector<double>& node_h) const {
    const std::size_t slots = node_g.size();
    std::vector<std::vector<SplitCandidate>> per_feature(features.size(), std::vector<SplitCandidate>(slots));
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t fi = 0; fi < static_cast<std::ptrdiff_t>(features.size()); ++fi) {
      const int f = features[fi];
      const auto& cuts = cuts_[f];
      const std::size_t nb = cuts.size() + 1;
      std::vector<double> hg(slots * nb, 0.0), hh(slots * nb, 0.0);
      const std::uint8_t* col = bins_.data() + static_cast<std::size_t>(f) * n_;
      for (std::size_t r = 0; r < n_; ++r) {
        const int id = node_of_[r];
        if (id < 0) continue;
        const int s = slot[id];
        if (s < 0) continue;
        hg[s * nb + col[r]] += g[r];
        hh[s * nb + col[r]] += h[r];
      }
      auto& out = per_feature[fi];
      for (std::size_t s = 0; s < slots; ++s) {
        double gl = 0.0, hl = 0.0;
        for (std::size_t b = 0; b + 1 < nb; ++b) {
          gl += hg[s * nb + b];
          hl += hh[s * nb + b];
          if (hh[s * nb + b] == 0.0 && hg[s * nb + b] == 0.0) continue;
          const double gain = gm_.gain(gl, hl, node_g[s], node_h[s]);
          if (gain > out[s].gain) out[s] = {gain, f, cuts[b]};
        }
      }
    }
    return reduce(per_feature, slots);
  }

  const std::vector<float>& cols_;
  std::size_t n_;
  int d_;
  BoostParams p_;
  GainModel gm_;
  bool exact_ = true;
  std::vector<std::int32_t> sorted_;
  std::vector<std::uint8_t> bins_;
  std::vector<std::vector<float>> cuts_;
  std::vector<int> node_of_;
};

inline double cross_entropy(const std::vector<double>& margins, std::span<const int> y, int k) {
  double loss = 0.0;
  std::vector<double> m(k);
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::copy_n(margins.data() + i * k, k, m.data());
    const double top = *std::max_element(m.begin(), m.end());
    double s = 0.0;
    for (double v : m) s += std::exp(v - top);
    loss += top + std::log(s) - m[y[i]];
  }
  return loss / static_cast<double>(y.size());
}

}  // namespace detail

/// Softmax cross-entropy gradient boosting with second-order leaf weights.
/// `loss_history`, when given, receives the training loss before the first
/// round and after every round.
inline TreeEnsemble ensemble_fit(const Matrix<float>& features, std::span<const int> labels, int n_classes,
                                 const BoostParams& params, std::vector<double>* loss_history = nullptr) {
  const std::size_t n = features.rows();
  const int d = static_cast<int>(features.cols());
  if (d == 0) throw Error(ErrorCode::invalid_shape, "classifier needs at least one feature");
  if (labels.size() != n) throw Error(ErrorCode::invalid_shape, "label count does not match sample count");
  if (n < 2) throw Error(ErrorCode::insufficient_data, "classifier needs at least 2 samples");
  if (n_classes < 2) throw Error(ErrorCode::degenerate_labels, "classifier needs at least 2 classes");
  std::vector<std::size_t> counts(n_classes, 0);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw Error(ErrorCode::invalid_shape, "label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  if (std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) < 2)
    throw Error(ErrorCode::degenerate_labels, "training labels contain a single class");

  TreeEnsemble ens;
  ens.n_classes = n_classes;
  ens.n_features = d;
  ens.learning_rate = params.learning_rate;
  for (int k = 0; k < n_classes; ++k)
    ens.base_score.push_back(std::log(std::max(static_cast<double>(counts[k]), 1e-6) / static_cast<double>(n)));

  std::vector<float> columns(static_cast<std::size_t>(d) * n);
  for (std::size_t r = 0; r < n; ++r)
    for (int f = 0; f < d; ++f) columns[static_cast<std::size_t>(f) * n + r] = features(r, f);
  detail::TreeBuilder builder(columns, n, d, params);

  std::vector<double> margins(n * n_classes);
  for (std::size_t r = 0; r < n; ++r) std::copy(ens.base_score.begin(), ens.base_score.end(), margins.begin() + r * n_classes);
  if (loss_history) loss_history->assign(1, detail::cross_entropy(margins, labels, n_classes));

  std::mt19937_64 rng(params.seed);
  std::vector<double> prob(n * n_classes), g(n), h(n);
  std::vector<std::uint8_t> in_sample(n);
  std::vector<int> all_features(d);
  std::iota(all_features.begin(), all_features.end(), 0);
  const int n_cols = std::clamp(static_cast<int>(std::lround(params.colsample * d)), 1, d);

  for (int round = 0; round < params.rounds; ++round) {
    for (std::size_t r = 0; r < n; ++r) in_sample[r] = detail::unit_uniform(rng) < params.subsample;
    std::vector<int> cols = all_features;
    for (int i = 0; i < n_cols; ++i)
      std::swap(cols[i], cols[i + detail::uniform_index(rng, static_cast<std::uint64_t>(d - i))]);
    cols.resize(n_cols);
    std::sort(cols.begin(), cols.end());

    prob = margins;
    for (std::size_t r = 0; r < n; ++r) softmax(prob.data() + r * n_classes, n_classes);
    const std::size_t first_tree = ens.trees.size();
    for (int k = 0; k < n_classes; ++k) {
      for (std::size_t r = 0; r < n; ++r) {
        const double p = prob[r * n_classes + k];
        g[r] = p - (labels[r] == k ? 1.0 : 0.0);
        h[r] = std::max(p * (1.0 - p), 1e-16);
      }
      ens.trees.push_back(builder.build(g, h, in_sample, cols));
    }
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(n); ++r)
      for (int k = 0; k < n_classes; ++k)
        margins[r * n_classes + k] += ens.trees[first_tree + k].predict(features.row(r).data());
    if (loss_history) loss_history->push_back(detail::cross_entropy(margins, labels, n_classes));
  }
  return ens;
}

/// Class probabilities, one row per sample.
inline Matrix<float> predict_proba(const TreeEnsemble& ens, const Matrix<float>& features) {
  if (static_cast<int>(features.cols()) != ens.n_features)
    throw Error(ErrorCode::invalid_shape, "feature dimension " + std::to_string(features.cols()) +
                                              " does not match ensemble dimension " + std::to_string(ens.n_features));
  const int K = ens.n_classes;
  Matrix<float> out(features.rows(), K);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(features.rows()); ++r) {
    std::vector<double> m(K);
    ens.margins(features.row(r).data(), m.data());
    softmax(m.data(), K);
    for (int k = 0; k < K; ++k) out(r, k) = static_cast<float>(m[k]);
  }
  return out;
}

}  // namespace pshop
