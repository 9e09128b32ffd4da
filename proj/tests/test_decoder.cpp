#include <gtest/gtest.h>

#include <random>

#include "oracles/oracles.hpp"
#include "pshop/decoder.hpp"
#include "pshop/encoder.hpp"
#include "pshop/metrics.hpp"
#include "pshop/phantom.hpp"

using namespace pshop;

namespace {

DecoderConfig fast_config(int n_classes = 2) {
  DecoderConfig c;
  c.n_classes = n_classes;
  c.main.rounds = 20;
  c.refine.rounds = 8;
  return c;
}

struct Fixture {
  std::vector<Volume4D> images;
  std::vector<LabelVolume> masks;
  std::vector<std::vector<Volume4D>> features;
  EncoderModel encoder;
};

Fixture phantom_fixture(int n, std::uint64_t seed, bool three_class = false) {
  PhantomOptions opt;
  opt.dims = {32, 32, 32};  // enough depth for confident hop-4 supervision
  opt.three_class = three_class;
  Fixture f;
  for (auto& c : make_phantoms(n, seed, opt)) {
    f.images.push_back(c.image);
    f.masks.push_back(*c.mask);
  }
  f.encoder = encoder_fit(f.images, EncoderConfig{}, &f.features);
  return f;
}

Volume4D uniform_soft(Dims d, std::vector<float> p) {
  Volume4D v(d, static_cast<int>(p.size()));
  for (std::size_t i = 0; i < v.voxels(); ++i) std::copy(p.begin(), p.end(), v.voxel(i).begin());
  return v;
}

void expect_simplex(const Volume4D& soft) {
  for (std::size_t i = 0; i < soft.voxels(); ++i) {
    double s = 0.0;
    for (float p : soft.voxel(i)) {
      EXPECT_GE(p, 0.0f);
      EXPECT_LE(p, 1.0f);
      s += p;
    }
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace

TEST(PositionEncoding, CornersAndCenter) {
  const auto pe = position_encoding({3, 3, 3});
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(pe.at(0, 0, 0, k), 0.0f);
    EXPECT_EQ(pe.at(2, 2, 2, k), 1.0f);
    EXPECT_EQ(pe.at(1, 1, 1, k), 0.5f);
  }
  const auto pe2 = position_encoding({5, 7, 1});
  EXPECT_EQ(pe2.at(4, 0, 0, 1), 1.0f);  // channel 1 follows H
  EXPECT_EQ(pe2.at(0, 6, 0, 0), 1.0f);  // channel 0 follows W
  EXPECT_EQ(pe2.at(2, 3, 0, 2), 0.5f);  // singleton axis
}

TEST(DownsampleLabels, UniformMaskAllSelected) {
  LabelVolume m(Dims{8, 8, 4}, 1, 1);
  const auto s = downsample_labels(m, 2, {2, 2, 1}, 0.9);
  EXPECT_EQ(s.count, 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(s.labels[i], 1);
    EXPECT_EQ(s.soft.voxel(i)[1], 1.0f);
  }
}

TEST(DownsampleLabels, MidpointIsExcluded) {
  LabelVolume m(Dims{2, 1, 1}, 1, std::vector<std::uint8_t>{0, 1});
  const auto s = downsample_labels(m, 2, {1, 1, 1}, 0.5);
  EXPECT_FLOAT_EQ(s.soft.voxel(0)[0], 0.5f);
  EXPECT_FLOAT_EQ(s.soft.voxel(0)[1], 0.5f);
  try {
    downsample_labels(m, 2, {1, 1, 1}, 0.9);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::empty_supervision);
  }
}

TEST(DownsampleLabels, ThresholdZeroSelectsEverything) {
  PhantomOptions opt;
  opt.dims = {32, 32, 16};
  const auto c = make_phantoms(1, 3, opt).front();
  const auto s = downsample_labels(*c.mask, 2, {8, 8, 4}, 0.0);
  EXPECT_EQ(s.count, 8u * 8u * 4u);
}

TEST(Aggregate, WidthsFollowTheRecurrence) {
  const int L = 4, nc = 2;
  std::vector<Dims> dims{{16, 16, 8}, {8, 8, 4}, {4, 4, 2}, {2, 2, 1}};
  std::optional<Volume4D> fp;
  for (int hop = L; hop >= 1; --hop) {
    Volume4D fe(dims[hop - 1], 5, 1.0f);
    const auto agg = aggregate_features(fe, fp);
    EXPECT_EQ(agg.channels(), 3 + nc * (L - hop) + 5);
    if (hop == L) EXPECT_FALSE(fp.has_value());
    if (hop > 1) fp = propagate_probabilities(fp, uniform_soft(dims[hop - 1], {0.3f, 0.7f}), dims[hop - 2]);
  }
  ASSERT_TRUE(fp);
  EXPECT_EQ(fp->channels(), 6);
  for (std::size_t i = 0; i < fp->voxels(); ++i)
    for (int k = 0; k < 6; ++k) EXPECT_NEAR(fp->voxel(i)[k], k % 2 ? 0.7f : 0.3f, 1e-6);
}

TEST(Aggregate, LayoutIsPositionThenProbabilitiesThenEncoder) {
  Volume4D fe(Dims{4, 4, 2}, 2, 9.0f);
  const auto fp = uniform_soft({4, 4, 2}, {0.25f, 0.75f});
  const auto agg = aggregate_features(fe, fp);
  const auto pe = position_encoding({4, 4, 2});
  for (std::size_t i = 0; i < agg.voxels(); ++i) {
    for (int k = 0; k < 3; ++k) EXPECT_EQ(agg.voxel(i)[k], pe.voxel(i)[k]);
    EXPECT_EQ(agg.voxel(i)[3], 0.25f);
    EXPECT_EQ(agg.voxel(i)[4], 0.75f);
    EXPECT_EQ(agg.voxel(i)[5], 9.0f);
  }
  EXPECT_THROW(aggregate_features(fe, uniform_soft({2, 2, 1}, {0.5f, 0.5f})), Error);
}

TEST(Aggregate, UpsampledSimplexStaysOnSimplex) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Volume4D soft(Dims{4, 4, 2}, 3);
  for (std::size_t i = 0; i < soft.voxels(); ++i) {
    float a = u(rng), b = u(rng), c = u(rng), s = a + b + c;
    soft.voxel(i)[0] = a / s;
    soft.voxel(i)[1] = b / s;
    soft.voxel(i)[2] = 1.0f - a / s - b / s;
  }
  expect_simplex(propagate_probabilities(std::nullopt, soft, {8, 8, 4}));
}

TEST(Sls, ZeroIterationsIsIdentity) {
  const auto soft = uniform_soft({4, 4, 2}, {0.1f, 0.9f});
  EXPECT_EQ(sls_refine(soft, {}).data(), soft.data());
}

TEST(Sls, ConstantSoftMapStaysConstant) {
  std::mt19937_64 rng(5);
  Matrix<float> x(100, 54);
  std::vector<int> y(100);
  for (float& v : x.data()) v = static_cast<float>(rng() % 1000) / 1000.0f;
  for (int& v : y) v = static_cast<int>(rng() % 2);
  BoostParams p;
  p.rounds = 5;
  const std::vector<TreeEnsemble> ens{ensemble_fit(x, y, 2, p)};
  const auto out = sls_refine(uniform_soft({5, 5, 3}, {0.4f, 0.6f}), ens);
  for (std::size_t i = 0; i < out.voxels(); ++i) EXPECT_EQ(out.voxel(i)[0], out.voxel(0)[0]);
  expect_simplex(out);
}

TEST(DecoderFit, AllBackgroundIsDegenerateAtCoarsestHop) {
  auto f = phantom_fixture(1, 6);
  for (auto& m : f.masks) std::fill(m.data().begin(), m.data().end(), 0);
  try {
    decoder_fit(f.features, f.masks, fast_config(), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degenerate_labels);
    EXPECT_EQ(e.hop(), 4);
    EXPECT_NE(std::string(e.what()).find("hop 4"), std::string::npos);
  }
}

TEST(DecoderFit, SolidCubeOverfits) {
  const Dims d{32, 32, 16};
  Volume4D img(d, 1, 0.1f);
  LabelVolume mask(d, 1, 0);
  std::mt19937_64 rng(7);
  std::normal_distribution<float> noise(0.0f, 0.02f);
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int c = 0; c < d.c; ++c) {
        const bool in = h >= 8 && h < 24 && w >= 8 && w < 24 && c >= 2 && c < 14;
        img.at(h, w, c) = (in ? 0.8f : 0.1f) + noise(rng);
        mask.at(h, w, c) = in;
      }
  std::vector<std::vector<Volume4D>> feats;
  const std::vector<Volume4D> imgs{img};
  const auto enc = encoder_fit(imgs, EncoderConfig{}, &feats);
  const std::vector<LabelVolume> masks{mask};
  const auto dec = decoder_fit(feats, masks, fast_config(), 3);
  const auto pred = decoder_predict(dec, encoder_apply(enc, img));
  EXPECT_GE(dsc(pred.labels, mask), 0.95);
}

class DecoderPhantoms : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fx_ = new Fixture(phantom_fixture(3, 11));
    trace_ = new DecoderTrace;
    model_ = new DecoderModel(decoder_fit(fx_->features, fx_->masks, fast_config(), 42, trace_));
  }
  static void TearDownTestSuite() {
    delete fx_;
    delete trace_;
    delete model_;
  }
  static Fixture* fx_;
  static DecoderTrace* trace_;
  static DecoderModel* model_;
};
Fixture* DecoderPhantoms::fx_ = nullptr;
DecoderTrace* DecoderPhantoms::trace_ = nullptr;
DecoderModel* DecoderPhantoms::model_ = nullptr;

TEST_F(DecoderPhantoms, StructureAndSimplex) {
  ASSERT_EQ(model_->hops.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(model_->hops[i].hop, 4 - i);
    EXPECT_EQ(model_->hops[i].refine.size(), 2u);
    EXPECT_EQ(model_->hops[i].main.n_features, 3 + 2 * i + fx_->encoder.hops[3 - i].out_channels());
    EXPECT_EQ(model_->hops[i].refine[0].n_features, 27 * 2);
  }
  for (const auto& hop : trace_->post_refine)
    for (const auto& s : hop) expect_simplex(s);
  for (const auto& hop : trace_->pre_refine)
    for (const auto& s : hop) expect_simplex(s);
}

TEST_F(DecoderPhantoms, PredictReproducesFit) {
  for (std::size_t v = 0; v < fx_->images.size(); ++v) {
    const auto pred = decoder_predict(*model_, encoder_apply(fx_->encoder, fx_->images[v]));
    EXPECT_EQ(pred.soft.data(), trace_->post_refine[0][v].data());
    EXPECT_EQ(pred.soft_pre_refine.data(), trace_->pre_refine[0][v].data());
    EXPECT_EQ(pred.labels.data(), median_filter_2d(argmax_labels(trace_->post_refine[0][v])).data());
  }
}

TEST_F(DecoderPhantoms, FinerHopsAndRefinementHelp) {
  double fine = 0.0, coarse = 0.0, pre = 0.0, post = 0.0;
  for (std::size_t v = 0; v < fx_->images.size(); ++v) {
    const auto& m = fx_->masks[v];
    const Volume4D up = resize_trilinear(trace_->post_refine[3][v], m.dims(), Align::half_pixel);
    coarse += dsc(argmax_labels(up), m);
    fine += dsc(argmax_labels(trace_->post_refine[0][v]), m);
    pre += dsc(argmax_labels(trace_->pre_refine[0][v]), m);
    post += dsc(argmax_labels(trace_->post_refine[0][v]), m);
  }
  EXPECT_GE(fine, coarse);
  EXPECT_GE(post, pre);
}

TEST_F(DecoderPhantoms, MedianNeverAddsClasses) {
  const auto pred = decoder_predict(*model_, encoder_apply(fx_->encoder, fx_->images[0]));
  std::set<int> before(pred.raw_labels.data().begin(), pred.raw_labels.data().end());
  for (auto y : pred.labels.data()) EXPECT_TRUE(before.count(y));
}

TEST_F(DecoderPhantoms, Deterministic) {
  EXPECT_EQ(decoder_fit(fx_->features, fx_->masks, fast_config(), 42).hops, model_->hops);
}

TEST(DecoderPredict, SaltVoxelRemovedByMedian) {
  Volume4D soft = uniform_soft({15, 15, 1}, {0.1f, 0.9f});
  soft.voxel(soft.voxel_index(7, 7, 0))[0] = 0.95f;
  soft.voxel(soft.voxel_index(7, 7, 0))[1] = 0.05f;
  const auto raw = argmax_labels(soft);
  EXPECT_EQ(raw.at(7, 7, 0), 0);
  const auto filtered = median_filter_2d(raw);
  for (auto y : filtered.data()) EXPECT_EQ(y, 1);
}

TEST(DecoderPredict, FeatureCountMismatch) {
  DecoderModel m;
  m.hops.resize(2);
  EXPECT_THROW(decoder_predict(m, std::vector<Volume4D>(3, Volume4D(Dims{2, 2, 2}, 1))), Error);
}

TEST(TrainingVoxels, MajorityCapAndBudget) {
  std::vector<Supervision> sup(1);
  sup[0].selected.assign(1000, 1);
  sup[0].labels.assign(1000, 0);
  for (int i = 0; i < 50; ++i) sup[0].labels[i * 20] = 1;
  DecoderConfig cfg;
  auto chosen = detail::choose_training_voxels(sup, 2, cfg, 1);
  int ones = 0;
  for (auto i : chosen[0]) ones += sup[0].labels[i];
  EXPECT_EQ(ones, 50);
  EXPECT_EQ(chosen[0].size(), 200u);  // 50 minority + 3 * 50 majority
  EXPECT_TRUE(std::is_sorted(chosen[0].begin(), chosen[0].end()));
  cfg.sample_budget = 100;
  chosen = detail::choose_training_voxels(sup, 2, cfg, 1);
  EXPECT_LE(chosen[0].size(), 100u);
}
