#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles/oracles.hpp"
#include "pshop/pshop.hpp"

using namespace pshop;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("pshop_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

Volume4D ramp_volume(Dims d, Spacing s) {
  Volume4D v(d, 1);
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(i % 97) * 0.5f;
  v.spacing = s;
  return v;
}

PipelineConfig fast_pipeline(Task task = Task::gland) {
  auto c = default_config(task);
  c.preprocess.resize_h = 48;
  c.preprocess.resize_w = 48;
  c.decoder.main.rounds = 15;
  c.decoder.refine.rounds = 5;
  return c;
}

std::vector<Case> small_phantoms(int n, std::uint64_t seed, bool three_class = false) {
  PhantomOptions opt;
  opt.dims = {48, 48, 24};
  opt.three_class = three_class;
  return make_phantoms(n, seed, opt);
}

/// Writes a NIfTI-1 file with an arbitrary datatype for reader tests.
void write_nifti_raw(const std::string& path, Dims d, std::int16_t datatype, const std::vector<std::uint8_t>& payload,
                     float slope, float inter, Spacing s) {
  std::vector<std::uint8_t> h(352, 0);
  auto put = [&](std::size_t off, auto v) { std::memcpy(h.data() + off, &v, sizeof v); };
  put(0, std::int32_t{348});
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(d.w), static_cast<std::int16_t>(d.h),
                                static_cast<std::int16_t>(d.c), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(40 + 2 * i, dims[i]);
  put(70, datatype);
  const float pix[8] = {1, static_cast<float>(s.dx), static_cast<float>(s.dy), static_cast<float>(s.dz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(76 + 4 * i, pix[i]);
  put(108, 352.0f);
  put(112, slope);
  put(116, inter);
  std::memcpy(h.data() + 344, "n+1", 4);
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(h.data()), 352);
  f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

}  // namespace

// --- file formats ----------------------------------------------------------

TEST(Nifti, RoundTripPlainAndCompressed) {
  TempDir dir;
  const auto v = ramp_volume({5, 7, 3}, {0.5, 0.7, 2.5});
  for (const char* name : {"a.nii", "a.nii.gz"}) {
    nifti::write(dir / name, v);
    const auto r = nifti::read(dir / name);
    EXPECT_EQ(r.dims(), v.dims());
    EXPECT_EQ(r.data(), v.data());
    EXPECT_NEAR(r.spacing->dy, 0.5, 1e-6);
    EXPECT_NEAR(r.spacing->dx, 0.7, 1e-6);
    EXPECT_NEAR(r.spacing->dz, 2.5, 1e-6);
  }
}

TEST(Nifti, Int16WithScaling) {
  TempDir dir;
  const Dims d{2, 3, 2};
  std::vector<std::uint8_t> payload;
  for (std::int16_t i = 0; i < 12; ++i) {
    const std::int16_t v = static_cast<std::int16_t>(i - 4);
    payload.insert(payload.end(), reinterpret_cast<const std::uint8_t*>(&v), reinterpret_cast<const std::uint8_t*>(&v) + 2);
  }
  write_nifti_raw(dir / "s.nii", d, nifti::int16, payload, 2.0f, 1.0f, {1, 1, 1});
  const auto r = nifti::read(dir / "s.nii");
  // File order is i (W) fastest, then j (H), then k (C).
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 3; ++i) EXPECT_EQ(r.at(j, i, k), 2.0f * ((k * 2 + j) * 3 + i - 4) + 1.0f);
}

TEST(Nifti, RejectsGarbage) {
  TempDir dir;
  std::ofstream(dir / "bad.nii") << "not a nifti file at all";
  EXPECT_THROW(nifti::read(dir / "bad.nii"), Error);
  write_nifti_raw(dir / "dt.nii", {2, 2, 2}, 1024, std::vector<std::uint8_t>(64), 0, 0, {1, 1, 1});
  EXPECT_THROW(nifti::read(dir / "dt.nii"), Error);
}

TEST(Raw, RoundTrip) {
  TempDir dir;
  const auto v = ramp_volume({4, 3, 5}, {0.625, 0.625, 1.5});
  raw::write(dir / "x.raw", v);
  const auto r = raw::read(dir / "x.raw");
  EXPECT_EQ(r.data(), v.data());
  EXPECT_EQ(r.dims(), v.dims());
  EXPECT_EQ(*r.spacing, *v.spacing);
}

TEST(Ingest, PairsByStem) {
  TempDir dir;
  for (int i = 0; i < 3; ++i) {
    const auto v = ramp_volume({4, 4, 2}, {1, 1, 1});
    nifti::write(dir / ("case" + std::to_string(i) + ".nii.gz"), v);
    nifti::write(dir / ("case" + std::to_string(i) + "_mask.nii.gz"), LabelVolume(Dims{4, 4, 2}, 1, 1));
  }
  const auto r = ingest(dir.str());
  ASSERT_EQ(r.cases.size(), 3u);
  EXPECT_TRUE(r.errors.empty());
  for (const auto& c : r.cases) EXPECT_TRUE(c.mask.has_value());
  EXPECT_EQ(r.cases[1].id, "case1");
}

TEST(Ingest, ImageWithoutMask) {
  TempDir dir;
  raw::write(dir / "solo.raw", ramp_volume({4, 4, 2}, {1, 1, 1}));
  const auto r = ingest(dir.str());
  ASSERT_EQ(r.cases.size(), 1u);
  EXPECT_FALSE(r.cases[0].mask.has_value());
}

TEST(Ingest, ShapeMismatchRejectsCase) {
  TempDir dir;
  nifti::write(dir / "a.nii", ramp_volume({4, 4, 2}, {1, 1, 1}));
  nifti::write(dir / "a_mask.nii", LabelVolume(Dims{4, 5, 2}, 1));
  nifti::write(dir / "b.nii", ramp_volume({4, 4, 2}, {1, 1, 1}));
  std::ofstream(dir / "notes.txt") << "x";
  const auto r = ingest(dir.str());
  ASSERT_EQ(r.cases.size(), 1u);
  EXPECT_EQ(r.cases[0].id, "b");
  ASSERT_EQ(r.errors.size(), 2u);
  bool both_shapes = false;
  for (const auto& e : r.errors)
    both_shapes |= e.find("4x4x2") != std::string::npos && e.find("4x5x2") != std::string::npos;
  EXPECT_TRUE(both_shapes);
}

TEST(Png, WritesValidSignature) {
  TempDir dir;
  png::write_rgb(dir / "x.png", 3, 2, std::vector<std::uint8_t>(18, 128));
  std::ifstream f(dir / "x.png", std::ios::binary);
  char sig[8];
  f.read(sig, 8);
  EXPECT_EQ(std::string(sig + 1, 3), "PNG");
}

// --- preprocessing ---------------------------------------------------------

TEST(Preprocess, FixedPointGeometry) {
  Case c{"a", ramp_volume({128, 128, 32}, {0.625, 0.625, 1.5}), std::nullopt, ""};
  const auto p = preprocess(c, PreprocessConfig{}, 8);
  EXPECT_EQ(p.image.dims(), (Dims{128, 128, 32}));
  EXPECT_EQ(p.geometry.resampled, (Dims{128, 128, 32}));
}

TEST(Preprocess, SpacingArithmetic) {
  Case c{"a", ramp_volume({100, 100, 20}, {0.5, 0.5, 3.0}), std::nullopt, ""};
  const auto p = preprocess(c, PreprocessConfig{}, 8);
  EXPECT_EQ(p.geometry.resampled, (Dims{80, 80, 40}));
  EXPECT_EQ(p.image.dims(), (Dims{128, 128, 40}));
  for (float x : p.image.data()) {
    EXPECT_GE(x, 0.0f);
    EXPECT_LE(x, 1.0f);
  }
}

TEST(Preprocess, PadsSlicesToMultiple) {
  Case c{"a", ramp_volume({64, 64, 13}, {0.625, 0.625, 1.5}), std::nullopt, ""};
  const auto p = preprocess(c, PreprocessConfig{}, 8);
  EXPECT_EQ(p.image.dims(), (Dims{128, 128, 16}));
}

TEST(Preprocess, MissingSpacing) {
  Case c{"a", Volume4D(Dims{8, 8, 8}, 1), std::nullopt, ""};
  try {
    preprocess(c, PreprocessConfig{}, 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::metadata);
  }
}

TEST(Preprocess, MaskLabelsAreSubsetAndRoundTripWithinOneVoxel) {
  PhantomOptions opt;
  opt.dims = {50, 60, 12};
  opt.three_class = true;
  opt.spacing = {0.5, 0.55, 2.0};
  const auto c = make_phantoms(1, 21, opt).front();
  const auto p = preprocess(c, PreprocessConfig{}, 8);
  std::set<int> in(c.mask->data().begin(), c.mask->data().end());
  for (auto y : p.mask->data()) EXPECT_TRUE(in.count(y));

  const auto back = restore_labels(*p.mask, p.geometry);
  ASSERT_EQ(back.dims(), c.mask->dims());
  const Dims d = back.dims();
  int mismatched = 0;
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int k = 0; k < d.c; ++k) {
        const int y = back.at(h, w, k);
        if (y == c.mask->at(h, w, k)) continue;
        ++mismatched;
        bool near = false;  // some original voxel within one step carries the restored label
        for (int a = -1; a <= 1 && !near; ++a)
          for (int b = -1; b <= 1 && !near; ++b)
            for (int e = -1; e <= 1 && !near; ++e) {
              const int hh = h + a, ww = w + b, kk = k + e;
              if (hh < 0 || ww < 0 || kk < 0 || hh >= d.h || ww >= d.w || kk >= d.c) continue;
              near = c.mask->at(hh, ww, kk) == y;
            }
        EXPECT_TRUE(near) << h << "," << w << "," << k;
      }
  EXPECT_LT(mismatched, static_cast<int>(d.voxels() / 20));
}

TEST(Preprocess, ZonalCropCentresOnGland) {
  PhantomOptions opt;
  opt.dims = {96, 96, 8};
  const auto c = make_phantoms(1, 22, opt).front();
  PreprocessConfig cfg;
  cfg.zonal_crop = 48;
  const auto center = mask_centroid(*c.mask);
  const auto p = preprocess(c, cfg, 8, center);
  EXPECT_EQ(p.geometry.cropped, (Dims{48, 48, 8}));
  const auto back = restore_labels(*p.mask, p.geometry);
  EXPECT_GT(dsc(back, *c.mask), 0.95);
}

// --- metrics ---------------------------------------------------------------

TEST(Dsc, Examples) {
  std::vector<std::uint8_t> x(10, 0), y(10, 0);
  EXPECT_EQ(dsc(x, y), 1.0);
  x[0] = 1;
  EXPECT_EQ(dsc(x, y), 0.0);
  EXPECT_EQ(dsc(x, x), 1.0);
  y[5] = 1;
  EXPECT_EQ(dsc(x, y), 0.0);
  std::fill(x.begin(), x.end(), 0);
  std::fill(y.begin(), y.end(), 0);
  for (int i = 0; i < 4; ++i) x[i] = 1;      // |X| = 4
  for (int i = 1; i < 7; ++i) y[i] = 1;      // |Y| = 6, overlap 3
  EXPECT_DOUBLE_EQ(dsc(x, y), 0.6);
  EXPECT_THROW(dsc(x, std::vector<std::uint8_t>(3)), Error);
}

TEST(Dsc, MatchesSetOracleAndIsSymmetric) {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<std::uint8_t> x(n), y(n);
    const unsigned px = rng() % 4, py = rng() % 4;
    for (auto& v : x) v = rng() % 4 < px;
    for (auto& v : y) v = rng() % 4 < py;
    EXPECT_EQ(dsc(x, y), oracle::dsc(x, y));
    EXPECT_EQ(dsc(x, y), dsc(y, x));
  }
}

TEST(Dsc, PerClassOneVsRest) {
  LabelVolume a(Dims{1, 1, 4}, 1, std::vector<std::uint8_t>{0, 1, 2, 2});
  LabelVolume b(Dims{1, 1, 4}, 1, std::vector<std::uint8_t>{0, 1, 1, 2});
  const auto s = dsc_per_class(a, b, 3);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0], 2.0 * 1 / 3);
  EXPECT_DOUBLE_EQ(s[1], 2.0 * 1 / 3);
}

// --- phantoms --------------------------------------------------------------

TEST(Phantoms, SeedDeterminism) {
  const auto a = make_phantoms(2, 5), b = make_phantoms(2, 5), c = make_phantoms(2, 6);
  EXPECT_EQ(a[1].image.data(), b[1].image.data());
  EXPECT_EQ(a[1].mask->data(), b[1].mask->data());
  EXPECT_NE(a[0].image.data(), c[0].image.data());
}

TEST(Phantoms, VoxelCountMatchesEllipsoidVolume) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 10; ++t) {
    PhantomShape s;
    s.center = {40.3, 41.7, 30.2};
    s.radii = {8.0 + (rng() % 100) / 10.0, 8.0 + (rng() % 100) / 10.0, 8.0 + (rng() % 100) / 10.0};
    s.angle = (rng() % 100) / 100.0;
    const auto m = phantom_mask(s, {80, 80, 60}, false);
    const double count = std::count(m.data().begin(), m.data().end(), 1);
    const double analytic = 4.0 / 3.0 * std::numbers::pi * s.radii[0] * s.radii[1] * s.radii[2];
    EXPECT_NEAR(count / analytic, 1.0, 0.03);
  }
}

TEST(Phantoms, TransitionZoneInsideGland) {
  PhantomOptions opt;
  opt.three_class = true;
  const auto cases = make_phantoms(3, 8, opt);
  for (const auto& c : cases) {
    int tz = 0, pz = 0;
    const Dims d = c.mask->dims();
    for (int h = 0; h < d.h; ++h)
      for (int w = 0; w < d.w; ++w)
        for (int k = 0; k < d.c; ++k) {
          const int y = c.mask->at(h, w, k);
          tz += y == 1;
          pz += y == 2;
        }
    EXPECT_GT(tz, 0);
    EXPECT_GT(pz, 0);
    // Every TZ voxel lies inside the analytic gland: the two-class mask agrees.
    opt.three_class = false;
  }
  PhantomOptions two = opt;
  two.three_class = false;
  const auto gland = make_phantoms(3, 8, two);
  PhantomOptions three = two;
  three.three_class = true;
  const auto zones = make_phantoms(3, 8, three);
  for (int i = 0; i < 3; ++i)
    for (std::size_t v = 0; v < gland[i].mask->voxels(); ++v)
      if (zones[i].mask->data()[v] == 1) EXPECT_EQ(gland[i].mask->data()[v], 1);
}

// --- complexity -------------------------------------------------------------

TEST(Complexity, SaabUnitCount) {
  SaabUnit u;
  u.n_in = 27;
  u.ac_anchors.assign(27 * 26, 0.0);
  EXPECT_EQ(count_params(u), 703u);
}

TEST(Complexity, EmptyDecoderHasNoTreeParameters) {
  EXPECT_EQ(count_params(DecoderModel{}), 0u);
}

TEST(Complexity, TreeCount) {
  TreeEnsemble e;
  Tree t;
  t.nodes = {{0, 0.5f, 1, 2, 0.0}, {-1, 0, -1, -1, 1.0}, {-1, 0, -1, -1, 2.0}};
  e.trees = {t, t};
  EXPECT_EQ(count_params(e), 2u * (2 + 2));
}

// --- configuration and persistence ----------------------------------------

TEST(Config, JsonRoundTripAndPartialDocuments) {
  auto c = default_config(Task::zonal);
  c.decoder.main.rounds = 77;
  c.preprocess.zonal_gt_crop = true;
  const nlohmann::json j = c;
  const auto back = j.get<PipelineConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.decoder.n_classes, 3);
  const auto partial = nlohmann::json::parse(R"({"task":"gland","decoder":{"main":{"rounds":5}}})").get<PipelineConfig>();
  EXPECT_EQ(partial.decoder.main.rounds, 5);
  EXPECT_EQ(partial.decoder.refine.rounds, 100);
  EXPECT_EQ(partial.encoder.levels, 4);
  EXPECT_THROW(nlohmann::json::parse(R"({"task":"liver"})").get<PipelineConfig>(), Error);
  EXPECT_THROW(nlohmann::json::parse(R"({"preprocess":{"resize_h":64}})").get<PipelineConfig>(), Error);
  EXPECT_THROW(nlohmann::json::parse(R"({"decoder":{"main":{"round":5}}})").get<PipelineConfig>(), Error);
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cases_ = new std::vector<Case>(small_phantoms(3, 31));
    model_ = new SegmentationModel(train(*cases_, fast_pipeline()));
  }
  static void TearDownTestSuite() {
    delete cases_;
    delete model_;
  }
  static std::vector<Case>* cases_;
  static SegmentationModel* model_;
};
std::vector<Case>* PipelineRun::cases_ = nullptr;
SegmentationModel* PipelineRun::model_ = nullptr;

TEST_F(PipelineRun, PredictionGeometryAndQuality) {
  for (const auto& c : *cases_) {
    const auto p = predict(*model_, c);
    EXPECT_EQ(p.labels.dims(), c.image.dims());
    EXPECT_GT(dsc(p.labels, *c.mask), 0.8);
  }
}

TEST_F(PipelineRun, SaveLoadPredictIsBitIdentical) {
  TempDir dir;
  save_model(*model_, dir / "m.pshop");
  const auto loaded = load_model(dir / "m.pshop");
  EXPECT_TRUE(loaded == *model_);
  EXPECT_EQ(serialize(loaded), serialize(*model_));
  const auto a = predict(*model_, (*cases_)[0]), b = predict(loaded, (*cases_)[0]);
  EXPECT_EQ(a.soft.data(), b.soft.data());
  EXPECT_EQ(a.labels.data(), b.labels.data());
}

TEST_F(PipelineRun, RejectsUnknownVersionAndCorruptFiles) {
  auto bytes = serialize(*model_);
  auto bad = bytes;
  bad[8] = 99;
  try {
    deserialize(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::format);
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize(bad), Error);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize(bad), Error);
}

TEST_F(PipelineRun, BatchOrderIndependentAndErrorsIsolated) {
  std::vector<Case> batch{(*cases_)[1], (*cases_)[0]};
  Case broken{"broken", Volume4D(Dims{8, 8, 8}, 1), std::nullopt, ""};  // no spacing
  batch.insert(batch.begin() + 1, broken);
  const auto r = predict_batch(*model_, batch);
  ASSERT_EQ(r.predictions.size(), 2u);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].first, "broken");
  EXPECT_EQ(r.predictions[0].labels.data(), predict(*model_, (*cases_)[1]).labels.data());
  EXPECT_EQ(r.predictions[1].labels.data(), predict(*model_, (*cases_)[0]).labels.data());
}

TEST_F(PipelineRun, EvaluateReport) {
  const auto rep = evaluate(*model_, *cases_);
  ASSERT_EQ(rep.cases.size(), 3u);
  for (const auto& c : rep.cases) {
    EXPECT_GE(c.dsc[0], 0.0);
    EXPECT_LE(c.dsc[0], 1.0);
  }
  EXPECT_GT(rep.params.total(), 0u);
  EXPECT_GT(rep.flops.total(), 0u);
  const auto j = to_json(rep);
  EXPECT_TRUE(j.contains("dsc"));
  EXPECT_TRUE(j["dsc"].contains("gland"));
  EXPECT_EQ(j["parameters"]["total"].get<std::uint64_t>(), rep.params.total());
}

TEST_F(PipelineRun, OutputsWritten) {
  TempDir dir;
  const auto& c = (*cases_)[0];
  const auto p = predict(*model_, c);
  const auto path = write_prediction(dir.str(), c, p.labels);
  const auto back = to_labels(read_volume(path));
  EXPECT_EQ(back.data(), p.labels.data());
  write_overlays(dir.str(), c.id, c.image, p.labels);
  EXPECT_TRUE(fs::exists(dir / (c.id + "_slice000.png")));
}

TEST(Pipeline, TrainingTwiceIsByteIdentical) {
  const auto cases = small_phantoms(2, 41);
  EXPECT_EQ(serialize(train(cases, fast_pipeline())), serialize(train(cases, fast_pipeline())));
}

TEST(Pipeline, AllBackgroundNamesCoarsestHop) {
  auto cases = small_phantoms(2, 42);
  for (auto& c : cases) std::fill(c.mask->data().begin(), c.mask->data().end(), 0);
  try {
    train(cases, fast_pipeline());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degenerate_labels);
    EXPECT_NE(std::string(e.what()).find("hop 4"), std::string::npos);
  }
}

TEST(Pipeline, TrainingNeedsMasks) {
  auto cases = small_phantoms(1, 43);
  cases[0].mask.reset();
  EXPECT_THROW(train(cases, fast_pipeline()), Error);
}

TEST(Pipeline, ZonalWithGlandCrop) {
  auto cfg = fast_pipeline(Task::zonal);
  cfg.preprocess.zonal_crop = 24;
  const auto cases = small_phantoms(2, 44, true);
  const auto zonal = train(cases, cfg);
  EXPECT_EQ(zonal.decoder.config.n_classes, 3);
  const auto gland = train(cases, fast_pipeline());
  const auto p = predict(zonal, cases[0], &gland);
  EXPECT_EQ(p.labels.dims(), cases[0].image.dims());
  EXPECT_EQ(p.soft.channels(), 3);
  for (auto y : p.labels.data()) EXPECT_LT(y, 3);
}
