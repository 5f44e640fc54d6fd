#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "orsd/harness/config.hpp"
#include "orsd/harness/io.hpp"
#include "orsd/harness/run.hpp"
#include "orsd/numkit/gradcheck.hpp"

using namespace orsd;
using namespace orsd::harness;
using geom::Detection;
using geom::OrientedBox;

namespace {

Detection box(double cx, double cy, double w, double h, double th, CategoryId c, double score = 1.0) {
  return geom::make_detection(OrientedBox(cx, cy, w, h, th), c, score,
                              score == 1.0 ? geom::Source::GroundTruth : geom::Source::ModelPrediction);
}

// AP as the mean, over GT instances, of the best precision reached at or
// after the rank where each one is recovered; unrecovered instances add 0.
double ap_oracle(const std::vector<bool>& tp_by_rank, std::size_t n_gt) {
  std::vector<double> prec(tp_by_rank.size());
  std::size_t tp = 0;
  for (std::size_t r = 0; r < tp_by_rank.size(); ++r) {
    tp += tp_by_rank[r];
    prec[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  double s = 0.0;
  for (std::size_t r = 0; r < tp_by_rank.size(); ++r) {
    if (!tp_by_rank[r]) continue;
    double best = 0.0;
    for (std::size_t q = r; q < prec.size(); ++q) best = std::max(best, prec[q]);
    s += best;
  }
  return s / static_cast<double>(n_gt);
}

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 7;
  c.model_dim = 16;
  c.fusion_layers = 1;
  c.train_scenes = 6;
  c.eval_scenes = 4;
  c.iterations = 5;
  return c;
}

std::vector<double> flat_params(ToyModel& m) {
  std::vector<double> out;
  for (auto* p : m.parameters())
    for (double v : p->value.values()) out.push_back(v);
  return out;
}

std::string fixture(const std::string& name) { return std::string(ORSD_FIXTURE_DIR) + "/pseudolabel/" + name; }

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

// ---- scenes ------------------------------------------------------------------

TEST(Scene, ZeroObjectsGivesEmptyGt) {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 0;
  std::mt19937_64 rng(1);
  const Palette pal = make_palette(3, 2.0, rng);
  const auto s = generate_scene(spec, pal, rng, "x");
  EXPECT_TRUE(s.gt.empty());
  for (std::size_t i = 0; i < s.layout.cells(); ++i) EXPECT_EQ(s.field(i, 14), 0.0);
}

TEST(Scene, SameSeedSameScene) {
  std::mt19937_64 prng(1);
  const Palette pal = make_palette(3, 2.0, prng);
  std::mt19937_64 a(99), b(99);
  const auto s1 = generate_scene({}, pal, a, "x");
  const auto s2 = generate_scene({}, pal, b, "x");
  ASSERT_EQ(s1.gt.size(), s2.gt.size());
  for (std::size_t k = 0; k < s1.gt.size(); ++k) EXPECT_EQ(s1.gt[k], s2.gt[k]);
  EXPECT_EQ(orsd::testing::max_abs_diff(s1.field, s2.field), 0.0);
}

TEST(Scene, InvariantSweep) {
  std::mt19937_64 prng(2);
  const Palette pal = make_palette(3, 2.0, prng);
  const SceneSpec spec;
  const auto scenes = generate_scenes(1000, spec, pal, 5, "sweep");
  std::size_t objects = 0;
  for (const auto& s : scenes) {
    ASSERT_EQ(s.field.rows(), spec.grid_w * spec.grid_h);
    ASSERT_EQ(s.field.cols(), kFieldDim);
    ASSERT_LE(s.gt.size(), spec.max_objects);
    for (const auto& g : s.gt) {
      ++objects;
      EXPECT_GT(g.box.w(), 0.0);
      EXPECT_GT(g.box.h(), 0.0);
      EXPECT_GE(g.box.theta(), -std::numbers::pi / 2);
      EXPECT_LT(g.box.theta(), std::numbers::pi / 2);
      EXPECT_GE(g.box.h(), spec.min_short_side);
      EXPECT_LE(g.box.w(), spec.max_long_side);
      for (const auto& p : orsd::testing::corner_oracle(g.box.cx(), g.box.cy(), g.box.w(), g.box.h(), g.box.theta())) {
        EXPECT_GE(p.x, -1e-9);
        EXPECT_GE(p.y, -1e-9);
        EXPECT_LE(p.x, s.width() + 1e-9);
        EXPECT_LE(p.y, s.height() + 1e-9);
      }
      EXPECT_EQ(g.source, geom::Source::GroundTruth);
      EXPECT_GE(g.category, 0);
      EXPECT_LT(g.category, 3);
    }
    for (std::size_t a = 0; a < s.gt.size(); ++a)
      for (std::size_t b = a + 1; b < s.gt.size(); ++b)
        EXPECT_LE(geom::rotated_iou(s.gt[a].box, s.gt[b].box), spec.max_pair_iou);
  }
  EXPECT_GT(objects, 1500u);
}

TEST(Scene, CoveredCellsCarryTheirObject) {
  std::mt19937_64 prng(3);
  const Palette pal = make_palette(3, 2.0, prng);
  SceneSpec spec;
  spec.texture_noise = 0.0;
  spec.geometry_noise = 0.0;
  const auto scenes = generate_scenes(50, spec, pal, 8, "c");
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < s.layout.cells(); ++i) {
      const auto p = s.layout.center(i);
      const Detection* cover = nullptr;
      for (const auto& g : s.gt)
        if (orsd::testing::inside_quad(
                orsd::testing::corner_oracle(g.box.cx(), g.box.cy(), g.box.w(), g.box.h(), g.box.theta()), p.x, p.y) &&
            (cover == nullptr || g.box.area() < cover->box.area()))
          cover = &g;
      if (cover == nullptr) {
        EXPECT_EQ(s.field(i, 14), 0.0);
        continue;
      }
      EXPECT_EQ(s.field(i, 14), 1.0);
      const auto& sig = pal.class_signature[static_cast<std::size_t>(cover->category)];
      for (std::size_t t = 0; t < kTextureDim; ++t) EXPECT_DOUBLE_EQ(s.field(i, t), sig[t]);
      EXPECT_NEAR(s.field(i, 8) * spec.stride + p.x, cover->box.cx(), 1e-9);
      EXPECT_NEAR(s.field(i, 9) * spec.stride + p.y, cover->box.cy(), 1e-9);
    }
  }
}

TEST(Scene, IndependentOfWorkerCount) {
  std::mt19937_64 prng(4);
  const Palette pal = make_palette(3, 2.0, prng);
  const auto a = generate_scenes(40, {}, pal, 77, "t", 1);
  const auto b = generate_scenes(40, {}, pal, 77, "t", 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image_id, b[i].image_id);
    EXPECT_EQ(orsd::testing::max_abs_diff(a[i].field, b[i].field), 0.0);
    EXPECT_EQ(a[i].gt, b[i].gt);
  }
  EXPECT_EQ(a[3].image_id, "t-00003");
}

// ---- backbone ------------------------------------------------------------------

TEST(Backbone, ShapeContract) {
  std::mt19937_64 rng(1);
  ToyBackbone bb(256, rng);
  SceneSpec spec;
  spec.grid_w = 10;
  spec.grid_h = 6;
  const Palette pal = make_palette(3, 2.0, rng);
  const auto s = generate_scene(spec, pal, rng);
  numkit::Tape t;
  const auto y = bb(t.constant(s.field));
  EXPECT_EQ(y.rows(), 60u);
  EXPECT_EQ(y.cols(), 256u);
}

TEST(Backbone, ZeroFieldGivesBiasDrivenConstantRows) {
  std::mt19937_64 rng(2);
  ToyBackbone bb(32, rng);
  numkit::Tape t;
  const auto y = bb(t.constant(Tensor2D(12, kFieldDim))).value();
  const auto silu = [](double x) { return x / (1.0 + std::exp(-x)); };
  std::vector<double> h1(32), h2(32);
  for (std::size_t j = 0; j < 32; ++j) h1[j] = silu(bb.fc1.bias.value(0, j));
  for (std::size_t k = 0; k < 32; ++k) {
    double s = bb.fc2.bias.value(0, k);
    for (std::size_t j = 0; j < 32; ++j) s += h1[j] * bb.fc2.weight.value(j, k);
    h2[k] = silu(s);
  }
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(y(r, k), h2[k], 1e-13);
}

TEST(Backbone, GradCheck) {
  std::mt19937_64 rng(3);
  ToyBackbone bb(12, rng);
  const Tensor2D field = numkit::normal_tensor(9, kFieldDim, 1.0, rng);
  const Tensor2D w = numkit::normal_tensor(12, 3, 1.0, rng);
  std::vector<numkit::Parameter*> params;
  bb.visit([&](numkit::Parameter& p) { params.push_back(&p); });
  const auto res = numkit::grad_check(
      [&](numkit::Tape& t) { return numkit::sum(numkit::silu(numkit::matmul(bb(t.constant(field)), t.constant(w)))); }, params);
  EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_param;
}

// ---- AP50 ------------------------------------------------------------------------

TEST(Ap50, PerfectPredictionsGiveOne) {
  std::vector<std::vector<Detection>> gt{{box(10, 10, 8, 4, 0.2, 0), box(40, 40, 8, 4, 1.0, 1)},
                                         {box(20, 30, 10, 5, -0.4, 0)}};
  const auto r = ap50(gt, gt);
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_EQ(r.per_class.size(), 2u);
}

TEST(Ap50, NoPredictionsGiveZero) {
  std::vector<std::vector<Detection>> gt{{box(10, 10, 8, 4, 0.2, 0)}};
  std::vector<std::vector<Detection>> none(1);
  EXPECT_EQ(ap50(none, gt).mean, 0.0);
}

TEST(Ap50, HandBuiltPrCurve) {
  // Ranked: TP (P=1, R=1/2), FP (P=1/2, R=1/2), TP (P=2/3, R=1).
  // Envelope: 1 on (0, 1/2], 2/3 on (1/2, 1]  ->  1/2 + 1/3 = 5/6.
  std::vector<std::vector<Detection>> gt{{box(10, 10, 8, 4, 0, 0), box(40, 40, 8, 4, 0, 0)}};
  std::vector<std::vector<Detection>> pred{
      {box(40.2, 40, 8, 4, 0, 0, 0.7), box(10, 10, 8, 4, 0, 0, 0.9), box(70, 70, 8, 4, 0, 0, 0.8)}};
  EXPECT_NEAR(ap50(pred, gt).mean, 5.0 / 6.0, 1e-15);
}

TEST(Ap50, DuplicateMatchIsFalsePositive) {
  std::vector<std::vector<Detection>> gt{{box(10, 10, 8, 4, 0, 0)}};
  std::vector<std::vector<Detection>> pred{{box(10, 10, 8, 4, 0, 0, 0.9), box(10, 10, 8, 4, 0, 0, 0.8)}};
  EXPECT_EQ(ap50(pred, gt).mean, 1.0);
  std::vector<std::vector<Detection>> pred2{{box(30, 30, 8, 4, 0, 0, 0.95), box(10, 10, 8, 4, 0, 0, 0.9),
                                             box(10, 10, 8, 4, 0, 0, 0.8)}};
  EXPECT_NEAR(ap50(pred2, gt).mean, 0.5, 1e-15);
}

TEST(Ap50, ModeChangesTheMatch) {
  // A thin box at 0 vs the same box at 45 degrees: the OBBs barely overlap
  // but their enclosing boxes have IoU above 0.5.
  std::vector<std::vector<Detection>> gt{{box(50, 50, 40, 4, 0.0, 0)}};
  std::vector<std::vector<Detection>> pred{{box(50, 50, 40, 40, 0.0, 0, 0.9)}};
  EXPECT_EQ(ap50(pred, gt, geom::IouMode::Obb).mean, 0.0);
  const double hbb = geom::hbb_iou(gt[0][0].hbox, pred[0][0].hbox);
  EXPECT_LT(hbb, 0.5);
  std::vector<std::vector<Detection>> gt2{{box(50, 50, 40, 8, std::numbers::pi / 4, 0)}};
  std::vector<std::vector<Detection>> pred2{{box(50, 50, 34, 34, 0.0, 0, 0.9)}};
  EXPECT_LT(geom::rotated_iou(gt2[0][0].box, pred2[0][0].box), 0.5);
  EXPECT_GE(geom::hbb_iou(gt2[0][0].hbox, pred2[0][0].hbox), 0.5);
  EXPECT_EQ(ap50(pred2, gt2, geom::IouMode::Obb).mean, 0.0);
  EXPECT_EQ(ap50(pred2, gt2, geom::IouMode::Hbb).mean, 1.0);
}

TEST(Ap50, MatchesOracleRangeAndMonotone) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    // One class, one image, GT on a widely spaced lattice so a prediction
    // can match at most one GT, which makes TP flags easy to precompute.
    const std::size_t n_gt = 1 + static_cast<std::size_t>(u(rng) * 6);
    std::vector<Detection> gts;
    for (std::size_t g = 0; g < n_gt; ++g) gts.push_back(box(20 + 50.0 * g, 20, 10, 6, 0, 0));
    std::vector<Detection> preds;
    const std::size_t n_pred = static_cast<std::size_t>(u(rng) * 10);
    std::vector<std::pair<double, std::size_t>> ranked;  // (score, target gt or npos)
    for (std::size_t k = 0; k < n_pred; ++k) {
      const double score = 0.01 + 0.98 * u(rng);
      const std::size_t g = static_cast<std::size_t>(u(rng) * (n_gt + 2));
      if (g < n_gt) {
        preds.push_back(box(20 + 50.0 * g + u(rng), 20, 10, 6, 0, 0, score));
      } else {
        preds.push_back(box(20 + 50.0 * g, 200, 10, 6, 0, 0, score));
      }
      ranked.push_back({score, g});
    }
    std::vector<std::size_t> order(n_pred);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ranked[a].first > ranked[b].first; });
    std::vector<bool> seen(n_gt, false), tp;
    for (auto k : order) {
      const auto g = ranked[k].second;
      tp.push_back(g < n_gt && !seen[g]);
      if (g < n_gt) seen[g] = true;
    }
    std::vector<std::vector<Detection>> P{preds}, G{gts};
    const double ap = ap50(P, G).mean;
    EXPECT_NEAR(ap, ap_oracle(tp, n_gt), 1e-12);
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);

    // Prepend a correct detection of a missed GT, scored above everything.
    for (std::size_t g = 0; g < n_gt; ++g) {
      if (seen[g]) continue;
      auto P2 = P;
      P2[0].insert(P2[0].begin(), box(20 + 50.0 * g, 20, 10, 6, 0, 0, 0.995));
      EXPECT_GE(ap50(P2, G).mean, ap - 1e-12);
    }
  }
}

// ---- training ----------------------------------------------------------------------

TEST(Train, ZeroIterationsLeaveInitUnchanged) {
  auto cfg = tiny_config();
  cfg.iterations = 0;
  const auto data = make_toy_data(cfg);
  const auto init = flat_params(*std::make_unique<ToyModel>(make_model(cfg)));
  auto r = run_toy(cfg, data, nullptr);
  EXPECT_EQ(flat_params(r.model), init);
}

TEST(Train, FirstLossEqualsRecomputedLoss) {
  const auto cfg = tiny_config();
  const auto data = make_toy_data(cfg);
  const auto tc = train_config(cfg);

  // Recompute the first L_det from scratch with the same random draws.
  ToyModel fresh = make_model(cfg);
  pseudo::MixSampler mix(data.train.size(), 0, tc.seed ^ 0x9e3779b97f4a7c15ULL, tc.pseudo_rate);
  std::size_t idx = 0;
  do {
    idx = mix.next().second;
  } while (data.train[idx].gt.empty());
  std::vector<CategoryId> pos;
  for (const auto& g : data.train[idx].gt) pos.push_back(g.category);
  std::mt19937_64 rng(tc.seed);
  const auto batch = prompt::sample_training_prompts(pos, data.dictionary, tc.sampling, rng);
  numkit::Tape tape;
  const double expected = fresh.loss(tape, data.train[idx], batch, rng).total.value().item();

  ToyModel model = make_model(cfg);
  std::vector<TrainImage> lab;
  for (const auto& s : data.train) lab.push_back(labeled_image(s));
  auto one = tc;
  one.iterations = 1;
  const auto log = train_toy(model, lab, {}, data.dictionary, one);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_NEAR(log[0].total, expected, 1e-12 * std::abs(expected));
  EXPECT_NEAR(log[0].total, log[0].alignment + log[0].fusion, 1e-12 * std::abs(expected));
}

TEST(Train, BitReproducible) {
  const auto cfg = tiny_config();
  const auto data = make_toy_data(cfg);
  std::ostringstream m1, m2;
  auto a = run_toy(cfg, data, &m1);
  auto b = run_toy(cfg, data, &m2);
  EXPECT_EQ(flat_params(a.model), flat_params(b.model));
  const auto strip = [](const std::string& s) { return s.substr(0, s.rfind("\"seconds\"")); };
  EXPECT_EQ(strip(m1.str()), strip(m2.str()));
  EXPECT_EQ(a.obb.mean, b.obb.mean);
  EXPECT_NE(flat_params(a.model), flat_params(*std::make_unique<ToyModel>(make_model(cfg))));
}

TEST(Train, FrozenPhaseKeepsBackbone) {
  auto cfg = tiny_config();
  cfg.frozen_iterations = cfg.iterations;
  const auto data = make_toy_data(cfg);
  ToyModel init = make_model(cfg);
  auto r = run_toy(cfg, data, nullptr);
  EXPECT_EQ(r.model.backbone.fc1.weight.value.values()[0], init.backbone.fc1.weight.value.values()[0]);
  EXPECT_EQ(orsd::testing::max_abs_diff(r.model.backbone.fc2.weight.value, init.backbone.fc2.weight.value), 0.0);
  EXPECT_GT(orsd::testing::max_abs_diff(r.model.heads.alignment.dense.reg.fc1.weight.value,
                                        init.heads.alignment.dense.reg.fc1.weight.value),
            0.0);
}

TEST(Train, DivergenceAborts) {
  const auto cfg = tiny_config();
  const auto data = make_toy_data(cfg);
  ToyModel model = make_model(cfg);
  model.backbone.fc1.weight.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrainImage> lab;
  for (const auto& s : data.train) lab.push_back(labeled_image(s));
  EXPECT_THROW(train_toy(model, lab, {}, data.dictionary, train_config(cfg)), NumericError);
}

TEST(Train, MetricsLog) {
  auto cfg = tiny_config();
  cfg.eval_every = 2;
  const auto data = make_toy_data(cfg);
  std::ostringstream m;
  run_toy(cfg, data, &m);
  std::istringstream in(m.str());
  std::string line;
  std::size_t n = 0, with_ap = 0;
  nlohmann::json last;
  while (std::getline(in, line)) {
    last = nlohmann::json::parse(line);
    ++n;
    with_ap += last.contains("ap50_obb");
  }
  EXPECT_EQ(n, cfg.iterations + 1);
  EXPECT_EQ(with_ap, 3u);  // iterations 2 and 4, then the final line
  EXPECT_TRUE(last["final"].get<bool>());
}

// ---- file formats --------------------------------------------------------------------

TEST(Io, DictionaryRoundTripIsExact) {
  std::mt19937_64 rng(5);
  Vocabulary vocab;
  vocab.intern("ship");
  vocab.intern("small vehicle");
  vocab.intern("plane");
  auto dict = make_text_dictionary(3, 4, 32, 48, 0.3, rng);
  std::normal_distribution<double> n(0, 1e-3);
  std::vector<double> img(48);
  for (double& x : img) x = n(rng);
  dict.add({1, prompt::Modality::Image, 9, img, std::nullopt});
  std::ostringstream out;
  io::write_dictionary(out, dict, vocab);
  EXPECT_EQ(out.str().rfind("ORSD-EMB 1 32 48\n", 0), 0u);
  Vocabulary v2;
  std::istringstream in(out.str());
  const auto back = io::read_dictionary(in, v2);
  for (auto m : {prompt::Modality::Text, prompt::Modality::Image}) {
    for (CategoryId c : dict.categories(m)) {
      const CategoryId c2 = v2.id(vocab.name(c));
      const auto a = dict.prompts(c, m);
      const auto b = back.prompts(c2, m);
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k]->prompt_id, b[k]->prompt_id);
        EXPECT_EQ(a[k]->raw, b[k]->raw);
      }
    }
  }
}

TEST(Io, DictionaryErrors) {
  const auto parse = [](const std::string& text) {
    Vocabulary v;
    std::istringstream in(text);
    return io::read_dictionary(in, v);
  };
  EXPECT_THROW(parse(""), DataError);
  EXPECT_THROW(parse("ORSD-EMB 2 2 2\n"), DataError);
  EXPECT_THROW(parse("XXX 1 2 2\n"), DataError);
  EXPECT_THROW(parse("ORSD-EMB 1 2 2\nship\ttext\t0\t1.0\n"), DataError);
  EXPECT_THROW(parse("ORSD-EMB 1 2 2\nship\ttext\t0\t1.0 abc\n"), DataError);
  EXPECT_THROW(parse("ORSD-EMB 1 2 2\nship\tvideo\t0\t1.0 2.0\n"), DataError);
  EXPECT_THROW(parse("ORSD-EMB 1 2 2\nship\ttext\t1.0 2.0\n"), DataError);
  EXPECT_THROW(parse("ORSD-EMB 1 2 2\nship\ttext\t0\t1 2\nship\ttext\t0\t3 4\n"), DataError);
  EXPECT_NO_THROW(parse("ORSD-EMB 1 2 2\nship\ttext\t0\t1 2\n\nship\timage\t0\t-1e-3 4\n"));
}

TEST(Io, AnnotationsRoundTrip) {
  Vocabulary vocab;
  std::vector<io::ImageRecord> images(2);
  images[0].image_id = "a";
  images[0].width = 640;
  images[0].height = 480;
  images[0].objects = {geom::make_detection(OrientedBox(10.5, 20.25, 30, 8, 0.3), vocab.intern("ship"), 0.75,
                                            geom::Source::ModelPrediction)};
  images[0].prompt_set = {2};
  images[1].image_id = "b";
  images[1].width = 64;
  images[1].height = 64;
  std::ostringstream out;
  io::write_annotations(out, images, vocab, true);
  Vocabulary v2;
  std::istringstream in(out.str());
  const auto back = io::read_annotations(in, v2);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].image_id, "a");
  EXPECT_EQ(back[0].height, 480);
  ASSERT_EQ(back[0].objects.size(), 1u);
  EXPECT_EQ(back[0].objects[0].box, images[0].objects[0].box);
  EXPECT_EQ(back[0].objects[0].score, 0.75);
  EXPECT_EQ(back[0].prompt_set[0], 2u);
  EXPECT_TRUE(back[1].objects.empty());
}

TEST(Io, AnnotationErrors) {
  const auto parse = [](const std::string& text) {
    Vocabulary v;
    std::istringstream in(text);
    return io::read_annotations(in, v);
  };
  EXPECT_THROW(parse("{not json}\n"), DataError);
  EXPECT_THROW(parse(R"({"image_id":"a","width":10,"height":10})"), DataError);
  EXPECT_THROW(parse(R"({"image_id":"a","width":0,"height":10,"objects":[]})"), DataError);
  EXPECT_THROW(parse(R"({"image_id":"a","width":10,"height":10,"objects":[{"cx":1,"cy":1,"w":0,"h":1,"theta_rad":0,"category":"x"}]})"),
               DataError);
  EXPECT_THROW(parse(R"({"image_id":"a","width":10,"height":10,"objects":[{"cx":"1","cy":1,"w":2,"h":1,"theta_rad":0,"category":"x"}]})"),
               DataError);
}

TEST(Io, CategoryTreeForms) {
  Vocabulary v;
  std::istringstream obj(R"({"name":"root","children":[{"name":"ship","children":[{"name":"tanker"}]},{"name":"plane"}]})");
  const auto t = io::read_category_tree(obj, v);
  EXPECT_EQ(t.top_level(v.id("tanker")), v.id("ship"));
  EXPECT_EQ(t.top_level(v.id("plane")), v.id("plane"));
  EXPECT_FALSE(v.contains("root"));

  Vocabulary v2;
  std::istringstream arr(R"([{"name":"ship","children":[{"name":"tanker"}]}])");
  const auto t2 = io::read_category_tree(arr, v2);
  EXPECT_EQ(t2.top_level(v2.id("tanker")), v2.id("ship"));

  Vocabulary v3;
  std::istringstream dup(R"([{"name":"ship","children":[{"name":"ship"}]}])");
  EXPECT_THROW(io::read_category_tree(dup, v3), DataError);
  std::istringstream bad(R"({"name":"root"})");
  EXPECT_THROW(io::read_category_tree(bad, v3), DataError);
}

TEST(Io, Similarities) {
  Vocabulary v;
  std::istringstream in(
      "{\"image_id\":\"a\",\"det_index\":3,\"category\":\"ship\",\"cosine\":0.5}\n"
      "{\"image_id\":\"b\",\"det_index\":0,\"category\":\"ship\",\"cosine\":-0.25}\n");
  const auto s = io::read_similarities(in, v);
  EXPECT_EQ(s.at("a").get(3, v.id("ship")), 0.5);
  EXPECT_EQ(s.at("b").get(0, v.id("ship")), -0.25);
  EXPECT_FALSE(s.at("a").get(0, v.id("ship")).has_value());
  std::istringstream bad("{\"image_id\":\"a\",\"det_index\":3,\"category\":\"ship\",\"cosine\":1.5}\n");
  EXPECT_THROW(io::read_similarities(bad, v), DataError);
  std::istringstream neg("{\"image_id\":\"a\",\"det_index\":-1,\"category\":\"ship\",\"cosine\":0.5}\n");
  EXPECT_THROW(io::read_similarities(neg, v), DataError);
}

TEST(Io, CheckpointRoundTripAndLayout) {
  auto cfg = tiny_config();
  ToyModel a = make_model(cfg);
  cfg.seed = 8;
  ToyModel b = make_model(cfg);
  std::ostringstream out(std::ios::binary);
  io::write_checkpoint(out, a.parameters());
  const std::string bytes = out.str();
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), "ORSDCKPT");
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x01\x00\x00\x00", 4));
  const auto count = a.parameters().size();
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), count & 0xff);
  EXPECT_EQ(static_cast<unsigned char>(bytes[13]), (count >> 8) & 0xff);

  // First array: name length, name, rows, cols, then little-endian doubles.
  const auto* p0 = a.parameters()[0];
  std::size_t off = 20;
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), p0->name.size());
  EXPECT_EQ(bytes.substr(off, p0->name.size()), p0->name);
  off += p0->name.size();
  EXPECT_EQ(static_cast<unsigned char>(bytes[off]), p0->value.rows());
  off += 16;
  std::uint64_t bits = 0;
  for (int k = 7; k >= 0; --k) bits = (bits << 8) | static_cast<unsigned char>(bytes[off + k]);
  EXPECT_EQ(std::bit_cast<double>(bits), p0->value.values()[0]);

  std::istringstream in(bytes);
  io::load_into(io::read_checkpoint(in), b.parameters());
  EXPECT_EQ(flat_params(a), flat_params(b));
}

TEST(Io, CheckpointErrors) {
  auto cfg = tiny_config();
  ToyModel a = make_model(cfg);
  std::ostringstream out;
  io::write_checkpoint(out, a.parameters());
  const std::string bytes = out.str();

  std::istringstream bad_magic("ORSDCKPX" + bytes.substr(8));
  EXPECT_THROW(io::read_checkpoint(bad_magic), DataError);
  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(io::read_checkpoint(truncated), DataError);
  std::string v2 = bytes;
  v2[8] = 2;
  std::istringstream wrong_version(v2);
  EXPECT_THROW(io::read_checkpoint(wrong_version), DataError);

  cfg.model_dim = 24;
  ToyModel other = make_model(cfg);
  std::istringstream in(bytes);
  EXPECT_THROW(io::load_into(io::read_checkpoint(in), other.parameters()), DataError);
  std::istringstream in2(bytes);
  auto arrays = io::read_checkpoint(in2);
  arrays.pop_back();
  EXPECT_THROW(io::load_into(arrays, a.parameters()), DataError);
}

// ---- run configuration -----------------------------------------------------------------

TEST(Config, DefaultsAndParsing) {
  unsetenv("ORSD_SEED");
  const auto d = parse_run_config(nlohmann::json::object());
  EXPECT_EQ(d.pseudo.score_thresh, 0.3);
  EXPECT_EQ(d.pseudo.sim_thresh, 0.24);
  EXPECT_EQ(d.pseudo.min_side, 16.0);
  EXPECT_EQ(d.pseudo.overlap_iou, 0.5);
  EXPECT_EQ(d.pseudo.nms_iou, 0.5);
  EXPECT_EQ(d.prompt_min, 3u);
  EXPECT_EQ(d.prompt_max, 7u);
  EXPECT_EQ(d.tau, 0.1);
  EXPECT_EQ(d.lr, 1e-2);
  EXPECT_EQ(d.momentum, 0.9);

  const auto c = parse_run_config(nlohmann::json::parse(R"({"seed":12,"modality":"image","iterations":3})"));
  EXPECT_EQ(c.seed, 12u);
  EXPECT_EQ(c.modality, prompt::Modality::Image);
  EXPECT_EQ(c.iterations, 3u);
}

TEST(Config, SeedFromEnvironment) {
  setenv("ORSD_SEED", "4242", 1);
  EXPECT_EQ(parse_run_config(nlohmann::json::parse(R"({"seed":12})")).seed, 4242u);
  setenv("ORSD_SEED", "12x", 1);
  EXPECT_THROW(parse_run_config(nlohmann::json::object()), DataError);
  setenv("ORSD_SEED", "-3", 1);
  EXPECT_THROW(parse_run_config(nlohmann::json::object()), DataError);
  unsetenv("ORSD_SEED");
  EXPECT_EQ(parse_run_config(nlohmann::json::parse(R"({"seed":12})")).seed, 12u);
}

TEST(Config, RejectsInvalidValues) {
  unsetenv("ORSD_SEED");
  for (const char* text : {R"({"score_thresh":1.5})", R"({"sim_thresh":-2})", R"({"min_side":-1})",
                           R"({"overlap_iou":2})", R"({"nms_iou":-0.1})", R"({"prompt_min":8})",
                           R"({"prompt_min":0})", R"({"tau":0})", R"({"lr":-1})", R"({"momentum":1})",
                           R"({"frozen_iterations":5,"iterations":4})", R"({"model_dim":12})",
                           R"({"modality":"video"})", R"({"lr":"fast"})", R"({"learning_rate":0.1})", "[]"}) {
    EXPECT_THROW(parse_run_config(nlohmann::json::parse(text)), DataError) << text;
  }
  std::istringstream junk("{");
  EXPECT_THROW(read_run_config(junk), DataError);
}

// ---- pseudo-label fixture ---------------------------------------------------------------

TEST(PseudoLabelFixture, MatchesHandDerivedRecordsAtAnyParallelism) {
  const std::string expected = slurp(fixture("expected.jsonl"));
  ASSERT_FALSE(expected.empty());
  for (std::size_t threads : {1u, 2u, 3u, 5u, 8u}) {
    for (int rep = 0; rep < 2; ++rep) {
      Vocabulary vocab;
      auto t = io::open_in(fixture("tree.json"));
      const auto tree = io::read_category_tree(t, vocab);
      auto g = io::open_in(fixture("gt.jsonl"));
      const auto gt = io::read_annotations(g, vocab);
      auto p = io::open_in(fixture("pred.jsonl"));
      const auto pred = io::read_annotations(p, vocab);
      auto s = io::open_in(fixture("sims.jsonl"));
      auto sims = io::read_similarities(s, vocab);
      const auto records = pseudo::pseudo_label(io::pipeline_inputs(gt, pred, sims), tree, {}, threads);
      std::ostringstream out;
      io::write_records(out, records, vocab);
      EXPECT_EQ(out.str(), expected) << "threads=" << threads;
    }
  }
}
