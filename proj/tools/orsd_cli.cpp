// orsd: command-line front end to the geometry, prompt, training, evaluation
// and pseudo-labeling code.

#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"
#include "orsd/harness/config.hpp"
#include "orsd/harness/eval.hpp"
#include "orsd/harness/io.hpp"
#include "orsd/harness/run.hpp"
#include "orsd/promptdict.hpp"
#include "orsd/pseudolabel.hpp"
#include "orsd/vocabulary.hpp"

namespace {

using namespace orsd;
using Json = nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

geom::OrientedBox parse_box(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    char* end = nullptr;
    const double x = std::strtod(tok.c_str(), &end);
    if (tok.empty() || *end != '\0') throw UsageError("bad box component '" + tok + "'");
    v.push_back(x);
  }
  if (v.size() != 5) throw UsageError("a box is cx,cy,w,h,theta_rad");
  try {
    return geom::OrientedBox(v[0], v[1], v[2], v[3], v[4]);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::ostream& output(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file = io::open_out(path);
  return file;
}

// ---- geom-check ---------------------------------------------------------------

struct GeomCheckArgs {
  std::string a;
  std::string b;
};

int geom_check(const GeomCheckArgs& args) {
  if (args.a.empty() != args.b.empty()) throw UsageError("--a and --b go together");
  Json j;
  if (!args.a.empty()) {
    const auto a = parse_box(args.a);
    const auto b = parse_box(args.b);
    j["iou_obb"] = geom::rotated_iou(a, b);
    j["iou_hbb"] = geom::hbb_iou(geom::obb_to_hbb(a), geom::obb_to_hbb(b));
    std::cout << j.dump() << '\n';
    return kExitOk;
  }
  struct Case {
    const char* name;
    double got;
    double want;
    double tol;
  };
  const double pi = std::numbers::pi;
  const geom::OrientedBox unit(0, 0, 1, 1, 0);
  const Case cases[] = {
      {"identical", geom::rotated_iou(unit, unit), 1.0, 1e-9},
      {"square_45deg", geom::rotated_iou(unit, geom::OrientedBox(0, 0, 1, 1, pi / 4)), 0.70710678, 5e-3},
      {"half_shift", geom::rotated_iou(geom::OrientedBox(0, 0, 2, 2, 0), geom::OrientedBox(1, 0, 2, 2, 0)), 1.0 / 3.0,
       1e-9},
      {"disjoint", geom::rotated_iou(unit, geom::OrientedBox(5, 5, 1, 1, 0.3)), 0.0, 0.0},
      {"hbb_of_45deg_square", geom::obb_to_hbb(geom::OrientedBox(0, 0, 2, 2, pi / 4)).xmax, std::sqrt(2.0), 1e-12},
  };
  bool ok = true;
  j["checks"] = Json::array();
  for (const auto& c : cases) {
    const bool pass = std::abs(c.got - c.want) <= c.tol;
    ok = ok && pass;
    j["checks"].push_back({{"name", c.name}, {"value", c.got}, {"expected", c.want}, {"pass", pass}});
  }
  j["pass"] = ok;
  std::cout << j.dump(2) << '\n';
  return ok ? kExitOk : kExitNumeric;
}

// ---- cluster ------------------------------------------------------------------

struct ClusterArgs {
  std::size_t k = 0;
  std::string input;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t text_dim = 0;
};

// Input: one embedding per line, whitespace-separated. Output: a dictionary
// with one image prompt per cluster, named cluster-0 .. cluster-(k-1).
int cluster(const ClusterArgs& args) {
  auto in = io::open_in(args.input);
  std::vector<std::vector<double>> points;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<double> v;
    std::string tok;
    while (ss >> tok) {
      char* end = nullptr;
      const double x = std::strtod(tok.c_str(), &end);
      if (*end != '\0' || !std::isfinite(x)) {
        throw DataError(args.input + " line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
      v.push_back(x);
    }
    if (!v.empty()) points.push_back(std::move(v));
  }
  if (points.empty()) throw DataError(args.input + ": no embeddings");
  std::mt19937_64 rng(args.seed);
  const auto prompts = prompt::cluster_prompts(points, args.k, rng);
  Vocabulary vocab;
  prompt::PromptDictionary dict(args.text_dim, points.front().size());
  for (std::size_t c = 0; c < prompts.size(); ++c) {
    auto e = prompts[c];
    e.category = vocab.intern("cluster-" + std::to_string(c));
    dict.add(std::move(e));
  }
  std::ofstream file;
  io::write_dictionary(output(args.out, file), dict, vocab);
  return kExitOk;
}

// ---- sample-prompts -------------------------------------------------------------

struct SampleArgs {
  std::string dict;
  std::string categories;
  std::string modality = "text";
  std::uint64_t seed = 0;
  std::size_t inference_k = 0;
  std::size_t negatives = 20;
};

int sample_prompts(const SampleArgs& args) {
  Vocabulary vocab;
  auto in = io::open_in(args.dict);
  const auto dict = io::read_dictionary(in, vocab);
  std::vector<CategoryId> cats;
  for (const auto& n : split_list(args.categories)) cats.push_back(vocab.id(n));
  if (cats.empty()) throw UsageError("--categories needs at least one name");
  std::mt19937_64 rng(args.seed);
  prompt::PromptBatch batch;
  if (args.inference_k > 0) {
    batch = prompt::sample_inference_prompts(cats, dict, prompt::parse_modality(args.modality), args.inference_k, rng);
  } else {
    if (args.modality != "text") throw UsageError("training batches draw their modality; drop --modality");
    prompt::SamplingOptions opt;
    opt.n_negatives = args.negatives;
    batch = prompt::sample_training_prompts(cats, dict, opt, rng);
  }
  Json j;
  j["modality"] = prompt::to_string(batch.modality);
  j["positives"] = Json::array();
  for (auto c : batch.positives) j["positives"].push_back(vocab.name(c));
  j["negatives"] = Json::array();
  for (auto c : batch.negatives) j["negatives"].push_back(vocab.name(c));
  j["prompts"] = Json::array();
  for (std::size_t i = 0; i < batch.prompts.size(); ++i) {
    j["prompts"].push_back({{"category", vocab.name(batch.prompts[i].category)},
                            {"prompt_id", batch.prompts[i].prompt_id},
                            {"label", vocab.name(batch.labels[i])}});
  }
  std::cout << j.dump() << '\n';
  return kExitOk;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::size_t threads = 1;
};

int train(const TrainArgs& args) {
  auto in = io::open_in(args.config);
  const auto cfg = harness::read_run_config(in);
  const auto data = harness::make_toy_data(cfg, args.threads);
  auto metrics = io::open_out(cfg.metrics);
  auto result = harness::run_toy(cfg, data, &metrics, args.threads);
  auto ckpt = io::open_out(cfg.checkpoint, true);
  io::write_checkpoint(ckpt, result.model.parameters());
  if (!ckpt) throw DataError("failed writing checkpoint '" + cfg.checkpoint + "'");
  Json j;
  j["seed"] = cfg.seed;
  j["iterations"] = cfg.iterations;
  j["ap50_obb"] = result.obb.mean;
  j["ap50_hbb"] = result.hbb.mean;
  j["checkpoint"] = cfg.checkpoint;
  j["metrics"] = cfg.metrics;
  std::cout << j.dump() << '\n';
  return kExitOk;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
  std::string mode = "obb";
  std::string pred;
  std::string gt;
  double iou = 0.5;
};

int eval(const EvalArgs& args) {
  Vocabulary vocab;
  auto gin = io::open_in(args.gt);
  const auto gt = io::read_annotations(gin, vocab);
  auto pin = io::open_in(args.pred);
  const auto pred = io::read_annotations(pin, vocab);
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<geom::Detection>> gts, preds(gt.size());
  for (const auto& r : gt) {
    if (!index.emplace(r.image_id, gts.size()).second) throw DataError("duplicate GT image '" + r.image_id + "'");
    gts.push_back(r.objects);
  }
  for (const auto& r : pred) {
    auto it = index.find(r.image_id);
    if (it == index.end()) throw DataError("predictions for unknown image '" + r.image_id + "'");
    auto& dst = preds[it->second];
    dst.insert(dst.end(), r.objects.begin(), r.objects.end());
  }
  const auto res = harness::ap50(preds, gts, args.mode == "hbb" ? geom::IouMode::Hbb : geom::IouMode::Obb, args.iou);
  Json j;
  j["mode"] = args.mode;
  j["per_class"] = Json::object();
  for (const auto& [c, ap] : res.per_class) j["per_class"][vocab.name(c)] = ap;
  j["mean"] = res.mean;
  std::cout << j.dump() << '\n';
  return kExitOk;
}

// ---- pseudo-label -------------------------------------------------------------

struct PseudoArgs {
  std::string gt;
  std::string pred;
  std::string tree;
  std::string sims;
  std::string out;
  pseudo::Options opt;
  std::size_t threads = 1;
};

int pseudo_label(const PseudoArgs& args) {
  harness::RunConfig check;
  check.pseudo = args.opt;
  try {
    check.validate();
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  Vocabulary vocab;
  auto tin = io::open_in(args.tree);
  const auto tree = io::read_category_tree(tin, vocab);
  auto gin = io::open_in(args.gt);
  const auto gt = io::read_annotations(gin, vocab);
  auto pin = io::open_in(args.pred);
  const auto pred = io::read_annotations(pin, vocab);
  std::map<std::string, pseudo::SimilarityTable> sims;
  if (!args.sims.empty()) {
    auto sin = io::open_in(args.sims);
    sims = io::read_similarities(sin, vocab);
  }
  const auto inputs = io::pipeline_inputs(gt, pred, std::move(sims));
  const auto records = pseudo::pseudo_label(inputs, tree, args.opt, args.threads);
  std::ofstream file;
  io::write_records(output(args.out, file), records, vocab);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-prompt oriented detection toolkit"};
  app.require_subcommand(1);

  GeomCheckArgs ga;
  auto* g = app.add_subcommand("geom-check", "Rotated IoU self-check, or the IoU of two boxes");
  g->add_option("--a", ga.a, "Box cx,cy,w,h,theta_rad");
  g->add_option("--b", ga.b, "Box cx,cy,w,h,theta_rad");

  ClusterArgs ca;
  auto* c = app.add_subcommand("cluster", "k-means pseudo-category prompts from unlabeled embeddings");
  c->add_option("--k", ca.k, "Number of clusters")->required()->check(CLI::PositiveNumber);
  c->add_option("--input", ca.input, "One embedding per line")->required();
  c->add_option("--out", ca.out, "Dictionary output (default stdout)");
  c->add_option("--seed", ca.seed, "Seed");
  c->add_option("--text-dim", ca.text_dim, "Text dimension recorded in the dictionary header");

  SampleArgs sa;
  auto* s = app.add_subcommand("sample-prompts", "Draw a prompt batch from a dictionary");
  s->add_option("--dict", sa.dict, "Embedding dictionary")->required();
  s->add_option("--categories", sa.categories, "Comma-separated positive categories")->required();
  s->add_option("--seed", sa.seed, "Seed")->required();
  s->add_option("--modality", sa.modality, "text or image (inference batches)")
      ->check(CLI::IsMember({"text", "image"}));
  s->add_option("--inference", sa.inference_k, "Inference batch with this many prompts per category");
  s->add_option("--negatives", sa.negatives, "Negative categories in a training batch");

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train the toy detector on synthetic scenes");
  t->add_option("--config", ta.config, "Run configuration JSON")->required();
  t->add_option("--threads", ta.threads, "Worker threads for data generation and evaluation")
      ->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "AP50 of detections against ground truth");
  e->add_option("--mode", ea.mode, "obb or hbb")->check(CLI::IsMember({"obb", "hbb"}));
  e->add_option("--pred", ea.pred, "Detections JSONL")->required();
  e->add_option("--gt", ea.gt, "Ground truth JSONL")->required();
  e->add_option("--iou", ea.iou, "IoU threshold")->check(CLI::Range(0.0, 1.0));

  PseudoArgs pa;
  auto* p = app.add_subcommand("pseudo-label", "Filter detections into pseudo-label records");
  p->add_option("--gt", pa.gt, "Ground truth JSONL")->required();
  p->add_option("--pred", pa.pred, "Detections JSONL (with score and prompt_set)")->required();
  p->add_option("--tree", pa.tree, "Category tree JSON")->required();
  p->add_option("--sims", pa.sims, "Similarity JSONL");
  p->add_option("--out", pa.out, "Output JSONL (default stdout)");
  p->add_option("--score-thresh", pa.opt.score_thresh, "Detection score threshold")->capture_default_str();
  p->add_option("--sim-thresh", pa.opt.sim_thresh, "Similarity threshold")->capture_default_str();
  p->add_option("--min-side", pa.opt.min_side, "Boxes with a side at most this skip the similarity check")->capture_default_str();
  p->add_option("--overlap-iou", pa.opt.overlap_iou, "IoU against GT for hard negatives")->capture_default_str();
  p->add_option("--nms-iou", pa.opt.nms_iou, "NMS IoU when merging prompt sets")->capture_default_str();
  p->add_option("--threads", pa.threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*g) return geom_check(ga);
    if (*c) return cluster(ca);
    if (*s) return sample_prompts(sa);
    if (*t) return train(ta);
    if (*e) return eval(ea);
    if (*p) return pseudo_label(pa);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
