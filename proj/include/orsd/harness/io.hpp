#pragma once

// File formats: embedding dictionaries, annotation / detection JSON-lines,
// category trees, similarity tables, pseudo-label records and checkpoints.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"
#include "orsd/numkit/tape.hpp"
#include "orsd/promptdict.hpp"
#include "orsd/pseudolabel.hpp"
#include "orsd/vocabulary.hpp"

namespace orsd::io {

using Json = nlohmann::ordered_json;

inline std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) throw DataError("cannot open '" + path + "' for reading");
  return f;
}

inline std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  return f;
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// ---- embedding dictionary -------------------------------------------------

inline constexpr const char* kDictMagic = "ORSD-EMB";

inline prompt::PromptDictionary read_dictionary(std::istream& in, Vocabulary& vocab) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("dictionary: missing header");
  std::istringstream hdr(line);
  std::string magic;
  int version = 0;
  std::size_t text_dim = 0, image_dim = 0;
  if (!(hdr >> magic >> version >> text_dim >> image_dim) || magic != kDictMagic) {
    throw DataError("dictionary: bad header '" + line + "'");
  }
  if (version != 1) throw DataError("dictionary: unsupported version " + std::to_string(version));
  prompt::PromptDictionary dict(text_dim, image_dim);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (int k = 0; k < 3; ++k) {
      const auto tab = line.find('\t', start);
      if (tab == std::string::npos) throw DataError("dictionary line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
      f.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    prompt::PromptEmbedding e;
    e.category = vocab.intern(f[0]);
    e.modality = prompt::parse_modality(f[1]);
    try {
      std::size_t used = 0;
      e.prompt_id = std::stoi(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError("dictionary line " + std::to_string(lineno) + ": bad prompt id '" + f[2] + "'");
    }
    std::istringstream vals(line.substr(start));
    std::string tok;
    while (vals >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0') {
        throw DataError("dictionary line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
      e.raw.push_back(v);
    }
    try {
      dict.add(std::move(e));
    } catch (const DataError& err) {
      throw DataError("dictionary line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  return dict;
}

inline void write_dictionary(std::ostream& out, const prompt::PromptDictionary& dict, const Vocabulary& vocab) {
  out << kDictMagic << " 1 " << dict.text_dim() << ' ' << dict.image_dim() << '\n';
  for (auto m : {prompt::Modality::Text, prompt::Modality::Image}) {
    for (CategoryId c : dict.categories(m)) {
      for (const auto& e : dict.prompts(c, m)) {
        out << vocab.name(c) << '\t' << prompt::to_string(m) << '\t' << e->prompt_id << '\t';
        for (std::size_t i = 0; i < e->raw.size(); ++i) out << (i ? " " : "") << format_double(e->raw[i]);
        out << '\n';
      }
    }
  }
}

// ---- annotations / detections --------------------------------------------

struct ImageRecord {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<geom::Detection> objects;
  std::vector<std::size_t> prompt_set;  // parallel to objects; 0 when absent
};

template <class T>
T get_field(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError(where + ": field '" + key + "' has the wrong type");
  }
}

inline Json parse_json(const std::string& text, const std::string& where) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": invalid JSON (" + e.what() + ")");
  }
}

// One JSON object per line. Objects may carry "score" and "prompt_set"
// (detection files); without them they are ground truth with score 1.
inline std::vector<ImageRecord> read_annotations(std::istream& in, Vocabulary& vocab) {
  std::vector<ImageRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "annotations line " + std::to_string(lineno);
    const Json j = parse_json(line, where);
    ImageRecord r;
    r.image_id = get_field<std::string>(j, "image_id", where);
    r.width = get_field<int>(j, "width", where);
    r.height = get_field<int>(j, "height", where);
    if (r.width <= 0 || r.height <= 0) throw DataError(where + ": image size must be positive");
    if (!j.contains("objects") || !j["objects"].is_array()) throw DataError(where + ": 'objects' must be an array");
    for (const auto& o : j["objects"]) {
      const double score = o.contains("score") ? get_field<double>(o, "score", where) : 1.0;
      const bool is_det = o.contains("score");
      try {
        const geom::OrientedBox b(get_field<double>(o, "cx", where), get_field<double>(o, "cy", where),
                                  get_field<double>(o, "w", where), get_field<double>(o, "h", where),
                                  get_field<double>(o, "theta_rad", where));
        r.objects.push_back(geom::make_detection(b, vocab.intern(get_field<std::string>(o, "category", where)), score,
                                                 is_det ? geom::Source::ModelPrediction : geom::Source::GroundTruth));
      } catch (const DataError&) {
        throw;
      } catch (const Error& e) {
        throw DataError(where + ": " + e.what());
      }
      r.prompt_set.push_back(o.contains("prompt_set") ? get_field<std::size_t>(o, "prompt_set", where) : 0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline Json box_json(const geom::Detection& d, const Vocabulary& vocab) {
  Json o;
  o["cx"] = d.box.cx();
  o["cy"] = d.box.cy();
  o["w"] = d.box.w();
  o["h"] = d.box.h();
  o["theta_rad"] = d.box.theta();
  o["category"] = vocab.name(d.category);
  return o;
}

inline void write_annotations(std::ostream& out, const std::vector<ImageRecord>& images, const Vocabulary& vocab,
                              bool with_scores) {
  for (const auto& r : images) {
    Json j;
    j["image_id"] = r.image_id;
    j["width"] = r.width;
    j["height"] = r.height;
    j["objects"] = Json::array();
    for (std::size_t k = 0; k < r.objects.size(); ++k) {
      Json o = box_json(r.objects[k], vocab);
      if (with_scores) {
        o["score"] = r.objects[k].score;
        if (k < r.prompt_set.size()) o["prompt_set"] = r.prompt_set[k];
      }
      j["objects"].push_back(o);
    }
    out << j.dump() << '\n';
  }
}

// ---- category tree ---------------------------------------------------------

namespace detail {

inline void add_subtree(const Json& node, std::optional<CategoryId> parent, pseudo::CategoryTree& tree,
                        Vocabulary& vocab, int depth) {
  if (depth > 256) throw DataError("category tree: nesting too deep");
  const std::string name = get_field<std::string>(node, "name", "category tree");
  const CategoryId id = vocab.intern(name);
  tree.add(id, parent);
  if (node.contains("children")) {
    if (!node["children"].is_array()) throw DataError("category tree: 'children' of '" + name + "' must be an array");
    for (const auto& c : node["children"]) add_subtree(c, id, tree, vocab, depth + 1);
  }
}

}  // namespace detail

// The top-level object is the virtual root; its children are the forest.
// A bare array of nodes is accepted as the forest too.
inline pseudo::CategoryTree read_category_tree(std::istream& in, Vocabulary& vocab) {
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const Json j = parse_json(text, "category tree");
  const Json* forest = &j;
  if (j.is_object()) {
    if (!j.contains("children") || !j["children"].is_array()) {
      throw DataError("category tree: root needs a 'children' array");
    }
    forest = &j["children"];
  } else if (!j.is_array()) {
    throw DataError("category tree: expected an object or an array");
  }
  pseudo::CategoryTree tree;
  for (const auto& n : *forest) detail::add_subtree(n, std::nullopt, tree, vocab, 0);
  return tree;
}

// ---- similarities ----------------------------------------------------------

inline std::map<std::string, pseudo::SimilarityTable> read_similarities(std::istream& in, Vocabulary& vocab) {
  std::map<std::string, pseudo::SimilarityTable> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "similarities line " + std::to_string(lineno);
    const Json j = parse_json(line, where);
    const auto image = get_field<std::string>(j, "image_id", where);
    const auto idx = get_field<std::int64_t>(j, "det_index", where);
    if (idx < 0) throw DataError(where + ": negative det_index");
    try {
      out[image].set(static_cast<std::size_t>(idx), vocab.intern(get_field<std::string>(j, "category", where)),
                     get_field<double>(j, "cosine", where));
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

// ---- pseudo-label records ---------------------------------------------------

inline Json record_json(const pseudo::PseudoLabelRecord& r, const Vocabulary& vocab) {
  Json j;
  j["image_id"] = r.image_id;
  j["category_list"] = Json::array();
  for (CategoryId c : r.category_list) j["category_list"].push_back(vocab.name(c));
  j["hard_negatives"] = Json::array();
  for (CategoryId c : r.hard_negatives) j["hard_negatives"].push_back(vocab.name(c));
  j["detections"] = Json::array();
  for (const auto& d : r.detections) {
    Json o = box_json(d, vocab);
    o["score"] = d.score;
    o["source"] = geom::to_string(d.source);
    j["detections"].push_back(o);
  }
  j["provenance"] = Json::array();
  for (const auto& p : r.provenance) {
    Json o;
    o["category"] = vocab.name(p.category);
    o["score"] = p.score;
    o["clip_similarity"] = p.clip_similarity ? Json(*p.clip_similarity) : Json(nullptr);
    o["size_bypass"] = p.size_bypass;
    o["filter_path"] = pseudo::to_string(p.filter_path);
    o["det_index"] = p.det_index ? Json(*p.det_index) : Json(nullptr);
    o["prompt_set"] = p.prompt_set;
    j["provenance"].push_back(o);
  }
  return j;
}

inline void write_records(std::ostream& out, const std::vector<pseudo::PseudoLabelRecord>& records,
                          const Vocabulary& vocab) {
  for (const auto& r : records) out << record_json(r, vocab).dump() << '\n';
}

// Assembles per-image pipeline inputs. Every detection image must have a GT
// entry (possibly with no objects); GT images without detections get an
// input with no predictions.
inline std::vector<pseudo::ImageInput> pipeline_inputs(const std::vector<ImageRecord>& gt,
                                                       const std::vector<ImageRecord>& detections,
                                                       std::map<std::string, pseudo::SimilarityTable> sims) {
  std::map<std::string, pseudo::ImageInput> by_id;
  for (const auto& g : gt) {
    auto [it, fresh] = by_id.emplace(g.image_id, pseudo::ImageInput{});
    if (!fresh) throw DataError("duplicate GT image '" + g.image_id + "'");
    it->second.image_id = g.image_id;
    it->second.gt = g.objects;
  }
  for (const auto& d : detections) {
    auto it = by_id.find(d.image_id);
    if (it == by_id.end()) throw DataError("detections for unknown image '" + d.image_id + "'");
    if (!it->second.predictions.empty()) throw DataError("duplicate detection image '" + d.image_id + "'");
    for (std::size_t k = 0; k < d.objects.size(); ++k) {
      it->second.predictions.push_back({d.objects[k], k, d.prompt_set[k]});
    }
  }
  std::vector<pseudo::ImageInput> out;
  for (auto& [id, in] : by_id) {
    if (auto s = sims.find(id); s != sims.end()) in.similarities = std::move(s->second);
    out.push_back(std::move(in));
  }
  return out;
}

// ---- checkpoints -------------------------------------------------------------
//
// "ORSDCKPT", u32 version, u32 array count, then per array:
// u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64.
// All integers and doubles little-endian.

inline constexpr char kCheckpointMagic[8] = {'O', 'R', 'S', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw DataError("checkpoint: truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const std::vector<numkit::Parameter*>& params) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put_le<std::uint64_t>(out, p->value.rows());
    detail::put_le<std::uint64_t>(out, p->value.cols());
    for (double v : p->value.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

inline std::vector<std::pair<std::string, numkit::Tensor2D>> read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(in);
  std::vector<std::pair<std::string, numkit::Tensor2D>> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = detail::get_le<std::uint32_t>(in);
    if (len > 4096) throw DataError("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("checkpoint: truncated file");
    const auto rows = detail::get_le<std::uint64_t>(in);
    const auto cols = detail::get_le<std::uint64_t>(in);
    if (rows > (1u << 24) || cols > (1u << 24) || rows * cols > (1u << 28)) throw DataError("checkpoint: implausible shape");
    numkit::Tensor2D t(rows, cols);
    for (double& v : t.values()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Copies arrays into the parameters with the same names; every parameter
// must be present with its shape.
inline void load_into(const std::vector<std::pair<std::string, numkit::Tensor2D>>& arrays,
                      const std::vector<numkit::Parameter*>& params) {
  std::map<std::string, const numkit::Tensor2D*> by_name;
  for (const auto& [n, t] : arrays) by_name[n] = &t;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw DataError("checkpoint: missing array '" + p->name + "'");
    if (!it->second->same_shape(p->value)) throw DataError("checkpoint: shape mismatch for '" + p->name + "'");
    p->value = *it->second;
    p->velocity.fill(0.0);
    p->zero_grad();
  }
}

}  // namespace orsd::io
