#pragma once

#include <map>
#include <string>
#include <vector>

#include "orsd/error.hpp"
#include "orsd/geom.hpp"

namespace orsd {

// Bidirectional category name <-> id map. Ids are dense and assigned in
// first-seen order, so a fixed insertion order gives fixed ids.
class Vocabulary {
 public:
  CategoryId intern(const std::string& name) {
    if (auto it = ids_.find(name); it != ids_.end()) return it->second;
    const auto id = static_cast<CategoryId>(names_.size());
    ids_.emplace(name, id);
    names_.push_back(name);
    return id;
  }

  CategoryId id(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) throw DataError("unknown category '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return ids_.count(name) != 0; }

  const std::string& name(CategoryId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
      throw DataError("unknown category id " + std::to_string(id));
    }
    return names_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::map<std::string, CategoryId> ids_;
  std::vector<std::string> names_;
};

}  // namespace orsd
