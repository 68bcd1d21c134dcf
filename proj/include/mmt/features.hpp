#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmt {

using FeatureVector = Eigen::RowVectorXf;

// image id -> fixed-dimension visual feature vector. One table per stream
// (synthetic, authentic).
class FeatureTable {
 public:
  FeatureTable() = default;
  explicit FeatureTable(Eigen::Index dim) : dim_(dim) {}

  // Tab-separated records: `<image_id>\t<v1> <v2> ... <vd>`. A repeated id
  // replaces the earlier record and bumps duplicate_count().
  static FeatureTable load(const std::string& path);
  void save(const std::string& path) const;

  void insert(const std::string& id, FeatureVector v);
  bool contains(const std::string& id) const { return rows_.count(id) != 0; }
  const FeatureVector& at(const std::string& id) const;

  Eigen::Index dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }
  std::size_t duplicate_count() const { return duplicates_; }
  // Ids in first-insertion order.
  const std::vector<std::string>& ids() const { return order_; }

  // Same ids, every vector zero.
  FeatureTable zeroed() const;

 private:
  Eigen::Index dim_ = 0;
  std::unordered_map<std::string, FeatureVector> rows_;
  std::vector<std::string> order_;
  std::size_t duplicates_ = 0;
};

}  // namespace mmt
