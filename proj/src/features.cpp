#include "mmt/features.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mmt/errors.hpp"

namespace mmt {

namespace {

std::vector<float> parse_values(const std::string& text, const std::string& where) {
  std::vector<float> out;
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (p == end) break;
    float v = 0.0f;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc() || (next < end && *next != ' ' && *next != '\t' && *next != '\r')) {
      throw FormatError(where + ": unparseable number");
    }
    if (!std::isfinite(v)) throw FormatError(where + ": non-finite value");
    out.push_back(v);
    p = next;
  }
  return out;
}

}  // namespace

FeatureTable FeatureTable::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read feature file '" + path + "'");
  FeatureTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const std::string where = path + ":" + std::to_string(lineno);
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw FormatError(where + ": expected '<image_id><TAB><values>'");
    auto values = parse_values(line.substr(tab + 1), where);
    if (values.empty()) throw FormatError(where + ": no feature values");
    FeatureVector v = Eigen::Map<const FeatureVector>(values.data(), static_cast<Eigen::Index>(values.size()));
    if (table.dim_ != 0 && v.size() != table.dim_) {
      throw FormatError(where + ": dimension " + std::to_string(v.size()) + " differs from " +
                        std::to_string(table.dim_));
    }
    table.insert(line.substr(0, tab), std::move(v));
  }
  return table;
}

void FeatureTable::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write feature file '" + path + "'");
  os << std::setprecision(9);
  for (const auto& id : order_) {
    os << id << '\t';
    const auto& v = rows_.at(id);
    for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
    os << '\n';
  }
}

void FeatureTable::insert(const std::string& id, FeatureVector v) {
  if (dim_ == 0) dim_ = v.size();
  if (v.size() != dim_) throw FormatError("feature '" + id + "' has dimension " + std::to_string(v.size()));
  auto [it, inserted] = rows_.insert_or_assign(id, std::move(v));
  if (inserted) {
    order_.push_back(id);
  } else {
    ++duplicates_;
  }
}

const FeatureVector& FeatureTable::at(const std::string& id) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) throw DataError("image id '" + id + "' not found in feature table");
  return it->second;
}

FeatureTable FeatureTable::zeroed() const {
  FeatureTable out(dim_);
  for (const auto& id : order_) out.insert(id, FeatureVector::Zero(dim_));
  return out;
}

}  // namespace mmt
