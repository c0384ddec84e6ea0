#pragma once

// Flat parameter storage with a named-segment index.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "endiff/autodiff.hpp"
#include "endiff/errors.hpp"
#include "endiff/rng.hpp"

namespace endiff {

struct Segment {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

enum class Init { kFanIn, kZero, kConstant };

class BoundParams;

class ParamStore {
 public:
  /// Adds a segment. kFanIn draws N(0, 1/rows); kConstant fills with `value`.
  void add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init,
           RandomSource& rng, double value = 0.0) {
    if (index_.count(name)) throw ConfigError("duplicate parameter segment " + name);
    Segment seg{name, rows, cols, data_.size()};
    index_[name] = segments_.size();
    segments_.push_back(seg);
    data_.resize(data_.size() + seg.size(), 0.0);
    RandomSource local = rng.split(name);
    const double std = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(rows, 1)));
    for (std::size_t i = 0; i < seg.size(); ++i) {
      double& x = data_[seg.offset + i];
      switch (init) {
        case Init::kFanIn: x = std * local.normal(); break;
        case Init::kZero: x = 0.0; break;
        case Init::kConstant: x = value; break;
      }
    }
  }

  /// Adds a segment with explicit contents (used when loading).
  void add_raw(const std::string& name, Eigen::Index rows, Eigen::Index cols,
               std::span<const double> values) {
    if (static_cast<std::size_t>(rows * cols) != values.size())
      throw ConfigError("segment " + name + ": size mismatch");
    if (index_.count(name)) throw ConfigError("duplicate parameter segment " + name);
    Segment seg{name, rows, cols, data_.size()};
    index_[name] = segments_.size();
    segments_.push_back(seg);
    data_.insert(data_.end(), values.begin(), values.end());
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Segment& segment(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter segment " + name);
    return segments_[it->second];
  }

  Matrix get(const std::string& name) const {
    const Segment& s = segment(name);
    return Eigen::Map<const Matrix>(data_.data() + s.offset, s.rows, s.cols);
  }

  void set(const std::string& name, const Matrix& value) {
    const Segment& s = segment(name);
    if (value.rows() != s.rows || value.cols() != s.cols)
      throw ConfigError("segment " + name + ": shape mismatch");
    Eigen::Map<Matrix>(data_.data() + s.offset, s.rows, s.cols) = value;
  }

  const std::vector<Segment>& segments() const { return segments_; }
  std::vector<double>& flat() { return data_; }
  const std::vector<double>& flat() const { return data_; }
  std::size_t size() const { return data_.size(); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Binds every segment as a Var: tape leaves when `tape` is given,
  /// plain values otherwise.
  BoundParams bind(ad::Tape* tape) const;

 private:
  std::vector<Segment> segments_;
  std::map<std::string, std::size_t> index_;
  std::vector<double> data_;
};

class BoundParams {
 public:
  const ad::Var& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("unbound parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  /// Gradient in the store's flat layout.
  std::vector<double> gradient() const {
    std::vector<double> g(store_->size(), 0.0);
    for (const auto& seg : store_->segments()) {
      const Matrix gm = vars_.at(seg.name).grad();
      Eigen::Map<Matrix>(g.data() + seg.offset, seg.rows, seg.cols) = gm;
    }
    return g;
  }

 private:
  const ParamStore* store_ = nullptr;
  std::map<std::string, ad::Var> vars_;
  friend class ParamStore;
};

inline BoundParams ParamStore::bind(ad::Tape* tape) const {
  BoundParams out;
  out.store_ = this;
  for (const auto& seg : segments_) {
    Matrix v = get(seg.name);
    out.vars_.emplace(seg.name, tape ? tape->leaf(std::move(v)) : ad::Var(std::move(v)));
  }
  return out;
}

}  // namespace endiff
