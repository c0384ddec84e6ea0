#pragma once

// Evaluation metrics: lookup-table bond inference, valence stability, atom
// type and pairwise-distance distribution distances, MMD and composition
// matching.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "endiff/errors.hpp"
#include "endiff/molecule.hpp"
#include "endiff/rng.hpp"

namespace endiff {

struct BondWindow {
  int order = 1;
  double ref = 0.0;
  double margin = 0.0;

  bool contains(double d) const { return std::abs(d - ref) <= margin; }
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Non-empty, non-comment lines with their 1-based numbers.
inline std::vector<std::pair<int, std::string>> data_lines(const std::string& text) {
  std::vector<std::pair<int, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    out.emplace_back(no, line);
  }
  return out;
}

}  // namespace detail

class BondTable {
 public:
  /// Lines `elem1 elem2 order ref margin`, `#` comments.
  static BondTable parse(const std::string& text) {
    BondTable t;
    for (const auto& [no, line] : detail::data_lines(text)) {
      const auto tok = detail::split_ws(line);
      if (tok.size() != 5) throw ParseError("bond table: expected 5 fields", no);
      BondWindow w;
      if (tok[2] != "1" && tok[2] != "2" && tok[2] != "3")
        throw ParseError("bond table: order must be 1, 2 or 3", no);
      w.order = tok[2][0] - '0';
      if (!detail::parse_double(tok[3], w.ref) || !detail::parse_double(tok[4], w.margin) ||
          !(w.ref > 0.0) || !(w.margin >= 0.0))
        throw ParseError("bond table: bad distance or margin", no);
      auto& list = t.windows_[key(tok[0], tok[1])];
      for (const auto& other : list)
        if (other.order == w.order) throw ParseError("bond table: duplicate entry", no);
      list.push_back(w);
      std::sort(list.begin(), list.end(),
                [](const BondWindow& a, const BondWindow& b) { return a.order < b.order; });
    }
    return t;
  }

  static BondTable load(const std::string& path) { return parse(detail::read_file(path)); }

  /// Windows for an unordered element pair, sorted by increasing order.
  const std::vector<BondWindow>& windows(const std::string& a, const std::string& b) const {
    static const std::vector<BondWindow> kEmpty;
    auto it = windows_.find(key(a, b));
    return it == windows_.end() ? kEmpty : it->second;
  }

  /// Lowest order whose window contains d, or 0.
  int order(const std::string& a, const std::string& b, double d) const {
    for (const auto& w : windows(a, b))
      if (w.contains(d)) return w.order;
    return 0;
  }

 private:
  static std::pair<std::string, std::string> key(const std::string& a, const std::string& b) {
    return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  }
  std::map<std::pair<std::string, std::string>, std::vector<BondWindow>> windows_;
};

class ValenceRules {
 public:
  /// Lines `elem v1 [v2 ...]`.
  static ValenceRules parse(const std::string& text) {
    ValenceRules r;
    for (const auto& [no, line] : detail::data_lines(text)) {
      const auto tok = detail::split_ws(line);
      if (tok.size() < 2) throw ParseError("valence rules: expected element and valences", no);
      std::vector<int> allowed;
      for (std::size_t i = 1; i < tok.size(); ++i) {
        double v = 0.0;
        if (!detail::parse_double(tok[i], v) || v < 0 || v != std::floor(v))
          throw ParseError("valence rules: bad valence '" + tok[i] + "'", no);
        allowed.push_back(static_cast<int>(v));
      }
      r.allowed_[tok[0]] = allowed;
    }
    return r;
  }

  static ValenceRules load(const std::string& path) { return parse(detail::read_file(path)); }

  bool covers(const std::string& e) const { return allowed_.count(e) != 0; }

  bool allows(const std::string& e, int valence) const {
    auto it = allowed_.find(e);
    if (it == allowed_.end()) return false;
    return std::find(it->second.begin(), it->second.end(), valence) != it->second.end();
  }

 private:
  std::map<std::string, std::vector<int>> allowed_;
};

struct Bond {
  int i = 0;
  int j = 0;
  int order = 0;
};

struct BondInference {
  std::vector<Bond> bonds;   // i < j, lexicographic
  std::vector<int> valence;  // sum of incident bond orders per atom
};

inline BondInference infer_bonds(const MoleculeRecord& rec, const AtomVocabulary& vocab,
                                 const BondTable& table) {
  const int m = static_cast<int>(rec.size());
  BondInference out;
  out.valence.assign(static_cast<std::size_t>(m), 0);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      const double d = (rec.positions.row(i) - rec.positions.row(j)).norm();
      const int order = table.order(vocab.symbol(rec.types[static_cast<std::size_t>(i)]),
                                    vocab.symbol(rec.types[static_cast<std::size_t>(j)]), d);
      if (order == 0) continue;
      out.bonds.push_back({i, j, order});
      out.valence[static_cast<std::size_t>(i)] += order;
      out.valence[static_cast<std::size_t>(j)] += order;
    }
  return out;
}

struct Stability {
  int stable_atoms = 0;
  int atoms = 0;
  bool molecule_stable = false;

  double atom_fraction() const { return atoms ? static_cast<double>(stable_atoms) / atoms : 0.0; }
};

inline Stability stability(const MoleculeRecord& rec, const AtomVocabulary& vocab,
                           const BondTable& table, const ValenceRules& rules) {
  const BondInference b = infer_bonds(rec, vocab, table);
  Stability s;
  s.atoms = static_cast<int>(rec.size());
  for (int a = 0; a < s.atoms; ++a)
    if (rules.allows(vocab.symbol(rec.types[static_cast<std::size_t>(a)]),
                     b.valence[static_cast<std::size_t>(a)]))
      ++s.stable_atoms;
  s.molecule_stable = s.atoms > 0 && s.stable_atoms == s.atoms;
  return s;
}

/// Normalized atom-type histogram.
inline std::vector<double> atom_type_histogram(const std::vector<MoleculeRecord>& data, int vocab_size) {
  std::vector<double> h(static_cast<std::size_t>(vocab_size), 0.0);
  double total = 0.0;
  for (const auto& r : data)
    for (int t : r.types) {
      h.at(static_cast<std::size_t>(t)) += 1.0;
      total += 1.0;
    }
  if (total == 0.0) throw InvalidInput("atom-type histogram of an empty set");
  for (double& v : h) v /= total;
  return h;
}

/// Mean absolute difference between normalized atom-type histograms.
inline double total_variation_atoms(const std::vector<MoleculeRecord>& generated,
                                    const std::vector<MoleculeRecord>& reference, int vocab_size) {
  const auto a = atom_type_histogram(generated, vocab_size);
  const auto b = atom_type_histogram(reference, vocab_size);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(vocab_size);
}

/// All intra-molecular pairwise distances, pooled in record order.
inline std::vector<double> pooled_pairwise_distances(const std::vector<MoleculeRecord>& data) {
  std::vector<double> out;
  for (const auto& r : data)
    for (Eigen::Index i = 0; i < r.size(); ++i)
      for (Eigen::Index j = i + 1; j < r.size(); ++j)
        out.push_back((r.positions.row(i) - r.positions.row(j)).norm());
  return out;
}

/// Fixed-bin histogram on [lo, hi); values at or beyond hi land in the last bin.
struct DistanceHistogram {
  double lo = 0.0;
  double hi = 8.0;
  int bins = 40;

  std::vector<double> normalized(const std::vector<double>& values) const {
    if (values.empty()) throw InvalidInput("distance histogram of an empty set");
    std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
    const double width = (hi - lo) / bins;
    for (double v : values) {
      int b = static_cast<int>(std::floor((v - lo) / width));
      b = std::clamp(b, 0, bins - 1);
      h[static_cast<std::size_t>(b)] += 1.0;
    }
    for (double& x : h) x /= static_cast<double>(values.size());
    return h;
  }
};

/// 0.5 * L1 distance between the two normalized histograms.
inline double histogram_tv(const std::vector<double>& a, const std::vector<double>& b,
                           const DistanceHistogram& hist = {}) {
  const auto ha = hist.normalized(a);
  const auto hb = hist.normalized(b);
  double acc = 0.0;
  for (std::size_t i = 0; i < ha.size(); ++i) acc += std::abs(ha[i] - hb[i]);
  return 0.5 * acc;
}

inline double pairwise_distance_tv(const std::vector<MoleculeRecord>& generated,
                                   const std::vector<MoleculeRecord>& reference,
                                   const DistanceHistogram& hist = {}) {
  return histogram_tv(pooled_pairwise_distances(generated), pooled_pairwise_distances(reference), hist);
}

/// Unbiased MMD^2 with k(a, b) = sum_s exp(-(a - b)^2 / (2 s^2)).
inline double mmd_squared(const std::vector<double>& x, const std::vector<double>& y,
                          const std::vector<double>& bandwidths) {
  if (x.size() < 2 || y.size() < 2) throw InvalidInput("mmd: need at least two samples per set");
  if (bandwidths.empty()) throw InvalidInput("mmd: no bandwidths");
  auto k = [&](double a, double b) {
    double s = 0.0;
    for (double bw : bandwidths) s += std::exp(-(a - b) * (a - b) / (2.0 * bw * bw));
    return s;
  };
  const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) kxx += 2.0 * k(x[i], x[j]);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = i + 1; j < y.size(); ++j) kyy += 2.0 * k(y[i], y[j]);
  for (double a : x)
    for (double b : y) kxy += k(a, b);
  return kxx / (n * (n - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (n * m);
}

inline std::vector<double> default_mmd_bandwidths() { return {0.05, 0.2, 1.0}; }

inline double mmd_pairwise_distances(const std::vector<MoleculeRecord>& generated,
                                     const std::vector<MoleculeRecord>& reference,
                                     const std::vector<double>& bandwidths = default_mmd_bandwidths()) {
  return mmd_squared(pooled_pairwise_distances(generated), pooled_pairwise_distances(reference),
                     bandwidths);
}

inline bool composition_match(const MoleculeRecord& rec, const std::vector<int>& c) {
  return composition_of(rec, static_cast<int>(c.size())) == c;
}

/// Fraction of records whose composition equals the paired prompt.
inline double matching_rate(const std::vector<MoleculeRecord>& records,
                            const std::vector<std::vector<int>>& prompts) {
  if (records.size() != prompts.size()) throw InvalidInput("matching_rate: size mismatch");
  if (records.empty()) throw InvalidInput("matching_rate: no records");
  int hits = 0;
  for (std::size_t i = 0; i < records.size(); ++i) hits += composition_match(records[i], prompts[i]);
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// Standard error of `stat` over molecule-level bootstrap resamples of both sets.
template <class Stat>
double bootstrap_se(const std::vector<MoleculeRecord>& a, const std::vector<MoleculeRecord>& b,
                    Stat&& stat, int rounds, RandomSource rng) {
  if (rounds < 2) throw InvalidInput("bootstrap_se: need at least two rounds");
  std::vector<double> vals;
  for (int r = 0; r < rounds; ++r) {
    std::vector<MoleculeRecord> ra, rb;
    for (std::size_t i = 0; i < a.size(); ++i) ra.push_back(a[rng.uniform_index(a.size())]);
    for (std::size_t i = 0; i < b.size(); ++i) rb.push_back(b[rng.uniform_index(b.size())]);
    vals.push_back(stat(ra, rb));
  }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= rounds;
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  return std::sqrt(var / (rounds - 1));
}

}  // namespace endiff
