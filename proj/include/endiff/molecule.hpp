#pragma once

// Atom vocabularies, XYZ files, one-hot graph encoding and size distributions.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "endiff/errors.hpp"
#include "endiff/geom.hpp"
#include "endiff/rng.hpp"

namespace endiff {

class AtomVocabulary {
 public:
  AtomVocabulary() = default;
  explicit AtomVocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    if (symbols_.empty()) throw ConfigError("vocabulary must not be empty");
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (!index_.emplace(symbols_[i], static_cast<int>(i)).second)
        throw ConfigError("duplicate element '" + symbols_[i] + "' in vocabulary");
    }
  }

  static AtomVocabulary qm9() { return AtomVocabulary({"H", "C", "N", "O", "F"}); }

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(int i) const { return symbols_.at(static_cast<std::size_t>(i)); }
  bool contains(const std::string& s) const { return index_.count(s) != 0; }

  int index(const std::string& s) const {
    auto it = index_.find(s);
    if (it == index_.end()) throw InvalidInput("element '" + s + "' not in vocabulary");
    return it->second;
  }

  std::string join() const {
    std::string out;
    for (std::size_t i = 0; i < symbols_.size(); ++i) out += (i ? "," : "") + symbols_[i];
    return out;
  }

  bool operator==(const AtomVocabulary& o) const { return symbols_ == o.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> index_;
};

struct MoleculeRecord {
  std::vector<int> types;  // vocabulary indices
  Matrix positions;        // M x 3
  std::string tag;

  Eigen::Index size() const { return positions.rows(); }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

}  // namespace detail

/// Multi-frame XYZ: count line, comment line, then `symbol x y z` rows.
/// Blank lines between frames are skipped. The comment is kept as the tag.
inline std::vector<MoleculeRecord> parse_xyz(const std::string& text, const AtomVocabulary& vocab) {
  std::vector<std::string> lines;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }
  std::vector<MoleculeRecord> out;
  std::size_t i = 0;
  int frame = 0;
  while (i < lines.size()) {
    if (detail::trim(lines[i]).empty()) {
      ++i;
      continue;
    }
    const int count_line = static_cast<int>(i) + 1;
    const std::string count_text(detail::trim(lines[i]));
    long count = 0;
    auto [ptr, ec] = std::from_chars(count_text.data(), count_text.data() + count_text.size(), count);
    if (ec != std::errc() || ptr != count_text.data() + count_text.size() || count < 1)
      throw ParseError("frame " + std::to_string(frame) + ": malformed atom count '" + count_text + "'",
                       count_line);
    MoleculeRecord rec;
    rec.tag = i + 1 < lines.size() ? std::string(detail::trim(lines[i + 1])) : "";
    rec.positions.resize(count, 3);
    rec.types.resize(static_cast<std::size_t>(count));
    for (long a = 0; a < count; ++a) {
      const std::size_t li = i + 2 + static_cast<std::size_t>(a);
      const int line_no = static_cast<int>(li) + 1;
      if (li >= lines.size() || detail::trim(lines[li]).empty())
        throw ParseError("frame " + std::to_string(frame) + ": expected " + std::to_string(count) +
                             " atom rows, found " + std::to_string(a),
                         line_no);
      const auto tok = detail::split_ws(lines[li]);
      if (tok.size() < 4)
        throw ParseError("frame " + std::to_string(frame) + ": atom row needs 'symbol x y z'", line_no);
      if (!vocab.contains(tok[0]))
        throw ParseError("frame " + std::to_string(frame) + ": unknown element '" + tok[0] + "'", line_no);
      rec.types[static_cast<std::size_t>(a)] = vocab.index(tok[0]);
      for (int k = 0; k < 3; ++k) {
        double v = 0.0;
        if (!detail::parse_double(tok[static_cast<std::size_t>(k) + 1], v))
          throw ParseError("frame " + std::to_string(frame) + ": non-numeric coordinate '" +
                               tok[static_cast<std::size_t>(k) + 1] + "'",
                           line_no);
        rec.positions(a, k) = v;
      }
    }
    out.push_back(std::move(rec));
    i += 2 + static_cast<std::size_t>(count);
    ++frame;
  }
  return out;
}

inline std::string write_xyz(const std::vector<MoleculeRecord>& records, const AtomVocabulary& vocab) {
  std::string out;
  char buf[128];
  for (const auto& rec : records) {
    out += std::to_string(rec.size()) + "\n" + rec.tag + "\n";
    for (Eigen::Index a = 0; a < rec.size(); ++a) {
      std::snprintf(buf, sizeof buf, "%s %.8f %.8f %.8f\n",
                    vocab.symbol(rec.types[static_cast<std::size_t>(a)]).c_str(), rec.positions(a, 0),
                    rec.positions(a, 1), rec.positions(a, 2));
      out += buf;
    }
  }
  return out;
}

/// Element counts per vocabulary index.
inline std::vector<int> composition_of(const MoleculeRecord& rec, int vocab_size) {
  std::vector<int> c(static_cast<std::size_t>(vocab_size), 0);
  for (int t : rec.types) ++c.at(static_cast<std::size_t>(t));
  return c;
}

/// One-hot times `scale` features and centered positions.
inline GeometricGraph encode_graph(const MoleculeRecord& rec, const AtomVocabulary& vocab,
                                   double scale, bool with_condition = false) {
  if (rec.size() < 1) throw InvalidInput("encode_graph: empty molecule");
  GeometricGraph g;
  g.positions = zero_com_project(rec.positions);
  g.features = Matrix::Zero(rec.size(), vocab.size());
  for (Eigen::Index a = 0; a < rec.size(); ++a) {
    const int t = rec.types[static_cast<std::size_t>(a)];
    if (t < 0 || t >= vocab.size()) throw InvalidInput("encode_graph: type index outside vocabulary");
    g.features(a, t) = scale;
  }
  if (with_condition) g.condition = composition_of(rec, vocab.size());
  return g;
}

/// Argmax over the first |vocab| feature channels (ties go to the lower index).
inline MoleculeRecord decode_graph(const Matrix& positions, const Matrix& features,
                                   const AtomVocabulary& vocab, double scale) {
  if (features.cols() < vocab.size()) throw InvalidInput("decode_graph: too few feature channels");
  MoleculeRecord rec;
  rec.positions = positions;
  rec.types.resize(static_cast<std::size_t>(positions.rows()));
  for (Eigen::Index a = 0; a < positions.rows(); ++a) {
    const Eigen::RowVectorXd row = features.row(a).head(vocab.size()) / scale;
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < row.size(); ++k)
      if (row(k) > row(best)) best = k;
    rec.types[static_cast<std::size_t>(a)] = static_cast<int>(best);
  }
  return rec;
}

/// Grammar: (Symbol Count?)+ where Symbol = [A-Z][a-z]? and Count = [0-9]+,
/// a missing count meaning 1. Repeated symbols add up.
inline std::vector<int> parse_composition(const std::string& formula, const AtomVocabulary& vocab) {
  std::vector<int> c(static_cast<std::size_t>(vocab.size()), 0);
  std::size_t i = 0;
  if (formula.empty()) throw InvalidInput("empty composition");
  while (i < formula.size()) {
    if (!std::isupper(static_cast<unsigned char>(formula[i])))
      throw InvalidInput("composition '" + formula + "': expected element symbol at position " +
                         std::to_string(i));
    std::string sym(1, formula[i++]);
    if (i < formula.size() && std::islower(static_cast<unsigned char>(formula[i]))) sym += formula[i++];
    long count = 0;
    const std::size_t start = i;
    while (i < formula.size() && std::isdigit(static_cast<unsigned char>(formula[i])))
      count = count * 10 + (formula[i++] - '0');
    if (i == start) count = 1;
    if (count <= 0 || count > 1000) throw InvalidInput("composition '" + formula + "': bad count");
    if (!vocab.contains(sym))
      throw InvalidInput("composition '" + formula + "': unknown element '" + sym + "'");
    c[static_cast<std::size_t>(vocab.index(sym))] += static_cast<int>(count);
  }
  return c;
}

inline std::string format_composition(const std::vector<int>& c, const AtomVocabulary& vocab) {
  std::string out;
  for (int i = 0; i < vocab.size(); ++i) {
    const int n = c.at(static_cast<std::size_t>(i));
    if (n == 0) continue;
    out += vocab.symbol(i);
    if (n > 1) out += std::to_string(n);
  }
  return out;
}

/// Normalized histogram over node counts.
class SizeDistribution {
 public:
  SizeDistribution() = default;

  static SizeDistribution from_sizes(const std::vector<int>& sizes) {
    if (sizes.empty()) throw InvalidInput("size distribution of an empty dataset");
    std::map<int, double> counts;
    for (int s : sizes) {
      if (s < 1) throw InvalidInput("size distribution: non-positive size");
      counts[s] += 1.0;
    }
    SizeDistribution d;
    for (auto& [n, c] : counts) d.probs_[n] = c / static_cast<double>(sizes.size());
    return d;
  }

  static SizeDistribution from_records(const std::vector<MoleculeRecord>& data) {
    std::vector<int> sizes;
    for (const auto& r : data) sizes.push_back(static_cast<int>(r.size()));
    return from_sizes(sizes);
  }

  static SizeDistribution from_probs(std::map<int, double> probs) {
    double total = 0.0;
    for (auto& [n, p] : probs) {
      if (n < 1 || !(p >= 0.0)) throw InvalidInput("size distribution: bad entry");
      total += p;
    }
    if (!(total > 0.0)) throw InvalidInput("size distribution: zero mass");
    for (auto& [n, p] : probs) p /= total;
    SizeDistribution d;
    d.probs_ = std::move(probs);
    return d;
  }

  const std::map<int, double>& probs() const { return probs_; }
  bool empty() const { return probs_.empty(); }

  double prob(int n) const {
    auto it = probs_.find(n);
    return it == probs_.end() ? 0.0 : it->second;
  }

  /// Inverse-CDF draw in increasing size order.
  int sample(RandomSource& rng) const {
    if (probs_.empty()) throw InvalidInput("sampling from an empty size distribution");
    const double u = rng.uniform();
    double acc = 0.0;
    for (const auto& [n, p] : probs_) {
      acc += p;
      if (u < acc) return n;
    }
    return probs_.rbegin()->first;
  }

 private:
  std::map<int, double> probs_;
};

/// 0.5 * sum |p - q| over the union of supports.
inline double total_variation(const SizeDistribution& a, const SizeDistribution& b) {
  double acc = 0.0;
  for (const auto& [n, p] : a.probs()) acc += std::abs(p - b.prob(n));
  for (const auto& [n, q] : b.probs())
    if (a.prob(n) == 0.0) acc += q;
  return 0.5 * acc;
}

}  // namespace endiff
