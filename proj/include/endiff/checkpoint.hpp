#pragma once

// Binary checkpoint container. All integers and floats little-endian.
//
//   magic    8 bytes  "ENDCKPT\0"
//   version  u32      kCheckpointVersion
//   config   u32 length + UTF-8 text in the flat key = value format; holds
//            the full run configuration plus `sizes` (n:p pairs)
//   count    u32      number of parameter segments
//   segment  u16 name length, name bytes, u32 rows, u32 cols,
//            rows * cols f64 values in column-major order
//   checksum u64      FNV-1a over every preceding byte

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "endiff/config.hpp"
#include "endiff/errors.hpp"
#include "endiff/model.hpp"

namespace endiff {

inline constexpr char kCheckpointMagic[8] = {'E', 'N', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class T>
  void pod(T v) { bytes(&v, sizeof(T)); }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}

  void bytes(void* out, std::size_t n) {
    if (n > n_ - pos_) throw CorruptCheckpoint("checkpoint is truncated");
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  template <class T>
  T pod() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::string format_sizes(const SizeDistribution& d) {
  std::string out;
  for (const auto& [n, p] : d.probs()) out += (out.empty() ? "" : ",") + std::to_string(n) + ":" + fmt_double(p);
  return out;
}

inline SizeDistribution parse_sizes(const std::vector<std::string>& items) {
  std::map<int, double> probs;
  for (const auto& it : items) {
    const auto colon = it.find(':');
    double n = 0.0, p = 0.0;
    if (colon == std::string::npos || !parse_double(it.substr(0, colon), n) || !parse_double(it.substr(colon + 1), p))
      throw CorruptCheckpoint("bad size distribution entry '" + it + "'");
    probs[static_cast<int>(n)] = p;
  }
  return SizeDistribution::from_probs(std::move(probs));
}

}  // namespace detail

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  RunConfig config;
  Model model;
  std::string config_text;
  std::uint64_t checksum = 0;
};

inline RunConfig run_config_of(const Model& m, RunConfig base) {
  base.diffusion = m.diffusion;
  base.net.layers = m.net.layers;
  base.net.scalar_width = m.net.scalar_width;
  base.net.vector_width = m.net.vector_width;
  base.net.rbf_count = m.net.rbf_count;
  base.net.rbf_max = m.net.rbf_max;
  base.net.time_dim = m.net.time_dim;
  base.net.condition_embed = m.net.condition_embed;
  base.net.condition_hidden = m.net.condition_hidden;
  base.net.sigma_floor = m.net.sigma_floor;
  base.vocabulary = m.vocab.symbols();
  base.conditional = m.conditional();
  return base;
}

inline std::vector<unsigned char> encode_checkpoint(const Model& model, const RunConfig& run) {
  KeyValueConfig kv = run_config_of(model, run).to_kv();
  kv.set("sizes", detail::format_sizes(model.sizes));
  const std::string text = kv.serialize();

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(model.params.segments().size()));
  for (const auto& seg : model.params.segments()) {
    if (seg.name.size() > 0xffff) throw ConfigError("segment name too long: " + seg.name);
    w.pod<std::uint16_t>(static_cast<std::uint16_t>(seg.name.size()));
    w.bytes(seg.name.data(), seg.name.size());
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(seg.rows));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(seg.cols));
    w.bytes(model.params.flat().data() + seg.offset, seg.size() * sizeof(double));
  }
  const std::uint64_t sum = fnv1a64(w.buffer().data(), w.buffer().size());
  w.pod<std::uint64_t>(sum);
  return std::move(w.buffer());
}

/// Parses and validates a checkpoint. The model is rebuilt from the stored
/// configuration and every stored segment must match it in name and shape.
inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CorruptCheckpoint("not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (fnv1a64(bytes.data(), body) != stored) throw CorruptCheckpoint("checksum mismatch");

  Checkpoint ck;
  ck.checksum = stored;
  detail::ByteReader r(bytes.data(), body);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  ck.version = r.pod<std::uint32_t>();
  if (ck.version != kCheckpointVersion)
    throw CorruptCheckpoint("unsupported checkpoint version " + std::to_string(ck.version));
  ck.config_text = r.str(r.pod<std::uint32_t>());

  KeyValueConfig kv;
  try {
    kv = KeyValueConfig::parse(ck.config_text);
  } catch (const ParseError& e) {
    throw CorruptCheckpoint(std::string("config block: ") + e.what());
  }
  if (!kv.has("sizes")) throw CorruptCheckpoint("config block lacks the size distribution");
  const SizeDistribution sizes = detail::parse_sizes(kv.list("sizes"));
  kv.erase("sizes");
  ck.config.apply(kv);
  ck.config.validate();
  ck.model = Model::create(ck.config.diffusion, ck.config.net, ck.config.vocab(), sizes,
                           ck.config.conditional, 0);

  const std::uint32_t count = r.pod<std::uint32_t>();
  if (count != ck.model.params.segments().size())
    throw ConfigError("checkpoint has " + std::to_string(count) + " segments, configuration expects " +
                      std::to_string(ck.model.params.segments().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.pod<std::uint16_t>());
    const auto rows = r.pod<std::uint32_t>();
    const auto cols = r.pod<std::uint32_t>();
    if (!ck.model.params.contains(name)) throw ConfigError("checkpoint segment " + name + " unknown to the model");
    const Segment& seg = ck.model.params.segment(name);
    if (seg.rows != rows || seg.cols != cols)
      throw ConfigError("checkpoint segment " + name + " has shape " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", model expects " + std::to_string(seg.rows) + "x" +
                        std::to_string(seg.cols));
    r.bytes(ck.model.params.flat().data() + seg.offset, seg.size() * sizeof(double));
  }
  if (r.remaining() != 0) throw CorruptCheckpoint("trailing bytes after the last segment");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Model& model, const RunConfig& run) {
  const auto bytes = encode_checkpoint(model, run);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidInput("cannot write checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open checkpoint " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace endiff
