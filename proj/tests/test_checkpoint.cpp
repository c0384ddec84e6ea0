#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "test_util.hpp"

using namespace endiff;
using namespace endiff::testing;

namespace {

Model small_model(int width, bool conditional = false) {
  DiffusionConfig dc;
  dc.g0 = 0.2;
  EquiNetConfig nc = tiny_net();
  nc.scalar_width = width;
  return Model::create(dc, nc, AtomVocabulary::qm9(), SizeDistribution::from_sizes({4, 5, 5}), conditional, 11);
}

std::uint32_t read_u32(const std::vector<unsigned char>& b, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + at, 4);
  return v;
}

/// Replaces the trailing checksum so structural errors are reached.
void reseal(std::vector<unsigned char>& b) {
  const std::size_t body = b.size() - 8;
  const std::uint64_t sum = fnv1a64(b.data(), body);
  std::memcpy(b.data() + body, &sum, 8);
}

}  // namespace

TEST(Checkpoint, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64(nullptr, 0), 0xcbf29ce484222325ull);
  const unsigned char a[] = {'a'};
  EXPECT_EQ(fnv1a64(a, 1), 0xaf63dc4c8601ec8cull);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m = small_model(8, true);
  RandomSource r(1);
  for (double& v : m.params.flat()) v += 0.1 * r.normal();
  RunConfig run;
  run.seed = 77;
  run.train.lr = 3e-4;
  const auto bytes = encode_checkpoint(m, run);
  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.version, kCheckpointVersion);
  EXPECT_EQ(ck.model.params.flat(), m.params.flat());
  EXPECT_EQ(ck.model.sizes.probs(), m.sizes.probs());
  EXPECT_EQ(ck.model.vocab, m.vocab);
  EXPECT_TRUE(ck.model.conditional());
  EXPECT_EQ(ck.config.seed, 77u);
  EXPECT_EQ(ck.config.train.lr, 3e-4);
  EXPECT_EQ(ck.config.net.scalar_width, 8);
  EXPECT_EQ(encode_checkpoint(ck.model, ck.config), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  const Model m = small_model(6);
  const auto path = std::filesystem::temp_directory_path() / "endiff_ckpt_roundtrip.ckpt";
  save_checkpoint(path.string(), m, RunConfig{});
  const Checkpoint ck = load_checkpoint(path.string());
  EXPECT_EQ(ck.model.params.flat(), m.params.flat());
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path.string()), InvalidInput);
}

TEST(Checkpoint, TruncationAndCorruptionAreDetected) {
  const auto bytes = encode_checkpoint(small_model(6), RunConfig{});
  for (std::size_t keep : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<long>(keep));
    EXPECT_THROW(decode_checkpoint(cut), CorruptCheckpoint) << keep;
  }
  for (std::size_t at : {std::size_t{3}, std::size_t{30}, bytes.size() / 2, bytes.size() - 3}) {
    auto flipped = bytes;
    flipped[at] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(flipped), CorruptCheckpoint) << at;
  }
  auto extra = bytes;
  extra.insert(extra.end() - 8, 0);
  reseal(extra);
  EXPECT_THROW(decode_checkpoint(extra), CorruptCheckpoint);
  auto version = bytes;
  version[8] = 9;
  reseal(version);
  EXPECT_THROW(decode_checkpoint(version), CorruptCheckpoint);
}

TEST(Checkpoint, ShapeMismatchIsAConfigError) {
  // Config block of a width-8 model followed by the segments of a width-6 one.
  const auto a = encode_checkpoint(small_model(8), RunConfig{});
  const auto b = encode_checkpoint(small_model(6), RunConfig{});
  const std::size_t ha = 16 + read_u32(a, 12), hb = 16 + read_u32(b, 12);
  std::vector<unsigned char> mixed(a.begin(), a.begin() + static_cast<long>(ha));
  mixed.insert(mixed.end(), b.begin() + static_cast<long>(hb), b.end());
  reseal(mixed);
  EXPECT_THROW(decode_checkpoint(mixed), ConfigError);
}

TEST(Checkpoint, SizeEntriesRoundTrip) {
  const auto d = SizeDistribution::from_probs({{3, 1.0 / 3.0}, {7, 2.0 / 3.0}});
  const auto back = detail::parse_sizes(KeyValueConfig::parse("s = " + detail::format_sizes(d)).list("s"));
  EXPECT_EQ(back.probs(), d.probs());
  EXPECT_THROW(detail::parse_sizes({"3-0.5"}), CorruptCheckpoint);
}
