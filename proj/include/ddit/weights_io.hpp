#pragma once

// Weight file layout (all integers little-endian):
//   "DDIT"                       4-byte magic
//   u32 version                  currently 1
//   config block, u32 each:      hidden, layers, heads, ffn_mult, base_patch,
//                                height, width, channels, n_multipliers,
//                                multipliers[n_multipliers], lora_rank,
//                                lora_alpha, vocab, t_train
//   sections, in parameters() order:
//     u16 name length, UTF-8 name, u64 element count, f32 values
//   trailing section "crc32" with element count 1 whose 4 value bytes hold
//   the CRC-32 of every preceding byte of the file.

#include <bit>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include "ddit/error.hpp"
#include "ddit/model.hpp"

namespace ddit {

inline constexpr char kWeightMagic[4] = {'D', 'D', 'I', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;
inline constexpr const char* kChecksumSection = "crc32";

namespace detail {

static_assert(std::endian::native == std::endian::little, "weight IO assumes a little-endian host");

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  void raw(void* p, std::size_t n, const char* what) {
    if (pos_ + n > buf_.size())
      throw FormatError(std::string("weight file truncated while reading ") + what);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint16_t u16(const char* w) { std::uint16_t v; raw(&v, 2, w); return v; }
  std::uint32_t u32(const char* w) { std::uint32_t v; raw(&v, 4, w); return v; }
  std::uint64_t u64(const char* w) { std::uint64_t v; raw(&v, 8, w); return v; }
  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

inline void write_section_header(ByteWriter& w, const std::string& name, std::uint64_t count) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  w.u64(count);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_config(const ModelConfig& c) {
  detail::ByteWriter w;
  for (int v : {c.hidden, c.layers, c.heads, c.ffn_mult, c.base_patch, c.height, c.width, c.channels})
    w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(c.multipliers.size()));
  for (int m : c.multipliers) w.u32(static_cast<std::uint32_t>(m));
  for (int v : {c.lora_rank, c.lora_alpha, c.vocab, c.t_train}) w.u32(static_cast<std::uint32_t>(v));
  return std::move(w.bytes());
}

/// Serialized sections; `trainable` selects the frozen (false) or the
/// fine-tuned (true) subset, or everything when unset.
inline std::vector<std::uint8_t> serialize_sections(const ModelWeights<float>& weights,
                                                    std::optional<bool> trainable = std::nullopt) {
  detail::ByteWriter w;
  for (const auto& p : parameters(weights)) {
    if (trainable && p.trainable != *trainable) continue;
    detail::write_section_header(w, p.name, p.size);
    w.raw(p.data, p.size * sizeof(float));
  }
  return std::move(w.bytes());
}

inline std::vector<std::uint8_t> serialize_weights(const ModelWeights<float>& weights) {
  detail::ByteWriter w;
  w.raw(kWeightMagic, 4);
  w.u32(kWeightVersion);
  const auto cfg = serialize_config(weights.config);
  w.raw(cfg.data(), cfg.size());
  const auto sec = serialize_sections(weights);
  w.raw(sec.data(), sec.size());
  const std::uint32_t crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
  detail::write_section_header(w, kChecksumSection, 1);
  w.u32(crc);
  return std::move(w.bytes());
}

inline ModelWeights<float> deserialize_weights(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kWeightMagic, 4) != 0)
    throw FormatError("not a DDIT weight file (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kWeightVersion)
    throw FormatError("unsupported weight file version " + std::to_string(version));

  ModelConfig c;
  auto i32 = [&](const char* what) { return static_cast<int>(r.u32(what)); };
  c.hidden = i32("config");
  c.layers = i32("config");
  c.heads = i32("config");
  c.ffn_mult = i32("config");
  c.base_patch = i32("config");
  c.height = i32("config");
  c.width = i32("config");
  c.channels = i32("config");
  const std::uint32_t nm = r.u32("config");
  if (nm == 0 || nm > 16) throw FormatError("implausible multiplier count " + std::to_string(nm));
  c.multipliers.clear();
  for (std::uint32_t i = 0; i < nm; ++i) c.multipliers.push_back(i32("config"));
  c.lora_rank = i32("config");
  c.lora_alpha = i32("config");
  c.vocab = i32("config");
  c.t_train = i32("config");
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("weight file config invalid: ") + e.what());
  }

  ModelWeights<float> w = allocate_weights<float>(c);
  for (auto& p : parameters(w)) {
    const std::uint16_t len = r.u16("section name length");
    std::string name(len, '\0');
    r.raw(name.data(), len, "section name");
    if (name != p.name) throw FormatError("expected section '" + p.name + "', found '" + name + "'");
    const std::uint64_t count = r.u64("section count");
    if (count != p.size)
      throw FormatError("section '" + name + "' holds " + std::to_string(count) + " values, expected " +
                        std::to_string(p.size));
    r.raw(p.data, p.size * sizeof(float), name.c_str());
  }
  const std::size_t body_end = r.pos();
  const std::uint16_t len = r.u16("checksum section");
  std::string name(len, '\0');
  r.raw(name.data(), len, "checksum section");
  if (name != kChecksumSection || r.u64("checksum count") != 1)
    throw FormatError("missing crc32 section");
  const std::uint32_t stored = r.u32("checksum");
  if (!r.at_end()) throw FormatError("trailing bytes after checksum");
  if (stored != detail::crc32_of(bytes.data(), body_end)) throw FormatError("weight file checksum mismatch");
  for (const auto& p : parameters(w))
    for (std::size_t i = 0; i < p.size; ++i)
      if (!std::isfinite(p.data[i])) throw FormatError("non-finite value in section '" + p.name + "'");
  rebuild_pos_cache(w.pos, c.multipliers);
  return w;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

inline void save_weights(const std::string& path, const ModelWeights<float>& w) {
  write_file_bytes(path, serialize_weights(w));
}

inline ModelWeights<float> load_weights(const std::string& path) {
  return deserialize_weights(read_file_bytes(path));
}

}  // namespace ddit
