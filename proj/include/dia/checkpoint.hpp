#pragma once

#include <bit>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "dia/dataset.hpp"
#include "dia/network.hpp"

namespace dia {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace binary {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_bytes(std::vector<std::uint8_t>& out, const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }
inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

// Bounds-checked little-endian reader; errors carry the byte offset.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " (need " +
                        std::to_string(n) + " more bytes)");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(at));
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace binary

struct NamedBlob {
  std::string name;
  std::vector<float> values;
};

// Metadata grammar: one `key=value` pair per line, each line ending in '\n'.
// Keys are non-empty and contain no '=' or newline; values contain no newline.
using Metadata = std::vector<std::pair<std::string, std::string>>;

inline std::string encode_metadata(const Metadata& meta) {
  std::string text;
  for (const auto& [k, v] : meta) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("metadata: invalid pair '" + k + "'");
    }
    text += k + "=" + v + "\n";
  }
  return text;
}

inline Metadata decode_metadata(const std::string& text, std::size_t base_offset, const std::string& what) {
  Metadata meta;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      throw FormatError(what + ": unterminated metadata line at byte offset " + std::to_string(base_offset + pos));
    }
    const std::string line = text.substr(pos, nl - pos);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw FormatError(what + ": malformed metadata line at byte offset " + std::to_string(base_offset + pos));
    }
    meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    pos = nl + 1;
  }
  return meta;
}

// Shared blob section layout (checkpoints and binary traces): per blob a u32
// name length, the name bytes, a u64 element count and little-endian f32 values.
inline void encode_blobs(std::vector<std::uint8_t>& out, const std::vector<NamedBlob>& blobs) {
  for (const auto& b : blobs) {
    binary::put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    binary::put_bytes(out, b.name);
    binary::put_u64(out, b.values.size());
    for (float f : b.values) binary::put_f32(out, f);
  }
}

inline std::vector<NamedBlob> decode_blobs(binary::Reader& in) {
  std::vector<NamedBlob> blobs;
  while (!in.done()) {
    NamedBlob b;
    const std::size_t at = in.offset();
    b.name = in.str(in.u32());
    if (b.name.empty()) in.fail("empty blob name", at);
    const std::uint64_t count = in.u64();
    in.need(count * 4);
    b.values.resize(count);
    for (auto& f : b.values) f = in.f32();
    blobs.push_back(std::move(b));
  }
  return blobs;
}

inline constexpr char kCheckpointMagic[] = "DIALSTM1";

// File layout: 8-byte magic, u64 metadata length, metadata text, blobs.
struct Checkpoint {
  Metadata metadata;
  std::vector<NamedBlob> blobs;  // parameters in declaration order, then normalization buffers

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  std::string get(const std::string& key) const {
    const std::string* v = find(key);
    if (!v) throw FormatError("checkpoint: metadata key '" + key + "' missing");
    return *v;
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : metadata) {
      if (k == key) {
        v = value;
        return;
      }
    }
    metadata.emplace_back(key, value);
  }

  std::vector<std::uint8_t> encode() const {
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
    const std::string text = encode_metadata(metadata);
    binary::put_u64(out, text.size());
    binary::put_bytes(out, text);
    encode_blobs(out, blobs);
    return out;
  }

  static Checkpoint decode(std::span<const std::uint8_t> bytes) {
    binary::Reader in(bytes, "checkpoint");
    if (in.str(8) != std::string(kCheckpointMagic, 8)) in.fail("bad magic", 0);
    Checkpoint ck;
    const std::size_t len_at = in.offset();
    const std::uint64_t len = in.u64();
    ck.metadata = decode_metadata(in.str(len), len_at + 8, "checkpoint");
    ck.blobs = decode_blobs(in);
    return ck;
  }

  void save(const std::string& path) const { write_file_bytes(path, encode()); }
  static Checkpoint load(const std::string& path) {
    try {
      return decode(read_file_bytes(path));
    } catch (const FormatError& e) {
      throw FormatError(path + ": " + e.what());
    }
  }

  static Checkpoint capture(Model& model, Metadata metadata) {
    Checkpoint ck;
    ck.metadata = std::move(metadata);
    auto to_blob = [](const std::string& name, std::span<const double> values) {
      NamedBlob b{name, std::vector<float>(values.size())};
      for (std::size_t i = 0; i < values.size(); ++i) b.values[i] = static_cast<float>(values[i]);
      return b;
    };
    for (const auto& p : model.parameters()) ck.blobs.push_back(to_blob(p.name, p.tensor.data()));
    for (const auto& b : model.buffers()) ck.blobs.push_back(to_blob(b.name, *b.values));
    return ck;
  }

  // Copies every blob into the model; names and sizes must match exactly.
  void restore(Model& model) const {
    std::vector<std::pair<std::string, std::span<double>>> slots;
    for (auto& p : model.parameters()) slots.emplace_back(p.name, p.tensor.data());
    for (const auto& b : model.buffers()) slots.emplace_back(b.name, std::span<double>(*b.values));
    if (slots.size() != blobs.size()) {
      throw FormatError("checkpoint: " + std::to_string(blobs.size()) + " blobs for a model with " +
                        std::to_string(slots.size()) + " tensors");
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (slots[i].first != blobs[i].name || slots[i].second.size() != blobs[i].values.size()) {
        throw FormatError("checkpoint: blob '" + blobs[i].name + "' does not match model tensor '" +
                          slots[i].first + "'");
      }
      for (std::size_t j = 0; j < blobs[i].values.size(); ++j) slots[i].second[j] = blobs[i].values[j];
    }
  }
};

}  // namespace dia
