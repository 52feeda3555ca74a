#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dia/checkpoint.hpp"
#include "dia/train.hpp"

namespace dia {

// Recorded attention maps h_t (and GAP descriptors y_t) keyed by
// (stage, block, sample). Samples are dense 0..S-1 for every traced block.
class AttentionTrace {
 public:
  struct BlockTrace {
    std::size_t width = 0;
    std::vector<double> maps;         // [samples, width]
    std::vector<double> descriptors;  // [samples, width]; may be empty
  };
  using Key = std::pair<std::size_t, std::size_t>;  // (stage, block)

  std::size_t samples() const { return samples_; }
  const std::map<Key, BlockTrace>& blocks() const { return blocks_; }
  bool has_descriptors() const {
    return !blocks_.empty() && !blocks_.begin()->second.descriptors.empty();
  }

  std::vector<std::size_t> stages() const {
    std::vector<std::size_t> out;
    for (const auto& [key, _] : blocks_) {
      if (out.empty() || out.back() != key.first) out.push_back(key.first);
    }
    return out;
  }

  std::vector<std::size_t> stage_blocks(std::size_t stage) const {
    std::vector<std::size_t> out;
    for (const auto& [key, _] : blocks_) {
      if (key.first == stage) out.push_back(key.second);
    }
    return out;
  }

  const BlockTrace& at(std::size_t stage, std::size_t block) const {
    auto it = blocks_.find({stage, block});
    if (it == blocks_.end()) {
      throw ConfigError("trace has no block " + std::to_string(block) + " in stage " + std::to_string(stage));
    }
    return it->second;
  }

  std::span<const double> map(std::size_t stage, std::size_t block, std::size_t sample) const {
    const BlockTrace& b = at(stage, block);
    return {b.maps.data() + sample * b.width, b.width};
  }

  // Appends one batch of rows for a block; `first_sample` must equal the
  // number of rows already recorded for that block.
  void append(std::size_t stage, std::size_t block, std::size_t first_sample, std::span<const double> maps,
              std::span<const double> descriptors, std::size_t width) {
    if (width == 0 || maps.size() % width != 0 || (!descriptors.empty() && descriptors.size() != maps.size())) {
      throw ShapeError("trace: row data does not match width " + std::to_string(width));
    }
    BlockTrace& b = blocks_[{stage, block}];
    if (b.width == 0) b.width = width;
    if (b.width != width) throw ShapeError("trace: width changed for stage " + std::to_string(stage));
    if (b.maps.size() / width != first_sample) {
      throw InvariantError("trace: sample keys must be dense (stage " + std::to_string(stage) + ", block " +
                           std::to_string(block) + ", got " + std::to_string(first_sample) + ")");
    }
    b.maps.insert(b.maps.end(), maps.begin(), maps.end());
    b.descriptors.insert(b.descriptors.end(), descriptors.begin(), descriptors.end());
    samples_ = std::max(samples_, b.maps.size() / width);
  }

  // Checks that every block has the same sample count and widths agree within a stage.
  void validate() const {
    std::map<std::size_t, std::size_t> widths;
    for (const auto& [key, b] : blocks_) {
      if (b.maps.size() != samples_ * b.width) {
        throw InvariantError("trace: stage " + std::to_string(key.first) + " block " + std::to_string(key.second) +
                             " has " + std::to_string(b.maps.size() / b.width) + " samples, expected " +
                             std::to_string(samples_));
      }
      auto [it, inserted] = widths.emplace(key.first, b.width);
      if (!inserted && it->second != b.width) {
        throw InvariantError("trace: stage " + std::to_string(key.first) + " mixes widths");
      }
    }
  }

  // Runs the model in eval mode over the first `max_samples` samples.
  static AttentionTrace collect(const Model& model, const Dataset& data, std::size_t max_samples,
                                std::size_t batch_size = 128) {
    AttentionTrace trace;
    const std::size_t n = std::min(max_samples, data.size());
    NoGradGuard guard;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      const std::size_t end = std::min(n, begin + batch_size);
      std::vector<std::size_t> idx(end - begin);
      for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
      model.forward(data.batch(idx), Mode::kEval,
                    [&](std::size_t s, std::size_t b, const Tensor& y, const Tensor& h) {
                      trace.append(s, b, begin, h.data(), y.data(), h.dim(1));
                    });
    }
    trace.validate();
    return trace;
  }

  // CSV `stage,block,sample,channel,value` with one row per h_t entry.
  std::string to_csv() const {
    std::ostringstream out;
    out << "stage,block,sample,channel,value\n";
    for (const auto& [key, b] : blocks_) {
      for (std::size_t s = 0; s < samples_; ++s) {
        for (std::size_t c = 0; c < b.width; ++c) {
          out << key.first << ',' << key.second << ',' << s << ',' << c << ','
              << format_double(b.maps[s * b.width + c]) << '\n';
        }
      }
    }
    return out.str();
  }

  // Sidecar metadata (same key=value grammar as checkpoints).
  Metadata metadata() const {
    Metadata m{{"format", "dia-trace-1"}, {"samples", std::to_string(samples_)}};
    for (std::size_t s : stages()) {
      std::string blocks;
      for (std::size_t b : stage_blocks(s)) blocks += (blocks.empty() ? "" : ",") + std::to_string(b);
      m.emplace_back("stage." + std::to_string(s) + ".width", std::to_string(at(s, stage_blocks(s)[0]).width));
      m.emplace_back("stage." + std::to_string(s) + ".blocks", blocks);
    }
    return m;
  }

  static AttentionTrace from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "stage,block,sample,channel,value") {
      throw FormatError("trace csv: missing header 'stage,block,sample,channel,value'");
    }
    struct Row {
      std::size_t stage, block, sample, channel;
      double value;
    };
    std::map<Key, std::vector<Row>> rows;
    for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
      if (line.empty()) continue;
      Row r{};
      char* p = line.data();
      char* end = nullptr;
      std::size_t* fields[4] = {&r.stage, &r.block, &r.sample, &r.channel};
      for (auto* f : fields) {
        *f = std::strtoull(p, &end, 10);
        if (end == p || *end != ',') throw FormatError("trace csv: malformed line " + std::to_string(lineno));
        p = end + 1;
      }
      r.value = std::strtod(p, &end);
      if (end == p || *end != '\0') throw FormatError("trace csv: malformed value on line " + std::to_string(lineno));
      rows[{r.stage, r.block}].push_back(r);
    }
    AttentionTrace trace;
    for (auto& [key, list] : rows) {
      std::size_t width = 0, samples = 0;
      for (const auto& r : list) {
        width = std::max(width, r.channel + 1);
        samples = std::max(samples, r.sample + 1);
      }
      if (list.size() != width * samples) {
        throw FormatError("trace csv: stage " + std::to_string(key.first) + " block " + std::to_string(key.second) +
                          " is not a dense sample x channel grid");
      }
      std::vector<double> maps(width * samples, 0.0);
      std::vector<bool> seen(width * samples, false);
      for (const auto& r : list) {
        const std::size_t at = r.sample * width + r.channel;
        if (seen[at]) throw FormatError("trace csv: duplicate entry in stage " + std::to_string(key.first));
        seen[at] = true;
        maps[at] = r.value;
      }
      trace.append(key.first, key.second, 0, maps, {}, width);
    }
    trace.validate();
    return trace;
  }

  // Binary variant: "DIATRACE" magic, then the checkpoint metadata and blob
  // rules. Blobs are named h/<stage>/<block> (and y/<stage>/<block>); values
  // are stored as 32-bit floats.
  std::vector<std::uint8_t> encode_binary() const {
    std::vector<std::uint8_t> out{'D', 'I', 'A', 'T', 'R', 'A', 'C', 'E'};
    const std::string text = encode_metadata(metadata());
    binary::put_u64(out, text.size());
    binary::put_bytes(out, text);
    std::vector<NamedBlob> blobs;
    auto to_blob = [](std::string name, const std::vector<double>& v) {
      NamedBlob b{std::move(name), std::vector<float>(v.size())};
      for (std::size_t i = 0; i < v.size(); ++i) b.values[i] = static_cast<float>(v[i]);
      return b;
    };
    for (const auto& [key, b] : blocks_) {
      const std::string suffix = "/" + std::to_string(key.first) + "/" + std::to_string(key.second);
      blobs.push_back(to_blob("h" + suffix, b.maps));
      if (!b.descriptors.empty()) blobs.push_back(to_blob("y" + suffix, b.descriptors));
    }
    encode_blobs(out, blobs);
    return out;
  }

  static AttentionTrace decode_binary(std::span<const std::uint8_t> bytes) {
    binary::Reader in(bytes, "trace");
    if (in.str(8) != "DIATRACE") in.fail("bad magic", 0);
    const std::size_t len_at = in.offset();
    const Metadata meta = decode_metadata(in.str(in.u64()), len_at + 8, "trace");
    std::size_t samples = 0;
    for (const auto& [k, v] : meta) {
      if (k == "samples") samples = std::stoull(v);
    }
    AttentionTrace trace;
    std::map<Key, std::vector<double>> ys;
    for (auto& blob : decode_blobs(in)) {
      std::size_t stage = 0, block = 0;
      char kind = 0;
      if (std::sscanf(blob.name.c_str(), "%c/%zu/%zu", &kind, &stage, &block) != 3 || (kind != 'h' && kind != 'y')) {
        throw FormatError("trace: unexpected blob '" + blob.name + "'");
      }
      std::vector<double> values(blob.values.begin(), blob.values.end());
      if (kind == 'y') {
        ys[{stage, block}] = std::move(values);
        continue;
      }
      if (samples == 0 || values.size() % samples != 0) {
        throw FormatError("trace: blob '" + blob.name + "' does not divide into " + std::to_string(samples) + " samples");
      }
      trace.append(stage, block, 0, values, {}, values.size() / samples);
    }
    for (auto& [key, y] : ys) {
      auto it = trace.blocks_.find(key);
      if (it == trace.blocks_.end() || y.size() != it->second.maps.size()) {
        throw FormatError("trace: descriptor blob without matching map blob");
      }
      it->second.descriptors = std::move(y);
    }
    trace.validate();
    return trace;
  }

  void save_csv(const std::string& path) const {
    const std::string csv = to_csv();
    write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()});
    const std::string meta = encode_metadata(metadata());
    write_file_bytes(path + ".meta", {reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size()});
  }

  static AttentionTrace load(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && std::string(bytes.begin(), bytes.begin() + 8) == "DIATRACE") {
      return decode_binary(bytes);
    }
    return from_csv(std::string(bytes.begin(), bytes.end()));
  }

 private:
  std::map<Key, BlockTrace> blocks_;
  std::size_t samples_ = 0;
};

}  // namespace dia
