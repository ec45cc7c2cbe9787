#pragma once

// On-disk probe dump: manifest.json + lm_head.bin + records.bin.
//
//   lm_head.bin : "CCPH" u32 version=1, u32 V, u32 d_h, u8 has_bias,
//                 V*d_h f32 row-major weights, [V f32 bias]
//   records.bin : "CCPR" u32 version=1, then per record
//                 u32 L, u32 label, u32 reserved=0, L u32 token ids,
//                 L*d_h f32 hidden states (token-major)
//
// All integers and floats are little-endian. Records carry no id on disk; an
// answer's id is its zero-based position in records.bin.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccps/binary_io.hpp"
#include "ccps/errors.hpp"

namespace ccps {

enum class AnswerFormat : std::uint8_t { MC = 0, OE = 1 };

/// Longest open-ended answer accepted anywhere in the pipeline.
inline constexpr std::size_t kMaxOeTokens = 30;

inline std::string_view to_string(AnswerFormat f) noexcept { return f == AnswerFormat::MC ? "MC" : "OE"; }

inline AnswerFormat parse_format(std::string_view s, std::string_view key = "format") {
  if (s == "MC" || s == "mc") return AnswerFormat::MC;
  if (s == "OE" || s == "oe") return AnswerFormat::OE;
  throw ValidationError("invalid value for '" + std::string(key) + "': \"" + std::string(s) +
                        "\" (expected MC or OE)");
}

/// Vocabulary projection: logits = weights * h + bias. Templated on the
/// storage type so gradient checks can run the same code in double.
template <class T>
struct BasicLMHead {
  std::size_t vocab_size = 0;
  std::size_t hidden_dim = 0;
  std::vector<T> weights;  // vocab_size x hidden_dim, row-major
  std::vector<T> bias;     // empty or vocab_size

  bool has_bias() const noexcept { return !bias.empty(); }

  std::span<const T> row(std::size_t v) const noexcept {
    return std::span<const T>(weights).subspan(v * hidden_dim, hidden_dim);
  }

  void validate() const {
    if (vocab_size == 0 || hidden_dim == 0) throw ValidationError("LM head dimensions must be positive");
    if (weights.size() != vocab_size * hidden_dim)
      throw ValidationError("LM head has " + std::to_string(weights.size()) + " weights, expected V*d_h = " +
                            std::to_string(vocab_size * hidden_dim));
    if (has_bias() && bias.size() != vocab_size) throw ValidationError("LM head bias length must equal V");
    for (T w : weights)
      if (!std::isfinite(w)) throw ValidationError("LM head weights must be finite");
    for (T b : bias)
      if (!std::isfinite(b)) throw ValidationError("LM head bias must be finite");
  }

  template <class U>
  BasicLMHead<U> cast() const {
    return {vocab_size, hidden_dim, std::vector<U>(weights.begin(), weights.end()),
            std::vector<U>(bias.begin(), bias.end())};
  }

  bool operator==(const BasicLMHead&) const = default;
};

using LMHead = BasicLMHead<float>;

/// One generated answer: its tokens and the final hidden state behind each.
struct AnswerRecord {
  std::string answer_id;
  std::vector<std::uint32_t> token_ids;
  std::vector<float> hidden_states;  // length() x d_h, token-major
  std::uint32_t label = 0;           // 1 = answer correct
  AnswerFormat format = AnswerFormat::MC;

  std::size_t length() const noexcept { return token_ids.size(); }

  std::span<const float> state(std::size_t i, std::size_t d_h) const noexcept {
    return std::span<const float>(hidden_states).subspan(i * d_h, d_h);
  }

  bool operator==(const AnswerRecord&) const = default;
};

struct ProbeManifest {
  std::size_t d_h = 0;
  std::size_t vocab_size = 0;
  std::string dtype = "f32";
  std::string endianness = "little";
  std::size_t record_count = 0;
  AnswerFormat format = AnswerFormat::MC;
  std::string source;

  bool operator==(const ProbeManifest&) const = default;
};

namespace detail {

template <class J>
const J& require_key(const J& obj, const char* key) {
  if (!obj.contains(key)) throw ValidationError(std::string("manifest.json: missing key '") + key + "'");
  return obj.at(key);
}

inline std::size_t positive_size(const nlohmann::json& obj, const char* key, bool allow_zero = false) {
  const auto& v = require_key(obj, key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < (allow_zero ? 0 : 1))
    throw ValidationError(std::string("manifest.json: '") + key + "' must be a " +
                          (allow_zero ? "non-negative" : "positive") + " integer");
  return v.get<std::size_t>();
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const ProbeManifest& m) {
  return {{"d_h", m.d_h},
          {"vocab_size", m.vocab_size},
          {"dtype", m.dtype},
          {"endianness", m.endianness},
          {"record_count", m.record_count},
          {"format", std::string(to_string(m.format))},
          {"source", m.source}};
}

inline ProbeManifest manifest_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("manifest.json: expected a JSON object");
  ProbeManifest m;
  m.d_h = detail::positive_size(j, "d_h");
  m.vocab_size = detail::positive_size(j, "vocab_size");
  m.record_count = detail::positive_size(j, "record_count", /*allow_zero=*/true);
  const auto& dtype = detail::require_key(j, "dtype");
  if (!dtype.is_string() || dtype.get<std::string>() != "f32")
    throw ValidationError("manifest.json: 'dtype' must be \"f32\"");
  const auto& endian = detail::require_key(j, "endianness");
  if (!endian.is_string() || endian.get<std::string>() != "little")
    throw ValidationError("manifest.json: 'endianness' must be \"little\"");
  const auto& fmt = detail::require_key(j, "format");
  if (!fmt.is_string()) throw ValidationError("manifest.json: 'format' must be a string");
  m.format = parse_format(fmt.get<std::string>());
  if (j.contains("source")) {
    if (!j["source"].is_string()) throw ValidationError("manifest.json: 'source' must be a string");
    m.source = j["source"].get<std::string>();
  }
  return m;
}

/// Checks a record against the dump it belongs to.
inline void validate_record(const AnswerRecord& r, const ProbeManifest& m) {
  const auto L = r.length();
  if (L == 0) throw ValidationError("record '" + r.answer_id + "': empty answer (L = 0)");
  if (r.format != m.format)
    throw ValidationError("record '" + r.answer_id + "': format " + std::string(to_string(r.format)) +
                          " does not match manifest format " + std::string(to_string(m.format)));
  if (m.format == AnswerFormat::MC && L != 1)
    throw ValidationError("record '" + r.answer_id + "': MC answers must have exactly one token, got " +
                          std::to_string(L));
  if (m.format == AnswerFormat::OE && L > kMaxOeTokens)
    throw ValidationError("record '" + r.answer_id + "': OE answer length " + std::to_string(L) + " exceeds " +
                          std::to_string(kMaxOeTokens));
  if (r.label > 1) throw ValidationError("record '" + r.answer_id + "': label must be 0 or 1");
  if (r.hidden_states.size() != L * m.d_h)
    throw ValidationError("record '" + r.answer_id + "': expected " + std::to_string(L * m.d_h) +
                          " hidden-state values (L*d_h), got " + std::to_string(r.hidden_states.size()));
  for (auto t : r.token_ids)
    if (t >= m.vocab_size) throw ValidationError("record '" + r.answer_id + "': token id out of range");
  for (float v : r.hidden_states)
    if (!std::isfinite(v)) throw ValidationError("record '" + r.answer_id + "': non-finite hidden state");
}

inline constexpr std::uint32_t kDumpVersion = 1;

inline std::vector<std::uint8_t> encode_lm_head(const LMHead& head) {
  io::ByteWriter w;
  w.magic("CCPH");
  w.u32(kDumpVersion);
  w.u32(static_cast<std::uint32_t>(head.vocab_size));
  w.u32(static_cast<std::uint32_t>(head.hidden_dim));
  w.u8(head.has_bias() ? 1 : 0);
  w.f32s(head.weights);
  if (head.has_bias()) w.f32s(head.bias);
  return w.bytes();
}

inline LMHead decode_lm_head(std::span<const std::uint8_t> bytes, const std::string& name = "lm_head.bin") {
  io::ByteReader r(bytes, name);
  r.expect_magic("CCPH");
  const auto at_version = r.offset();
  if (const auto v = r.u32(); v != kDumpVersion) r.fail_at(at_version, "unsupported version " + std::to_string(v));
  LMHead head;
  const auto at_dims = r.offset();
  head.vocab_size = r.u32();
  head.hidden_dim = r.u32();
  if (head.vocab_size == 0 || head.hidden_dim == 0) r.fail_at(at_dims, "zero vocabulary or hidden size");
  const auto at_flag = r.offset();
  const auto has_bias = r.u8();
  if (has_bias > 1) r.fail_at(at_flag, "has_bias must be 0 or 1");
  const std::uint64_t n = static_cast<std::uint64_t>(head.vocab_size) * head.hidden_dim;
  r.need(n * 4);
  head.weights.resize(n);
  r.finite_f32s(head.weights, "weights");
  if (has_bias) {
    head.bias.resize(head.vocab_size);
    r.finite_f32s(head.bias, "bias");
  }
  if (!r.at_end()) r.fail("trailing bytes after LM head payload");
  return head;
}

/// Appends one records.bin frame. The record must already be validated.
inline void encode_record(io::ByteWriter& w, const AnswerRecord& rec) {
  w.u32(static_cast<std::uint32_t>(rec.length()));
  w.u32(rec.label);
  w.u32(0);
  for (auto t : rec.token_ids) w.u32(t);
  w.f32s(rec.hidden_states);
}

/// Sequential reader over a dump directory. The manifest and LM head are
/// parsed on open; records are decoded and validated one at a time by next().
class DumpReader {
 public:
  explicit DumpReader(const std::filesystem::path& dir) : dir_(dir) {
    const auto manifest_path = dir / "manifest.json";
    const auto head_path = dir / "lm_head.bin";
    const auto records_path = dir / "records.bin";
    for (const auto& p : {manifest_path, head_path, records_path})
      if (!std::filesystem::exists(p)) throw IoError("missing file: " + p.string());

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(manifest_path.string()));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("manifest.json: invalid JSON: " + std::string(e.what()));
    }
    manifest_ = manifest_from_json(j);

    head_ = decode_lm_head(io::read_file(head_path.string()), head_path.string());
    if (head_.vocab_size != manifest_.vocab_size || head_.hidden_dim != manifest_.d_h)
      throw ValidationError(head_path.string() + ": dimensions (V=" + std::to_string(head_.vocab_size) +
                            ", d_h=" + std::to_string(head_.hidden_dim) + ") disagree with manifest (V=" +
                            std::to_string(manifest_.vocab_size) + ", d_h=" + std::to_string(manifest_.d_h) + ")");

    records_bytes_ = io::read_file(records_path.string());
    reader_.emplace(records_bytes_, records_path.string());
    reader_->expect_magic("CCPR");
    const auto at_version = reader_->offset();
    if (const auto v = reader_->u32(); v != kDumpVersion)
      reader_->fail_at(at_version, "unsupported version " + std::to_string(v));
  }

  const ProbeManifest& manifest() const noexcept { return manifest_; }
  const LMHead& lm_head() const noexcept { return head_; }

  /// Next record in file order, or nullopt once record_count records have
  /// been read (after confirming there are no trailing bytes).
  std::optional<AnswerRecord> next() {
    auto& r = *reader_;
    if (index_ == manifest_.record_count) {
      if (!r.at_end()) r.fail("trailing bytes after " + std::to_string(index_) + " records");
      return std::nullopt;
    }
    r.set_record(static_cast<std::int64_t>(index_));
    if (r.at_end())
      r.fail("file ends after " + std::to_string(index_) + " of " + std::to_string(manifest_.record_count) +
             " records");

    AnswerRecord rec;
    rec.answer_id = std::to_string(index_);
    rec.format = manifest_.format;

    const auto at_len = r.offset();
    const auto L = r.u32();
    if (L == 0) r.fail_at(at_len, "answer length is zero");
    if (manifest_.format == AnswerFormat::MC && L != 1)
      r.fail_at(at_len, "MC answer length must be 1, got " + std::to_string(L));
    if (L > kMaxOeTokens) r.fail_at(at_len, "answer length " + std::to_string(L) + " exceeds " +
                                                std::to_string(kMaxOeTokens));
    const auto at_label = r.offset();
    rec.label = r.u32();
    if (rec.label > 1) r.fail_at(at_label, "label must be 0 or 1, got " + std::to_string(rec.label));
    const auto at_reserved = r.offset();
    if (r.u32() != 0) r.fail_at(at_reserved, "reserved field must be zero");

    r.need(static_cast<std::uint64_t>(L) * (4 + 4 * manifest_.d_h));
    rec.token_ids.resize(L);
    for (auto& t : rec.token_ids) {
      const auto at = r.offset();
      t = r.u32();
      if (t >= manifest_.vocab_size)
        r.fail_at(at, "token id out of range: " + std::to_string(t) + " >= V=" + std::to_string(manifest_.vocab_size));
    }
    rec.hidden_states.resize(static_cast<std::size_t>(L) * manifest_.d_h);
    r.finite_f32s(rec.hidden_states, "hidden states");
    ++index_;
    return rec;
  }

  std::size_t records_read() const noexcept { return index_; }

 private:
  std::filesystem::path dir_;
  ProbeManifest manifest_;
  LMHead head_;
  std::vector<std::uint8_t> records_bytes_;
  std::optional<io::ByteReader> reader_;
  std::size_t index_ = 0;
};

struct ProbeDump {
  ProbeManifest manifest;
  LMHead lm_head;
  std::vector<AnswerRecord> records;

  bool operator==(const ProbeDump&) const = default;
};

inline ProbeDump read_dump(const std::filesystem::path& dir) {
  DumpReader reader(dir);
  ProbeDump dump{reader.manifest(), reader.lm_head(), {}};
  dump.records.reserve(dump.manifest.record_count);
  while (auto rec = reader.next()) dump.records.push_back(std::move(*rec));
  return dump;
}

/// Writes the three dump files. Everything is validated and encoded in memory
/// first, so an invalid input never leaves partial files behind.
inline void write_dump(const ProbeManifest& manifest, const LMHead& head, std::span<const AnswerRecord> records,
                       const std::filesystem::path& dir) {
  if (manifest.d_h == 0 || manifest.vocab_size == 0) throw ValidationError("manifest d_h and vocab_size must be positive");
  if (manifest.dtype != "f32" || manifest.endianness != "little")
    throw ValidationError("only dtype f32 / little endianness are supported");
  if (manifest.record_count != records.size())
    throw ValidationError("manifest record_count " + std::to_string(manifest.record_count) + " != " +
                          std::to_string(records.size()) + " records supplied");
  head.validate();
  if (head.vocab_size != manifest.vocab_size || head.hidden_dim != manifest.d_h)
    throw ValidationError("LM head dimensions disagree with manifest");

  io::ByteWriter rw;
  rw.magic("CCPR");
  rw.u32(kDumpVersion);
  for (const auto& rec : records) {
    validate_record(rec, manifest);
    encode_record(rw, rec);
  }
  const auto head_bytes = encode_lm_head(head);
  const auto manifest_text = manifest_to_json(manifest).dump(2) + "\n";

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  io::write_text((dir / "manifest.json").string(), manifest_text);
  io::write_file((dir / "lm_head.bin").string(), head_bytes);
  io::write_file((dir / "records.bin").string(), rw.bytes());
}

inline void write_dump(const ProbeDump& dump, const std::filesystem::path& dir) {
  write_dump(dump.manifest, dump.lm_head, dump.records, dir);
}

}  // namespace ccps
