#pragma once

// Deterministic synthetic lookup corpus: key/value "facts" embedded in
// filler tokens.  A record asks for the value of one key (the needle);
// distractor facts use other keys.  Needle placement, unanswerable rate,
// and synonym answers are all controlled so retrieval behaviour can be
// probed position by position.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "xc/digest.hpp"
#include "xc/error.hpp"

namespace xc {

// Reserved token ids shared by the corpus and the task framing.
inline constexpr int64_t kTokRepeat = 0;
inline constexpr int64_t kTokFimPre = 1;
inline constexpr int64_t kTokFimSuf = 2;
inline constexpr int64_t kTokFimMid = 3;
inline constexpr int64_t kTokAnswer = 4;
inline constexpr int64_t kTokEos = 5;
inline constexpr int64_t kTokUnanswerable = 6;
inline constexpr int64_t kNumReserved = 7;

struct VocabPartition {
  int64_t n_keys = 16;
  int64_t n_values = 32;  // first half primary, second half synonyms
  int64_t n_filler = 41;

  int64_t key_base() const { return kNumReserved; }
  int64_t value_base() const { return kNumReserved + n_keys; }
  int64_t filler_base() const { return kNumReserved + n_keys + n_values; }
  int64_t total() const { return kNumReserved + n_keys + n_values + n_filler; }

  void validate() const {
    if (n_keys < 2) throw ConfigError("vocab needs at least 2 keys");
    if (n_values < 2 || n_values % 2 != 0)
      throw ConfigError("n_values must be even and >= 2 (primary + synonym halves)");
    if (n_filler < 1) throw ConfigError("vocab needs at least 1 filler token");
  }
};

enum class NeedlePosition { Begin, Middle, End, BothEnds, Random };

inline const char* needle_position_name(NeedlePosition p) {
  switch (p) {
    case NeedlePosition::Begin: return "begin";
    case NeedlePosition::Middle: return "middle";
    case NeedlePosition::End: return "end";
    case NeedlePosition::BothEnds: return "both_ends";
    case NeedlePosition::Random: return "random";
  }
  throw ConfigError("unknown needle position");
}

inline NeedlePosition needle_position_from_name(const std::string& s) {
  if (s == "begin") return NeedlePosition::Begin;
  if (s == "middle") return NeedlePosition::Middle;
  if (s == "end") return NeedlePosition::End;
  if (s == "both_ends") return NeedlePosition::BothEnds;
  if (s == "random") return NeedlePosition::Random;
  throw ConfigError("unknown needle position \"" + s +
                    "\" (want begin|middle|end|both_ends|random)");
}

struct GenConfig {
  int64_t n_records = 1000;
  int64_t context_len = 64;  // maximum; actual lengths jitter below this
  int64_t n_distractor_facts = 3;
  NeedlePosition needle_position = NeedlePosition::Random;
  double unanswerable_rate = 0.0;
  double alias_rate = 0.0;  // fraction of answerable records with a synonym reference
  VocabPartition vocab;
  uint64_t seed = 0;

  int64_t min_context_len() const { return std::max<int64_t>(12, context_len / 4); }

  void validate() const {
    vocab.validate();
    if (n_records < 0) throw ConfigError("n_records must be non-negative");
    if (context_len < 12)
      throw ConfigError("context_len must be at least 12 tokens");
    if (n_distractor_facts < 0) throw ConfigError("n_distractor_facts must be non-negative");
    if (unanswerable_rate < 0 || unanswerable_rate > 1)
      throw ConfigError("unanswerable_rate must lie in [0,1]");
    if (alias_rate < 0 || alias_rate > 1)
      throw ConfigError("alias_rate must lie in [0,1]");
    // one queried + distractors, plus a spare key for unanswerable queries
    if (n_distractor_facts + 2 > vocab.n_keys)
      throw ConfigError("n_distractor_facts " + std::to_string(n_distractor_facts) +
                        " needs more keys than vocab provides");
    // every fact span (2 tokens) must fit in the shortest jittered context,
    // with both_ends adding a second copy of the needle
    int64_t spans = n_distractor_facts + 2;
    if (2 * spans > min_context_len())
      throw ConfigError("fact spans exceed the minimum context length");
  }
};

struct QARecord {
  std::vector<std::vector<int64_t>> contexts;
  std::vector<int64_t> query;
  std::vector<std::vector<int64_t>> answers;
  bool answerable = true;

  int64_t total_context_tokens() const {
    int64_t n = 0;
    for (const auto& c : contexts) n += (int64_t)c.size();
    return n;
  }

  friend bool operator==(const QARecord& a, const QARecord& b) {
    return a.contexts == b.contexts && a.query == b.query &&
           a.answers == b.answers && a.answerable == b.answerable;
  }
};

namespace detail {

inline uint64_t record_seed(uint64_t seed, int64_t index) {
  uint64_t buf[2] = {seed, (uint64_t)index};
  return fnv1a64(buf, sizeof buf);
}

inline int64_t pick(std::mt19937_64& rng, int64_t lo, int64_t hi) {  // inclusive
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

// sample n distinct ints from [0, pool)
inline std::vector<int64_t> sample_distinct(std::mt19937_64& rng, int64_t n,
                                            int64_t pool) {
  std::vector<int64_t> all(pool);
  for (int64_t i = 0; i < pool; ++i) all[i] = i;
  for (int64_t i = 0; i < n; ++i)
    std::swap(all[(size_t)i], all[(size_t)pick(rng, i, pool - 1)]);
  all.resize((size_t)n);
  return all;
}

struct Span {
  int64_t start, len;
};

inline bool overlaps(const Span& a, const Span& b) {
  return a.start < b.start + b.len && b.start < a.start + a.len;
}

inline int64_t place_free(std::mt19937_64& rng, int64_t len, int64_t span_len,
                          const std::vector<Span>& used) {
  std::vector<int64_t> free;
  for (int64_t s = 0; s + span_len <= len; ++s) {
    Span cand{s, span_len};
    bool ok = true;
    for (const auto& u : used)
      if (overlaps(cand, u)) { ok = false; break; }
    if (ok) free.push_back(s);
  }
  if (free.empty()) throw ContractError("no free slot for a fact span");
  return free[(size_t)pick(rng, 0, (int64_t)free.size() - 1)];
}

}  // namespace detail

// Start offsets for the needle span(s) under the position contract:
// begin/end spans sit inside the first/last 10% of the context, middle
// inside the central [45%, 55%] band, both_ends one copy at each end.
inline std::vector<int64_t> needle_starts(NeedlePosition pos, int64_t len,
                                          int64_t span_len, std::mt19937_64& rng) {
  int64_t max_start = len - span_len;
  int64_t tenth = len / 10;
  switch (pos) {
    case NeedlePosition::Begin:
      return {detail::pick(rng, 0, std::min(tenth, max_start))};
    case NeedlePosition::End:
      return {detail::pick(rng, std::max<int64_t>(0, len - tenth - span_len), max_start)};
    case NeedlePosition::Middle: {
      int64_t lo = (int64_t)(0.45 * (double)len);
      int64_t hi = std::min((int64_t)std::ceil(0.55 * (double)len), max_start);
      return {detail::pick(rng, std::min(lo, hi), hi)};
    }
    case NeedlePosition::BothEnds: {
      int64_t a = detail::pick(rng, 0, std::min(tenth, max_start));
      int64_t b = detail::pick(rng, std::max<int64_t>(0, len - tenth - span_len), max_start);
      if (a + span_len > b) throw ContractError("context too short for both_ends");
      return {a, b};
    }
    case NeedlePosition::Random:
      return {detail::pick(rng, 0, max_start)};
  }
  throw ConfigError("unknown needle position");
}

inline QARecord generate_record(const GenConfig& cfg, int64_t index) {
  std::mt19937_64 rng(detail::record_seed(cfg.seed, index));
  const VocabPartition& vp = cfg.vocab;
  constexpr int64_t kSpan = 2;  // a fact is [key, value]

  int64_t len = detail::pick(rng, cfg.min_context_len(), cfg.context_len);
  bool answerable =
      std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= cfg.unanswerable_rate;

  // distinct keys: facts first, query key last when it is not a fact
  int64_t n_facts = cfg.n_distractor_facts + 1;
  std::vector<int64_t> keys = detail::sample_distinct(
      rng, answerable ? n_facts : n_facts + 1, vp.n_keys);
  int64_t query_key = answerable ? keys[0] : keys.back();

  std::vector<int64_t> values((size_t)n_facts);
  for (auto& v : values) v = detail::pick(rng, 0, vp.n_values / 2 - 1);

  std::vector<int64_t> ctx((size_t)len);
  for (auto& t : ctx) t = vp.filler_base() + detail::pick(rng, 0, vp.n_filler - 1);

  std::vector<detail::Span> used;
  auto stamp = [&](int64_t start, int64_t key, int64_t value) {
    ctx[(size_t)start] = vp.key_base() + key;
    ctx[(size_t)start + 1] = vp.value_base() + value;
    used.push_back({start, kSpan});
  };

  int64_t first_fact = 0;
  if (answerable) {
    for (int64_t s : needle_starts(cfg.needle_position, len, kSpan, rng))
      stamp(s, keys[0], values[0]);
    first_fact = 1;
  }
  for (int64_t f = first_fact; f < n_facts; ++f)
    stamp(detail::place_free(rng, len, kSpan, used), keys[(size_t)f], values[(size_t)f]);

  QARecord rec;
  rec.contexts = {std::move(ctx)};
  rec.query = {vp.key_base() + query_key};
  rec.answerable = answerable;
  if (!answerable) {
    rec.answers = {{kTokUnanswerable}};
  } else {
    rec.answers = {{vp.value_base() + values[0]}};
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.alias_rate)
      rec.answers.push_back({vp.value_base() + vp.n_values / 2 + values[0]});
  }
  return rec;
}

inline std::vector<QARecord> generate(const GenConfig& cfg) {
  cfg.validate();
  std::vector<QARecord> out;
  out.reserve((size_t)cfg.n_records);
  for (int64_t i = 0; i < cfg.n_records; ++i) out.push_back(generate_record(cfg, i));
  return out;
}

// Drop records whose combined context length exceeds the bound ("longer
// than" is strict: a record exactly at the bound survives).
inline std::vector<QARecord> pool_and_filter(const std::vector<QARecord>& records,
                                             int64_t max_context_tokens) {
  std::vector<QARecord> out;
  for (const auto& r : records)
    if (r.total_context_tokens() <= max_context_tokens) out.push_back(r);
  return out;
}

struct SplitResult {
  std::vector<QARecord> train, valid;
};

inline SplitResult split(const std::vector<QARecord>& records,
                         double holdout_fraction, uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw ConfigError("holdout fraction must lie strictly between 0 and 1");
  std::vector<size_t> idx(records.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  size_t n_valid = (size_t)std::llround(holdout_fraction * (double)records.size());
  SplitResult out;
  for (size_t i = 0; i < idx.size(); ++i)
    (i < n_valid ? out.valid : out.train).push_back(records[idx[i]]);
  return out;
}

// ---- reversible token <-> string map --------------------------------------

struct TokenMap {
  VocabPartition vocab;

  std::string to_string(int64_t id) const {
    static const char* reserved[] = {"<repeat>", "<fim_pre>", "<fim_suf>",
                                     "<fim_mid>", "<answer>", "<eos>",
                                     "UNANSWERABLE"};
    if (id < 0 || id >= vocab.total())
      throw ParseError("token id " + std::to_string(id) + " outside vocab");
    if (id < kNumReserved) return reserved[id];
    if (id < vocab.value_base()) return "k" + std::to_string(id - vocab.key_base());
    if (id < vocab.filler_base()) return "v" + std::to_string(id - vocab.value_base());
    return "w" + std::to_string(id - vocab.filler_base());
  }

  int64_t from_string(const std::string& s) const {
    static const char* reserved[] = {"<repeat>", "<fim_pre>", "<fim_suf>",
                                     "<fim_mid>", "<answer>", "<eos>",
                                     "UNANSWERABLE"};
    for (int64_t i = 0; i < kNumReserved; ++i)
      if (s == reserved[i]) return i;
    auto tail_number = [&](int64_t bound) -> int64_t {
      if (s.size() < 2) throw ParseError("unknown token \"" + s + "\"");
      int64_t n = 0;
      for (size_t i = 1; i < s.size(); ++i) {
        if (s[i] < '0' || s[i] > '9') throw ParseError("unknown token \"" + s + "\"");
        n = n * 10 + (s[i] - '0');
      }
      if (s[1] == '0' && s.size() > 2)
        throw ParseError("unknown token \"" + s + "\"");
      if (n >= bound)
        throw ParseError("token \"" + s + "\" outside the vocab partition");
      return n;
    };
    if (s[0] == 'k') return vocab.key_base() + tail_number(vocab.n_keys);
    if (s[0] == 'v') return vocab.value_base() + tail_number(vocab.n_values);
    if (s[0] == 'w') return vocab.filler_base() + tail_number(vocab.n_filler);
    throw ParseError("unknown token \"" + s + "\"");
  }

  std::string seq_to_string(const std::vector<int64_t>& seq) const {
    std::string out;
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) out.push_back(' ');
      out += to_string(seq[i]);
    }
    return out;
  }

  std::vector<int64_t> seq_from_string(const std::string& text) const {
    std::vector<int64_t> out;
    size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && text[i] == ' ') ++i;
      size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      if (j > i) out.push_back(from_string(text.substr(i, j - i)));
      i = j;
    }
    return out;
  }
};

// ---- JSONL ----------------------------------------------------------------

inline void write_jsonl(const std::vector<QARecord>& records,
                        const std::string& path, const TokenMap& map) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  for (const auto& r : records) {
    nlohmann::json j;
    j["contexts"] = nlohmann::json::array();
    for (const auto& c : r.contexts) j["contexts"].push_back(map.seq_to_string(c));
    j["query"] = map.seq_to_string(r.query);
    j["answers"] = nlohmann::json::array();
    for (const auto& a : r.answers) j["answers"].push_back(map.seq_to_string(a));
    j["answerable"] = r.answerable;
    out << j.dump() << '\n';
  }
  if (!out) throw ParseError("write failed for " + path);
}

inline std::vector<QARecord> read_jsonl(const std::string& path,
                                        const TokenMap& map) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<QARecord> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": malformed JSON: " + e.what());
    }
    auto need = [&](const char* field) -> const nlohmann::json& {
      if (!j.contains(field))
        throw ParseError(path + ":" + std::to_string(lineno) +
                         ": missing field \"" + field + "\"");
      return j.at(field);
    };
    auto need_array = [&](const char* field) -> const nlohmann::json& {
      const nlohmann::json& v = need(field);
      if (!v.is_array())
        throw ParseError(path + ":" + std::to_string(lineno) + ": field \"" +
                         field + "\" must be an array");
      return v;
    };
    try {
      QARecord r;
      for (const auto& c : need_array("contexts"))
        r.contexts.push_back(map.seq_from_string(c.get<std::string>()));
      r.query = map.seq_from_string(need("query").get<std::string>());
      for (const auto& a : need_array("answers"))
        r.answers.push_back(map.seq_from_string(a.get<std::string>()));
      r.answerable = need("answerable").get<bool>();
      if (r.answers.empty())
        throw ParseError("\"answers\" must hold at least one reference");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      std::string msg = e.what();
      if (msg.rfind(path, 0) == 0) throw;
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + msg);
    }
  }
  return out;
}

}  // namespace xc
