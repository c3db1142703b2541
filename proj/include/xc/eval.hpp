#pragma once

// Token-level QA metrics (EM / precision / recall / F1) with multi-reference
// maximization, whole-dataset evaluation in grounded and context-free modes,
// report rendering, and the needle-position sensitivity sweep.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "xc/error.hpp"
#include "xc/synth_data.hpp"
#include "xc/xc_model.hpp"

namespace xc {

// ---------------------------------------------------------------------------
// normalization
//
// String mode follows the SQuAD convention: lowercase, strip punctuation,
// drop the articles "a"/"an"/"the", collapse whitespace.  Token-id mode is
// the identity — synthetic answers are already canonical ids.

inline std::string normalize_text(const std::string& s) {
  std::string lowered;
  lowered.reserve(s.size());
  for (unsigned char c : s) {
    if (std::ispunct(c)) continue;
    lowered.push_back((char)std::tolower(c));
  }
  std::string out;
  size_t i = 0;
  while (i < lowered.size()) {
    while (i < lowered.size() && std::isspace((unsigned char)lowered[i])) ++i;
    size_t j = i;
    while (j < lowered.size() && !std::isspace((unsigned char)lowered[j])) ++j;
    if (j > i) {
      std::string w = lowered.substr(i, j - i);
      if (w != "a" && w != "an" && w != "the") {
        if (!out.empty()) out.push_back(' ');
        out += w;
      }
    }
    i = j;
  }
  return out;
}

inline std::vector<std::string> normalize_words(const std::string& s) {
  std::vector<std::string> out;
  std::string n = normalize_text(s);
  size_t i = 0;
  while (i < n.size()) {
    size_t j = n.find(' ', i);
    if (j == std::string::npos) j = n.size();
    out.push_back(n.substr(i, j - i));
    i = j + 1;
  }
  return out;
}

inline std::vector<int64_t> normalize(std::vector<int64_t> tokens) {
  return tokens;  // token ids are already canonical
}

// ---------------------------------------------------------------------------
// core metrics

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Multiset token overlap.  Both empty -> all ones (vacuously perfect);
// exactly one empty -> all zeros.
template <typename Tok>
Prf token_prf(const std::vector<Tok>& pred, const std::vector<Tok>& gold) {
  if (pred.empty() && gold.empty()) return {1.0, 1.0, 1.0};
  if (pred.empty() || gold.empty()) return {0.0, 0.0, 0.0};
  std::map<Tok, int64_t> counts;
  for (const Tok& t : gold) ++counts[t];
  int64_t overlap = 0;
  for (const Tok& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  Prf r;
  r.precision = (double)overlap / (double)pred.size();
  r.recall = (double)overlap / (double)gold.size();
  r.f1 = overlap == 0 ? 0.0
                      : 2.0 * r.precision * r.recall /
                            (r.precision + r.recall);
  return r;
}

template <typename Tok>
int exact_match(const std::vector<Tok>& pred, const std::vector<Tok>& gold) {
  return pred == gold ? 1 : 0;
}

// Max over references of a scalar metric; the reference list must be
// nonempty.  Different metrics may be maximized by different references,
// so callers maximize each metric independently.
template <typename Tok, typename Fn>
double best_over_references(const std::vector<Tok>& pred,
                            const std::vector<std::vector<Tok>>& references,
                            Fn&& metric) {
  if (references.empty())
    throw ContractError("best_over_references needs at least one reference");
  double best = metric(pred, references[0]);
  for (size_t i = 1; i < references.size(); ++i)
    best = std::max(best, (double)metric(pred, references[i]));
  return best;
}

// ---------------------------------------------------------------------------
// dataset evaluation

enum class EvalMode : uint8_t {
  WithContext = 0,  // cross-attention over the encoded context
  NoContext = 1,    // empty encoding; the model sees only the query
};

inline const char* eval_mode_name(EvalMode m) {
  return m == EvalMode::WithContext ? "with_context" : "no_context";
}

inline EvalMode eval_mode_from_name(const std::string& s) {
  if (s == "with_context" || s == "with-context") return EvalMode::WithContext;
  if (s == "no_context" || s == "no-context") return EvalMode::NoContext;
  throw ConfigError("unknown eval mode \"" + s + "\"");
}

// Percent-scale dataset scores.  EM <= F1 does not hold in general and is
// deliberately not an invariant.
struct EvalReport {
  EvalMode mode = EvalMode::WithContext;
  int64_t count = 0;
  double em = 0.0;         // 0..100
  double precision = 0.0;  // 0..100
  double recall = 0.0;     // 0..100
  double f1 = 0.0;         // 0..100

  void validate() const {
    if (count < 0) throw ContractError("negative record count");
    for (double v : {em, precision, recall, f1})
      if (!(v >= 0.0 && v <= 100.0))
        throw ContractError("metric outside [0, 100]");
  }
};

// Score a prediction against a record's reference answers, each metric
// maximized over references independently.
struct RecordScore {
  double em = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline RecordScore score_record(const std::vector<int64_t>& pred,
                                const QARecord& rec) {
  const auto& refs = rec.answers;
  RecordScore s;
  s.em = best_over_references(pred, refs, [](const auto& p, const auto& g) {
    return (double)exact_match(p, g);
  });
  s.precision = best_over_references(pred, refs, [](const auto& p, const auto& g) {
    return token_prf(p, g).precision;
  });
  s.recall = best_over_references(pred, refs, [](const auto& p, const auto& g) {
    return token_prf(p, g).recall;
  });
  s.f1 = best_over_references(pred, refs, [](const auto& p, const auto& g) {
    return token_prf(p, g).f1;
  });
  return s;
}

inline EvalReport score_predictions(
    const std::vector<std::vector<int64_t>>& predictions,
    const std::vector<QARecord>& records, EvalMode mode) {
  if (predictions.size() != records.size())
    throw ContractError("prediction count " +
                        std::to_string(predictions.size()) +
                        " does not match record count " +
                        std::to_string(records.size()));
  EvalReport rep;
  rep.mode = mode;
  rep.count = (int64_t)records.size();
  if (records.empty()) return rep;
  double em = 0, pr = 0, rc = 0, f1 = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    RecordScore s = score_record(predictions[i], records[i]);
    em += s.em;
    pr += s.precision;
    rc += s.recall;
    f1 += s.f1;
  }
  double n = (double)records.size();
  rep.em = 100.0 * em / n;
  rep.precision = 100.0 * pr / n;
  rep.recall = 100.0 * rc / n;
  rep.f1 = 100.0 * f1 / n;
  rep.validate();
  return rep;
}

// Greedy answer for one record.  with_context encodes the record's context;
// no_context feeds a zero-row encoding, turning every cross block into an
// identity residual — the model answers from the query alone.
inline std::vector<int64_t> predict_answer(const XCModel& m,
                                           const QARecord& rec, EvalMode mode,
                                           int64_t max_answer_tokens = 8) {
  Tensor enc = mode == EvalMode::WithContext
                   ? m.encode(rec.contexts.front())
                   : Tensor({0, m.d_enc()}, {});
  std::vector<int64_t> prompt = rec.query;
  prompt.push_back(kTokAnswer);
  return xc_greedy_generate(m, enc, prompt, max_answer_tokens, kTokEos);
}

inline EvalReport evaluate(const XCModel& m,
                           const std::vector<QARecord>& records, EvalMode mode,
                           int64_t max_answer_tokens = 8) {
  std::vector<std::vector<int64_t>> preds;
  preds.reserve(records.size());
  for (const auto& r : records)
    preds.push_back(predict_answer(m, r, mode, max_answer_tokens));
  return score_predictions(preds, records, mode);
}

// ---------------------------------------------------------------------------
// report rendering: CSV and an aligned text table, metric columns in the
// order EM, Precision, Recall, F1

struct ReportRow {
  std::string name;
  EvalReport report;
};

// Count-weighted pool of several datasets (equals scoring the concatenation).
inline ReportRow aggregate_rows(const std::vector<ReportRow>& rows) {
  ReportRow agg;
  agg.name = "aggregate";
  if (rows.empty()) return agg;
  agg.report.mode = rows.front().report.mode;
  double n = 0, em = 0, pr = 0, rc = 0, f1 = 0;
  for (const auto& r : rows) {
    double c = (double)r.report.count;
    n += c;
    em += c * r.report.em;
    pr += c * r.report.precision;
    rc += c * r.report.recall;
    f1 += c * r.report.f1;
  }
  agg.report.count = (int64_t)n;
  if (n > 0) {
    agg.report.em = em / n;
    agg.report.precision = pr / n;
    agg.report.recall = rc / n;
    agg.report.f1 = f1 / n;
  }
  return agg;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "dataset,mode,count,em,precision,recall,f1\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%lld,%.4f,%.4f,%.4f,%.4f\n",
                  r.name.c_str(), eval_mode_name(r.report.mode),
                  (long long)r.report.count, r.report.em, r.report.precision,
                  r.report.recall, r.report.f1);
    out += buf;
  }
  return out;
}

inline std::string report_table(const std::vector<ReportRow>& rows) {
  size_t w = 7;  // "dataset"
  for (const auto& r : rows) w = std::max(w, r.name.size());
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "%-*s  %12s  %7s  %8s  %9s  %8s  %8s\n", (int)w, "dataset",
                "mode", "count", "EM", "Precision", "Recall", "F1");
  std::string out = buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%-*s  %12s  %7lld  %8.2f  %9.2f  %8.2f  %8.2f\n", (int)w,
                  r.name.c_str(), eval_mode_name(r.report.mode),
                  (long long)r.report.count, r.report.em, r.report.precision,
                  r.report.recall, r.report.f1);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// needle-position sensitivity sweep: same generator settings, one corpus per
// placement variant, plus the max-min F1 spread across variants

struct SensitivityRow {
  NeedlePosition position = NeedlePosition::Begin;
  EvalReport report;
};

inline std::vector<SensitivityRow> sensitivity_sweep(
    const XCModel& m, GenConfig base, const std::vector<NeedlePosition>& positions,
    EvalMode mode = EvalMode::WithContext, int64_t max_answer_tokens = 8) {
  std::vector<SensitivityRow> rows;
  for (NeedlePosition p : positions) {
    GenConfig g = base;
    g.needle_position = p;
    auto records = generate(g);
    SensitivityRow row;
    row.position = p;
    row.report = evaluate(m, records, mode, max_answer_tokens);
    rows.push_back(row);
  }
  return rows;
}

inline double f1_spread(const std::vector<SensitivityRow>& rows) {
  if (rows.empty()) return 0.0;
  double lo = rows[0].report.f1, hi = rows[0].report.f1;
  for (const auto& r : rows) {
    lo = std::min(lo, r.report.f1);
    hi = std::max(hi, r.report.f1);
  }
  return hi - lo;
}

inline std::vector<ReportRow> sensitivity_report_rows(
    const std::vector<SensitivityRow>& rows) {
  std::vector<ReportRow> out;
  for (const auto& r : rows)
    out.push_back({needle_position_name(r.position), r.report});
  return out;
}

}  // namespace xc
