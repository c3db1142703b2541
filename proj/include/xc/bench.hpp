#pragma once

// Benchmarks: cache-load timing with Student-t confidence intervals, and
// exact attention MAC counts contrasting uncached prefill with cached
// generation.  Counts gate acceptance; wall-clock numbers are reported only.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "xc/cache.hpp"
#include "xc/cache_store.hpp"
#include "xc/error.hpp"

namespace xc {

// ---------------------------------------------------------------------------
// Student-t 97.5% quantile (two-sided 95% interval).  Exact table through
// df=30, then linear interpolation in 1/df down to the normal limit.

inline double t_quantile_975(int64_t df) {
  if (df < 1) throw ContractError("t quantile needs df >= 1");
  static const double low[] = {
      12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df <= 30) return low[df - 1];
  static const int64_t knots[] = {30, 40, 60, 120};
  static const double vals[] = {2.042, 2.021, 2.000, 1.980};
  const double inf_val = 1.960;
  for (int i = 0; i < 3; ++i) {
    if (df <= knots[i + 1]) {
      double x0 = 1.0 / (double)knots[i], x1 = 1.0 / (double)knots[i + 1];
      double x = 1.0 / (double)df;
      return vals[i + 1] + (vals[i] - vals[i + 1]) * (x - x1) / (x0 - x1);
    }
  }
  // beyond df=120: interpolate toward the normal quantile at 1/df = 0
  double x0 = 1.0 / 120.0, x = 1.0 / (double)df;
  return inf_val + (1.980 - inf_val) * x / x0;
}

struct CiStats {
  double mean = 0.0;
  double half_width = 0.0;  // 95% two-sided
  int64_t n = 0;
};

inline CiStats mean_ci95(const std::vector<double>& xs) {
  if (xs.size() < 2)
    throw ContractError("confidence interval needs at least two samples");
  CiStats s;
  s.n = (int64_t)xs.size();
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / (double)s.n;
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  double sd = std::sqrt(ss / (double)(s.n - 1));
  s.half_width = t_quantile_975(s.n - 1) * sd / std::sqrt((double)s.n);
  return s;
}

// ---------------------------------------------------------------------------
// load benchmark
//
// Protocol: for each strategy and context length, write one container file
// per batch sequence, then repeatedly load-and-verify the whole batch,
// timing each repetition; the first `discard` repetitions warm caches and
// are dropped, and the remainder give mean plus 95% CI.  A "load" is a
// streaming read with checksum verification and no dtype decode.

struct LoadBenchConfig {
  int64_t n_layers = 32;
  int64_t hidden = 1024;  // n_heads*head_dim == d_model == d_enc
  int64_t batch = 8;
  std::vector<int64_t> lengths = {1024, 2048, 4096, 8192};
  std::vector<CacheStrategy> strategies = {CacheStrategy::KV,
                                           CacheStrategy::JITKV,
                                           CacheStrategy::XC};
  int64_t reps = 100;
  int64_t discard = 10;
  StoreDType dtype = StoreDType::F16;
  std::string workdir = ".";

  void validate() const {
    if (n_layers <= 0 || hidden <= 0 || batch <= 0)
      throw ConfigError("load-bench geometry fields must be positive");
    if (lengths.empty()) throw ConfigError("load-bench needs context lengths");
    if (reps <= discard)
      throw UsageError("reps (" + std::to_string(reps) +
                       ") must exceed discard (" + std::to_string(discard) +
                       ")");
    if (discard < 0) throw UsageError("discard must be non-negative");
  }
};

inline std::vector<uint64_t> bench_blob_dims(const LoadBenchConfig& cfg,
                                             CacheStrategy s, int64_t len) {
  switch (s) {
    case CacheStrategy::KV:
      return {(uint64_t)cfg.n_layers, 2, (uint64_t)len, (uint64_t)cfg.hidden};
    case CacheStrategy::JITKV:
      return {(uint64_t)cfg.n_layers, (uint64_t)len, (uint64_t)cfg.hidden};
    case CacheStrategy::XC:
      return {(uint64_t)len, (uint64_t)cfg.hidden};
  }
  throw ContractError("unknown strategy");
}

// Deterministic filler payload, streamed without materializing the blob.
inline void write_bench_blob(const std::string& path,
                             const std::vector<uint64_t>& dims,
                             StoreDType dtype, uint8_t kind, uint64_t seed) {
  StoreHeader h;
  h.kind = kind;
  h.dtype = dtype;
  h.dims = dims;
  h.digest = seed;
  uint64_t total = h.scalar_count() * dtype_bytes(dtype);
  h.payload_bytes = total;
  StoreWriter w(path, h);
  std::vector<unsigned char> buf(1 << 22);
  std::mt19937_64 rng(seed);
  for (size_t i = 0; i < buf.size(); i += 8) {
    uint64_t v = rng();
    std::memcpy(buf.data() + i, &v, 8);
  }
  uint64_t left = total;
  while (left > 0) {
    size_t take = (size_t)std::min<uint64_t>(left, buf.size());
    w.write_payload(buf.data(), take);
    left -= take;
  }
  w.close();
}

struct LoadCell {
  CacheStrategy strategy = CacheStrategy::KV;
  int64_t context_len = 0;
  uint64_t file_bytes = 0;     // on-disk total across the batch
  uint64_t payload_bytes = 0;  // cache data alone, excluding container framing
  CiStats stats;               // seconds per batch load
};

// One (strategy, length) measurement: create the batch files, time the
// repetitions, remove the files before returning so peak disk usage stays
// one cell.
inline LoadCell bench_load_cell(const LoadBenchConfig& cfg, CacheStrategy s,
                                int64_t len) {
  namespace fs = std::filesystem;
  LoadCell cell;
  cell.strategy = s;
  cell.context_len = len;
  std::vector<std::string> files;
  for (int64_t i = 0; i < cfg.batch; ++i) {
    std::string path = (fs::path(cfg.workdir) /
                        (std::string(strategy_name(s)) + "_len" +
                         std::to_string(len) + "_seq" + std::to_string(i) +
                         ".xcc"))
                           .string();
    write_bench_blob(path, bench_blob_dims(cfg, s, len), cfg.dtype,
                     (uint8_t)s, 0x9000u + (uint64_t)i);
    files.push_back(path);
    cell.file_bytes += (uint64_t)fs::file_size(path);
    std::ifstream in(path, std::ios::binary);
    cell.payload_bytes += read_stored_header(in, path).payload_bytes;
  }
  std::vector<double> times;
  for (int64_t r = 0; r < cfg.reps; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    for (const auto& f : files) verify_stored(f);
    auto t1 = std::chrono::steady_clock::now();
    if (r >= cfg.discard)
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  for (const auto& f : files) fs::remove(f);
  cell.stats = mean_ci95(times);
  return cell;
}

inline std::vector<LoadCell> run_load_bench(const LoadBenchConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.workdir);
  std::vector<LoadCell> cells;
  for (CacheStrategy s : cfg.strategies)
    for (int64_t len : cfg.lengths) cells.push_back(bench_load_cell(cfg, s, len));
  return cells;
}

inline std::string load_bench_csv(const std::vector<LoadCell>& cells) {
  std::string out =
      "strategy,context_len,file_bytes,payload_bytes,samples,mean_s,"
      "ci95_half_width_s\n";
  char buf[256];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%s,%lld,%llu,%llu,%lld,%.9g,%.9g\n",
                  strategy_name(c.strategy), (long long)c.context_len,
                  (unsigned long long)c.file_bytes,
                  (unsigned long long)c.payload_bytes, (long long)c.stats.n,
                  c.stats.mean, c.stats.half_width);
    out += buf;
  }
  return out;
}

// Appendix-shaped table: one row per strategy, one column per context
// length, cells "mean ± ci" in seconds.
inline std::string load_bench_table(const std::vector<LoadCell>& cells) {
  std::vector<int64_t> lengths;
  std::vector<CacheStrategy> strategies;
  for (const auto& c : cells) {
    if (std::find(lengths.begin(), lengths.end(), c.context_len) == lengths.end())
      lengths.push_back(c.context_len);
    if (std::find(strategies.begin(), strategies.end(), c.strategy) ==
        strategies.end())
      strategies.push_back(c.strategy);
  }
  std::sort(lengths.begin(), lengths.end());
  char buf[128];
  std::string out = "load time, seconds (mean +/- 95% CI)\n";
  std::snprintf(buf, sizeof buf, "%-8s", "");
  out += buf;
  for (int64_t l : lengths) {
    std::snprintf(buf, sizeof buf, " %20lld", (long long)l);
    out += buf;
  }
  out += "\n";
  for (CacheStrategy s : strategies) {
    std::snprintf(buf, sizeof buf, "%-8s", strategy_name(s));
    out += buf;
    for (int64_t l : lengths) {
      const LoadCell* cell = nullptr;
      for (const auto& c : cells)
        if (c.strategy == s && c.context_len == l) cell = &c;
      if (!cell) {
        std::snprintf(buf, sizeof buf, " %20s", "-");
      } else {
        char val[64];
        std::snprintf(val, sizeof val, "%.4f +/- %.4f", cell->stats.mean,
                      cell->stats.half_width);
        std::snprintf(buf, sizeof buf, " %20s", val);
      }
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention MAC benchmark
//
// Self-attention counts come from the counters in cache.hpp; the XC variant
// adds cross-attention reads of the cached encoding.  |query|+|answer| is
// held fixed while |context| sweeps, so uncached prefill grows
// quadratically and cached generation linearly.

struct AttnBenchConfig {
  MacGeometry self;
  int64_t cross_modules = 0;  // interleaved + final cross blocks
  int64_t cross_heads = 0;
  int64_t cross_head_dim = 0;
  int64_t t_query = 24;
  int64_t t_answer = 8;
  std::vector<int64_t> lengths = {256, 512, 1024, 2048, 4096};

  void validate() const {
    if (self.n_layers <= 0 || self.n_heads <= 0 || self.head_dim <= 0)
      throw ConfigError("attention geometry fields must be positive");
    if (t_query <= 0 || t_answer <= 0)
      throw ConfigError("query/answer lengths must be positive");
    if (lengths.size() < 2)
      throw ConfigError("MAC sweep needs at least two context lengths");
  }
};

// Cross-attention MACs for generation over a cached encoding of C rows:
// the query prefill processes t_query rows and each of the t_answer-1
// incremental steps processes one more, each row attending all C keys.
inline uint64_t macs_cross_reads(const AttnBenchConfig& cfg, int64_t C) {
  uint64_t unit = (uint64_t)cfg.cross_modules * (uint64_t)cfg.cross_heads *
                  2u * (uint64_t)cfg.cross_head_dim;
  uint64_t rows = (uint64_t)(cfg.t_query + cfg.t_answer - 1);
  return unit * rows * (uint64_t)C;
}

// XC cached generation: the decoder self-attends only among query+answer
// tokens and reads the context exclusively through cross-attention.
inline uint64_t macs_xc_cached_answer(const AttnBenchConfig& cfg, int64_t C) {
  uint64_t self = macs_prefill(cfg.self, cfg.t_query) +
                  macs_generate_extension(cfg.self, cfg.t_query, cfg.t_answer);
  return self + macs_cross_reads(cfg, C);
}

struct AttnRow {
  int64_t context = 0;
  uint64_t uncached = 0;   // full prefill of context+query, then answer
  uint64_t kv_cached = 0;  // context K/V cached; query+answer processed
  uint64_t xc_cached = 0;  // encoding cached; cross-attention reads
};

inline std::vector<AttnRow> run_attn_counts(const AttnBenchConfig& cfg) {
  cfg.validate();
  std::vector<AttnRow> rows;
  for (int64_t C : cfg.lengths) {
    AttnRow r;
    r.context = C;
    r.uncached = macs_uncached_answer(cfg.self, C, cfg.t_query, cfg.t_answer);
    r.kv_cached = macs_cached_answer(cfg.self, C, cfg.t_query, cfg.t_answer);
    r.xc_cached = macs_xc_cached_answer(cfg, C);
    rows.push_back(r);
  }
  return rows;
}

struct SlopeFit {
  double uncached = 0.0;
  double kv_cached = 0.0;
  double xc_cached = 0.0;
};

inline SlopeFit fit_attn_slopes(const std::vector<AttnRow>& rows) {
  std::vector<double> xs, yu, yk, yx;
  for (const auto& r : rows) {
    xs.push_back((double)r.context);
    yu.push_back((double)r.uncached);
    yk.push_back((double)r.kv_cached);
    yx.push_back((double)r.xc_cached);
  }
  SlopeFit f;
  f.uncached = loglog_slope(xs, yu);
  f.kv_cached = loglog_slope(xs, yk);
  f.xc_cached = loglog_slope(xs, yx);
  return f;
}

inline std::string attn_counts_csv(const std::vector<AttnRow>& rows) {
  std::string out = "context,uncached_macs,kv_cached_macs,xc_cached_macs\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%llu,%llu,%llu\n",
                  (long long)r.context, (unsigned long long)r.uncached,
                  (unsigned long long)r.kv_cached,
                  (unsigned long long)r.xc_cached);
    out += buf;
  }
  return out;
}

}  // namespace xc
