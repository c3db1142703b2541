// Command layer: config resolution, Student-t intervals, manifests, load
// and MAC benchmarks, and the xcl binary end to end (exit codes, artifact
// determinism, cached-vs-direct eval identity).

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xc/cli.hpp"

namespace fs = std::filesystem;
using namespace xc;

namespace {

fs::path fresh_dir(const std::string& tag) {
  static int counter = 0;
  fs::path d = fs::temp_directory_path() /
               ("xcl_test_" + std::to_string(::getpid()) + "_" + tag + "_" +
                std::to_string(counter++));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  out << text;
}

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

RunResult run_xcl(const std::string& args) {
  fs::path io = fresh_dir("io");
  std::string cmd = std::string(XCL_BIN) + " " + args + " >" +
                    (io / "out.txt").string() + " 2>" +
                    (io / "err.txt").string();
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(io / "out.txt");
  r.err = slurp(io / "err.txt");
  return r;
}

// Small-but-real training setup: finishes in a few seconds on one core.
std::string tiny_train_flags(const fs::path& out, uint64_t seed) {
  return "train --preset toy --seed " + std::to_string(seed) + " --out " +
         out.string() +
         " --set model.n_layers=2 --set model.d_model=32"
         " --set model.head_dim=16 --set model.max_seq=64"
         " --set model.vocab=64 --set xc.cross_layers=1"
         " --set xc.cross_hidden=32 --set enc.d_enc=32"
         " --set enc.max_positions=32 --set train.total_steps=20"
         " --set train.warmup_steps=2 --set train.batch=4"
         " --set gen.n_records=30 --set gen.context_len=16"
         " --set gen.distractors=1 --set gen.n_filler=9";
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration layer

TEST(Config, PresetsCarryOnlyKnownKeys) {
  for (const char* name : {"toy", "reference"}) {
    ConfigMap cfg = preset_config(name);
    for (const auto& [k, v] : cfg) EXPECT_NO_THROW(check_config_key(k)) << k;
    EXPECT_EQ(cfg.at("preset"), name);
  }
  EXPECT_THROW(preset_config("huge"), UsageError);
}

TEST(Config, FileParsingHandlesCommentsBlanksAndWhitespace) {
  fs::path d = fresh_dir("cfg");
  spit(d / "a.cfg",
       "# full-line comment\n"
       "\n"
       "  seed = 42   # trailing comment\n"
       "model.d_model=64\n");
  ConfigMap cfg = parse_config_file((d / "a.cfg").string());
  EXPECT_EQ(cfg.size(), 2u);
  EXPECT_EQ(cfg.at("seed"), "42");
  EXPECT_EQ(cfg.at("model.d_model"), "64");

  spit(d / "bad.cfg", "model.d_model 64\n");
  EXPECT_THROW(parse_config_file((d / "bad.cfg").string()), ParseError);
  EXPECT_THROW(parse_config_file((d / "missing.cfg").string()), ParseError);
}

TEST(Config, UnknownKeyIsAUsageErrorNamingTheKey) {
  fs::path d = fresh_dir("cfg");
  spit(d / "a.cfg", "model.depth=4\n");
  try {
    parse_config_file((d / "a.cfg").string());
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("model.depth"), std::string::npos);
  }
  ConfigMap cfg = toy_preset();
  EXPECT_THROW(apply_override(cfg, "train.stepz=10"), UsageError);
  EXPECT_THROW(apply_override(cfg, "no-equals-sign"), UsageError);
}

TEST(Config, LayerPrecedenceIsPresetFileOverrideSeed) {
  fs::path d = fresh_dir("cfg");
  spit(d / "a.cfg", "seed=7\ntrain.batch=16\n");
  ConfigMap cfg = resolve_config("toy", (d / "a.cfg").string(),
                                 {"train.batch=8"}, uint64_t{99});
  EXPECT_EQ(cfg.at("seed"), "99");           // flag beats file
  EXPECT_EQ(cfg.at("train.batch"), "8");     // override beats file
  EXPECT_EQ(cfg.at("train.total_steps"), toy_preset().at("train.total_steps"));
}

TEST(Config, TypedGettersRejectMalformedValues) {
  ConfigMap cfg = toy_preset();
  EXPECT_EQ(cfg_i64(cfg, "train.batch"), 32);
  EXPECT_DOUBLE_EQ(cfg_f64(cfg, "train.base_lr"), 0.004);
  cfg["train.batch"] = "12x";
  EXPECT_THROW(cfg_i64(cfg, "train.batch"), ConfigError);
  cfg["train.base_lr"] = "fast";
  EXPECT_THROW(cfg_f64(cfg, "train.base_lr"), ConfigError);
  EXPECT_THROW(cfg_str(cfg, "train.momentum"), ConfigError);
}

TEST(Config, BuildersProduceValidatedStructures) {
  ConfigMap cfg = toy_preset();
  DecoderConfig dc = decoder_config_from(cfg);
  EXPECT_EQ(dc.n_layers, 4);
  EXPECT_EQ(dc.d_model, 96);
  XCConfig x = xc_config_from(cfg);
  EXPECT_EQ(x.n_cross_layers, 2);
  EXPECT_EQ(x.encoder_kind, EncoderKind::SmallBidirectional);
  TrainConfig tc = train_config_from(cfg);
  EXPECT_EQ(tc.total_steps, 2000);
  GenConfig g = gen_config_from(cfg);
  EXPECT_EQ(g.n_records, 5000);
  EXPECT_EQ(g.vocab.total(), 96);
  cfg["xc.encoder"] = "rnn";
  EXPECT_THROW(xc_config_from(cfg), ConfigError);
}

// ---------------------------------------------------------------------------
// Student-t 97.5% quantiles

TEST(StudentT, MatchesPublishedTableRows) {
  EXPECT_NEAR(t_quantile_975(1), 12.706, 1e-9);
  EXPECT_NEAR(t_quantile_975(2), 4.303, 1e-9);
  EXPECT_NEAR(t_quantile_975(5), 2.571, 1e-9);
  EXPECT_NEAR(t_quantile_975(30), 2.042, 1e-9);
  EXPECT_NEAR(t_quantile_975(40), 2.021, 1e-9);
  EXPECT_NEAR(t_quantile_975(60), 2.000, 1e-9);
  EXPECT_NEAR(t_quantile_975(120), 1.980, 1e-9);
  EXPECT_NEAR(t_quantile_975(1000000), 1.960, 1e-3);
  EXPECT_THROW(t_quantile_975(0), ContractError);
}

// Independent oracle: integrate the t density numerically and require the
// CDF at the returned quantile to be 0.975.  Covers both the frozen table
// and the 1/df interpolation between knots.
TEST(StudentT, QuantilesAgreeWithNumericalCdfIntegration) {
  auto t_cdf = [](double x, double nu) {
    double log_c = std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2) -
                   0.5 * std::log(nu * M_PI);
    auto pdf = [&](double u) {
      return std::exp(log_c - (nu + 1) / 2 * std::log1p(u * u / nu));
    };
    const int n = 4000;  // Simpson over [0, x]
    double h = x / n, acc = pdf(0.0) + pdf(x);
    for (int i = 1; i < n; ++i) acc += pdf(i * h) * (i % 2 ? 4.0 : 2.0);
    return 0.5 + acc * h / 3.0;
  };
  for (int64_t df : {3, 10, 25, 45, 90, 200, 5000}) {
    double q = t_quantile_975(df);
    EXPECT_NEAR(t_cdf(q, (double)df), 0.975, 2e-3) << "df " << df;
  }
}

TEST(StudentT, MeanCi95MatchesHandComputation) {
  CiStats s = mean_ci95({1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(s.n, 4);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  // df=3: t=3.182, sample sd sqrt(5/3)
  EXPECT_NEAR(s.half_width, 3.182 * std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
  CiStats z = mean_ci95({7.0, 7.0, 7.0});
  EXPECT_DOUBLE_EQ(z.half_width, 0.0);
  EXPECT_THROW(mean_ci95({1.0}), ContractError);
}

// ---------------------------------------------------------------------------
// run manifests

TEST(Manifest, FileDigestMatchesKnownFnvVector) {
  fs::path d = fresh_dir("man");
  spit(d / "abc.txt", "abc");
  // published FNV-1a 64 test vector
  EXPECT_EQ(file_digest((d / "abc.txt").string()), 0xe71fa2190541574bULL);
  spit(d / "empty.txt", "");
  EXPECT_EQ(file_digest((d / "empty.txt").string()), 0xcbf29ce484222325ULL);
  EXPECT_THROW(file_digest((d / "nope.txt").string()), ParseError);
}

TEST(Manifest, RoundTripPreservesAllFields) {
  fs::path d = fresh_dir("man");
  spit(d / "in.jsonl", "{}\n");
  spit(d / "out.csv", "a,b\n");
  RunManifest m;
  m.command = "train";
  m.config = {{"seed", "7"}, {"train.batch", "4"}};
  m.seed = 7;
  m.started_at = utc_timestamp();
  m.add_input((d / "in.jsonl").string(), "dataset");
  m.add_output((d / "out.csv").string(), "report");
  m.finished_at = utc_timestamp();
  m.save((d / "manifest.json").string());

  RunManifest r = RunManifest::load((d / "manifest.json").string());
  EXPECT_EQ(r.command, m.command);
  EXPECT_EQ(r.config, m.config);
  EXPECT_EQ(r.seed, m.seed);
  ASSERT_EQ(r.inputs.size(), 1u);
  ASSERT_EQ(r.outputs.size(), 1u);
  EXPECT_EQ(r.inputs[0].path, m.inputs[0].path);
  EXPECT_EQ(r.inputs[0].role, "dataset");
  EXPECT_EQ(r.inputs[0].digest, m.inputs[0].digest);
  EXPECT_EQ(r.outputs[0].digest,
            file_digest((d / "out.csv").string()));

  spit(d / "manifest.json", "not json");
  EXPECT_THROW(RunManifest::load((d / "manifest.json").string()), ParseError);
}

// ---------------------------------------------------------------------------
// load benchmark machinery

TEST(BenchLoad, BlobDimsFollowStrategyShapes) {
  LoadBenchConfig cfg;
  cfg.n_layers = 32;
  cfg.hidden = 1024;
  auto kv = bench_blob_dims(cfg, CacheStrategy::KV, 512);
  auto jit = bench_blob_dims(cfg, CacheStrategy::JITKV, 512);
  auto xcd = bench_blob_dims(cfg, CacheStrategy::XC, 512);
  EXPECT_EQ(kv, (std::vector<uint64_t>{32, 2, 512, 1024}));
  EXPECT_EQ(jit, (std::vector<uint64_t>{32, 512, 1024}));
  EXPECT_EQ(xcd, (std::vector<uint64_t>{512, 1024}));
}

TEST(BenchLoad, RepsMustExceedDiscard) {
  LoadBenchConfig cfg;
  cfg.workdir = fresh_dir("bl").string();
  cfg.reps = 5;
  cfg.discard = 5;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.discard = 6;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.discard = 4;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(BenchLoad, CellMeasurementIsWellFormedAndCleansUp) {
  LoadBenchConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden = 8;
  cfg.batch = 2;
  cfg.lengths = {16};
  cfg.reps = 5;
  cfg.discard = 2;
  cfg.workdir = fresh_dir("bl").string();
  for (CacheStrategy s :
       {CacheStrategy::KV, CacheStrategy::JITKV, CacheStrategy::XC}) {
    LoadCell c = bench_load_cell(cfg, s, 16);
    uint64_t scalars = 1;
    for (uint64_t dim : bench_blob_dims(cfg, s, 16)) scalars *= dim;
    EXPECT_EQ(c.payload_bytes, 2 * scalars * 2) << strategy_name(s);
    EXPECT_GT(c.file_bytes, c.payload_bytes);
    EXPECT_EQ(c.stats.n, 3);
    EXPECT_GT(c.stats.mean, 0.0);
    EXPECT_GE(c.stats.half_width, 0.0);
  }
  EXPECT_TRUE(fs::is_empty(cfg.workdir)) << "blob files must be removed";
}

// The geometry-determined payload ratio: KV stores 2·L slabs of `hidden`
// per token, XC stores one, so the ratio is exactly 2·L at any length.
TEST(BenchLoad, KvToXcPayloadRatioIsExactlyTwiceTheLayerCount) {
  LoadBenchConfig cfg;
  cfg.n_layers = 32;
  cfg.hidden = 16;  // keep the files small; the ratio ignores hidden
  cfg.batch = 1;
  cfg.reps = 3;
  cfg.discard = 1;
  cfg.workdir = fresh_dir("bl").string();
  for (int64_t len : {64, 128}) {
    LoadCell kv = bench_load_cell(cfg, CacheStrategy::KV, len);
    LoadCell xcc = bench_load_cell(cfg, CacheStrategy::XC, len);
    EXPECT_EQ(kv.payload_bytes, 64u * xcc.payload_bytes) << len;
  }
}

TEST(BenchLoad, CsvListsEveryCellWithSampleCounts) {
  LoadBenchConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden = 8;
  cfg.batch = 1;
  cfg.lengths = {16, 32};
  cfg.reps = 4;
  cfg.discard = 1;
  cfg.workdir = fresh_dir("bl").string();
  auto cells = run_load_bench(cfg);
  EXPECT_EQ(cells.size(), 6u);  // 3 strategies x 2 lengths
  std::string csv = load_bench_csv(cells);
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line,
            "strategy,context_len,file_bytes,payload_bytes,samples,mean_s,"
            "ci95_half_width_s");
  int rows = 0;
  while (std::getline(ss, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 6);
  std::string table = load_bench_table(cells);
  EXPECT_NE(table.find("kv"), std::string::npos);
  EXPECT_NE(table.find("jitkv"), std::string::npos);
  EXPECT_NE(table.find("+/-"), std::string::npos);
}

// ---------------------------------------------------------------------------
// attention MAC counts

// Independent oracle: walk the decode token by token, charging unit MACs
// per (row, visible key) pair, instead of using the closed forms.
namespace {

uint64_t sim_uncached(const MacGeometry& g, int64_t C, int64_t Tq,
                      int64_t Ta) {
  uint64_t keys = 0;
  int64_t processed = 0;
  for (int64_t i = 0; i < C + Tq; ++i) keys += (uint64_t)(++processed);
  for (int64_t j = 1; j < Ta; ++j) keys += (uint64_t)(++processed);
  return g.unit() * keys;
}

uint64_t sim_kv_cached(const MacGeometry& g, int64_t C, int64_t Tq,
                       int64_t Ta) {
  uint64_t keys = 0;
  int64_t processed = C;  // context rows were paid for when cached
  for (int64_t i = 0; i < Tq; ++i) keys += (uint64_t)(++processed);
  for (int64_t j = 1; j < Ta; ++j) keys += (uint64_t)(++processed);
  return g.unit() * keys;
}

}  // namespace

TEST(BenchAttn, ClosedFormsMatchStepwiseSimulation) {
  MacGeometry g{4, 2, 48};
  for (int64_t C : {7, 64, 333}) {
    for (int64_t Ta : {1, 2, 8}) {
      EXPECT_EQ(macs_uncached_answer(g, C, 24, Ta), sim_uncached(g, C, 24, Ta))
          << C << " " << Ta;
      EXPECT_EQ(macs_cached_answer(g, C, 24, Ta), sim_kv_cached(g, C, 24, Ta))
          << C << " " << Ta;
    }
  }
}

TEST(BenchAttn, CrossReadsChargeEveryProcessedRowAgainstTheFullContext) {
  AttnBenchConfig cfg;
  cfg.self = {4, 2, 48};
  cfg.cross_modules = 3;
  cfg.cross_heads = 2;
  cfg.cross_head_dim = 48;
  cfg.t_query = 24;
  cfg.t_answer = 8;
  // 24 query rows + 7 emitted-answer rows, each reading C keys
  uint64_t unit = 3ull * 2ull * 2ull * 48ull;
  EXPECT_EQ(macs_cross_reads(cfg, 1000), unit * 31ull * 1000ull);
  uint64_t self_only =
      macs_prefill(cfg.self, 24) + macs_generate_extension(cfg.self, 24, 8);
  EXPECT_EQ(macs_xc_cached_answer(cfg, 1000), self_only + unit * 31ull * 1000ull);
}

TEST(BenchAttn, SlopesSeparateQuadraticFromLinear) {
  AttnBenchConfig cfg;
  cfg.self = {4, 2, 48};
  cfg.cross_modules = 3;
  cfg.cross_heads = 2;
  cfg.cross_head_dim = 48;
  cfg.t_query = 24;
  cfg.t_answer = 8;
  cfg.lengths = {256, 512, 1024, 2048, 4096};
  auto rows = run_attn_counts(cfg);
  ASSERT_EQ(rows.size(), 5u);
  for (size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GT(rows[i].uncached, rows[i - 1].uncached);
    EXPECT_GT(rows[i].kv_cached, rows[i - 1].kv_cached);
    EXPECT_GT(rows[i].xc_cached, rows[i - 1].xc_cached);
  }
  SlopeFit fit = fit_attn_slopes(rows);
  EXPECT_NEAR(fit.uncached, 2.0, 0.2);
  EXPECT_NEAR(fit.kv_cached, 1.0, 0.1);
  EXPECT_NEAR(fit.xc_cached, 1.0, 0.1);
  std::string csv = attn_counts_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "context,uncached_macs,kv_cached_macs,xc_cached_macs");
}

// ---------------------------------------------------------------------------
// stored-container verification (the unit the load benchmark times)

TEST(VerifyStored, AcceptsIntactFilesAndDetectsTampering) {
  fs::path d = fresh_dir("vs");
  CacheBlob b;
  b.strategy = CacheStrategy::XC;
  b.config_digest = 0xabcd;
  b.tokens = 4;
  b.geom.d_enc = 8;
  b.data.assign(32, 1.5f);
  std::string path = (d / "blob.xcc").string();
  save_cache_blob(b, path, StoreDType::F32);

  StoreHeader h = verify_stored(path);
  EXPECT_EQ(h.kind, (uint8_t)CacheStrategy::XC);
  EXPECT_EQ(h.digest, 0xabcdu);
  EXPECT_EQ(h.payload_bytes, 32u * 4u);

  // flip one payload byte in the middle
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-40, std::ios::end);
    char c;
    f.read(&c, 1);
    f.seekp(-40, std::ios::end);
    c ^= 0x20;
    f.write(&c, 1);
  }
  try {
    verify_stored(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }

  // truncation is also caught
  fs::resize_file(path, fs::file_size(path) - 3);
  EXPECT_THROW(verify_stored(path), ParseError);
}

// ---------------------------------------------------------------------------
// the binary

TEST(Binary, HelpExitsZero) {
  EXPECT_EQ(run_xcl("--help").exit_code, 0);
  EXPECT_EQ(run_xcl("cache --help").exit_code, 0);
}

TEST(Binary, UsageErrorsExitTwo) {
  EXPECT_EQ(run_xcl("frobnicate").exit_code, 2);
  EXPECT_EQ(run_xcl("train").exit_code, 2);  // missing --out
  EXPECT_EQ(run_xcl("eval --model a --data b").exit_code, 2);
  fs::path d = fresh_dir("bin");
  EXPECT_EQ(
      run_xcl("bench-load --out " + d.string() + " --reps 3 --discard 3")
          .exit_code,
      2);
}

TEST(Binary, UnknownConfigKeyExitsTwoNamingTheKey) {
  fs::path d = fresh_dir("bin");
  RunResult r = run_xcl("train --preset toy --set bogus.key=1 --out " +
                        (d / "m").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("bogus.key"), std::string::npos);
}

TEST(Binary, CacheSizesReproducesReferenceTable) {
  RunResult r = run_xcl("cache sizes --preset reference");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("512.000 kB"), std::string::npos);
  EXPECT_NE(r.out.find("256.000 kB"), std::string::npos);
  EXPECT_NE(r.out.find("8.000 kB"), std::string::npos);
  EXPECT_NE(r.out.find("1.500 kB"), std::string::npos);
}

TEST(Binary, TrainEvalCacheCycleWorksEndToEnd) {
  fs::path d = fresh_dir("cycle");
  fs::path model = d / "model";
  RunResult tr = run_xcl(tiny_train_flags(model, 5));
  ASSERT_EQ(tr.exit_code, 0) << tr.err;
  for (const char* f : {"ckpt.params.xcc", "ckpt.state.json", "model.json",
                        "train_log.csv", "data.jsonl", "manifest.json"})
    EXPECT_TRUE(fs::exists(model / f)) << f;

  // eval in both modes writes the report pair and the grounding-gap line
  fs::path ev = d / "ev";
  RunResult er = run_xcl("eval --model " + model.string() + " --data " +
                         (model / "data.jsonl").string() +
                         " --mode both --out " + ev.string());
  ASSERT_EQ(er.exit_code, 0) << er.err;
  EXPECT_NE(er.out.find("with_context"), std::string::npos);
  EXPECT_NE(er.out.find("no_context"), std::string::npos);
  EXPECT_NE(er.out.find("grounding gap"), std::string::npos);
  std::string csv = slurp(ev / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "dataset,mode,count,em,precision,recall,f1");

  // precomputed XC blobs must reproduce the direct evaluation bit for bit
  fs::path cache = d / "cache";
  RunResult cb = run_xcl("cache build --model " + model.string() + " --data " +
                         (model / "data.jsonl").string() +
                         " --strategy xc --dtype f32 --out " + cache.string());
  ASSERT_EQ(cb.exit_code, 0) << cb.err;
  EXPECT_TRUE(fs::exists(cache / "rec_000000.xcc"));
  EXPECT_TRUE(fs::exists(cache / "sizes.csv"));

  fs::path ev2 = d / "ev2";
  RunResult er2 = run_xcl("eval --model " + model.string() + " --data " +
                          (model / "data.jsonl").string() +
                          " --mode with-context --cache-dir " + cache.string() +
                          " --out " + ev2.string());
  ASSERT_EQ(er2.exit_code, 0) << er2.err;
  std::string direct_line = slurp(ev / "report.csv");
  std::string cached = slurp(ev2 / "report.csv");
  // first data row of the direct both-mode report is the with_context row
  size_t h = direct_line.find('\n');
  size_t e = direct_line.find('\n', h + 1);
  EXPECT_EQ(cached, direct_line.substr(0, e + 1));

  // pointing --cache-dir at a missing directory is a usage error
  EXPECT_EQ(run_xcl("eval --model " + model.string() + " --data " +
                    (model / "data.jsonl").string() +
                    " --mode with-context --cache-dir " +
                    (d / "nope").string() + " --out " + (d / "ev3").string())
                .exit_code,
            2);

  // inspect prints the header; corrupting the file turns exit 0 into 3
  std::string blob = (cache / "rec_000002.xcc").string();
  RunResult ins = run_xcl("cache inspect " + blob);
  EXPECT_EQ(ins.exit_code, 0);
  EXPECT_NE(ins.out.find("kind     xc"), std::string::npos);
  EXPECT_NE(ins.out.find("checksum ok"), std::string::npos);
  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-9, std::ios::end);
    char c;
    f.read(&c, 1);
    f.seekp(-9, std::ios::end);
    c ^= 0x01;
    f.write(&c, 1);
  }
  RunResult bad = run_xcl("cache inspect " + blob);
  EXPECT_EQ(bad.exit_code, 3);
  EXPECT_NE(bad.err.find("checksum"), std::string::npos);

  // report merges the two eval CSVs and appends a count-weighted aggregate
  fs::path rp = d / "rp";
  RunResult rr = run_xcl("report " + (ev / "report.csv").string() + " " +
                         (ev2 / "report.csv").string() + " --out " +
                         rp.string());
  ASSERT_EQ(rr.exit_code, 0) << rr.err;
  EXPECT_NE(rr.out.find("aggregate"), std::string::npos);
  EXPECT_NE(slurp(rp / "report.csv").find("aggregate"), std::string::npos);
  EXPECT_EQ(run_xcl("report --out " + (d / "rp2").string()).exit_code, 2);
}

TEST(Binary, RerunsProduceBitIdenticalArtifacts) {
  fs::path d = fresh_dir("determinism");
  RunResult a = run_xcl(tiny_train_flags(d / "m1", 5));
  RunResult b = run_xcl(tiny_train_flags(d / "m2", 5));
  ASSERT_EQ(a.exit_code, 0) << a.err;
  ASSERT_EQ(b.exit_code, 0) << b.err;
  for (const char* f :
       {"data.jsonl", "train_log.csv", "ckpt.params.xcc", "model.json"})
    EXPECT_EQ(file_digest((d / "m1" / f).string()),
              file_digest((d / "m2" / f).string()))
        << f;
  // and the recorded manifest digests agree artifact by artifact
  auto da = output_digests(RunManifest::load((d / "m1" / "manifest.json").string()));
  auto db = output_digests(RunManifest::load((d / "m2" / "manifest.json").string()));
  ASSERT_EQ(da.size(), db.size());
  for (auto ita = da.begin(), itb = db.begin(); ita != da.end(); ++ita, ++itb)
    EXPECT_EQ(ita->second, itb->second) << ita->first;
  // a different seed must change the corpus
  RunResult c = run_xcl(tiny_train_flags(d / "m3", 6));
  ASSERT_EQ(c.exit_code, 0) << c.err;
  EXPECT_NE(file_digest((d / "m1" / "data.jsonl").string()),
            file_digest((d / "m3" / "data.jsonl").string()));
}

TEST(Binary, BenchAttnWritesCountsAndSlopes) {
  fs::path d = fresh_dir("ba");
  RunResult r = run_xcl("bench-attn --out " + d.string());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("log-log slopes"), std::string::npos);
  std::string csv = slurp(d / "attn_macs.csv");
  int lines = (int)std::count(csv.begin(), csv.end(), '\n');
  EXPECT_EQ(lines, 6);  // header + five lengths
}

TEST(Binary, BenchLoadTinyGeometryWritesTableAndManifest) {
  fs::path d = fresh_dir("bl");
  RunResult r = run_xcl("bench-load --out " + d.string() +
                        " --reps 4 --discard 1 --layers 2 --hidden 8"
                        " --batch 2 --lengths 16 --lengths 32");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("payload ratio 4.0:1"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "load_bench.csv"));
  EXPECT_TRUE(fs::exists(d / "load_bench.txt"));
  EXPECT_TRUE(fs::exists(d / "manifest.json"));
  // scratch blobs are deleted after measurement
  for (const auto& ent : fs::directory_iterator(d))
    EXPECT_NE(ent.path().extension(), ".xcc") << ent.path();
}
