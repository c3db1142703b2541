// xcl: desk-scale laboratory for cross-attention to cached context.
// Verbs: train, eval, cache {build, inspect, sizes}, bench-load, bench-attn,
// report.  Exit codes: 0 ok, 2 usage, 3 data/format error, 4 numeric.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xc/cli.hpp"

namespace {

struct SeedFlag {
  int64_t value = -1;
  std::optional<uint64_t> get() const {
    if (value < 0) return std::nullopt;
    return (uint64_t)value;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-attention cache laboratory"};
  app.require_subcommand(1);

  xc::TrainArgs train;
  SeedFlag train_seed;
  auto* c_train = app.add_subcommand("train", "train an XC model");
  c_train->add_option("--preset", train.preset, "config preset (toy, reference)");
  c_train->add_option("--config", train.config_path, "key=value config file");
  c_train->add_option("--set", train.overrides, "config overrides key=value");
  c_train->add_option("--seed", train_seed.value, "run seed");
  c_train->add_option("--data", train.data_path,
                      "JSONL corpus (omit to generate from gen.* config)");
  c_train->add_option("--out", train.out_dir, "output directory")->required();
  c_train->add_flag("--resume", train.resume, "resume from checkpoint in --out");
  c_train->add_option("--log-every", train.log_every, "console log period");

  xc::EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate a trained model");
  c_eval->add_option("--model", ev.model_dir, "model directory")->required();
  c_eval->add_option("--data", ev.data_path, "JSONL dataset")->required();
  c_eval->add_option("--mode", ev.mode, "with-context | no-context | both");
  c_eval->add_option("--cache-dir", ev.cache_dir,
                     "read XC blobs rec_NNNNNN.xcc instead of encoding");
  c_eval->add_option("--out", ev.out_dir, "output directory")->required();
  c_eval->add_option("--max-answer", ev.max_answer, "answer token budget");

  auto* c_cache = app.add_subcommand("cache", "cache containers");
  c_cache->require_subcommand(1);

  xc::CacheBuildArgs cb;
  auto* c_build = c_cache->add_subcommand("build", "precompute cache blobs");
  c_build->add_option("--model", cb.model_dir, "model directory")->required();
  c_build->add_option("--data", cb.data_path, "JSONL dataset")->required();
  c_build->add_option("--strategy", cb.strategy, "kv | jitkv | xc");
  c_build->add_option("--dtype", cb.dtype, "f32 | f16");
  c_build->add_option("--out", cb.out_dir, "output directory")->required();

  xc::CacheInspectArgs ci;
  auto* c_inspect = c_cache->add_subcommand("inspect", "print container header");
  c_inspect->add_option("path", ci.path, "container file")->required();

  xc::CacheSizesArgs cs;
  auto* c_sizes = c_cache->add_subcommand("sizes", "per-token footprint table");
  c_sizes->add_option("--preset", cs.preset, "config preset (toy, reference)");
  c_sizes->add_option("--config", cs.config_path, "key=value config file");
  c_sizes->add_option("--set", cs.overrides, "config overrides key=value");
  c_sizes->add_option("--out", cs.out_dir, "optional output directory");

  xc::BenchLoadArgs bl;
  auto* c_bl = app.add_subcommand("bench-load", "cache load-time benchmark");
  c_bl->add_option("--out", bl.out_dir, "output directory")->required();
  c_bl->add_option("--workdir", bl.workdir, "scratch dir for blob files");
  c_bl->add_option("--reps", bl.reps, "timed repetitions per cell");
  c_bl->add_option("--discard", bl.discard, "warmup reps to discard");
  c_bl->add_option("--layers", bl.n_layers, "decoder layers");
  c_bl->add_option("--hidden", bl.hidden, "hidden size");
  c_bl->add_option("--batch", bl.batch, "sequences per batch");
  c_bl->add_option("--lengths", bl.lengths, "context lengths");
  c_bl->add_option("--dtype", bl.dtype, "f32 | f16");

  xc::BenchAttnArgs ba;
  auto* c_ba = app.add_subcommand("bench-attn", "attention MAC-count benchmark");
  c_ba->add_option("--out", ba.out_dir, "output directory")->required();
  c_ba->add_option("--lengths", ba.lengths, "context lengths");
  c_ba->add_option("--layers", ba.n_layers, "decoder layers");
  c_ba->add_option("--heads", ba.n_heads, "self-attention heads");
  c_ba->add_option("--head-dim", ba.head_dim, "head dimension");
  c_ba->add_option("--cross-modules", ba.cross_modules, "cross modules");
  c_ba->add_option("--cross-heads", ba.cross_heads, "cross heads");
  c_ba->add_option("--cross-head-dim", ba.cross_head_dim, "cross head dim");
  c_ba->add_option("--t-query", ba.t_query, "query tokens");
  c_ba->add_option("--t-answer", ba.t_answer, "answer tokens");
  c_ba->add_flag("--measure", ba.measure,
                 "also wall-clock a toy model (reported, never gates)");
  c_ba->add_option("--measure-lengths", ba.measure_lengths,
                   "context lengths for --measure");

  xc::ReportArgs rp;
  SeedFlag rp_seed;
  auto* c_rp = app.add_subcommand("report", "merge eval CSVs or run sensitivity");
  c_rp->add_option("inputs", rp.inputs, "report.csv files to merge");
  c_rp->add_flag("--sensitivity", rp.sensitivity,
                 "needle-position sensitivity sweep");
  c_rp->add_option("--model", rp.model_dir, "model directory (sensitivity)");
  c_rp->add_option("--preset", rp.preset, "config preset (toy, reference)");
  c_rp->add_option("--config", rp.config_path, "key=value config file");
  c_rp->add_option("--set", rp.overrides, "config overrides key=value");
  c_rp->add_option("--seed", rp_seed.value, "run seed");
  c_rp->add_option("--mode", rp.mode, "with-context | no-context");
  c_rp->add_option("--out", rp.out_dir, "output directory")->required();
  c_rp->add_option("--max-answer", rp.max_answer, "answer token budget");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return xc::kExitUsage;
  }

  try {
    train.seed = train_seed.get();
    rp.seed = rp_seed.get();
    if (c_train->parsed()) xc::cmd_train(train);
    if (c_eval->parsed()) xc::cmd_eval(ev);
    if (c_cache->parsed()) {
      if (c_build->parsed()) xc::cmd_cache_build(cb);
      if (c_inspect->parsed()) xc::cmd_cache_inspect(ci);
      if (c_sizes->parsed()) xc::cmd_cache_sizes(cs);
    }
    if (c_bl->parsed()) xc::cmd_bench_load(bl);
    if (c_ba->parsed()) xc::cmd_bench_attn(ba);
    if (c_rp->parsed()) xc::cmd_report(rp);
  } catch (const xc::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return xc::kExitUsage;
  } catch (const xc::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return xc::kExitUsage;
  } catch (const xc::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return xc::kExitNumeric;
  } catch (const std::exception& e) {  // parse/cache/shape/contract/length
    std::cerr << "error: " << e.what() << "\n";
    return xc::kExitData;
  }
  return xc::kExitOk;
}
