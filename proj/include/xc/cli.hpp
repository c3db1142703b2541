#pragma once

// Command layer behind the `xcl` driver: layered key=value configuration
// with named presets, model persistence, and the train / eval / cache /
// bench / report commands.  Everything here throws typed errors; the
// binary maps them onto exit codes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xc/bench.hpp"
#include "xc/cache.hpp"
#include "xc/cache_store.hpp"
#include "xc/error.hpp"
#include "xc/eval.hpp"
#include "xc/manifest.hpp"
#include "xc/synth_data.hpp"
#include "xc/trainer.hpp"
#include "xc/xc_model.hpp"

namespace xc {

// ---------------------------------------------------------------------------
// configuration: preset defaults, then a key=value file, then overrides

using ConfigMap = std::map<std::string, std::string>;

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "preset",
      "seed",
      "model.n_layers",
      "model.d_model",
      "model.n_heads",
      "model.head_dim",
      "model.vocab",
      "model.max_seq",
      "model.rope_theta",
      "xc.cross_layers",
      "xc.skip",
      "xc.final_layer",
      "xc.cross_hidden",
      "xc.cross_heads",
      "xc.cross_kv_heads",
      "xc.use_bias",
      "xc.dropout",
      "xc.encoder",
      "enc.n_layers",
      "enc.d_enc",
      "enc.n_heads",
      "enc.max_positions",
      "train.total_steps",
      "train.warmup_steps",
      "train.batch",
      "train.base_lr",
      "train.weight_decay",
      "train.beta1",
      "train.beta2",
      "train.eps",
      "train.clip",
      "gen.n_records",
      "gen.context_len",
      "gen.distractors",
      "gen.needle",
      "gen.unanswerable_rate",
      "gen.alias_rate",
      "gen.n_keys",
      "gen.n_values",
      "gen.n_filler",
  };
  return keys;
}

inline void check_config_key(const std::string& key) {
  if (!known_config_keys().count(key))
    throw UsageError("unknown config key \"" + key + "\"");
}

// Desk-scale defaults: a small frozen host with interleaved cross layers
// and a trainable bidirectional encoder, trained on the synthetic lookup
// corpus.
inline ConfigMap toy_preset() {
  return {
      {"preset", "toy"},
      {"seed", "1234"},
      {"model.n_layers", "4"},
      {"model.d_model", "96"},
      {"model.n_heads", "2"},
      {"model.head_dim", "48"},
      {"model.vocab", "96"},
      {"model.max_seq", "160"},
      {"model.rope_theta", "10000"},
      {"xc.cross_layers", "2"},
      {"xc.skip", "1"},
      {"xc.final_layer", "1"},
      {"xc.cross_hidden", "96"},
      {"xc.cross_heads", "2"},
      {"xc.cross_kv_heads", "2"},
      {"xc.use_bias", "0"},
      {"xc.dropout", "0"},
      {"xc.encoder", "small_bidirectional"},
      {"enc.n_layers", "2"},
      {"enc.d_enc", "96"},
      {"enc.n_heads", "2"},
      {"enc.max_positions", "64"},
      {"train.total_steps", "2000"},
      {"train.warmup_steps", "125"},
      {"train.batch", "32"},
      {"train.base_lr", "0.004"},
      {"train.weight_decay", "0.001"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.95"},
      {"train.eps", "1e-6"},
      {"train.clip", "1"},
      {"gen.n_records", "5000"},
      {"gen.context_len", "64"},
      {"gen.distractors", "3"},
      {"gen.needle", "random"},
      {"gen.unanswerable_rate", "0"},
      {"gen.alias_rate", "0"},
      {"gen.n_keys", "16"},
      {"gen.n_values", "32"},
      {"gen.n_filler", "41"},
  };
}

// Published-table geometry and schedule.  Far too large to run here; it
// resolves configuration (cache sizes, bench defaults) and documents the
// reference point the toy preset scales down from.
inline ConfigMap reference_preset() {
  return {
      {"preset", "reference"},
      {"seed", "0"},
      {"model.n_layers", "32"},
      {"model.d_model", "4096"},
      {"model.n_heads", "32"},
      {"model.head_dim", "128"},
      {"model.vocab", "32000"},
      {"model.max_seq", "4096"},
      {"model.rope_theta", "10000"},
      {"xc.cross_layers", "8"},
      {"xc.skip", "3"},
      {"xc.final_layer", "1"},
      {"xc.cross_hidden", "4096"},
      {"xc.cross_heads", "32"},
      {"xc.cross_kv_heads", "32"},
      {"xc.use_bias", "0"},
      {"xc.dropout", "0.1"},
      {"xc.encoder", "decoder_as_encoder"},
      {"enc.n_layers", "6"},
      {"enc.d_enc", "768"},
      {"enc.n_heads", "12"},
      {"enc.max_positions", "4096"},
      {"train.total_steps", "40000"},
      {"train.warmup_steps", "2500"},
      {"train.batch", "256"},
      {"train.base_lr", "0.0002"},
      {"train.weight_decay", "0.001"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.95"},
      {"train.eps", "1e-6"},
      {"train.clip", "1"},
      {"gen.n_records", "10000"},
      {"gen.context_len", "4096"},
      {"gen.distractors", "3"},
      {"gen.needle", "random"},
      {"gen.unanswerable_rate", "0"},
      {"gen.alias_rate", "0"},
      {"gen.n_keys", "16"},
      {"gen.n_values", "32"},
      {"gen.n_filler", "41"},
  };
}

inline ConfigMap preset_config(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "reference") return reference_preset();
  throw UsageError("unknown preset \"" + name + "\" (toy, reference)");
}

inline std::string trim_ws(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// key=value lines; '#' starts a comment; blank lines ignored.
inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file " + path);
  ConfigMap out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_ws(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected key=value, got \"" + line + "\"");
    std::string key = trim_ws(line.substr(0, eq));
    std::string val = trim_ws(line.substr(eq + 1));
    check_config_key(key);
    out[key] = val;
  }
  return out;
}

inline void apply_override(ConfigMap& cfg, const std::string& kv) {
  size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw UsageError("override \"" + kv + "\" is not key=value");
  std::string key = trim_ws(kv.substr(0, eq));
  check_config_key(key);
  cfg[key] = trim_ws(kv.substr(eq + 1));
}

// preset -> optional file -> --set overrides -> --seed flag
inline ConfigMap resolve_config(const std::string& preset,
                                const std::string& config_path,
                                const std::vector<std::string>& overrides,
                                std::optional<uint64_t> seed_flag) {
  ConfigMap cfg = preset_config(preset);
  if (!config_path.empty())
    for (const auto& [k, v] : parse_config_file(config_path)) cfg[k] = v;
  for (const auto& kv : overrides) apply_override(cfg, kv);
  if (seed_flag) cfg["seed"] = std::to_string(*seed_flag);
  return cfg;
}

inline int64_t cfg_i64(const ConfigMap& cfg, const std::string& key) {
  auto it = cfg.find(key);
  if (it == cfg.end()) throw ConfigError("missing config key \"" + key + "\"");
  try {
    size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\" has non-integer value \"" +
                      it->second + "\"");
  }
}

inline double cfg_f64(const ConfigMap& cfg, const std::string& key) {
  auto it = cfg.find(key);
  if (it == cfg.end()) throw ConfigError("missing config key \"" + key + "\"");
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\" has non-numeric value \"" +
                      it->second + "\"");
  }
}

inline std::string cfg_str(const ConfigMap& cfg, const std::string& key) {
  auto it = cfg.find(key);
  if (it == cfg.end()) throw ConfigError("missing config key \"" + key + "\"");
  return it->second;
}

// ---------------------------------------------------------------------------
// config -> typed structures

inline DecoderConfig decoder_config_from(const ConfigMap& cfg) {
  DecoderConfig c;
  c.n_layers = cfg_i64(cfg, "model.n_layers");
  c.d_model = cfg_i64(cfg, "model.d_model");
  c.n_heads = cfg_i64(cfg, "model.n_heads");
  c.head_dim = cfg_i64(cfg, "model.head_dim");
  c.vocab_size = cfg_i64(cfg, "model.vocab");
  c.max_seq = cfg_i64(cfg, "model.max_seq");
  c.rope_theta = (float)cfg_f64(cfg, "model.rope_theta");
  c.validate();
  return c;
}

inline XCConfig xc_config_from(const ConfigMap& cfg) {
  XCConfig x;
  x.n_cross_layers = cfg_i64(cfg, "xc.cross_layers");
  x.skip = cfg_i64(cfg, "xc.skip");
  x.final_layer = cfg_i64(cfg, "xc.final_layer") != 0;
  x.cross_hidden = cfg_i64(cfg, "xc.cross_hidden");
  x.cross_n_heads = cfg_i64(cfg, "xc.cross_heads");
  x.cross_n_kv_heads = cfg_i64(cfg, "xc.cross_kv_heads");
  x.use_bias = cfg_i64(cfg, "xc.use_bias") != 0;
  x.dropout_p = (float)cfg_f64(cfg, "xc.dropout");
  std::string enc = cfg_str(cfg, "xc.encoder");
  if (enc == "decoder_as_encoder") {
    x.encoder_kind = EncoderKind::DecoderAsEncoder;
  } else if (enc == "small_bidirectional") {
    x.encoder_kind = EncoderKind::SmallBidirectional;
  } else {
    throw ConfigError("xc.encoder must be decoder_as_encoder or "
                      "small_bidirectional, got \"" + enc + "\"");
  }
  return x;
}

inline BidirEncoderConfig bidir_config_from(const ConfigMap& cfg) {
  BidirEncoderConfig b;
  b.n_layers = cfg_i64(cfg, "enc.n_layers");
  b.d_enc = cfg_i64(cfg, "enc.d_enc");
  b.n_heads = cfg_i64(cfg, "enc.n_heads");
  b.vocab_size = cfg_i64(cfg, "model.vocab");
  b.base_max_positions = cfg_i64(cfg, "enc.max_positions");
  b.validate();
  return b;
}

inline TrainConfig train_config_from(const ConfigMap& cfg) {
  TrainConfig t;
  t.total_steps = cfg_i64(cfg, "train.total_steps");
  t.warmup_steps = cfg_i64(cfg, "train.warmup_steps");
  t.batch_size = cfg_i64(cfg, "train.batch");
  t.base_lr = cfg_f64(cfg, "train.base_lr");
  t.weight_decay = cfg_f64(cfg, "train.weight_decay");
  t.adam_beta1 = cfg_f64(cfg, "train.beta1");
  t.adam_beta2 = cfg_f64(cfg, "train.beta2");
  t.adam_eps = cfg_f64(cfg, "train.eps");
  t.max_grad_norm = cfg_f64(cfg, "train.clip");
  t.seed = (uint64_t)cfg_i64(cfg, "seed");
  t.validate();
  return t;
}

inline GenConfig gen_config_from(const ConfigMap& cfg) {
  GenConfig g;
  g.n_records = cfg_i64(cfg, "gen.n_records");
  g.context_len = cfg_i64(cfg, "gen.context_len");
  g.n_distractor_facts = cfg_i64(cfg, "gen.distractors");
  g.needle_position = needle_position_from_name(cfg_str(cfg, "gen.needle"));
  g.unanswerable_rate = cfg_f64(cfg, "gen.unanswerable_rate");
  g.alias_rate = cfg_f64(cfg, "gen.alias_rate");
  g.vocab.n_keys = cfg_i64(cfg, "gen.n_keys");
  g.vocab.n_values = cfg_i64(cfg, "gen.n_values");
  g.vocab.n_filler = cfg_i64(cfg, "gen.n_filler");
  g.seed = (uint64_t)cfg_i64(cfg, "seed");
  g.validate();
  return g;
}

inline XCModel build_model_from(const ConfigMap& cfg, uint64_t seed) {
  DecoderConfig dc = decoder_config_from(cfg);
  XCConfig x = xc_config_from(cfg);
  DecoderWeights base = DecoderWeights::random_init(dc, seed);
  if (x.encoder_kind == EncoderKind::SmallBidirectional) {
    BidirEncoderConfig bc = bidir_config_from(cfg);
    return XCModel::build(base, x, seed + 1, &bc);
  }
  return XCModel::build(base, x, seed + 1);
}

// ---------------------------------------------------------------------------
// model persistence: out/model.json (architecture snapshot) + checkpoint

inline void save_model_json(const std::string& path, const ConfigMap& cfg,
                            uint64_t seed) {
  nlohmann::json j;
  nlohmann::json arch;
  for (const auto& [k, v] : cfg)
    if (k.rfind("model.", 0) == 0 || k.rfind("xc.", 0) == 0 ||
        k.rfind("enc.", 0) == 0)
      arch[k] = v;
  j["arch"] = arch;
  j["seed"] = seed;
  // the data vocabulary travels with the model so eval can parse JSONL
  j["vocab"] = {{"n_keys", cfg_i64(cfg, "gen.n_keys")},
                {"n_values", cfg_i64(cfg, "gen.n_values")},
                {"n_filler", cfg_i64(cfg, "gen.n_filler")}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot write " + path);
  out << j.dump(2) << "\n";
}

struct LoadedModel {
  XCModel model;
  VocabPartition vocab;
  TokenMap map() const { return TokenMap{vocab}; }
};

inline LoadedModel load_model_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string mj = (fs::path(dir) / "model.json").string();
  std::ifstream in(mj);
  if (!in) throw ParseError("cannot open " + mj + " (not a model directory?)");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed " + mj + ": " + e.what());
  }
  ConfigMap cfg;
  try {
    for (auto it = j.at("arch").begin(); it != j.at("arch").end(); ++it)
      cfg[it.key()] = it.value().get<std::string>();
    uint64_t seed = j.at("seed").get<uint64_t>();
    LoadedModel lm{build_model_from(cfg, seed), {}};
    lm.vocab.n_keys = j.at("vocab").at("n_keys").get<int64_t>();
    lm.vocab.n_values = j.at("vocab").at("n_values").get<int64_t>();
    lm.vocab.n_filler = j.at("vocab").at("n_filler").get<int64_t>();
    std::string params = (fs::path(dir) / "ckpt.params.xcc").string();
    load_weights(params, model_digest(lm.model),
                 lm.model.trainable_parameters());
    return lm;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed " + mj + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// commands

struct TrainArgs {
  std::string preset = "toy";
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string data_path;  // JSONL corpus; empty -> generate from gen.* config
  std::string out_dir;
  bool resume = false;
  int64_t log_every = 50;
};

inline void cmd_train(const TrainArgs& a, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  RunManifest man;
  man.command = "train";
  man.started_at = utc_timestamp();
  ConfigMap cfg = resolve_config(a.preset, a.config_path, a.overrides, a.seed);
  man.config = cfg;
  man.seed = (uint64_t)cfg_i64(cfg, "seed");
  if (!a.config_path.empty()) man.add_input(a.config_path, "config");
  fs::create_directories(a.out_dir);

  GenConfig gen = gen_config_from(cfg);
  TokenMap map{gen.vocab};
  std::vector<QARecord> corpus;
  std::string gen_path;
  if (a.data_path.empty()) {
    corpus = generate(gen);
    gen_path = (fs::path(a.out_dir) / "data.jsonl").string();
    write_jsonl(corpus, gen_path, map);
    log << "generated " << corpus.size() << " records -> " << gen_path << "\n";
  } else {
    man.add_input(a.data_path, "dataset");
    corpus = read_jsonl(a.data_path, map);
  }

  XCModel m = build_model_from(cfg, man.seed);
  TrainConfig tc = train_config_from(cfg);
  Trainer tr(m, corpus, tc);
  std::string prefix = (fs::path(a.out_dir) / "ckpt").string();
  if (a.resume && fs::exists(prefix + ".state.json")) {
    tr.load_checkpoint(prefix);
    log << "resumed at step " << tr.step() << "\n";
  }

  std::string log_path = (fs::path(a.out_dir) / "train_log.csv").string();
  std::ofstream log_csv(log_path, a.resume && tr.step() > 0
                                      ? std::ios::app
                                      : std::ios::trunc);
  if (!log_csv) throw ParseError("cannot write " + log_path);
  if (tr.step() == 0) write_log_header(log_csv);
  while (tr.step() < tc.total_steps) {
    StepStats st = tr.step_once();
    write_log_row(log_csv, st);
    if (st.step % a.log_every == 0 || st.step + 1 == tc.total_steps)
      log << "step " << st.step << " " << pass_name(st.task) << " loss "
          << st.loss << " lr " << st.lr << "\n";
  }
  log_csv.close();
  tr.save_checkpoint(prefix);
  save_model_json((fs::path(a.out_dir) / "model.json").string(), cfg, man.seed);

  if (!gen_path.empty()) man.add_output(gen_path, "dataset");
  man.add_output(log_path, "train_log");
  man.add_output(prefix + ".params.xcc", "checkpoint_params");
  man.add_output(prefix + ".adam_m.xcc", "checkpoint_moments");
  man.add_output(prefix + ".adam_v.xcc", "checkpoint_moments");
  man.add_output(prefix + ".state.json", "checkpoint_state");
  man.add_output((fs::path(a.out_dir) / "model.json").string(), "model_config");
  man.finished_at = utc_timestamp();
  man.save((fs::path(a.out_dir) / "manifest.json").string());
}

struct EvalArgs {
  std::string model_dir;
  std::string data_path;
  std::string mode = "with-context";  // with-context | no-context | both
  std::string cache_dir;              // optional: XC blobs rec_%06d.xcc
  std::string out_dir;
  int64_t max_answer = 8;
};

inline std::string cache_blob_path(const std::string& dir, size_t index) {
  char name[32];
  std::snprintf(name, sizeof name, "rec_%06zu.xcc", index);
  return (std::filesystem::path(dir) / name).string();
}

inline std::vector<int64_t> predict_with_blob(const XCModel& m,
                                              const CacheBlob& blob,
                                              const QARecord& rec,
                                              int64_t max_answer) {
  std::vector<int64_t> prompt = rec.query;
  prompt.push_back(kTokAnswer);
  return generate_with_cache(m, blob, prompt, max_answer, kTokEos);
}

inline void cmd_eval(const EvalArgs& a, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  if (a.mode != "with-context" && a.mode != "no-context" && a.mode != "both")
    throw UsageError("--mode must be with-context, no-context or both");
  if (!a.cache_dir.empty() && !fs::is_directory(a.cache_dir))
    throw UsageError("cache dir " + a.cache_dir + " does not exist");
  RunManifest man;
  man.command = "eval";
  man.started_at = utc_timestamp();
  man.add_input(a.data_path, "dataset");
  LoadedModel lm = load_model_dir(a.model_dir);
  const XCModel& m = lm.model;
  man.add_input((fs::path(a.model_dir) / "ckpt.params.xcc").string(), "model");
  auto records = read_jsonl(a.data_path, lm.map());
  fs::create_directories(a.out_dir);

  std::string dataset = fs::path(a.data_path).stem().string();
  std::vector<ReportRow> rows;
  auto run_mode = [&](EvalMode mode) {
    EvalReport rep;
    if (mode == EvalMode::WithContext && !a.cache_dir.empty()) {
      std::vector<std::vector<int64_t>> preds;
      for (size_t i = 0; i < records.size(); ++i) {
        CacheBlob blob = load_cache_blob(cache_blob_path(a.cache_dir, i));
        preds.push_back(predict_with_blob(m, blob, records[i], a.max_answer));
      }
      rep = score_predictions(preds, records, mode);
    } else {
      rep = evaluate(m, records, mode, a.max_answer);
    }
    rows.push_back({dataset, rep});
  };
  if (a.mode == "with-context" || a.mode == "both")
    run_mode(EvalMode::WithContext);
  if (a.mode == "no-context" || a.mode == "both") run_mode(EvalMode::NoContext);

  std::string csv_path = (fs::path(a.out_dir) / "report.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << report_csv(rows);
  csv.close();
  std::string txt = report_table(rows);
  if (rows.size() == 2) {
    char buf[96];
    std::snprintf(buf, sizeof buf,
                  "grounding gap (with_context EM - no_context EM): %.2f\n",
                  rows[0].report.em - rows[1].report.em);
    txt += buf;
  }
  std::string txt_path = (fs::path(a.out_dir) / "report.txt").string();
  std::ofstream tout(txt_path, std::ios::trunc);
  tout << txt;
  tout.close();
  log << txt;
  man.add_output(csv_path, "report");
  man.add_output(txt_path, "report");
  man.finished_at = utc_timestamp();
  man.save((fs::path(a.out_dir) / "manifest.json").string());
}

struct CacheBuildArgs {
  std::string model_dir;
  std::string data_path;
  std::string strategy = "xc";
  std::string dtype = "f32";  // f32 round-trips bit-exactly
  std::string out_dir;
};

inline void cmd_cache_build(const CacheBuildArgs& a,
                            std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  CacheStrategy strat = strategy_from_name(a.strategy);
  StoreDType dt;
  if (a.dtype == "f32") {
    dt = StoreDType::F32;
  } else if (a.dtype == "f16") {
    dt = StoreDType::F16;
  } else {
    throw UsageError("--dtype must be f32 or f16");
  }
  RunManifest man;
  man.command = "cache build";
  man.started_at = utc_timestamp();
  man.add_input(a.data_path, "dataset");
  LoadedModel lm = load_model_dir(a.model_dir);
  const XCModel& m = lm.model;
  auto records = read_jsonl(a.data_path, lm.map());
  fs::create_directories(a.out_dir);

  std::string sizes_path = (fs::path(a.out_dir) / "sizes.csv").string();
  std::ofstream sizes(sizes_path, std::ios::trunc);
  sizes << "record,tokens,payload_bytes,file_bytes\n";
  uint64_t total_payload = 0, total_tokens = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    CacheBlob blob = build_cache(m, records[i].contexts.front(), strat);
    std::string path = cache_blob_path(a.out_dir, i);
    save_cache_blob(blob, path, dt);
    uint64_t payload =
        (uint64_t)blob.payload_floats() * dtype_bytes(dt);
    uint64_t fbytes = (uint64_t)fs::file_size(path);
    sizes << i << "," << blob.tokens << "," << payload << "," << fbytes
          << "\n";
    total_payload += payload;
    total_tokens += (uint64_t)blob.tokens;
  }
  sizes.close();
  CacheGeometry geom = CacheGeometry::from(m.decoder.config, m.d_enc());
  log << "built " << records.size() << " " << strategy_name(strat)
      << " blobs, " << total_tokens << " context tokens, " << total_payload
      << " payload bytes (" << bytes_per_token(geom, strat, dtype_bytes(dt))
      << " bytes/token)\n";
  man.add_output(sizes_path, "size_table");
  man.finished_at = utc_timestamp();
  man.save((fs::path(a.out_dir) / "manifest.json").string());
}

struct CacheInspectArgs {
  std::string path;
};

inline void cmd_cache_inspect(const CacheInspectArgs& a,
                              std::ostream& log = std::cout) {
  StoreHeader h = verify_stored(a.path);  // throws ParseError if corrupt
  const char* kind = h.kind == kKindWeights
                         ? "weights"
                         : strategy_name((CacheStrategy)h.kind);
  log << "container " << a.path << "\n";
  log << "  kind     " << kind << "\n";
  log << "  dtype    " << dtype_name(h.dtype) << "\n";
  log << "  dims     [";
  for (size_t i = 0; i < h.dims.size(); ++i)
    log << (i ? ", " : "") << h.dims[i];
  log << "]\n";
  log << "  digest   " << hex64(h.digest) << "\n";
  log << "  payload  " << h.payload_bytes << " bytes\n";
  log << "  checksum ok\n";
}

struct CacheSizesArgs {
  std::string preset = "reference";
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;  // optional CSV target
};

struct SizeRow {
  std::string label;
  int64_t bytes_per_token_f16 = 0;
};

inline std::vector<SizeRow> cache_size_rows(const ConfigMap& cfg) {
  DecoderConfig dc = decoder_config_from(cfg);
  int64_t d_enc_small = cfg_i64(cfg, "enc.d_enc");
  CacheGeometry as_dec = CacheGeometry::from(dc, dc.d_model);
  CacheGeometry as_small = CacheGeometry::from(dc, d_enc_small);
  return {
      {"kv", bytes_per_token(as_dec, CacheStrategy::KV, 2)},
      {"jitkv", bytes_per_token(as_dec, CacheStrategy::JITKV, 2)},
      {"xc[decoder_as_encoder]", bytes_per_token(as_dec, CacheStrategy::XC, 2)},
      {"xc[small_bidirectional]",
       bytes_per_token(as_small, CacheStrategy::XC, 2)},
  };
}

inline void cmd_cache_sizes(const CacheSizesArgs& a,
                            std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  ConfigMap cfg = resolve_config(a.preset, a.config_path, a.overrides, {});
  auto rows = cache_size_rows(cfg);
  std::string csv = "strategy,bytes_per_token_f16,kib_per_token\n";
  log << "cache memory footprint per context token (f16)\n";
  char buf[128];
  for (const auto& r : rows) {
    double kib = (double)r.bytes_per_token_f16 / 1024.0;
    std::snprintf(buf, sizeof buf, "  %-24s %10lld B  %8.3f kB\n",
                  r.label.c_str(), (long long)r.bytes_per_token_f16, kib);
    log << buf;
    std::snprintf(buf, sizeof buf, "%s,%lld,%.6g\n", r.label.c_str(),
                  (long long)r.bytes_per_token_f16, kib);
    csv += buf;
  }
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    RunManifest man;
    man.command = "cache sizes";
    man.started_at = utc_timestamp();
    man.config = cfg;
    man.seed = (uint64_t)cfg_i64(cfg, "seed");
    std::string path = (fs::path(a.out_dir) / "cache_sizes.csv").string();
    std::ofstream out(path, std::ios::trunc);
    out << csv;
    out.close();
    man.add_output(path, "size_table");
    man.finished_at = utc_timestamp();
    man.save((fs::path(a.out_dir) / "manifest.json").string());
  }
}

struct BenchLoadArgs {
  std::string out_dir;
  std::string workdir;  // defaults to out_dir
  int64_t reps = 100;
  int64_t discard = 10;
  int64_t n_layers = 32;
  int64_t hidden = 1024;
  int64_t batch = 8;
  std::vector<int64_t> lengths = {1024, 2048, 4096, 8192};
  std::string dtype = "f16";
};

inline void cmd_bench_load(const BenchLoadArgs& a,
                           std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  LoadBenchConfig cfg;
  cfg.n_layers = a.n_layers;
  cfg.hidden = a.hidden;
  cfg.batch = a.batch;
  cfg.lengths = a.lengths;
  cfg.reps = a.reps;
  cfg.discard = a.discard;
  if (a.dtype == "f16") {
    cfg.dtype = StoreDType::F16;
  } else if (a.dtype == "f32") {
    cfg.dtype = StoreDType::F32;
  } else {
    throw UsageError("--dtype must be f32 or f16");
  }
  cfg.workdir = a.workdir.empty() ? a.out_dir : a.workdir;
  cfg.validate();
  fs::create_directories(a.out_dir);
  RunManifest man;
  man.command = "bench-load";
  man.started_at = utc_timestamp();

  std::vector<LoadCell> cells;
  for (CacheStrategy s : cfg.strategies) {
    for (int64_t len : cfg.lengths) {
      LoadCell c = bench_load_cell(cfg, s, len);
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "%-6s len %5lld  %12llu bytes  %.4f +/- %.4f s\n",
                    strategy_name(c.strategy), (long long)c.context_len,
                    (unsigned long long)c.file_bytes, c.stats.mean,
                    c.stats.half_width);
      log << buf;
      cells.push_back(c);
    }
  }
  std::string csv_path = (fs::path(a.out_dir) / "load_bench.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << load_bench_csv(cells);
  csv.close();
  std::string table = load_bench_table(cells);
  // headline ratios at each length
  for (int64_t len : cfg.lengths) {
    const LoadCell *kv = nullptr, *xc = nullptr;
    for (const auto& c : cells) {
      if (c.context_len != len) continue;
      if (c.strategy == CacheStrategy::KV) kv = &c;
      if (c.strategy == CacheStrategy::XC) xc = &c;
    }
    if (kv && xc && xc->payload_bytes > 0 && xc->stats.mean > 0) {
      char buf[128];
      std::snprintf(buf, sizeof buf,
                    "len %5lld: kv/xc payload ratio %.1f:1, mean-load ratio "
                    "%.1fx\n",
                    (long long)len,
                    (double)kv->payload_bytes / (double)xc->payload_bytes,
                    kv->stats.mean / xc->stats.mean);
      table += buf;
    }
  }
  std::string txt_path = (fs::path(a.out_dir) / "load_bench.txt").string();
  std::ofstream txt(txt_path, std::ios::trunc);
  txt << table;
  txt.close();
  log << table;
  man.add_output(csv_path, "bench_csv");
  man.add_output(txt_path, "bench_table");
  man.finished_at = utc_timestamp();
  man.save((fs::path(a.out_dir) / "manifest.json").string());
}

struct BenchAttnArgs {
  std::string out_dir;
  int64_t n_layers = 4;
  int64_t n_heads = 2;
  int64_t head_dim = 48;
  int64_t cross_modules = 3;  // two interleaved + final
  int64_t cross_heads = 2;
  int64_t cross_head_dim = 48;
  int64_t t_query = 24;
  int64_t t_answer = 8;
  std::vector<int64_t> lengths = {256, 512, 1024, 2048, 4096};
  bool measure = false;  // wall-clock on the toy model (reported, not gating)
  std::vector<int64_t> measure_lengths = {128, 256, 512};
};

inline void cmd_bench_attn(const BenchAttnArgs& a,
                           std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  AttnBenchConfig cfg;
  cfg.self = {a.n_layers, a.n_heads, a.head_dim};
  cfg.cross_modules = a.cross_modules;
  cfg.cross_heads = a.cross_heads;
  cfg.cross_head_dim = a.cross_head_dim;
  cfg.t_query = a.t_query;
  cfg.t_answer = a.t_answer;
  cfg.lengths = a.lengths;
  cfg.validate();
  fs::create_directories(a.out_dir);
  RunManifest man;
  man.command = "bench-attn";
  man.started_at = utc_timestamp();

  auto rows = run_attn_counts(cfg);
  SlopeFit fit = fit_attn_slopes(rows);
  std::string csv_path = (fs::path(a.out_dir) / "attn_macs.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << attn_counts_csv(rows);
  csv.close();
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "log-log slopes: uncached %.3f, kv_cached %.3f, xc_cached "
                "%.3f (quadratic vs linear in context length)\n",
                fit.uncached, fit.kv_cached, fit.xc_cached);
  log << buf;
  man.add_output(csv_path, "mac_counts");

  if (a.measure) {
    ConfigMap toy = toy_preset();
    toy["model.max_seq"] = std::to_string(a.measure_lengths.back() +
                                          a.t_query + a.t_answer + 8);
    toy["enc.max_positions"] = std::to_string(a.measure_lengths.back());
    XCModel m = build_model_from(toy, 99);
    std::string wall_path = (fs::path(a.out_dir) / "attn_wall.csv").string();
    std::ofstream wall(wall_path, std::ios::trunc);
    wall << "context,uncached_prefill_s,xc_cached_generate_s\n";
    std::mt19937_64 rng(1);
    for (int64_t C : a.measure_lengths) {
      std::vector<int64_t> ctx((size_t)C);
      std::uniform_int_distribution<int64_t> tok(
          kNumReserved, m.decoder.config.vocab_size - 1);
      for (auto& t : ctx) t = tok(rng);
      std::vector<int64_t> prompt((size_t)a.t_query, ctx[0]);
      prompt.push_back(kTokAnswer);

      std::vector<int64_t> full = ctx;
      full.insert(full.end(), prompt.begin(), prompt.end());
      auto t0 = std::chrono::steady_clock::now();
      Tensor empty({0, m.d_enc()}, {});
      xc_forward(m, full, empty);
      auto t1 = std::chrono::steady_clock::now();

      CacheBlob blob = build_cache(m, ctx, CacheStrategy::XC);
      auto t2 = std::chrono::steady_clock::now();
      generate_with_cache(m, blob, prompt, a.t_answer, kTokEos);
      auto t3 = std::chrono::steady_clock::now();
      std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f\n", (long long)C,
                    std::chrono::duration<double>(t1 - t0).count(),
                    std::chrono::duration<double>(t3 - t2).count());
      wall << buf;
    }
    wall.close();
    man.add_output(wall_path, "wall_times");
  }
  man.finished_at = utc_timestamp();
  man.save((fs::path(a.out_dir) / "manifest.json").string());
}

struct ReportArgs {
  std::vector<std::string> inputs;  // report.csv files to merge
  bool sensitivity = false;
  std::string model_dir;  // sensitivity mode
  std::string preset = "toy";
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string mode = "with-context";
  std::string out_dir;
  int64_t max_answer = 8;
};

inline std::vector<ReportRow> parse_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open report " + path);
  std::string line;
  if (!std::getline(in, line) ||
      line != "dataset,mode,count,em,precision,recall,f1")
    throw ParseError(path + ": not a report CSV (bad header)");
  std::vector<ReportRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim_ws(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected 7 columns");
    try {
      ReportRow r;
      r.name = cells[0];
      r.report.mode = eval_mode_from_name(cells[1]);
      r.report.count = std::stoll(cells[2]);
      r.report.em = std::stod(cells[3]);
      r.report.precision = std::stod(cells[4]);
      r.report.recall = std::stod(cells[5]);
      r.report.f1 = std::stod(cells[6]);
      r.report.validate();
      rows.push_back(r);
    } catch (const ConfigError&) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad mode");
    } catch (const std::invalid_argument&) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

inline void cmd_report(const ReportArgs& a, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  RunManifest man;
  man.command = "report";
  man.started_at = utc_timestamp();
  fs::create_directories(a.out_dir);
  std::string txt;
  std::vector<ReportRow> rows;
  if (a.sensitivity) {
    ConfigMap cfg =
        resolve_config(a.preset, a.config_path, a.overrides, a.seed);
    man.config = cfg;
    man.seed = (uint64_t)cfg_i64(cfg, "seed");
    LoadedModel lm = load_model_dir(a.model_dir);
    const XCModel& m = lm.model;
    man.add_input((fs::path(a.model_dir) / "ckpt.params.xcc").string(),
                  "model");
    GenConfig gen = gen_config_from(cfg);
    std::vector<NeedlePosition> ps = {
        NeedlePosition::Begin, NeedlePosition::Middle, NeedlePosition::End,
        NeedlePosition::BothEnds};
    auto sens = sensitivity_sweep(
        m, gen, ps,
        a.mode == "no-context" ? EvalMode::NoContext : EvalMode::WithContext,
        a.max_answer);
    rows = sensitivity_report_rows(sens);
    txt = report_table(rows);
    char buf[96];
    std::snprintf(buf, sizeof buf, "F1 spread (max - min): %.2f\n",
                  f1_spread(sens));
    txt += buf;
  } else {
    if (a.inputs.empty())
      throw UsageError("report needs input CSVs or --sensitivity");
    for (const auto& p : a.inputs) {
      man.add_input(p, "report");
      for (auto& r : parse_report_csv(p)) rows.push_back(r);
    }
    auto all = rows;
    all.push_back(aggregate_rows(rows));
    txt = report_table(all);
    rows = all;
  }
  std::string csv_path = (fs::path(a.out_dir) / "report.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << report_csv(rows);
  csv.close();
  std::string txt_path = (fs::path(a.out_dir) / "report.txt").string();
  std::ofstream tout(txt_path, std::ios::trunc);
  tout << txt;
  tout.close();
  log << txt;
  man.add_output(csv_path, "report");
  man.add_output(txt_path, "report");
  man.finished_at = utc_timestamp();
  man.save((fs::path(a.out_dir) / "manifest.json").string());
}

}  // namespace xc
