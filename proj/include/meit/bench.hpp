// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meit/instruct.hpp"
#include "meit/metrics.hpp"
#include "meit/signal.hpp"
#include "meit/trainer.hpp"
#include "meit/transformer.hpp"

namespace meit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Harness configuration.

struct RunConfig {
  // corpus
  int corpus_a_n = 6250;
  int corpus_b_n = 2500;
  double duration_s = 10.0;
  int sample_rate_hz = 500;
  int hr_grid_step = 5;
  double split_train = 0.8, split_val = 0.1, split_test = 0.1;
  int vocab_cap = 512;

  // model
  ModelConfig model{.num_layers = 2,
                    .num_heads = 4,
                    .head_dim = 32,
                    .model_dim = 128,
                    .vocab_size = 512,
                    .max_seq_len = 64,
                    .ffn_multiplier = 4};
  EncoderConfig encoder{.num_blocks = 3,
                        .channels = {16, 32, 64},
                        .kernel_size = 7,
                        .pool_size = 4,
                        .prefix_len = 1,
                        .head_dim = 32};
  LoraConfig lora{.rank = 16, .alpha = 32.0, .dropout_p = 0.0};
  TrainConfig train;

  // bench
  std::string out_dir = "bench_out";
  uint64_t seed = 1;
  std::vector<double> noise_levels = {0.0, 0.05, 0.10, 0.15, 0.20};
  double noise_subset_fraction = 0.1;
  uint64_t noise_subset_seed = 17;
  int qualitative_k = 8;
  int eval_cap = 0;  // 0 = whole test split

  json to_json() const {
    json j;
    j["corpus"] = {{"n_domain_a", corpus_a_n},   {"n_domain_b", corpus_b_n},
                   {"duration_s", duration_s},   {"sample_rate_hz", sample_rate_hz},
                   {"hr_grid_step", hr_grid_step}, {"split_train", split_train},
                   {"split_val", split_val},     {"split_test", split_test},
                   {"vocab_cap", vocab_cap}};
    j["model"] = Trainer::model_config_json(model);
    j["encoder"] = Trainer::encoder_config_json(encoder);
    j["lora"] = Trainer::lora_config_json(lora);
    j["train"] = Trainer::train_config_json(train);
    j["bench"] = {{"out_dir", out_dir},
                  {"seed", seed},
                  {"noise_levels", noise_levels},
                  {"noise_subset_fraction", noise_subset_fraction},
                  {"noise_subset_seed", noise_subset_seed},
                  {"qualitative_k", qualitative_k},
                  {"eval_cap", eval_cap}};
    return j;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    if (j.contains("corpus")) {
      const auto& k = j["corpus"];
      c.corpus_a_n = k.value("n_domain_a", c.corpus_a_n);
      c.corpus_b_n = k.value("n_domain_b", c.corpus_b_n);
      c.duration_s = k.value("duration_s", c.duration_s);
      c.sample_rate_hz = k.value("sample_rate_hz", c.sample_rate_hz);
      c.hr_grid_step = k.value("hr_grid_step", c.hr_grid_step);
      c.split_train = k.value("split_train", c.split_train);
      c.split_val = k.value("split_val", c.split_val);
      c.split_test = k.value("split_test", c.split_test);
      c.vocab_cap = k.value("vocab_cap", c.vocab_cap);
    }
    if (j.contains("model")) c.model = Trainer::model_config_from_json(j["model"]);
    if (j.contains("encoder")) c.encoder = Trainer::encoder_config_from_json(j["encoder"]);
    if (j.contains("lora")) c.lora = Trainer::lora_config_from_json(j["lora"]);
    if (j.contains("train")) c.train = Trainer::train_config_from_json(j["train"]);
    if (j.contains("bench")) {
      const auto& k = j["bench"];
      c.out_dir = k.value("out_dir", c.out_dir);
      c.seed = k.value("seed", c.seed);
      if (k.contains("noise_levels")) c.noise_levels = k["noise_levels"].get<std::vector<double>>();
      c.noise_subset_fraction = k.value("noise_subset_fraction", c.noise_subset_fraction);
      c.noise_subset_seed = k.value("noise_subset_seed", c.noise_subset_seed);
      c.qualitative_k = k.value("qualitative_k", c.qualitative_k);
      c.eval_cap = k.value("eval_cap", c.eval_cap);
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    json j;
    f >> j;
    return from_json(j);
  }

  std::string config_hash() const {
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", crc32(to_json().dump()));
    return hex;
  }
};

// ---------------------------------------------------------------------------
// Forged corpus rows and the instruction dataset on disk.

struct DataRow {
  std::string record_id;
  std::string ecg_path;
  std::string prompt;
  std::string report;
  SyntheticLabel label;
  Split split = Split::train;
};

inline json label_to_json(const SyntheticLabel& l) {
  return {{"rhythm", rhythm_name(l.rhythm)},
          {"heart_rate_bpm", l.heart_rate_bpm},
          {"domain", l.domain == DomainTag::A ? "A" : "B"}};
}

inline SyntheticLabel label_from_json(const json& j) {
  SyntheticLabel l;
  l.rhythm = rhythm_from_name(j.at("rhythm").get<std::string>());
  l.heart_rate_bpm = j.at("heart_rate_bpm");
  l.domain = j.at("domain").get<std::string>() == "A" ? DomainTag::A : DomainTag::B;
  return l;
}

class BenchWorkspace {
 public:
  explicit BenchWorkspace(const RunConfig& cfg) : cfg_(cfg) {}

  const RunConfig& config() const { return cfg_; }
  fs::path root() const { return fs::path(cfg_.out_dir); }

  // Generates both domains, writes records + manifests + instruction JSONL,
  // builds the shared vocabulary. Idempotent for a fixed (config, seed).
  void forge() {
    fs::create_directories(root() / "corpus" / "A" / "records");
    fs::create_directories(root() / "corpus" / "B" / "records");
    forge_domain(DomainTag::A, cfg_.corpus_a_n, rows_a_);
    forge_domain(DomainTag::B, cfg_.corpus_b_n, rows_b_);

    std::vector<std::string> texts;
    for (const auto& r : rows_a_) texts.push_back(r.report);
    for (const auto& r : rows_b_) texts.push_back(r.report);
    for (const auto& p : default_prompt_pool().prompts) texts.push_back(p);
    vocab_ = Vocabulary::build(texts, cfg_.vocab_cap);
    vocab_.save((root() / "vocab.txt").string());
    forged_ = true;
  }

  void ensure_forged() {
    if (forged_) return;
    const fs::path marker = root() / "corpus" / "A" / "manifest.jsonl";
    if (fs::exists(marker) && fs::exists(root() / "vocab.txt")) {
      load_domain(DomainTag::A, rows_a_);
      load_domain(DomainTag::B, rows_b_);
      vocab_ = Vocabulary::load((root() / "vocab.txt").string());
      forged_ = true;
      return;
    }
    forge();
  }

  const std::vector<DataRow>& rows(DomainTag d) const {
    return d == DomainTag::A ? rows_a_ : rows_b_;
  }
  const Vocabulary& vocab() const { return vocab_; }

  std::vector<DataRow> rows_for_split(DomainTag d, Split s) const {
    std::vector<DataRow> out;
    for (const auto& r : rows(d))
      if (r.split == s) out.push_back(r);
    return out;
  }

  RecordProvider provider() const {
    return [](const std::string& path) { return read_record(path); };
  }

  std::vector<TrainExample> tokenize_rows(const std::vector<DataRow>& rows) const {
    std::vector<TrainExample> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
      InstructionSample s{r.prompt, r.ecg_path, r.report, r.split};
      TokenizedExample te = tokenize_example(s, vocab_, cfg_.model.max_seq_len);
      out.push_back({te.token_ids, te.loss_mask, r.ecg_path});
    }
    return out;
  }

  // Report-only sequences for the direct fine-tuning ablation: no prompt,
  // loss on every predictable token.
  std::vector<TrainExample> tokenize_rows_report_only(const std::vector<DataRow>& rows) const {
    std::vector<TrainExample> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
      auto toks = tokenize_with_markers(r.report);
      std::vector<int> ids;
      for (const auto& t : toks) ids.push_back(vocab_.to_id(t));
      ids.push_back(kEosId);
      if (static_cast<int>(ids.size()) > cfg_.model.max_seq_len) {
        ids.resize(cfg_.model.max_seq_len);
        ids.back() = kEosId;
      }
      std::vector<bool> mask(ids.size(), true);
      mask[0] = false;  // nothing precedes the first token
      out.push_back({std::move(ids), std::move(mask), r.ecg_path});
    }
    return out;
  }

 private:
  void forge_domain(DomainTag d, int n, std::vector<DataRow>& rows) {
    CorpusConfig cc;
    cc.n_records = n;
    cc.domain = d;
    cc.duration_s = cfg_.duration_s;
    cc.sample_rate_hz = cfg_.sample_rate_hz;
    cc.hr_grid_step = cfg_.hr_grid_step;
    const auto plan = plan_corpus(cc, cfg_.seed);
    const auto split = split_dataset(n, cfg_.split_train, cfg_.split_val, cfg_.split_test,
                                     Rng::mix(cfg_.seed, static_cast<uint64_t>(d)));
    std::vector<Split> split_of(n, Split::train);
    for (int i : split.val) split_of[i] = Split::val;
    for (int i : split.test) split_of[i] = Split::test;

    const char dc = d == DomainTag::A ? 'A' : 'B';
    const fs::path dir = root() / "corpus" / std::string(1, dc);
    std::ofstream manifest(dir / "manifest.jsonl");
    std::ofstream instr(dir / "instructions.jsonl");
    if (!manifest || !instr) throw IoError("cannot write corpus files under " + dir.string());

    rows.clear();
    rows.reserve(n);
    std::vector<EcgRecord> recs(n);
#pragma omp parallel for schedule(dynamic, 16)
    for (int i = 0; i < n; ++i) recs[i] = materialize_record(plan[i], cc);

    for (int i = 0; i < n; ++i) {
      const auto& e = plan[i];
      DataRow row;
      row.record_id = e.record_id;
      row.label = e.label;
      row.report = e.report;
      row.split = split_of[i];
      row.prompt = sample_prompt(default_prompt_pool(),
                                 Rng::mix(cfg_.seed, crc32(e.record_id)));
      const fs::path rp = dir / "records" / (e.record_id + ".mecg");
      row.ecg_path = rp.string();
      write_record(recs[i], row.ecg_path);

      manifest << json{{"record_id", row.record_id},
                       {"ecg_path", row.ecg_path},
                       {"report", row.report},
                       {"label", label_to_json(row.label)},
                       {"domain", std::string(1, dc)}}
                      .dump()
               << "\n";
      instr << json{{"id", row.record_id},
                    {"prompt", row.prompt},
                    {"ecg_path", row.ecg_path},
                    {"report", row.report},
                    {"split", split_name(row.split)}}
                   .dump()
            << "\n";
      rows.push_back(std::move(row));
    }
  }

  void load_domain(DomainTag d, std::vector<DataRow>& rows) {
    const char dc = d == DomainTag::A ? 'A' : 'B';
    const fs::path dir = root() / "corpus" / std::string(1, dc);
    std::ifstream manifest(dir / "manifest.jsonl");
    std::ifstream instr(dir / "instructions.jsonl");
    if (!manifest || !instr) throw IoError("corpus not forged under " + dir.string());
    rows.clear();
    std::string mline, iline;
    while (std::getline(manifest, mline)) {
      if (!std::getline(instr, iline)) throw IoError("manifest/instruction length mismatch");
      const json m = json::parse(mline);
      const json in = json::parse(iline);
      DataRow row;
      row.record_id = m.at("record_id");
      row.ecg_path = m.at("ecg_path");
      row.report = m.at("report");
      row.label = label_from_json(m.at("label"));
      row.prompt = in.at("prompt");
      const std::string sp = in.at("split");
      row.split = sp == "train" ? Split::train : (sp == "val" ? Split::val : Split::test);
      rows.push_back(std::move(row));
    }
  }

  RunConfig cfg_;
  std::vector<DataRow> rows_a_, rows_b_;
  Vocabulary vocab_;
  bool forged_ = false;
};

// ---------------------------------------------------------------------------
// Model bundle: paired backbone + encoder, seeded identically so an
// untrained bundle is exactly the initialization of the trained one.

struct ModelBundle {
  ModelParams model;
  EncoderParams encoder;

  static ModelBundle fresh(const RunConfig& cfg, int vocab_size) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = vocab_size;
    EncoderConfig ec = cfg.encoder;
    ec.head_dim = mc.head_dim;
    Rng rng(Rng::mix(cfg.seed, 0x1417ULL));
    ModelBundle b{ModelParams::init(mc, rng), EncoderParams::init(ec, rng)};
    Rng lrng(Rng::mix(cfg.seed, 0x10a4ULL));
    b.model.apply_lora(cfg.lora, lrng);
    return b;
  }
};

// Rebuilds a bundle from a standalone checkpoint (no optimizer state needed).
inline ModelBundle bundle_from_checkpoint(const CheckpointData& ckpt, uint32_t vocab_hash) {
  char hex[16];
  std::snprintf(hex, sizeof hex, "%08x", vocab_hash);
  if (ckpt.meta.at("vocab_hash").get<std::string>() != hex)
    throw ParseError(ParseError::Kind::incompatible, "checkpoint vocabulary hash mismatch");
  const ModelConfig mc = Trainer::model_config_from_json(ckpt.meta.at("model_config"));
  const EncoderConfig ec = Trainer::encoder_config_from_json(ckpt.meta.at("encoder_config"));
  Rng rng(0);
  ModelBundle b{ModelParams::init(mc, rng), EncoderParams::init(ec, rng)};
  if (ckpt.meta.value("lora_applied", false))
    b.model.apply_lora(Trainer::lora_config_from_json(ckpt.meta.at("lora_config")), rng);
  auto fill = [&](const std::string& n, Mat& m) {
    const auto it = ckpt.tensors.find(n);
    if (it == ckpt.tensors.end())
      throw ParseError(ParseError::Kind::incompatible, "checkpoint missing tensor " + n);
    if (!it->second.same_shape(m))
      throw ParseError(ParseError::Kind::incompatible, "checkpoint shape mismatch for " + n);
    m = it->second;
  };
  b.model.visit([&](const std::string& n, Mat& m, bool) { fill(n, m); });
  b.encoder.visit([&](const std::string& n, Mat& m, TensorKind) { fill(n, m); });
  return b;
}

// Trains on a domain's train split, or loads the cached checkpoint for this
// (config, seed, domain). Returns the bundle plus the training log path.
inline ModelBundle train_or_load(BenchWorkspace& ws, DomainTag domain) {
  const RunConfig& cfg = ws.config();
  ws.ensure_forged();
  ModelBundle bundle = ModelBundle::fresh(cfg, ws.vocab().size());

  const std::string key = cfg.config_hash() + std::string(1, domain == DomainTag::A ? 'A' : 'B');
  const fs::path cache_dir = ws.root() / "cache";
  fs::create_directories(cache_dir);
  const fs::path ckpt_path = cache_dir / ("train_" + key + ".meitckpt");

  Trainer trainer(bundle.model, bundle.encoder, ws.vocab(), cfg.train);
  if (fs::exists(ckpt_path)) {
    trainer.restore(read_checkpoint_file(ckpt_path.string()), ws.vocab().content_hash());
    return bundle;
  }
  const auto train_rows = ws.rows_for_split(domain, Split::train);
  const auto val_rows = ws.rows_for_split(domain, Split::val);
  trainer.train(ws.tokenize_rows(train_rows), ws.tokenize_rows(val_rows), ws.provider());
  write_checkpoint_file(trainer.make_checkpoint(ws.vocab().content_hash()), ckpt_path.string());
  write_train_log_csv(trainer.log(),
                      (cache_dir / ("train_" + key + "_log.csv")).string());
  return bundle;
}

// ---------------------------------------------------------------------------
// Shared evaluation: greedy decoding over a test split.

struct EvalOptions {
  bool zero_prefix = false;
  double noise_level = 0.0;
  uint64_t noise_seed = 0;
  int cap = 0;
};

struct GenSample {
  std::string record_id, prompt, reference, generated;
};

struct EvalOutput {
  MetricReport metrics;
  double keyword_accuracy = 0.0;
  std::vector<GenSample> samples;
};

inline std::string first_clause(const std::string& text) {
  const size_t dot = text.find('.');
  std::string s = dot == std::string::npos ? text : text.substr(0, dot);
  while (!s.empty() && s.front() == ' ') s.erase(s.begin());
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

inline EvalOutput evaluate_model(ModelBundle& bundle, const Vocabulary& vocab,
                                 const std::vector<DataRow>& rows, const RecordProvider& provider,
                                 const EvalOptions& opts) {
  const int n = opts.cap > 0 ? std::min<int>(opts.cap, rows.size()) : static_cast<int>(rows.size());
  std::vector<GenSample> samples(n);
  std::vector<int> keyword_hits(n, 0);

#pragma omp parallel for schedule(dynamic, 4)
  for (int i = 0; i < n; ++i) {
    const DataRow& row = rows[i];
    EcgRecord rec = provider(row.ecg_path);
    if (opts.noise_level > 0.0)
      rec = add_gaussian_noise(rec, {opts.noise_level, Rng::mix(opts.noise_seed, crc32(row.record_id))});

    Mat h_e;
    if (opts.zero_prefix) {
      h_e = Mat(bundle.encoder.config.prefix_len, bundle.encoder.config.head_dim);
    } else {
      EncoderWorkspace ews;
      h_e = encode(rec, bundle.encoder, ews, false);
    }

    const std::string prompt_part = "<|user|>: " + row.prompt + " <|assistant|>: ";
    std::vector<int> prompt_ids;
    for (const auto& t : tokenize_with_markers(prompt_part)) prompt_ids.push_back(vocab.to_id(t));

    DecodeOptions dopts;
    dopts.max_new_tokens = std::min<int>(
        48, bundle.model.config.max_seq_len - static_cast<int>(prompt_ids.size()));
    auto out = generate(prompt_ids, h_e, bundle.model, dopts);
    if (!out.empty() && out.back() == kEosId) out.pop_back();

    GenSample gs;
    gs.record_id = row.record_id;
    gs.prompt = row.prompt;
    gs.reference = row.report;
    gs.generated = detokenize(out, vocab);
    keyword_hits[i] = first_clause(gs.generated) == rhythm_phrase(row.label.rhythm) ? 1 : 0;
    samples[i] = std::move(gs);
  }

  EvalOutput out;
  std::vector<std::string> cands(n), refs(n);
  for (int i = 0; i < n; ++i) {
    cands[i] = samples[i].generated;
    refs[i] = samples[i].reference;
  }
  out.metrics = compute_metric_report(cands, refs);
  long long hits = 0;
  for (int h : keyword_hits) hits += h;
  out.keyword_accuracy = n > 0 ? static_cast<double>(hits) / n : 0.0;
  out.samples = std::move(samples);
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark results.

struct BenchCondition {
  std::string label;
  MetricReport metrics;
  json extra;
};

struct BenchResult {
  std::string task;
  std::vector<BenchCondition> conditions;
  json config_snapshot;
  std::string config_hash;
  uint64_t seed = 0;
  std::vector<std::string> artifacts;
};

inline json metric_report_to_json(const MetricReport& m) {
  json j{{"bleu1", m.bleu1},
         {"bleu2", m.bleu2},
         {"bleu3", m.bleu3},
         {"bleu4", m.bleu4},
         {"meteor", m.meteor},
         {"rouge1", {{"p", m.rouge1.precision}, {"r", m.rouge1.recall}, {"f", m.rouge1.f}}},
         {"rouge2", {{"p", m.rouge2.precision}, {"r", m.rouge2.recall}, {"f", m.rouge2.f}}},
         {"rougeL", {{"p", m.rougeL.precision}, {"r", m.rougeL.recall}, {"f", m.rougeL.f}}},
         {"cider_d", m.cider_d}};
  if (m.bertscore)
    j["bertscore"] = {{"p", m.bertscore->precision}, {"r", m.bertscore->recall}, {"f", m.bertscore->f}};
  return j;
}

inline MetricReport metric_report_from_json(const json& j) {
  MetricReport m;
  m.bleu1 = j.at("bleu1");
  m.bleu2 = j.at("bleu2");
  m.bleu3 = j.at("bleu3");
  m.bleu4 = j.at("bleu4");
  m.meteor = j.at("meteor");
  auto prf = [](const json& k) {
    return PrfScore{k.at("p"), k.at("r"), k.at("f")};
  };
  m.rouge1 = prf(j.at("rouge1"));
  m.rouge2 = prf(j.at("rouge2"));
  m.rougeL = prf(j.at("rougeL"));
  m.cider_d = j.at("cider_d");
  if (j.contains("bertscore")) m.bertscore = prf(j.at("bertscore"));
  return m;
}

inline json bench_result_to_json(const BenchResult& r) {
  json conds = json::array();
  for (const auto& c : r.conditions)
    conds.push_back({{"label", c.label}, {"metrics", metric_report_to_json(c.metrics)}, {"extra", c.extra}});
  return {{"task", r.task},         {"conditions", conds}, {"config", r.config_snapshot},
          {"config_hash", r.config_hash}, {"seed", r.seed},  {"artifacts", r.artifacts}};
}

inline BenchResult bench_result_from_json(const json& j) {
  BenchResult r;
  r.task = j.at("task");
  for (const auto& c : j.at("conditions"))
    r.conditions.push_back({c.at("label"), metric_report_from_json(c.at("metrics")), c.value("extra", json::object())});
  r.config_snapshot = j.at("config");
  r.config_hash = j.at("config_hash");
  r.seed = j.at("seed");
  if (j.contains("artifacts")) r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  return r;
}

inline double composite_score(const MetricReport& m) {
  return (m.bleu3 + m.bleu4 + m.meteor + m.rougeL.f) / 4.0;
}

// ---------------------------------------------------------------------------
// Report emission: markdown + CSV tables and self-contained SVG line charts.

namespace emit_detail {

inline std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.6f", v);
  return b;
}

inline void write_text(const fs::path& path, const std::string& content) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << content;
}

struct Series {
  std::string name;
  std::vector<double> values;
};

// Minimal deterministic SVG polyline chart.
inline std::string svg_line_chart(const std::string& title, const std::vector<std::string>& x_labels,
                                  const std::vector<Series>& series) {
  const int w = 640, h = 420, ml = 70, mr = 160, mt = 48, mb = 56;
  const int pw = w - ml - mr, ph = h - mt - mb;
  double lo = 1e308, hi = -1e308;
  for (const auto& s : series)
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) {
    hi = lo + 1.0;
    lo -= 1.0;
  }
  const double pad = 0.06 * (hi - lo);
  lo -= pad;
  hi += pad;
  const int nx = static_cast<int>(x_labels.size());
  auto xf = [&](int i) { return ml + (nx <= 1 ? pw / 2 : i * pw / (nx - 1)); };
  auto yf = [&](double v) { return mt + static_cast<int>((hi - v) / (hi - lo) * ph); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::string s;
  char buf[256];
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" "
       "viewBox=\"0 0 640 420\">\n";
  s += "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"%d\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" "
                "text-anchor=\"middle\">%s</text>\n",
                ml + pw / 2, title.c_str());
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" "
                "stroke=\"#999\"/>\n",
                ml, mt, pw, ph);
  s += buf;
  for (int g = 0; g <= 4; ++g) {
    const double v = lo + (hi - lo) * g / 4.0;
    const int y = yf(v);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"#ddd\"/>\n", ml, y,
                  ml + pw, y);
    s += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"end\">%.3f</text>\n",
                  ml - 6, y + 4, v);
    s += buf;
  }
  for (int i = 0; i < nx; ++i) {
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  xf(i), mt + ph + 18, x_labels[i].c_str());
    s += buf;
  }
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& sr = series[si];
    std::string pts;
    for (int i = 0; i < static_cast<int>(sr.values.size()) && i < nx; ++i) {
      std::snprintf(buf, sizeof buf, "%d,%d ", xf(i), yf(sr.values[i]));
      pts += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                  pts.c_str(), colors[si % 6]);
    s += buf;
    const int ly = mt + 16 + static_cast<int>(si) * 18;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"%s\" "
                  "stroke-width=\"2\"/>\n",
                  ml + pw + 10, ly, ml + pw + 34, ly, colors[si % 6]);
    s += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"12\">%s</text>\n",
                  ml + pw + 40, ly + 4, sr.name.c_str());
    s += buf;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace emit_detail

// Writes result.json, table.md, table.csv and task-appropriate charts into
// <out>/<task>/; byte-identical across re-emissions of the same result.
inline std::vector<std::string> emit_report(const BenchResult& result, const fs::path& out_root) {
  using emit_detail::fmt;
  const fs::path dir = out_root / result.task;
  fs::create_directories(dir);
  std::vector<std::string> written;

  auto add = [&](const fs::path& p, const std::string& content) {
    emit_detail::write_text(p, content);
    written.push_back(p.string());
  };

  add(dir / "result.json", bench_result_to_json(result).dump(2) + "\n");

  std::string csv = "condition,bleu1,bleu2,bleu3,bleu4,meteor,rougeL,rouge1,rouge2,cider_d\n";
  std::string md = "| condition | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | METEOR | ROUGE-L | ROUGE-1 "
                   "| ROUGE-2 | CIDEr-D |\n|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : result.conditions) {
    const auto& m = c.metrics;
    csv += c.label + "," + fmt(m.bleu1) + "," + fmt(m.bleu2) + "," + fmt(m.bleu3) + "," +
           fmt(m.bleu4) + "," + fmt(m.meteor) + "," + fmt(m.rougeL.f) + "," + fmt(m.rouge1.f) +
           "," + fmt(m.rouge2.f) + "," + fmt(m.cider_d) + "\n";
    md += "| " + c.label + " | " + fmt(m.bleu1) + " | " + fmt(m.bleu2) + " | " + fmt(m.bleu3) +
          " | " + fmt(m.bleu4) + " | " + fmt(m.meteor) + " | " + fmt(m.rougeL.f) + " | " +
          fmt(m.rouge1.f) + " | " + fmt(m.rouge2.f) + " | " + fmt(m.cider_d) + " |\n";
  }
  add(dir / "table.csv", csv);
  add(dir / "table.md", md);

  if (result.task == "noise") {
    std::vector<std::string> xl;
    emit_detail::Series b4{"BLEU-4", {}}, mt{"METEOR", {}}, rl{"ROUGE-L", {}}, cd{"CIDEr-D/10", {}};
    for (const auto& c : result.conditions) {
      xl.push_back(c.label);
      b4.values.push_back(c.metrics.bleu4);
      mt.values.push_back(c.metrics.meteor);
      rl.values.push_back(c.metrics.rougeL.f);
      cd.values.push_back(c.metrics.cider_d / 10.0);
    }
    add(dir / "noise_curve.svg",
        emit_detail::svg_line_chart("Signal perturbation robustness", xl, {b4, mt, rl, cd}));
  } else if (result.task == "zeroshot") {
    std::vector<std::string> xl;
    emit_detail::Series comp{"composite", {}};
    for (const auto& c : result.conditions) {
      xl.push_back(c.label);
      comp.values.push_back(c.extra.value("composite", composite_score(c.metrics)));
    }
    add(dir / "zeroshot.svg",
        emit_detail::svg_line_chart("Zero-shot transfer (mean of BLEU-3/4, METEOR, ROUGE-L)", xl,
                                    {comp}));
  }
  return written;
}

// Emits loss/METEOR training curves from a trainer log CSV.
inline std::optional<std::string> emit_training_curves(const fs::path& log_csv,
                                                       const fs::path& out_svg) {
  std::ifstream f(log_csv);
  if (!f) return std::nullopt;
  std::string line;
  std::getline(f, line);  // header
  emit_detail::Series loss{"val_loss", {}}, met{"val_METEOR", {}};
  std::vector<std::string> xl;
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string step, lr, tl, vl, vm;
    std::getline(ss, step, ',');
    std::getline(ss, lr, ',');
    std::getline(ss, tl, ',');
    std::getline(ss, vl, ',');
    std::getline(ss, vm, ',');
    if (vl.empty()) continue;
    xl.push_back(step);
    loss.values.push_back(std::strtod(vl.c_str(), nullptr));
    met.values.push_back(std::strtod(vm.c_str(), nullptr));
  }
  if (xl.empty()) return std::nullopt;
  emit_detail::write_text(out_svg,
                          emit_detail::svg_line_chart("Instruction tuning: validation loss and METEOR",
                                                      xl, {loss, met}));
  return out_svg.string();
}

// ---------------------------------------------------------------------------
// The four benchmark tasks.

inline BenchResult run_quality(BenchWorkspace& ws) {
  const RunConfig& cfg = ws.config();
  ws.ensure_forged();
  ModelBundle trained = train_or_load(ws, DomainTag::A);
  ModelBundle untrained = ModelBundle::fresh(cfg, ws.vocab().size());

  const auto test_rows = ws.rows_for_split(DomainTag::A, Split::test);
  EvalOptions opts;
  opts.cap = cfg.eval_cap;

  BenchResult res;
  res.task = "quality";
  res.seed = cfg.seed;
  res.config_snapshot = cfg.to_json();
  res.config_hash = cfg.config_hash();

  auto run_cond = [&](const std::string& label, ModelBundle& b, bool zero_prefix) {
    EvalOptions o = opts;
    o.zero_prefix = zero_prefix;
    EvalOutput out = evaluate_model(b, ws.vocab(), test_rows, ws.provider(), o);
    BenchCondition c;
    c.label = label;
    c.metrics = out.metrics;
    c.extra = {{"keyword_accuracy", out.keyword_accuracy},
               {"composite", composite_score(out.metrics)},
               {"n_eval", static_cast<int>(out.samples.size())}};
    res.conditions.push_back(c);
    return out;
  };

  EvalOutput trained_out = run_cond("trained", trained, false);
  run_cond("trained_zero_prefix", trained, true);
  run_cond("untrained", untrained, false);

  // qualitative sample dump
  std::string dump = "# Generated report samples\n\n";
  for (int i = 0; i < std::min<int>(cfg.qualitative_k, trained_out.samples.size()); ++i) {
    const auto& s = trained_out.samples[i];
    dump += "## " + s.record_id + "\n- prompt: " + s.prompt + "\n- reference: " + s.reference +
            "\n- generated: " + s.generated + "\n\n";
  }
  const fs::path dir = ws.root() / "quality";
  fs::create_directories(dir);
  emit_detail::write_text(dir / "samples.md", dump);
  res.artifacts = emit_report(res, ws.root());
  res.artifacts.push_back((dir / "samples.md").string());
  const auto curves = emit_training_curves(
      ws.root() / "cache" / ("train_" + cfg.config_hash() + "A_log.csv"), dir / "train_curves.svg");
  if (curves) res.artifacts.push_back(*curves);
  return res;
}

inline BenchResult run_zeroshot(BenchWorkspace& ws) {
  const RunConfig& cfg = ws.config();
  ws.ensure_forged();
  ModelBundle it_a = train_or_load(ws, DomainTag::A);
  ModelBundle it_b = train_or_load(ws, DomainTag::B);
  ModelBundle untrained = ModelBundle::fresh(cfg, ws.vocab().size());

  const auto test_rows = ws.rows_for_split(DomainTag::B, Split::test);
  BenchResult res;
  res.task = "zeroshot";
  res.seed = cfg.seed;
  res.config_snapshot = cfg.to_json();
  res.config_hash = cfg.config_hash();

  auto run_cond = [&](const std::string& label, ModelBundle& b) {
    EvalOptions o;
    o.cap = cfg.eval_cap;
    EvalOutput out = evaluate_model(b, ws.vocab(), test_rows, ws.provider(), o);
    BenchCondition c;
    c.label = label;
    c.metrics = out.metrics;
    c.extra = {{"composite", composite_score(out.metrics)},
               {"keyword_accuracy", out.keyword_accuracy},
               {"n_eval", static_cast<int>(out.samples.size())}};
    res.conditions.push_back(c);
  };

  run_cond("zeroshot_it", it_a);
  run_cond("zeroshot_wo_it", untrained);
  run_cond("target_it", it_b);
  res.artifacts = emit_report(res, ws.root());
  return res;
}

inline BenchResult run_noise(BenchWorkspace& ws) {
  const RunConfig& cfg = ws.config();
  ws.ensure_forged();
  ModelBundle trained = train_or_load(ws, DomainTag::A);

  auto test_rows = ws.rows_for_split(DomainTag::A, Split::test);
  // sampled test subset, sampling seed recorded in the result
  if (cfg.noise_subset_fraction < 1.0) {
    std::vector<int> idx(test_rows.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Rng rng(Rng::mix(cfg.noise_subset_seed, 0x5b5e7ULL));
    rng.shuffle(idx);
    const int keep = std::max<int>(1, static_cast<int>(cfg.noise_subset_fraction * test_rows.size()));
    std::vector<DataRow> sub;
    for (int i = 0; i < keep; ++i) sub.push_back(test_rows[idx[i]]);
    test_rows = std::move(sub);
  }

  BenchResult res;
  res.task = "noise";
  res.seed = cfg.seed;
  res.config_snapshot = cfg.to_json();
  res.config_hash = cfg.config_hash();

  for (double level : cfg.noise_levels) {
    EvalOptions o;
    o.cap = cfg.eval_cap;
    o.noise_level = level;
    o.noise_seed = Rng::mix(cfg.seed, 0xa01feULL + static_cast<uint64_t>(level * 1000));
    EvalOutput out = evaluate_model(trained, ws.vocab(), test_rows, ws.provider(), o);
    char label[32];
    std::snprintf(label, sizeof label, "level_%.2f", level);
    BenchCondition c;
    c.label = label;
    c.metrics = out.metrics;
    c.extra = {{"noise_level", level},
               {"keyword_accuracy", out.keyword_accuracy},
               {"subset_fraction", cfg.noise_subset_fraction},
               {"subset_seed", cfg.noise_subset_seed},
               {"n_eval", static_cast<int>(out.samples.size())}};
    res.conditions.push_back(c);
  }
  res.artifacts = emit_report(res, ws.root());
  return res;
}

inline BenchResult run_ablation(BenchWorkspace& ws) {
  const RunConfig& cfg = ws.config();
  ws.ensure_forged();

  // instruction tuning condition reuses the cached domain-A model
  ModelBundle it = train_or_load(ws, DomainTag::A);

  // direct fine-tuning: report-only sequences, loss on all tokens, same budget
  ModelBundle direct = ModelBundle::fresh(cfg, ws.vocab().size());
  const auto train_rows = ws.rows_for_split(DomainTag::A, Split::train);
  const auto val_rows = ws.rows_for_split(DomainTag::A, Split::val);
  Trainer direct_trainer(direct.model, direct.encoder, ws.vocab(), cfg.train);
  direct_trainer.train(ws.tokenize_rows_report_only(train_rows),
                       ws.tokenize_rows_report_only(val_rows), ws.provider());

  const auto test_rows = ws.rows_for_split(DomainTag::A, Split::test);
  BenchResult res;
  res.task = "ablation";
  res.seed = cfg.seed;
  res.config_snapshot = cfg.to_json();
  res.config_hash = cfg.config_hash();

  const long long budget = direct_trainer.total_steps(train_rows.size());

  auto run_cond = [&](const std::string& label, ModelBundle& b, long long steps) {
    EvalOptions o;
    o.cap = cfg.eval_cap;
    EvalOutput out = evaluate_model(b, ws.vocab(), test_rows, ws.provider(), o);
    BenchCondition c;
    c.label = label;
    c.metrics = out.metrics;
    c.extra = {{"keyword_accuracy", out.keyword_accuracy},
               {"train_steps", steps},
               {"composite", composite_score(out.metrics)},
               {"n_eval", static_cast<int>(out.samples.size())}};
    res.conditions.push_back(c);
  };
  run_cond("instruction_tuning", it, budget);
  run_cond("direct_finetune", direct, direct_trainer.step());
  res.artifacts = emit_report(res, ws.root());
  return res;
}

}  // namespace meit
