// SPDX-License-Identifier: Apache-2.0
//
// meit — forge data, train, generate, evaluate and run the benchmark tasks.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "meit/meit.hpp"

namespace {

using nlohmann::json;

meit::RunConfig load_config(const std::string& path, uint64_t seed_override, bool has_seed) {
  meit::RunConfig cfg = path.empty() ? meit::RunConfig{} : meit::RunConfig::load(path);
  if (has_seed) {
    cfg.seed = seed_override;
    cfg.train.seed = seed_override;
  }
  return cfg;
}

std::vector<std::pair<std::string, std::string>> read_id_text_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw meit::IoError("cannot open: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out.emplace_back(j.at("id").get<std::string>(), j.at("text").get<std::string>());
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"multimodal ECG instruction tuning: data, training and benchmark harness"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  uint64_t seed = 0;
  bool has_seed = false;
  app.add_option("--config", config_path, "JSON config file")->expected(1);
  app.add_flag_callback("--version", [] {
    std::cout << "meit 1.0\n";
    std::exit(0);
  });
  auto seed_opt = app.add_option("--seed", seed, "seed override");

  auto* forge = app.add_subcommand("forge", "generate the two-domain corpus and vocabulary");
  auto* train = app.add_subcommand("train", "instruction-tune on one domain");
  std::string train_domain = "A";
  train->add_option("--domain", train_domain, "A or B")->check(CLI::IsMember({"A", "B"}));

  auto* generate_cmd = app.add_subcommand("generate", "decode a report for one ECG record");
  std::string gen_ckpt, gen_vocab, gen_ecg, gen_prompt = "Describe this ECG.";
  std::string gen_decode = "greedy";
  int gen_topk = 10;
  generate_cmd->add_option("--ckpt", gen_ckpt, "checkpoint file")->required();
  generate_cmd->add_option("--vocab", gen_vocab, "vocabulary file")->required();
  generate_cmd->add_option("--ecg", gen_ecg, "MECG1 record file")->required();
  generate_cmd->add_option("--prompt", gen_prompt, "instruction prompt");
  generate_cmd->add_option("--decode", gen_decode, "greedy or top-k")
      ->check(CLI::IsMember({"greedy", "top-k"}));
  generate_cmd->add_option("--top-k", gen_topk, "candidates for top-k decoding");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "score candidate reports against references");
  std::string eval_cands, eval_refs, eval_out;
  evaluate_cmd->add_option("--candidates", eval_cands, "JSONL with {id, text}")->required();
  evaluate_cmd->add_option("--references", eval_refs, "JSONL with {id, text}")->required();
  evaluate_cmd->add_option("--out", eval_out, "directory for table artifacts");

  auto* bench = app.add_subcommand("bench", "run a benchmark task end to end");
  std::string bench_task;
  bench->add_option("task", bench_task, "quality | zeroshot | noise | ablation")
      ->required()
      ->check(CLI::IsMember({"quality", "zeroshot", "noise", "ablation"}));

  auto* report = app.add_subcommand("report", "re-emit tables and charts from a result.json");
  std::string report_result, report_out;
  report->add_option("--result", report_result, "BenchResult json")->required();
  report->add_option("--out", report_out, "output root (defaults to the file's directory)");

  app.parse(argc, argv);
  has_seed = seed_opt->count() > 0;

  if (*forge) {
    meit::RunConfig cfg = load_config(config_path, seed, has_seed);
    meit::BenchWorkspace ws(cfg);
    ws.forge();
    std::cout << json{{"forged", true},
                      {"out_dir", cfg.out_dir},
                      {"domain_a", cfg.corpus_a_n},
                      {"domain_b", cfg.corpus_b_n},
                      {"vocab_size", ws.vocab().size()}}
                     .dump(2)
              << "\n";
  } else if (*train) {
    meit::RunConfig cfg = load_config(config_path, seed, has_seed);
    meit::BenchWorkspace ws(cfg);
    const auto domain = train_domain == "A" ? meit::DomainTag::A : meit::DomainTag::B;
    meit::ModelBundle bundle = meit::train_or_load(ws, domain);
    (void)bundle;
    const std::string key = cfg.config_hash() + train_domain;
    std::cout << json{{"trained", true},
                      {"checkpoint", (ws.root() / "cache" / ("train_" + key + ".meitckpt")).string()},
                      {"log", (ws.root() / "cache" / ("train_" + key + "_log.csv")).string()}}
                     .dump(2)
              << "\n";
  } else if (*generate_cmd) {
    const meit::Vocabulary vocab = meit::Vocabulary::load(gen_vocab);
    meit::ModelBundle bundle =
        meit::bundle_from_checkpoint(meit::read_checkpoint_file(gen_ckpt), vocab.content_hash());
    const meit::EcgRecord rec = meit::read_record(gen_ecg);
    meit::EncoderWorkspace ews;
    const meit::Mat h_e = meit::encode(rec, bundle.encoder, ews, false);
    const std::string prompt_part = "<|user|>: " + gen_prompt + " <|assistant|>: ";
    std::vector<int> ids;
    for (const auto& t : meit::tokenize_with_markers(prompt_part)) ids.push_back(vocab.to_id(t));
    meit::DecodeOptions opts;
    if (gen_decode == "top-k") opts.kind = meit::DecodeOptions::Kind::top_k;
    opts.top_k = gen_topk;
    opts.seed = has_seed ? seed : 0;
    opts.max_new_tokens = bundle.model.config.max_seq_len - static_cast<int>(ids.size());
    auto out = meit::generate(ids, h_e, bundle.model, opts);
    if (!out.empty() && out.back() == meit::kEosId) out.pop_back();
    std::cout << json{{"record_id", rec.record_id},
                      {"prompt", gen_prompt},
                      {"report", meit::detokenize(out, vocab)}}
                     .dump(2)
              << "\n";
  } else if (*evaluate_cmd) {
    const auto cands = read_id_text_jsonl(eval_cands);
    const auto refs = read_id_text_jsonl(eval_refs);
    if (cands.size() != refs.size())
      throw meit::ArgumentError("candidate and reference files differ in length");
    std::vector<std::string> c, r;
    for (size_t i = 0; i < cands.size(); ++i) {
      if (cands[i].first != refs[i].first)
        throw meit::ArgumentError("id mismatch at line " + std::to_string(i + 1) + ": " +
                                  cands[i].first + " vs " + refs[i].first);
      c.push_back(cands[i].second);
      r.push_back(refs[i].second);
    }
    const meit::MetricReport rep = meit::compute_metric_report(c, r);
    std::cout << meit::metric_report_to_json(rep).dump(2) << "\n";
    if (!eval_out.empty()) {
      meit::BenchResult res;
      res.task = "evaluate";
      res.conditions.push_back({"corpus", rep, json{{"n_pairs", c.size()}}});
      res.config_snapshot = json::object();
      res.config_hash = "";
      meit::emit_report(res, eval_out);
    }
  } else if (*bench) {
    meit::RunConfig cfg = load_config(config_path, seed, has_seed);
    meit::BenchWorkspace ws(cfg);
    meit::BenchResult res;
    if (bench_task == "quality")
      res = meit::run_quality(ws);
    else if (bench_task == "zeroshot")
      res = meit::run_zeroshot(ws);
    else if (bench_task == "noise")
      res = meit::run_noise(ws);
    else
      res = meit::run_ablation(ws);
    json summary{{"task", res.task}, {"artifacts", res.artifacts}};
    for (const auto& c : res.conditions)
      summary["conditions"][c.label] = meit::metric_report_to_json(c.metrics);
    std::cout << summary.dump(2) << "\n";
  } else if (*report) {
    std::ifstream f(report_result);
    if (!f) throw meit::IoError("cannot open: " + report_result);
    json j;
    f >> j;
    const meit::BenchResult res = meit::bench_result_from_json(j);
    const std::string out =
        report_out.empty() ? std::filesystem::path(report_result).parent_path().parent_path().string()
                           : report_out;
    const auto written = meit::emit_report(res, out.empty() ? "." : out);
    std::cout << json{{"written", written}}.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::ParseError& e) {
    return CLI::App().exit(e);
  } catch (const meit::ParseError& e) {
    std::cerr << json{{"error", {{"type", "parse"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  } catch (const meit::ArgumentError& e) {
    std::cerr << json{{"error", {{"type", "argument"}, {"message", e.what()}}}}.dump() << "\n";
    return 3;
  } catch (const meit::IoError& e) {
    std::cerr << json{{"error", {{"type", "io"}, {"message", e.what()}}}}.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"type", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  }
}
