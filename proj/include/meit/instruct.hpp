// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "meit/common.hpp"
#include "meit/rng.hpp"
#include "meit/textproc.hpp"

namespace meit {

// Special token ids occupy the lowest slots of every vocabulary.
enum SpecialToken : int {
  kPadId = 0,
  kUnkId = 1,
  kUserId = 2,
  kAssistantId = 3,
  kEosId = 4,
  kNumSpecials = 5,
};

inline const std::vector<std::string>& special_token_strings() {
  static const std::vector<std::string> s = {"<pad>", "<unk>", "<|user|>", "<|assistant|>", "</s>"};
  return s;
}

struct PromptPool {
  std::vector<std::string> prompts;
  std::string version;
};

// Versioned, in-repo instruction pool. v1 is frozen; add a new version
// instead of editing entries.
inline const PromptPool& default_prompt_pool() {
  static const PromptPool pool{
      {
          "Describe this ECG.",
          "Write the cardiology report for this 12-lead recording.",
          "What does this electrocardiogram show?",
          "Summarize the rhythm and findings of this ECG.",
          "Interpret the attached ECG signal and report the findings.",
          "Generate a clinical report for this ECG.",
          "Provide a diagnostic reading of this tracing.",
          "What findings are present in this ECG recording?",
          "Read this ECG and produce a short report.",
          "State the rhythm and rate for this recording.",
          "Give your interpretation of this 12-lead ECG.",
          "Report the cardiac findings shown by this signal.",
      },
      "v1"};
  return pool;
}

inline std::string sample_prompt(const PromptPool& pool, uint64_t rng_seed) {
  if (pool.prompts.empty()) throw ArgumentError("prompt pool is empty");
  Rng rng(Rng::mix(rng_seed, 0x70726f6dULL));
  return pool.prompts[rng.below(pool.prompts.size())];
}

// The instruction-following template. The ECG signal contributes no surface
// tokens; it enters the model as an attention prefix.
inline std::string render_template(const std::string& prompt, const std::string& report) {
  if (prompt.empty()) throw ArgumentError("prompt must be non-empty");
  if (report.empty()) throw ArgumentError("report must be non-empty");
  for (const auto& marker : special_token_strings()) {
    if (prompt.find(marker) != std::string::npos || report.find(marker) != std::string::npos)
      throw ArgumentError("text collides with special marker " + marker);
  }
  return "<|user|>: " + prompt + " <|assistant|>: " + report + "</s>";
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& s : special_token_strings()) {
      token_to_id_[s] = static_cast<int>(tokens_.size());
      tokens_.push_back(s);
    }
  }

  // Word-level vocabulary: lowercased, frequency-sorted (ties break
  // lexicographically), capped at max_size including the specials.
  static Vocabulary build(const std::vector<std::string>& texts, int max_size = 4096) {
    if (texts.empty()) throw ArgumentError("cannot build vocabulary from an empty corpus");
    if (max_size <= kNumSpecials) throw ArgumentError("vocabulary cap too small");
    std::map<std::string, long long> freq;
    for (const auto& t : texts)
      for (const auto& w : split_words(t)) ++freq[w];
    std::vector<std::pair<std::string, long long>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, n] : items) {
      if (static_cast<int>(v.tokens_.size()) >= max_size) break;
      v.token_to_id_[tok] = static_cast<int>(v.tokens_.size());
      v.tokens_.push_back(tok);
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  int to_id(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& to_token(int id) const {
    if (id < 0 || id >= size()) throw ArgumentError("token id out of range");
    return tokens_[id];
  }

  uint32_t content_hash() const {
    std::string joined;
    for (const auto& t : tokens_) {
      joined += t;
      joined.push_back('\n');
    }
    return crc32(joined);
  }

  // plain text, one token per line, line number = id
  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    for (const auto& t : tokens_) f << t << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.token_to_id_.clear();
    std::string line;
    while (std::getline(f, line)) {
      v.token_to_id_[line] = static_cast<int>(v.tokens_.size());
      v.tokens_.push_back(line);
    }
    const auto& specials = special_token_strings();
    if (v.size() < kNumSpecials)
      throw ParseError(ParseError::Kind::bad_header, "vocabulary file too short");
    for (int i = 0; i < kNumSpecials; ++i)
      if (v.tokens_[i] != specials[i])
        throw ParseError(ParseError::Kind::bad_header, "special tokens malformed in vocabulary file");
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> token_to_id_;
};

// Tokenizes text that may contain special markers; markers are matched
// first and emitted atomically, everything else follows split_words rules.
inline std::vector<std::string> tokenize_with_markers(const std::string& text) {
  const auto& markers = special_token_strings();
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    for (const auto& m : markers) {
      if (text.compare(i, m.size(), m) == 0) {
        flush();
        out.push_back(m);
        i += m.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.push_back(std::string(1, text[i]));
    }
    ++i;
  }
  flush();
  return out;
}

// Inverse of tokenization up to case and whitespace: punctuation and the
// stop marker reattach to the preceding token.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& t = vocab.to_token(id);
    const bool attach =
        t == "</s>" || (t.size() == 1 && !std::isalnum(static_cast<unsigned char>(t[0])));
    if (!out.empty() && !attach) out.push_back(' ');
    out += t;
  }
  return out;
}

enum class Split : int { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct InstructionSample {
  std::string prompt_text;
  std::string ecg_ref;
  std::string report_text;
  Split split = Split::train;
};

struct TokenizedExample {
  std::vector<int> token_ids;
  std::vector<bool> loss_mask;
  int response_start = 0;  // first report token, right after "<|assistant|>:"
  std::string ecg_ref;
};

// Renders and tokenizes one sample. The loss mask covers exactly the
// response tokens plus the terminal stop token. When the sequence runs over
// max_seq_len the response is truncated from the right (the stop token is
// kept); the prompt side is never cut.
inline TokenizedExample tokenize_example(const InstructionSample& sample, const Vocabulary& vocab,
                                         int max_seq_len = 256) {
  const std::string rendered = render_template(sample.prompt_text, sample.report_text);
  const auto toks = tokenize_with_markers(rendered);

  int response_start = -1;
  for (size_t i = 0; i + 1 < toks.size(); ++i) {
    if (toks[i] == "<|assistant|>" && toks[i + 1] == ":") {
      response_start = static_cast<int>(i) + 2;
      break;
    }
  }
  if (response_start < 0) throw ArgumentError("rendered template lacks the assistant marker");
  if (response_start + 1 > max_seq_len)
    throw ArgumentError("prompt alone exceeds max_seq_len");

  std::vector<int> ids;
  ids.reserve(toks.size());
  for (const auto& t : toks) ids.push_back(vocab.to_id(t));
  if (static_cast<int>(ids.size()) > max_seq_len) {
    ids.resize(max_seq_len);
    ids.back() = kEosId;
  }

  TokenizedExample ex;
  ex.token_ids = std::move(ids);
  ex.response_start = response_start;
  ex.ecg_ref = sample.ecg_ref;
  ex.loss_mask.assign(ex.token_ids.size(), false);
  for (size_t i = static_cast<size_t>(response_start); i < ex.token_ids.size(); ++i)
    ex.loss_mask[i] = true;
  return ex;
}

struct SplitIndices {
  std::vector<int> train, val, test;
};

// floor(r_train*n), floor(r_val*n), remainder; shuffled, disjoint, exhaustive.
inline SplitIndices split_dataset(int n, double r_train, double r_val, double r_test,
                                  uint64_t seed) {
  if (n < 0) throw ArgumentError("split: n must be nonnegative");
  if (std::abs(r_train + r_val + r_test - 1.0) > 1e-9)
    throw ArgumentError("split ratios must sum to 1");
  if (r_train < 0 || r_val < 0 || r_test < 0) throw ArgumentError("split ratios must be nonnegative");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(Rng::mix(seed, 0x73706c69ULL));
  rng.shuffle(idx);
  const int n_train = static_cast<int>(std::floor(r_train * n));
  const int n_val = static_cast<int>(std::floor(r_val * n));
  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  return s;
}

}  // namespace meit
