// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meit/common.hpp"
#include "meit/textproc.hpp"

namespace meit {

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

struct MetricReport {
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double meteor = 0.0;
  PrfScore rouge1, rouge2, rougeL;
  double cider_d = 0.0;
  std::optional<PrfScore> bertscore;
};

namespace detail {

inline void check_aligned(const std::vector<std::string>& cands,
                          const std::vector<std::string>& refs) {
  if (cands.empty() || cands.size() != refs.size())
    throw ArgumentError("candidates and references must be aligned and non-empty");
}

// n-gram multiset with '\x1f'-joined keys; std::map keeps iteration
// deterministic so corpus sums do not depend on hash order.
inline std::map<std::string, int> ngram_counts(const std::vector<std::string>& toks, int n) {
  std::map<std::string, int> out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += toks[i + k];
    }
    ++out[key];
  }
  return out;
}

}  // namespace detail

// Corpus-level BLEU-n: clipped n-gram precisions pooled over all pairs,
// uniform-weight geometric mean, brevity penalty exp(1 - r/c) for c <= r.
inline double bleu(const std::vector<std::string>& candidates,
                   const std::vector<std::string>& references, int max_n) {
  detail::check_aligned(candidates, references);
  if (max_n < 1) throw ArgumentError("bleu: n must be >= 1");

  std::vector<long long> matched(max_n + 1, 0), total(max_n + 1, 0);
  long long cand_len = 0, ref_len = 0;
  for (size_t p = 0; p < candidates.size(); ++p) {
    const auto c = split_words(candidates[p]);
    const auto r = split_words(references[p]);
    cand_len += static_cast<long long>(c.size());
    ref_len += static_cast<long long>(r.size());
    for (int n = 1; n <= max_n; ++n) {
      const auto cc = detail::ngram_counts(c, n);
      const auto rc = detail::ngram_counts(r, n);
      for (const auto& [g, cnt] : cc) {
        total[n] += cnt;
        const auto it = rc.find(g);
        if (it != rc.end()) matched[n] += std::min(cnt, it->second);
      }
    }
  }
  if (cand_len == 0) return 0.0;

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    if (total[n] == 0 || matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double bp =
      cand_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_sum / max_n);
}

// ROUGE-N: per-pair clipped n-gram overlap P/R/F1, averaged over the corpus.
inline PrfScore rouge_n(const std::vector<std::string>& candidates,
                        const std::vector<std::string>& references, int n) {
  detail::check_aligned(candidates, references);
  PrfScore acc;
  for (size_t p = 0; p < candidates.size(); ++p) {
    const auto cc = detail::ngram_counts(split_words(candidates[p]), n);
    const auto rc = detail::ngram_counts(split_words(references[p]), n);
    long long overlap = 0, c_total = 0, r_total = 0;
    for (const auto& [g, cnt] : cc) {
      c_total += cnt;
      const auto it = rc.find(g);
      if (it != rc.end()) overlap += std::min(cnt, it->second);
    }
    for (const auto& [g, cnt] : rc) r_total += cnt;
    const double prec = c_total > 0 ? static_cast<double>(overlap) / c_total : 0.0;
    const double rec = r_total > 0 ? static_cast<double>(overlap) / r_total : 0.0;
    acc.precision += prec;
    acc.recall += rec;
    acc.f += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  const double m = static_cast<double>(candidates.size());
  return {acc.precision / m, acc.recall / m, acc.f / m};
}

namespace detail {

inline int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace detail

// ROUGE-L with the weighted-F convention F = (1+b^2)PR / (R + b^2 P), b = 1.2.
inline PrfScore rouge_l(const std::vector<std::string>& candidates,
                        const std::vector<std::string>& references, double beta = 1.2) {
  detail::check_aligned(candidates, references);
  PrfScore acc;
  const double b2 = beta * beta;
  for (size_t p = 0; p < candidates.size(); ++p) {
    const auto c = split_words(candidates[p]);
    const auto r = split_words(references[p]);
    const int lcs = detail::lcs_length(c, r);
    const double prec = c.empty() ? 0.0 : static_cast<double>(lcs) / c.size();
    const double rec = r.empty() ? 0.0 : static_cast<double>(lcs) / r.size();
    acc.precision += prec;
    acc.recall += rec;
    acc.f += (rec + b2 * prec) > 0.0 ? (1.0 + b2) * prec * rec / (rec + b2 * prec) : 0.0;
  }
  const double m = static_cast<double>(candidates.size());
  return {acc.precision / m, acc.recall / m, acc.f / m};
}

namespace detail {

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
};

// Two-stage METEOR alignment: exact surface matches first, light stems on
// the leftovers. Match counts per stage are fixed by occurrence counts;
// the assignment search below only decides which occurrences pair up, to
// reach the minimum chunk count. Depth-first with chunk-count pruning and
// a visit cap; the cap is far beyond anything clause-style reports hit.
class MeteorMatcher {
 public:
  MeteorMatcher(const std::vector<std::string>& cand, const std::vector<std::string>& ref)
      : cand_(cand), ref_(ref) {}

  MeteorAlignment align() {
    build_quotas();
    const int total = quota_total_;
    if (total == 0) return {0, 0};
    best_chunks_ = constructive_chunks();
    if (best_chunks_ > 1) {
      ref_used_.assign(ref_.size(), false);
      chunks_so_far_ = 0;
      matched_so_far_ = 0;
      visits_ = 0;
      dfs(0, -2, -2);
    }
    return {total, best_chunks_};
  }

 private:
  // stage 1 keys are surfaces, stage 2 keys are stems of stage-1 leftovers
  void build_quotas() {
    std::map<std::string, int> c_surf, r_surf;
    for (const auto& w : cand_) ++c_surf[w];
    for (const auto& w : ref_) ++r_surf[w];

    std::map<std::string, int> exact_quota;
    for (const auto& [w, cn] : c_surf) {
      const auto it = r_surf.find(w);
      if (it != r_surf.end()) exact_quota[w] = std::min(cn, it->second);
    }

    std::map<std::string, int> c_stem_left, r_stem_left;
    for (const auto& [w, cn] : c_surf) {
      const int used = exact_quota.count(w) ? exact_quota[w] : 0;
      if (cn - used > 0) c_stem_left[stem_light(w)] += cn - used;
    }
    for (const auto& [w, rn] : r_surf) {
      const int used = exact_quota.count(w) ? exact_quota[w] : 0;
      if (rn - used > 0) r_stem_left[stem_light(w)] += rn - used;
    }
    std::map<std::string, int> stem_quota;
    for (const auto& [s, cn] : c_stem_left) {
      const auto it = r_stem_left.find(s);
      if (it != r_stem_left.end()) stem_quota[s] = std::min(cn, it->second);
    }

    exact_quota_ = std::move(exact_quota);
    stem_quota_ = std::move(stem_quota);
    quota_total_ = 0;
    for (const auto& [k, v] : exact_quota_) quota_total_ += v;
    for (const auto& [k, v] : stem_quota_) quota_total_ += v;

    cand_stem_.resize(cand_.size());
    for (size_t i = 0; i < cand_.size(); ++i) cand_stem_[i] = stem_light(cand_[i]);
    ref_stem_.resize(ref_.size());
    for (size_t j = 0; j < ref_.size(); ++j) ref_stem_[j] = stem_light(ref_[j]);
  }

  // Guaranteed-feasible seed: per class, pair the k-th available candidate
  // occurrence with the k-th available reference occurrence, exact classes
  // first. Always achieves the full quota; DFS then minimizes chunks.
  int constructive_chunks() const {
    std::vector<int> match_of(cand_.size(), -1);
    std::vector<bool> c_used(cand_.size(), false), r_used(ref_.size(), false);

    for (const auto& [w, q] : exact_quota_) {
      int need = q;
      size_t j = 0;
      for (size_t i = 0; i < cand_.size() && need > 0; ++i) {
        if (c_used[i] || cand_[i] != w) continue;
        while (j < ref_.size() && (r_used[j] || ref_[j] != w)) ++j;
        match_of[i] = static_cast<int>(j);
        c_used[i] = true;
        r_used[j] = true;
        --need;
      }
    }
    for (const auto& [s, q] : stem_quota_) {
      int need = q;
      size_t j = 0;
      for (size_t i = 0; i < cand_.size() && need > 0; ++i) {
        if (c_used[i] || cand_stem_[i] != s) continue;
        while (j < ref_.size() && (r_used[j] || ref_stem_[j] != s)) ++j;
        if (j >= ref_.size()) break;
        match_of[i] = static_cast<int>(j);
        c_used[i] = true;
        r_used[j] = true;
        --need;
      }
    }

    int chunks = 0, last_c = -2, last_r = -2;
    for (size_t i = 0; i < cand_.size(); ++i) {
      if (match_of[i] < 0) continue;
      if (!(static_cast<int>(i) == last_c + 1 && match_of[i] == last_r + 1)) ++chunks;
      last_c = static_cast<int>(i);
      last_r = match_of[i];
    }
    return chunks;
  }

  void dfs(size_t ci, int last_c, int last_r) {
    if (chunks_so_far_ >= best_chunks_) return;
    if (matched_so_far_ == quota_total_) {
      best_chunks_ = chunks_so_far_;
      return;
    }
    if (ci >= cand_.size()) return;
    if (++visits_ > kVisitCap) return;

    const std::string& w = cand_[ci];
    const std::string& s = cand_stem_[ci];
    auto eq = exact_quota_.find(w);
    auto sq = stem_quota_.find(s);
    const bool can_exact = eq != exact_quota_.end() && eq->second > 0;
    const bool can_stem = sq != stem_quota_.end() && sq->second > 0;

    if (can_exact || can_stem) {
      for (size_t j = 0; j < ref_.size(); ++j) {
        if (ref_used_[j]) continue;
        const bool exact_here = can_exact && ref_[j] == w;
        const bool stem_here = can_stem && !exact_here && ref_stem_[j] == s && ref_[j] != w;
        if (!exact_here && !stem_here) continue;
        auto& quota = exact_here ? eq->second : sq->second;
        --quota;
        ref_used_[j] = true;
        ++matched_so_far_;
        const bool cont = static_cast<int>(ci) == last_c + 1 && static_cast<int>(j) == last_r + 1;
        if (!cont) ++chunks_so_far_;
        dfs(ci + 1, static_cast<int>(ci), static_cast<int>(j));
        if (!cont) --chunks_so_far_;
        --matched_so_far_;
        ref_used_[j] = false;
        ++quota;
      }
    }
    // skipping this candidate token is always admissible; quota feasibility
    // is enforced by the match-count target at the end
    dfs(ci + 1, last_c, last_r);
  }

  static constexpr long long kVisitCap = 2'000'000;

  const std::vector<std::string>& cand_;
  const std::vector<std::string>& ref_;
  std::vector<std::string> cand_stem_, ref_stem_;
  std::map<std::string, int> exact_quota_, stem_quota_;
  int quota_total_ = 0;
  int best_chunks_ = 0;
  int chunks_so_far_ = 0;
  int matched_so_far_ = 0;
  std::vector<bool> ref_used_;
  long long visits_ = 0;
};

inline double meteor_pair(const std::vector<std::string>& c, const std::vector<std::string>& r) {
  if (c.empty() || r.empty()) return 0.0;
  MeteorMatcher matcher(c, r);
  const auto al = matcher.align();
  if (al.matches == 0) return 0.0;
  const double m = al.matches;
  const double prec = m / static_cast<double>(c.size());
  const double rec = m / static_cast<double>(r.size());
  const double f_mean = 10.0 * prec * rec / (rec + 9.0 * prec);
  const double frag = static_cast<double>(al.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return f_mean * (1.0 - penalty);
}

}  // namespace detail

// METEOR, exact + stem modules, corpus mean of per-pair scores.
inline double meteor(const std::vector<std::string>& candidates,
                     const std::vector<std::string>& references) {
  detail::check_aligned(candidates, references);
  double sum = 0.0;
  for (size_t p = 0; p < candidates.size(); ++p)
    sum += detail::meteor_pair(split_words(candidates[p]), split_words(references[p]));
  return sum / static_cast<double>(candidates.size());
}

// CIDEr-D over stemmed n-grams (n = 1..4): clipped tf-idf cosine with a
// Gaussian length penalty (sigma = 6), scaled by 10. Scores live in [0, 10].
inline double cider_d(const std::vector<std::string>& candidates,
                      const std::vector<std::string>& references, double sigma = 6.0) {
  detail::check_aligned(candidates, references);
  const size_t n_pairs = candidates.size();
  if (n_pairs < 2)
    std::cerr << "meit: cider_d on a single-pair corpus is degenerate (idf all zero)\n";

  constexpr int kMaxN = 4;
  auto stemmed = [](const std::string& text) {
    auto toks = split_words(text);
    for (auto& t : toks) t = stem_light(t);
    return toks;
  };

  std::vector<std::vector<std::string>> cand_toks(n_pairs), ref_toks(n_pairs);
  for (size_t p = 0; p < n_pairs; ++p) {
    cand_toks[p] = stemmed(candidates[p]);
    ref_toks[p] = stemmed(references[p]);
  }

  // document frequency: number of references containing the n-gram
  std::array<std::map<std::string, int>, kMaxN + 1> df;
  for (size_t p = 0; p < n_pairs; ++p)
    for (int n = 1; n <= kMaxN; ++n)
      for (const auto& [g, cnt] : detail::ngram_counts(ref_toks[p], n)) ++df[n][g];

  const double log_n = std::log(static_cast<double>(n_pairs));
  auto idf = [&](int n, const std::string& g) {
    const auto it = df[n].find(g);
    const double d = it == df[n].end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
    return log_n - std::log(d);
  };

  double corpus = 0.0;
  for (size_t p = 0; p < n_pairs; ++p) {
    double pair_score = 0.0;
    const double len_c = static_cast<double>(cand_toks[p].size());
    const double len_r = static_cast<double>(ref_toks[p].size());
    const double delta = len_c - len_r;
    const double len_pen = std::exp(-delta * delta / (2.0 * sigma * sigma));
    for (int n = 1; n <= kMaxN; ++n) {
      const auto cc = detail::ngram_counts(cand_toks[p], n);
      const auto rc = detail::ngram_counts(ref_toks[p], n);
      double dot = 0.0, norm_c = 0.0, norm_r = 0.0;
      for (const auto& [g, cnt] : cc) {
        const double w = static_cast<double>(cnt) * idf(n, g);
        norm_c += w * w;
      }
      for (const auto& [g, cnt] : rc) {
        const double w = static_cast<double>(cnt) * idf(n, g);
        norm_r += w * w;
      }
      for (const auto& [g, cnt] : cc) {
        const auto it = rc.find(g);
        if (it == rc.end()) continue;
        const double i = idf(n, g);
        dot += std::min(static_cast<double>(cnt) * i, static_cast<double>(it->second) * i) *
               (static_cast<double>(it->second) * i);
      }
      const double denom = std::sqrt(norm_c) * std::sqrt(norm_r);
      const double sim = denom > 0.0 ? dot / denom : 0.0;
      pair_score += 10.0 * sim * len_pen;
    }
    corpus += pair_score / kMaxN;
  }
  return corpus / static_cast<double>(n_pairs);
}

// Token-embedding provider for BERTScore. Implementations must return one
// unit-norm vector per token; no pretrained encoder ships with this library.
struct TokenEmbedder {
  virtual ~TokenEmbedder() = default;
  virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& tokens) const = 0;
};

inline PrfScore bertscore(const std::vector<std::string>& candidates,
                          const std::vector<std::string>& references,
                          const TokenEmbedder& embedder) {
  detail::check_aligned(candidates, references);
  PrfScore acc;
  for (size_t p = 0; p < candidates.size(); ++p) {
    const auto c_toks = split_words(candidates[p]);
    const auto r_toks = split_words(references[p]);
    if (c_toks.empty() || r_toks.empty()) continue;
    const auto ce = embedder.embed(c_toks);
    const auto re = embedder.embed(r_toks);
    double prec = 0.0, rec = 0.0;
    for (const auto& cv : ce) {
      double best = -1.0;
      for (const auto& rv : re) {
        double s = 0.0;
        for (size_t k = 0; k < cv.size(); ++k) s += cv[k] * rv[k];
        best = std::max(best, s);
      }
      prec += best;
    }
    for (const auto& rv : re) {
      double best = -1.0;
      for (const auto& cv : ce) {
        double s = 0.0;
        for (size_t k = 0; k < rv.size(); ++k) s += rv[k] * cv[k];
        best = std::max(best, s);
      }
      rec += best;
    }
    prec /= static_cast<double>(ce.size());
    rec /= static_cast<double>(re.size());
    acc.precision += prec;
    acc.recall += rec;
    acc.f += (prec + rec) != 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  const double m = static_cast<double>(candidates.size());
  return {acc.precision / m, acc.recall / m, acc.f / m};
}

inline MetricReport compute_metric_report(const std::vector<std::string>& candidates,
                                          const std::vector<std::string>& references,
                                          const TokenEmbedder* embedder = nullptr) {
  MetricReport rep;
  rep.bleu1 = bleu(candidates, references, 1);
  rep.bleu2 = bleu(candidates, references, 2);
  rep.bleu3 = bleu(candidates, references, 3);
  rep.bleu4 = bleu(candidates, references, 4);
  rep.meteor = meteor(candidates, references);
  rep.rouge1 = rouge_n(candidates, references, 1);
  rep.rouge2 = rouge_n(candidates, references, 2);
  rep.rougeL = rouge_l(candidates, references);
  rep.cider_d = cider_d(candidates, references);
  if (embedder != nullptr) rep.bertscore = bertscore(candidates, references, *embedder);
  return rep;
}

}  // namespace meit
