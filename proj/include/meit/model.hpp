// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "meit/common.hpp"
#include "meit/mat.hpp"
#include "meit/rng.hpp"

namespace meit {

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 4;
  int head_dim = 32;
  int model_dim = 128;  // = num_heads * head_dim
  int vocab_size = 512;
  int max_seq_len = 256;
  int ffn_multiplier = 4;

  void validate() const {
    if (model_dim != num_heads * head_dim)
      throw ArgumentError("model_dim must equal num_heads * head_dim");
    if (vocab_size <= 5) throw ArgumentError("vocab_size must exceed the special tokens");
    if (max_seq_len < 2) throw ArgumentError("max_seq_len must be at least 2");
    if (num_layers <= 0 || num_heads <= 0 || head_dim <= 0 || ffn_multiplier <= 0)
      throw ArgumentError("model dimensions must be positive");
  }

  int ffn_dim() const { return ffn_multiplier * model_dim; }
};

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  double dropout_p = 0.0;
};

// Linear map with an optional low-rank adapter. The base weight is frozen
// once an adapter is attached; the adapter starts as the identity (B = 0)
// and contributes (alpha/rank) * B * A.
struct Linear {
  Mat w;  // [out x in]
  Mat b;  // [1 x out], empty when bias-free
  Mat lora_a;  // [rank x in]
  Mat lora_b;  // [out x rank]
  double lora_scale = 0.0;
  bool has_lora = false;

  int in_dim() const { return w.cols; }
  int out_dim() const { return w.rows; }
  bool has_bias() const { return b.size() > 0; }

  void attach_lora(const LoraConfig& cfg, Rng& rng) {
    if (cfg.rank <= 0 || cfg.rank > std::min(in_dim(), out_dim()))
      throw ArgumentError("lora rank must be in [1, min(d_in, d_out)]");
    lora_a = Mat(cfg.rank, in_dim());
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.rank));
    for (auto& v : lora_a.d) v = sd * rng.normal();
    lora_b = Mat(out_dim(), cfg.rank);  // zero-init: adapter is the identity at start
    lora_scale = cfg.alpha / cfg.rank;
    has_lora = true;
  }

  void merge_lora() {
    if (!has_lora) return;
    for (int o = 0; o < out_dim(); ++o)
      for (int r = 0; r < lora_a.rows; ++r) {
        const double brv = lora_b(o, r) * lora_scale;
        if (brv == 0.0) continue;
        for (int i = 0; i < in_dim(); ++i) w(o, i) += brv * lora_a(r, i);
      }
    lora_a = Mat();
    lora_b = Mat();
    has_lora = false;
    lora_scale = 0.0;
  }
};

struct LayerParams {
  Mat ln1_g, ln1_b, ln2_g, ln2_b;
  std::vector<Linear> wq, wk, wv;  // per-head D_h x D_h blocks
  Linear wo;                       // [D_m x k*D_h]
  Linear fc1, fc2;
};

struct ModelParams {
  ModelConfig config;
  LoraConfig lora;
  bool lora_applied = false;

  Mat tok_emb;  // [V x D_m]
  Mat pos_emb;  // [max_seq_len x D_m]
  std::vector<LayerParams> layers;
  Mat lnf_g, lnf_b;
  Linear lm_head;  // [V x D_m], bias-free

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    auto gauss = [&](Mat& m, double sd) {
      for (auto& v : m.d) v = sd * rng.normal();
    };
    p.tok_emb = Mat(cfg.vocab_size, cfg.model_dim);
    gauss(p.tok_emb, 0.02);
    p.pos_emb = Mat(cfg.max_seq_len, cfg.model_dim);
    gauss(p.pos_emb, 0.02);

    const double resid_sd = 0.02 / std::sqrt(2.0 * cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) {
      LayerParams lp;
      lp.ln1_g = Mat(1, cfg.model_dim);
      for (auto& v : lp.ln1_g.d) v = 1.0;
      lp.ln1_b = Mat(1, cfg.model_dim);
      lp.ln2_g = Mat(1, cfg.model_dim);
      for (auto& v : lp.ln2_g.d) v = 1.0;
      lp.ln2_b = Mat(1, cfg.model_dim);
      const double head_sd = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
      for (int h = 0; h < cfg.num_heads; ++h) {
        Linear q, k, v;
        q.w = Mat(cfg.head_dim, cfg.head_dim);
        gauss(q.w, head_sd);
        k.w = Mat(cfg.head_dim, cfg.head_dim);
        gauss(k.w, head_sd);
        v.w = Mat(cfg.head_dim, cfg.head_dim);
        gauss(v.w, head_sd);
        lp.wq.push_back(std::move(q));
        lp.wk.push_back(std::move(k));
        lp.wv.push_back(std::move(v));
      }
      lp.wo.w = Mat(cfg.model_dim, cfg.num_heads * cfg.head_dim);
      gauss(lp.wo.w, resid_sd * 4.0);
      lp.fc1.w = Mat(cfg.ffn_dim(), cfg.model_dim);
      gauss(lp.fc1.w, 0.02);
      lp.fc1.b = Mat(1, cfg.ffn_dim());
      lp.fc2.w = Mat(cfg.model_dim, cfg.ffn_dim());
      gauss(lp.fc2.w, resid_sd);
      lp.fc2.b = Mat(1, cfg.model_dim);
      p.layers.push_back(std::move(lp));
    }
    p.lnf_g = Mat(1, cfg.model_dim);
    for (auto& v : p.lnf_g.d) v = 1.0;
    p.lnf_b = Mat(1, cfg.model_dim);
    p.lm_head.w = Mat(cfg.vocab_size, cfg.model_dim);
    gauss(p.lm_head.w, 0.02);
    return p;
  }

  // Adapters for every linear map (attention blocks, output projection,
  // MLP, output head); embeddings and layer norms are excluded. The base
  // weights are frozen from this point on.
  void apply_lora(const LoraConfig& cfg, Rng& rng) {
    if (lora_applied) throw ArgumentError("lora adapters already applied");
    lora = cfg;
    for (auto& lp : layers) {
      for (auto& l : lp.wq) l.attach_lora(cfg, rng);
      for (auto& l : lp.wk) l.attach_lora(cfg, rng);
      for (auto& l : lp.wv) l.attach_lora(cfg, rng);
      lp.wo.attach_lora(cfg, rng);
      lp.fc1.attach_lora(cfg, rng);
      lp.fc2.attach_lora(cfg, rng);
    }
    lm_head.attach_lora(cfg, rng);
    lora_applied = true;
  }

  // Folds every adapter delta into its base weight and removes the adapters.
  void merge_lora() {
    if (!lora_applied) return;
    for (auto& lp : layers) {
      for (auto& l : lp.wq) l.merge_lora();
      for (auto& l : lp.wk) l.merge_lora();
      for (auto& l : lp.wv) l.merge_lora();
      lp.wo.merge_lora();
      lp.fc1.merge_lora();
      lp.fc2.merge_lora();
    }
    lm_head.merge_lora();
    lora_applied = false;
  }

  // Visits (name, tensor, trainable). With adapters applied the backbone is
  // frozen and only lora factors are trainable.
  template <typename F>
  void visit(F&& f) {
    const bool base_trainable = !lora_applied;
    auto visit_linear = [&](const std::string& name, Linear& l) {
      f(name + ".w", l.w, base_trainable);
      if (l.has_bias()) f(name + ".b", l.b, base_trainable);
      if (l.has_lora) {
        f(name + ".lora_a", l.lora_a, true);
        f(name + ".lora_b", l.lora_b, true);
      }
    };
    f("model.tok_emb", tok_emb, base_trainable);
    f("model.pos_emb", pos_emb, base_trainable);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "model.layer" + std::to_string(i) + ".";
      auto& lp = layers[i];
      f(pre + "ln1.g", lp.ln1_g, base_trainable);
      f(pre + "ln1.b", lp.ln1_b, base_trainable);
      for (size_t h = 0; h < lp.wq.size(); ++h) {
        visit_linear(pre + "attn.q" + std::to_string(h), lp.wq[h]);
        visit_linear(pre + "attn.k" + std::to_string(h), lp.wk[h]);
        visit_linear(pre + "attn.v" + std::to_string(h), lp.wv[h]);
      }
      visit_linear(pre + "attn.o", lp.wo);
      f(pre + "ln2.g", lp.ln2_g, base_trainable);
      f(pre + "ln2.b", lp.ln2_b, base_trainable);
      visit_linear(pre + "mlp.fc1", lp.fc1);
      visit_linear(pre + "mlp.fc2", lp.fc2);
    }
    f("model.lnf.g", lnf_g, base_trainable);
    f("model.lnf.b", lnf_b, base_trainable);
    visit_linear("model.head", lm_head);
  }

  size_t count_trainable() {
    size_t n = 0;
    visit([&](const std::string&, Mat& m, bool trainable) {
      if (trainable) n += m.size();
    });
    return n;
  }
};

}  // namespace meit
