// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meit/checkpoint.hpp"
#include "meit/encoder.hpp"
#include "meit/instruct.hpp"
#include "meit/metrics.hpp"
#include "meit/model.hpp"
#include "meit/signal.hpp"
#include "meit/transformer.hpp"

namespace meit {

// ---------------------------------------------------------------------------
// Label-masked autoregressive loss. Position i is predicted from logits[i-1];
// the mean runs over masked positions only.

inline double masked_loss_sum(const Mat& logits, const std::vector<int>& ids,
                              const std::vector<bool>& mask, long long* count_out,
                              Mat* d_logits = nullptr) {
  const int L = logits.rows;
  const int V = logits.cols;
  if (static_cast<int>(ids.size()) != L || static_cast<int>(mask.size()) != L)
    throw ArgumentError("loss: ids/mask must match logits rows");
  double sum = 0.0;
  long long count = 0;
  if (d_logits != nullptr) *d_logits = Mat(L, V);
  std::vector<double> probs(V);
  for (int i = 1; i < L; ++i) {
    if (!mask[i]) continue;
    const double* row = logits.row(i - 1);
    double mx = row[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    double z = 0.0;
    for (int v = 0; v < V; ++v) {
      probs[v] = std::exp(row[v] - mx);
      z += probs[v];
    }
    const double logz = std::log(z) + mx;
    sum += logz - row[ids[i]];
    ++count;
    if (d_logits != nullptr) {
      double* drow = d_logits->row(i - 1);
      const double inv = 1.0 / z;
      for (int v = 0; v < V; ++v) drow[v] += probs[v] * inv;
      drow[ids[i]] -= 1.0;
    }
  }
  if (count == 0) throw ArgumentError("loss: mask selects no predictable positions");
  *count_out = count;
  return sum;
}

inline double masked_autoregressive_loss(const Mat& logits, const std::vector<int>& ids,
                                         const std::vector<bool>& mask) {
  long long count = 0;
  const double sum = masked_loss_sum(logits, ids, mask, &count);
  return sum / static_cast<double>(count);
}

// Linear warm-up then linear decay to zero; step is 1-indexed.
inline double lr_at_step(long long step, long long total_steps, double warmup_ratio,
                         double base_lr) {
  if (total_steps <= 0) return base_lr;
  const long long warmup = static_cast<long long>(std::floor(warmup_ratio * total_steps));
  if (warmup > 0 && step <= warmup)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps == warmup) return base_lr;
  return base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int epochs = 5;
  double warmup_ratio = 0.03;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  uint64_t seed = 0;
  std::string precision = "double";
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int val_loss_count = 128;      // forward-only loss probe per epoch
  int val_generate_count = 48;   // greedy decodes scored with METEOR per epoch

  void validate() const {
    if (learning_rate <= 0 || batch_size <= 0 || epochs <= 0)
      throw ArgumentError("train: lr, batch size and epochs must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
      throw ArgumentError("train: warmup_ratio must lie in [0, 1)");
    if (precision != "double")
      throw ArgumentError("train: only double precision is supported in this build");
  }
};

struct TrainExample {
  std::vector<int> ids;
  std::vector<bool> mask;
  std::string ecg_ref;
};

using RecordProvider = std::function<EcgRecord(const std::string&)>;

struct TrainLogRow {
  long long step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  bool has_val = false;
  double val_loss = 0.0;
  double val_meteor = 0.0;
};

inline void write_train_log_csv(const std::vector<TrainLogRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "step,lr,train_loss,val_loss,val_meteor\n";
  char buf[160];
  for (const auto& r : rows) {
    if (r.has_val)
      std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g,%.10g\n", r.step, r.lr, r.train_loss,
                    r.val_loss, r.val_meteor);
    else
      std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,,\n", r.step, r.lr, r.train_loss);
    f << buf;
  }
}

// ---------------------------------------------------------------------------
// Trainer: one exclusive owner of the parameters. Batch members run forward
// and backward in parallel into per-slot buffers; the reduction walks slots
// in index order so results do not depend on the thread count.

class Trainer {
 public:
  Trainer(ModelParams& model, EncoderParams& encoder, const Vocabulary& vocab, TrainConfig cfg)
      : model_(model), encoder_(encoder), vocab_(vocab), cfg_(cfg) {
    cfg_.validate();
    grads_ = ModelGrads::zeros_like(model_);
    enc_grads_ = EncoderGrads::zeros_like(encoder_);
    build_registry();
    opt_m_.clear();
    opt_v_.clear();
    for (const auto& e : trainable_) {
      opt_m_.emplace_back(e.param->rows, e.param->cols);
      opt_v_.emplace_back(e.param->rows, e.param->cols);
    }
  }

  long long step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<TrainLogRow>& log() const { return log_; }

  long long total_steps(size_t n_train) const {
    const long long per_epoch = std::max<long long>(1, static_cast<long long>(n_train) / cfg_.batch_size);
    return per_epoch * cfg_.epochs;
  }

  // Runs (or resumes) training to the configured number of epochs; an
  // interrupted run restored from a checkpoint continues step-for-step.
  void train(const std::vector<TrainExample>& train_set, const std::vector<TrainExample>& val_set,
             const RecordProvider& provider, long long stop_after_step = -1) {
    if (train_set.empty()) throw ArgumentError("train: empty dataset");
    const long long per_epoch =
        std::max<long long>(1, static_cast<long long>(train_set.size()) / cfg_.batch_size);
    const long long total = per_epoch * cfg_.epochs;

    std::vector<int> order;
    long long order_epoch = -1;
    while (step_ < total && (stop_after_step < 0 || step_ < stop_after_step)) {
      const long long epoch = step_ / per_epoch;
      const long long pos = step_ % per_epoch;
      if (epoch != order_epoch) {
        order.resize(train_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        Rng erng(Rng::mix(cfg_.seed, 0xe70c0000ULL + static_cast<uint64_t>(epoch)));
        erng.shuffle(order);
        order_epoch = epoch;
      }

      std::vector<const TrainExample*> batch;
      const int bsz = std::min<long long>(cfg_.batch_size, order.size());
      for (int b = 0; b < bsz; ++b)
        batch.push_back(&train_set[order[(pos * cfg_.batch_size + b) % order.size()]]);

      const double loss = train_step(batch, provider, total);
      TrainLogRow row;
      row.step = step_;
      row.lr = lr_at_step(step_, total, cfg_.warmup_ratio, cfg_.learning_rate);
      row.train_loss = loss;
      if (pos == per_epoch - 1 && !val_set.empty()) {
        row.has_val = true;
        row.val_loss = eval_loss(val_set, provider, cfg_.val_loss_count);
        row.val_meteor = eval_meteor(val_set, provider, cfg_.val_generate_count);
      }
      log_.push_back(row);
    }
  }

  // Mean masked loss over (a deterministic prefix of) a dataset, inference mode.
  double eval_loss(const std::vector<TrainExample>& set, const RecordProvider& provider,
                   int cap) const {
    const int n = std::min<int>(cap > 0 ? cap : static_cast<int>(set.size()),
                                static_cast<int>(set.size()));
    std::vector<double> losses(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      const auto& ex = set[i];
      EncoderWorkspace ews;
      TransformerWs tws;
      const EcgRecord rec = provider(ex.ecg_ref);
      const Mat h_e = encode(rec, encoder_, ews, false);
      const Mat logits = transformer_forward(ex.ids, h_e, model_, tws);
      losses[i] = masked_autoregressive_loss(logits, ex.ids, ex.mask);
    }
    double s = 0.0;
    for (double v : losses) s += v;
    return n > 0 ? s / n : 0.0;
  }

  // Greedy-decodes a deterministic prefix of the set and scores METEOR.
  double eval_meteor(const std::vector<TrainExample>& set, const RecordProvider& provider,
                     int cap) const {
    const int n = std::min<int>(cap > 0 ? cap : static_cast<int>(set.size()),
                                static_cast<int>(set.size()));
    if (n == 0) return 0.0;
    std::vector<std::string> cands(n), refs(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      const auto& ex = set[i];
      int rstart = 0;
      while (rstart < static_cast<int>(ex.mask.size()) && !ex.mask[rstart]) ++rstart;
      std::vector<int> prompt(ex.ids.begin(), ex.ids.begin() + rstart);
      std::vector<int> ref_ids(ex.ids.begin() + rstart, ex.ids.end());
      if (!ref_ids.empty() && ref_ids.back() == kEosId) ref_ids.pop_back();

      EncoderWorkspace ews;
      const EcgRecord rec = provider(ex.ecg_ref);
      const Mat h_e = encode(rec, encoder_, ews, false);
      DecodeOptions opts;
      opts.max_new_tokens =
          std::min<int>(64, model_.config.max_seq_len - static_cast<int>(prompt.size()));
      auto out = generate(prompt, h_e, model_, opts);
      if (!out.empty() && out.back() == kEosId) out.pop_back();
      cands[i] = detokenize(out, vocab_);
      refs[i] = detokenize(ref_ids, vocab_);
    }
    return meteor(cands, refs);
  }

  // ---- checkpointing -------------------------------------------------------

  CheckpointData make_checkpoint(uint32_t vocab_hash, bool with_optimizer = true) {
    CheckpointData ckpt;
    ckpt.meta["model_config"] = model_config_json(model_.config);
    ckpt.meta["lora_applied"] = model_.lora_applied;
    ckpt.meta["lora_config"] = lora_config_json(model_.lora);
    ckpt.meta["encoder_config"] = encoder_config_json(encoder_.config);
    ckpt.meta["train_config"] = train_config_json(cfg_);
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", vocab_hash);
    ckpt.meta["vocab_hash"] = std::string(hex);
    ckpt.meta["step"] = step_;
    ckpt.meta["has_optimizer"] = with_optimizer;

    model_.visit([&](const std::string& n, Mat& m, bool) { ckpt.tensors[n] = m; });
    encoder_.visit([&](const std::string& n, Mat& m, TensorKind) { ckpt.tensors[n] = m; });
    if (with_optimizer) {
      for (size_t i = 0; i < trainable_.size(); ++i) {
        ckpt.tensors["opt.m." + trainable_[i].name] = opt_m_[i];
        ckpt.tensors["opt.v." + trainable_[i].name] = opt_v_[i];
      }
    }
    return ckpt;
  }

  void restore(const CheckpointData& ckpt, uint32_t expected_vocab_hash) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", expected_vocab_hash);
    if (ckpt.meta.at("vocab_hash").get<std::string>() != hex)
      throw ParseError(ParseError::Kind::incompatible, "checkpoint vocabulary hash mismatch");
    auto fill = [&](const std::string& n, Mat& m) {
      const auto it = ckpt.tensors.find(n);
      if (it == ckpt.tensors.end())
        throw ParseError(ParseError::Kind::incompatible, "checkpoint missing tensor " + n);
      if (!it->second.same_shape(m))
        throw ParseError(ParseError::Kind::incompatible, "checkpoint shape mismatch for " + n);
      m = it->second;
    };
    model_.visit([&](const std::string& n, Mat& m, bool) { fill(n, m); });
    encoder_.visit([&](const std::string& n, Mat& m, TensorKind) { fill(n, m); });
    step_ = ckpt.meta.at("step").get<long long>();
    if (ckpt.meta.value("has_optimizer", false)) {
      for (size_t i = 0; i < trainable_.size(); ++i) {
        fill("opt.m." + trainable_[i].name, opt_m_[i]);
        fill("opt.v." + trainable_[i].name, opt_v_[i]);
      }
    }
  }

  static nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers},   {"num_heads", c.num_heads},
            {"head_dim", c.head_dim},       {"model_dim", c.model_dim},
            {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
            {"ffn_multiplier", c.ffn_multiplier}};
  }
  static ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers");
    c.num_heads = j.at("num_heads");
    c.head_dim = j.at("head_dim");
    c.model_dim = j.at("model_dim");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.ffn_multiplier = j.at("ffn_multiplier");
    return c;
  }
  static nlohmann::json lora_config_json(const LoraConfig& c) {
    return {{"rank", c.rank}, {"alpha", c.alpha}, {"dropout_p", c.dropout_p}};
  }
  static LoraConfig lora_config_from_json(const nlohmann::json& j) {
    LoraConfig c;
    c.rank = j.at("rank");
    c.alpha = j.at("alpha");
    c.dropout_p = j.at("dropout_p");
    return c;
  }
  static nlohmann::json encoder_config_json(const EncoderConfig& c) {
    return {{"num_blocks", c.num_blocks}, {"channels", c.channels},
            {"kernel_size", c.kernel_size}, {"pool_size", c.pool_size},
            {"prefix_len", c.prefix_len},   {"head_dim", c.head_dim},
            {"input_channels", c.input_channels}};
  }
  static EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.num_blocks = j.at("num_blocks");
    c.channels = j.at("channels").get<std::vector<int>>();
    c.kernel_size = j.at("kernel_size");
    c.pool_size = j.at("pool_size");
    c.prefix_len = j.at("prefix_len");
    c.head_dim = j.at("head_dim");
    c.input_channels = j.at("input_channels");
    return c;
  }
  static nlohmann::json train_config_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"warmup_ratio", c.warmup_ratio},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"seed", c.seed},
            {"precision", c.precision},
            {"val_loss_count", c.val_loss_count},
            {"val_generate_count", c.val_generate_count}};
  }
  static TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.at("learning_rate");
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.warmup_ratio = j.at("warmup_ratio");
    c.weight_decay = j.at("weight_decay");
    c.grad_clip = j.at("grad_clip");
    c.seed = j.at("seed");
    c.precision = j.at("precision");
    c.val_loss_count = j.at("val_loss_count");
    c.val_generate_count = j.at("val_generate_count");
    return c;
  }

 private:
  struct Entry {
    std::string name;
    Mat* param;
    Mat* grad;
  };

  void build_registry() {
    // Pair parameter and gradient tensors by identical visitation order.
    std::vector<std::pair<std::string, Mat*>> p_params, p_grads;
    std::vector<bool> p_trainable;
    model_.visit([&](const std::string& n, Mat& m, bool trainable) {
      p_params.emplace_back(n, &m);
      p_trainable.push_back(trainable);
    });
    grads_.visit(model_, [&](const std::string& n, Mat& m, bool) { p_grads.emplace_back(n, &m); });
    for (size_t i = 0; i < p_params.size(); ++i) {
      if (p_params[i].first != p_grads[i].first)
        throw std::logic_error("param/grad visitation order diverged");
      if (p_trainable[i]) trainable_.push_back({p_params[i].first, p_params[i].second, p_grads[i].second});
    }
    std::vector<std::pair<std::string, Mat*>> e_params, e_grads;
    encoder_.visit([&](const std::string& n, Mat& m, TensorKind k) {
      if (k == TensorKind::param) e_params.emplace_back(n, &m);
    });
    enc_grads_.visit([&](const std::string& n, Mat& m, TensorKind) { e_grads.emplace_back(n, &m); });
    for (size_t i = 0; i < e_params.size(); ++i) {
      if (e_params[i].first != e_grads[i].first)
        throw std::logic_error("encoder param/grad visitation order diverged");
      trainable_.push_back({e_params[i].first, e_params[i].second, e_grads[i].second});
    }
  }

  double train_step(const std::vector<const TrainExample*>& batch, const RecordProvider& provider,
                    long long total) {
    const int bsz = static_cast<int>(batch.size());
    struct SampleBuf {
      ModelGrads g;
      EncoderGrads eg;
      EncoderWorkspace ews;
      double loss_sum = 0.0;
      long long count = 0;
    };
    std::vector<SampleBuf> bufs(bsz);
    for (auto& b : bufs) {
      b.g = ModelGrads::zeros_like(model_);
      b.eg = EncoderGrads::zeros_like(encoder_);
    }

#pragma omp parallel for schedule(static)
    for (int s = 0; s < bsz; ++s) {
      const TrainExample& ex = *batch[s];
      SampleBuf& buf = bufs[s];
      const EcgRecord rec = provider(ex.ecg_ref);
      const Mat h_e = encode(rec, encoder_, buf.ews, true);
      TransformerWs tws;
      Rng drop_rng(Rng::mix(cfg_.seed, 0xd409 + static_cast<uint64_t>(step_) * 131 + s));
      const Mat logits = transformer_forward(ex.ids, h_e, model_, tws,
                                             model_.lora.dropout_p > 0.0 ? &drop_rng : nullptr,
                                             model_.lora.dropout_p);
      Mat d_logits;
      buf.loss_sum = masked_loss_sum(logits, ex.ids, ex.mask, &buf.count, &d_logits);
      Mat d_h_e(h_e.rows, h_e.cols);
      transformer_backward(ex.ids, h_e, model_, tws, d_logits, buf.g, d_h_e);
      encode_backward(d_h_e, encoder_, buf.ews, buf.eg);
    }

    double loss_sum = 0.0;
    long long count = 0;
    for (const auto& b : bufs) {
      loss_sum += b.loss_sum;
      count += b.count;
    }
    const double batch_loss = loss_sum / static_cast<double>(count);
    if (!std::isfinite(batch_loss))
      throw DataError("training diverged: non-finite loss at step " + std::to_string(step_ + 1));

    // deterministic reduction in slot order, normalized per masked token
    grads_.zero();
    enc_grads_.zero();
    const double inv_count = 1.0 / static_cast<double>(count);
    for (int s = 0; s < bsz; ++s) {
      std::vector<Mat*> src;
      collect_grad_ptrs(bufs[s].g, bufs[s].eg, src);
      std::vector<Mat*> dst;
      collect_grad_ptrs(grads_, enc_grads_, dst);
      for (size_t i = 0; i < src.size(); ++i)
        for (size_t k = 0; k < src[i]->d.size(); ++k) dst[i]->d[k] += src[i]->d[k];
    }
    for (const auto& e : trainable_)
      for (auto& v : e.grad->d) v *= inv_count;

    // batch-norm running statistics: fold the batch-average statistics once
    constexpr double kBnMomentum = 0.1;
    for (size_t bi = 0; bi < encoder_.blocks.size(); ++bi) {
      auto& blk = encoder_.blocks[bi];
      const int c_out = blk.gamma.cols;
      for (int c = 0; c < c_out; ++c) {
        double mu = 0.0, var = 0.0;
        for (const auto& b : bufs) {
          mu += b.ews.blocks[bi].mu[c];
          var += b.ews.blocks[bi].var[c];
        }
        mu /= bsz;
        var /= bsz;
        blk.run_mean(0, c) = (1.0 - kBnMomentum) * blk.run_mean(0, c) + kBnMomentum * mu;
        blk.run_var(0, c) = (1.0 - kBnMomentum) * blk.run_var(0, c) + kBnMomentum * var;
      }
    }

    if (cfg_.grad_clip > 0.0) {
      double norm_sq = 0.0;
      for (const auto& e : trainable_)
        for (double v : e.grad->d) norm_sq += v * v;
      const double norm = std::sqrt(norm_sq);
      if (norm > cfg_.grad_clip) {
        const double scale = cfg_.grad_clip / norm;
        for (const auto& e : trainable_)
          for (auto& v : e.grad->d) v *= scale;
      }
    }

    ++step_;
    const double lr = lr_at_step(step_, total, cfg_.warmup_ratio, cfg_.learning_rate);
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (size_t i = 0; i < trainable_.size(); ++i) {
      Mat& p = *trainable_[i].param;
      Mat& g = *trainable_[i].grad;
      Mat& m = opt_m_[i];
      Mat& v = opt_v_[i];
      for (size_t k = 0; k < p.d.size(); ++k) {
        m.d[k] = b1 * m.d[k] + (1.0 - b1) * g.d[k];
        v.d[k] = b2 * v.d[k] + (1.0 - b2) * g.d[k] * g.d[k];
        const double mh = m.d[k] / bc1;
        const double vh = v.d[k] / bc2;
        p.d[k] -= lr * (mh / (std::sqrt(vh) + cfg_.adam_eps) + cfg_.weight_decay * p.d[k]);
      }
    }
    return batch_loss;
  }

  static void collect_grad_ptrs(ModelGrads& g, EncoderGrads& eg, std::vector<Mat*>& out) {
    out.clear();
    auto add = [&](Mat& m) {
      if (m.size() > 0) out.push_back(&m);
    };
    add(g.tok_emb);
    add(g.pos_emb);
    for (auto& lg : g.layers) {
      add(lg.ln1_g);
      add(lg.ln1_b);
      add(lg.ln2_g);
      add(lg.ln2_b);
      auto addl = [&](LinearGrads& l) {
        add(l.w);
        add(l.b);
        add(l.lora_a);
        add(l.lora_b);
      };
      for (auto& l : lg.wq) addl(l);
      for (auto& l : lg.wk) addl(l);
      for (auto& l : lg.wv) addl(l);
      addl(lg.wo);
      addl(lg.fc1);
      addl(lg.fc2);
    }
    add(g.lnf_g);
    add(g.lnf_b);
    add(g.lm_head.w);
    add(g.lm_head.b);
    add(g.lm_head.lora_a);
    add(g.lm_head.lora_b);
    eg.visit([&](const std::string&, Mat& m, TensorKind) { add(m); });
  }

  ModelParams& model_;
  EncoderParams& encoder_;
  const Vocabulary& vocab_;
  TrainConfig cfg_;
  ModelGrads grads_;
  EncoderGrads enc_grads_;
  std::vector<Entry> trainable_;
  std::vector<Mat> opt_m_, opt_v_;
  long long step_ = 0;
  std::vector<TrainLogRow> log_;
};

}  // namespace meit
