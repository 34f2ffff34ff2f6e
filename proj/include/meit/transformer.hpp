// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "meit/instruct.hpp"
#include "meit/mat.hpp"
#include "meit/model.hpp"
#include "meit/rng.hpp"

namespace meit {

// ---------------------------------------------------------------------------
// Gradient mirrors.

struct LinearGrads {
  Mat w, b, lora_a, lora_b;
  static LinearGrads zeros_like(const Linear& l) {
    LinearGrads g;
    g.w = Mat(l.w.rows, l.w.cols);
    if (l.has_bias()) g.b = Mat(1, l.b.cols);
    if (l.has_lora) {
      g.lora_a = Mat(l.lora_a.rows, l.lora_a.cols);
      g.lora_b = Mat(l.lora_b.rows, l.lora_b.cols);
    }
    return g;
  }
};

struct LayerGrads {
  Mat ln1_g, ln1_b, ln2_g, ln2_b;
  std::vector<LinearGrads> wq, wk, wv;
  LinearGrads wo, fc1, fc2;
};

struct ModelGrads {
  Mat tok_emb, pos_emb;
  std::vector<LayerGrads> layers;
  Mat lnf_g, lnf_b;
  LinearGrads lm_head;

  static ModelGrads zeros_like(ModelParams& p) {
    ModelGrads g;
    g.tok_emb = Mat(p.tok_emb.rows, p.tok_emb.cols);
    g.pos_emb = Mat(p.pos_emb.rows, p.pos_emb.cols);
    for (auto& lp : p.layers) {
      LayerGrads lg;
      lg.ln1_g = Mat(1, lp.ln1_g.cols);
      lg.ln1_b = Mat(1, lp.ln1_b.cols);
      lg.ln2_g = Mat(1, lp.ln2_g.cols);
      lg.ln2_b = Mat(1, lp.ln2_b.cols);
      for (auto& l : lp.wq) lg.wq.push_back(LinearGrads::zeros_like(l));
      for (auto& l : lp.wk) lg.wk.push_back(LinearGrads::zeros_like(l));
      for (auto& l : lp.wv) lg.wv.push_back(LinearGrads::zeros_like(l));
      lg.wo = LinearGrads::zeros_like(lp.wo);
      lg.fc1 = LinearGrads::zeros_like(lp.fc1);
      lg.fc2 = LinearGrads::zeros_like(lp.fc2);
      g.layers.push_back(std::move(lg));
    }
    g.lnf_g = Mat(1, p.lnf_g.cols);
    g.lnf_b = Mat(1, p.lnf_b.cols);
    g.lm_head = LinearGrads::zeros_like(p.lm_head);
    return g;
  }

  // Same traversal order as ModelParams::visit so (param, grad) pairs line up.
  template <typename F>
  void visit(ModelParams& p, F&& f) {
    const bool base_trainable = !p.lora_applied;
    auto visit_linear = [&](const std::string& name, Linear& l, LinearGrads& g) {
      f(name + ".w", g.w, base_trainable);
      if (l.has_bias()) f(name + ".b", g.b, base_trainable);
      if (l.has_lora) {
        f(name + ".lora_a", g.lora_a, true);
        f(name + ".lora_b", g.lora_b, true);
      }
    };
    f("model.tok_emb", tok_emb, base_trainable);
    f("model.pos_emb", pos_emb, base_trainable);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "model.layer" + std::to_string(i) + ".";
      auto& lp = p.layers[i];
      auto& lg = layers[i];
      f(pre + "ln1.g", lg.ln1_g, base_trainable);
      f(pre + "ln1.b", lg.ln1_b, base_trainable);
      for (size_t h = 0; h < lp.wq.size(); ++h) {
        visit_linear(pre + "attn.q" + std::to_string(h), lp.wq[h], lg.wq[h]);
        visit_linear(pre + "attn.k" + std::to_string(h), lp.wk[h], lg.wk[h]);
        visit_linear(pre + "attn.v" + std::to_string(h), lp.wv[h], lg.wv[h]);
      }
      visit_linear(pre + "attn.o", lp.wo, lg.wo);
      f(pre + "ln2.g", lg.ln2_g, base_trainable);
      f(pre + "ln2.b", lg.ln2_b, base_trainable);
      visit_linear(pre + "mlp.fc1", lp.fc1, lg.fc1);
      visit_linear(pre + "mlp.fc2", lp.fc2, lg.fc2);
    }
    f("model.lnf.g", lnf_g, base_trainable);
    f("model.lnf.b", lnf_b, base_trainable);
    visit_linear("model.head", p.lm_head, lm_head);
  }

  void zero() {
    auto z = [](Mat& m) { m.zero(); };
    z(tok_emb);
    z(pos_emb);
    for (auto& lg : layers) {
      z(lg.ln1_g);
      z(lg.ln1_b);
      z(lg.ln2_g);
      z(lg.ln2_b);
      auto zl = [&](LinearGrads& g) {
        z(g.w);
        z(g.b);
        z(g.lora_a);
        z(g.lora_b);
      };
      for (auto& g : lg.wq) zl(g);
      for (auto& g : lg.wk) zl(g);
      for (auto& g : lg.wv) zl(g);
      zl(lg.wo);
      zl(lg.fc1);
      zl(lg.fc2);
    }
    z(lnf_g);
    z(lnf_b);
    z(lm_head.w);
    z(lm_head.b);
    z(lm_head.lora_a);
    z(lm_head.lora_b);
  }
};

// ---------------------------------------------------------------------------
// Linear forward/backward with the adapter path.

struct LinearCtx {
  Mat ax;         // [L x rank] adapter intermediate
  Mat drop_mask;  // inverted-dropout mask on the adapter input, if active
};

// y (resized, overwritten) = x W^T (+ b) + scale * drop(x) A^T B^T
inline void linear_forward(const Linear& l, const Mat& x, Mat& y, LinearCtx* ctx,
                           Rng* drop_rng = nullptr, double drop_p = 0.0) {
  y = Mat(x.rows, l.out_dim());
  if (l.has_bias())
    for (int r = 0; r < y.rows; ++r)
      for (int c = 0; c < y.cols; ++c) y(r, c) = l.b(0, c);
  matmul_bt_acc(x, l.w, y);
  if (!l.has_lora) return;

  const Mat* xin = &x;
  Mat dropped;
  if (drop_p > 0.0 && drop_rng != nullptr) {
    dropped = x;
    if (ctx) ctx->drop_mask = Mat(x.rows, x.cols);
    const double keep = 1.0 - drop_p;
    for (size_t i = 0; i < dropped.d.size(); ++i) {
      const double m = drop_rng->uniform() < drop_p ? 0.0 : 1.0 / keep;
      dropped.d[i] *= m;
      if (ctx) ctx->drop_mask.d[i] = m;
    }
    xin = &dropped;
  }
  Mat ax(x.rows, l.lora_a.rows);
  matmul_bt_acc(*xin, l.lora_a, ax);
  for (auto& v : ax.d) v *= l.lora_scale;
  matmul_bt_acc(ax, l.lora_b, y);
  if (ctx) ctx->ax = std::move(ax);
}

// dx += dY W (+ adapter path); grads accumulated. Base-weight gradients are
// skipped when the backbone is frozen.
inline void linear_backward(const Linear& l, const Mat& x, const Mat& dy, Mat* dx, LinearGrads& g,
                            const LinearCtx* ctx, bool base_grads) {
  if (dx != nullptr) matmul_acc(dy, l.w, *dx);
  if (base_grads) {
    matmul_at_acc(dy, x, g.w);
    if (l.has_bias())
      for (int r = 0; r < dy.rows; ++r)
        for (int c = 0; c < dy.cols; ++c) g.b(0, c) += dy(r, c);
  }
  if (!l.has_lora) return;

  // y += ax B^T with ax = scale * drop(x) A^T
  matmul_at_acc(dy, ctx->ax, g.lora_b);  // dB += dY^T ax
  Mat dax(dy.rows, l.lora_b.cols);
  matmul_acc(dy, l.lora_b, dax);  // dax = dY B
  Mat dxd(x.rows, x.cols);
  matmul_acc(dax, l.lora_a, dxd);  // through A for the input path
  // dA += (scale * dax)^T drop(x)
  Mat dax_scaled = dax;
  for (auto& v : dax_scaled.d) v *= l.lora_scale;
  if (ctx->drop_mask.size() > 0) {
    Mat xd = x;
    for (size_t i = 0; i < xd.d.size(); ++i) xd.d[i] *= ctx->drop_mask.d[i];
    matmul_at_acc(dax_scaled, xd, g.lora_a);
    if (dx != nullptr)
      for (size_t i = 0; i < dx->d.size(); ++i)
        dx->d[i] += l.lora_scale * dxd.d[i] * ctx->drop_mask.d[i];
  } else {
    matmul_at_acc(dax_scaled, x, g.lora_a);
    if (dx != nullptr)
      for (size_t i = 0; i < dx->d.size(); ++i) dx->d[i] += l.lora_scale * dxd.d[i];
  }
}

// ---------------------------------------------------------------------------
// Layer norm and GELU.

constexpr double kLnEps = 1e-5;

inline void layernorm_forward(const Mat& x, const Mat& g, const Mat& b, Mat& y,
                              std::vector<double>& mean, std::vector<double>& rstd) {
  y = Mat(x.rows, x.cols);
  mean.resize(x.rows);
  rstd.resize(x.rows);
  const int d = x.cols;
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double mu = 0.0;
    for (int c = 0; c < d; ++c) mu += xr[c];
    mu /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    mean[r] = mu;
    rstd[r] = rs;
    double* yr = y.row(r);
    for (int c = 0; c < d; ++c) yr[c] = g(0, c) * ((xr[c] - mu) * rs) + b(0, c);
  }
}

inline void layernorm_backward(const Mat& x, const Mat& g, const Mat& dy,
                               const std::vector<double>& mean, const std::vector<double>& rstd,
                               Mat& dx_acc, Mat& dg, Mat& db) {
  const int d = x.cols;
  for (int r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    const double* dyr = dy.row(r);
    double* dxr = dx_acc.row(r);
    const double mu = mean[r], rs = rstd[r];
    double s1 = 0.0, s2 = 0.0;
    for (int c = 0; c < d; ++c) {
      const double xhat = (xr[c] - mu) * rs;
      const double dxhat = dyr[c] * g(0, c);
      s1 += dxhat;
      s2 += dxhat * xhat;
      dg(0, c) += dyr[c] * xhat;
      db(0, c) += dyr[c];
    }
    s1 /= d;
    s2 /= d;
    for (int c = 0; c < d; ++c) {
      const double xhat = (xr[c] - mu) * rs;
      const double dxhat = dyr[c] * g(0, c);
      dxr[c] += rs * (dxhat - s1 - xhat * s2);
    }
  }
}

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double u = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double x3 = 0.044715 * x * x * x;
  const double u = k * (x + x3);
  const double th = std::tanh(u);
  const double sech2 = 1.0 - th * th;
  return 0.5 * (1.0 + th) + 0.5 * x * sech2 * k * (1.0 + 3.0 * 0.044715 * x * x);
}

// ---------------------------------------------------------------------------
// Fused attention: text queries attend over [ECG prefix rows ; causal text
// rows]. The prefix is projected by the same per-head key/value blocks as
// the text, so the ECG path adds no parameters of its own.

struct HeadWs {
  Mat x_slice;  // [L x D_h] per-head input slice
  Mat q;        // [L x D_h]
  Mat km, vm;   // [(L_e + L) x D_h], prefix rows first
  Mat att;      // [L x (L_e + L)], zero at masked columns
  LinearCtx q_ctx, kt_ctx, vt_ctx, ke_ctx, ve_ctx;
};

struct LayerWs {
  Mat ln1_out;
  std::vector<double> ln1_mean, ln1_rstd;
  std::vector<HeadWs> heads;
  Mat concat;   // [L x k*D_h]
  Mat attn_out; // [L x D_m]
  LinearCtx wo_ctx;
  Mat x_attn;   // after the attention residual
  Mat ln2_out;
  std::vector<double> ln2_mean, ln2_rstd;
  Mat fc1_out, gelu_out, mlp_out;
  LinearCtx fc1_ctx, fc2_ctx;
  Mat x_out;
};

struct TransformerWs {
  Mat x0;
  std::vector<LayerWs> layers;
  Mat lnf_out;
  std::vector<double> lnf_mean, lnf_rstd;
  LinearCtx head_ctx;
  Mat logits;
  int seq_len = 0;
};

constexpr int kMaxAttentionRows = 4096;

// One fused attention layer over an already-normalized input.
inline void fused_attention_forward(const Mat& x_ln, const Mat& h_e, LayerParams& lp,
                                    const ModelConfig& cfg, LayerWs& ws, Rng* drop_rng,
                                    double drop_p) {
  const int L = x_ln.rows;
  const int le = h_e.rows;
  const int dh = cfg.head_dim;
  if (x_ln.cols != cfg.model_dim) throw ArgumentError("attention: hidden width mismatch");
  if (h_e.cols != dh) throw ArgumentError("attention: prefix width must equal head_dim");
  if (le + L > kMaxAttentionRows) throw ArgumentError("attention: L_e + L exceeds internal buffer");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ws.heads.assign(cfg.num_heads, {});
  ws.concat = Mat(L, cfg.num_heads * dh);
  for (int h = 0; h < cfg.num_heads; ++h) {
    HeadWs& hw = ws.heads[h];
    const int off = h * dh;
    hw.x_slice = Mat(L, dh);
    for (int r = 0; r < L; ++r)
      std::copy(x_ln.row(r) + off, x_ln.row(r) + off + dh, hw.x_slice.row(r));

    linear_forward(lp.wq[h], hw.x_slice, hw.q, &hw.q_ctx, drop_rng, drop_p);
    Mat kt, vt, ke, ve;
    linear_forward(lp.wk[h], hw.x_slice, kt, &hw.kt_ctx, drop_rng, drop_p);
    linear_forward(lp.wv[h], hw.x_slice, vt, &hw.vt_ctx, drop_rng, drop_p);
    linear_forward(lp.wk[h], h_e, ke, &hw.ke_ctx, drop_rng, drop_p);
    linear_forward(lp.wv[h], h_e, ve, &hw.ve_ctx, drop_rng, drop_p);

    hw.km = Mat(le + L, dh);
    hw.vm = Mat(le + L, dh);
    for (int r = 0; r < le; ++r) {
      std::copy(ke.row(r), ke.row(r) + dh, hw.km.row(r));
      std::copy(ve.row(r), ve.row(r) + dh, hw.vm.row(r));
    }
    for (int r = 0; r < L; ++r) {
      std::copy(kt.row(r), kt.row(r) + dh, hw.km.row(le + r));
      std::copy(vt.row(r), vt.row(r) + dh, hw.vm.row(le + r));
    }

    // masked scores + softmax: position p sees the prefix and text rows <= p
    hw.att = Mat(L, le + L);
    for (int p = 0; p < L; ++p) {
      const int valid = le + p + 1;
      double* arow = hw.att.row(p);
      const double* qrow = hw.q.row(p);
      double mx = -1e308;
      for (int c = 0; c < valid; ++c) {
        arow[c] = scale * dot(qrow, hw.km.row(c), dh);
        mx = std::max(mx, arow[c]);
      }
      double z = 0.0;
      for (int c = 0; c < valid; ++c) {
        arow[c] = std::exp(arow[c] - mx);
        z += arow[c];
      }
      const double inv = 1.0 / z;
      for (int c = 0; c < valid; ++c) arow[c] *= inv;
      double* out = ws.concat.row(p) + off;
      for (int d = 0; d < dh; ++d) out[d] = 0.0;
      for (int c = 0; c < valid; ++c) axpy(arow[c], hw.vm.row(c), out, dh);
    }
  }
  linear_forward(lp.wo, ws.concat, ws.attn_out, &ws.wo_ctx, drop_rng, drop_p);
}

// Backward through one fused attention layer. d_x_ln accumulates the
// gradient on the normalized input; d_h_e accumulates the prefix gradient
// (summed across layers and heads by the caller's reuse of the buffer).
inline void fused_attention_backward(const Mat& x_ln, const Mat& h_e, LayerParams& lp,
                                     const ModelConfig& cfg, LayerWs& ws, const Mat& d_attn_out,
                                     LayerGrads& lg, Mat& d_x_ln, Mat& d_h_e, bool base_grads) {
  const int L = x_ln.rows;
  const int le = h_e.rows;
  const int dh = cfg.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat d_concat(L, cfg.num_heads * dh);
  linear_backward(lp.wo, ws.concat, d_attn_out, &d_concat, lg.wo, &ws.wo_ctx, base_grads);

  for (int h = 0; h < cfg.num_heads; ++h) {
    HeadWs& hw = ws.heads[h];
    const int off = h * dh;
    Mat dhead(L, dh);
    for (int r = 0; r < L; ++r)
      std::copy(d_concat.row(r) + off, d_concat.row(r) + off + dh, dhead.row(r));

    Mat datt(L, le + L);
    Mat dvm(le + L, dh);
    for (int p = 0; p < L; ++p) {
      const int valid = le + p + 1;
      const double* dh_row = dhead.row(p);
      const double* arow = hw.att.row(p);
      double* darow = datt.row(p);
      for (int c = 0; c < valid; ++c) {
        darow[c] = dot(dh_row, hw.vm.row(c), dh);
        axpy(arow[c], dh_row, dvm.row(c), dh);
      }
      // softmax jacobian
      double s = 0.0;
      for (int c = 0; c < valid; ++c) s += arow[c] * darow[c];
      for (int c = 0; c < valid; ++c) darow[c] = arow[c] * (darow[c] - s);
    }

    Mat dq(L, dh);
    matmul_acc(datt, hw.km, dq);
    for (auto& v : dq.d) v *= scale;
    Mat dkm(le + L, dh);
    matmul_at_acc(datt, hw.q, dkm);
    for (auto& v : dkm.d) v *= scale;

    Mat dke(le, dh), dkt(L, dh), dve(le, dh), dvt(L, dh);
    for (int r = 0; r < le; ++r) {
      std::copy(dkm.row(r), dkm.row(r) + dh, dke.row(r));
      std::copy(dvm.row(r), dvm.row(r) + dh, dve.row(r));
    }
    for (int r = 0; r < L; ++r) {
      std::copy(dkm.row(le + r), dkm.row(le + r) + dh, dkt.row(r));
      std::copy(dvm.row(le + r), dvm.row(le + r) + dh, dvt.row(r));
    }

    Mat d_slice(L, dh);
    linear_backward(lp.wq[h], hw.x_slice, dq, &d_slice, lg.wq[h], &hw.q_ctx, base_grads);
    linear_backward(lp.wk[h], hw.x_slice, dkt, &d_slice, lg.wk[h], &hw.kt_ctx, base_grads);
    linear_backward(lp.wv[h], hw.x_slice, dvt, &d_slice, lg.wv[h], &hw.vt_ctx, base_grads);
    linear_backward(lp.wk[h], h_e, dke, &d_h_e, lg.wk[h], &hw.ke_ctx, base_grads);
    linear_backward(lp.wv[h], h_e, dve, &d_h_e, lg.wv[h], &hw.ve_ctx, base_grads);

    for (int r = 0; r < L; ++r) axpy(1.0, d_slice.row(r), d_x_ln.row(r) + off, dh);
  }
}

// ---------------------------------------------------------------------------
// Full decoder: pre-norm residual blocks of fused attention and MLP.

inline Mat transformer_forward(const std::vector<int>& ids, const Mat& h_e, ModelParams& p,
                               TransformerWs& ws, Rng* drop_rng = nullptr, double drop_p = 0.0) {
  const ModelConfig& cfg = p.config;
  const int L = static_cast<int>(ids.size());
  if (L == 0) throw ArgumentError("empty token sequence");
  if (L > cfg.max_seq_len) throw ArgumentError("sequence exceeds max_seq_len");
  for (int id : ids)
    if (id < 0 || id >= cfg.vocab_size) throw ArgumentError("token id out of vocabulary range");

  ws.seq_len = L;
  ws.x0 = Mat(L, cfg.model_dim);
  for (int r = 0; r < L; ++r) {
    const double* te = p.tok_emb.row(ids[r]);
    const double* pe = p.pos_emb.row(r);
    double* x = ws.x0.row(r);
    for (int c = 0; c < cfg.model_dim; ++c) x[c] = te[c] + pe[c];
  }

  ws.layers.assign(cfg.num_layers, {});
  const Mat* x = &ws.x0;
  for (int li = 0; li < cfg.num_layers; ++li) {
    LayerParams& lp = p.layers[li];
    LayerWs& lw = ws.layers[li];
    layernorm_forward(*x, lp.ln1_g, lp.ln1_b, lw.ln1_out, lw.ln1_mean, lw.ln1_rstd);
    fused_attention_forward(lw.ln1_out, h_e, lp, cfg, lw, drop_rng, drop_p);
    lw.x_attn = *x;
    for (size_t i = 0; i < lw.x_attn.d.size(); ++i) lw.x_attn.d[i] += lw.attn_out.d[i];

    layernorm_forward(lw.x_attn, lp.ln2_g, lp.ln2_b, lw.ln2_out, lw.ln2_mean, lw.ln2_rstd);
    linear_forward(lp.fc1, lw.ln2_out, lw.fc1_out, &lw.fc1_ctx, drop_rng, drop_p);
    lw.gelu_out = Mat(lw.fc1_out.rows, lw.fc1_out.cols);
    for (size_t i = 0; i < lw.fc1_out.d.size(); ++i) lw.gelu_out.d[i] = gelu(lw.fc1_out.d[i]);
    linear_forward(lp.fc2, lw.gelu_out, lw.mlp_out, &lw.fc2_ctx, drop_rng, drop_p);
    lw.x_out = lw.x_attn;
    for (size_t i = 0; i < lw.x_out.d.size(); ++i) lw.x_out.d[i] += lw.mlp_out.d[i];
    x = &lw.x_out;
  }

  layernorm_forward(*x, p.lnf_g, p.lnf_b, ws.lnf_out, ws.lnf_mean, ws.lnf_rstd);
  linear_forward(p.lm_head, ws.lnf_out, ws.logits, &ws.head_ctx, drop_rng, drop_p);
  return ws.logits;
}

// Backward from d_logits; accumulates into model grads and d_h_e.
inline void transformer_backward(const std::vector<int>& ids, const Mat& h_e, ModelParams& p,
                                 TransformerWs& ws, const Mat& d_logits, ModelGrads& g,
                                 Mat& d_h_e) {
  const ModelConfig& cfg = p.config;
  const int L = ws.seq_len;
  const bool base_grads = !p.lora_applied;

  Mat d_lnf(L, cfg.model_dim);
  linear_backward(p.lm_head, ws.lnf_out, d_logits, &d_lnf, g.lm_head, &ws.head_ctx, base_grads);

  const Mat& last_x = cfg.num_layers > 0 ? ws.layers.back().x_out : ws.x0;
  Mat dx(L, cfg.model_dim);
  layernorm_backward(last_x, p.lnf_g, d_lnf, ws.lnf_mean, ws.lnf_rstd, dx, g.lnf_g, g.lnf_b);

  for (int li = cfg.num_layers - 1; li >= 0; --li) {
    LayerParams& lp = p.layers[li];
    LayerWs& lw = ws.layers[li];
    LayerGrads& lg = g.layers[li];
    const Mat& x_in = li == 0 ? ws.x0 : ws.layers[li - 1].x_out;

    // MLP branch: dx covers both the residual input and the branch output
    Mat d_gelu(lw.gelu_out.rows, lw.gelu_out.cols);
    linear_backward(lp.fc2, lw.gelu_out, dx, &d_gelu, lg.fc2, &lw.fc2_ctx, base_grads);
    Mat d_fc1(lw.fc1_out.rows, lw.fc1_out.cols);
    for (size_t i = 0; i < d_fc1.d.size(); ++i)
      d_fc1.d[i] = d_gelu.d[i] * gelu_grad(lw.fc1_out.d[i]);
    Mat d_ln2(L, cfg.model_dim);
    linear_backward(lp.fc1, lw.ln2_out, d_fc1, &d_ln2, lg.fc1, &lw.fc1_ctx, base_grads);
    layernorm_backward(lw.x_attn, lp.ln2_g, d_ln2, lw.ln2_mean, lw.ln2_rstd, dx, lg.ln2_g,
                       lg.ln2_b);

    // attention branch
    Mat d_ln1(L, cfg.model_dim);
    fused_attention_backward(lw.ln1_out, h_e, lp, cfg, lw, dx, lg, d_ln1, d_h_e, base_grads);
    layernorm_backward(x_in, lp.ln1_g, d_ln1, lw.ln1_mean, lw.ln1_rstd, dx, lg.ln1_g, lg.ln1_b);
  }

  if (base_grads) {
    for (int r = 0; r < L; ++r) {
      axpy(1.0, dx.row(r), g.tok_emb.row(ids[r]), cfg.model_dim);
      axpy(1.0, dx.row(r), g.pos_emb.row(r), cfg.model_dim);
    }
  }
}

// ---------------------------------------------------------------------------
// Generation with a per-call key/value cache. The cached path reproduces the
// full forward bit-for-bit because each position's operations are identical.

struct DecodeOptions {
  enum class Kind { greedy, top_k } kind = Kind::greedy;
  int top_k = 10;
  double temperature = 1.0;
  uint64_t seed = 0;
  int max_new_tokens = 64;
};

class GenSession {
 public:
  GenSession(ModelParams& params, const Mat& h_e) : p_(params), h_e_(h_e) {
    const ModelConfig& cfg = p_.config;
    caches_.resize(cfg.num_layers);
    for (int li = 0; li < cfg.num_layers; ++li) {
      auto& lc = caches_[li];
      lc.km.assign(cfg.num_heads, Mat(h_e.rows + cfg.max_seq_len, cfg.head_dim));
      lc.vm.assign(cfg.num_heads, Mat(h_e.rows + cfg.max_seq_len, cfg.head_dim));
      lc.rows = 0;
      for (int h = 0; h < cfg.num_heads; ++h) {
        Mat ke, ve;
        LinearCtx ctx;
        linear_forward(p_.layers[li].wk[h], h_e_, ke, &ctx);
        linear_forward(p_.layers[li].wv[h], h_e_, ve, &ctx);
        for (int r = 0; r < h_e.rows; ++r) {
          std::copy(ke.row(r), ke.row(r) + cfg.head_dim, lc.km[h].row(r));
          std::copy(ve.row(r), ve.row(r) + cfg.head_dim, lc.vm[h].row(r));
        }
      }
      lc.rows = h_e.rows;
    }
  }

  // Feeds one token at the next position and returns the logits row.
  std::vector<double> step(int token_id) {
    const ModelConfig& cfg = p_.config;
    if (pos_ >= cfg.max_seq_len) throw ArgumentError("generation context overflow");
    if (token_id < 0 || token_id >= cfg.vocab_size)
      throw ArgumentError("token id out of vocabulary range");
    const int dm = cfg.model_dim;
    const int dh = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> x(dm);
    for (int c = 0; c < dm; ++c) x[c] = p_.tok_emb(token_id, c) + p_.pos_emb(pos_, c);

    Mat xrow(1, dm);
    for (int li = 0; li < cfg.num_layers; ++li) {
      LayerParams& lp = p_.layers[li];
      auto& lc = caches_[li];
      std::copy(x.begin(), x.end(), xrow.d.begin());
      Mat ln1;
      std::vector<double> mu, rs;
      layernorm_forward(xrow, lp.ln1_g, lp.ln1_b, ln1, mu, rs);

      Mat concat(1, cfg.num_heads * dh);
      for (int h = 0; h < cfg.num_heads; ++h) {
        Mat slice(1, dh);
        std::copy(ln1.row(0) + h * dh, ln1.row(0) + (h + 1) * dh, slice.d.begin());
        Mat q, kt, vt;
        LinearCtx ctx;
        linear_forward(lp.wq[h], slice, q, &ctx);
        linear_forward(lp.wk[h], slice, kt, &ctx);
        linear_forward(lp.wv[h], slice, vt, &ctx);
        std::copy(kt.row(0), kt.row(0) + dh, lc.km[h].row(lc.rows));
        std::copy(vt.row(0), vt.row(0) + dh, lc.vm[h].row(lc.rows));

        const int valid = lc.rows + 1;
        std::vector<double> att(valid);
        double mx = -1e308;
        for (int c = 0; c < valid; ++c) {
          att[c] = scale * dot(q.row(0), lc.km[h].row(c), dh);
          mx = std::max(mx, att[c]);
        }
        double z = 0.0;
        for (int c = 0; c < valid; ++c) {
          att[c] = std::exp(att[c] - mx);
          z += att[c];
        }
        const double inv = 1.0 / z;
        double* out = concat.row(0) + h * dh;
        for (int d = 0; d < dh; ++d) out[d] = 0.0;
        for (int c = 0; c < valid; ++c) axpy(att[c] * inv, lc.vm[h].row(c), out, dh);
      }
      Mat attn_out;
      LinearCtx ctx;
      linear_forward(lp.wo, concat, attn_out, &ctx);
      for (int c = 0; c < dm; ++c) x[c] += attn_out(0, c);

      std::copy(x.begin(), x.end(), xrow.d.begin());
      Mat ln2;
      layernorm_forward(xrow, lp.ln2_g, lp.ln2_b, ln2, mu, rs);
      Mat f1, f2;
      linear_forward(lp.fc1, ln2, f1, &ctx);
      for (auto& v : f1.d) v = gelu(v);
      linear_forward(lp.fc2, f1, f2, &ctx);
      for (int c = 0; c < dm; ++c) x[c] += f2(0, c);
      ++lc.rows;
    }

    std::copy(x.begin(), x.end(), xrow.d.begin());
    Mat lnf;
    std::vector<double> mu, rs;
    layernorm_forward(xrow, p_.lnf_g, p_.lnf_b, lnf, mu, rs);
    Mat logits;
    LinearCtx ctx;
    linear_forward(p_.lm_head, lnf, logits, &ctx);
    ++pos_;
    return std::vector<double>(logits.d.begin(), logits.d.end());
  }

 private:
  struct LayerCache {
    std::vector<Mat> km, vm;
    int rows = 0;
  };
  ModelParams& p_;
  Mat h_e_;
  std::vector<LayerCache> caches_;
  int pos_ = 0;
};

// Autoregressive decode. Returns the generated response tokens (at most one
// terminal stop token, never <pad>). The prompt must contain the assistant
// marker; decoding halts on </s> or after max_new_tokens.
inline std::vector<int> generate(const std::vector<int>& prompt_ids, const Mat& h_e,
                                 ModelParams& params, const DecodeOptions& opts) {
  if (prompt_ids.empty()) throw ArgumentError("empty prompt");
  if (std::find(prompt_ids.begin(), prompt_ids.end(), static_cast<int>(kAssistantId)) ==
      prompt_ids.end())
    throw ArgumentError("prompt must contain the assistant marker");

  GenSession session(params, h_e);
  std::vector<double> logits;
  for (int id : prompt_ids) logits = session.step(id);

  Rng rng(Rng::mix(opts.seed, 0x67656e65ULL));
  std::vector<int> out;
  for (int n = 0; n < opts.max_new_tokens; ++n) {
    logits[kPadId] = -1e308;  // never emit padding
    int next;
    if (opts.kind == DecodeOptions::Kind::greedy) {
      next = 0;
      for (int i = 1; i < static_cast<int>(logits.size()); ++i)
        if (logits[i] > logits[next]) next = i;
    } else {
      const int k = std::min<int>(opts.top_k, static_cast<int>(logits.size()));
      std::vector<int> idx(logits.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                        [&](int a, int b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
      double mx = logits[idx[0]];
      std::vector<double> probs(k);
      double z = 0.0;
      for (int i = 0; i < k; ++i) {
        probs[i] = std::exp((logits[idx[i]] - mx) / opts.temperature);
        z += probs[i];
      }
      double u = rng.uniform() * z;
      next = idx[k - 1];
      for (int i = 0; i < k; ++i) {
        u -= probs[i];
        if (u <= 0.0) {
          next = idx[i];
          break;
        }
      }
    }
    out.push_back(next);
    if (next == kEosId) break;
    logits = session.step(next);
  }
  return out;
}

}  // namespace meit
