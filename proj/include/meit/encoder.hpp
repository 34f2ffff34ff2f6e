// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "meit/common.hpp"
#include "meit/mat.hpp"
#include "meit/rng.hpp"
#include "meit/signal.hpp"

namespace meit {

struct EncoderConfig {
  int num_blocks = 3;
  std::vector<int> channels = {32, 64, 128};
  int kernel_size = 7;
  int pool_size = 4;
  int prefix_len = 1;  // L_e
  int head_dim = 128;  // D_h, matches the backbone head dimension

  int input_channels = 12;

  void validate() const {
    if (num_blocks != static_cast<int>(channels.size()))
      throw ArgumentError("encoder: channels list must have num_blocks entries");
    if (kernel_size <= 0 || kernel_size % 2 == 0)
      throw ArgumentError("encoder: kernel size must be odd and positive");
    if (pool_size <= 0 || prefix_len <= 0 || head_dim <= 0)
      throw ArgumentError("encoder: sizes must be positive");
    for (int c : channels)
      if (c <= 0) throw ArgumentError("encoder: channel counts must be positive");
  }

  int last_channels() const { return num_blocks > 0 ? channels.back() : input_channels; }
  int proj_hidden() const { return 2 * last_channels(); }
  int output_dim() const { return prefix_len * head_dim; }
  // minimum T for which every pooling stage keeps at least one step
  int min_samples() const {
    int need = 1;
    for (int b = 0; b < num_blocks; ++b) need *= pool_size;
    return need;
  }
};

enum class TensorKind { param, state };

struct EncoderParams {
  struct Block {
    Mat w;             // [C_out x C_in*K]
    Mat b;             // [1 x C_out]
    Mat gamma, beta;   // [1 x C_out]
    Mat run_mean, run_var;  // batch-norm running statistics
  };
  std::vector<Block> blocks;
  Mat w1, b1, w2, b2;  // widen-then-narrow projection
  EncoderConfig config;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    p.config = cfg;
    int c_in = cfg.input_channels;
    for (int bi = 0; bi < cfg.num_blocks; ++bi) {
      const int c_out = cfg.channels[bi];
      Block b;
      b.w = Mat(c_out, c_in * cfg.kernel_size);
      const double sd = std::sqrt(2.0 / (c_in * cfg.kernel_size));
      for (auto& v : b.w.d) v = sd * rng.normal();
      b.b = Mat(1, c_out);
      b.gamma = Mat(1, c_out);
      for (auto& v : b.gamma.d) v = 1.0;
      b.beta = Mat(1, c_out);
      b.run_mean = Mat(1, c_out);
      b.run_var = Mat(1, c_out);
      for (auto& v : b.run_var.d) v = 1.0;
      p.blocks.push_back(std::move(b));
      c_in = c_out;
    }
    const int hidden = cfg.proj_hidden();
    p.w1 = Mat(hidden, cfg.last_channels());
    const double sd1 = std::sqrt(2.0 / cfg.last_channels());
    for (auto& v : p.w1.d) v = sd1 * rng.normal();
    p.b1 = Mat(1, hidden);
    p.w2 = Mat(cfg.output_dim(), hidden);
    const double sd2 = std::sqrt(1.0 / hidden);
    for (auto& v : p.w2.d) v = sd2 * rng.normal();
    p.b2 = Mat(1, cfg.output_dim());
    return p;
  }

  // Fixed-order tensor visitation drives the optimizer, checkpoints and
  // gradient checks alike.
  template <typename F>
  void visit(F&& f) {
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string pre = "enc.block" + std::to_string(i) + ".";
      f(pre + "w", blocks[i].w, TensorKind::param);
      f(pre + "b", blocks[i].b, TensorKind::param);
      f(pre + "gamma", blocks[i].gamma, TensorKind::param);
      f(pre + "beta", blocks[i].beta, TensorKind::param);
      f(pre + "run_mean", blocks[i].run_mean, TensorKind::state);
      f(pre + "run_var", blocks[i].run_var, TensorKind::state);
    }
    f("enc.proj.w1", w1, TensorKind::param);
    f("enc.proj.b1", b1, TensorKind::param);
    f("enc.proj.w2", w2, TensorKind::param);
    f("enc.proj.b2", b2, TensorKind::param);
  }

  size_t count_parameters() {
    size_t n = 0;
    visit([&](const std::string&, Mat& m, TensorKind k) {
      if (k == TensorKind::param) n += m.size();
    });
    return n;
  }
};

// Mirror of the parameter tree holding gradients.
struct EncoderGrads {
  std::vector<EncoderParams::Block> blocks;
  Mat w1, b1, w2, b2;

  static EncoderGrads zeros_like(EncoderParams& p) {
    EncoderGrads g;
    for (auto& b : p.blocks) {
      EncoderParams::Block gb;
      gb.w = Mat(b.w.rows, b.w.cols);
      gb.b = Mat(1, b.b.cols);
      gb.gamma = Mat(1, b.gamma.cols);
      gb.beta = Mat(1, b.beta.cols);
      g.blocks.push_back(std::move(gb));
    }
    g.w1 = Mat(p.w1.rows, p.w1.cols);
    g.b1 = Mat(1, p.b1.cols);
    g.w2 = Mat(p.w2.rows, p.w2.cols);
    g.b2 = Mat(1, p.b2.cols);
    return g;
  }

  template <typename F>
  void visit(F&& f) {
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string pre = "enc.block" + std::to_string(i) + ".";
      f(pre + "w", blocks[i].w, TensorKind::param);
      f(pre + "b", blocks[i].b, TensorKind::param);
      f(pre + "gamma", blocks[i].gamma, TensorKind::param);
      f(pre + "beta", blocks[i].beta, TensorKind::param);
    }
    f("enc.proj.w1", w1, TensorKind::param);
    f("enc.proj.b1", b1, TensorKind::param);
    f("enc.proj.w2", w2, TensorKind::param);
    f("enc.proj.b2", b2, TensorKind::param);
  }

  void zero() {
    visit([](const std::string&, Mat& m, TensorKind) { m.zero(); });
  }
};

// Per-sample activations kept for the backward pass.
struct EncoderWorkspace {
  Mat input;  // z-scored 12 x T
  struct BlockAct {
    Mat conv_out;    // pre-norm
    Mat xhat;        // normalized
    Mat relu_out;    // post gamma/beta + relu
    Mat pooled;      // after average pooling
    std::vector<double> mu, var;  // batch statistics (train mode)
  };
  std::vector<BlockAct> blocks;
  std::vector<double> features;   // global average pool, pre-projection
  std::vector<double> h1_pre, h1; // projection hidden
  Mat output;                     // L_e x D_h
  bool train_mode = false;
};

namespace enc_detail {

constexpr double kBnEps = 1e-5;

inline void conv1d_same(const Mat& in, const Mat& w, const Mat& b, Mat& out, int kernel) {
  const int t_len = in.cols;
  const int c_in = in.rows;
  const int c_out = out.rows;
  const int pad = kernel / 2;
  for (int co = 0; co < c_out; ++co) {
    double* orow = out.row(co);
    const double bias = b(0, co);
    for (int t = 0; t < t_len; ++t) orow[t] = bias;
    const double* wrow = w.row(co);
    for (int ci = 0; ci < c_in; ++ci) {
      const double* irow = in.row(ci);
      for (int k = 0; k < kernel; ++k) {
        const double wv = wrow[ci * kernel + k];
        const int shift = k - pad;
        const int lo = std::max(0, -shift);
        const int hi = std::min(t_len, t_len - shift);
        for (int t = lo; t < hi; ++t) orow[t] += wv * irow[t + shift];
      }
    }
  }
}

inline void conv1d_backward(const Mat& in, const Mat& w, const Mat& d_out, Mat& d_in, Mat& d_w,
                            Mat& d_b, int kernel) {
  const int t_len = in.cols;
  const int c_in = in.rows;
  const int c_out = d_out.rows;
  const int pad = kernel / 2;
  for (int co = 0; co < c_out; ++co) {
    const double* dorow = d_out.row(co);
    double s = 0.0;
    for (int t = 0; t < t_len; ++t) s += dorow[t];
    d_b(0, co) += s;
    const double* wrow = w.row(co);
    double* dwrow = d_w.row(co);
    for (int ci = 0; ci < c_in; ++ci) {
      const double* irow = in.row(ci);
      double* dirow = d_in.row(ci);
      for (int k = 0; k < kernel; ++k) {
        const int shift = k - pad;
        const int lo = std::max(0, -shift);
        const int hi = std::min(t_len, t_len - shift);
        double dw = 0.0;
        const double wv = wrow[ci * kernel + k];
        for (int t = lo; t < hi; ++t) {
          dw += dorow[t] * irow[t + shift];
          dirow[t + shift] += dorow[t] * wv;
        }
        dwrow[ci * kernel + k] += dw;
      }
    }
  }
}

}  // namespace enc_detail

// Forward pass: per-lead z-score, conv blocks (conv -> batch-norm -> ReLU ->
// average pool), global average pool over time, widen-then-narrow projection
// reshaped to L_e x D_h. Train mode normalizes with this record's statistics;
// inference mode uses the running ones.
inline Mat encode(const EcgRecord& record, EncoderParams& params, EncoderWorkspace& ws,
                  bool train_mode) {
  const EncoderConfig& cfg = params.config;
  const int T = record.num_samples;
  if (record.num_leads != cfg.input_channels) throw ArgumentError("encoder: lead count mismatch");
  if (T < cfg.min_samples())
    throw ArgumentError("encoder: record shorter than the pooling receptive field");

  ws.train_mode = train_mode;
  ws.input = Mat(cfg.input_channels, T);
  for (int l = 0; l < cfg.input_channels; ++l) {
    const float* src = record.lead(l);
    double mean = 0.0;
    for (int t = 0; t < T; ++t) {
      const double v = src[t];
      if (!std::isfinite(v)) throw DataError("encoder: non-finite sample");
      mean += v;
    }
    mean /= T;
    double var = 0.0;
    for (int t = 0; t < T; ++t) {
      const double d = src[t] - mean;
      var += d * d;
    }
    const double inv = 1.0 / (std::sqrt(var / T) + 1e-8);
    double* dst = ws.input.row(l);
    for (int t = 0; t < T; ++t) dst[t] = (src[t] - mean) * inv;
  }

  ws.blocks.assign(cfg.num_blocks, {});
  const Mat* cur = &ws.input;
  for (int bi = 0; bi < cfg.num_blocks; ++bi) {
    auto& blk = params.blocks[bi];
    auto& act = ws.blocks[bi];
    const int c_out = cfg.channels[bi];
    const int t_in = cur->cols;
    act.conv_out = Mat(c_out, t_in);
    enc_detail::conv1d_same(*cur, blk.w, blk.b, act.conv_out, cfg.kernel_size);

    act.xhat = Mat(c_out, t_in);
    act.relu_out = Mat(c_out, t_in);
    act.mu.assign(c_out, 0.0);
    act.var.assign(c_out, 0.0);
    for (int c = 0; c < c_out; ++c) {
      const double* x = act.conv_out.row(c);
      double mu, var;
      if (train_mode) {
        mu = 0.0;
        for (int t = 0; t < t_in; ++t) mu += x[t];
        mu /= t_in;
        var = 0.0;
        for (int t = 0; t < t_in; ++t) var += (x[t] - mu) * (x[t] - mu);
        var /= t_in;
        act.mu[c] = mu;
        act.var[c] = var;
      } else {
        mu = blk.run_mean(0, c);
        var = blk.run_var(0, c);
      }
      const double inv = 1.0 / std::sqrt(var + enc_detail::kBnEps);
      const double g = blk.gamma(0, c), be = blk.beta(0, c);
      double* xh = act.xhat.row(c);
      double* ro = act.relu_out.row(c);
      for (int t = 0; t < t_in; ++t) {
        xh[t] = (x[t] - mu) * inv;
        const double y = g * xh[t] + be;
        ro[t] = y > 0.0 ? y : 0.0;
      }
    }

    const int t_out = t_in / cfg.pool_size;
    if (t_out == 0) throw ArgumentError("encoder: record shorter than the pooling receptive field");
    act.pooled = Mat(c_out, t_out);
    const double inv_p = 1.0 / cfg.pool_size;
    for (int c = 0; c < c_out; ++c) {
      const double* src = act.relu_out.row(c);
      double* dst = act.pooled.row(c);
      for (int t = 0; t < t_out; ++t) {
        double s = 0.0;
        for (int k = 0; k < cfg.pool_size; ++k) s += src[t * cfg.pool_size + k];
        dst[t] = s * inv_p;
      }
    }
    cur = &act.pooled;
  }

  const int c_last = cfg.last_channels();
  ws.features.assign(c_last, 0.0);
  for (int c = 0; c < c_last; ++c) {
    const double* row = cur->row(c);
    double s = 0.0;
    for (int t = 0; t < cur->cols; ++t) s += row[t];
    ws.features[c] = s / cur->cols;
  }

  const int hidden = cfg.proj_hidden();
  ws.h1_pre.assign(hidden, 0.0);
  ws.h1.assign(hidden, 0.0);
  for (int i = 0; i < hidden; ++i) ws.h1_pre[i] = params.b1(0, i);
  matvec_acc(params.w1, ws.features.data(), ws.h1_pre.data());
  for (int i = 0; i < hidden; ++i) ws.h1[i] = ws.h1_pre[i] > 0.0 ? ws.h1_pre[i] : 0.0;

  std::vector<double> out(cfg.output_dim());
  for (int i = 0; i < cfg.output_dim(); ++i) out[i] = params.b2(0, i);
  matvec_acc(params.w2, ws.h1.data(), out.data());

  ws.output = Mat(cfg.prefix_len, cfg.head_dim);
  std::copy(out.begin(), out.end(), ws.output.d.begin());
  return ws.output;
}

// Backward from d(prefix embedding); valid for train-mode forwards.
inline void encode_backward(const Mat& d_output, EncoderParams& params, EncoderWorkspace& ws,
                            EncoderGrads& grads) {
  const EncoderConfig& cfg = params.config;
  if (!ws.train_mode) throw ArgumentError("encoder backward requires a train-mode forward");

  const int hidden = cfg.proj_hidden();
  const int c_last = cfg.last_channels();
  const int out_dim = cfg.output_dim();

  std::vector<double> d_out_flat(d_output.d.begin(), d_output.d.end());
  std::vector<double> d_h1(hidden, 0.0);
  for (int i = 0; i < out_dim; ++i) {
    grads.b2(0, i) += d_out_flat[i];
    const double di = d_out_flat[i];
    double* wrow = grads.w2.row(i);
    const double* prow = params.w2.row(i);
    for (int j = 0; j < hidden; ++j) {
      wrow[j] += di * ws.h1[j];
      d_h1[j] += di * prow[j];
    }
  }
  std::vector<double> d_h1_pre(hidden);
  for (int i = 0; i < hidden; ++i) d_h1_pre[i] = ws.h1_pre[i] > 0.0 ? d_h1[i] : 0.0;

  std::vector<double> d_features(c_last, 0.0);
  for (int i = 0; i < hidden; ++i) {
    grads.b1(0, i) += d_h1_pre[i];
    const double di = d_h1_pre[i];
    double* wrow = grads.w1.row(i);
    const double* prow = params.w1.row(i);
    for (int j = 0; j < c_last; ++j) {
      wrow[j] += di * ws.features[j];
      d_features[j] += di * prow[j];
    }
  }

  // global average pool
  const Mat& last = cfg.num_blocks > 0 ? ws.blocks.back().pooled : ws.input;
  Mat d_cur(last.rows, last.cols);
  for (int c = 0; c < last.rows; ++c) {
    const double g = d_features[c] / last.cols;
    double* row = d_cur.row(c);
    for (int t = 0; t < last.cols; ++t) row[t] = g;
  }

  for (int bi = cfg.num_blocks - 1; bi >= 0; --bi) {
    auto& blk = params.blocks[bi];
    auto& gblk = grads.blocks[bi];
    auto& act = ws.blocks[bi];
    const int c_out = cfg.channels[bi];
    const int t_in = act.conv_out.cols;
    const int t_out = t_in / cfg.pool_size;

    // average pool backward
    Mat d_relu(c_out, t_in);
    const double inv_p = 1.0 / cfg.pool_size;
    for (int c = 0; c < c_out; ++c) {
      const double* dsrc = d_cur.row(c);
      double* ddst = d_relu.row(c);
      for (int t = 0; t < t_out; ++t) {
        const double g = dsrc[t] * inv_p;
        for (int k = 0; k < cfg.pool_size; ++k) ddst[t * cfg.pool_size + k] = g;
      }
    }

    // ReLU and batch-norm backward (through this record's batch statistics)
    Mat d_conv(c_out, t_in);
    for (int c = 0; c < c_out; ++c) {
      const double* xh = act.xhat.row(c);
      const double* ro = act.relu_out.row(c);
      const double* dr = d_relu.row(c);
      const double g = blk.gamma(0, c);
      const double inv = 1.0 / std::sqrt(act.var[c] + enc_detail::kBnEps);

      double d_gamma = 0.0, d_beta = 0.0, sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int t = 0; t < t_in; ++t) {
        const double dy = ro[t] > 0.0 ? dr[t] : 0.0;
        d_gamma += dy * xh[t];
        d_beta += dy;
        const double dxh = dy * g;
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xh[t];
      }
      gblk.gamma(0, c) += d_gamma;
      gblk.beta(0, c) += d_beta;

      double* dc = d_conv.row(c);
      const double n = static_cast<double>(t_in);
      for (int t = 0; t < t_in; ++t) {
        const double dy = ro[t] > 0.0 ? dr[t] : 0.0;
        const double dxh = dy * g;
        dc[t] = inv * (dxh - sum_dxhat / n - xh[t] * sum_dxhat_xhat / n);
      }
    }

    const Mat& in = bi == 0 ? ws.input : ws.blocks[bi - 1].pooled;
    Mat d_in(in.rows, in.cols);
    enc_detail::conv1d_backward(in, blk.w, d_conv, d_in, gblk.w, gblk.b, cfg.kernel_size);
    d_cur = std::move(d_in);
  }
}

}  // namespace meit
