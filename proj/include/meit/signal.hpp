// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "meit/common.hpp"
#include "meit/rng.hpp"

namespace meit {

enum class DomainTag : uint8_t { A = 0, B = 1, external = 2 };

enum class RhythmClass : int {
  sinus_rhythm = 0,
  sinus_bradycardia,
  sinus_tachycardia,
  atrial_fibrillation,
  right_bundle_branch_block,
  left_bundle_branch_block,
  st_elevation,
  normal_ecg,
};
constexpr int kNumRhythmClasses = 8;

inline const std::array<std::string, 12>& standard_lead_names() {
  static const std::array<std::string, 12> names = {"I",   "II",  "III", "aVR", "aVL", "aVF",
                                                    "V1",  "V2",  "V3",  "V4",  "V5",  "V6"};
  return names;
}

inline const char* rhythm_name(RhythmClass c) {
  switch (c) {
    case RhythmClass::sinus_rhythm: return "sinus_rhythm";
    case RhythmClass::sinus_bradycardia: return "sinus_bradycardia";
    case RhythmClass::sinus_tachycardia: return "sinus_tachycardia";
    case RhythmClass::atrial_fibrillation: return "atrial_fibrillation";
    case RhythmClass::right_bundle_branch_block: return "right_bundle_branch_block";
    case RhythmClass::left_bundle_branch_block: return "left_bundle_branch_block";
    case RhythmClass::st_elevation: return "st_elevation";
    case RhythmClass::normal_ecg: return "normal_ecg";
  }
  return "?";
}

inline RhythmClass rhythm_from_name(const std::string& s) {
  for (int i = 0; i < kNumRhythmClasses; ++i)
    if (s == rhythm_name(static_cast<RhythmClass>(i))) return static_cast<RhythmClass>(i);
  throw ArgumentError("unknown rhythm class: " + s);
}

// The clause each class contributes to a report; also the target of the
// keyword-accuracy check (first clause of the generated report).
inline const char* rhythm_phrase(RhythmClass c) {
  switch (c) {
    case RhythmClass::sinus_rhythm: return "sinus rhythm";
    case RhythmClass::sinus_bradycardia: return "sinus bradycardia";
    case RhythmClass::sinus_tachycardia: return "sinus tachycardia";
    case RhythmClass::atrial_fibrillation: return "atrial fibrillation";
    case RhythmClass::right_bundle_branch_block: return "right bundle branch block";
    case RhythmClass::left_bundle_branch_block: return "left bundle branch block";
    case RhythmClass::st_elevation: return "st elevation";
    case RhythmClass::normal_ecg: return "normal ecg";
  }
  return "?";
}

// 12-lead record, row-major M x T, millivolts. Samples are float32 so the
// binary format round-trips bit-exactly.
struct EcgRecord {
  int num_leads = 12;
  int num_samples = 0;
  int sample_rate_hz = 500;
  std::vector<float> samples;
  std::vector<std::string> lead_names;
  std::string record_id;
  DomainTag domain = DomainTag::A;

  float at(int lead, int t) const { return samples[static_cast<size_t>(lead) * num_samples + t]; }
  float& at(int lead, int t) { return samples[static_cast<size_t>(lead) * num_samples + t]; }
  const float* lead(int l) const { return samples.data() + static_cast<size_t>(l) * num_samples; }
};

inline void validate_record(const EcgRecord& r) {
  if (r.num_leads != 12) throw DataError("record must have 12 leads");
  if (r.num_samples <= 0) throw DataError("record has no samples");
  if (r.samples.size() != static_cast<size_t>(r.num_leads) * r.num_samples)
    throw DataError("sample buffer does not match dimensions");
  for (float v : r.samples)
    if (!std::isfinite(v)) throw DataError("record contains non-finite samples");
}

struct SyntheticLabel {
  RhythmClass rhythm = RhythmClass::sinus_rhythm;
  int heart_rate_bpm = 70;
  DomainTag domain = DomainTag::A;
};

struct NoiseSpec {
  double level = 0.0;  // noise std as a fraction of the per-lead signal std
  uint64_t seed = 0;
};

namespace ecgsim {

struct Wave {
  double amp;     // mV before lead projection
  double center;  // seconds relative to the R peak
  double sigma;   // seconds
  std::array<double, 12> gain;
};

// Lead projection factors, one row per wave family. Signs follow the usual
// frontal/horizontal axes (aVR negative, V1 rS pattern).
inline const Wave& wave_p() {
  static const Wave w{0.14, -0.17, 0.024, {0.5, 1.0, 0.5, -0.8, 0.2, 0.8, 0.3, 0.3, 0.4, 0.4, 0.4, 0.3}};
  return w;
}
inline const Wave& wave_q() {
  static const Wave w{-0.12, -0.035, 0.009, {0.7, 1.0, 0.4, -0.9, 0.3, 0.7, 0.2, 0.2, 0.3, 0.8, 0.9, 0.8}};
  return w;
}
inline const Wave& wave_r() {
  static const Wave w{1.2, 0.0, 0.011, {0.7, 1.0, 0.4, -0.9, 0.3, 0.7, -0.35, -0.2, 0.3, 0.9, 1.0, 0.85}};
  return w;
}
inline const Wave& wave_s() {
  static const Wave w{-0.25, 0.035, 0.010, {0.7, 1.0, 0.4, -0.9, 0.3, 0.7, 0.6, 0.5, 0.3, 0.4, 0.3, 0.2}};
  return w;
}
inline const Wave& wave_t() {
  static const Wave w{0.40, 0.30, 0.055, {0.6, 1.0, 0.4, -0.8, 0.3, 0.8, -0.2, 0.2, 0.5, 0.8, 0.8, 0.6}};
  return w;
}
// Secondary R' deflection for right bundle branch block, precordial leads.
inline const Wave& wave_r_prime() {
  static const Wave w{0.55, 0.055, 0.013, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.8, 0.3, 0.0, 0.0, 0.0}};
  return w;
}
// ST plateau for the st_elevation class.
inline const Wave& wave_st() {
  static const Wave w{0.35, 0.16, 0.060, {0.1, 0.2, 0.1, -0.2, 0.0, 0.2, 0.5, 0.9, 1.0, 0.9, 0.7, 0.5}};
  return w;
}

// Rules the generator guarantees about its own output; the rule-based
// classifier below and the tests read the same constants.
struct Rules {
  static constexpr double sinus_rr_cv = 0.02;
  static constexpr double afib_rr_spread = 0.35;      // uniform half-width on RR
  static constexpr double afib_min_cv = 0.18;         // enforced by redraw
  static constexpr double regular_max_cv = 0.03;      // enforced by redraw
  static constexpr double wide_qrs_factor = 2.5;      // bundle branch blocks
  static constexpr double sinus_t_scale = 0.55;       // sinus_rhythm vs normal_ecg signature
  static constexpr double cv_threshold = 0.10;        // afib above, sinus family below
  static constexpr double qrs_width_threshold_s = 0.060;
  static constexpr double brady_hr_threshold = 55.0;
  static constexpr double tachy_hr_threshold = 105.0;
  static constexpr double st_threshold_mv = 0.12;
  static constexpr double t_ratio_threshold = 0.20;   // T/R on V5, sinus below
  static constexpr double domain_b_amp_scale = 0.8;
  static constexpr double domain_b_wander_amp = 0.15;
  static constexpr double domain_b_wander_hz = 0.28;
  static constexpr double domain_b_warp_sd = 0.02;    // resampling jitter, clipped at 1.5 sd
  static constexpr double noise_floor_mv = 0.008;
};

inline double clipped_normal(Rng& rng, double sd_clip) {
  double z = rng.normal();
  if (z > sd_clip) z = sd_clip;
  if (z < -sd_clip) z = -sd_clip;
  return z;
}

}  // namespace ecgsim

// Deterministic 12-lead PQRST synthesizer. Morphology encodes the label:
// RR regularity (afib), QRS width and V1 polarity (bundle branch blocks),
// ST offset, T amplitude (sinus_rhythm vs normal_ecg signature). Domain B
// applies amplitude scale 0.8, a baseline-wander sinusoid, and resampling
// jitter. The drawn RR sequence is rescaled so its mean matches the label
// heart rate exactly.
inline EcgRecord generate_synthetic_record(const SyntheticLabel& label, double duration_s,
                                           int sample_rate_hz, uint64_t seed) {
  using namespace ecgsim;
  if (duration_s <= 0.0) throw ArgumentError("duration must be positive");
  if (sample_rate_hz <= 0) throw ArgumentError("sample rate must be positive");
  if (label.heart_rate_bpm < 30 || label.heart_rate_bpm > 200)
    throw ArgumentError("heart rate out of range [30, 200]");

  Rng rng(Rng::mix(seed, 0x6563675fULL));
  const int T = static_cast<int>(std::llround(duration_s * sample_rate_hz));
  EcgRecord rec;
  rec.num_leads = 12;
  rec.num_samples = T;
  rec.sample_rate_hz = sample_rate_hz;
  rec.samples.assign(static_cast<size_t>(12) * T, 0.0f);
  rec.lead_names.assign(standard_lead_names().begin(), standard_lead_names().end());
  rec.record_id = "ecg-" + std::to_string(seed);
  rec.domain = label.domain;

  const bool afib = label.rhythm == RhythmClass::atrial_fibrillation;
  const bool rbbb = label.rhythm == RhythmClass::right_bundle_branch_block;
  const bool lbbb = label.rhythm == RhythmClass::left_bundle_branch_block;
  const bool st_elev = label.rhythm == RhythmClass::st_elevation;
  const double qrs_wf = (rbbb || lbbb) ? Rules::wide_qrs_factor : 1.0;
  const double t_scale = label.rhythm == RhythmClass::sinus_rhythm ? Rules::sinus_t_scale : 1.0;

  const double rr_target = 60.0 / label.heart_rate_bpm;
  const double phase0 = rr_target * (0.3 + 0.2 * rng.uniform());

  // RR intervals covering duration plus tail margin. The mean is pinned to
  // the label rate, and the in-window CV is forced into the class band by
  // deterministic redraw, so rhythm recovery has hard margins.
  std::vector<double> beat_times;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<double> rr;
    const double span = duration_s + 1.0 - phase0;
    double acc = 0.0;
    while (acc < span) {
      double f = afib ? 1.0 + rng.uniform(-Rules::afib_rr_spread, Rules::afib_rr_spread)
                      : 1.0 + Rules::sinus_rr_cv * clipped_normal(rng, 3.0);
      rr.push_back(rr_target * f);
      acc += rr.back();
    }
    const double fix = rr_target / (acc / rr.size());
    for (double& v : rr) v *= fix;

    beat_times.clear();
    double t = phase0;
    beat_times.push_back(t);
    for (double v : rr) beat_times.push_back(t += v);

    std::vector<double> in_window;
    for (size_t i = 1; i < beat_times.size(); ++i)
      if (beat_times[i] <= duration_s - 0.05) in_window.push_back(beat_times[i] - beat_times[i - 1]);
    if (in_window.size() < 3) break;
    double m = 0.0;
    for (double v : in_window) m += v;
    m /= in_window.size();
    double var = 0.0;
    for (double v : in_window) var += (v - m) * (v - m);
    const double cv = std::sqrt(var / in_window.size()) / m;
    if (afib ? cv >= Rules::afib_min_cv : cv <= Rules::regular_max_cv) break;
  }

  const double amp_jitter = 1.0 + 0.03 * clipped_normal(rng, 2.0);
  const bool is_b = label.domain == DomainTag::B;
  const double amp_scale = amp_jitter * (is_b ? Rules::domain_b_amp_scale : 1.0);
  const double wander_phase = is_b ? rng.uniform(0.0, 2.0 * 3.141592653589793) : 0.0;
  const double warp = is_b ? 1.0 + Rules::domain_b_warp_sd * clipped_normal(rng, 1.5) : 1.0;

  struct Active {
    double amp, center, sigma;
    const std::array<double, 12>* gain;
  };
  std::vector<Active> waves;
  if (!afib) waves.push_back({wave_p().amp, wave_p().center, wave_p().sigma, &wave_p().gain});
  waves.push_back({wave_q().amp, wave_q().center * qrs_wf, wave_q().sigma * qrs_wf, &wave_q().gain});
  waves.push_back({wave_r().amp, wave_r().center, wave_r().sigma * qrs_wf, &wave_r().gain});
  waves.push_back({wave_s().amp, wave_s().center * qrs_wf, wave_s().sigma * qrs_wf, &wave_s().gain});
  waves.push_back({wave_t().amp * t_scale, wave_t().center, wave_t().sigma, &wave_t().gain});
  if (rbbb)
    waves.push_back({wave_r_prime().amp, wave_r_prime().center * qrs_wf, wave_r_prime().sigma * qrs_wf,
                     &wave_r_prime().gain});
  if (st_elev) waves.push_back({wave_st().amp, wave_st().center, wave_st().sigma, &wave_st().gain});

  // left bundle branch block flips the R deflection in V1..V3
  std::array<double, 12> r_gain = wave_r().gain;
  if (lbbb) {
    r_gain[6] = -0.9;
    r_gain[7] = -0.8;
    r_gain[8] = -0.5;
    waves[afib ? 1 : 2].gain = &r_gain;
  }

  std::vector<double> buf(static_cast<size_t>(12) * T, 0.0);
  const double dt = 1.0 / sample_rate_hz;
  for (const double tb : beat_times) {
    for (const auto& w : waves) {
      // sample index window of +-4 sigma around the (warped) wave center
      const double c_nominal = tb + w.center;
      const double lo_t = (c_nominal - 4.0 * w.sigma) / warp;
      const double hi_t = (c_nominal + 4.0 * w.sigma) / warp;
      int lo = std::max(0, static_cast<int>(std::floor(lo_t * sample_rate_hz)));
      int hi = std::min(T - 1, static_cast<int>(std::ceil(hi_t * sample_rate_hz)));
      for (int k = lo; k <= hi; ++k) {
        const double t_eval = k * dt * warp;  // resampling jitter: warped time axis
        const double dx = t_eval - c_nominal;
        const double g = w.amp * std::exp(-dx * dx / (2.0 * w.sigma * w.sigma));
        for (int l = 0; l < 12; ++l) buf[static_cast<size_t>(l) * T + k] += g * (*w.gain)[l];
      }
    }
  }

  for (int l = 0; l < 12; ++l) {
    double* row = buf.data() + static_cast<size_t>(l) * T;
    for (int k = 0; k < T; ++k) {
      double v = row[k] * amp_scale;
      if (is_b)
        v += Rules::domain_b_wander_amp *
             std::sin(2.0 * 3.141592653589793 * Rules::domain_b_wander_hz * (k * dt) + wander_phase);
      v += Rules::noise_floor_mv * rng.normal();
      rec.samples[static_cast<size_t>(l) * T + k] = static_cast<float>(v);
    }
  }
  return rec;
}

// output[l] = input[l] + eps, eps ~ N(0, (level * std_l)^2), seeded.
inline EcgRecord add_gaussian_noise(const EcgRecord& record, const NoiseSpec& spec) {
  validate_record(record);
  if (spec.level < 0.0) throw ArgumentError("noise level must be nonnegative");
  EcgRecord out = record;
  if (spec.level == 0.0) return out;
  Rng rng(Rng::mix(spec.seed, 0x6e6f697365ULL));
  const int T = record.num_samples;
  for (int l = 0; l < record.num_leads; ++l) {
    const float* in = record.lead(l);
    double mean = 0.0;
    for (int t = 0; t < T; ++t) mean += in[t];
    mean /= T;
    double var = 0.0;
    for (int t = 0; t < T; ++t) {
      const double d = in[t] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / T);
    const double scale = spec.level * sd;
    for (int t = 0; t < T; ++t)
      out.at(l, t) = static_cast<float>(static_cast<double>(in[t]) + scale * rng.normal());
  }
  return out;
}

// ---------------------------------------------------------------------------
// R-peak detection and the generator's own rule-based classifier.

inline std::vector<int> detect_r_peaks(const EcgRecord& rec, int lead = 1) {
  const int T = rec.num_samples;
  const float* x = rec.lead(lead);
  float mx = 0.0f;
  for (int t = 0; t < T; ++t) mx = std::max(mx, x[t]);
  const float thr = 0.5f * mx;
  const int min_gap = static_cast<int>(0.22 * rec.sample_rate_hz);
  std::vector<int> peaks;
  for (int t = 1; t + 1 < T; ++t) {
    if (x[t] < thr || x[t] < x[t - 1] || x[t] < x[t + 1]) continue;
    if (!peaks.empty() && t - peaks.back() < min_gap) {
      if (x[t] > x[peaks.back()]) peaks.back() = t;
      continue;
    }
    peaks.push_back(t);
  }
  return peaks;
}

struct RrStats {
  double mean_s = 0.0;
  double cv = 0.0;
  double hr_bpm = 0.0;
  int beats = 0;
};

inline RrStats rr_statistics(const EcgRecord& rec, int lead = 1) {
  const auto peaks = detect_r_peaks(rec, lead);
  RrStats st;
  st.beats = static_cast<int>(peaks.size());
  if (peaks.size() < 3) return st;
  std::vector<double> rr(peaks.size() - 1);
  for (size_t i = 1; i < peaks.size(); ++i)
    rr[i - 1] = static_cast<double>(peaks[i] - peaks[i - 1]) / rec.sample_rate_hz;
  double mean = 0.0;
  for (double v : rr) mean += v;
  mean /= rr.size();
  double var = 0.0;
  for (double v : rr) var += (v - mean) * (v - mean);
  var /= rr.size();
  st.mean_s = mean;
  st.cv = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
  st.hr_bpm = mean > 0.0 ? 60.0 / mean : 0.0;
  return st;
}

namespace detail {

inline double window_mean(const EcgRecord& rec, int lead, int peak, double lo_s, double hi_s) {
  const int T = rec.num_samples;
  const int lo = std::max(0, peak + static_cast<int>(lo_s * rec.sample_rate_hz));
  const int hi = std::min(T - 1, peak + static_cast<int>(hi_s * rec.sample_rate_hz));
  if (hi < lo) return 0.0;
  double s = 0.0;
  for (int t = lo; t <= hi; ++t) s += rec.at(lead, t);
  return s / (hi - lo + 1);
}

// PR segment just before the QRS; clear of the previous T wave at every
// heart rate in the generator's ranges.
inline double pr_baseline(const EcgRecord& rec, int lead, int peak) {
  return window_mean(rec, lead, peak, -0.068, -0.052);
}

inline double qrs_width_s(const EcgRecord& rec, int lead, int peak) {
  const int T = rec.num_samples;
  const double base = pr_baseline(rec, lead, peak);
  const double h = rec.at(lead, peak) - base;
  const double level = base + 0.25 * h;
  int a = peak, b = peak;
  const int span = static_cast<int>(0.12 * rec.sample_rate_hz);
  while (a > 0 && peak - a < span && rec.at(lead, a) > level) --a;
  while (b + 1 < T && b - peak < span && rec.at(lead, b) > level) ++b;
  return static_cast<double>(b - a) / rec.sample_rate_hz;
}

}  // namespace detail

// Rule-based rhythm recovery using the generator's own thresholds. Exact on
// clean generated signals; not a diagnostic tool. Rule order matters: RR
// regularity, QRS width, rate bands, then the ST and T-amplitude checks that
// are only meaningful at mid-range rates.
inline RhythmClass classify_rhythm(const EcgRecord& rec) {
  using ecgsim::Rules;
  const auto st = rr_statistics(rec, 1);
  if (st.beats >= 3 && st.cv > Rules::cv_threshold) return RhythmClass::atrial_fibrillation;

  const auto peaks = detect_r_peaks(rec, 1);
  // medians over beats make single-beat artifacts irrelevant
  auto median_over_beats = [&](auto&& f) {
    std::vector<double> v;
    for (int p : peaks) v.push_back(f(p));
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };

  const double width = median_over_beats([&](int p) { return detail::qrs_width_s(rec, 1, p); });
  if (width > Rules::qrs_width_threshold_s) {
    // V1 polarity separates the bundle branch blocks
    const double v1 = median_over_beats([&](int p) {
      const double base = detail::pr_baseline(rec, 6, p);
      const int T = rec.num_samples;
      const int lo = std::max(0, p - static_cast<int>(0.05 * rec.sample_rate_hz));
      const int hi = std::min(T - 1, p + static_cast<int>(0.18 * rec.sample_rate_hz));
      double mx = -1e9, mn = 1e9;
      for (int t = lo; t <= hi; ++t) {
        mx = std::max(mx, static_cast<double>(rec.at(6, t)) - base);
        mn = std::min(mn, static_cast<double>(rec.at(6, t)) - base);
      }
      return mx + mn;  // positive when the upward deflection dominates
    });
    return v1 > 0.0 ? RhythmClass::right_bundle_branch_block : RhythmClass::left_bundle_branch_block;
  }

  if (st.hr_bpm > 0.0 && st.hr_bpm < Rules::brady_hr_threshold) return RhythmClass::sinus_bradycardia;
  if (st.hr_bpm > Rules::tachy_hr_threshold) return RhythmClass::sinus_tachycardia;

  const double st_off = median_over_beats([&](int p) {
    return detail::window_mean(rec, 8, p, 0.10, 0.22) - detail::pr_baseline(rec, 8, p);
  });
  if (st_off > Rules::st_threshold_mv) return RhythmClass::st_elevation;

  // T/R ratio on V5 with a near-T local baseline (robust to slow wander);
  // sinus_rhythm carries the reduced-T signature
  const double t_ratio = median_over_beats([&](int p) {
    const double r_amp = rec.at(10, p) - detail::pr_baseline(rec, 10, p);
    const double t_base = detail::window_mean(rec, 10, p, 0.14, 0.18);
    double t_amp = 0.0;
    const int T = rec.num_samples;
    const int lo = std::min(T - 1, p + static_cast<int>(0.20 * rec.sample_rate_hz));
    const int hi = std::min(T - 1, p + static_cast<int>(0.40 * rec.sample_rate_hz));
    for (int t = lo; t <= hi; ++t) t_amp = std::max(t_amp, static_cast<double>(rec.at(10, t)) - t_base);
    return r_amp > 0.0 ? t_amp / r_amp : 0.0;
  });
  return t_ratio < ecgsim::Rules::t_ratio_threshold ? RhythmClass::sinus_rhythm : RhythmClass::normal_ecg;
}

// ---------------------------------------------------------------------------
// Binary and CSV formats.

inline std::string encode_record(const EcgRecord& rec) {
  validate_record(rec);
  std::string out;
  out.reserve(32 + rec.samples.size() * 4);
  out += "MECG1";
  put_le<uint32_t>(out, static_cast<uint32_t>(rec.sample_rate_hz));
  put_le<uint32_t>(out, static_cast<uint32_t>(rec.num_leads));
  put_le<uint32_t>(out, static_cast<uint32_t>(rec.num_samples));
  put_le<uint16_t>(out, static_cast<uint16_t>(rec.record_id.size()));
  out += rec.record_id;
  put_le<uint8_t>(out, static_cast<uint8_t>(rec.domain));
  const size_t payload_off = out.size();
  out.resize(out.size() + rec.samples.size() * 4);
  std::memcpy(out.data() + payload_off, rec.samples.data(), rec.samples.size() * 4);
  put_le<uint32_t>(out, crc32(out.data() + payload_off, rec.samples.size() * 4));
  return out;
}

inline EcgRecord decode_record(const std::string& buf) {
  if (buf.size() < 5 || buf.compare(0, 5, "MECG1") != 0)
    throw ParseError(ParseError::Kind::bad_magic, "not a MECG1 file");
  size_t off = 5;
  EcgRecord rec;
  rec.sample_rate_hz = static_cast<int>(get_le<uint32_t>(buf, off));
  const uint32_t m = get_le<uint32_t>(buf, off);
  const uint32_t t = get_le<uint32_t>(buf, off);
  if (rec.sample_rate_hz <= 0 || t == 0)
    throw ParseError(ParseError::Kind::bad_header, "invalid sample rate or length");
  if (m != 12)
    throw ParseError(ParseError::Kind::lead_count,
                     "expected 12 leads, found " + std::to_string(m));
  const uint16_t id_len = get_le<uint16_t>(buf, off);
  if (off + id_len > buf.size())
    throw ParseError(ParseError::Kind::truncated, "record id extends past end of file");
  rec.record_id = buf.substr(off, id_len);
  off += id_len;
  const uint8_t dom = get_le<uint8_t>(buf, off);
  if (dom > 2) throw ParseError(ParseError::Kind::bad_header, "invalid domain tag");
  rec.domain = static_cast<DomainTag>(dom);

  rec.num_leads = 12;
  rec.num_samples = static_cast<int>(t);
  const size_t payload_bytes = static_cast<size_t>(12) * t * 4;
  if (off + payload_bytes + 4 > buf.size())
    throw ParseError(ParseError::Kind::truncated, "payload shorter than M*T samples");
  const uint32_t want = crc32(buf.data() + off, payload_bytes);
  rec.samples.resize(static_cast<size_t>(12) * t);
  std::memcpy(rec.samples.data(), buf.data() + off, payload_bytes);
  off += payload_bytes;
  const uint32_t got = get_le<uint32_t>(buf, off);
  if (want != got) throw ParseError(ParseError::Kind::checksum, "payload checksum mismatch");
  rec.lead_names.assign(standard_lead_names().begin(), standard_lead_names().end());
  validate_record(rec);
  return rec;
}

inline void write_record(const EcgRecord& rec, const std::string& path) {
  const std::string buf = encode_record(rec);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write: " + path);
}

inline EcgRecord read_record(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_record(ss.str());
}

inline void write_record_csv(const EcgRecord& rec, const std::string& path) {
  validate_record(rec);
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  for (int l = 0; l < rec.num_leads; ++l) f << (l ? "," : "") << rec.lead_names[l];
  f << "\n";
  char num[32];
  for (int t = 0; t < rec.num_samples; ++t) {
    for (int l = 0; l < rec.num_leads; ++l) {
      std::snprintf(num, sizeof num, "%.9g", static_cast<double>(rec.at(l, t)));
      if (l) f << ",";
      f << num;
    }
    f << "\n";
  }
}

inline EcgRecord read_record_csv(const std::string& path, int sample_rate_hz = 500,
                                 const std::string& record_id = "csv",
                                 DomainTag domain = DomainTag::external) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line)) throw ParseError(ParseError::Kind::bad_header, "empty csv");
  std::vector<std::vector<float>> cols(12);
  size_t n_cols = 0;
  {
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) ++n_cols;
    if (n_cols != 12)
      throw ParseError(ParseError::Kind::lead_count,
                       "expected 12 lead columns, found " + std::to_string(n_cols));
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    int c = 0;
    while (std::getline(ls, cell, ',')) {
      if (c >= 12) throw ParseError(ParseError::Kind::bad_header, "too many columns in row");
      cols[c++].push_back(std::strtof(cell.c_str(), nullptr));
    }
    if (c != 12) throw ParseError(ParseError::Kind::truncated, "row with missing columns");
  }
  EcgRecord rec;
  rec.sample_rate_hz = sample_rate_hz;
  rec.num_samples = static_cast<int>(cols[0].size());
  rec.record_id = record_id;
  rec.domain = domain;
  rec.lead_names.assign(standard_lead_names().begin(), standard_lead_names().end());
  rec.samples.resize(static_cast<size_t>(12) * rec.num_samples);
  for (int l = 0; l < 12; ++l)
    for (int t = 0; t < rec.num_samples; ++t) rec.at(l, t) = cols[l][t];
  validate_record(rec);
  return rec;
}

// ---------------------------------------------------------------------------
// Synthetic two-domain corpus.

struct CorpusConfig {
  int n_records = 1000;
  DomainTag domain = DomainTag::A;
  double duration_s = 10.0;
  int sample_rate_hz = 500;
  int hr_grid_step = 5;  // heart rates are drawn on this grid
};

struct CorpusEntry {
  std::string record_id;
  SyntheticLabel label;
  std::string report;
  uint64_t record_seed = 0;
};

inline std::pair<int, int> hr_range_for(RhythmClass c) {
  switch (c) {
    case RhythmClass::sinus_bradycardia: return {35, 50};
    case RhythmClass::sinus_tachycardia: return {110, 170};
    case RhythmClass::atrial_fibrillation: return {70, 150};
    default: return {60, 100};
  }
}

// Deterministic report template of the label: rhythm phrase + rate phrase +
// optional trailing phrase. Domain B uses its own phrasing, standing in for
// the house style of a second data source.
inline std::string render_report(const SyntheticLabel& label) {
  std::string s;
  if (label.domain == DomainTag::B) {
    s = std::string(rhythm_phrase(label.rhythm)) + " present. ventricular rate " +
        std::to_string(label.heart_rate_bpm) + " per minute.";
  } else {
    s = std::string(rhythm_phrase(label.rhythm)) + ". heart rate " +
        std::to_string(label.heart_rate_bpm) + " bpm.";
    if (label.rhythm == RhythmClass::sinus_rhythm) s += " normal ecg.";
  }
  return s;
}

// Labels for a corpus: classes dealt round-robin then shuffled, so the class
// histogram is balanced by construction; heart rates drawn on the grid.
inline std::vector<CorpusEntry> plan_corpus(const CorpusConfig& config, uint64_t seed) {
  if (config.n_records <= 0) throw ArgumentError("corpus size must be positive");
  if (config.domain == DomainTag::external) throw ArgumentError("corpus domain must be A or B");
  Rng rng(Rng::mix(seed, config.domain == DomainTag::A ? 0xa11ce5ULL : 0xb0bca7ULL));
  std::vector<int> classes(config.n_records);
  for (int i = 0; i < config.n_records; ++i) classes[i] = i % kNumRhythmClasses;
  rng.shuffle(classes);

  const char dom_ch = config.domain == DomainTag::A ? 'A' : 'B';
  std::vector<CorpusEntry> out(config.n_records);
  for (int i = 0; i < config.n_records; ++i) {
    CorpusEntry& e = out[i];
    e.label.rhythm = static_cast<RhythmClass>(classes[i]);
    e.label.domain = config.domain;
    const auto [lo, hi] = hr_range_for(e.label.rhythm);
    const int steps = (hi - lo) / config.hr_grid_step;
    e.label.heart_rate_bpm = lo + config.hr_grid_step * rng.range_int(0, steps);
    char id[32];
    std::snprintf(id, sizeof id, "%c-%06d", dom_ch, i);
    e.record_id = id;
    e.record_seed = Rng::mix(seed, (static_cast<uint64_t>(dom_ch) << 32) | static_cast<uint64_t>(i));
    e.report = render_report(e.label);
  }
  return out;
}

inline EcgRecord materialize_record(const CorpusEntry& entry, const CorpusConfig& config) {
  EcgRecord rec =
      generate_synthetic_record(entry.label, config.duration_s, config.sample_rate_hz, entry.record_seed);
  rec.record_id = entry.record_id;
  return rec;
}

// Spec-level convenience: fully materialized (record, report, label) triples.
struct CorpusTriple {
  EcgRecord record;
  std::string report;
  SyntheticLabel label;
};

inline std::vector<CorpusTriple> build_corpus(const CorpusConfig& config, uint64_t seed) {
  const auto plan = plan_corpus(config, seed);
  std::vector<CorpusTriple> out;
  out.reserve(plan.size());
  for (const auto& e : plan) out.push_back({materialize_record(e, config), e.report, e.label});
  return out;
}

}  // namespace meit
