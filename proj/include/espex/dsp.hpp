#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "espex/common.hpp"

// Deterministic audio/EEG preprocessing: mixing, segmentation, re-referencing,
// filtering, resampling, normalization, envelope extraction. All functions are
// pure; nothing here touches shared state.

namespace espex {

constexpr int kAudioRate = 8000;
constexpr int kEegRate = 128;

struct AudioSignal {
  std::vector<double> samples;
  int sample_rate = kAudioRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

struct EEGRecording {
  std::vector<double> data;  // [channels x time], row-major
  long channels = 0;
  long samples = 0;
  int sample_rate = kEegRate;

  double& at(long c, long t) { return data[static_cast<size_t>(c * samples + t)]; }
  double at(long c, long t) const { return data[static_cast<size_t>(c * samples + t)]; }
  double duration_s() const {
    return static_cast<double>(samples) / static_cast<double>(sample_rate);
  }
};

// One time-aligned training example: 4 s of audio + EEG by default.
struct SegmentExample {
  AudioSignal mixture, attended, unattended;
  EEGRecording eeg;
  int subject_id = 0;
  int trial_id = 0;
  double offset_s = 0.0;
};

// ---------------------------------------------------------------------------
// filters
// ---------------------------------------------------------------------------

struct Biquad {
  double b0, b1, b2, a1, a2;
};

namespace dsp_detail {

// Butterworth Q factors for an even-order cascade of second-order sections.
inline std::vector<double> butterworth_qs(int order) {
  check(order >= 2 && order % 2 == 0, "butterworth: order must be even and >= 2");
  std::vector<double> qs;
  for (int k = 0; k < order / 2; ++k) {
    const double theta = kPi * (2.0 * k + 1.0) / (2.0 * order);
    qs.push_back(1.0 / (2.0 * std::cos(theta)));
  }
  return qs;
}

inline Biquad biquad_lowpass(double fc, double fs, double q) {
  const double w0 = 2.0 * kPi * fc / fs;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double c = std::cos(w0);
  const double a0 = 1.0 + alpha;
  return {(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0, -2.0 * c / a0,
          (1.0 - alpha) / a0};
}

inline Biquad biquad_highpass(double fc, double fs, double q) {
  const double w0 = 2.0 * kPi * fc / fs;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double c = std::cos(w0);
  const double a0 = 1.0 + alpha;
  return {(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0, -2.0 * c / a0,
          (1.0 - alpha) / a0};
}

// Transposed direct-form II with steady-state initial conditions scaled by
// the first sample, so constant inputs produce their steady-state output from
// sample zero (no startup step transient).
inline void biquad_apply(const Biquad& s, std::vector<double>& x) {
  if (x.empty()) return;
  const double g = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  double s1 = (g - s.b0) * x[0];
  double s2 = (s.b2 - s.a2 * g) * x[0];
  for (auto& v : x) {
    const double in = v;
    const double y = s.b0 * in + s1;
    s1 = s.b1 * in - s.a1 * y + s2;
    s2 = s.b2 * in - s.a2 * y;
    v = y;
  }
}

}  // namespace dsp_detail

inline std::vector<Biquad> butter_lowpass(int order, double fc, double fs) {
  std::vector<Biquad> out;
  for (double q : dsp_detail::butterworth_qs(order))
    out.push_back(dsp_detail::biquad_lowpass(fc, fs, q));
  return out;
}

inline std::vector<Biquad> butter_highpass(int order, double fc, double fs) {
  std::vector<Biquad> out;
  for (double q : dsp_detail::butterworth_qs(order))
    out.push_back(dsp_detail::biquad_highpass(fc, fs, q));
  return out;
}

// Zero-phase filtering: odd-reflection padding, run the cascade forward, then
// backward. Filter order doubles; passband is preserved with no phase shift.
inline std::vector<double> filtfilt(const std::vector<Biquad>& sections,
                                    const std::vector<double>& x) {
  if (x.empty()) return {};
  const long n = static_cast<long>(x.size());
  const long padlen = std::min<long>(n - 1, std::max<long>(64, 9 * static_cast<long>(sections.size())));
  std::vector<double> ext;
  ext.reserve(static_cast<size_t>(n + 2 * padlen));
  for (long i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[static_cast<size_t>(i)]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (long i = 1; i <= padlen; ++i)
    ext.push_back(2.0 * x[static_cast<size_t>(n - 1)] - x[static_cast<size_t>(n - 1 - i)]);

  for (const auto& s : sections) dsp_detail::biquad_apply(s, ext);
  std::reverse(ext.begin(), ext.end());
  for (const auto& s : sections) dsp_detail::biquad_apply(s, ext);
  std::reverse(ext.begin(), ext.end());

  return std::vector<double>(ext.begin() + padlen, ext.begin() + padlen + n);
}

// Band-pass realized as HP then LP Butterworth cascades (4th order each),
// applied zero-phase.
inline std::vector<double> bandpass_zero_phase(const std::vector<double>& x, double fs,
                                               double lo_hz, double hi_hz, int order = 4) {
  auto sections = butter_highpass(order, lo_hz, fs);
  auto lp = butter_lowpass(order, hi_hz, fs);
  sections.insert(sections.end(), lp.begin(), lp.end());
  return filtfilt(sections, x);
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

// Polyphase rational resampling with a Blackman-windowed sinc low-pass.
// Each polyphase branch is normalized to unit sum, so DC passes exactly.
inline std::vector<double> resample_rational(const std::vector<double>& x, long fs_in,
                                             long fs_out) {
  check(fs_in > 0 && fs_out > 0, "resample: rates must be positive");
  if (fs_in == fs_out) return x;
  const long g = std::gcd(fs_in, fs_out);
  const long up = fs_out / g, down = fs_in / g;
  const long m = std::max(up, down);
  const long half = 16 * m;

  std::vector<double> h(static_cast<size_t>(2 * half + 1));
  for (long i = -half; i <= half; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(m);
    const double sinc = i == 0 ? 1.0 : std::sin(kPi * t) / (kPi * t);
    const double w = 0.42 + 0.5 * std::cos(kPi * i / half) + 0.08 * std::cos(2.0 * kPi * i / half);
    h[static_cast<size_t>(i + half)] = sinc * w;
  }
  std::vector<double> phase_sum(static_cast<size_t>(up), 0.0);
  for (long i = -half; i <= half; ++i) {
    const long p = ((i % up) + up) % up;
    phase_sum[static_cast<size_t>(p)] += h[static_cast<size_t>(i + half)];
  }

  const long n = static_cast<long>(x.size());
  const long n_out = (n * up) / down;
  std::vector<double> y(static_cast<size_t>(n_out), 0.0);
  for (long j = 0; j < n_out; ++j) {
    const long center = j * down;  // in upsampled-grid units
    const long i_lo = std::max<long>(0, (center - half + up - 1) / up);
    const long i_hi = std::min<long>(n - 1, (center + half) / up);
    double acc = 0.0;
    for (long i = i_lo; i <= i_hi; ++i) {
      const long tap = center - i * up;
      acc += x[static_cast<size_t>(i)] * h[static_cast<size_t>(tap + half)];
    }
    const long p = center % up;
    y[static_cast<size_t>(j)] = acc / phase_sum[static_cast<size_t>(p)];
  }
  return y;
}

// ---------------------------------------------------------------------------
// signals operations
// ---------------------------------------------------------------------------

inline double mean_square_power(const std::vector<double>& x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

// Scale the unattended source so both have equal mean-square power (0 dB),
// then mix. Power is taken over the full trial.
inline std::pair<AudioSignal, AudioSignal> equalize_and_mix(const AudioSignal& attended,
                                                            const AudioSignal& unattended) {
  check(attended.sample_rate == unattended.sample_rate,
        "equalize_and_mix: sample rate mismatch");
  check(attended.samples.size() == unattended.samples.size(),
        "equalize_and_mix: length mismatch");
  const double pa = mean_square_power(attended.samples);
  const double pu = mean_square_power(unattended.samples);
  check(pa > 0.0 && pu > 0.0, "equalize_and_mix: silent source");
  const double scale = std::sqrt(pa / pu);

  AudioSignal scaled{std::vector<double>(unattended.samples.size()), unattended.sample_rate};
  AudioSignal mixture{std::vector<double>(attended.samples.size()), attended.sample_rate};
  for (size_t i = 0; i < attended.samples.size(); ++i) {
    scaled.samples[i] = unattended.samples[i] * scale;
    mixture.samples[i] = attended.samples[i] + scaled.samples[i];
  }
  return {mixture, scaled};
}

struct SegmentationResult {
  std::vector<SegmentExample> segments;
  bool too_short = false;  // trial shorter than one window
};

// Cut a trial into aligned (mixture, attended, unattended, EEG) windows.
// Mixing (0 dB equalization) is applied over the full trial first.
inline SegmentationResult segment_trial(const AudioSignal& attended,
                                        const AudioSignal& unattended, const EEGRecording& eeg,
                                        double window_s = 4.0, double hop_s = 1.0,
                                        int subject_id = 0, int trial_id = 0) {
  check(window_s > 0 && hop_s > 0, "segment_trial: window and hop must be positive");
  const double dur_audio = attended.duration_s();
  const double dur_eeg = eeg.duration_s();
  check(std::fabs(dur_audio - dur_eeg) * eeg.sample_rate < 0.5,
        "segment_trial: audio and EEG cover different durations");

  SegmentationResult result;
  if (dur_audio < window_s) {
    result.too_short = true;
    return result;
  }
  auto [mixture, scaled_unatt] = equalize_and_mix(attended, unattended);

  const long win_a = std::lround(window_s * attended.sample_rate);
  const long hop_a = std::lround(hop_s * attended.sample_rate);
  const long win_e = std::lround(window_s * eeg.sample_rate);
  const long hop_e = std::lround(hop_s * eeg.sample_rate);
  check(std::fabs(hop_s * attended.sample_rate - hop_a) < 1e-9 &&
            std::fabs(hop_s * eeg.sample_rate - hop_e) < 1e-9,
        "segment_trial: hop must align to integer samples at both rates");
  check(std::fabs(window_s * attended.sample_rate - win_a) < 1e-9 &&
            std::fabs(window_s * eeg.sample_rate - win_e) < 1e-9,
        "segment_trial: window must align to integer samples at both rates");

  const long count =
      static_cast<long>(std::floor((dur_audio - window_s) / hop_s + 1e-9)) + 1;
  for (long k = 0; k < count; ++k) {
    const long a0 = k * hop_a;
    const long e0 = k * hop_e;
    if (a0 + win_a > static_cast<long>(attended.samples.size())) break;
    SegmentExample ex;
    ex.subject_id = subject_id;
    ex.trial_id = trial_id;
    ex.offset_s = static_cast<double>(k) * hop_s;
    auto cut = [](const std::vector<double>& v, long from, long len) {
      return std::vector<double>(v.begin() + from, v.begin() + from + len);
    };
    ex.attended = {cut(attended.samples, a0, win_a), attended.sample_rate};
    ex.unattended = {cut(scaled_unatt.samples, a0, win_a), attended.sample_rate};
    ex.mixture = {cut(mixture.samples, a0, win_a), attended.sample_rate};
    ex.eeg.channels = eeg.channels;
    ex.eeg.samples = win_e;
    ex.eeg.sample_rate = eeg.sample_rate;
    ex.eeg.data.resize(static_cast<size_t>(eeg.channels * win_e));
    for (long c = 0; c < eeg.channels; ++c)
      for (long t = 0; t < win_e; ++t) ex.eeg.at(c, t) = eeg.at(c, e0 + t);
    result.segments.push_back(std::move(ex));
  }
  return result;
}

// Subtract the instantaneous mean across channels from every channel.
inline EEGRecording average_reference(EEGRecording rec) {
  for (long t = 0; t < rec.samples; ++t) {
    double mu = 0.0;
    for (long c = 0; c < rec.channels; ++c) mu += rec.at(c, t);
    mu /= static_cast<double>(rec.channels);
    for (long c = 0; c < rec.channels; ++c) rec.at(c, t) -= mu;
  }
  return rec;
}

// Per-channel z-normalization over the whole trial (population variance).
// Channels with (numerically) zero variance are set to zero.
inline EEGRecording normalize_trial(EEGRecording rec) {
  for (long c = 0; c < rec.channels; ++c) {
    double mu = 0.0;
    for (long t = 0; t < rec.samples; ++t) mu += rec.at(c, t);
    mu /= static_cast<double>(rec.samples);
    double var = 0.0;
    for (long t = 0; t < rec.samples; ++t) {
      const double d = rec.at(c, t) - mu;
      var += d * d;
    }
    var /= static_cast<double>(rec.samples);
    if (var < 1e-30) {
      for (long t = 0; t < rec.samples; ++t) rec.at(c, t) = 0.0;
    } else {
      const double inv = 1.0 / std::sqrt(var);
      for (long t = 0; t < rec.samples; ++t) rec.at(c, t) = (rec.at(c, t) - mu) * inv;
    }
  }
  return rec;
}

// Full EEG ingest chain: average re-reference, zero-phase 1-32 Hz band-pass,
// resample to 128 Hz (integer decimation only), per-trial z-normalization.
inline EEGRecording preprocess_eeg(const EEGRecording& raw) {
  check(raw.channels >= 1 && raw.samples >= 2, "preprocess_eeg: empty recording");
  check(raw.sample_rate >= 256, "preprocess_eeg: sample rate must be >= 256 Hz");
  check(raw.sample_rate % kEegRate == 0, "preprocess_eeg: unsupported decimation ratio");

  EEGRecording ref = average_reference(raw);
  EEGRecording out;
  out.channels = ref.channels;
  out.sample_rate = kEegRate;
  for (long c = 0; c < ref.channels; ++c) {
    std::vector<double> ch(ref.data.begin() + c * ref.samples,
                           ref.data.begin() + (c + 1) * ref.samples);
    ch = bandpass_zero_phase(ch, ref.sample_rate, 1.0, 32.0);
    ch = resample_rational(ch, ref.sample_rate, kEegRate);
    if (c == 0) {
      out.samples = static_cast<long>(ch.size());
      out.data.resize(static_cast<size_t>(out.channels * out.samples));
    }
    std::copy(ch.begin(), ch.end(), out.data.begin() + c * out.samples);
  }
  return normalize_trial(out);
}

// Amplitude envelope: magnitude, low-pass <= 32 Hz, resample to out_rate.
// Output is clamped non-negative (the low-pass can ring slightly below zero).
inline std::vector<double> envelope(const AudioSignal& speech, int out_rate = kEegRate) {
  std::vector<double> mag(speech.samples.size());
  for (size_t i = 0; i < mag.size(); ++i) mag[i] = std::fabs(speech.samples[i]);
  mag = filtfilt(butter_lowpass(4, 32.0, speech.sample_rate), mag);
  mag = resample_rational(mag, speech.sample_rate, out_rate);
  for (auto& v : mag) v = std::max(0.0, v);
  return mag;
}

}  // namespace espex
