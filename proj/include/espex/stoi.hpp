#pragma once

#include <complex>
#include <vector>

#include "espex/dsp.hpp"

// Short-Term Objective Intelligibility (optional feature). Pipeline: resample
// both signals to 10 kHz, drop frames where the clean signal is more than
// 40 dB below its loudest frame, 15 one-third-octave bands from 150 Hz,
// 384 ms analysis segments, clipped normalized correlation, averaged.

namespace espex {

namespace stoi_detail {

constexpr int kStoiRate = 10000;
constexpr int kFrameLen = 256;
constexpr int kFrameHop = 128;
constexpr int kFftLen = 512;
constexpr int kNumBands = 15;
constexpr double kFirstBandHz = 150.0;
constexpr int kSegFrames = 30;       // 30 frames * 12.8 ms = 384 ms
constexpr double kDynRangeDb = 40.0;
constexpr double kBetaDb = -15.0;

inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
  return w;
}

// Remove frames (in both signals) where the clean signal is quiet; rebuild by
// overlap-adding the kept windowed frames (Hann at 50% overlap sums to 1).
inline void remove_silent_frames(std::vector<double>& x, std::vector<double>& y) {
  const auto w = hann_window(kFrameLen);
  const long n_frames = (static_cast<long>(x.size()) - kFrameLen) / kFrameHop + 1;
  check(n_frames >= 1, "stoi: input too short");
  std::vector<double> energy_db(static_cast<size_t>(n_frames));
  double max_db = -1e300;
  for (long f = 0; f < n_frames; ++f) {
    double acc = 0.0;
    for (int i = 0; i < kFrameLen; ++i) {
      const double v = x[static_cast<size_t>(f * kFrameHop + i)] * w[static_cast<size_t>(i)];
      acc += v * v;
    }
    energy_db[static_cast<size_t>(f)] = 10.0 * std::log10(acc + 1e-300);
    max_db = std::max(max_db, energy_db[static_cast<size_t>(f)]);
  }
  std::vector<long> kept;
  for (long f = 0; f < n_frames; ++f)
    if (energy_db[static_cast<size_t>(f)] > max_db - kDynRangeDb) kept.push_back(f);
  check(!kept.empty(), "stoi: all frames silent");

  const long out_len = (static_cast<long>(kept.size()) - 1) * kFrameHop + kFrameLen;
  std::vector<double> xs(static_cast<size_t>(out_len), 0.0), ys(static_cast<size_t>(out_len), 0.0);
  for (size_t ki = 0; ki < kept.size(); ++ki) {
    const long src = kept[ki] * kFrameHop;
    const long dst = static_cast<long>(ki) * kFrameHop;
    for (int i = 0; i < kFrameLen; ++i) {
      xs[static_cast<size_t>(dst + i)] += x[static_cast<size_t>(src + i)] * w[static_cast<size_t>(i)];
      ys[static_cast<size_t>(dst + i)] += y[static_cast<size_t>(src + i)] * w[static_cast<size_t>(i)];
    }
  }
  x = std::move(xs);
  y = std::move(ys);
}

// One-third-octave band magnitudes: [bands x frames].
inline std::vector<std::vector<double>> band_spectrogram(const std::vector<double>& sig) {
  const auto w = hann_window(kFrameLen);
  const long n_frames = (static_cast<long>(sig.size()) - kFrameLen) / kFrameHop + 1;
  // Precompute band edges and the bins they own.
  std::vector<std::pair<int, int>> bins;  // [lo, hi) fft bin range per band
  for (int b = 0; b < kNumBands; ++b) {
    const double cf = kFirstBandHz * std::pow(2.0, b / 3.0);
    const double lo = cf / std::pow(2.0, 1.0 / 6.0);
    const double hi = cf * std::pow(2.0, 1.0 / 6.0);
    const double hz_per_bin = static_cast<double>(kStoiRate) / kFftLen;
    bins.push_back({static_cast<int>(std::ceil(lo / hz_per_bin)),
                    static_cast<int>(std::ceil(hi / hz_per_bin))});
  }
  std::vector<std::vector<double>> out(kNumBands,
                                       std::vector<double>(static_cast<size_t>(n_frames)));
  std::vector<std::complex<double>> buf(kFftLen);
  for (long f = 0; f < n_frames; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0));
    for (int i = 0; i < kFrameLen; ++i)
      buf[static_cast<size_t>(i)] = sig[static_cast<size_t>(f * kFrameHop + i)] * w[static_cast<size_t>(i)];
    fft_inplace(buf);
    for (int b = 0; b < kNumBands; ++b) {
      double acc = 0.0;
      for (int k = bins[static_cast<size_t>(b)].first; k < bins[static_cast<size_t>(b)].second; ++k)
        acc += std::norm(buf[static_cast<size_t>(k)]);
      out[static_cast<size_t>(b)][static_cast<size_t>(f)] = std::sqrt(acc);
    }
  }
  return out;
}

}  // namespace stoi_detail

// est/ref at the same rate; needs >= 384 ms of (non-silent) signal.
inline double stoi(const AudioSignal& est, const AudioSignal& ref) {
  using namespace stoi_detail;
  check(est.sample_rate == ref.sample_rate, "stoi: sample rate mismatch");
  check(est.samples.size() == ref.samples.size(), "stoi: length mismatch");
  check(ref.duration_s() >= 0.384, "stoi: input too short (need >= 384 ms)");

  auto x = resample_rational(ref.samples, ref.sample_rate, kStoiRate);
  auto y = resample_rational(est.samples, est.sample_rate, kStoiRate);
  remove_silent_frames(x, y);

  const auto xb = band_spectrogram(x);
  const auto yb = band_spectrogram(y);
  const long m = static_cast<long>(xb[0].size());
  check(m >= kSegFrames, "stoi: input too short after silent-frame removal");

  const double clip = std::pow(10.0, -kBetaDb / 20.0);
  double total = 0.0;
  long count = 0;
  std::vector<double> xs(kSegFrames), ys(kSegFrames);
  for (long seg_end = kSegFrames; seg_end <= m; ++seg_end) {
    for (int b = 0; b < kNumBands; ++b) {
      double nx = 0.0, ny = 0.0;
      for (int i = 0; i < kSegFrames; ++i) {
        xs[static_cast<size_t>(i)] = xb[static_cast<size_t>(b)][static_cast<size_t>(seg_end - kSegFrames + i)];
        ys[static_cast<size_t>(i)] = yb[static_cast<size_t>(b)][static_cast<size_t>(seg_end - kSegFrames + i)];
        nx += xs[static_cast<size_t>(i)] * xs[static_cast<size_t>(i)];
        ny += ys[static_cast<size_t>(i)] * ys[static_cast<size_t>(i)];
      }
      const double alpha = std::sqrt(nx) / (std::sqrt(ny) + 1e-300);
      double mx = 0.0, my = 0.0;
      for (int i = 0; i < kSegFrames; ++i) {
        ys[static_cast<size_t>(i)] = std::min(alpha * ys[static_cast<size_t>(i)],
                                              xs[static_cast<size_t>(i)] * (1.0 + clip));
        mx += xs[static_cast<size_t>(i)];
        my += ys[static_cast<size_t>(i)];
      }
      mx /= kSegFrames;
      my /= kSegFrames;
      double num = 0.0, dx = 0.0, dy = 0.0;
      for (int i = 0; i < kSegFrames; ++i) {
        const double a = xs[static_cast<size_t>(i)] - mx;
        const double c = ys[static_cast<size_t>(i)] - my;
        num += a * c;
        dx += a * a;
        dy += c * c;
      }
      total += num / (std::sqrt(dx * dy) + 1e-300);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace espex
