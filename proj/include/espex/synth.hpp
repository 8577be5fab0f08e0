#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "espex/dsp.hpp"
#include "espex/io.hpp"
#include "espex/rng.hpp"

// Fully synthetic cocktail-party corpus: two harmonic "speakers" per trial
// mixed at 0 dB, plus forward-model EEG that encodes which one is attended
// (attended envelope enters with a higher gain). Everything is a pure
// function of the manifest, so corpora are byte-identical across rebuilds.

namespace espex {

struct SpeakerProfile {
  double pitch_base = 120.0;   // Hz
  double pitch_drift = 0.0;    // Hz/s
  double formant_tilt = -9.0;  // dB/octave
  uint64_t seed = 0;
};

struct ForwardModel {
  std::vector<double> attended_kernels;    // [channels x lag_taps]
  std::vector<double> unattended_kernels;  // [channels x lag_taps]
  long channels = 64;
  long lag_taps = 32;  // 250 ms at 128 Hz
  double attended_gain = 1.0;
  double unattended_gain = 0.3;
  double noise_sigma = 0.6;
  uint64_t subject_seed = 0;
  uint64_t noise_seed = 0;
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  check(s == "test", "unknown split name: " + s);
  return Split::test;
}

struct TrialAssignment {
  int subject = 0;
  int trial = 0;
  Split split = Split::train;
};

struct CorpusManifest {
  int subjects = 4;
  int trials_per_subject = 4;
  double trial_duration_s = 60.0;
  uint64_t global_seed = 0;
  double attended_gain = 1.0;
  double unattended_gain = 0.3;
  double noise_sigma = 0.6;
  std::vector<TrialAssignment> splits;
};

// test = exactly 1 trial per subject; val = 1 further trial per subject,
// disjoint from test; the rest train.
inline void assign_splits(CorpusManifest& m) {
  check(m.trials_per_subject >= 2, "manifest: need >= 2 trials per subject for test+val");
  m.splits.clear();
  for (int s = 0; s < m.subjects; ++s) {
    auto rng = CounterRng(m.global_seed).split(0x5711).split(static_cast<uint64_t>(s));
    std::vector<int> order(static_cast<size_t>(m.trials_per_subject));
    for (int t = 0; t < m.trials_per_subject; ++t) order[static_cast<size_t>(t)] = t;
    rng.shuffle(order);
    for (int t = 0; t < m.trials_per_subject; ++t) {
      Split sp = Split::train;
      if (order[static_cast<size_t>(t)] == 0) sp = Split::test;
      else if (order[static_cast<size_t>(t)] == 1) sp = Split::val;
      m.splits.push_back({s, t, sp});
    }
  }
}

inline CorpusManifest make_manifest(int subjects, int trials, double duration_s,
                                    uint64_t seed) {
  CorpusManifest m;
  m.subjects = subjects;
  m.trials_per_subject = trials;
  m.trial_duration_s = duration_s;
  m.global_seed = seed;
  assign_splits(m);
  return m;
}

// Desk-scale default: 4 subjects x 4 trials x 60 s.
inline CorpusManifest toy_manifest(uint64_t seed = 0) { return make_manifest(4, 4, 60.0, seed); }

// Source-dataset shape: 16 subjects x 8 trials x 360 s = 128 trials, 12.8 h.
inline CorpusManifest paper_scale_manifest(uint64_t seed = 0) {
  return make_manifest(16, 8, 360.0, seed);
}

inline json manifest_to_json(const CorpusManifest& m) {
  json splits = json::array();
  for (const auto& t : m.splits)
    splits.push_back({{"subject", t.subject}, {"trial", t.trial}, {"split", split_name(t.split)}});
  return {{"subjects", m.subjects},
          {"trials_per_subject", m.trials_per_subject},
          {"trial_duration_s", m.trial_duration_s},
          {"global_seed", m.global_seed},
          {"attended_gain", m.attended_gain},
          {"unattended_gain", m.unattended_gain},
          {"noise_sigma", m.noise_sigma},
          {"splits", splits}};
}

inline CorpusManifest manifest_from_json(const json& j) {
  CorpusManifest m;
  m.subjects = j.at("subjects").get<int>();
  m.trials_per_subject = j.at("trials_per_subject").get<int>();
  m.trial_duration_s = j.at("trial_duration_s").get<double>();
  m.global_seed = j.at("global_seed").get<uint64_t>();
  m.attended_gain = j.value("attended_gain", 1.0);
  m.unattended_gain = j.value("unattended_gain", 0.3);
  m.noise_sigma = j.value("noise_sigma", 0.6);
  if (j.contains("splits")) {
    for (const auto& t : j.at("splits"))
      m.splits.push_back({t.at("subject").get<int>(), t.at("trial").get<int>(),
                          split_from_name(t.at("split").get<std::string>())});
  } else {
    assign_splits(m);
  }
  return m;
}

// ---------------------------------------------------------------------------
// speech synthesis
// ---------------------------------------------------------------------------

inline SpeakerProfile random_profile(CounterRng& rng, uint64_t seed) {
  SpeakerProfile p;
  p.pitch_base = rng.uniform(80.0, 200.0);
  p.pitch_drift = rng.uniform(-2.0, 2.0);
  p.formant_tilt = rng.uniform(-14.0, -6.0);
  p.seed = seed;
  return p;
}

// Harmonic source with drifting pitch, syllabic amplitude modulation,
// spectral tilt with two formant-like bumps, and soft pauses. Pauses dip to
// an 0.08 floor rather than zero so every analysis window keeps power.
inline AudioSignal gen_speaker_signal(const SpeakerProfile& profile, double duration_s) {
  check(duration_s > 0, "gen_speaker_signal: duration must be positive");
  const int fs = kAudioRate;
  const long n = std::lround(duration_s * fs);
  CounterRng rng = CounterRng(profile.seed).split(0xA0D10);

  // Pitch wobble.
  double wob_amp[3], wob_freq[3], wob_ph[3];
  for (int k = 0; k < 3; ++k) {
    wob_amp[k] = rng.uniform(1.0, 3.0);
    wob_freq[k] = rng.uniform(0.3, 1.5);
    wob_ph[k] = rng.uniform(0.0, 2.0 * kPi);
  }
  // Syllabic AM in the 2-8 Hz range plus a slower sway.
  const double am_f = rng.uniform(2.0, 8.0);
  const double am_ph = rng.uniform(0.0, 2.0 * kPi);
  const double sway_f = rng.uniform(0.3, 1.0);
  const double sway_ph = rng.uniform(0.0, 2.0 * kPi);

  // Harmonic weights: tilt plus two formant bumps (static per profile).
  const int n_harm = std::min<int>(28, static_cast<int>(3500.0 / profile.pitch_base));
  const double f1 = rng.uniform(350.0, 700.0), w1 = rng.uniform(120.0, 250.0);
  const double f2 = rng.uniform(1000.0, 2000.0), w2 = rng.uniform(150.0, 350.0);
  std::vector<double> weight(static_cast<size_t>(n_harm)), phase0(static_cast<size_t>(n_harm));
  for (int h = 1; h <= n_harm; ++h) {
    const double fh = h * profile.pitch_base;
    const double tilt = std::pow(10.0, profile.formant_tilt * std::log2(static_cast<double>(h)) / 20.0);
    const double bump = 1.0 + 1.5 * std::exp(-std::pow((fh - f1) / w1, 2)) +
                        1.0 * std::exp(-std::pow((fh - f2) / w2, 2));
    weight[static_cast<size_t>(h - 1)] = tilt * bump;
    phase0[static_cast<size_t>(h - 1)] = rng.uniform(0.0, 2.0 * kPi);
  }

  // Speech/pause gate with 30 ms cosine ramps.
  std::vector<double> gate(static_cast<size_t>(n), 1.0);
  {
    const double floor_gain = 0.08;
    const long ramp = fs * 3 / 100;
    long pos = 0;
    bool speaking = true;
    while (pos < n) {
      const double len_s = speaking ? rng.uniform(0.8, 2.5) : rng.uniform(0.10, 0.25);
      const long len = std::lround(len_s * fs);
      const double level = speaking ? 1.0 : floor_gain;
      for (long i = pos; i < std::min(n, pos + len); ++i) gate[static_cast<size_t>(i)] = level;
      pos += len;
      speaking = !speaking;
    }
    // Smooth transitions in place.
    std::vector<double> smooth(gate);
    for (long i = 1; i < n; ++i) {
      if (gate[static_cast<size_t>(i)] != gate[static_cast<size_t>(i - 1)]) {
        const double from = gate[static_cast<size_t>(i - 1)], to = gate[static_cast<size_t>(i)];
        for (long r = 0; r < ramp && i + r < n; ++r) {
          const double c = 0.5 - 0.5 * std::cos(kPi * (r + 1) / static_cast<double>(ramp));
          smooth[static_cast<size_t>(i + r)] = from + (to - from) * c;
        }
      }
    }
    gate = std::move(smooth);
  }

  AudioSignal out{std::vector<double>(static_cast<size_t>(n), 0.0), fs};
  double phi = 0.0;
  double peak = 0.0;
  for (long i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    double f0 = profile.pitch_base + profile.pitch_drift * t;
    for (int k = 0; k < 3; ++k) f0 += wob_amp[k] * std::sin(2.0 * kPi * wob_freq[k] * t + wob_ph[k]);
    f0 = std::max(60.0, std::min(300.0, f0));
    phi += 2.0 * kPi * f0 / fs;
    double s = 0.0;
    for (int h = 1; h <= n_harm; ++h)
      s += weight[static_cast<size_t>(h - 1)] * std::sin(h * phi + phase0[static_cast<size_t>(h - 1)]);
    const double am = 0.62 + 0.28 * std::sin(2.0 * kPi * am_f * t + am_ph) +
                      0.10 * std::sin(2.0 * kPi * sway_f * t + sway_ph);
    const double v = s * am * gate[static_cast<size_t>(i)];
    out.samples[static_cast<size_t>(i)] = v;
    peak = std::max(peak, std::fabs(v));
  }
  const double g = peak > 0.0 ? 0.9 / peak : 1.0;
  for (auto& v : out.samples) v *= g;
  return out;
}

// ---------------------------------------------------------------------------
// forward-model EEG
// ---------------------------------------------------------------------------

namespace synth_detail {
// Smooth random FIR rows: population template + 30% subject perturbation,
// 5-tap Hann smoothing, unit L2 per row.
inline std::vector<double> make_kernels(uint64_t template_key, uint64_t subject_key, long channels,
                                        long taps) {
  auto smooth_rows = [&](std::vector<double>& rows) {
    const double win[5] = {0.25, 0.75, 1.0, 0.75, 0.25};
    std::vector<double> out(rows.size(), 0.0);
    for (long c = 0; c < channels; ++c)
      for (long k = 0; k < taps; ++k) {
        double acc = 0.0;
        for (int d = -2; d <= 2; ++d) {
          const long src = k + d;
          if (src >= 0 && src < taps) acc += win[d + 2] * rows[static_cast<size_t>(c * taps + src)];
        }
        out[static_cast<size_t>(c * taps + k)] = acc;
      }
    rows = std::move(out);
  };
  CounterRng trng(template_key), srng(subject_key);
  std::vector<double> tmpl(static_cast<size_t>(channels * taps));
  std::vector<double> pert(static_cast<size_t>(channels * taps));
  for (auto& v : tmpl) v = trng.gaussian();
  for (auto& v : pert) v = srng.gaussian();
  smooth_rows(tmpl);
  smooth_rows(pert);
  std::vector<double> rows(static_cast<size_t>(channels * taps));
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = tmpl[i] + 0.3 * pert[i];
  for (long c = 0; c < channels; ++c) {
    double norm = 0.0;
    for (long k = 0; k < taps; ++k) norm += rows[static_cast<size_t>(c * taps + k)] * rows[static_cast<size_t>(c * taps + k)];
    norm = std::sqrt(norm);
    if (norm > 0)
      for (long k = 0; k < taps; ++k) rows[static_cast<size_t>(c * taps + k)] /= norm;
  }
  return rows;
}
}  // namespace synth_detail

inline ForwardModel make_forward_model(const CorpusManifest& m, int subject, int trial) {
  ForwardModel fm;
  fm.attended_gain = m.attended_gain;
  fm.unattended_gain = m.unattended_gain;
  fm.noise_sigma = m.noise_sigma;
  check(fm.attended_gain > fm.unattended_gain && fm.unattended_gain >= 0.0,
        "forward model: attended gain must exceed unattended gain");
  const auto root = CounterRng(m.global_seed);
  fm.subject_seed = root.split(0xF0A).split(static_cast<uint64_t>(subject)).key();
  fm.noise_seed = root.split(0xF0B)
                      .split(static_cast<uint64_t>(subject))
                      .split(static_cast<uint64_t>(trial))
                      .key();
  fm.attended_kernels = synth_detail::make_kernels(root.split(0xF0C).key(), fm.subject_seed ^ 0x1,
                                                   fm.channels, fm.lag_taps);
  fm.unattended_kernels = synth_detail::make_kernels(root.split(0xF0D).key(), fm.subject_seed ^ 0x2,
                                                     fm.channels, fm.lag_taps);
  return fm;
}

// EEG_c = att_gain * (h_c (*) env_att) + unatt_gain * (g_c (*) env_unatt) + noise,
// at 128 Hz, then per-trial z-normalized. Envelopes are standardized and each
// filtered track is rescaled to unit variance per channel, so the gains set
// the actual attended:unattended:noise variance ratio.
inline EEGRecording gen_eeg(const AudioSignal& att, const AudioSignal& unatt,
                            const ForwardModel& fm) {
  check(att.samples.size() == unatt.samples.size(), "gen_eeg: duration mismatch");
  auto standardize = [](std::vector<double> v) {
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    var /= static_cast<double>(v.size());
    const double inv = var > 1e-30 ? 1.0 / std::sqrt(var) : 0.0;
    for (auto& x : v) x = (x - mu) * inv;
    return v;
  };
  const auto env_a = standardize(envelope(att, kEegRate));
  const auto env_u = standardize(envelope(unatt, kEegRate));
  const long t_len = static_cast<long>(std::min(env_a.size(), env_u.size()));

  EEGRecording rec;
  rec.channels = fm.channels;
  rec.samples = t_len;
  rec.sample_rate = kEegRate;
  rec.data.assign(static_cast<size_t>(rec.channels * t_len), 0.0);

  auto filtered = [&](const std::vector<double>& env, const std::vector<double>& kernels, long c) {
    std::vector<double> out(static_cast<size_t>(t_len), 0.0);
    for (long t = 0; t < t_len; ++t) {
      double acc = 0.0;
      for (long k = 0; k < fm.lag_taps; ++k) {
        const long src = t - k;
        if (src >= 0) acc += kernels[static_cast<size_t>(c * fm.lag_taps + k)] * env[static_cast<size_t>(src)];
      }
      out[static_cast<size_t>(t)] = acc;
    }
    return standardize(std::move(out));
  };
  for (long c = 0; c < rec.channels; ++c) {
    const auto sa = filtered(env_a, fm.attended_kernels, c);
    const auto su = filtered(env_u, fm.unattended_kernels, c);
    CounterRng noise = CounterRng(fm.noise_seed).split(static_cast<uint64_t>(c));
    for (long t = 0; t < t_len; ++t)
      rec.at(c, t) = fm.attended_gain * sa[static_cast<size_t>(t)] +
                     fm.unattended_gain * su[static_cast<size_t>(t)] +
                     fm.noise_sigma * noise.gaussian();
  }
  return normalize_trial(std::move(rec));
}

// ---------------------------------------------------------------------------
// corpus on disk
// ---------------------------------------------------------------------------

struct TrialSources {
  SpeakerProfile attended_profile, unattended_profile;
  AudioSignal attended, unattended;
};

// Deterministic per-trial sources; the attended speaker's identity (which of
// the two drawn voices is attended) is itself randomized per trial.
inline TrialSources gen_trial_sources(const CorpusManifest& m, int subject, int trial) {
  auto rng = CounterRng(m.global_seed)
                 .split(0x7121)
                 .split(static_cast<uint64_t>(subject))
                 .split(static_cast<uint64_t>(trial));
  auto p1 = random_profile(rng, rng.next_u64());
  auto p2 = random_profile(rng, rng.next_u64());
  // Keep the two voices spectrally distinct.
  int guard = 0;
  while (std::fabs(p1.pitch_base - p2.pitch_base) < 30.0 && guard++ < 64)
    p2.pitch_base = rng.uniform(80.0, 200.0);
  const bool attend_first = rng.next_u64() & 1;
  TrialSources ts;
  ts.attended_profile = attend_first ? p1 : p2;
  ts.unattended_profile = attend_first ? p2 : p1;
  ts.attended = gen_speaker_signal(ts.attended_profile, m.trial_duration_s);
  ts.unattended = gen_speaker_signal(ts.unattended_profile, m.trial_duration_s);
  return ts;
}

inline fs::path trial_dir(const fs::path& root, int subject, int trial) {
  return root / ("subject_" + std::to_string(subject)) / ("trial_" + std::to_string(trial));
}

// Layout: out/subject_i/trial_j/{attended.wav, unattended.wav, mixture.wav,
// eeg.f32, eeg.json}; out/manifest.json. unattended.wav stores the 0 dB
// scaled source so mixture == attended + unattended sample for sample.
inline void build_corpus(const CorpusManifest& manifest, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "manifest.json");
    check(os.good(), "build_corpus: cannot write manifest");
    os << manifest_to_json(manifest).dump(2) << "\n";
  }
  for (int s = 0; s < manifest.subjects; ++s) {
    for (int t = 0; t < manifest.trials_per_subject; ++t) {
      const auto dir = trial_dir(out_dir, s, t);
      try {
        fs::create_directories(dir);
        auto sources = gen_trial_sources(manifest, s, t);
        auto [mixture, scaled_unatt] = equalize_and_mix(sources.attended, sources.unattended);
        double peak = 0.0;
        for (double v : mixture.samples) peak = std::max(peak, std::fabs(v));
        const double g = peak > 0.99 ? 0.99 / peak : 1.0;
        auto scaled = [&](const AudioSignal& sig) {
          AudioSignal o = sig;
          for (auto& v : o.samples) v *= g;
          return o;
        };
        write_wav(dir / "attended.wav", scaled(sources.attended));
        write_wav(dir / "unattended.wav", scaled(scaled_unatt));
        write_wav(dir / "mixture.wav", scaled(mixture));
        const auto fm = make_forward_model(manifest, s, t);
        const auto eeg = gen_eeg(sources.attended, sources.unattended, fm);
        write_eeg(dir / "eeg.f32", dir / "eeg.json", eeg, s, t);
      } catch (...) {
        // Never leave a half-written trial behind.
        std::error_code ec;
        fs::remove_all(dir, ec);
        throw;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// corpus loading
// ---------------------------------------------------------------------------

struct CorpusTrialRef {
  int subject = 0;
  int trial = 0;
  Split split = Split::train;
  fs::path dir;
};

struct Corpus {
  CorpusManifest manifest;
  std::vector<CorpusTrialRef> trials;
  fs::path root;
};

inline Corpus load_corpus(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  check(is.good(), "load_corpus: missing manifest.json in " + dir.string());
  Corpus c;
  c.root = dir;
  c.manifest = manifest_from_json(json::parse(is));
  for (const auto& a : c.manifest.splits)
    c.trials.push_back({a.subject, a.trial, a.split, trial_dir(dir, a.subject, a.trial)});
  return c;
}

struct LoadedTrial {
  AudioSignal attended, unattended;
  EEGRecording eeg;
};

inline LoadedTrial load_trial(const CorpusTrialRef& ref) {
  LoadedTrial t;
  t.attended = read_wav(ref.dir / "attended.wav");
  t.unattended = read_wav(ref.dir / "unattended.wav");
  t.eeg = read_eeg(ref.dir / "eeg.f32", ref.dir / "eeg.json");
  return t;
}

// Segments for one split. Re-runs the 0 dB equalization on the dequantized
// sources so the SegmentExample power invariants hold exactly after PCM I/O.
inline std::vector<SegmentExample> load_split_segments(const Corpus& corpus, Split split,
                                                       double window_s = 4.0, double hop_s = 1.0) {
  std::vector<SegmentExample> out;
  for (const auto& ref : corpus.trials) {
    if (ref.split != split) continue;
    auto t = load_trial(ref);
    auto segs = segment_trial(t.attended, t.unattended, t.eeg, window_s, hop_s, ref.subject,
                              ref.trial);
    for (auto& s : segs.segments) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace espex
