#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "espex/metrics.hpp"
#include "espex/model.hpp"
#include "espex/stoi.hpp"
#include "espex/synth.hpp"

// Training loop: seeded shuffling, SI-SDR loss, Adam, plateau lr decay,
// early stopping, per-epoch checkpointing with bit-exact resume. Everything
// runs single-threaded; identical seeds give identical logs and checkpoints.

namespace espex {

enum class Precision { single, dbl };

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 16;
  double decay_factor = 0.5;
  int scheduler_patience = 5;
  int early_stop_patience = 25;
  int max_epochs = 100;
  uint64_t seed = 0;
  Precision precision = Precision::single;
  // Segmentation of corpus trials into training examples.
  double segment_s = 4.0;
  double hop_s = 1.0;
  // Control experiment: break the audio/EEG pairing by shuffling EEG across
  // segments (fresh seeded permutation per epoch).
  bool shuffle_eeg = false;
  double grad_clip_norm = 5.0;

  void validate() const {
    check(decay_factor > 0.0 && decay_factor < 1.0, "train config: decay factor in (0,1)");
    check(scheduler_patience >= 1 && early_stop_patience >= 1, "train config: patience >= 1");
    check(batch_size >= 1 && max_epochs >= 1, "train config: bad batch/epochs");
  }
};

inline json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"decay_factor", c.decay_factor},
          {"scheduler_patience", c.scheduler_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed},
          {"precision", c.precision == Precision::single ? "single" : "double"},
          {"segment_s", c.segment_s},
          {"hop_s", c.hop_s},
          {"shuffle_eeg", c.shuffle_eeg},
          {"grad_clip_norm", c.grad_clip_norm}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.scheduler_patience = j.value("scheduler_patience", c.scheduler_patience);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("precision"))
    c.precision = j.at("precision").get<std::string>() == "double" ? Precision::dbl
                                                                   : Precision::single;
  c.segment_s = j.value("segment_s", c.segment_s);
  c.hop_s = j.value("hop_s", c.hop_s);
  c.shuffle_eeg = j.value("shuffle_eeg", c.shuffle_eeg);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename S>
class Adam {
 public:
  explicit Adam(nn::ParamRegistry<S>& reg, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : reg_(reg), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(reg.size());
    v_.resize(reg.size());
    for (size_t i = 0; i < reg.size(); ++i) {
      m_[i].assign(static_cast<size_t>(reg.at(i).tensor.numel()), S(0));
      v_[i].assign(static_cast<size_t>(reg.at(i).tensor.numel()), S(0));
    }
  }

  // One bias-corrected update from the gradients currently in the registry.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < reg_.size(); ++i) {
      auto& p = reg_.at(i);
      auto& val = p.tensor.value();
      auto& grad = p.tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < val.size(); ++j) {
        const double g = static_cast<double>(grad[j]);
        if (!std::isfinite(g))
          throw std::runtime_error("adam: non-finite gradient in parameter " + p.name);
        const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * g;
        const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * g * g;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        val[j] -= static_cast<S>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
      }
    }
  }

  long t() const { return t_; }
  void set_t(long t) { t_ = t; }
  std::vector<std::vector<S>>& m() { return m_; }
  std::vector<std::vector<S>>& v() { return v_; }

  void save(const fs::path& dir) const {
    auto flatten = [](const std::vector<std::vector<S>>& mats) {
      std::vector<float> out;
      for (const auto& m : mats)
        for (S x : m) out.push_back(static_cast<float>(x));
      return out;
    };
    write_f32_blob(dir / "adam_m.f32", flatten(m_));
    write_f32_blob(dir / "adam_v.f32", flatten(v_));
  }

  void load(const fs::path& dir) {
    auto unflatten = [](const std::vector<float>& blob, std::vector<std::vector<S>>& mats) {
      size_t off = 0;
      for (auto& m : mats) {
        check(off + m.size() <= blob.size(), "adam: moment blob too small");
        for (auto& x : m) x = static_cast<S>(blob[off++]);
      }
      check(off == blob.size(), "adam: moment blob size mismatch");
    };
    unflatten(read_f32_blob(dir / "adam_m.f32"), m_);
    unflatten(read_f32_blob(dir / "adam_v.f32"), v_);
  }

 private:
  nn::ParamRegistry<S>& reg_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

// ---------------------------------------------------------------------------
// schedule / early stop
// ---------------------------------------------------------------------------

struct TrainState {
  int epoch = 0;  // completed epochs
  long step = 0;
  double lr_current = 1e-4;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
  long adam_t = 0;
  uint64_t seed = 0;
};

inline json train_state_to_json(const TrainState& s) {
  return {{"epoch", s.epoch},          {"step", s.step},
          {"lr_current", s.lr_current}, {"best_val_loss", s.best_val_loss},
          {"epochs_since_best", s.epochs_since_best}, {"adam_t", s.adam_t},
          {"seed", s.seed}};
}

inline TrainState train_state_from_json(const json& j) {
  TrainState s;
  s.epoch = j.at("epoch").get<int>();
  s.step = j.at("step").get<long>();
  s.lr_current = j.at("lr_current").get<double>();
  s.best_val_loss = j.at("best_val_loss").get<double>();
  s.epochs_since_best = j.at("epochs_since_best").get<int>();
  s.adam_t = j.at("adam_t").get<long>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

// Observe one validation loss. The lr halves exactly when the epochs-since-
// best counter reaches a multiple of the patience; any new best resets it.
// Returns true when this observation was a new best.
inline bool lr_schedule_update(TrainState& st, double val_loss, const TrainConfig& cfg) {
  if (val_loss < st.best_val_loss) {
    st.best_val_loss = val_loss;
    st.epochs_since_best = 0;
    return true;
  }
  ++st.epochs_since_best;
  if (st.epochs_since_best % cfg.scheduler_patience == 0) st.lr_current *= cfg.decay_factor;
  return false;
}

inline bool early_stop_check(const TrainState& st, const TrainConfig& cfg) {
  return st.epochs_since_best >= cfg.early_stop_patience;
}

// ---------------------------------------------------------------------------
// train / evaluate
// ---------------------------------------------------------------------------

struct TrainLogRow {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double wall_s = 0.0;
};

inline void write_train_log(const std::vector<TrainLogRow>& rows, const fs::path& path) {
  std::ofstream os(path);
  check(os.good(), "train: cannot write log " + path.string());
  os << "epoch,step,train_loss,val_loss,lr,wall_s\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%ld,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.step, r.train_loss,
                  r.val_loss, r.lr, r.wall_s);
    os << buf;
  }
}

struct TrainResult {
  std::vector<TrainLogRow> log;
  TrainState state;
  fs::path best_dir, last_dir;
  bool aborted = false;
  std::string abort_reason;
};

namespace train_detail {

template <typename S>
struct Example {
  std::vector<S> mixture;   // [T]
  std::vector<S> eeg;       // [C x T_e]
  std::vector<S> attended;  // [T]
  long eeg_channels = 0, eeg_samples = 0;
  int subject = 0, trial = 0, segment = 0;
};

template <typename S>
std::vector<Example<S>> to_examples(const std::vector<SegmentExample>& segs, double hop_s) {
  std::vector<Example<S>> out;
  out.reserve(segs.size());
  for (const auto& s : segs) {
    Example<S> e;
    e.mixture.assign(s.mixture.samples.begin(), s.mixture.samples.end());
    e.attended.assign(s.attended.samples.begin(), s.attended.samples.end());
    e.eeg.assign(s.eeg.data.begin(), s.eeg.data.end());
    e.eeg_channels = s.eeg.channels;
    e.eeg_samples = s.eeg.samples;
    e.subject = s.subject_id;
    e.trial = s.trial_id;
    e.segment = static_cast<int>(std::lround(s.offset_s / hop_s));
    out.push_back(std::move(e));
  }
  return out;
}

template <typename S>
nn::Tensor<S> mixture_tensor(const Example<S>& e) {
  return nn::Tensor<S>::from({1, static_cast<long>(e.mixture.size())}, e.mixture);
}

template <typename S>
nn::Tensor<S> eeg_tensor(const Example<S>& e) {
  return nn::Tensor<S>::from({e.eeg_channels, e.eeg_samples}, e.eeg);
}

template <typename S>
double validation_loss(const ExtractionNet<S>& net, const std::vector<Example<S>>& examples) {
  nn::NoGrad ng;
  double acc = 0.0;
  for (const auto& e : examples) {
    auto est = net.forward(mixture_tensor(e), eeg_tensor(e));
    acc += static_cast<double>(si_sdr_loss(est, e.attended).item());
  }
  return acc / static_cast<double>(examples.size());
}

template <typename S>
double grad_global_norm(nn::ParamRegistry<S>& reg) {
  double acc = 0.0;
  for (size_t i = 0; i < reg.size(); ++i)
    for (S g : reg.at(i).tensor.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(acc);
}

template <typename S>
TrainResult train_impl(const ModelConfig& mc, const TrainConfig& tc, const fs::path& corpus_dir,
                       const fs::path& out_dir, const fs::path& resume_from) {
  tc.validate();
  auto corpus = load_corpus(corpus_dir);
  auto train_examples =
      to_examples<S>(load_split_segments(corpus, Split::train, tc.segment_s, tc.hop_s), tc.hop_s);
  auto val_examples =
      to_examples<S>(load_split_segments(corpus, Split::val, tc.segment_s, tc.hop_s), tc.hop_s);
  check(!train_examples.empty(), "train: empty train split");
  check(!val_examples.empty(), "train: empty val split");
  check(static_cast<int>(train_examples.size()) >= tc.batch_size,
        "train: batch size exceeds training set");

  ExtractionNet<S> net(mc, tc.seed);
  Adam<S> opt(net.params());
  TrainState st;
  st.seed = tc.seed;
  st.lr_current = tc.lr;

  fs::create_directories(out_dir);
  const fs::path best_dir = out_dir / "best";
  const fs::path last_dir = out_dir / "last";

  TrainResult result;
  if (!resume_from.empty()) {
    // Resume from a `last/` checkpoint directory.
    std::ifstream is(resume_from / "train_state.json");
    check(is.good(), "train: cannot resume, missing train_state.json in " + resume_from.string());
    st = train_state_from_json(json::parse(is));
    {
      std::ifstream ck(resume_from / "checkpoint.json");
      check(ck.good(), "train: resume checkpoint.json missing");
      const json meta = json::parse(ck);
      load_params(net.params(), resume_from / "weights.f32", meta.at("params"));
    }
    opt.load(resume_from);
    opt.set_t(st.adam_t);
    std::ifstream lg(out_dir / "log.csv");
    if (lg.good()) {
      std::string line;
      std::getline(lg, line);  // header
      while (std::getline(lg, line)) {
        TrainLogRow r;
        if (std::sscanf(line.c_str(), "%d,%ld,%lf,%lf,%lf,%lf", &r.epoch, &r.step, &r.train_loss,
                        &r.val_loss, &r.lr, &r.wall_s) == 6 &&
            r.epoch <= st.epoch)
          result.log.push_back(r);
      }
    }
  }

  const long n_train = static_cast<long>(train_examples.size());
  const long n_batches = n_train / tc.batch_size;

  for (int epoch = st.epoch + 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double epoch_lr = st.lr_current;

    std::vector<long> order(static_cast<size_t>(n_train));
    for (long i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;
    CounterRng(tc.seed).split(0xE0).split(static_cast<uint64_t>(epoch)).shuffle(order);
    std::vector<long> eeg_of(order);
    if (tc.shuffle_eeg)
      CounterRng(tc.seed).split(0xEE6).split(static_cast<uint64_t>(epoch)).shuffle(eeg_of);

    double loss_acc = 0.0;
    long loss_count = 0;
    bool nan_hit = false;
    for (long b = 0; b < n_batches && !nan_hit; ++b) {
      net.params().zero_grad();
      for (int k = 0; k < tc.batch_size; ++k) {
        const long idx = order[static_cast<size_t>(b * tc.batch_size + k)];
        const auto& ex = train_examples[static_cast<size_t>(idx)];
        const auto& eeg_ex = train_examples[static_cast<size_t>(eeg_of[static_cast<size_t>(
            b * tc.batch_size + k)])];
        auto est = net.forward(mixture_tensor(ex), eeg_tensor(eeg_ex));
        auto loss = si_sdr_loss(est, ex.attended);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) {
          result.aborted = true;
          result.abort_reason = "non-finite training loss at epoch " + std::to_string(epoch);
          nan_hit = true;
          break;
        }
        loss.backward();
        loss_acc += lv;
        ++loss_count;
      }
      if (nan_hit) break;
      // Mean over the batch, then global-norm clipping.
      const S inv = S(1) / static_cast<S>(tc.batch_size);
      for (size_t i = 0; i < net.params().size(); ++i) {
        auto& g = net.params().at(i).tensor.grad();
        for (auto& x : g) x *= inv;
      }
      const double norm = grad_global_norm(net.params());
      if (tc.grad_clip_norm > 0.0 && norm > tc.grad_clip_norm) {
        const S s = static_cast<S>(tc.grad_clip_norm / norm);
        for (size_t i = 0; i < net.params().size(); ++i) {
          auto& g = net.params().at(i).tensor.grad();
          for (auto& x : g) x *= s;
        }
      }
      try {
        opt.step(epoch_lr);
      } catch (const std::exception& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        nan_hit = true;
        break;
      }
      ++st.step;
    }
    if (nan_hit) break;  // last/ still holds the previous (good) epoch

    const double train_loss = loss_acc / static_cast<double>(loss_count);
    const double val_loss = validation_loss(net, val_examples);

    st.epoch = epoch;
    st.adam_t = opt.t();
    const bool new_best = lr_schedule_update(st, val_loss, tc);
    if (new_best) save_checkpoint(net, best_dir);
    save_checkpoint(net, last_dir);
    opt.save(last_dir);
    {
      std::ofstream os(last_dir / "train_state.json");
      os << train_state_to_json(st).dump(2) << "\n";
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back({epoch, st.step, train_loss, val_loss, epoch_lr, wall});
    write_train_log(result.log, out_dir / "log.csv");

    if (early_stop_check(st, tc)) break;
  }

  if (!fs::exists(best_dir)) save_checkpoint(net, best_dir);
  result.state = st;
  result.best_dir = best_dir;
  result.last_dir = last_dir;
  write_train_log(result.log, out_dir / "log.csv");
  return result;
}

}  // namespace train_detail

inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const fs::path& corpus_dir,
                         const fs::path& out_dir, const fs::path& resume_from = {}) {
  if (tc.precision == Precision::dbl)
    return train_detail::train_impl<double>(mc, tc, corpus_dir, out_dir, resume_from);
  return train_detail::train_impl<float>(mc, tc, corpus_dir, out_dir, resume_from);
}

struct EvaluateOptions {
  double segment_s = 4.0;
  double hop_s = 1.0;
  bool with_stoi = false;
};

inline MetricsReport evaluate(const fs::path& checkpoint_dir, const fs::path& corpus_dir,
                              Split split, const EvaluateOptions& opts = {}) {
  auto net = load_checkpoint<float>(checkpoint_dir);
  auto corpus = load_corpus(corpus_dir);
  auto segments = load_split_segments(corpus, split, opts.segment_s, opts.hop_s);
  check(!segments.empty(), "evaluate: empty split");
  check(segments.front().eeg.channels == net.config().n_y,
        "evaluate: corpus EEG channels do not match checkpoint config");
  check(segments.front().eeg.sample_rate == kEegRate &&
            segments.front().mixture.sample_rate == kAudioRate,
        "evaluate: corpus sample rates do not match checkpoint working rates");

  auto examples = train_detail::to_examples<float>(segments, opts.hop_s);
  MetricsReport rep;
  nn::NoGrad ng;
  for (size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    auto est = net.forward(train_detail::mixture_tensor(e), train_detail::eeg_tensor(e));
    std::vector<double> est_d(est.value().begin(), est.value().end());
    const auto& seg = segments[i];
    MetricRow row;
    row.subject = e.subject;
    row.trial = e.trial;
    row.segment = e.segment;
    row.si_sdr = si_sdr(est_d, seg.attended.samples);
    row.si_sdri = row.si_sdr - si_sdr(seg.mixture.samples, seg.attended.samples);
    if (opts.with_stoi) row.stoi = stoi(AudioSignal{est_d, kAudioRate}, seg.attended);
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace espex
