#include <catch2/catch_amalgamated.hpp>
#include <fstream>

#include "espex/training.hpp"

using espex::CounterRng;
using espex::ModelConfig;
using espex::TrainConfig;
using espex::TrainState;
namespace nn = espex::nn;

namespace {

namespace fs = std::filesystem;

// Corpus shared by the training-loop tests; built once.
const fs::path& tiny_corpus() {
  static fs::path dir = [] {
    auto d = fs::temp_directory_path() / "espex_trainer_corpus";
    if (!fs::exists(d / "manifest.json")) {
      fs::remove_all(d);
      espex::build_corpus(espex::make_manifest(2, 3, 12.0, 21), d);
    }
    return d;
  }();
  return dir;
}

ModelConfig micro_model() {
  ModelConfig cfg = ModelConfig::toy();
  cfg.n_x = 16;
  cfg.adc_blocks = 1;
  cfg.ca_tcn_repeats = 1;
  cfg.tcn_units_per_repeat = 2;
  cfg.tcn_hidden = 32;
  return cfg;
}

TrainConfig micro_train(uint64_t seed, int epochs) {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 4;
  tc.max_epochs = epochs;
  tc.seed = seed;
  tc.segment_s = 0.5;
  tc.hop_s = 2.0;
  return tc;
}

std::vector<std::string> log_lines_without_wall(const fs::path& csv) {
  std::ifstream is(csv);
  REQUIRE(is.good());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto pos = line.rfind(',');
    out.push_back(line.substr(0, pos));  // strip wall_s, the only timing column
  }
  return out;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("adam: analytic first step and zero-gradient no-op") {
  nn::ParamRegistry<double> reg;
  auto& p = reg.add("w", nn::Tensor<double>::zeros({1}));
  espex::Adam<double> opt(reg);

  p.tensor.grad()[0] = 1.0;
  opt.step(0.1);
  // Bias-corrected m_hat/sqrt(v_hat) == 1 at t=1, so the update is -lr.
  REQUIRE(std::fabs(p.tensor.value()[0] + 0.1) < 1e-6);

  // Zero gradient with no accumulated momentum: parameters unchanged.
  nn::ParamRegistry<double> reg2;
  auto& q = reg2.add("w", nn::Tensor<double>::from({1}, {0.7}));
  espex::Adam<double> opt2(reg2);
  q.tensor.grad()[0] = 0.0;
  opt2.step(0.1);
  REQUIRE(q.tensor.value()[0] == 0.7);
}

TEST_CASE("adam matches a hand-rolled 3-step trace on a quadratic") {
  nn::ParamRegistry<double> reg;
  auto& p = reg.add("x", nn::Tensor<double>::from({1}, {2.0}));
  espex::Adam<double> opt(reg);
  const double lr = 0.05, a = 3.0;

  // Independent hand-rolled Adam (same constants, separate arithmetic).
  double x = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = a * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    x -= lr * mh / (std::sqrt(vh) + 1e-8);

    p.tensor.grad()[0] = a * p.tensor.value()[0];
    opt.step(lr);
    REQUIRE(std::fabs(p.tensor.value()[0] - x) < 1e-12);
  }
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  nn::ParamRegistry<double> reg;
  reg.add("block.weight", nn::Tensor<double>::zeros({2}));
  espex::Adam<double> opt(reg);
  reg.at(0).tensor.grad()[1] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(opt.step(0.1), Catch::Matchers::ContainsSubstring("block.weight"));
}

TEST_CASE("lr schedule: spec traces") {
  TrainConfig cfg;
  cfg.lr = 1e-4;

  SECTION("strictly improving: lr unchanged") {
    TrainState st;
    st.lr_current = cfg.lr;
    for (double v : {10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0}) espex::lr_schedule_update(st, v, cfg);
    REQUIRE(st.lr_current == cfg.lr);
  }

  SECTION("flat losses: halving lands exactly after epoch 6") {
    TrainState st;
    st.lr_current = cfg.lr;
    double lr_after[6];
    for (int e = 0; e < 6; ++e) {
      espex::lr_schedule_update(st, 10.0, cfg);
      lr_after[e] = st.lr_current;
    }
    REQUIRE(lr_after[4] == cfg.lr);        // epoch 5: only 4 non-improving epochs so far
    REQUIRE(lr_after[5] == 0.5 * cfg.lr);  // epoch 6: counter reaches 5
  }

  SECTION("one improvement delays the halving to epoch 7") {
    TrainState st;
    st.lr_current = cfg.lr;
    const double seq[] = {10.0, 9.0, 10.0, 10.0, 10.0, 10.0, 10.0};
    double lr_trace[7];
    for (int e = 0; e < 7; ++e) {
      espex::lr_schedule_update(st, seq[e], cfg);
      lr_trace[e] = st.lr_current;
    }
    REQUIRE(lr_trace[5] == cfg.lr);
    REQUIRE(lr_trace[6] == 0.5 * cfg.lr);
  }
}

TEST_CASE("lr schedule and early stop match a counter-simulation oracle") {
  TrainConfig cfg;
  cfg.lr = 1.0;
  CounterRng rng(404);
  for (int trial = 0; trial < 25; ++trial) {
    TrainState st;
    st.lr_current = cfg.lr;
    // Oracle state.
    double best = std::numeric_limits<double>::infinity(), lr = cfg.lr;
    int since = 0;
    bool stopped_oracle = false, stopped_mine = false;
    double loss = 100.0;
    for (int e = 0; e < 60; ++e) {
      loss += rng.uniform() < 0.25 ? -rng.uniform(0.1, 1.0) : rng.uniform(0.0, 0.2);
      espex::lr_schedule_update(st, loss, cfg);
      if (loss < best) {
        best = loss;
        since = 0;
      } else {
        ++since;
        if (since % cfg.scheduler_patience == 0) lr *= cfg.decay_factor;
      }
      stopped_oracle = stopped_oracle || since >= cfg.early_stop_patience;
      stopped_mine = stopped_mine || espex::early_stop_check(st, cfg);
      REQUIRE(st.lr_current == lr);
      REQUIRE(st.epochs_since_best == since);
      REQUIRE(stopped_mine == stopped_oracle);
    }
  }

  TrainState st;
  st.epochs_since_best = 24;
  REQUIRE_FALSE(espex::early_stop_check(st, cfg));
  st.epochs_since_best = 25;
  REQUIRE(espex::early_stop_check(st, cfg));
}

TEST_CASE("training is deterministic and lr=0 freezes the model") {
  const auto corpus = tiny_corpus();
  auto out = fs::temp_directory_path() / "espex_train_det";
  fs::remove_all(out);

  auto r1 = espex::train(micro_model(), micro_train(5, 2), corpus, out / "a");
  auto r2 = espex::train(micro_model(), micro_train(5, 2), corpus, out / "b");
  REQUIRE_FALSE(r1.aborted);
  REQUIRE(log_lines_without_wall(out / "a" / "log.csv") ==
          log_lines_without_wall(out / "b" / "log.csv"));
  REQUIRE(file_bytes(out / "a" / "last" / "weights.f32") ==
          file_bytes(out / "b" / "last" / "weights.f32"));
  REQUIRE(file_bytes(out / "a" / "last" / "adam_m.f32") ==
          file_bytes(out / "b" / "last" / "adam_m.f32"));

  auto frozen_cfg = micro_train(5, 3);
  frozen_cfg.lr = 0.0;
  auto rf = espex::train(micro_model(), frozen_cfg, corpus, out / "frozen");
  REQUIRE(rf.log.size() == 3);
  for (const auto& row : rf.log) {
    REQUIRE(std::fabs(row.train_loss - rf.log[0].train_loss) < 1e-9);
    REQUIRE(row.val_loss == rf.log[0].val_loss);
  }
  fs::remove_all(out);
}

TEST_CASE("checkpoint resume is bit-exact") {
  const auto corpus = tiny_corpus();
  auto out = fs::temp_directory_path() / "espex_train_resume";
  fs::remove_all(out);

  auto full = espex::train(micro_model(), micro_train(9, 4), corpus, out / "full");
  auto part = espex::train(micro_model(), micro_train(9, 2), corpus, out / "part");
  auto resumed = espex::train(micro_model(), micro_train(9, 4), corpus, out / "part",
                              out / "part" / "last");
  REQUIRE(resumed.state.epoch == 4);
  REQUIRE(file_bytes(out / "full" / "last" / "weights.f32") ==
          file_bytes(out / "part" / "last" / "weights.f32"));
  REQUIRE(file_bytes(out / "full" / "last" / "adam_m.f32") ==
          file_bytes(out / "part" / "last" / "adam_m.f32"));
  REQUIRE(file_bytes(out / "full" / "last" / "adam_v.f32") ==
          file_bytes(out / "part" / "last" / "adam_v.f32"));
  REQUIRE(log_lines_without_wall(out / "full" / "log.csv") ==
          log_lines_without_wall(out / "part" / "log.csv"));
  fs::remove_all(out);
}

TEST_CASE("exploding lr aborts with the last good checkpoint retained") {
  const auto corpus = tiny_corpus();
  auto out = fs::temp_directory_path() / "espex_train_nan";
  fs::remove_all(out);
  auto cfg = micro_train(13, 4);
  cfg.lr = 1e12;
  cfg.grad_clip_norm = 0.0;  // disabled
  auto r = espex::train(micro_model(), cfg, corpus, out);
  REQUIRE(r.aborted);
  REQUIRE_FALSE(r.abort_reason.empty());
  fs::remove_all(out);
}

TEST_CASE("evaluate: row counts, split selection, mismatch error") {
  const auto corpus = tiny_corpus();
  auto out = fs::temp_directory_path() / "espex_eval";
  fs::remove_all(out);
  auto r = espex::train(micro_model(), micro_train(17, 1), corpus, out / "run");
  espex::EvaluateOptions opts;
  opts.segment_s = 0.5;
  opts.hop_s = 2.0;
  auto rep = espex::evaluate(r.best_dir, corpus, espex::Split::val, opts);
  // 2 subjects x 1 val trial x 6 windows of 0.5 s at hop 2 s over 12 s.
  REQUIRE(rep.rows.size() == 2 * 6);
  for (const auto& row : rep.rows) REQUIRE(std::isfinite(row.si_sdri));

  espex::EvaluateOptions bad = opts;
  bad.segment_s = 0.41;  // 0.41 s * 128 Hz is not an integer window
  REQUIRE_THROWS_WITH(espex::evaluate(r.best_dir, corpus, espex::Split::val, bad),
                      Catch::Matchers::ContainsSubstring("align to integer samples"));

  // Checkpoint whose config does not match the corpus (32 EEG channels).
  auto mismatched = micro_model();
  mismatched.n_y = 32;
  espex::ExtractionNet<float> other(mismatched, 1);
  espex::save_checkpoint(other, out / "mismatch");
  REQUIRE_THROWS_WITH(espex::evaluate(out / "mismatch", corpus, espex::Split::val, opts),
                      Catch::Matchers::ContainsSubstring("EEG channels"));
  fs::remove_all(out);
}
