#include <catch2/catch_amalgamated.hpp>

#include "espex/gradcheck.hpp"
#include "espex/metrics.hpp"
#include "espex/model.hpp"
#include "oracles.hpp"

using espex::CounterRng;
using espex::ExtractionNet;
using espex::ModelConfig;
namespace nn = espex::nn;
using nn::Tensor;

namespace {

template <typename S>
Tensor<S> random_tensor(CounterRng& rng, std::vector<long> shape, double amp = 0.5) {
  long n = 1;
  for (long d : shape) n *= d;
  std::vector<S> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-amp, amp));
  return Tensor<S>::from(std::move(shape), std::move(v));
}

template <typename S>
void zero_param(ExtractionNet<S>& net, const std::string& name) {
  auto* p = net.params().find(name);
  REQUIRE(p != nullptr);
  std::fill(p->tensor.value().begin(), p->tensor.value().end(), S(0));
}

}  // namespace

TEST_CASE("toy config shape chain and length property") {
  auto cfg = ModelConfig::toy();
  ExtractionNet<float> net(cfg, 1);
  CounterRng rng(301);

  auto x = random_tensor<float>(rng, {1, 4000});
  auto y = random_tensor<float>(rng, {64, 64});
  nn::NoGrad ng;
  auto X = net.speech_encode(x);
  REQUIRE(X.shape() == std::vector<long>({64, 400}));
  auto Y = net.eeg_encode(y);
  REQUIRE(Y.shape() == std::vector<long>({64, 64}));
  auto Yp = net.interpolate_reference(Y, 400);
  REQUIRE(Yp.shape() == std::vector<long>({64, 400}));
  auto M = net.extract_mask(X, Y);
  REQUIRE(M.shape() == std::vector<long>({64, 400}));
  for (float v : M.value()) REQUIRE(v >= 0.0f);  // ReLU mask head
  auto out = net.forward(x, y);
  REQUIRE(out.shape() == std::vector<long>({4000}));
  for (float v : out.value()) REQUIRE(std::isfinite(v));

  // Output length equals input length for any hop-divisible input.
  for (long t_s : {200L, 600L, 1200L}) {
    auto xi = random_tensor<float>(rng, {1, t_s});
    auto yi = random_tensor<float>(rng, {64, 16});
    REQUIRE(net.forward(xi, yi).numel() == t_s);
  }

  REQUIRE_THROWS_WITH(net.speech_encode(random_tensor<float>(rng, {1, 4005})),
                      Catch::Matchers::ContainsSubstring("pad input to hop multiple"));
  REQUIRE_THROWS_WITH(net.eeg_encode(random_tensor<float>(rng, {32, 64})),
                      Catch::Matchers::ContainsSubstring("eeg_encode"));
}

TEST_CASE("speech encoder framing matches brute-force frame count") {
  auto cfg = ModelConfig::toy();
  ExtractionNet<double> net(cfg, 2);
  CounterRng rng(303);
  nn::NoGrad ng;
  auto x = random_tensor<double>(rng, {1, 200});
  auto X = net.speech_encode(x);
  // Frame count oracle: hop K/2=10, one frame per hop-aligned start.
  long frames = 0;
  for (long start = 0; start + 10 <= 200; start += 10) ++frames;
  REQUIRE(X.dim(1) == frames);
  REQUIRE(X.dim(1) == 20);
}

TEST_CASE("eeg_encode variants: direct bypass and parameter ordering") {
  CounterRng rng(307);
  auto y = random_tensor<float>(rng, {64, 64});

  auto direct_cfg = ModelConfig::toy(espex::EegVariant::direct);
  ExtractionNet<float> direct_net(direct_cfg, 3);
  nn::NoGrad ng;
  auto out = direct_net.eeg_encode(y);
  REQUIRE(out.value() == y.value());  // bit-equal bypass

  long counts[4];
  int i = 0;
  for (auto v : {espex::EegVariant::direct, espex::EegVariant::conv, espex::EegVariant::sa,
                 espex::EegVariant::adc}) {
    ExtractionNet<float> net(ModelConfig::toy(v), 4);
    counts[i++] = net.param_count();
  }
  // direct < conv, sa < adc at equal block count.
  REQUIRE(counts[0] < counts[1]);
  REQUIRE(counts[0] < counts[2]);
  REQUIRE(counts[1] < counts[3]);
  REQUIRE(counts[2] < counts[3]);
}

TEST_CASE("adc block with zeroed residual branches equals LN(LN(preConv(y)))") {
  auto cfg = ModelConfig::toy();
  cfg.adc_blocks = 1;
  ExtractionNet<double> net(cfg, 5);
  // Zero the attention output projection and the depthwise kernel+bias, so
  // both sublayers reduce to their residual path.
  zero_param(net, "eeg_encoder.adc0.mha.wo.weight");
  zero_param(net, "eeg_encoder.adc0.mha.wo.bias");
  zero_param(net, "eeg_encoder.adc0.dconv.weight");
  zero_param(net, "eeg_encoder.adc0.dconv.bias");

  CounterRng rng(311);
  auto y = random_tensor<double>(rng, {64, 16});
  nn::NoGrad ng;
  auto got = net.eeg_encode(y);

  // Manual composition from the registry parameters.
  auto P = [&](const std::string& n) { return net.params().find(n)->tensor; };
  auto pre = nn::conv1d(y, P("eeg_encoder.pre_conv.weight"), P("eeg_encoder.pre_conv.bias"), 1, 1, 1);
  auto ln1 = nn::layer_norm(pre, P("eeg_encoder.adc0.ln_mha.gamma"), P("eeg_encoder.adc0.ln_mha.beta"));
  auto ln2 = nn::layer_norm(ln1, P("eeg_encoder.adc0.ln_dconv.gamma"), P("eeg_encoder.adc0.ln_dconv.beta"));
  REQUIRE(got.numel() == ln2.numel());
  for (long i = 0; i < got.numel(); ++i)
    REQUIRE(std::fabs(got.value()[static_cast<size_t>(i)] - ln2.value()[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("cross_attend: zero output projection leaves LN(X)") {
  auto cfg = ModelConfig::toy();
  ExtractionNet<double> net(cfg, 6);
  zero_param(net, "extractor.repeat0.ca.wo.weight");
  zero_param(net, "extractor.repeat0.ca.wo.bias");
  CounterRng rng(313);
  auto X = random_tensor<double>(rng, {64, 20});
  auto Yp = random_tensor<double>(rng, {64, 20});
  nn::NoGrad ng;
  auto got = net.cross_attend(X, Yp);
  auto expect = nn::layer_norm(X, net.params().find("extractor.repeat0.ca_ln.gamma")->tensor,
                               net.params().find("extractor.repeat0.ca_ln.beta")->tensor);
  for (long i = 0; i < got.numel(); ++i)
    REQUIRE(std::fabs(got.value()[static_cast<size_t>(i)] - expect.value()[static_cast<size_t>(i)]) < 1e-12);

  REQUIRE_THROWS_WITH(net.cross_attend(X, random_tensor<double>(rng, {64, 21})),
                      Catch::Matchers::ContainsSubstring("time-length mismatch"));
  REQUIRE_THROWS_WITH(net.fuse_direct(X, Yp), Catch::Matchers::ContainsSubstring("CA fusion"));
}

TEST_CASE("fuse_direct: concat + 1x1 conv vs naive oracle, zero branch") {
  auto cfg = ModelConfig::toy(espex::EegVariant::direct, espex::FusionVariant::direct);
  ExtractionNet<double> net(cfg, 7);
  CounterRng rng(317);
  auto X = random_tensor<double>(rng, {64, 12});
  auto Yp = random_tensor<double>(rng, {64, 12});
  nn::NoGrad ng;
  auto got = net.fuse_direct(X, Yp);
  REQUIRE(got.shape() == X.shape());

  // Naive concat + matmul oracle.
  auto* w = net.params().find("extractor.repeat0.concat.weight");
  auto* b = net.params().find("extractor.repeat0.concat.bias");
  std::vector<double> cat(X.value());
  cat.insert(cat.end(), Yp.value().begin(), Yp.value().end());
  auto expect = oracle::matmul(w->tensor.value(), 64, 128, cat, 12);
  for (long r = 0; r < 64; ++r)
    for (long t = 0; t < 12; ++t)
      expect[static_cast<size_t>(r * 12 + t)] += b->tensor.value()[static_cast<size_t>(r)];
  for (long i = 0; i < got.numel(); ++i)
    REQUIRE(std::fabs(got.value()[static_cast<size_t>(i)] - expect[static_cast<size_t>(i)]) < 1e-12);

  // Zero the EEG half of the concat weights: output depends only on X.
  for (long r = 0; r < 64; ++r)
    for (long c = 64; c < 128; ++c)
      w->tensor.value()[static_cast<size_t>(r * 128 + c)] = 0.0;
  auto out1 = net.fuse_direct(X, Yp);
  auto out2 = net.fuse_direct(X, random_tensor<double>(rng, {64, 12}));
  REQUIRE(out1.value() == out2.value());
}

TEST_CASE("mask, decode and zeroed heads") {
  auto cfg = ModelConfig::toy();
  ExtractionNet<double> net(cfg, 8);
  CounterRng rng(331);
  nn::NoGrad ng;

  // apply_mask identities.
  auto X = random_tensor<double>(rng, {64, 10});
  auto ones = Tensor<double>::from({64, 10}, std::vector<double>(640, 1.0));
  REQUIRE(ExtractionNet<double>::apply_mask(X, ones).value() == X.value());
  auto zeros = Tensor<double>::zeros({64, 10});
  auto masked = ExtractionNet<double>::apply_mask(X, zeros);
  for (double v : masked.value()) REQUIRE(v == 0.0);

  // Zeroed mask head: M = 0 regardless of input, so S = 0.
  zero_param(net, "extractor.mask_head.weight");
  zero_param(net, "extractor.mask_head.bias");
  auto x = random_tensor<double>(rng, {1, 600});
  auto y = random_tensor<double>(rng, {64, 16});
  auto Xe = net.speech_encode(x);
  auto M = net.extract_mask(Xe, net.eeg_encode(y));
  for (double v : M.value()) REQUIRE(v == 0.0);

  // Zero decoder bias as well: fully silent output.
  zero_param(net, "decoder.linear.bias");
  auto out = net.forward(x, y);
  for (double v : out.value()) REQUIRE(v == 0.0);
}

TEST_CASE("decode matches naive frame-project-accumulate oracle") {
  auto cfg = ModelConfig::toy();
  ExtractionNet<double> net(cfg, 9);
  CounterRng rng(337);
  auto S = random_tensor<double>(rng, {64, 5});
  nn::NoGrad ng;
  auto got = net.decode(S);
  REQUIRE(got.numel() == 5 * 10);

  const auto& w = net.params().find("decoder.linear.weight")->tensor.value();  // [20 x 64]
  const auto& b = net.params().find("decoder.linear.bias")->tensor.value();
  std::vector<double> acc(static_cast<size_t>(4 * 10 + 20), 0.0);
  for (long f = 0; f < 5; ++f)
    for (long l = 0; l < 20; ++l) {
      double v = b[static_cast<size_t>(l)];
      for (long c = 0; c < 64; ++c)
        v += w[static_cast<size_t>(l * 64 + c)] * S.value()[static_cast<size_t>(c * 5 + f)];
      acc[static_cast<size_t>(f * 10 + l)] += v;
    }
  for (long i = 0; i < 50; ++i)
    REQUIRE(std::fabs(got.value()[static_cast<size_t>(i)] - acc[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("forward determinism and checkpoint round trip") {
  namespace fs = std::filesystem;
  auto cfg = ModelConfig::toy();
  ExtractionNet<float> a(cfg, 77);
  ExtractionNet<float> b(cfg, 77);
  CounterRng rng(341);
  auto x = random_tensor<float>(rng, {1, 2000});
  auto y = random_tensor<float>(rng, {64, 32});
  nn::NoGrad ng;
  REQUIRE(a.forward(x, y).value() == b.forward(x, y).value());

  auto tmp = fs::temp_directory_path() / "espex_ckpt_test";
  espex::save_checkpoint(a, tmp);
  auto c = espex::load_checkpoint<float>(tmp);
  REQUIRE(c.config().n_x == cfg.n_x);
  REQUIRE(c.param_count() == a.param_count());
  REQUIRE(c.forward(x, y).value() == a.forward(x, y).value());
  fs::remove_all(tmp);
}

TEST_CASE("full AdC block gradient check on [64 x 16] input") {
  auto cfg = ModelConfig::toy();
  cfg.adc_blocks = 1;
  ExtractionNet<double> net(cfg, 10);
  CounterRng rng(347);
  espex::nn::Parameter<double> y{"input", random_tensor<double>(rng, {64, 16})};
  y.tensor.set_requires_grad();

  std::vector<espex::nn::Parameter<double>*> leaves{&y};
  for (size_t i = 0; i < net.params().size(); ++i) {
    auto& p = net.params().at(i);
    if (p.name.rfind("eeg_encoder.", 0) == 0) leaves.push_back(&p);
  }
  auto rep = espex::nn::grad_check(
      [&] {
        CounterRng wrng(400);
        auto out = net.eeg_encode(y.tensor);
        std::vector<double> w(static_cast<size_t>(out.numel()));
        for (auto& v : w) v = wrng.uniform(-1.0, 1.0);
        return nn::sum(nn::multiply(out, Tensor<double>::from(out.shape(), std::move(w))));
      },
      leaves, 1e-5, 30);
  INFO(rep.worst_param << "[" << rep.worst_index << "]");
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("micro end-to-end gradient: forward + SI-SDR loss") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.n_x = 16;
  cfg.adc_blocks = 1;
  cfg.ca_tcn_repeats = 1;
  cfg.tcn_units_per_repeat = 1;
  cfg.tcn_hidden = 24;
  ExtractionNet<double> net(cfg, 11);
  CounterRng rng(353);
  espex::nn::Parameter<double> x{"mixture", random_tensor<double>(rng, {1, 400})};
  x.tensor.set_requires_grad();
  auto y = random_tensor<double>(rng, {64, 8});
  std::vector<double> ref(400);
  for (auto& v : ref) v = rng.uniform(-0.5, 0.5);

  std::vector<espex::nn::Parameter<double>*> leaves{&x};
  for (size_t i = 0; i < net.params().size(); ++i) leaves.push_back(&net.params().at(i));
  auto rep = espex::nn::grad_check(
      [&] { return espex::si_sdr_loss(net.forward(x.tensor, y), ref); }, leaves, 1e-5, 8);
  INFO(rep.worst_param << "[" << rep.worst_index << "]");
  REQUIRE(rep.max_rel_err < 1e-3);
}
