#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "espex/io.hpp"
#include "espex/layers.hpp"

// End-to-end EEG-steered speaker extraction network: speech encoder, EEG
// encoder (stacked attention+depthwise-conv blocks), extractor (cross-attention
// fusion + TCN repeats generating a mask), overlap-add decoder. The
// eeg_variant / fusion_variant selectors cover the ablation grid.

namespace espex {

enum class EegVariant { adc, sa, conv, direct };
enum class FusionVariant { ca, direct };

inline const char* eeg_variant_name(EegVariant v) {
  switch (v) {
    case EegVariant::adc: return "adc";
    case EegVariant::sa: return "sa";
    case EegVariant::conv: return "conv";
    default: return "direct";
  }
}

inline EegVariant eeg_variant_from_name(const std::string& s) {
  if (s == "adc") return EegVariant::adc;
  if (s == "sa") return EegVariant::sa;
  if (s == "conv") return EegVariant::conv;
  check(s == "direct", "unknown eeg variant: " + s);
  return EegVariant::direct;
}

inline const char* fusion_variant_name(FusionVariant v) {
  return v == FusionVariant::ca ? "ca" : "direct";
}

inline FusionVariant fusion_variant_from_name(const std::string& s) {
  if (s == "ca") return FusionVariant::ca;
  check(s == "direct", "unknown fusion variant: " + s);
  return FusionVariant::direct;
}

struct ModelConfig {
  long n_x = 256;    // speech embedding dim
  long enc_kernel = 20;  // K; encoder stride and padding are K/2
  long n_y = 64;     // EEG channels
  long adc_blocks = 6;
  long heads = 2;
  long dconv_kernel = 10;
  long ca_tcn_repeats = 4;
  long tcn_units_per_repeat = 8;
  long tcn_hidden = 512;
  long tcn_kernel = 3;
  long dec_frame = 20;  // L; overlap-add hop is L/2
  EegVariant eeg_variant = EegVariant::adc;
  FusionVariant fusion_variant = FusionVariant::ca;
  bool toy_scale = false;

  long enc_stride() const { return enc_kernel / 2; }
  long dec_hop() const { return dec_frame / 2; }
  // Nominal 4 s segment lengths at the working rates.
  long segment_samples() const { return toy_scale ? 4000 : 32000; }
  long eeg_samples() const { return toy_scale ? 64 : 512; }

  // CPU-sized preset: 0.5 s segments, narrow embeddings, 2 blocks / 2 repeats.
  static ModelConfig toy(EegVariant ev = EegVariant::adc, FusionVariant fv = FusionVariant::ca) {
    ModelConfig c;
    c.n_x = 64;
    c.adc_blocks = 2;
    c.ca_tcn_repeats = 2;
    c.tcn_units_per_repeat = 4;
    c.tcn_hidden = 128;
    c.eeg_variant = ev;
    c.fusion_variant = fv;
    c.toy_scale = true;
    return c;
  }

  void validate() const {
    check(enc_kernel >= 2 && enc_kernel % 2 == 0, "config: enc_kernel must be even");
    check(dec_frame >= 2 && dec_frame % 2 == 0, "config: dec_frame must be even");
    check(n_y % heads == 0, "config: EEG dim not divisible by heads");
    check(adc_blocks >= 1 || eeg_variant == EegVariant::direct,
          "config: need adc_blocks >= 1 for adc/sa/conv variants");
    check(n_x >= 1 && tcn_hidden >= 1 && ca_tcn_repeats >= 1, "config: bad dims");
  }
};

inline json model_config_to_json(const ModelConfig& c) {
  return {{"n_x", c.n_x},
          {"enc_kernel", c.enc_kernel},
          {"n_y", c.n_y},
          {"adc_blocks", c.adc_blocks},
          {"heads", c.heads},
          {"dconv_kernel", c.dconv_kernel},
          {"ca_tcn_repeats", c.ca_tcn_repeats},
          {"tcn_units_per_repeat", c.tcn_units_per_repeat},
          {"tcn_hidden", c.tcn_hidden},
          {"tcn_kernel", c.tcn_kernel},
          {"dec_frame", c.dec_frame},
          {"eeg_variant", eeg_variant_name(c.eeg_variant)},
          {"fusion_variant", fusion_variant_name(c.fusion_variant)},
          {"toy_scale", c.toy_scale}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_x = j.value("n_x", c.n_x);
  c.enc_kernel = j.value("enc_kernel", c.enc_kernel);
  c.n_y = j.value("n_y", c.n_y);
  c.adc_blocks = j.value("adc_blocks", c.adc_blocks);
  c.heads = j.value("heads", c.heads);
  c.dconv_kernel = j.value("dconv_kernel", c.dconv_kernel);
  c.ca_tcn_repeats = j.value("ca_tcn_repeats", c.ca_tcn_repeats);
  c.tcn_units_per_repeat = j.value("tcn_units_per_repeat", c.tcn_units_per_repeat);
  c.tcn_hidden = j.value("tcn_hidden", c.tcn_hidden);
  c.tcn_kernel = j.value("tcn_kernel", c.tcn_kernel);
  c.dec_frame = j.value("dec_frame", c.dec_frame);
  if (j.contains("eeg_variant"))
    c.eeg_variant = eeg_variant_from_name(j.at("eeg_variant").get<std::string>());
  if (j.contains("fusion_variant"))
    c.fusion_variant = fusion_variant_from_name(j.at("fusion_variant").get<std::string>());
  c.toy_scale = j.value("toy_scale", false);
  c.validate();
  return c;
}

namespace net_detail {

using nn::Tensor;

// Attention sublayer then depthwise-conv sublayer, each residual + LN.
// The sa/conv variants keep only one of the two sublayers.
template <typename S>
struct AdcBlock {
  nn::MultiHeadAttentionLayer<S> mha;
  nn::LayerNormLayer<S> ln_mha;
  nn::DepthwiseConv1dLayer<S> dconv;
  nn::LayerNormLayer<S> ln_dconv;
  bool use_mha = true, use_dconv = true;

  AdcBlock() = default;
  AdcBlock(nn::ParamRegistry<S>& reg, const std::string& prefix, const ModelConfig& cfg,
           bool with_mha, bool with_dconv, CounterRng& rng)
      : use_mha(with_mha), use_dconv(with_dconv) {
    if (use_mha) {
      mha = nn::MultiHeadAttentionLayer<S>(reg, prefix + ".mha", cfg.n_y, cfg.n_y, cfg.n_y,
                                           cfg.heads, cfg.n_y, rng);
      ln_mha = nn::LayerNormLayer<S>(reg, prefix + ".ln_mha", cfg.n_y);
    }
    if (use_dconv) {
      dconv = nn::DepthwiseConv1dLayer<S>(reg, prefix + ".dconv", cfg.n_y, cfg.dconv_kernel, 1, rng);
      ln_dconv = nn::LayerNormLayer<S>(reg, prefix + ".ln_dconv", cfg.n_y);
    }
  }

  Tensor<S> forward(Tensor<S> y) const {
    if (use_mha) y = ln_mha.forward(nn::add(mha.forward(y, y), y));
    if (use_dconv) y = ln_dconv.forward(nn::add(dconv.forward(y), y));
    return y;
  }
};

// Dilated depthwise-separable unit with inner residual (separator backbone).
template <typename S>
struct TcnUnit {
  nn::LinearLayer<S> in_proj;
  nn::PReluLayer<S> prelu1;
  nn::LayerNormLayer<S> ln1;
  nn::DepthwiseConv1dLayer<S> dconv;
  nn::PReluLayer<S> prelu2;
  nn::LayerNormLayer<S> ln2;
  nn::LinearLayer<S> out_proj;

  TcnUnit() = default;
  TcnUnit(nn::ParamRegistry<S>& reg, const std::string& prefix, const ModelConfig& cfg,
          long dilation, CounterRng& rng) {
    in_proj = nn::LinearLayer<S>(reg, prefix + ".in", cfg.n_x, cfg.tcn_hidden, rng);
    prelu1 = nn::PReluLayer<S>(reg, prefix + ".prelu1", cfg.tcn_hidden);
    ln1 = nn::LayerNormLayer<S>(reg, prefix + ".ln1", cfg.tcn_hidden);
    dconv = nn::DepthwiseConv1dLayer<S>(reg, prefix + ".dconv", cfg.tcn_hidden, cfg.tcn_kernel,
                                        dilation, rng);
    prelu2 = nn::PReluLayer<S>(reg, prefix + ".prelu2", cfg.tcn_hidden);
    ln2 = nn::LayerNormLayer<S>(reg, prefix + ".ln2", cfg.tcn_hidden);
    out_proj = nn::LinearLayer<S>(reg, prefix + ".out", cfg.tcn_hidden, cfg.n_x, rng);
  }

  Tensor<S> forward(Tensor<S> x) const {
    auto h = ln1.forward(prelu1.forward(in_proj.forward(x)));
    h = ln2.forward(prelu2.forward(dconv.forward(h)));
    return nn::add(x, out_proj.forward(h));
  }
};

// One extractor repeat: fuse speech features with the reference, then the
// TCN stack with a residual around it.
template <typename S>
struct ExtractorRepeat {
  // cross-attention fusion
  nn::MultiHeadAttentionLayer<S> ca;
  nn::LayerNormLayer<S> ca_ln;
  // direct fusion
  nn::LinearLayer<S> concat_proj;
  FusionVariant fusion = FusionVariant::ca;
  std::vector<TcnUnit<S>> units;

  ExtractorRepeat() = default;
  ExtractorRepeat(nn::ParamRegistry<S>& reg, const std::string& prefix, const ModelConfig& cfg,
                  CounterRng& rng)
      : fusion(cfg.fusion_variant) {
    if (fusion == FusionVariant::ca) {
      // Single-head CA at model width n_x; the query comes from the
      // interpolated reference (n_y channels).
      ca = nn::MultiHeadAttentionLayer<S>(reg, prefix + ".ca", cfg.n_y, cfg.n_x, cfg.n_x, 1,
                                          cfg.n_x, rng);
      ca_ln = nn::LayerNormLayer<S>(reg, prefix + ".ca_ln", cfg.n_x);
    } else {
      concat_proj = nn::LinearLayer<S>(reg, prefix + ".concat", cfg.n_x + cfg.n_y, cfg.n_x, rng);
    }
    for (long u = 0; u < cfg.tcn_units_per_repeat; ++u)
      units.emplace_back(reg, prefix + ".tcn" + std::to_string(u), cfg, 1L << u, rng);
  }

  Tensor<S> fuse(Tensor<S> x, Tensor<S> y_ref) const {
    check(x.dim(1) == y_ref.dim(1), "fusion: time-length mismatch " + shape_str(x.shape()) +
                                        " vs " + shape_str(y_ref.shape()));
    if (fusion == FusionVariant::ca)
      return ca_ln.forward(nn::add(x, ca.forward(y_ref, x)));
    return concat_proj.forward(nn::concat_channels(x, y_ref));
  }

  Tensor<S> forward(Tensor<S> x, Tensor<S> y_ref) const {
    auto fused = fuse(x, y_ref);
    auto h = fused;
    for (const auto& u : units) h = u.forward(h);
    return nn::add(fused, h);
  }
};

}  // namespace net_detail

template <typename S>
class ExtractionNet {
 public:
  using Tensor = nn::Tensor<S>;

  explicit ExtractionNet(const ModelConfig& cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    CounterRng rng = CounterRng(seed).split(0x1417);
    enc_ = nn::Conv1dLayer<S>(reg_, "speech_encoder.conv", 1, cfg_.n_x, cfg_.enc_kernel,
                              cfg_.enc_stride(), cfg_.enc_kernel / 2, cfg_.enc_kernel / 2, rng);
    if (cfg_.eeg_variant != EegVariant::direct) {
      pre_conv_ = nn::Conv1dLayer<S>(reg_, "eeg_encoder.pre_conv", cfg_.n_y, cfg_.n_y, 3, 1, 1, 1,
                                     rng);
      const bool with_mha = cfg_.eeg_variant != EegVariant::conv;
      const bool with_dconv = cfg_.eeg_variant != EegVariant::sa;
      for (long i = 0; i < cfg_.adc_blocks; ++i)
        blocks_.emplace_back(reg_, "eeg_encoder.adc" + std::to_string(i), cfg_, with_mha,
                             with_dconv, rng);
    }
    for (long r = 0; r < cfg_.ca_tcn_repeats; ++r)
      repeats_.emplace_back(reg_, "extractor.repeat" + std::to_string(r), cfg_, rng);
    mask_head_ = nn::LinearLayer<S>(reg_, "extractor.mask_head", cfg_.n_x, cfg_.n_x, rng);
    dec_ = nn::LinearLayer<S>(reg_, "decoder.linear", cfg_.n_x, cfg_.dec_frame, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamRegistry<S>& params() { return reg_; }
  long param_count() const { return reg_.total_elements(); }

  // x [1 x T_s] -> X [n_x x T_s/(K/2)]: strided conv with K/2 padding,
  // truncated to exactly T_s/(K/2) frames, then ReLU.
  Tensor speech_encode(Tensor x) const {
    check(x.rank() == 2 && x.dim(0) == 1, "speech_encode: expected [1 x T]");
    check(x.dim(1) % cfg_.enc_stride() == 0,
          "speech_encode: pad input to hop multiple of " + std::to_string(cfg_.enc_stride()));
    const long t_x = x.dim(1) / cfg_.enc_stride();
    auto h = enc_.forward(x);
    if (h.dim(1) > t_x) h = nn::slice_last(h, 0, t_x);
    return nn::relu(h);
  }

  // y [n_y x T_y] -> Y [n_y x T_y]; the direct variant passes y through.
  Tensor eeg_encode(Tensor y) const {
    check(y.rank() == 2 && y.dim(0) == cfg_.n_y,
          "eeg_encode: expected [" + std::to_string(cfg_.n_y) + " x T], got " +
              shape_str(y.shape()));
    if (cfg_.eeg_variant == EegVariant::direct) return y;
    auto h = pre_conv_.forward(y);
    for (const auto& b : blocks_) h = b.forward(h);
    return h;
  }

  Tensor interpolate_reference(Tensor y, long t_x) const { return nn::interp_time(y, t_x); }

  // Spec'd fusion entry points (repeat 0); the full mask path is extract_mask.
  Tensor cross_attend(Tensor x, Tensor y_ref, long repeat = 0) const {
    check(cfg_.fusion_variant == FusionVariant::ca, "cross_attend: model built with direct fusion");
    return repeats_[static_cast<size_t>(repeat)].fuse(x, y_ref);
  }
  Tensor fuse_direct(Tensor x, Tensor y_ref, long repeat = 0) const {
    check(cfg_.fusion_variant == FusionVariant::direct, "fuse_direct: model built with CA fusion");
    return repeats_[static_cast<size_t>(repeat)].fuse(x, y_ref);
  }

  // X [n_x x T_x], Y [n_y x T_y] -> non-negative mask M [n_x x T_x].
  Tensor extract_mask(Tensor x, Tensor y) const {
    auto y_ref = interpolate_reference(y, x.dim(1));
    auto z = x;
    for (const auto& r : repeats_) z = r.forward(z, y_ref);
    return nn::relu(mask_head_.forward(z));
  }

  static Tensor apply_mask(Tensor x, Tensor m) { return nn::multiply(x, m); }

  // S [n_x x T_x] -> s [T_x * L/2]: per-frame linear map then overlap-add.
  Tensor decode(Tensor s) const {
    auto frames = dec_.forward(s);
    auto wave = nn::overlap_add(frames, cfg_.dec_hop());
    return nn::slice_last(wave, 0, s.dim(1) * cfg_.dec_hop());
  }

  Tensor forward(Tensor x, Tensor y) const {
    auto X = speech_encode(x);
    auto Y = eeg_encode(y);
    auto M = extract_mask(X, Y);
    auto S_ = apply_mask(X, M);
    return decode(S_);
  }

 private:
  ModelConfig cfg_;
  nn::ParamRegistry<S> reg_;
  nn::Conv1dLayer<S> enc_;
  nn::Conv1dLayer<S> pre_conv_;
  std::vector<net_detail::AdcBlock<S>> blocks_;
  std::vector<net_detail::ExtractorRepeat<S>> repeats_;
  nn::LinearLayer<S> mask_head_;
  nn::LinearLayer<S> dec_;
};

// ---------------------------------------------------------------------------
// checkpoints: weights.f32 + checkpoint.json (parameter index + model config)
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(ExtractionNet<S>& net, const fs::path& dir) {
  fs::create_directories(dir);
  json index;
  save_params(net.params(), dir / "weights.f32", index);
  json meta = {{"format", "espex-checkpoint-v1"},
               {"model_config", model_config_to_json(net.config())},
               {"params", index}};
  std::ofstream os(dir / "checkpoint.json");
  check(os.good(), "save_checkpoint: cannot write " + (dir / "checkpoint.json").string());
  os << meta.dump(2) << "\n";
}

template <typename S>
ExtractionNet<S> load_checkpoint(const fs::path& dir) {
  std::ifstream is(dir / "checkpoint.json");
  check(is.good(), "load_checkpoint: missing " + (dir / "checkpoint.json").string());
  const json meta = json::parse(is);
  ExtractionNet<S> net(model_config_from_json(meta.at("model_config")));
  load_params(net.params(), dir / "weights.f32", meta.at("params"));
  return net;
}

}  // namespace espex
