#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "espex/common.hpp"
#include "espex/ops.hpp"

namespace espex {

// ---------------------------------------------------------------------------
// SI-SDR family. Values in dB.
//
// With alpha = <est,ref>/||ref||^2, num = ||alpha ref||^2, den = ||est -
// alpha ref||^2, the stabilized ratio is (num + eps*den)/(den + eps*num),
// eps = 1e-8. The symmetric floor keeps the value exactly scale-invariant
// and finite on both ends (perfect reconstruction -> +80 dB before the
// +60 dB cap, orthogonal estimate -> -80 dB). The training loss uses the
// same ratio, uncapped.
// ---------------------------------------------------------------------------

constexpr double kSiSdrEps = 1e-8;
constexpr double kSiSdrCapDb = 60.0;

namespace metric_detail {
struct SiSdrParts {
  double p, r, e;  // <est,ref>, ||ref||^2, ||est||^2
};

template <typename T>
SiSdrParts si_sdr_parts(const std::vector<T>& est, const std::vector<T>& ref) {
  check(est.size() == ref.size(), "si_sdr: length mismatch");
  check(!ref.empty(), "si_sdr: empty input");
  SiSdrParts parts{0.0, 0.0, 0.0};
  for (size_t i = 0; i < est.size(); ++i) {
    const double e = static_cast<double>(est[i]);
    const double r = static_cast<double>(ref[i]);
    parts.p += e * r;
    parts.r += r * r;
    parts.e += e * e;
  }
  check(parts.r > 0.0, "si_sdr: undefined reference (all-zero)");
  return parts;
}
}  // namespace metric_detail

template <typename T>
double si_sdr(const std::vector<T>& est, const std::vector<T>& ref) {
  const auto parts = metric_detail::si_sdr_parts(est, ref);
  if (parts.e == 0.0) return -kSiSdrCapDb;  // silent estimate
  const double num = parts.p * parts.p / parts.r;
  const double den = std::max(0.0, parts.e - num);
  const double v = 10.0 * std::log10((num + kSiSdrEps * den) / (den + kSiSdrEps * num));
  return std::min(v, kSiSdrCapDb);
}

template <typename T>
double si_sdri(const std::vector<T>& est, const std::vector<T>& mixture,
               const std::vector<T>& ref) {
  return si_sdr(est, ref) - si_sdr(mixture, ref);
}

// Negative SI-SDR on the autodiff graph; gradient flows to `est` only
// (the reference enters as plain values).
template <typename S>
nn::Tensor<S> si_sdr_loss(nn::Tensor<S> est, const std::vector<S>& ref) {
  check(static_cast<size_t>(est.numel()) == ref.size(), "si_sdr_loss: length mismatch");
  double p = 0.0, r = 0.0, e = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) {
    p += static_cast<double>(est.value()[i]) * static_cast<double>(ref[i]);
    r += static_cast<double>(ref[i]) * static_cast<double>(ref[i]);
    e += static_cast<double>(est.value()[i]) * static_cast<double>(est.value()[i]);
  }
  check(r > 0.0, "si_sdr_loss: undefined reference (all-zero)");
  check(e > 0.0, "si_sdr_loss: silent estimate");
  const double eps = kSiSdrEps;
  const double num = p * p / r;
  const double den = std::max(0.0, e - num);
  const double np = num + eps * den;
  const double dp = den + eps * num;
  const double loss = -10.0 / std::log(10.0) * (std::log(np) - std::log(dp));

  auto en = est.node();
  auto refc = std::make_shared<std::vector<S>>(ref);
  return nn::make_op<S>(
      {1}, {static_cast<S>(loss)}, {est}, [en, refc, p, r, np, dp, eps](nn::TensorNode<S>& o) {
        en->ensure_grad();
        const double c = -10.0 / std::log(10.0) * static_cast<double>(o.grad[0]);
        const double two_p_over_r = 2.0 * p / r;
        for (size_t i = 0; i < en->value.size(); ++i) {
          const double ei = static_cast<double>(en->value[i]);
          const double ri = static_cast<double>((*refc)[i]);
          const double dnum = two_p_over_r * ri;
          const double dden = 2.0 * ei - dnum;
          const double dnp = dnum + eps * dden;
          const double ddp = dden + eps * dnum;
          en->grad[i] += static_cast<S>(c * (dnp / np - ddp / dp));
        }
      });
}

// ---------------------------------------------------------------------------
// PIT utilities (two sources)
// ---------------------------------------------------------------------------

struct PitResult {
  bool swapped = false;      // false: est0<->ref0, est1<->ref1
  double mean_si_sdr = 0.0;  // of the best permutation
};

template <typename T>
PitResult pit_select(const std::vector<T>& est0, const std::vector<T>& est1,
                     const std::vector<T>& ref0, const std::vector<T>& ref1) {
  const double id = 0.5 * (si_sdr(est0, ref0) + si_sdr(est1, ref1));
  const double sw = 0.5 * (si_sdr(est0, ref1) + si_sdr(est1, ref0));
  if (sw > id) return {true, sw};
  return {false, id};
}

// Differentiable PIT loss: min over permutations of the mean pairwise
// si_sdr_loss; gradients flow through the winning branch.
template <typename S>
nn::Tensor<S> pit_loss(nn::Tensor<S> est0, nn::Tensor<S> est1, const std::vector<S>& ref0,
                       const std::vector<S>& ref1) {
  auto id = nn::scale(nn::add(si_sdr_loss(est0, ref0), si_sdr_loss(est1, ref1)), S(0.5));
  auto sw = nn::scale(nn::add(si_sdr_loss(est0, ref1), si_sdr_loss(est1, ref0)), S(0.5));
  return id.item() <= sw.item() ? id : sw;
}

// ---------------------------------------------------------------------------
// per-segment metric reports
// ---------------------------------------------------------------------------

struct MetricRow {
  int subject = 0;
  int trial = 0;
  int segment = 0;
  double si_sdr = 0.0;
  double si_sdri = 0.0;
  std::optional<double> stoi;
};

struct SummaryStat {
  double mean = 0.0, median = 0.0, stddev = 0.0;
};

inline SummaryStat summarize(std::vector<double> v) {
  SummaryStat s;
  if (v.empty()) return s;
  const double n = static_cast<double>(v.size());
  for (double x : v) s.mean += x;
  s.mean /= n;
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / n);
  std::sort(v.begin(), v.end());
  const size_t m = v.size() / 2;
  s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return s;
}

struct MetricsReport {
  std::vector<MetricRow> rows;

  bool has_stoi() const { return !rows.empty() && rows.front().stoi.has_value(); }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    check(os.good(), "metrics: cannot open " + path.string());
    os << "subject,trial,segment,si_sdr,si_sdri";
    if (has_stoi()) os << ",stoi";
    os << "\n";
    char buf[64];
    for (const auto& r : rows) {
      os << r.subject << "," << r.trial << "," << r.segment;
      std::snprintf(buf, sizeof(buf), ",%.9g,%.9g", r.si_sdr, r.si_sdri);
      os << buf;
      if (r.stoi) {
        std::snprintf(buf, sizeof(buf), ",%.9g", *r.stoi);
        os << buf;
      }
      os << "\n";
    }
  }

  nlohmann::json summary_json() const {
    auto block = [](const std::vector<double>& v) {
      const auto s = summarize(v);
      return nlohmann::json{{"mean", s.mean}, {"median", s.median}, {"std", s.stddev}};
    };
    auto section = [&](const std::vector<const MetricRow*>& rs) {
      std::vector<double> sdr, sdri, st;
      for (const auto* r : rs) {
        sdr.push_back(r->si_sdr);
        sdri.push_back(r->si_sdri);
        if (r->stoi) st.push_back(*r->stoi);
      }
      nlohmann::json j{{"count", rs.size()}, {"si_sdr", block(sdr)}, {"si_sdri", block(sdri)}};
      if (!st.empty()) j["stoi"] = block(st);
      return j;
    };
    std::vector<const MetricRow*> all;
    std::map<int, std::vector<const MetricRow*>> by_subject;
    for (const auto& r : rows) {
      all.push_back(&r);
      by_subject[r.subject].push_back(&r);
    }
    nlohmann::json j{{"overall", section(all)}};
    for (const auto& [subj, rs] : by_subject) j["per_subject"][std::to_string(subj)] = section(rs);
    return j;
  }

  void write_summary(const std::filesystem::path& path) const {
    std::ofstream os(path);
    check(os.good(), "metrics: cannot open " + path.string());
    os << summary_json().dump(2) << "\n";
  }
};

inline MetricsReport read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  check(is.good(), "metrics: cannot open " + path.string());
  MetricsReport rep;
  std::string line;
  std::getline(is, line);
  const bool with_stoi = line.find(",stoi") != std::string::npos;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    MetricRow r;
    double st = 0.0;
    if (with_stoi) {
      check(std::sscanf(line.c_str(), "%d,%d,%d,%lf,%lf,%lf", &r.subject, &r.trial, &r.segment,
                        &r.si_sdr, &r.si_sdri, &st) == 6,
            "metrics: malformed row: " + line);
      r.stoi = st;
    } else {
      check(std::sscanf(line.c_str(), "%d,%d,%d,%lf,%lf", &r.subject, &r.trial, &r.segment,
                        &r.si_sdr, &r.si_sdri) == 5,
            "metrics: malformed row: " + line);
    }
    rep.rows.push_back(r);
  }
  return rep;
}

}  // namespace espex
