#pragma once

#include <functional>
#include <unordered_set>

#include "espex/rng.hpp"
#include "espex/tensor.hpp"

namespace espex::nn {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  long worst_index = -1;
  long checked = 0;
};

// Central finite differences vs reverse-mode gradients, double precision.
// `loss_fn` rebuilds the graph from the current leaf values and returns a
// scalar. Each leaf is probed at every element, or a random subsample of
// `max_per_tensor` when larger. Relative error is guarded below by 1e-4 so
// near-zero gradients do not divide FD noise into false alarms.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  const std::vector<Parameter<double>*>& leaves,
                                  double h = 1e-5, long max_per_tensor = 50,
                                  uint64_t seed = 1234) {
  auto root = loss_fn();
  check(root.numel() == 1, "grad_check: graph output must be scalar");
  for (auto* p : leaves) {
    auto& g = p->tensor.grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  root.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto* p : leaves) analytic.push_back(p->tensor.grad());

  GradCheckReport rep;
  CounterRng rng(seed);
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li]->tensor.value();
    const long n = static_cast<long>(vals.size());
    std::vector<long> idx;
    if (n <= max_per_tensor) {
      idx.resize(static_cast<size_t>(n));
      for (long i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    } else {
      std::unordered_set<long> seen;
      while (static_cast<long>(seen.size()) < max_per_tensor) seen.insert(rng.uniform_int(n));
      idx.assign(seen.begin(), seen.end());
    }
    for (long i : idx) {
      const double keep = vals[static_cast<size_t>(i)];
      double fp, fm;
      {
        NoGrad ng;
        vals[static_cast<size_t>(i)] = keep + h;
        fp = loss_fn().item();
        vals[static_cast<size_t>(i)] = keep - h;
        fm = loss_fn().item();
      }
      vals[static_cast<size_t>(i)] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[li][static_cast<size_t>(i)];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
      const double rel = std::fabs(fd - an) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = leaves[li]->name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace espex::nn
