#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "faar/adapters.hpp"

namespace faar {

// Performance-driven rank shrinking: per-slot loss-sensitivity scores, EMA
// aggregation across batches, and epoch-end coverage-based rank reduction.
struct PdrsConfig {
  double rho_shared = 0.95;  // coverage criterion for shared adapters
  double rho_task = 0.95;    // coverage criterion for task adapters
  double beta = 0.9;         // EMA decay
  std::size_t rank_floor = 1;
  std::size_t shrink_interval = 1;  // epochs between shrink passes
  bool enabled = true;

  void validate() const {
    check_arg(rho_shared > 0.0 && rho_shared <= 1.0, "pdrs: rho_shared must be in (0,1]");
    check_arg(rho_task > 0.0 && rho_task <= 1.0, "pdrs: rho_task must be in (0,1]");
    check_arg(beta >= 0.0 && beta < 1.0, "pdrs: beta must be in [0,1)");
    check_arg(rank_floor >= 1, "pdrs: rank_floor must be >= 1");
    check_arg(shrink_interval >= 1, "pdrs: shrink_interval must be >= 1");
  }
};

// s_i = 1/2 (|<A_eff row i, dL/dA row i>| + |<B_eff col i, dL/dB col i>|) for
// the active slots i < b. Requires that backward has run for this step.
inline std::vector<double> slot_importance(const AdapterState& st,
                                           const PrefixMask& mask) {
  check_state(st.A.has_grad() && st.B.has_grad(),
              "slot_importance: adapter " + st.id +
                  " has no gradients; it was not part of the recorded graph");
  const auto& da = st.A.grad();
  const auto& db = st.B.grad();
  std::vector<double> s(mask.b, 0.0);
  for (std::size_t i = 0; i < mask.b; ++i) {
    double dot_a = 0.0;
    for (std::size_t k = 0; k < st.in; ++k)
      dot_a += st.A.data()[i * st.in + k] * da[i * st.in + k];
    double dot_b = 0.0;
    for (std::size_t j = 0; j < st.out; ++j)
      dot_b += st.B.data()[j * st.r_init + i] * db[j * st.r_init + i];
    s[i] = 0.5 * (std::fabs(dot_a) + std::fabs(dot_b));
  }
  return s;
}

// ema[i] <- beta*ema[i] + (1-beta)*s[i] for the active prefix; inactive slots
// keep their previous value.
inline void ema_update(std::vector<double>& ema, const std::vector<double>& s,
                       double beta, std::size_t active_count) {
  check_arg(beta >= 0.0 && beta < 1.0, "ema_update: beta must be in [0,1)");
  check_arg(active_count <= s.size() && active_count <= ema.size(),
            "ema_update: active count out of range");
  for (std::size_t i = 0; i < active_count; ++i)
    ema[i] = beta * ema[i] + (1.0 - beta) * s[i];
}

// Minimal k such that the top-k sorted EMA scores cover a fraction rho of the
// total, clamped to [floor, n]. Zero total evidence keeps the rank unchanged.
inline std::size_t coverage_select(const double* ema, std::size_t n, double rho,
                                   std::size_t floor) {
  check_arg(n >= 1, "coverage_select: empty score vector");
  std::vector<double> sorted(ema, ema + n);
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<double>());
  double total = 0.0;
  for (double v : sorted) total += v;
  if (total <= 0.0) return n;
  std::size_t k = n;
  double cum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum += sorted[i];
    if (cum / total >= rho) {
      k = i + 1;
      break;
    }
  }
  k = std::max(k, std::min(floor, n));
  return std::min(k, n);
}

inline std::size_t coverage_select(const std::vector<double>& ema, double rho,
                                   std::size_t floor) {
  return coverage_select(ema.data(), ema.size(), rho, floor);
}

struct ShrinkRow {
  std::string adapter_id;
  std::size_t stage = 0;
  std::string kind;
  std::size_t r_before = 0;
  std::size_t r_after = 0;
  std::size_t params_freed = 0;
};

// Rows for adapters whose rank changed this pass.
struct ShrinkReport {
  std::vector<ShrinkRow> changed;
  std::size_t params_freed_total = 0;
  bool empty() const { return changed.empty(); }
};

// Optional access to per-parameter optimizer state so momentum follows the
// slot permutation. Returns nullptr when the tensor has no attached state.
using VelocityLookup = std::function<double*(const Tensor&)>;

namespace detail {

// Applies a slot reordering to one adapter: the kept slots (rows of A, columns
// of B, EMA entries) move to prefix positions in the given order, everything
// past `kept` is zeroed. Reordering of rank-1 terms leaves B_eff*A_eff over
// kept slots unchanged up to summation order.
inline void permute_slots(AdapterState& st, const std::vector<std::size_t>& order,
                          std::size_t kept, double* vel_a, double* vel_b) {
  const std::size_t r = st.r_init;
  // rows of A
  std::vector<double> tmp_a(st.A.values());
  std::vector<double> tmp_va;
  if (vel_a != nullptr) tmp_va.assign(vel_a, vel_a + r * st.in);
  for (std::size_t p = 0; p < r; ++p) {
    double* dst = st.A.data() + p * st.in;
    if (p < kept) {
      const double* src = tmp_a.data() + order[p] * st.in;
      std::copy(src, src + st.in, dst);
      if (vel_a != nullptr)
        std::copy(tmp_va.data() + order[p] * st.in,
                  tmp_va.data() + (order[p] + 1) * st.in, vel_a + p * st.in);
    } else {
      std::fill(dst, dst + st.in, 0.0);
      if (vel_a != nullptr) std::fill(vel_a + p * st.in, vel_a + (p + 1) * st.in, 0.0);
    }
  }
  // columns of B
  std::vector<double> tmp_b(st.B.values());
  std::vector<double> tmp_vb;
  if (vel_b != nullptr) tmp_vb.assign(vel_b, vel_b + st.out * r);
  for (std::size_t j = 0; j < st.out; ++j) {
    for (std::size_t p = 0; p < r; ++p) {
      const double v = p < kept ? tmp_b[j * r + order[p]] : 0.0;
      st.B.data()[j * r + p] = v;
      if (vel_b != nullptr) vel_b[j * r + p] = p < kept ? tmp_vb[j * r + order[p]] : 0.0;
    }
  }
  // EMA trails its slot; erased slots carry no state.
  std::vector<double> tmp_e(st.ema);
  for (std::size_t p = 0; p < r; ++p)
    st.ema[p] = p < kept ? tmp_e[order[p]] : 0.0;
  for (std::size_t p = 0; p < r; ++p) st.alive[p] = p < kept ? 1 : 0;
  st.r_curr = kept;
}

}  // namespace detail

// Epoch-end shrink: for every adapter, pick K by coverage over the sorted EMA
// scores, move the K highest-EMA slots into the prefix (descending EMA order,
// stable on ties) and erase the rest from the optimization.
inline ShrinkReport shrink_epoch(std::vector<AdapterState>& adapters,
                                 const PdrsConfig& cfg,
                                 const VelocityLookup& velocity = nullptr) {
  cfg.validate();
  ShrinkReport report;
  for (auto& st : adapters) {
    const std::size_t n = st.r_curr;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += st.ema[i];
    if (total <= 0.0) continue;  // no evidence, no shrink

    const double rho = st.kind == AdapterKind::shared ? cfg.rho_shared : cfg.rho_task;
    const std::size_t k = coverage_select(st.ema.data(), n, rho, cfg.rank_floor);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return st.ema[a] > st.ema[b];
    });

    double* vel_a = velocity ? velocity(st.A) : nullptr;
    double* vel_b = velocity ? velocity(st.B) : nullptr;
    detail::permute_slots(st, order, k, vel_a, vel_b);

    if (k != n) {
      ShrinkRow row;
      row.adapter_id = st.id;
      row.stage = st.stage;
      row.kind = kind_str(st.kind, st.task);
      row.r_before = n;
      row.r_after = k;
      row.params_freed = (n - k) * (st.in + st.out);
      report.params_freed_total += row.params_freed;
      report.changed.push_back(std::move(row));
    }
  }
  return report;
}

}  // namespace faar
