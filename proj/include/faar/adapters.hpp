#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "faar/ops.hpp"
#include "faar/random.hpp"

namespace faar {

// Pretrained linear layer: never receives gradient updates. Applied as
// W*x + b with x laid out {in, cols} and bias broadcast across columns.
struct FrozenLinear {
  Tensor W;  // {out, in}
  Tensor b;  // {out}
};

inline Tensor frozen_forward(const FrozenLinear& layer, const Tensor& x) {
  return add_bias(matmul(layer.W, x), layer.b);
}

enum class AdapterKind { shared, task };

inline std::string kind_str(AdapterKind k, int task) {
  return k == AdapterKind::shared ? std::string("shared")
                                  : "task-" + std::to_string(task);
}

// One low-rank adapter. Rank slot i couples row i of A with column i of B;
// slots at indices >= r_curr are permanently erased (zeroed, alive=0).
struct AdapterState {
  std::string id;
  std::size_t stage = 0;
  std::size_t block = 0;
  std::size_t site = 0;
  AdapterKind kind = AdapterKind::shared;
  int task = -1;  // valid when kind == task

  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t r_init = 0;
  std::size_t r_curr = 0;
  double alpha = 1.0;
  bool dora = true;

  Tensor A;  // {r_init, in}, down-projection
  Tensor B;  // {out, r_init}, up-projection
  Tensor m;  // {out}, magnitude (DoRA only)

  std::vector<double> ema;        // per-slot EMA importance, length r_init
  std::vector<std::uint8_t> alive;  // prefix pattern: alive[i] == (i < r_curr)

  std::size_t active_params() const {
    std::size_t p = r_curr * (in + out);
    if (dora) p += out;
    return p;
  }
};

// A = U(-1/sqrt(in), 1/sqrt(in)), B = 0 so the adapted layer equals the frozen
// layer at step 0; m = row norms of W so the DoRA direction term starts as an
// exact identity.
inline AdapterState make_adapter(std::string id, std::size_t stage,
                                 std::size_t block, std::size_t site,
                                 AdapterKind kind, int task,
                                 const FrozenLinear& layer, std::size_t r_init,
                                 double alpha, bool dora, Rng& rng) {
  check_arg(r_init >= 1, "make_adapter: r_init must be >= 1");
  AdapterState st;
  st.id = std::move(id);
  st.stage = stage;
  st.block = block;
  st.site = site;
  st.kind = kind;
  st.task = task;
  st.out = layer.W.dim(0);
  st.in = layer.W.dim(1);
  st.r_init = r_init;
  st.r_curr = r_init;
  st.alpha = alpha;
  st.dora = dora;

  const double bound = 1.0 / std::sqrt(static_cast<double>(st.in));
  std::vector<double> a(r_init * st.in);
  for (auto& v : a) v = rng.uniform(-bound, bound);
  st.A = Tensor::param({r_init, st.in}, std::move(a));
  st.B = Tensor::param({st.out, r_init}, std::vector<double>(st.out * r_init, 0.0));
  if (dora) {
    Tensor norms = rowwise_l2_norm(layer.W);
    st.m = Tensor::param({st.out}, norms.values());
  }
  st.ema.assign(r_init, 0.0);
  st.alive.assign(r_init, 1);
  return st;
}

// Binary prefix mask over rank slots: exactly the first b slots active.
struct PrefixMask {
  std::size_t b = 0;
  std::vector<double> m;  // length r_init, first b entries 1
};

inline PrefixMask make_prefix(std::size_t b, std::size_t r_init) {
  check_arg(b >= 1 && b <= r_init, "make_prefix: b out of range");
  PrefixMask mk;
  mk.b = b;
  mk.m.assign(r_init, 0.0);
  for (std::size_t i = 0; i < b; ++i) mk.m[i] = 1.0;
  return mk;
}

// b uniform on {1, ..., r_curr}.
inline PrefixMask sample_prefix(std::size_t r_curr, std::size_t r_init, Rng& rng) {
  check_arg(r_curr >= 1, "sample_prefix: r_curr must be >= 1");
  const std::size_t b = 1 + rng.uniform_index(r_curr);
  return make_prefix(b, r_init);
}

inline PrefixMask sample_prefix(const AdapterState& st, Rng& rng) {
  return sample_prefix(st.r_curr, st.r_init, rng);
}

inline PrefixMask full_prefix(const AdapterState& st) {
  return make_prefix(st.r_curr, st.r_init);
}

// (A_eff, B_eff) = (diag(m) A, B diag(m)): rows/columns of inactive slots are
// zeroed, with gradients blocked on them.
inline std::pair<Tensor, Tensor> masked_factors(const AdapterState& st,
                                                const PrefixMask& mask) {
  check_arg(mask.m.size() == st.r_init, "masked_factors: mask length mismatch");
  check_arg(mask.b <= st.r_curr, "masked_factors: mask exceeds current rank");
  Tensor mv = Tensor::from({st.r_init}, mask.m);
  return {scale_rows(st.A, mv), scale_cols(st.B, mv)};
}

// W x + b + alpha * B_eff A_eff x
inline Tensor lora_forward(const FrozenLinear& layer, const AdapterState& st,
                           const PrefixMask& mask, const Tensor& x) {
  check_arg(x.dim(0) == st.in, "lora_forward: input dimension mismatch");
  auto [a_eff, b_eff] = masked_factors(st, mask);
  Tensor base = frozen_forward(layer, x);
  Tensor low = matmul(b_eff, matmul(a_eff, x));
  return add(base, scale(low, st.alpha));
}

// m ⊙ rownormalize(W + alpha B_eff A_eff) x + b. Row norms below eps use eps
// in the denominator.
inline constexpr double kDoraNormEps = 1e-12;

inline Tensor dora_forward(const FrozenLinear& layer, const AdapterState& st,
                           const PrefixMask& mask, const Tensor& x) {
  check_arg(x.dim(0) == st.in, "dora_forward: input dimension mismatch");
  auto [a_eff, b_eff] = masked_factors(st, mask);
  Tensor v = add(layer.W, scale(matmul(b_eff, a_eff), st.alpha));
  Tensor norms = rowwise_l2_norm(v);
  Tensor ratio = div(st.m, clamp_min(norms, kDoraNormEps));
  Tensor directed = scale_rows(v, ratio);
  return add_bias(matmul(directed, x), layer.b);
}

inline Tensor adapted_forward(const FrozenLinear& layer, const AdapterState& st,
                              const PrefixMask& mask, const Tensor& x) {
  return st.dora ? dora_forward(layer, st, mask, x)
                 : lora_forward(layer, st, mask, x);
}

// ---------------------------------------------------------------------------
// placement
// ---------------------------------------------------------------------------

struct AdapterSlotDesc {
  std::size_t stage = 0;   // 0-based
  std::size_t block = 0;   // 0-based within stage
  std::size_t site = 0;    // adapted sublayer index within the block
  AdapterKind kind = AdapterKind::shared;
  int task = -1;
  std::string id;
};

struct LayoutSpec {
  std::size_t stages = 1;
  std::size_t blocks_per_stage = 1;
  std::size_t sites_per_block = 1;
  int tasks = 1;
};

// Blocks 1..N-1 of every stage carry one shared adapter per adapted sublayer;
// the last block of each stage carries one shared adapter plus one adapter per
// task, so the shared path continues while task paths branch off.
inline std::vector<AdapterSlotDesc> place_adapters(const LayoutSpec& spec) {
  check_arg(spec.tasks >= 1, "place_adapters: at least one task required");
  check_arg(spec.stages >= 1 && spec.blocks_per_stage >= 1 && spec.sites_per_block >= 1,
            "place_adapters: stages, blocks and sites must be >= 1");
  std::vector<AdapterSlotDesc> slots;
  for (std::size_t s = 0; s < spec.stages; ++s) {
    for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
      const bool last = (b + 1 == spec.blocks_per_stage);
      for (std::size_t l = 0; l < spec.sites_per_block; ++l) {
        const std::string base = "s" + std::to_string(s) + ".b" + std::to_string(b) +
                                 ".l" + std::to_string(l);
        slots.push_back({s, b, l, AdapterKind::shared, -1, base + ".shared"});
        if (last) {
          for (int t = 0; t < spec.tasks; ++t)
            slots.push_back({s, b, l, AdapterKind::task, t,
                             base + ".t" + std::to_string(t)});
        }
      }
    }
  }
  return slots;
}

}  // namespace faar
