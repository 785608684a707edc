#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "faar/adapters.hpp"
#include "faar/bench.hpp"
#include "faar/binio.hpp"
#include "faar/optim.hpp"

namespace faar {

// Desk-scale hierarchical encoder standing in for a pretrained Swin-style
// trunk: patch embedding, then stages of token-mixing + MLP blocks with
// residual connections. Resolution halves and channel width doubles per stage.
// The trunk is fitted briefly on a seeded reconstruction objective and then
// frozen; only adapter (and decoder) parameters train afterwards.
struct BackboneSpec {
  std::size_t stages = 3;
  std::size_t blocks_per_stage = 2;
  std::size_t base_channels = 16;
  std::size_t patch_size = 4;
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::uint64_t seed = 7;
  std::size_t pretrain_steps = 40;
  std::size_t pretrain_batch = 4;
  double pretrain_lr = 0.05;

  void validate() const {
    check_arg(stages >= 1 && blocks_per_stage >= 1, "backbone: stages and blocks must be >= 1");
    check_arg(base_channels >= 1 && patch_size >= 1, "backbone: channels and patch must be >= 1");
    const std::size_t div = patch_size << (stages - 1);
    check_arg(input_h % div == 0 && input_w % div == 0,
              "backbone: input size must be divisible by patch_size * 2^(stages-1)");
  }

  std::size_t channels_at(std::size_t stage) const {
    return base_channels << stage;
  }
  std::size_t grid_h_at(std::size_t stage) const {
    return (input_h / patch_size) >> stage;
  }
  std::size_t grid_w_at(std::size_t stage) const {
    return (input_w / patch_size) >> stage;
  }
  std::size_t tokens_at(std::size_t stage) const {
    return grid_h_at(stage) * grid_w_at(stage);
  }
  std::size_t mlp_hidden_at(std::size_t stage) const {
    return 2 * channels_at(stage);
  }
};

// One block: a linear map over the token axis (mixer) and a two-layer MLP over
// channels, both residual. The three linear maps are the adapter sites.
struct Block {
  FrozenLinear mix;   // {N, N}
  FrozenLinear mlp1;  // {hidden, C}
  FrozenLinear mlp2;  // {C, hidden}
};

inline constexpr std::size_t kSitesPerBlock = 3;  // mix, mlp1, mlp2

struct StageLayers {
  bool has_down = false;
  FrozenLinear down;  // {C_s, 4*C_{s-1}}
  std::vector<Block> blocks;
};

struct Backbone {
  BackboneSpec spec;
  int tasks = 1;
  FrozenLinear embed;  // {C_0, patch^2 * 3}
  std::vector<StageLayers> stages;
  std::vector<AdapterState> adapters;  // layout order

  // (stage, block, site, task or -1 for shared) -> index into adapters
  std::map<std::tuple<std::size_t, std::size_t, std::size_t, int>, std::size_t> index;

  const AdapterState& adapter_at(std::size_t s, std::size_t b, std::size_t l,
                                 int task) const {
    auto it = index.find({s, b, l, task});
    check_state(it != index.end(), "backbone: no adapter at the requested site");
    return adapters[it->second];
  }

  std::vector<Tensor> trunk_tensors() {
    std::vector<Tensor> out{embed.W, embed.b};
    for (auto& st : stages) {
      if (st.has_down) {
        out.push_back(st.down.W);
        out.push_back(st.down.b);
      }
      for (auto& blk : st.blocks) {
        out.push_back(blk.mix.W);
        out.push_back(blk.mix.b);
        out.push_back(blk.mlp1.W);
        out.push_back(blk.mlp1.b);
        out.push_back(blk.mlp2.W);
        out.push_back(blk.mlp2.b);
      }
    }
    return out;
  }

  std::size_t trunk_param_count() {
    std::size_t n = 0;
    for (auto& t : trunk_tensors()) n += t.numel();
    return n;
  }
};

namespace detail {

inline FrozenLinear random_linear(std::size_t out, std::size_t in, Rng& rng) {
  std::vector<double> w(out * in);
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : w) v = rng.normal(0.0, s);
  return {Tensor::from({out, in}, std::move(w)),
          Tensor::from({out}, std::vector<double>(out, 0.0))};
}

// Extracts non-overlapping patches: image {3,H,W} -> {patch^2*3, N} with
// columns in row-major patch-grid order and per-column layout (c, u, v).
inline Tensor patchify(const Tensor& image, std::size_t patch) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t d = patch * patch * 3, n = gh * gw;
  std::vector<double> out(d * n);
  for (std::size_t pi = 0; pi < gh; ++pi)
    for (std::size_t pj = 0; pj < gw; ++pj) {
      const std::size_t col = pi * gw + pj;
      std::size_t row = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t u = 0; u < patch; ++u)
          for (std::size_t v = 0; v < patch; ++v) {
            out[row * n + col] =
                image.data()[(c * h + pi * patch + u) * w + pj * patch + v];
            ++row;
          }
    }
  return Tensor::from({d, n}, std::move(out));
}

inline Tensor tokens_to_chw(const Tensor& tokens, std::size_t gh, std::size_t gw) {
  // {N, C} -> {C, gh, gw}
  return reshape(transpose(tokens), {tokens.dim(1), gh, gw});
}

inline std::uint64_t spec_hash(const BackboneSpec& s) {
  std::string key = std::to_string(s.stages) + "/" + std::to_string(s.blocks_per_stage) +
                    "/" + std::to_string(s.base_channels) + "/" +
                    std::to_string(s.patch_size) + "/" + std::to_string(s.input_h) + "x" +
                    std::to_string(s.input_w) + "/" + std::to_string(s.seed) + "/" +
                    std::to_string(s.pretrain_steps) + "/" +
                    std::to_string(s.pretrain_batch) + "/" + fmt_g17(s.pretrain_lr);
  return fnv1a(key);
}

}  // namespace detail

// Block forward on a {N, C} token matrix. The mask lookup supplies the prefix
// mask for a given adapter; a null adapter pointer means the plain frozen path
// (used during trunk pretraining).
namespace detail {

inline Tensor linear_maybe_adapted(const FrozenLinear& layer, const AdapterState* ad,
                                   const PrefixMask* mask, const Tensor& x) {
  if (ad == nullptr) return frozen_forward(layer, x);
  check_state(mask != nullptr, "backbone: missing prefix mask for adapter " + ad->id);
  return adapted_forward(layer, *ad, *mask, x);
}

struct BlockAdapters {
  const AdapterState* ad[kSitesPerBlock] = {nullptr, nullptr, nullptr};
  const PrefixMask* mask[kSitesPerBlock] = {nullptr, nullptr, nullptr};
};

inline Tensor block_forward(const Block& blk, const BlockAdapters& ba, const Tensor& x) {
  // token mixing, residual
  Tensor mixed = linear_maybe_adapted(blk.mix, ba.ad[0], ba.mask[0], x);
  Tensor h = add(x, mixed);
  // channel MLP, residual
  Tensor ht = transpose(h);
  Tensor hidden = tanh_t(linear_maybe_adapted(blk.mlp1, ba.ad[1], ba.mask[1], ht));
  Tensor back = linear_maybe_adapted(blk.mlp2, ba.ad[2], ba.mask[2], hidden);
  return add(h, transpose(back));
}

}  // namespace detail

// Per-stage feature pyramids: the shared trunk plus one branch per task.
struct MultiTaskFeatures {
  std::vector<Tensor> shared;             // per stage, {C_s, H_s, W_s}
  std::vector<std::vector<Tensor>> task;  // [task][stage]
};

// Shared adapters run in every block; the last block of each stage forks: the
// shared path continues into the next stage while each task path applies its
// own adapters to produce that stage's task representation.
inline MultiTaskFeatures forward_multitask(const Backbone& bb, const Tensor& image,
                                           const std::vector<PrefixMask>& masks) {
  check_arg(image.rank() == 3 && image.dim(0) == 3 &&
                image.dim(1) == bb.spec.input_h && image.dim(2) == bb.spec.input_w,
            "forward_multitask: image shape mismatch");
  check_state(masks.size() == bb.adapters.size(),
              "forward_multitask: expected one prefix mask per adapter");

  auto block_adapters = [&](std::size_t s, std::size_t b, int task) {
    detail::BlockAdapters ba;
    for (std::size_t l = 0; l < kSitesPerBlock; ++l) {
      auto it = bb.index.find({s, b, l, task});
      check_state(it != bb.index.end(), "forward_multitask: missing adapter site");
      ba.ad[l] = &bb.adapters[it->second];
      ba.mask[l] = &masks[it->second];
    }
    return ba;
  };

  MultiTaskFeatures feats;
  feats.shared.resize(bb.spec.stages);
  feats.task.assign(static_cast<std::size_t>(bb.tasks), {});
  for (auto& tf : feats.task) tf.resize(bb.spec.stages);

  Tensor patches = detail::patchify(image, bb.spec.patch_size);
  Tensor x = transpose(frozen_forward(bb.embed, patches));  // {N, C}
  for (std::size_t s = 0; s < bb.spec.stages; ++s) {
    const auto& stage = bb.stages[s];
    if (stage.has_down) {
      Tensor merged = merge_tokens_2x2(x, bb.spec.grid_h_at(s - 1), bb.spec.grid_w_at(s - 1));
      x = transpose(frozen_forward(stage.down, transpose(merged)));
    }
    const std::size_t last = stage.blocks.size() - 1;
    for (std::size_t b = 0; b < last; ++b)
      x = detail::block_forward(stage.blocks[b], block_adapters(s, b, -1), x);

    const Tensor fork_input = x;
    x = detail::block_forward(stage.blocks[last], block_adapters(s, last, -1), fork_input);
    feats.shared[s] = detail::tokens_to_chw(x, bb.spec.grid_h_at(s), bb.spec.grid_w_at(s));
    for (int t = 0; t < bb.tasks; ++t) {
      Tensor xt = detail::block_forward(stage.blocks[last], block_adapters(s, last, t),
                                        fork_input);
      feats.task[static_cast<std::size_t>(t)][s] =
          detail::tokens_to_chw(xt, bb.spec.grid_h_at(s), bb.spec.grid_w_at(s));
    }
  }
  return feats;
}

// Plain trunk forward (no adapters); used by pretraining.
inline Tensor trunk_forward_tokens(const Backbone& bb, const Tensor& image) {
  Tensor patches = detail::patchify(image, bb.spec.patch_size);
  Tensor x = transpose(frozen_forward(bb.embed, patches));
  for (std::size_t s = 0; s < bb.spec.stages; ++s) {
    const auto& stage = bb.stages[s];
    if (stage.has_down) {
      Tensor merged = merge_tokens_2x2(x, bb.spec.grid_h_at(s - 1), bb.spec.grid_w_at(s - 1));
      x = transpose(frozen_forward(stage.down, transpose(merged)));
    }
    for (const auto& blk : stage.blocks)
      x = detail::block_forward(blk, detail::BlockAdapters{}, x);
  }
  return x;  // {N_last, C_last}
}

namespace detail {

// Reconstruction target for pretraining: per final-stage token, the 2x2
// average-pooled RGB of its image region -> 12 values per token.
inline Tensor recon_target(const Tensor& image, const BackboneSpec& spec) {
  const std::size_t s = spec.stages - 1;
  const std::size_t gh = spec.grid_h_at(s), gw = spec.grid_w_at(s);
  const std::size_t region_h = spec.input_h / gh, region_w = spec.input_w / gw;
  const std::size_t n = gh * gw;
  std::vector<double> target(n * 12, 0.0);
  for (std::size_t ti = 0; ti < gh; ++ti)
    for (std::size_t tj = 0; tj < gw; ++tj)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t py = 0; py < 2; ++py)
          for (std::size_t px = 0; px < 2; ++px) {
            double acc = 0.0;
            std::size_t cnt = 0;
            for (std::size_t y = py * region_h / 2; y < (py + 1) * region_h / 2; ++y)
              for (std::size_t x = px * region_w / 2; x < (px + 1) * region_w / 2; ++x) {
                acc += image.data()[(c * spec.input_h + ti * region_h + y) * spec.input_w +
                                    tj * region_w + x];
                ++cnt;
              }
            target[(ti * gw + tj) * 12 + (c * 4 + py * 2 + px)] =
                acc / static_cast<double>(cnt);
          }
  return Tensor::from({n, 12}, std::move(target));
}

inline void save_trunk(const std::string& path, Backbone& bb) {
  BinWriter w(path);
  w.magic("FAARTRK1");
  w.pod<std::uint64_t>(spec_hash(bb.spec));
  auto trunk = bb.trunk_tensors();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(trunk.size()));
  for (auto& t : trunk) w.tensor(t);
  w.close(path);
}

inline bool load_trunk(const std::string& path, Backbone& bb) {
  BinReader r(path);
  if (!r.magic("FAARTRK1")) return false;
  if (r.pod<std::uint64_t>() != spec_hash(bb.spec)) return false;
  auto trunk = bb.trunk_tensors();
  if (r.pod<std::uint32_t>() != trunk.size()) return false;
  for (auto& t : trunk) r.tensor_into(t);
  return true;
}

// Short seeded fit of the whole trunk on patch reconstruction so frozen
// features carry image structure; afterwards everything is frozen.
inline void pretrain_trunk(Backbone& bb) {
  const BackboneSpec& spec = bb.spec;
  if (spec.pretrain_steps == 0) return;
  auto trunk = bb.trunk_tensors();
  for (auto& t : trunk) t.set_requires_grad(true);

  Rng rng(derive_seed(spec.seed, 0xCAFE));
  const std::size_t c_last = spec.channels_at(spec.stages - 1);
  std::vector<double> head_w(12 * c_last);
  const double hs = 1.0 / std::sqrt(static_cast<double>(c_last));
  for (auto& v : head_w) v = rng.normal(0.0, hs);
  Tensor head = Tensor::param({12, c_last}, std::move(head_w));

  std::vector<Tensor> params = trunk;
  params.push_back(head);
  SgdMomentum opt(params, spec.pretrain_lr, 0.9);

  SceneConfig scfg;
  scfg.height = spec.input_h;
  scfg.width = spec.input_w;
  const std::uint64_t data_seed = derive_seed(spec.seed, 0xBEEF);
  for (std::size_t step = 0; step < spec.pretrain_steps; ++step) {
    opt.zero_grad();
    for (std::size_t i = 0; i < spec.pretrain_batch; ++i) {
      const Scene sc = scene_at(data_seed, step * spec.pretrain_batch + i, scfg);
      Tape tape;
      Tensor tokens = trunk_forward_tokens(bb, image_tensor(sc));
      Tensor pred = transpose(matmul(head, transpose(tokens)));  // {N, 12}
      Tensor diff = sub(pred, recon_target(image_tensor(sc), spec));
      Tensor loss = scale(mean(mul(diff, diff)),
                          1.0 / static_cast<double>(spec.pretrain_batch));
      tape.backward(loss);
    }
    opt.step();
  }
  for (auto& t : trunk) {
    t.set_requires_grad(false);
    t.zero_grad();
  }
}

}  // namespace detail

// Builds the trunk (seeded init + cached reconstruction pretraining + freeze)
// and attaches one adapter per layout slot. Adapter initialization draws from
// `init_rng` in layout order.
inline Backbone build_backbone(const BackboneSpec& spec, int tasks,
                               std::size_t r_init, double adapter_alpha,
                               bool dora, Rng& init_rng,
                               const std::string& trunk_cache = "") {
  spec.validate();
  check_arg(tasks >= 1, "build_backbone: at least one task required");
  check_arg(r_init >= 1, "build_backbone: r_init must be >= 1");

  Backbone bb;
  bb.spec = spec;
  bb.tasks = tasks;

  Rng trunk_rng(derive_seed(spec.seed, 0xF00D));
  bb.embed = detail::random_linear(spec.base_channels, spec.patch_size * spec.patch_size * 3,
                                   trunk_rng);
  bb.stages.resize(spec.stages);
  for (std::size_t s = 0; s < spec.stages; ++s) {
    auto& stage = bb.stages[s];
    if (s > 0) {
      stage.has_down = true;
      stage.down = detail::random_linear(spec.channels_at(s), 4 * spec.channels_at(s - 1),
                                         trunk_rng);
    }
    stage.blocks.resize(spec.blocks_per_stage);
    for (auto& blk : stage.blocks) {
      blk.mix = detail::random_linear(spec.tokens_at(s), spec.tokens_at(s), trunk_rng);
      blk.mlp1 = detail::random_linear(spec.mlp_hidden_at(s), spec.channels_at(s), trunk_rng);
      blk.mlp2 = detail::random_linear(spec.channels_at(s), spec.mlp_hidden_at(s), trunk_rng);
    }
  }

  bool loaded = false;
  if (!trunk_cache.empty() && std::filesystem::exists(trunk_cache))
    loaded = detail::load_trunk(trunk_cache, bb);
  if (!loaded) {
    detail::pretrain_trunk(bb);
    if (!trunk_cache.empty()) detail::save_trunk(trunk_cache, bb);
  }

  const LayoutSpec layout{spec.stages, spec.blocks_per_stage, kSitesPerBlock, tasks};
  for (const auto& slot : place_adapters(layout)) {
    const Block& blk = bb.stages[slot.stage].blocks[slot.block];
    const FrozenLinear& layer =
        slot.site == 0 ? blk.mix : (slot.site == 1 ? blk.mlp1 : blk.mlp2);
    bb.adapters.push_back(make_adapter(slot.id, slot.stage, slot.block, slot.site,
                                       slot.kind, slot.task, layer, r_init,
                                       adapter_alpha, dora, init_rng));
    bb.index[{slot.stage, slot.block, slot.site,
              slot.kind == AdapterKind::shared ? -1 : slot.task}] =
        bb.adapters.size() - 1;
  }
  return bb;
}

}  // namespace faar
