#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "faar/ops.hpp"
#include "faar/random.hpp"

namespace faar {

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 5;  // including background class 0
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 6;
  double noise = 0.02;

  void validate() const {
    check_arg(height >= 4 && width >= 4, "scene: degenerate resolution");
    check_arg(classes >= 2, "scene: need at least background + one class");
    check_arg(min_shapes <= max_shapes, "scene: min_shapes > max_shapes");
    check_arg(noise >= 0.0 && noise < 0.5, "scene: noise out of range");
  }
};

// Layered random shapes over a background gradient. Labels are painter-order
// class ids, depth is analytic by layer order (nearer shapes are closer to 0),
// edges are the label-boundary pixels (4-neighborhood morphological gradient).
struct Scene {
  std::size_t h = 0, w = 0;
  std::vector<double> image;        // {3, h, w}, values in [0,1]
  std::vector<int> seg;             // {h, w}, class ids in [0, classes)
  std::vector<double> depth;        // {h, w}, values in (0, 1]
  std::vector<std::uint8_t> edges;  // {h, w}, 0/1
};

namespace detail {

inline std::array<double, 3> class_color(std::size_t cls) {
  // Fixed palette; classes beyond the table get a deterministic hue.
  static const std::array<std::array<double, 3>, 8> palette = {{
      {0.05, 0.10, 0.20},  // background tint (unused for shapes)
      {0.85, 0.20, 0.15},
      {0.15, 0.75, 0.25},
      {0.20, 0.30, 0.90},
      {0.90, 0.80, 0.10},
      {0.80, 0.15, 0.80},
      {0.10, 0.80, 0.80},
      {0.95, 0.55, 0.10},
  }};
  if (cls < palette.size()) return palette[cls];
  const double t = static_cast<double>(cls % 13) / 13.0;
  return {0.3 + 0.6 * t, 0.9 - 0.7 * t, 0.2 + 0.5 * std::fmod(3.7 * t, 1.0)};
}

}  // namespace detail

inline Scene generate_scene(Rng& rng, const SceneConfig& cfg) {
  cfg.validate();
  Scene sc;
  sc.h = cfg.height;
  sc.w = cfg.width;
  const std::size_t hw = sc.h * sc.w;
  sc.image.assign(3 * hw, 0.0);
  sc.seg.assign(hw, 0);
  sc.depth.assign(hw, 1.0);
  sc.edges.assign(hw, 0);

  // background gradient
  const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
  std::array<double, 3> bg0{rng.uniform(0.15, 0.45), rng.uniform(0.15, 0.45),
                            rng.uniform(0.15, 0.45)};
  std::array<double, 3> bg1{rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65),
                            rng.uniform(0.35, 0.65)};
  for (std::size_t y = 0; y < sc.h; ++y)
    for (std::size_t x = 0; x < sc.w; ++x) {
      const double ty = static_cast<double>(y) / static_cast<double>(sc.h - 1);
      const double tx = static_cast<double>(x) / static_cast<double>(sc.w - 1);
      const double t = std::clamp(0.5 + 0.5 * (gx * (tx - 0.5) + gy * (ty - 0.5)), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c)
        sc.image[c * hw + y * sc.w + x] = bg0[c] + (bg1[c] - bg0[c]) * t;
    }

  // layered shapes, painted back to front
  const std::size_t n_shapes =
      cfg.min_shapes +
      (cfg.max_shapes > cfg.min_shapes
           ? rng.uniform_index(cfg.max_shapes - cfg.min_shapes + 1)
           : 0);
  for (std::size_t i = 0; i < n_shapes; ++i) {
    const int cls = 1 + static_cast<int>(rng.uniform_index(cfg.classes - 1));
    const bool ellipse = rng.bernoulli(0.5);
    const double cy = rng.uniform(0.1, 0.9) * static_cast<double>(sc.h);
    const double cx = rng.uniform(0.1, 0.9) * static_cast<double>(sc.w);
    const double ry = rng.uniform(0.08, 0.28) * static_cast<double>(sc.h);
    const double rx = rng.uniform(0.08, 0.28) * static_cast<double>(sc.w);
    // nearer shapes (painted later) get smaller depth
    const double d = 0.95 - 0.75 * static_cast<double>(i + 1) / static_cast<double>(n_shapes);
    const double shade = std::clamp(1.15 - 0.8 * d, 0.0, 1.3);
    const auto color = detail::class_color(static_cast<std::size_t>(cls));
    for (std::size_t y = 0; y < sc.h; ++y)
      for (std::size_t x = 0; x < sc.w; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry;
        const double dx = (static_cast<double>(x) - cx) / rx;
        const bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                    : (std::fabs(dy) <= 1.0 && std::fabs(dx) <= 1.0);
        if (!inside) continue;
        sc.seg[y * sc.w + x] = cls;
        sc.depth[y * sc.w + x] = d;
        for (std::size_t c = 0; c < 3; ++c)
          sc.image[c * hw + y * sc.w + x] = std::clamp(color[c] * shade, 0.0, 1.0);
      }
  }

  if (cfg.noise > 0.0)
    for (auto& v : sc.image)
      v = std::clamp(v + rng.uniform(-cfg.noise, cfg.noise), 0.0, 1.0);

  // edges: pixel with any 4-neighbor of a different label
  for (std::size_t y = 0; y < sc.h; ++y)
    for (std::size_t x = 0; x < sc.w; ++x) {
      const int c = sc.seg[y * sc.w + x];
      const bool boundary =
          (y > 0 && sc.seg[(y - 1) * sc.w + x] != c) ||
          (y + 1 < sc.h && sc.seg[(y + 1) * sc.w + x] != c) ||
          (x > 0 && sc.seg[y * sc.w + x - 1] != c) ||
          (x + 1 < sc.w && sc.seg[y * sc.w + x + 1] != c);
      if (boundary) sc.edges[y * sc.w + x] = 1;
    }
  return sc;
}

// Scenes are addressed by (dataset seed, index) so generation is stateless and
// parallel-safe.
inline Scene scene_at(std::uint64_t dataset_seed, std::size_t index,
                      const SceneConfig& cfg) {
  Rng rng(derive_seed(dataset_seed, index));
  return generate_scene(rng, cfg);
}

inline Tensor image_tensor(const Scene& sc) {
  return Tensor::from({3, sc.h, sc.w}, sc.image);
}

// ---------------------------------------------------------------------------
// tasks and losses
// ---------------------------------------------------------------------------

enum class TaskKind { segmentation, regression_l1, balanced_binary };
enum class MetricKind { miou_higher_better, rmse_lower_better };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::segmentation;
  double weight = 1.0;
  std::size_t classes = 0;  // segmentation only
  MetricKind metric = MetricKind::miou_higher_better;
  std::optional<double> reference;  // single-task reference metric for delta_m

  std::size_t out_channels() const {
    return kind == TaskKind::segmentation ? classes : 1;
  }
  void validate() const {
    check_arg(weight > 0.0, "task " + name + ": weight must be > 0");
    if (kind == TaskKind::segmentation) {
      check_arg(classes >= 2, "task " + name + ": segmentation needs >= 2 classes");
      check_arg(metric == MetricKind::miou_higher_better,
                "task " + name + ": segmentation uses mIoU");
    }
    if (kind == TaskKind::regression_l1)
      check_arg(metric == MetricKind::rmse_lower_better,
                "task " + name + ": regression uses rmse");
    if (kind == TaskKind::balanced_binary)
      check_arg(metric == MetricKind::miou_higher_better,
                "task " + name + ": binary maps use mIoU");
  }
};

// Class weights for the balanced binary cross-entropy, inversely proportional
// to class pixel frequency over the batch: w_c = N/(2 n_c). Falls back to
// plain BCE weights when a class is absent from the batch.
struct BalancedWeights {
  double w_pos = 1.0;
  double w_neg = 1.0;
};

inline BalancedWeights balanced_weights(const std::vector<const Scene*>& batch) {
  std::size_t pos = 0, total = 0;
  for (const Scene* sc : batch) {
    for (auto e : sc->edges) pos += e;
    total += sc->edges.size();
  }
  if (pos == 0 || pos == total) return {1.0, 1.0};
  const double n = static_cast<double>(total);
  return {n / (2.0 * static_cast<double>(pos)),
          n / (2.0 * static_cast<double>(total - pos))};
}

namespace detail {

inline Tensor seg_cross_entropy(const Tensor& logits, const Scene& sc,
                                std::size_t classes) {
  check_arg(logits.rank() == 3 && logits.dim(0) == classes &&
                logits.dim(1) == sc.h && logits.dim(2) == sc.w,
            "segmentation loss: prediction shape mismatch");
  const std::size_t hw = sc.h * sc.w;
  Tensor logp = log_softmax_channels(logits);
  std::vector<double> onehot(classes * hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i)
    onehot[static_cast<std::size_t>(sc.seg[i]) * hw + i] = 1.0;
  Tensor picked = mul(logp, Tensor::from(logits.shape(), std::move(onehot)));
  return scale(sum(picked), -1.0 / static_cast<double>(hw));
}

inline Tensor l1_loss(const Tensor& pred, const std::vector<double>& target,
                      std::size_t h, std::size_t w) {
  check_arg(pred.rank() == 3 && pred.dim(0) == 1 && pred.dim(1) == h && pred.dim(2) == w,
            "regression loss: prediction shape mismatch");
  Tensor t = Tensor::from({1, h, w}, target);
  return mean(abs_t(sub(pred, t)));
}

// -[w(y) (y log s + (1-y) log(1-s))] via the stable softplus identity
// loss_i = w_i (softplus(z_i) - y_i z_i).
inline Tensor balanced_bce(const Tensor& logits, const Scene& sc,
                           const BalancedWeights& bw) {
  check_arg(logits.rank() == 3 && logits.dim(0) == 1 && logits.dim(1) == sc.h &&
                logits.dim(2) == sc.w,
            "binary loss: prediction shape mismatch");
  const std::size_t hw = sc.h * sc.w;
  std::vector<double> y(hw), wgt(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    y[i] = static_cast<double>(sc.edges[i]);
    wgt[i] = sc.edges[i] != 0 ? bw.w_pos : bw.w_neg;
  }
  Tensor yt = Tensor::from({1, sc.h, sc.w}, std::move(y));
  Tensor wt = Tensor::from({1, sc.h, sc.w}, std::move(wgt));
  Tensor per_pixel = sub(softplus_t(logits), mul(yt, logits));
  return mean(mul(wt, per_pixel));
}

}  // namespace detail

inline Tensor task_loss(const Tensor& pred, const Scene& sc, const TaskSpec& task,
                        const BalancedWeights& bw) {
  switch (task.kind) {
    case TaskKind::segmentation:
      return detail::seg_cross_entropy(pred, sc, task.classes);
    case TaskKind::regression_l1:
      return detail::l1_loss(pred, sc.depth, sc.h, sc.w);
    case TaskKind::balanced_binary:
      return detail::balanced_bce(pred, sc, bw);
  }
  throw std::invalid_argument("task_loss: unknown task kind");
}

// L_MTL = sum_t w_t * L_t. Aborts with per-task diagnostics if the total is
// not finite.
inline Tensor mtl_loss(const std::vector<Tensor>& preds, const Scene& sc,
                       const std::vector<TaskSpec>& tasks,
                       const BalancedWeights& bw = {}) {
  check_arg(preds.size() == tasks.size(), "mtl_loss: one prediction per task required");
  check_arg(!tasks.empty(), "mtl_loss: empty task list");
  Tensor total;
  std::string diag;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    Tensor lt = task_loss(preds[t], sc, tasks[t], bw);
    diag += (t ? ", " : "") + tasks[t].name + "=" + fmt_g17(lt.value());
    Tensor weighted = scale(lt, tasks[t].weight);
    total = t == 0 ? weighted : add(total, weighted);
  }
  if (!std::isfinite(total.value()))
    throw divergence_error("mtl_loss: non-finite objective (" + diag + ")");
  return total;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// delta_m = (100/T) * sum_i (-1)^{l_i} (M_i - M_ref,i) / M_ref,i, with l_i = 1
// for lower-is-better metrics.
inline double delta_m(const std::vector<double>& metrics,
                      const std::vector<double>& reference,
                      const std::vector<int>& lower_better) {
  check_arg(metrics.size() == reference.size() &&
                metrics.size() == lower_better.size() && !metrics.empty(),
            "delta_m: mismatched task vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    check_arg(reference[i] != 0.0, "delta_m: zero reference for task " + std::to_string(i));
    const double rel = (metrics[i] - reference[i]) / reference[i];
    acc += lower_better[i] != 0 ? -rel : rel;
  }
  return 100.0 * acc / static_cast<double>(metrics.size());
}

// Pooled per-task accumulators. For mIoU, classes absent from both prediction
// and target contribute no counts and are excluded from the class mean.
struct TaskAccumulator {
  std::vector<std::size_t> tp, fp, fn;  // per class (mIoU tasks)
  double sq_err = 0.0;                  // rmse tasks
  std::size_t n = 0;
};

namespace detail {

inline void accumulate_iou(TaskAccumulator& acc, const int* pred, const int* target,
                           std::size_t n, std::size_t classes) {
  if (acc.tp.size() != classes) {
    acc.tp.assign(classes, 0);
    acc.fp.assign(classes, 0);
    acc.fn.assign(classes, 0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (pred[i] == target[i]) {
      ++acc.tp[static_cast<std::size_t>(target[i])];
    } else {
      ++acc.fp[static_cast<std::size_t>(pred[i])];
      ++acc.fn[static_cast<std::size_t>(target[i])];
    }
  }
}

inline double miou(const TaskAccumulator& acc) {
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < acc.tp.size(); ++c) {
    const std::size_t denom = acc.tp[c] + acc.fp[c] + acc.fn[c];
    if (denom == 0) continue;  // class absent from both prediction and target
    total += static_cast<double>(acc.tp[c]) / static_cast<double>(denom);
    ++present;
  }
  return present == 0 ? 0.0 : total / static_cast<double>(present);
}

}  // namespace detail

inline void accumulate_task(TaskAccumulator& acc, const Tensor& pred,
                            const Scene& sc, const TaskSpec& task) {
  const std::size_t hw = sc.h * sc.w;
  switch (task.kind) {
    case TaskKind::segmentation: {
      std::vector<int> labels(hw);
      const std::size_t k = task.classes;
      for (std::size_t i = 0; i < hw; ++i) {
        std::size_t best = 0;
        double bv = pred.data()[i];
        for (std::size_t c = 1; c < k; ++c) {
          const double v = pred.data()[c * hw + i];
          if (v > bv) {
            bv = v;
            best = c;
          }
        }
        labels[i] = static_cast<int>(best);
      }
      detail::accumulate_iou(acc, labels.data(), sc.seg.data(), hw, k);
      break;
    }
    case TaskKind::regression_l1: {
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = pred.data()[i] - sc.depth[i];
        acc.sq_err += d * d;
      }
      acc.n += hw;
      break;
    }
    case TaskKind::balanced_binary: {
      std::vector<int> labels(hw), target(hw);
      for (std::size_t i = 0; i < hw; ++i) {
        labels[i] = pred.data()[i] > 0.0 ? 1 : 0;  // sigmoid(z) > 0.5
        target[i] = sc.edges[i];
      }
      detail::accumulate_iou(acc, labels.data(), target.data(), hw, 2);
      break;
    }
  }
}

inline double task_metric(const TaskAccumulator& acc, const TaskSpec& task) {
  if (task.kind == TaskKind::regression_l1)
    return acc.n == 0 ? 0.0 : std::sqrt(acc.sq_err / static_cast<double>(acc.n));
  return detail::miou(acc);
}

struct MetricRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::vector<double> task_values;
  std::size_t trainable_params = 0;
  std::size_t adapter_params = 0;
  std::optional<double> delta;
};

// Runs a predictor over a dataset and reduces per-scene accumulators in index
// order, so the result is independent of evaluation order.
inline MetricRow evaluate_dataset(
    const std::function<std::vector<Tensor>(const Scene&)>& predictor,
    std::uint64_t dataset_seed, std::size_t count, const SceneConfig& scfg,
    const std::vector<TaskSpec>& tasks) {
  check_arg(count > 0, "evaluate: empty dataset");
  std::vector<TaskAccumulator> accs(tasks.size());
  for (std::size_t i = 0; i < count; ++i) {
    const Scene sc = scene_at(dataset_seed, i, scfg);
    const std::vector<Tensor> preds = predictor(sc);
    check_arg(preds.size() == tasks.size(), "evaluate: one prediction per task required");
    for (std::size_t t = 0; t < tasks.size(); ++t)
      accumulate_task(accs[t], preds[t], sc, tasks[t]);
  }
  MetricRow row;
  row.task_values.reserve(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t)
    row.task_values.push_back(task_metric(accs[t], tasks[t]));
  bool have_refs = true;
  for (const auto& t : tasks) have_refs = have_refs && t.reference.has_value();
  if (have_refs) {
    std::vector<double> refs;
    std::vector<int> lower;
    for (const auto& t : tasks) {
      refs.push_back(*t.reference);
      lower.push_back(t.metric == MetricKind::rmse_lower_better ? 1 : 0);
    }
    row.delta = delta_m(row.task_values, refs, lower);
  }
  return row;
}

// ---------------------------------------------------------------------------
// binary scene export (cross-implementation comparison format)
// ---------------------------------------------------------------------------
//
// File layout, little-endian:
//   magic "FAARSCN1" | u32 array_count | per array:
//     u32 name_len | name bytes | u8 dtype (0=f64, 1=i32, 2=u8)
//     u32 ndim | u64 dims[ndim] | raw data

namespace detail {

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

inline void write_array_header(std::ofstream& os, const std::string& name,
                               std::uint8_t dtype, const std::vector<std::uint64_t>& dims) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint8_t>(os, dtype);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) write_pod<std::uint64_t>(os, d);
}

}  // namespace detail

inline void write_scene_file(const std::string& path, const Scene& sc) {
  std::ofstream os(path, std::ios::binary);
  check_state(os.good(), "write_scene_file: cannot open " + path);
  os.write("FAARSCN1", 8);
  detail::write_pod<std::uint32_t>(os, 4);
  const std::uint64_t h = sc.h, w = sc.w;
  detail::write_array_header(os, "image", 0, {3, h, w});
  os.write(reinterpret_cast<const char*>(sc.image.data()),
           static_cast<std::streamsize>(sc.image.size() * sizeof(double)));
  detail::write_array_header(os, "seg", 1, {h, w});
  std::vector<std::int32_t> seg32(sc.seg.begin(), sc.seg.end());
  os.write(reinterpret_cast<const char*>(seg32.data()),
           static_cast<std::streamsize>(seg32.size() * sizeof(std::int32_t)));
  detail::write_array_header(os, "depth", 0, {h, w});
  os.write(reinterpret_cast<const char*>(sc.depth.data()),
           static_cast<std::streamsize>(sc.depth.size() * sizeof(double)));
  detail::write_array_header(os, "edges", 2, {h, w});
  os.write(reinterpret_cast<const char*>(sc.edges.data()),
           static_cast<std::streamsize>(sc.edges.size()));
  check_state(os.good(), "write_scene_file: write failed for " + path);
}

inline Scene read_scene_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_state(is.good(), "read_scene_file: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  check_state(std::string(magic, 8) == "FAARSCN1", "read_scene_file: bad magic in " + path);
  const auto count = detail::read_pod<std::uint32_t>(is);
  check_state(count == 4, "read_scene_file: unexpected array count");
  Scene sc;
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto dtype = detail::read_pod<std::uint8_t>(is);
    const auto ndim = detail::read_pod<std::uint32_t>(is);
    std::vector<std::uint64_t> dims(ndim);
    std::uint64_t n = 1;
    for (auto& d : dims) {
      d = detail::read_pod<std::uint64_t>(is);
      n *= d;
    }
    if (name == "image") {
      sc.h = dims[1];
      sc.w = dims[2];
      sc.image.resize(n);
      is.read(reinterpret_cast<char*>(sc.image.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
    } else if (name == "seg") {
      std::vector<std::int32_t> seg32(n);
      is.read(reinterpret_cast<char*>(seg32.data()),
              static_cast<std::streamsize>(n * sizeof(std::int32_t)));
      sc.seg.assign(seg32.begin(), seg32.end());
    } else if (name == "depth") {
      sc.depth.resize(n);
      is.read(reinterpret_cast<char*>(sc.depth.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
    } else if (name == "edges") {
      sc.edges.resize(n);
      is.read(reinterpret_cast<char*>(sc.edges.data()),
              static_cast<std::streamsize>(n));
    } else {
      check_state(false, "read_scene_file: unknown array " + name);
    }
    (void)dtype;
  }
  check_state(is.good(), "read_scene_file: truncated file " + path);
  return sc;
}

}  // namespace faar
