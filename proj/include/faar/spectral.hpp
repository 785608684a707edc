#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "faar/ops.hpp"

namespace faar {

// Channel-wise spectral filter: a learned real-valued multiplicative filter
// applied to the complex spectrum of each channel, followed by per-channel
// scale and shift. FFT convention: unnormalized forward, 1/(HW) inverse.
struct SpectralFilterState {
  Tensor w_filter;  // {C, H, W}
  Tensor alpha_ch;  // {C}
  Tensor beta_ch;   // {C}
};

// Identity configuration: ones filter, alpha=1, beta=0. The filter starts as
// an exact pass-through so attaching it cannot change step-0 behavior.
inline SpectralFilterState make_identity_filter(std::size_t c, std::size_t h,
                                                std::size_t w) {
  SpectralFilterState f;
  f.w_filter = Tensor::param({c, h, w}, std::vector<double>(c * h * w, 1.0));
  f.alpha_ch = Tensor::param({c}, std::vector<double>(c, 1.0));
  f.beta_ch = Tensor::param({c}, std::vector<double>(c, 0.0));
  return f;
}

// Cross-task consensus state. alpha_low/alpha_high start at zero so enabling
// the module never changes step-0 outputs; tau thresholds the max-normalized
// magnitude spectrum.
struct XtConsState {
  Tensor alpha_low;   // scalar
  Tensor alpha_high;  // scalar
  double tau = 0.5;
};

inline XtConsState make_xtcons(double tau = 0.5) {
  check_arg(tau > 0.0 && tau < 1.0, "xtcons: tau must be in (0,1)");
  XtConsState st;
  st.alpha_low = Tensor::param({1}, {0.0});
  st.alpha_high = Tensor::param({1}, {0.0});
  st.tau = tau;
  return st;
}

// Splits the bins of one channel spectrum into a low/high partition by
// max-normalized magnitude: high = (|F|/max|F| > tau), low = complement. An
// all-zero spectrum puts every bin in the low band.
inline void magnitude_masks(const std::vector<cplx>& spectrum, double tau,
                            std::vector<double>& low, std::vector<double>& high) {
  const std::size_t n = spectrum.size();
  low.assign(n, 0.0);
  high.assign(n, 0.0);
  double mx = 0.0;
  for (const auto& z : spectrum) mx = std::max(mx, std::abs(z));
  for (std::size_t i = 0; i < n; ++i) {
    if (mx > 0.0 && std::abs(spectrum[i]) / mx > tau)
      high[i] = 1.0;
    else
      low[i] = 1.0;
  }
}

namespace detail {

inline double max_imag(const Tensor& complex_map) {
  double mx = 0.0;
  for (std::size_t i = 0; i < complex_map.numel(); ++i)
    mx = std::max(mx, std::fabs(complex_map.cdata()[i].imag()));
  return mx;
}

}  // namespace detail

// Out_c = alpha_c * Re(ifft2(W_c ⊙ fft2(x_c))) + beta_c, per channel.
// imag_residue, when given, accumulates the largest |Im| seen before the real
// part is taken (stays at roundoff scale while the filter is even-symmetric).
inline Tensor cwsp_forward(const Tensor& x, const SpectralFilterState& f,
                           double* imag_residue = nullptr) {
  check_arg(x.rank() == 3, "cwsp_forward: CHW input required");
  check_arg(x.shape() == f.w_filter.shape(),
            "cwsp_forward: filter shape " + shape_str(f.w_filter.shape()) +
                " does not match input " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<Tensor> outs;
  outs.reserve(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor spectrum = fft2(channel_slice(x, ch));
    Tensor filtered = cmul(to_complex(channel_slice(f.w_filter, ch)), spectrum);
    Tensor back = ifft2(filtered);
    if (imag_residue != nullptr)
      *imag_residue = std::max(*imag_residue, detail::max_imag(back));
    outs.push_back(real_part(back));
  }
  Tensor flat = reshape(channel_stack(outs), {c, h * w});
  flat = add_bias(scale_rows(flat, f.alpha_ch), f.beta_ch);
  return reshape(flat, {c, h, w});
}

// Nudges the main task's features toward the average spectrum of the other
// tasks, separately on the low- and high-magnitude bands of the main spectrum:
//   out = main + alpha_low*Re(ifft2(M_low ⊙ (F_avg - F_main)))
//              + alpha_high*Re(ifft2(M_high ⊙ (F_avg - F_main)))
// Masks are selectors computed from values and carry no gradient.
inline Tensor spectral_consensus(const Tensor& main,
                                 const std::vector<Tensor>& aux,
                                 const XtConsState& st,
                                 double* imag_residue = nullptr) {
  check_arg(!aux.empty(), "spectral_consensus: at least one auxiliary task required");
  check_arg(main.rank() == 3, "spectral_consensus: CHW input required");
  for (const auto& a : aux)
    check_arg(a.shape() == main.shape(), "spectral_consensus: shape mismatch");
  const std::size_t c = main.dim(0);
  const double inv_aux = 1.0 / static_cast<double>(aux.size());

  std::vector<Tensor> outs;
  outs.reserve(c);
  std::vector<double> mask_low, mask_high;
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor f_main = fft2(channel_slice(main, ch));
    Tensor f_sum = fft2(channel_slice(aux[0], ch));
    for (std::size_t j = 1; j < aux.size(); ++j)
      f_sum = cadd(f_sum, fft2(channel_slice(aux[j], ch)));
    Tensor f_avg = cscale(f_sum, inv_aux);

    magnitude_masks(f_main.cvalues(), st.tau, mask_low, mask_high);
    Tensor delta = csub(f_avg, f_main);
    std::vector<cplx> ml(mask_low.size()), mh(mask_high.size());
    for (std::size_t i = 0; i < ml.size(); ++i) {
      ml[i] = cplx(mask_low[i], 0.0);
      mh[i] = cplx(mask_high[i], 0.0);
    }
    Tensor back_low = ifft2(cmul(delta, Tensor::from_complex(f_main.shape(), std::move(ml))));
    Tensor back_high = ifft2(cmul(delta, Tensor::from_complex(f_main.shape(), std::move(mh))));
    if (imag_residue != nullptr) {
      *imag_residue = std::max(*imag_residue, detail::max_imag(back_low));
      *imag_residue = std::max(*imag_residue, detail::max_imag(back_high));
    }
    Tensor corr = add(scale_by(real_part(back_low), st.alpha_low),
                      scale_by(real_part(back_high), st.alpha_high));
    outs.push_back(add(channel_slice(main, ch), corr));
  }
  return channel_stack(outs);
}

// ---------------------------------------------------------------------------
// pyramidal fusion and prediction heads
// ---------------------------------------------------------------------------

struct FuseParams {
  std::vector<Tensor> proj;  // proj[s]: {C_fuse, C_s}, 1x1 projection per stage
  Tensor conv_k;             // {C_fuse, C_fuse, 3, 3}
  Tensor conv_b;             // {C_fuse}
};

// Upsamples every stage to the finest resolution, projects each to the fuse
// width, sums, then one 3x3 convolution with tanh.
inline Tensor pyramid_fuse(const std::vector<Tensor>& stages, const FuseParams& p) {
  check_arg(!stages.empty(), "pyramid_fuse: missing stage features");
  check_arg(stages.size() == p.proj.size(),
            "pyramid_fuse: expected " + std::to_string(p.proj.size()) +
                " stages, got " + std::to_string(stages.size()));
  const std::size_t h0 = stages[0].dim(1), w0 = stages[0].dim(2);
  const std::size_t c_fuse = p.proj[0].dim(0);
  Tensor acc;
  bool first = true;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const Tensor& f = stages[s];
    check_arg(f.rank() == 3, "pyramid_fuse: CHW features required");
    check_arg(h0 % f.dim(1) == 0 && w0 % f.dim(2) == 0 &&
                  h0 / f.dim(1) == w0 / f.dim(2),
              "pyramid_fuse: stage resolution does not divide the finest one");
    check_arg(p.proj[s].dim(1) == f.dim(0), "pyramid_fuse: projection width mismatch");
    const std::size_t factor = h0 / f.dim(1);
    Tensor up = factor == 1 ? f : upsample_nearest(f, factor);
    Tensor flat = reshape(up, {f.dim(0), h0 * w0});
    Tensor projected = matmul(p.proj[s], flat);
    acc = first ? projected : add(acc, projected);
    first = false;
  }
  Tensor grid = reshape(acc, {c_fuse, h0, w0});
  return tanh_t(conv3x3(grid, p.conv_k, p.conv_b));
}

struct HeadParams {
  Tensor W;  // {channels_out, C_fuse}
  Tensor b;  // {channels_out}
  std::size_t upsample = 1;  // finest feature resolution -> input resolution
};

// 1x1 linear map to the task's output channels, upsampled to input resolution.
inline Tensor task_head(const Tensor& fused, const HeadParams& head) {
  check_arg(fused.rank() == 3, "task_head: CHW input required");
  check_arg(head.W.dim(1) == fused.dim(0), "task_head: channel mismatch");
  const std::size_t h = fused.dim(1), w = fused.dim(2);
  Tensor flat = reshape(fused, {fused.dim(0), h * w});
  Tensor logits = add_bias(matmul(head.W, flat), head.b);
  Tensor grid = reshape(logits, {head.W.dim(0), h, w});
  return head.upsample == 1 ? grid : upsample_nearest(grid, head.upsample);
}

}  // namespace faar
