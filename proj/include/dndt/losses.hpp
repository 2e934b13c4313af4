#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dndt/errors.hpp"
#include "dndt/rng.hpp"
#include "dndt/tensor.hpp"

namespace dndt::loss {

struct LossConfig {
  double eps = 1e-6;      // Dice smoothing
  double delta = 1.0;     // BCE weight inside the denoising loss
  double lambda = 1.0;    // JSD weight inside the detection loss
  double gamma = 0.5;     // denoising weight in the joint loss
  double sigma_hm = 1.0;  // target heatmap Gaussian sigma, px
  int window = 7;         // DSNT window side K (odd)
  int jitter = 2;         // window-origin jitter, px
  double mu = 1.0;        // presence-BCE weight
  double presence_radius = 1.5;  // px, positive-mask radius

  void validate() const {
    if (!(eps > 0)) throw UsageError("loss eps must be > 0");
    if (window < 3 || window % 2 == 0) throw UsageError("window must be odd and >= 3");
    if (!(sigma_hm > 0)) throw UsageError("sigma_hm must be > 0");
    if (delta < 0 || lambda < 0 || gamma < 0 || mu < 0 || jitter < 0)
      throw UsageError("loss weights and jitter must be >= 0");
  }
};

// A particle position supervising one frame/crop. `window_eligible` is false
// for particles too close to a crop border: they still shape the presence
// mask but get no DSNT window.
struct Particle {
  std::int64_t id = 0;
  double x = 0.0, y = 0.0;
  bool window_eligible = true;
};

inline constexpr double kLogClamp = 1e-7;

namespace detail {

template <typename T>
void require_unit_range(std::span<const T> v, const char* who) {
  for (T x : v)
    if (!(x >= T(-1e-6) && x <= T(1) + T(1e-6)))
      throw NumericError(std::string(who) + ": values must lie in [0,1]");
}

template <typename T>
void require_distribution(std::span<const T> v, const char* who) {
  double total = 0.0;
  for (T x : v) {
    if (x < T(0)) throw NumericError(std::string(who) + ": negative entry");
    total += static_cast<double>(x);
  }
  if (std::fabs(total - 1.0) > 1e-5)
    throw NumericError(std::string(who) + ": distribution does not sum to 1");
}

}  // namespace detail

// 1 - (2*sum(p*r) + eps) / (sum(p) + sum(r) + eps). The eps convention makes
// two empty images a perfect match.
template <typename T>
ad::Tensor<T> dice_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref,
                        double eps = 1e-6) {
  check_shape(pred.shape() == ref.shape(), "dice_loss: shape mismatch");
  detail::require_unit_range(pred.value(), "dice_loss (pred)");
  detail::require_unit_range(ref.value(), "dice_loss (ref)");
  using namespace ad;
  auto num = offset(scale(sum(mul(pred, ref)), T(2)), static_cast<T>(eps));
  auto den = offset(add(sum(pred), sum(ref)), static_cast<T>(eps));
  return offset(scale(div(num, den), T(-1)), T(1));
}

// -mean[ beta*r*log(p) + (1-beta)*(1-r)*log(1-p) ], beta = background
// fraction of ref (r < 0.5) clamped to [0.05, 0.95]; logs clamped at 1e-7.
// Gradient flows into pred only (ref is a target).
template <typename T>
ad::Tensor<T> balanced_bce(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref) {
  check_shape(pred.shape() == ref.shape(), "balanced_bce: shape mismatch");
  auto pv = pred.value();
  auto rv = ref.value();
  const std::size_t n = pv.size();

  std::size_t background = 0;
  for (T r : rv)
    if (r < T(0.5)) ++background;
  double beta = static_cast<double>(background) / static_cast<double>(n);
  beta = std::clamp(beta, 0.05, 0.95);

  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::max(static_cast<double>(pv[i]), kLogClamp);
    const double q = std::max(1.0 - static_cast<double>(pv[i]), kLogClamp);
    const double r = rv[i];
    acc += beta * r * std::log(p) + (1.0 - beta) * (1.0 - r) * std::log(q);
  }
  const T value = static_cast<T>(-acc / static_cast<double>(n));

  ad::Tape<T>& tp = *pred.tape();
  const int ip = pred.id();
  std::vector<T> ref_copy(rv.begin(), rv.end());
  return tp.node(
      {1}, {value}, {pred},
      [ip, beta, n, ref_copy = std::move(ref_copy)](ad::Tape<T>& t, int o) {
        const T g = t.grad(o)[0];
        auto pv2 = t.value(ip);
        auto gp = t.grad_accum(ip);
        if (gp.empty()) return;
        const T inv_n = T(1) / static_cast<T>(n);
        for (std::size_t i = 0; i < pv2.size(); ++i) {
          // d/dp of the clamped logs: zero inside a clamped region
          T d = T(0);
          if (static_cast<double>(pv2[i]) > kLogClamp)
            d -= static_cast<T>(beta) * ref_copy[i] / pv2[i];
          if (1.0 - static_cast<double>(pv2[i]) > kLogClamp)
            d += static_cast<T>(1.0 - beta) * (T(1) - ref_copy[i]) /
                 (T(1) - pv2[i]);
          gp[i] += g * d * inv_n;
        }
      });
}

// Denoising objective: Dice + delta * balanced BCE against the normalized
// clean frame.
template <typename T>
ad::Tensor<T> deno_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& ref,
                        const LossConfig& cfg = {}) {
  auto d = dice_loss(pred, ref, cfg.eps);
  if (cfg.delta == 0.0) return d;
  return ad::add(d, ad::scale(balanced_bce(pred, ref), static_cast<T>(cfg.delta)));
}

// Expected coordinate of a K x K heatmap over the DSNT grid
// X[j] = (2j + 1 - K)/K, Y[i] = (2i + 1 - K)/K; returns [x, y] in (-1, 1).
template <typename T>
ad::Tensor<T> dsnt(const ad::Tensor<T>& heatmap) {
  const auto& s = heatmap.shape();
  check_shape(s.size() == 2 && s[0] == s[1], "dsnt: expected a square [K,K] map");
  const int K = s[0];
  detail::require_distribution(heatmap.value(), "dsnt");

  auto hv = heatmap.value();
  double x = 0.0, y = 0.0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      const double h = hv[i * K + j];
      x += h * (2.0 * j + 1.0 - K) / K;
      y += h * (2.0 * i + 1.0 - K) / K;
    }

  ad::Tape<T>& tp = *heatmap.tape();
  const int ih = heatmap.id();
  return tp.node({2}, {static_cast<T>(x), static_cast<T>(y)}, {heatmap},
                 [ih, K](ad::Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   auto gh = t.grad_accum(ih);
                   if (gh.empty()) return;
                   for (int i = 0; i < K; ++i)
                     for (int j = 0; j < K; ++j)
                       gh[i * K + j] += g[0] * static_cast<T>((2.0 * j + 1.0 - K) / K) +
                                        g[1] * static_cast<T>((2.0 * i + 1.0 - K) / K);
                 });
}

// Window-normalized DSNT coordinate -> global pixel coordinate.
inline double dsnt_to_pixel(double coord, int origin, int K) {
  return origin + (coord + 1.0) * K / 2.0 - 0.5;
}

// Global sub-pixel position -> window-normalized coordinate for `dsnt`.
inline double pixel_to_dsnt(double px, int origin, int K) {
  return (px - origin + 0.5) * 2.0 / K - 1.0;
}

// Pixel-center-evaluated isotropic Gaussian on a K x K window, renormalized
// to sum 1. (cx, cy) are window-local pixel coordinates.
inline std::vector<double> gaussian_target(int K, double cx, double cy,
                                           double sigma) {
  if (K < 3 || K % 2 == 0) throw UsageError("gaussian_target: K must be odd and >= 3");
  if (cx < 0 || cx > K - 1 || cy < 0 || cy > K - 1)
    throw UsageError("gaussian_target: center outside window");
  std::vector<double> g(static_cast<std::size_t>(K) * K);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double total = 0.0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      const double d2 = (j - cx) * (j - cx) + (i - cy) * (i - cy);
      g[i * K + j] = std::exp(-d2 * inv2s2);
      total += g[i * K + j];
    }
  for (auto& v : g) v /= total;
  return g;
}

// Jensen-Shannon divergence 0.5*KL(P||M) + 0.5*KL(Q||M), M = (P+Q)/2,
// natural log, 0*log(0) := 0. Differentiable in P; Q is a target.
template <typename T>
ad::Tensor<T> jsd(const ad::Tensor<T>& p, const std::vector<double>& q) {
  auto pv = p.value();
  check_shape(pv.size() == q.size(), "jsd: size mismatch");
  detail::require_distribution(pv, "jsd (P)");
  {
    double total = 0.0;
    for (double x : q) {
      if (x < 0.0) throw NumericError("jsd (Q): negative entry");
      total += x;
    }
    if (std::fabs(total - 1.0) > 1e-5)
      throw NumericError("jsd (Q): distribution does not sum to 1");
  }

  double acc = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double pi = pv[i], qi = q[i];
    const double m = 0.5 * (pi + qi);
    if (pi > 0.0) acc += 0.5 * pi * std::log(pi / m);
    if (qi > 0.0) acc += 0.5 * qi * std::log(qi / m);
  }

  ad::Tape<T>& tp = *p.tape();
  const int ip = p.id();
  return tp.node({1}, {static_cast<T>(acc)}, {p},
                 [ip, q](ad::Tape<T>& t, int o) {
                   const T g = t.grad(o)[0];
                   auto pv2 = t.value(ip);
                   auto gp = t.grad_accum(ip);
                   if (gp.empty()) return;
                   // dJ/dp_i = 0.5 * ln(p_i / m_i); clamp for p_i -> 0
                   for (std::size_t i = 0; i < q.size(); ++i) {
                     const double pi = std::max(static_cast<double>(pv2[i]), 1e-12);
                     const double m = std::max(0.5 * (pi + q[i]), 1e-12);
                     gp[i] += g * static_cast<T>(0.5 * std::log(pi / m));
                   }
                 });
}

template <typename T>
struct TrainingWindow {
  ad::Tensor<T> logits;        // K x K slice of the score map
  int ox = 0, oy = 0;          // window origin, integer pixels (top-left)
  double tx = 0.0, ty = 0.0;   // target in window-normalized coordinates
  double tx_px = 0.0, ty_px = 0.0;  // target in window-local pixels
  std::int64_t id = 0;
};

// One window per window-eligible particle; origin = round(position) + jitter
// - K/2 with the jitter drawn from a per-particle substream, so the window
// set does not depend on list order. Windows clipped by the image border are
// dropped.
template <typename T>
std::vector<TrainingWindow<T>> extract_training_windows(
    const ad::Tensor<T>& score_logits, const std::vector<Particle>& truth,
    const LossConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  // copy: the tape's node storage (and thus shape references) can move as
  // slice nodes are appended below
  const ad::Shape s = score_logits.shape();
  check_shape(s.size() == 2 || (s.size() == 4 && s[0] == 1 && s[1] == 1),
              "extract_training_windows: expected [H,W] or [1,1,H,W]");
  const int H = s[s.size() == 2 ? 0 : 2];
  const int W = s[s.size() == 2 ? 1 : 3];
  const int K = cfg.window;

  std::vector<TrainingWindow<T>> out;
  out.reserve(truth.size());
  for (const auto& pt : truth) {
    if (!pt.window_eligible) continue;
    rng::Stream rs(rng::mix(seed, static_cast<std::uint64_t>(pt.id)));
    const int jx = static_cast<int>(rs.uniform_int(-cfg.jitter, cfg.jitter));
    const int jy = static_cast<int>(rs.uniform_int(-cfg.jitter, cfg.jitter));
    const int ox = static_cast<int>(std::lround(pt.x)) + jx - K / 2;
    const int oy = static_cast<int>(std::lround(pt.y)) + jy - K / 2;
    if (ox < 0 || oy < 0 || ox + K > W || oy + K > H) continue;
    TrainingWindow<T> w;
    w.logits = ad::slice_window(score_logits, oy, ox, K);
    w.ox = ox;
    w.oy = oy;
    w.tx_px = pt.x - ox;
    w.ty_px = pt.y - oy;
    w.tx = pixel_to_dsnt(pt.x, ox, K);
    w.ty = pixel_to_dsnt(pt.y, oy, K);
    w.id = pt.id;
    out.push_back(std::move(w));
  }
  return out;
}

// Presence mask: 1 on pixels whose center lies within `radius` of any truth
// position, else 0.
template <typename T>
std::vector<T> presence_mask(int H, int W, const std::vector<Particle>& truth,
                             double radius) {
  std::vector<T> mask(static_cast<std::size_t>(H) * W, T(0));
  const double r2 = radius * radius;
  for (const auto& pt : truth) {
    const int x0 = std::max(0, static_cast<int>(std::ceil(pt.x - radius)));
    const int x1 = std::min(W - 1, static_cast<int>(std::floor(pt.x + radius)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(pt.y - radius)));
    const int y1 = std::min(H - 1, static_cast<int>(std::floor(pt.y + radius)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - pt.x, dy = y - pt.y;
        if (dx * dx + dy * dy <= r2) mask[static_cast<std::size_t>(y) * W + x] = T(1);
      }
  }
  return mask;
}

template <typename T>
struct DetLossResult {
  ad::Tensor<T> loss;
  int n_windows = 0;
  bool window_warning = false;  // true when no usable window existed
};

// Mean over windows of ||dsnt(softmax(window)) - target||_2
// + lambda * JSD(softmax(window), Gaussian target), plus mu * balanced BCE of
// sigmoid(score map) against the presence mask.
template <typename T>
DetLossResult<T> det_loss(const ad::Tensor<T>& score_logits,
                          const std::vector<Particle>& truth,
                          const LossConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  using namespace ad;
  Tape<T>& tp = *score_logits.tape();
  const Shape s = score_logits.shape();  // copy: node storage may reallocate
  check_shape(s.size() == 2 || (s.size() == 4 && s[0] == 1 && s[1] == 1),
              "det_loss: expected [H,W] or [1,1,H,W]");
  const int H = s[s.size() == 2 ? 0 : 2];
  const int W = s[s.size() == 2 ? 1 : 3];
  const int K = cfg.window;

  DetLossResult<T> res;
  auto windows = extract_training_windows(score_logits, truth, cfg, seed);
  res.n_windows = static_cast<int>(windows.size());

  Tensor<T> window_term;
  for (const auto& w : windows) {
    auto prob = softmax2d(w.logits);
    auto coords = dsnt(prob);
    auto target = tp.constant({2}, {static_cast<T>(w.tx), static_cast<T>(w.ty)});
    auto diff = sub(coords, target);
    auto dist = sqrt_clamped(sum(mul(diff, diff)));
    auto q = gaussian_target(K, w.tx_px, w.ty_px, cfg.sigma_hm);
    auto term = add(dist, scale(jsd(prob, q), static_cast<T>(cfg.lambda)));
    window_term = window_term.valid() ? add(window_term, term) : term;
  }
  if (res.n_windows > 0) {
    res.loss = scale(window_term, T(1) / static_cast<T>(res.n_windows));
  } else {
    res.window_warning = true;
  }

  if (cfg.mu > 0.0) {
    // The mask is built in the score map's own shape so no reshape is needed.
    auto mask = tp.constant(s, presence_mask<T>(H, W, truth, cfg.presence_radius));
    auto presence = scale(balanced_bce(sigmoid(score_logits), mask),
                          static_cast<T>(cfg.mu));
    res.loss = res.loss.valid() ? add(res.loss, presence) : presence;
  } else if (!res.loss.valid()) {
    res.loss = tp.constant({1}, {T(0)});
  }
  return res;
}

template <typename T>
struct JointLossResult {
  ad::Tensor<T> total;
  ad::Tensor<T> det;
  ad::Tensor<T> deno;  // invalid tensor when gamma == 0
  int n_windows = 0;
  bool window_warning = false;
};

// Eq. of the composite objective: det + gamma * deno. gamma = 0 disables the
// denoising term entirely (warm-start phase).
template <typename T>
JointLossResult<T> joint_loss(const ad::Tensor<T>& score_logits,
                              const ad::Tensor<T>& denoised,
                              const ad::Tensor<T>& clean_ref,
                              const std::vector<Particle>& truth,
                              const LossConfig& cfg, std::uint64_t seed) {
  JointLossResult<T> res;
  auto det = det_loss(score_logits, truth, cfg, seed);
  res.det = det.loss;
  res.n_windows = det.n_windows;
  res.window_warning = det.window_warning;
  if (cfg.gamma > 0.0) {
    res.deno = deno_loss(denoised, clean_ref, cfg);
    res.total = ad::add(res.det, ad::scale(res.deno, static_cast<T>(cfg.gamma)));
  } else {
    res.total = res.det;
  }
  return res;
}

}  // namespace dndt::loss
