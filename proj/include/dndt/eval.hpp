#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dndt/errors.hpp"
#include "dndt/image.hpp"
#include "dndt/losses.hpp"
#include "dndt/model.hpp"
#include "dndt/simgen.hpp"
#include "dndt/tensor.hpp"

namespace dndt::eval {

struct Detection {
  double x = 0.0, y = 0.0;
  double score = 0.0;  // in [0,1]
};

struct DetectConfig {
  double tau = 0.5;        // score threshold on the sigmoid map
  double nms_radius = 2.0; // px
  int window = 7;          // K for the per-candidate softmax/DSNT readout

  void validate() const {
    if (window < 3 || window % 2 == 0)
      throw UsageError("detect: window must be odd and >= 3");
    if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("detect: tau must be in [0,1]");
    if (nms_radius < 0.0) throw UsageError("detect: nms radius must be >= 0");
  }
};

// ------------------------------------------------------------- inference

struct InferenceResult {
  int height = 0, width = 0;
  std::vector<double> denoised;      // [0,1]
  std::vector<double> score_logits;  // raw head output
};

// One forward pass: frame normalized by the checkpoint's recorded rule.
inline InferenceResult infer(const model::ModelParameters& mp, const Image& frame) {
  Image img01 = normalize(frame, mp.norm_rule);
  ad::Tape<float> tape;
  auto params = model::make_param_tensors(tape, mp, /*requires_grad=*/false);
  std::vector<float> data(img01.pix.begin(), img01.pix.end());
  auto x = tape.constant({1, 1, frame.height, frame.width}, std::move(data));
  auto out = model::forward(params, mp.config, x);
  InferenceResult r;
  r.height = frame.height;
  r.width = frame.width;
  auto dv = out.denoised.value();
  auto sv = out.score_logits.value();
  r.denoised.assign(dv.begin(), dv.end());
  r.score_logits.assign(sv.begin(), sv.end());
  return r;
}

// --------------------------------------------------- candidate extraction

namespace detail {

// Strict local maximum over the (border-clamped) 5x5 neighborhood.
inline bool is_strict_5x5_max(const std::vector<double>& m, int H, int W, int y,
                              int x) {
  const double c = m[static_cast<std::size_t>(y) * W + x];
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      if (dy == 0 && dx == 0) continue;
      const int yy = std::clamp(y + dy, 0, H - 1);
      const int xx = std::clamp(x + dx, 0, W - 1);
      if (yy == y && xx == x) continue;
      if (m[static_cast<std::size_t>(yy) * W + xx] >= c) return false;
    }
  return true;
}

}  // namespace detail

// Sigmoid score map -> strict 5x5 maxima above tau -> per candidate a K x K
// logit window -> softmax -> DSNT expectation -> sub-pixel coordinate.
// Candidates within the NMS radius keep only the highest score (ties by
// row-major candidate position).
inline std::vector<Detection> detections_from_logits(
    const std::vector<double>& logits, int H, int W, const DetectConfig& cfg) {
  cfg.validate();
  check_shape(static_cast<std::size_t>(H) * W == logits.size(),
              "detections_from_logits: size mismatch");
  const int K = cfg.window;
  if (H < K || W < K) return {};

  std::vector<double> score(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    score[i] = 1.0 / (1.0 + std::exp(-logits[i]));

  struct Candidate {
    Detection det;
    int index;  // row-major position, used for deterministic tie-breaks
  };
  std::vector<Candidate> cands;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double s = score[static_cast<std::size_t>(y) * W + x];
      if (s < cfg.tau) continue;
      if (!detail::is_strict_5x5_max(score, H, W, y, x)) continue;
      // window kept inside the frame so the DSNT readout stays in bounds
      const int ox = std::clamp(x - K / 2, 0, W - K);
      const int oy = std::clamp(y - K / 2, 0, H - K);
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j)
          mx = std::max(mx, logits[static_cast<std::size_t>(oy + i) * W + ox + j]);
      double total = 0.0, ex = 0.0, ey = 0.0;
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) {
          const double e =
              std::exp(logits[static_cast<std::size_t>(oy + i) * W + ox + j] - mx);
          total += e;
          ex += e * (2.0 * j + 1.0 - K) / K;
          ey += e * (2.0 * i + 1.0 - K) / K;
        }
      Candidate c;
      c.det.x = loss::dsnt_to_pixel(ex / total, ox, K);
      c.det.y = loss::dsnt_to_pixel(ey / total, oy, K);
      c.det.score = s;
      c.index = y * W + x;
      cands.push_back(c);
    }

  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    return a.index < b.index;
  });

  std::vector<Detection> kept;
  const double r2 = cfg.nms_radius * cfg.nms_radius;
  for (const auto& c : cands) {
    bool suppressed = false;
    for (const auto& k : kept) {
      const double dx = c.det.x - k.x, dy = c.det.y - k.y;
      if (dx * dx + dy * dy <= r2) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(c.det);
  }
  return kept;
}

inline std::vector<Detection> detect(const model::ModelParameters& mp,
                                     const Image& frame,
                                     const DetectConfig& cfg = {}) {
  auto inf = infer(mp, frame);
  return detections_from_logits(inf.score_logits, inf.height, inf.width, cfg);
}

inline Image denoise(const model::ModelParameters& mp, const Image& frame) {
  auto inf = infer(mp, frame);
  Image out;
  out.height = inf.height;
  out.width = inf.width;
  out.pix = std::move(inf.denoised);
  return out;
}

// ------------------------------------------------------------- matching

namespace detail {

// Minimum-cost perfect assignment on a square matrix via shortest augmenting
// paths with potentials, O(N^3). Returns row index assigned to each column.
inline std::vector<int> hungarian_square(const std::vector<std::vector<double>>& a) {
  const int N = static_cast<int>(a.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(N + 1, 0.0), v(N + 1, 0.0);
  std::vector<int> p(N + 1, 0), way(N + 1, 0);
  for (int i = 1; i <= N; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(N + 1, inf);
    std::vector<char> used(N + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= N; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= N; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_of_col(N);
  for (int j = 1; j <= N; ++j) row_of_col[j - 1] = p[j] - 1;
  return row_of_col;
}

}  // namespace detail

// Gated minimum-cost assignment. Pairs with cost > gate are unassignable; the
// result maximizes the number of feasible pairs, then minimizes total cost.
// Implemented on an (n+m)-square padded with dummy rows/columns. The dummy
// cost must exceed half the largest achievable pairing total: a k-pair
// matching beats any (k-1)-pair one iff T_k - T_{k-1} < 2*pad, and
// T_k <= min(n,m)*gate, so gate-sized pads are NOT enough (a chain of cheap
// off-by-one matches could otherwise out-bid a full matching).
inline std::vector<std::pair<int, int>> hungarian(
    const std::vector<std::vector<double>>& cost, double gate) {
  const int n = static_cast<int>(cost.size());
  const int m = n > 0 ? static_cast<int>(cost[0].size()) : 0;
  double max_cost = 0.0;
  for (const auto& row : cost) {
    check_shape(static_cast<int>(row.size()) == m, "hungarian: ragged cost matrix");
    for (double c : row) {
      if (!std::isfinite(c)) throw NumericError("hungarian: non-finite cost");
      if (c < 0.0) throw NumericError("hungarian: negative cost");
      max_cost = std::max(max_cost, c);
    }
  }
  if (n == 0 || m == 0) return {};
  // with an infinite gate every pair is feasible and max_cost bounds T_k
  const double unit = std::isfinite(gate) ? gate : std::max(max_cost, 1.0);
  const double pad = unit * (std::min(n, m) + 1);
  const double forbidden = (pad * (n + m) + 1.0) * 16.0;  // never selected

  const int N = n + m;
  std::vector<std::vector<double>> a(N, std::vector<double>(N, 0.0));
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      if (i < n && j < m)
        a[i][j] = cost[i][j] <= gate ? cost[i][j] : forbidden;
      else if (i < n || j < m)
        a[i][j] = pad;  // real row or column paired with a dummy
      else
        a[i][j] = 0.0;  // dummy-dummy
    }

  auto row_of_col = detail::hungarian_square(a);
  std::vector<std::pair<int, int>> pairs;
  for (int j = 0; j < m; ++j) {
    const int i = row_of_col[j];
    if (i >= 0 && i < n && cost[i][j] <= gate) pairs.emplace_back(i, j);
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

struct MatchedPair {
  int pred = -1, ref = -1;
  double distance = 0.0;
};

struct MatchResult {
  std::vector<MatchedPair> pairs;
  std::vector<int> false_positives;  // unmatched prediction indices
  std::vector<int> false_negatives;  // unmatched reference indices
  double gate = 5.0;

  int tp() const { return static_cast<int>(pairs.size()); }
  int fp() const { return static_cast<int>(false_positives.size()); }
  int fn() const { return static_cast<int>(false_negatives.size()); }
};

inline MatchResult match(const std::vector<Detection>& preds,
                         const std::vector<std::pair<double, double>>& refs,
                         double gate = 5.0) {
  MatchResult res;
  res.gate = gate;
  const int n = static_cast<int>(preds.size());
  const int m = static_cast<int>(refs.size());
  std::vector<std::vector<double>> cost(n, std::vector<double>(m));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const double dx = preds[i].x - refs[j].first;
      const double dy = preds[i].y - refs[j].second;
      cost[i][j] = std::sqrt(dx * dx + dy * dy);
    }
  auto pairs = hungarian(cost, gate);
  std::vector<char> pred_used(n, 0), ref_used(m, 0);
  for (auto [i, j] : pairs) {
    res.pairs.push_back({i, j, cost[i][j]});
    pred_used[i] = 1;
    ref_used[j] = 1;
  }
  for (int i = 0; i < n; ++i)
    if (!pred_used[i]) res.false_positives.push_back(i);
  for (int j = 0; j < m; ++j)
    if (!ref_used[j]) res.false_negatives.push_back(j);
  return res;
}

// --------------------------------------------------------------- metrics

// 2TP / (2TP + FP + FN); an empty frame with no detections counts as perfect.
inline double f1_score(int tp, int fp, int fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw UsageError("f1: negative counts");
  if (tp == 0 && fp == 0 && fn == 0) return 1.0;
  return 2.0 * tp / (2.0 * tp + fp + fn);
}

// Pooled over matched pairs; no pairs -> no value (excluded from aggregates).
inline std::optional<double> rmse(const std::vector<double>& distances) {
  if (distances.empty()) return std::nullopt;
  double acc = 0.0;
  for (double d : distances) acc += d * d;
  return std::sqrt(acc / distances.size());
}

inline constexpr double kPsnrCap = 99.0;  // dB, reported for identical images

// PSNR of two already-[0,1] images (peak = 1).
inline double psnr_normalized(const std::vector<double>& test,
                              const std::vector<double>& ref) {
  check_shape(test.size() == ref.size() && !ref.empty(),
              "psnr: size mismatch or empty");
  double mse = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double d = test[i] - ref[i];
    mse += d * d;
  }
  mse /= test.size();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Both images normalized by the REFERENCE's percentile window before MSE.
inline double psnr(const Image& test, const Image& ref,
                   const NormRule& rule = {}) {
  check_shape(test.height == ref.height && test.width == ref.width,
              "psnr: shape mismatch");
  const NormWindow w = norm_window(ref, rule);
  return psnr_normalized(normalize(test, w).pix, normalize(ref, w).pix);
}

// ------------------------------------------------------------ LoG baseline

// Negated Laplacian-of-Gaussian response: bright blobs of scale ~sigma give
// positive peaks. Edge-replicated padding keeps flat regions at zero response.
inline std::vector<double> log_response(const Image& img, double sigma) {
  if (!(sigma > 0)) throw UsageError("log_response: sigma must be > 0");
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const int k = 2 * r + 1;
  std::vector<double> kernel(static_cast<std::size_t>(k) * k);
  const double s2 = sigma * sigma;
  double ksum = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double d2 = dx * dx + dy * dy;
      const double v = -(d2 - 2.0 * s2) / (s2 * s2) * std::exp(-d2 / (2.0 * s2));
      kernel[static_cast<std::size_t>(dy + r) * k + (dx + r)] = v;
      ksum += v;
    }
  // truncation and sampling leave a small DC term; remove it so constant
  // regions produce exactly zero response
  const double dc = ksum / (static_cast<double>(k) * k);
  for (auto& v : kernel) v -= dc;
  std::vector<double> out(img.pix.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = std::clamp(y + dy, 0, img.height - 1);
          const int xx = std::clamp(x + dx, 0, img.width - 1);
          acc += kernel[static_cast<std::size_t>(dy + r) * k + (dx + r)] *
                 img.pix[static_cast<std::size_t>(yy) * img.width + xx];
        }
      out[static_cast<std::size_t>(y) * img.width + x] = acc;
    }
  return out;
}

// Strict 3x3 maxima of the response above `threshold`, refined by a 1D
// quadratic fit per axis (offsets clamped to half a pixel).
inline std::vector<Detection> log_baseline_detect(const Image& img, double sigma,
                                                  double threshold) {
  const auto resp = log_response(img, sigma);
  const int H = img.height, W = img.width;
  double peak = 0.0;
  for (double v : resp) peak = std::max(peak, v);
  std::vector<Detection> out;
  for (int y = 1; y + 1 < H; ++y)
    for (int x = 1; x + 1 < W; ++x) {
      const double c = resp[static_cast<std::size_t>(y) * W + x];
      if (!(c >= threshold)) continue;
      bool strict = true;
      for (int dy = -1; dy <= 1 && strict; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (resp[static_cast<std::size_t>(y + dy) * W + (x + dx)] >= c) {
            strict = false;
            break;
          }
        }
      if (!strict) continue;
      auto refine = [](double fm, double f0, double fp) {
        const double denom = fm + fp - 2.0 * f0;
        if (std::fabs(denom) < 1e-12) return 0.0;
        return std::clamp((fm - fp) / (2.0 * denom), -0.5, 0.5);
      };
      Detection d;
      d.x = x + refine(resp[static_cast<std::size_t>(y) * W + x - 1], c,
                       resp[static_cast<std::size_t>(y) * W + x + 1]);
      d.y = y + refine(resp[static_cast<std::size_t>(y - 1) * W + x], c,
                       resp[static_cast<std::size_t>(y + 1) * W + x]);
      d.score = peak > 0.0 ? std::min(1.0, c / peak) : 0.0;
      out.push_back(d);
    }
  return out;
}

// --------------------------------------------------------------- reports

struct FrameMetrics {
  int frame = 0;
  int tp = 0, fp = 0, fn = 0;
  double f1 = 1.0;
  std::optional<double> rmse;  // informational; sequence RMSE pools pairs
  double psnr_noisy = 0.0;
  double psnr_denoised = 0.0;
  int n_detections = 0;
};

struct SequenceMetrics {
  std::string label;
  int frames = 0;
  int tp = 0, fp = 0, fn = 0;            // pooled counts
  double f1_pooled = 1.0;                // from pooled counts
  double f1_mean = 1.0, f1_std = 0.0;    // across frames
  double sq_dist_sum = 0.0;              // pooled over matched pairs
  std::optional<double> rmse_pooled;
  double psnr_noisy_mean = 0.0, psnr_noisy_std = 0.0;
  double psnr_denoised_mean = 0.0, psnr_denoised_std = 0.0;
  std::vector<FrameMetrics> per_frame;
};

namespace detail {

struct MeanStd {
  double mean = 0.0, sd = 0.0;
};

// Sample standard deviation (n-1); a single observation has spread 0.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= v.size();
  if (v.size() < 2) return r;
  double acc = 0.0;
  for (double x : v) acc += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(acc / (v.size() - 1));
  return r;
}

inline void finalize_sequence(SequenceMetrics& s) {
  s.frames = static_cast<int>(s.per_frame.size());
  s.tp = s.fp = s.fn = 0;
  std::vector<double> f1s, pn, pd;
  int matched = 0;
  for (const auto& f : s.per_frame) {
    s.tp += f.tp;
    s.fp += f.fp;
    s.fn += f.fn;
    matched += f.tp;
    f1s.push_back(f.f1);
    pn.push_back(f.psnr_noisy);
    pd.push_back(f.psnr_denoised);
  }
  s.f1_pooled = f1_score(s.tp, s.fp, s.fn);
  auto f1ms = mean_std(f1s);
  s.f1_mean = f1ms.mean;
  s.f1_std = f1ms.sd;
  s.rmse_pooled = matched > 0
                      ? std::optional<double>(std::sqrt(s.sq_dist_sum / matched))
                      : std::nullopt;
  auto pnms = mean_std(pn);
  s.psnr_noisy_mean = pnms.mean;
  s.psnr_noisy_std = pnms.sd;
  auto pdms = mean_std(pd);
  s.psnr_denoised_mean = pdms.mean;
  s.psnr_denoised_std = pdms.sd;
}

}  // namespace detail

// Detection + matching + metrics for every frame of one sequence. Frames are
// independent; `threads` > 1 runs inference in parallel with results written
// to per-frame slots, so the aggregate is identical for any thread count.
inline SequenceMetrics evaluate(const model::ModelParameters& mp,
                                const sim::SequenceDataset& ds, double gate = 5.0,
                                const DetectConfig& cfg = {}, int threads = 1) {
  cfg.validate();
  if (!(gate > 0)) throw UsageError("evaluate: gate must be > 0");
  const int n = static_cast<int>(ds.frames.size());
  SequenceMetrics s;
  {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s snr=%g",
                  sim::to_string(ds.spec.scenario).c_str(), ds.spec.snr);
    s.label = buf;
  }
  s.per_frame.resize(n);
  std::vector<double> frame_sqdist(n, 0.0);

  auto eval_frame = [&](int f) {
    const auto& fr = ds.frames[f];
    auto inf = infer(mp, fr.noisy);
    auto dets = detections_from_logits(inf.score_logits, inf.height, inf.width, cfg);
    std::vector<std::pair<double, double>> refs;
    refs.reserve(fr.truth.size());
    for (const auto& t : fr.truth) refs.emplace_back(t.x, t.y);
    auto mr = match(dets, refs, gate);
    FrameMetrics fm;
    fm.frame = f;
    fm.tp = mr.tp();
    fm.fp = mr.fp();
    fm.fn = mr.fn();
    fm.f1 = f1_score(fm.tp, fm.fp, fm.fn);
    fm.n_detections = static_cast<int>(dets.size());
    std::vector<double> dists;
    for (const auto& p : mr.pairs) {
      dists.push_back(p.distance);
      frame_sqdist[f] += p.distance * p.distance;
    }
    fm.rmse = rmse(dists);
    fm.psnr_noisy = psnr(fr.noisy, fr.clean);
    fm.psnr_denoised =
        psnr_normalized(inf.denoised, normalize(fr.clean, NormRule{}).pix);
    s.per_frame[f] = fm;
  };

  threads = std::max(1, threads);
  if (threads == 1 || n <= 1) {
    for (int f = 0; f < n; ++f) eval_frame(f);
  } else {
    std::vector<std::thread> pool;
    std::size_t stride = threads;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t]() {
        for (int f = t; f < n; f += static_cast<int>(stride)) eval_frame(f);
      });
    for (auto& th : pool) th.join();
  }
  for (double d : frame_sqdist) s.sq_dist_sum += d;
  detail::finalize_sequence(s);
  return s;
}

struct MetricsReport {
  std::vector<SequenceMetrics> sequences;
  SequenceMetrics aggregate;  // pooled counts, per-frame stats over all frames
  double gate = 5.0;
  DetectConfig detect_config;
};

inline MetricsReport make_report(std::vector<SequenceMetrics> seqs, double gate,
                                 const DetectConfig& cfg) {
  MetricsReport rep;
  rep.gate = gate;
  rep.detect_config = cfg;
  rep.aggregate.label = "aggregate";
  for (auto& s : seqs) {
    for (const auto& f : s.per_frame) rep.aggregate.per_frame.push_back(f);
    rep.aggregate.sq_dist_sum += s.sq_dist_sum;
  }
  detail::finalize_sequence(rep.aggregate);
  rep.sequences = std::move(seqs);
  return rep;
}

namespace detail {

inline nlohmann::json sequence_json(const SequenceMetrics& s) {
  nlohmann::json j;
  j["label"] = s.label;
  j["frames"] = s.frames;
  j["tp"] = s.tp;
  j["fp"] = s.fp;
  j["fn"] = s.fn;
  j["f1_pooled"] = s.f1_pooled;
  j["f1_mean"] = s.f1_mean;
  j["f1_std"] = s.f1_std;
  if (s.rmse_pooled)
    j["rmse_px"] = *s.rmse_pooled;
  else
    j["rmse_px"] = nullptr;
  j["psnr_noisy_db"] = {{"mean", s.psnr_noisy_mean}, {"std", s.psnr_noisy_std}};
  j["psnr_denoised_db"] = {{"mean", s.psnr_denoised_mean},
                           {"std", s.psnr_denoised_std}};
  return j;
}

}  // namespace detail

inline std::string report_to_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["aggregation"] =
      "metrics per frame within each sequence; mean +/- sample std across "
      "frames; RMSE pooled over matched pairs per sequence";
  j["gate_px"] = rep.gate;
  j["tau"] = rep.detect_config.tau;
  j["nms_radius_px"] = rep.detect_config.nms_radius;
  j["window"] = rep.detect_config.window;
  j["sequences"] = nlohmann::json::array();
  for (const auto& s : rep.sequences) j["sequences"].push_back(detail::sequence_json(s));
  j["aggregate"] = detail::sequence_json(rep.aggregate);
  return j.dump(2) + "\n";
}

inline std::string report_to_text(const MetricsReport& rep) {
  auto fmt = [](const char* f, auto... args) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), f, args...);
    return std::string(buf);
  };
  std::string out;
  out += fmt("%-24s %7s %9s %9s %12s %16s %16s\n", "sequence", "frames", "f1",
             "f1(pool)", "rmse(px)", "psnr-noisy(dB)", "psnr-deno(dB)");
  auto row = [&](const SequenceMetrics& s) {
    std::string rm = s.rmse_pooled ? fmt("%.3f", *s.rmse_pooled) : std::string("-");
    out += fmt("%-24s %7d %4.3f±%.3f %9.3f %12s %8.2f±%6.2f %8.2f±%6.2f\n",
               s.label.c_str(), s.frames, s.f1_mean, s.f1_std, s.f1_pooled,
               rm.c_str(), s.psnr_noisy_mean, s.psnr_noisy_std,
               s.psnr_denoised_mean, s.psnr_denoised_std);
  };
  for (const auto& s : rep.sequences) row(s);
  row(rep.aggregate);
  return out;
}

inline std::string detections_to_csv(
    const std::vector<std::vector<Detection>>& per_frame) {
  std::string out = "frame,x,y,score\n";
  char buf[128];
  for (std::size_t f = 0; f < per_frame.size(); ++f)
    for (const auto& d : per_frame[f]) {
      std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f\n", f, d.x, d.y, d.score);
      out += buf;
    }
  return out;
}

}  // namespace dndt::eval
