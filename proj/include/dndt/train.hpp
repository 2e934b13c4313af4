#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dndt/errors.hpp"
#include "dndt/eval.hpp"
#include "dndt/image.hpp"
#include "dndt/losses.hpp"
#include "dndt/model.hpp"
#include "dndt/rng.hpp"
#include "dndt/simgen.hpp"
#include "dndt/tensor.hpp"

namespace dndt::train {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.1;
  int plateau_patience = 10;
  double plateau_min_delta = 1e-6;
  double lr_floor = 1e-7;
  int warm_start_epochs = 20;  // gamma = 0 while epoch < this
  int crop = 128;
  double val_fraction = 0.3;
  int max_consecutive_skips = 50;
  double gate = 5.0;  // for the validation F1
  std::uint64_t seed = 1;
  loss::LossConfig loss;

  void validate() const {
    if (epochs < 0) throw UsageError("train: epochs must be >= 0");
    if (batch_size < 1) throw UsageError("train: batch size must be >= 1");
    if (!(lr > 0)) throw UsageError("train: lr must be > 0");
    if (crop < 16 || crop % 4 != 0)
      throw UsageError("train: crop must be >= 16 and divisible by 4");
    if (!(plateau_factor > 0 && plateau_factor < 1))
      throw UsageError("train: plateau factor must be in (0,1)");
    if (plateau_patience < 1) throw UsageError("train: patience must be >= 1");
    if (!(val_fraction > 0 && val_fraction < 1))
      throw UsageError("train: validation fraction must be in (0,1)");
    if (warm_start_epochs < 0) throw UsageError("train: warm start must be >= 0");
    loss.validate();
  }
};

// ------------------------------------------------------------------ Adam

struct AdamState {
  std::vector<std::vector<double>> m, v;  // parallel to the parameter table
  std::int64_t step = 0;
  double lr = 1e-4;
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  int consecutive_skips = 0;
};

inline AdamState init_adam(const model::ModelParameters& mp, double lr) {
  AdamState st;
  st.lr = lr;
  st.m.reserve(mp.values.size());
  st.v.reserve(mp.values.size());
  for (const auto& p : mp.values) {
    st.m.emplace_back(p.size(), 0.0);
    st.v.emplace_back(p.size(), 0.0);
  }
  return st;
}

// Bias-corrected Adam step; moments and the update are computed in double
// and the result cast back to the float parameters. Returns false (and
// counts a consecutive skip) when any gradient element is non-finite.
inline bool adam_step(model::ModelParameters& mp,
                      const std::vector<std::vector<double>>& grads,
                      AdamState& st, const TrainConfig& cfg) {
  check_shape(grads.size() == mp.values.size(), "adam: gradient table mismatch");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    check_shape(grads[k].size() == mp.values[k].size(),
                "adam: gradient shape mismatch at " + mp.defs[k].name);
    for (double g : grads[k])
      if (!std::isfinite(g)) {
        ++st.consecutive_skips;
        return false;
      }
  }
  st.consecutive_skips = 0;
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& m = st.m[k];
    auto& v = st.v[k];
    auto& p = mp.values[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = static_cast<float>(static_cast<double>(p[i]) -
                                st.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  }
  return true;
}

// Reduce lr by `plateau_factor` after `plateau_patience` consecutive epochs
// without an absolute improvement of at least `plateau_min_delta`; floored.
inline void plateau_update(AdamState& st, double val_loss, const TrainConfig& cfg) {
  if (st.best_val - val_loss >= cfg.plateau_min_delta) {
    st.best_val = val_loss;
    st.epochs_since_improvement = 0;
    return;
  }
  if (++st.epochs_since_improvement >= cfg.plateau_patience) {
    st.lr = std::max(st.lr * cfg.plateau_factor, cfg.lr_floor);
    st.epochs_since_improvement = 0;
  }
}

// ------------------------------------------------------------------ crops

struct Crop {
  Image noisy, clean;
  std::vector<loss::Particle> truth;  // rebased to crop coordinates
  int ox = 0, oy = 0;
};

inline constexpr double kWindowBorderMargin = 3.0;  // px, crop-border exclusion

namespace detail {

inline Crop cut(const sim::FramePair& frame, int ox, int oy, int crop,
                double presence_radius) {
  Crop c;
  c.ox = ox;
  c.oy = oy;
  c.noisy.height = c.noisy.width = crop;
  c.clean.height = c.clean.width = crop;
  c.noisy.pix.resize(static_cast<std::size_t>(crop) * crop);
  c.clean.pix.resize(static_cast<std::size_t>(crop) * crop);
  const int W = frame.noisy.width;
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x) {
      c.noisy.pix[static_cast<std::size_t>(y) * crop + x] =
          frame.noisy.pix[static_cast<std::size_t>(oy + y) * W + ox + x];
      c.clean.pix[static_cast<std::size_t>(y) * crop + x] =
          frame.clean.pix[static_cast<std::size_t>(oy + y) * W + ox + x];
    }
  for (const auto& t : frame.truth) {
    const double lx = t.x - ox, ly = t.y - oy;
    // keep anything whose presence disc can touch a crop pixel
    if (lx < -presence_radius || ly < -presence_radius ||
        lx > crop - 1 + presence_radius || ly > crop - 1 + presence_radius)
      continue;
    loss::Particle p;
    p.id = t.id;
    p.x = lx;
    p.y = ly;
    const double border = std::min(std::min(lx, ly),
                                   std::min(crop - 1 - lx, crop - 1 - ly));
    p.window_eligible = border >= kWindowBorderMargin;
    c.truth.push_back(p);
  }
  return c;
}

inline int particles_centered_in(const Crop& c, int crop) {
  int n = 0;
  for (const auto& p : c.truth)
    if (p.x >= 0 && p.x <= crop - 1 && p.y >= 0 && p.y <= crop - 1) ++n;
  return n;
}

}  // namespace detail

// Uniform random crop, redrawn up to 20 times until it contains at least one
// particle (after which an empty crop is accepted). Particles within 3 px of
// the crop border keep shaping the presence mask but get no DSNT window.
inline Crop sample_crop(const sim::FramePair& frame, int crop, rng::Stream& rs,
                        double presence_radius = 1.5) {
  check_shape(crop <= frame.noisy.width && crop <= frame.noisy.height,
              "sample_crop: crop larger than frame");
  const int max_ox = frame.noisy.width - crop;
  const int max_oy = frame.noisy.height - crop;
  Crop c;
  for (int attempt = 0; attempt < 21; ++attempt) {
    const int ox = static_cast<int>(rs.uniform_int(0, max_ox));
    const int oy = static_cast<int>(rs.uniform_int(0, max_oy));
    c = detail::cut(frame, ox, oy, crop, presence_radius);
    if (detail::particles_centered_in(c, crop) > 0) return c;
  }
  return c;  // accepted empty after the redraw budget
}

// ------------------------------------------------------------- splitting

struct FrameRef {
  int seq = 0, frame = 0;
};

struct Split {
  std::vector<FrameRef> train, val;
};

// Per-sequence 70/30 split: the last ceil-rounded fraction of each sequence's
// frames validates. A single-frame sequence is reused for both roles so tiny
// smoke datasets remain trainable.
inline Split split_frames(std::span<const sim::SequenceDataset> data,
                          double val_fraction) {
  Split s;
  for (int q = 0; q < static_cast<int>(data.size()); ++q) {
    const int n = static_cast<int>(data[q].frames.size());
    if (n == 0) continue;
    if (n == 1) {
      s.train.push_back({q, 0});
      s.val.push_back({q, 0});
      continue;
    }
    int n_val = static_cast<int>(std::lround(val_fraction * n));
    n_val = std::clamp(n_val, 1, n - 1);
    for (int f = 0; f < n - n_val; ++f) s.train.push_back({q, f});
    for (int f = n - n_val; f < n; ++f) s.val.push_back({q, f});
  }
  return s;
}

// ------------------------------------------------------------ validation

struct ValidationResult {
  double loss = 0.0;
  double f1 = 1.0;
  int frames = 0;
  int tp = 0, fp = 0, fn = 0;
};

namespace detail {

inline constexpr std::uint64_t kShuffleTag = 0x73687566666c6531ull;
inline constexpr std::uint64_t kCropTag = 0x63726f7074616731ull;
inline constexpr std::uint64_t kJitterTag = 0x6a69747465723131ull;
inline constexpr std::uint64_t kValTag = 0x76616c6964617465ull;

inline std::vector<float> to_float01(const Image& img) {
  Image n = normalize(img, NormRule{});
  return std::vector<float>(n.pix.begin(), n.pix.end());
}

inline std::vector<loss::Particle> truth_particles(const sim::FramePair& fr) {
  std::vector<loss::Particle> out;
  out.reserve(fr.truth.size());
  for (const auto& t : fr.truth) {
    loss::Particle p;
    p.id = t.id;
    p.x = t.x;
    p.y = t.y;
    const double border =
        std::min(std::min(t.x, t.y), std::min(fr.noisy.width - 1 - t.x,
                                              fr.noisy.height - 1 - t.y));
    p.window_eligible = border >= kWindowBorderMargin;
    out.push_back(p);
  }
  return out;
}

}  // namespace detail

// Joint loss + detection F1 over a held-out frame list. Parameters are used
// read-only; window jitter comes from a fixed per-frame stream so the number
// is reproducible across epochs and runs.
inline ValidationResult validate(const model::ModelParameters& mp,
                                 std::span<const sim::SequenceDataset> data,
                                 const std::vector<FrameRef>& refs,
                                 const loss::LossConfig& lcfg, double gate,
                                 std::uint64_t seed) {
  if (refs.empty()) throw UsageError("validate: empty validation set");
  ValidationResult res;
  res.frames = static_cast<int>(refs.size());
  double loss_sum = 0.0;
  for (const auto& r : refs) {
    const auto& fr = data[r.seq].frames[r.frame];
    ad::Tape<float> tape;
    auto params = model::make_param_tensors(tape, mp, /*requires_grad=*/false);
    auto x = tape.constant({1, 1, fr.noisy.height, fr.noisy.width},
                           detail::to_float01(fr.noisy));
    auto fwd = model::forward(params, mp.config, x);
    auto clean01 = tape.constant({1, 1, fr.clean.height, fr.clean.width},
                                 detail::to_float01(fr.clean));
    auto truth = detail::truth_particles(fr);
    const std::uint64_t frame_seed = rng::mix(
        rng::mix(seed, detail::kValTag),
        (static_cast<std::uint64_t>(r.seq) << 32) | static_cast<std::uint64_t>(r.frame));
    auto jl = loss::joint_loss(fwd.score_logits, fwd.denoised, clean01, truth,
                               lcfg, frame_seed);
    loss_sum += static_cast<double>(jl.total.value()[0]);

    auto sl = fwd.score_logits.value();
    std::vector<double> logits(sl.begin(), sl.end());
    auto dets = eval::detections_from_logits(logits, fr.noisy.height,
                                             fr.noisy.width, eval::DetectConfig{});
    std::vector<std::pair<double, double>> gt;
    gt.reserve(fr.truth.size());
    for (const auto& t : fr.truth) gt.emplace_back(t.x, t.y);
    auto mr = eval::match(dets, gt, gate);
    res.tp += mr.tp();
    res.fp += mr.fp();
    res.fn += mr.fn();
  }
  res.loss = loss_sum / res.frames;
  res.f1 = eval::f1_score(res.tp, res.fp, res.fn);
  return res;
}

// -------------------------------------------------------------- training

struct EpochRecord {
  int epoch = 0;
  std::string phase;  // "warm" or "joint"
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_f1 = 0.0;
  int skipped_steps = 0;
};

struct TrainResult {
  model::ModelParameters final_params;
  model::ModelParameters best_params;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> log;
};

inline std::string log_to_csv(const std::vector<EpochRecord>& log) {
  std::string out = "epoch,phase,lr,train_loss,val_loss,val_f1\n";
  char buf[192];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.8g,%.8g,%.8g,%.8g\n", r.epoch,
                  r.phase.c_str(), r.lr, r.train_loss, r.val_loss, r.val_f1);
    out += buf;
  }
  return out;
}

// Deterministic training loop: warm-start epochs run the detection loss only
// (gamma = 0), after which the configured gamma joins in and the plateau
// tracker restarts (the monitored objective changes scale at the switch).
inline TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                         std::span<const sim::SequenceDataset> data) {
  mcfg.validate();
  tcfg.validate();
  if (data.empty()) throw UsageError("train: no datasets given");
  for (const auto& ds : data) {
    if (ds.frames.empty()) throw UsageError("train: dataset with no frames");
    if (tcfg.crop > ds.frames[0].noisy.width || tcfg.crop > ds.frames[0].noisy.height)
      throw UsageError("train: crop exceeds frame size");
  }

  TrainResult result;
  auto mp = model::init_params(mcfg);
  auto split = split_frames(data, tcfg.val_fraction);
  if (split.train.empty()) throw UsageError("train: empty training split");
  auto adam = init_adam(mp, tcfg.lr);
  result.best_params = mp;

  const int n_train = static_cast<int>(split.train.size());
  std::vector<std::vector<double>> grad_acc(mp.values.size());
  for (std::size_t k = 0; k < mp.values.size(); ++k)
    grad_acc[k].assign(mp.values[k].size(), 0.0);

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const bool warm = epoch < tcfg.warm_start_epochs;
    loss::LossConfig lcfg = tcfg.loss;
    if (warm) lcfg.gamma = 0.0;
    if (epoch == tcfg.warm_start_epochs) {
      // The monitored objective changes scale when the denoising term joins,
      // so both the plateau tracker and the best-checkpoint floor restart;
      // otherwise no joint-phase epoch could ever beat a warm-phase value.
      adam.best_val = std::numeric_limits<double>::infinity();
      adam.epochs_since_improvement = 0;
      result.best_val_loss = std::numeric_limits<double>::infinity();
    }

    // deterministic per-epoch order
    std::vector<FrameRef> order = split.train;
    rng::Stream shuffle_rs(rng::mix(tcfg.seed, detail::kShuffleTag ^
                                                   static_cast<std::uint64_t>(epoch)));
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rs.uniform_int(0, i));
      std::swap(order[i], order[j]);
    }

    double epoch_loss_sum = 0.0;
    int epoch_loss_count = 0;
    int skipped = 0;
    std::vector<int> skipped_batches;

    for (int start = 0; start < n_train; start += tcfg.batch_size) {
      const int end = std::min(n_train, start + tcfg.batch_size);
      for (auto& g : grad_acc) std::fill(g.begin(), g.end(), 0.0);
      int batch_n = 0;
      double batch_loss_sum = 0.0;
      bool bad = false;

      for (int idx = start; idx < end && !bad; ++idx) {
        const auto& fr = data[order[idx].seq].frames[order[idx].frame];
        const std::uint64_t counter =
            static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(n_train) +
            static_cast<std::uint64_t>(idx);
        rng::Stream crop_rs(rng::mix(rng::mix(tcfg.seed, detail::kCropTag), counter));
        Crop crop = sample_crop(fr, tcfg.crop, crop_rs, lcfg.presence_radius);

        ad::Tape<float> tape;
        auto params = model::make_param_tensors(tape, mp, /*requires_grad=*/true);
        auto x = tape.constant({1, 1, tcfg.crop, tcfg.crop},
                               detail::to_float01(crop.noisy));
        auto fwd = model::forward(params, mcfg, x);
        auto clean01 = tape.constant({1, 1, tcfg.crop, tcfg.crop},
                                     detail::to_float01(crop.clean));
        auto jl = loss::joint_loss(fwd.score_logits, fwd.denoised, clean01,
                                   crop.truth, lcfg,
                                   rng::mix(rng::mix(tcfg.seed, detail::kJitterTag),
                                            counter));
        const double lv = jl.total.value()[0];
        if (!std::isfinite(lv)) {
          bad = true;
          break;
        }
        tape.backward(jl.total);
        for (std::size_t k = 0; k < params.ordered.size(); ++k) {
          auto g = params.ordered[k].grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            grad_acc[k][i] += static_cast<double>(g[i]);
        }
        batch_loss_sum += lv;
        ++batch_n;
      }

      bool applied = false;
      if (!bad && batch_n > 0) {
        for (auto& g : grad_acc)
          for (auto& v : g) v /= batch_n;
        applied = adam_step(mp, grad_acc, adam, tcfg);
      } else {
        ++adam.consecutive_skips;
      }
      if (applied) {
        epoch_loss_sum += batch_loss_sum;
        epoch_loss_count += batch_n;
      } else {
        ++skipped;
        skipped_batches.push_back(start / tcfg.batch_size);
        if (adam.consecutive_skips > tcfg.max_consecutive_skips) {
          std::string msg = "train: aborted after " +
                            std::to_string(adam.consecutive_skips) +
                            " consecutive non-finite steps; epoch " +
                            std::to_string(epoch) + ", batches";
          for (int b : skipped_batches) msg += " " + std::to_string(b);
          throw NumericError(msg);
        }
      }
    }

    auto vres = validate(mp, data, split.val, lcfg, tcfg.gate, tcfg.seed);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = warm ? "warm" : "joint";
    rec.lr = adam.lr;  // the rate used for this epoch's steps
    rec.train_loss = epoch_loss_count > 0 ? epoch_loss_sum / epoch_loss_count : 0.0;
    rec.val_loss = vres.loss;
    rec.val_f1 = vres.f1;
    rec.skipped_steps = skipped;
    result.log.push_back(rec);

    if (vres.loss < result.best_val_loss) {
      result.best_val_loss = vres.loss;
      result.best_params = mp;
    }
    plateau_update(adam, vres.loss, tcfg);
  }

  result.final_params = std::move(mp);
  if (tcfg.epochs == 0) result.best_params = result.final_params;
  return result;
}

}  // namespace dndt::train
