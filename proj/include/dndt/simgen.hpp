#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dndt/errors.hpp"
#include "dndt/image.hpp"
#include "dndt/pgm.hpp"
#include "dndt/rng.hpp"

namespace dndt::sim {

inline constexpr char kDatasetFormat[] = "dndt-ds-1";

enum class Scenario { vesicle, receptor, microtubule };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::vesicle: return "vesicle";
    case Scenario::receptor: return "receptor";
    case Scenario::microtubule: return "microtubule";
  }
  return "vesicle";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "vesicle") return Scenario::vesicle;
  if (s == "receptor") return Scenario::receptor;
  if (s == "microtubule") return Scenario::microtubule;
  throw UsageError("unknown scenario: " + s);
}

struct SequenceSpec {
  Scenario scenario = Scenario::vesicle;
  double snr = 4.0;
  int n_particles = 50;
  int n_frames = 20;
  int height = 128;
  int width = 128;
  double background = 10.0;  // mean background photon count
  double psf_sigma = 1.0;    // px
  std::uint64_t seed = 1;

  void validate() const {
    if (!(snr > 0)) throw UsageError("snr must be > 0");
    if (n_particles < 1) throw UsageError("n_particles must be >= 1");
    if (n_frames < 1) throw UsageError("n_frames must be >= 1");
    if (height < 32 || width < 32) throw UsageError("height and width must be >= 32");
    if (!(background > 0)) throw UsageError("background must be > 0");
    if (!(psf_sigma > 0)) throw UsageError("psf_sigma must be > 0");
  }
};

// Scenario dynamics. Defaults produce displacements of roughly 1-3 px/frame.
struct MotionParams {
  double vesicle_sigma_d = 1.0;     // Brownian step std, px/frame/axis
  double receptor_sigma_d = 0.7;    // Brownian-mode step std
  double receptor_speed = 2.0;      // directed-mode speed, px/frame
  double receptor_stay_prob = 0.95; // per-state Markov stay probability
  double receptor_sigma_theta = 0.1;   // rad
  double microtubule_speed = 3.0;      // px/frame
  double microtubule_sigma_theta = 0.05;  // rad
};

struct ParticleTrack {
  std::int64_t id = 0;
  double x = 0.0, y = 0.0;        // sub-pixel position
  double vx = 0.0, vy = 0.0;      // px/frame
  bool alive = true;
  int mode = 0;                   // receptors: 0 = Brownian, 1 = directed
  double orientation = 0.0;       // rad; heading for comets/directed motion
};

struct TruthRow {
  std::int64_t id = 0;
  double x = 0.0, y = 0.0;
  double amplitude = 0.0;
};

struct FramePair {
  Image clean;                // photon-count units, >= background
  Image noisy;                // integer photon counts
  std::vector<TruthRow> truth;
};

struct SequenceDataset {
  SequenceSpec spec;
  std::vector<FramePair> frames;
};

// Peak amplitude A solving A / sqrt(A + B) = snr (Poisson noise at the peak).
inline double amplitude_for_snr(double snr, double background) {
  if (snr < 0 || background < 0)
    throw UsageError("amplitude_for_snr: snr and background must be >= 0");
  return (snr * snr + snr * std::sqrt(snr * snr + 4.0 * background)) / 2.0;
}

inline ParticleTrack spawn_particle(std::int64_t id, const SequenceSpec& spec,
                                    rng::Stream& rs) {
  ParticleTrack t;
  t.id = id;
  t.x = rs.uniform(0.0, static_cast<double>(spec.width));
  t.y = rs.uniform(0.0, static_cast<double>(spec.height));
  t.orientation = rs.uniform(0.0, 2.0 * M_PI);
  t.alive = true;
  t.mode = 0;
  return t;
}

// Advances one track by one frame. Marks the track dead if it leaves the
// field of view; the caller is responsible for spawning a replacement.
inline void step_motion(ParticleTrack& t, Scenario scenario, rng::Stream& rs,
                        const SequenceSpec& spec, const MotionParams& mp = {}) {
  switch (scenario) {
    case Scenario::vesicle: {
      t.vx = mp.vesicle_sigma_d * rs.normal();
      t.vy = mp.vesicle_sigma_d * rs.normal();
      break;
    }
    case Scenario::receptor: {
      if (rs.uniform() >= mp.receptor_stay_prob) t.mode = 1 - t.mode;
      if (t.mode == 0) {
        t.vx = mp.receptor_sigma_d * rs.normal();
        t.vy = mp.receptor_sigma_d * rs.normal();
      } else {
        t.orientation += mp.receptor_sigma_theta * rs.normal();
        t.vx = mp.receptor_speed * std::cos(t.orientation);
        t.vy = mp.receptor_speed * std::sin(t.orientation);
      }
      break;
    }
    case Scenario::microtubule: {
      t.orientation += mp.microtubule_sigma_theta * rs.normal();
      t.vx = mp.microtubule_speed * std::cos(t.orientation);
      t.vy = mp.microtubule_speed * std::sin(t.orientation);
      break;
    }
  }
  t.x += t.vx;
  t.y += t.vy;
  if (t.x < 0.0 || t.x >= spec.width || t.y < 0.0 || t.y >= spec.height)
    t.alive = false;
}

namespace detail {

// Adds one truncated Gaussian lobe (peak `amp` at (cx, cy)) to the image.
inline void add_gaussian(Image& img, double cx, double cy, double amp,
                         double sigma) {
  const double r = 4.0 * sigma;
  const double r2 = r * r;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const int x0 = std::max(0, static_cast<int>(std::ceil(cx - r)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::floor(cx + r)));
  const int y0 = std::max(0, static_cast<int>(std::ceil(cy - r)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::floor(cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double d2 = dx * dx + dy * dy;
      if (d2 <= r2) img.at(y, x) += amp * std::exp(-d2 * inv2s2);
    }
}

}  // namespace detail

// clean(x,y) = background + sum_i A_i * PSF_i(x - x_i, y - y_i), evaluated at
// pixel centers. Vesicles/receptors use an isotropic Gaussian truncated at
// 4*sigma; microtubule comets are a 4-lobe chain trailing the tip.
inline Image render_clean_frame(const std::vector<ParticleTrack>& tracks,
                                const SequenceSpec& spec, double amplitude) {
  Image img(spec.height, spec.width, spec.background);
  static constexpr double kCometWeights[4] = {1.0, 0.7, 0.45, 0.25};
  for (const auto& t : tracks) {
    if (!t.alive) continue;
    if (spec.scenario == Scenario::microtubule) {
      const double cx = std::cos(t.orientation), sy = std::sin(t.orientation);
      for (int k = 0; k < 4; ++k)
        detail::add_gaussian(img, t.x - k * cx, t.y - k * sy,
                             amplitude * kCometWeights[k], spec.psf_sigma);
    } else {
      detail::add_gaussian(img, t.x, t.y, amplitude, spec.psf_sigma);
    }
  }
  return img;
}

// Per-pixel Poisson sampling in row-major order from the given stream.
inline Image apply_poisson(const Image& clean, rng::Stream& rs) {
  Image noisy(clean.height, clean.width);
  for (std::size_t i = 0; i < clean.pix.size(); ++i) {
    if (clean.pix[i] < 0)
      throw NumericError("apply_poisson: negative clean intensity");
    noisy.pix[i] = static_cast<double>(rs.poisson(clean.pix[i]));
  }
  return noisy;
}

namespace detail {
// Distinct substream tags so motion and per-frame noise never collide.
inline constexpr std::uint64_t kMotionTag = 0x6d6f74696f6e5452ull;
inline constexpr std::uint64_t kFrameTag = 0x6672616d65000000ull;
}  // namespace detail

inline rng::Stream frame_noise_stream(std::uint64_t seed, int frame_index) {
  return rng::Stream(rng::mix(seed, detail::kFrameTag + static_cast<std::uint64_t>(frame_index)));
}

// Motion is evolved sequentially (each frame depends on the previous), then
// rendering and Poisson noise run frame-parallel: every frame draws from its
// own seeded stream, so the output is byte-identical for any thread count.
inline SequenceDataset make_sequence(const SequenceSpec& spec,
                                     const MotionParams& mp = {},
                                     int threads = 1) {
  spec.validate();
  if (threads < 1) throw UsageError("make_sequence: threads must be >= 1");
  const double amplitude = amplitude_for_snr(spec.snr, spec.background);
  rng::Stream motion(rng::mix(spec.seed, detail::kMotionTag));

  std::vector<ParticleTrack> tracks;
  std::int64_t next_id = 0;
  tracks.reserve(spec.n_particles);
  for (int i = 0; i < spec.n_particles; ++i)
    tracks.push_back(spawn_particle(next_id++, spec, motion));

  SequenceDataset ds;
  ds.spec = spec;
  ds.frames.resize(spec.n_frames);
  std::vector<std::vector<ParticleTrack>> snapshots(spec.n_frames);
  for (int f = 0; f < spec.n_frames; ++f) {
    if (f > 0) {
      const std::size_t count = tracks.size();
      for (std::size_t i = 0; i < count; ++i) {
        step_motion(tracks[i], spec.scenario, motion, spec, mp);
        if (!tracks[i].alive)
          tracks[i] = spawn_particle(next_id++, spec, motion);
      }
    }
    snapshots[f] = tracks;
    auto& truth = ds.frames[f].truth;
    truth.reserve(tracks.size());
    for (const auto& t : tracks)
      truth.push_back({t.id, t.x, t.y, amplitude});
  }

  auto render_frame = [&](int f) {
    FramePair& fp = ds.frames[f];
    fp.clean = render_clean_frame(snapshots[f], spec, amplitude);
    rng::Stream noise = frame_noise_stream(spec.seed, f);
    fp.noisy = apply_poisson(fp.clean, noise);
  };
  if (threads == 1 || spec.n_frames <= 1) {
    for (int f = 0; f < spec.n_frames; ++f) render_frame(f);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t]() {
        for (int f = t; f < spec.n_frames; f += threads) render_frame(f);
      });
    for (auto& th : pool) th.join();
  }
  return ds;
}

// Empirical spot SNR: median over sampled truth positions of
// (peak - background) / sqrt(peak), peak read from a 3x3 clean-image window.
inline double median_spot_snr(const SequenceDataset& ds, int max_spots = 100) {
  std::vector<double> snrs;
  for (const auto& fp : ds.frames) {
    for (const auto& row : fp.truth) {
      if (static_cast<int>(snrs.size()) >= max_spots) break;
      const int cx = static_cast<int>(std::lround(row.x));
      const int cy = static_cast<int>(std::lround(row.y));
      if (cx < 1 || cx >= ds.spec.width - 1 || cy < 1 || cy >= ds.spec.height - 1)
        continue;
      double peak = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          peak = std::max(peak, fp.clean.at(cy + dy, cx + dx));
      if (peak > 0.0) snrs.push_back((peak - ds.spec.background) / std::sqrt(peak));
    }
    if (static_cast<int>(snrs.size()) >= max_spots) break;
  }
  if (snrs.empty()) throw Error("median_spot_snr: no usable spots");
  std::nth_element(snrs.begin(), snrs.begin() + snrs.size() / 2, snrs.end());
  return snrs[snrs.size() / 2];
}

// ---- dataset directory I/O -------------------------------------------------
//
// Layout: manifest.json, noisy/t%04d.pgm, clean/t%04d.pgm, gt/t%04d.csv.
// PGMs are 16-bit (counts clamped to [0, 65535]); ground-truth CSVs carry
// sub-pixel positions with 6 decimal places.

namespace detail {

inline std::string frame_name(const char* stem, int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "t%04d.%s", index, ext);
  return std::string(stem) + "/" + buf;
}

}  // namespace detail

inline nlohmann::json spec_to_json(const SequenceSpec& spec) {
  return nlohmann::json{
      {"format", kDatasetFormat},
      {"scenario", to_string(spec.scenario)},
      {"snr", spec.snr},
      {"n_particles", spec.n_particles},
      {"n_frames", spec.n_frames},
      {"height", spec.height},
      {"width", spec.width},
      {"background", spec.background},
      {"psf_sigma", spec.psf_sigma},
      {"seed", spec.seed},
  };
}

inline SequenceSpec spec_from_json(const nlohmann::json& j) {
  if (!j.contains("format") || j.at("format").get<std::string>() != kDatasetFormat)
    throw IoError(IoError::Code::bad_version, "unsupported dataset format version");
  SequenceSpec spec;
  try {
    spec.scenario = scenario_from_string(j.at("scenario").get<std::string>());
    spec.snr = j.at("snr").get<double>();
    spec.n_particles = j.at("n_particles").get<int>();
    spec.n_frames = j.at("n_frames").get<int>();
    spec.height = j.at("height").get<int>();
    spec.width = j.at("width").get<int>();
    spec.background = j.at("background").get<double>();
    spec.psf_sigma = j.at("psf_sigma").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::bad_format, std::string("bad manifest: ") + e.what());
  }
  return spec;
}

inline void write_truth_csv(const std::string& path,
                            const std::vector<TruthRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError(IoError::Code::open_failed, "cannot open for write: " + path);
  out << "id,x,y,amplitude\n";
  char line[128];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%lld,%.6f,%.6f,%.6f\n",
                  static_cast<long long>(r.id), r.x, r.y, r.amplitude);
    out << line;
  }
  if (!out) throw IoError(IoError::Code::truncated, "short write: " + path);
}

inline std::vector<TruthRow> read_truth_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoError::Code::open_failed, "cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "id,x,y,amplitude")
    throw IoError(IoError::Code::bad_format, "bad ground-truth CSV header: " + path);
  std::vector<TruthRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TruthRow r;
    long long id = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", &id, &r.x, &r.y,
                    &r.amplitude) != 4)
      throw IoError(IoError::Code::bad_format, "bad ground-truth CSV row: " + line);
    r.id = id;
    rows.push_back(r);
  }
  return rows;
}

inline void write_dataset(const std::string& dir, const SequenceDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "noisy");
  fs::create_directories(fs::path(dir) / "clean");
  fs::create_directories(fs::path(dir) / "gt");
  {
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw IoError(IoError::Code::open_failed, "cannot write manifest in " + dir);
    out << spec_to_json(ds.spec).dump(2) << "\n";
  }
  for (int f = 0; f < static_cast<int>(ds.frames.size()); ++f) {
    const auto& fp = ds.frames[f];
    write_pgm16(dir + "/" + detail::frame_name("noisy", f, "pgm"), fp.noisy);
    write_pgm16(dir + "/" + detail::frame_name("clean", f, "pgm"), fp.clean);
    write_truth_csv(dir + "/" + detail::frame_name("gt", f, "csv"), fp.truth);
  }
}

inline SequenceDataset read_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw IoError(IoError::Code::open_failed, "missing manifest.json in " + dir);
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::bad_format, std::string("bad manifest: ") + e.what());
  }
  SequenceDataset ds;
  ds.spec = spec_from_json(j);
  ds.frames.resize(ds.spec.n_frames);
  for (int f = 0; f < ds.spec.n_frames; ++f) {
    auto& fp = ds.frames[f];
    fp.noisy = read_pgm16(dir + "/" + detail::frame_name("noisy", f, "pgm"));
    fp.clean = read_pgm16(dir + "/" + detail::frame_name("clean", f, "pgm"));
    fp.truth = read_truth_csv(dir + "/" + detail::frame_name("gt", f, "csv"));
    if (fp.noisy.width != ds.spec.width || fp.noisy.height != ds.spec.height ||
        fp.clean.width != ds.spec.width || fp.clean.height != ds.spec.height)
      throw IoError(IoError::Code::count_mismatch,
                    "frame size disagrees with manifest in " + dir);
  }
  return ds;
}

}  // namespace dndt::sim
