// dndt: generate data, train, run inference, and evaluate from one binary.
//
// Every command merges its settings from built-in defaults, an optional flat
// JSON config file (--config), and command-line flags (highest precedence),
// then writes the effective configuration next to its primary output so any
// run can be reproduced from its artifacts alone.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dndt/errors.hpp"
#include "dndt/eval.hpp"
#include "dndt/gradsuite.hpp"
#include "dndt/image.hpp"
#include "dndt/model.hpp"
#include "dndt/pgm.hpp"
#include "dndt/simgen.hpp"
#include "dndt/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int default_threads() {
  if (const char* env = std::getenv("DNDT_THREADS")) {
    const int t = std::atoi(env);
    if (t >= 1) return t;
  }
  return 1;
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw dndt::IoError(dndt::IoError::Code::open_failed,
                               "cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw dndt::IoError(dndt::IoError::Code::bad_format,
                        std::string("bad config JSON: ") + e.what());
  }
  if (!j.is_object())
    throw dndt::UsageError("config file must hold a flat JSON object");
  return j;
}

// Binds config-file keys to CLI options: a key fills its option only when
// the flag was not given on the command line, and keys that match no option
// of the active command are rejected.
class Overlay {
 public:
  Overlay(CLI::App* cmd, const json& file_cfg) : cmd_(cmd), cfg_(file_cfg) {}

  template <typename T>
  void bind(const std::string& key, T& target) {
    known_.push_back(key);
    if (!cfg_.contains(key)) return;
    auto* opt = cmd_->get_option("--" + key);
    if (opt->count() > 0) return;  // explicit flag wins
    try {
      target = cfg_.at(key).get<T>();
    } catch (const json::exception&) {
      throw dndt::UsageError("config key '" + key + "' has the wrong type");
    }
  }

  void finish() const {
    for (auto it = cfg_.begin(); it != cfg_.end(); ++it) {
      bool ok = false;
      for (const auto& k : known_) ok = ok || k == it.key();
      if (!ok)
        throw dndt::UsageError("unknown config key for this command: " +
                               it.key());
    }
  }

 private:
  CLI::App* cmd_;
  const json& cfg_;
  std::vector<std::string> known_;
};

void write_effective_config(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw dndt::IoError(dndt::IoError::Code::open_failed,
                                "cannot write config echo: " + path);
  out << j.dump(2) << "\n";
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw dndt::IoError(dndt::IoError::Code::open_failed,
                                "cannot write " + path);
  out << body;
}

std::pair<int, int> parse_size(const std::string& s) {
  int w = 0, h = 0;
  if (std::sscanf(s.c_str(), "%dx%d", &w, &h) != 2 || w < 1 || h < 1)
    throw dndt::UsageError("bad --size, expected WIDTHxHEIGHT: " + s);
  return {w, h};
}

std::vector<dndt::sim::SequenceDataset> read_datasets(
    const std::vector<std::string>& dirs) {
  if (dirs.empty()) throw dndt::UsageError("at least one --data is required");
  std::vector<dndt::sim::SequenceDataset> out;
  out.reserve(dirs.size());
  for (const auto& d : dirs) out.push_back(dndt::sim::read_dataset(d));
  return out;
}

// ---------------------------------------------------------------- commands

struct GenArgs {
  std::string scenario = "vesicle";
  double snr = 4.0;
  int particles = 50;
  int frames = 20;
  std::string size = "128x128";
  double background = 10.0;
  double psf_sigma = 1.0;
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out;
  bool force = false;
};

int cmd_gen(const GenArgs& a) {
  dndt::sim::SequenceSpec spec;
  spec.scenario = dndt::sim::scenario_from_string(a.scenario);
  spec.snr = a.snr;
  spec.n_particles = a.particles;
  spec.n_frames = a.frames;
  auto [w, h] = parse_size(a.size);
  spec.width = w;
  spec.height = h;
  spec.background = a.background;
  spec.psf_sigma = a.psf_sigma;
  spec.seed = a.seed;
  spec.validate();

  if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.force)
    throw dndt::UsageError("output directory exists and is not empty (use --force): " +
                           a.out);

  auto ds = dndt::sim::make_sequence(spec, {}, a.threads);
  dndt::sim::write_dataset(a.out, ds);
  write_effective_config(
      (fs::path(a.out) / "run_config.json").string(),
      json{{"scenario", a.scenario},
           {"snr", a.snr},
           {"particles", a.particles},
           {"frames", a.frames},
           {"size", a.size},
           {"background", a.background},
           {"psf_sigma", a.psf_sigma},
           {"seed", a.seed},
           {"threads", a.threads},
           {"out", a.out},
           {"force", a.force}});
  std::printf("%s\n", (fs::path(a.out) / "manifest.json").string().c_str());
  return 0;
}

struct TrainArgs {
  std::vector<std::string> data;
  int epochs = 100;
  int batch = 4;
  double lr = 1e-4;
  int warm_start = 20;
  int crop = 128;
  double gamma = 0.5;
  double val_fraction = 0.3;
  double gate = 5.0;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  auto data = read_datasets(a.data);

  dndt::model::ModelConfig mc;
  mc.init_seed = a.seed;
  dndt::train::TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.lr = a.lr;
  tc.warm_start_epochs = a.warm_start;
  tc.crop = a.crop;
  tc.loss.gamma = a.gamma;
  tc.val_fraction = a.val_fraction;
  tc.gate = a.gate;
  tc.seed = a.seed;

  auto res = dndt::train::train(mc, tc, data);
  dndt::model::save_checkpoint(a.out, res.final_params);
  dndt::model::save_checkpoint(a.out + ".best", res.best_params);
  write_text_file(a.out + ".log.csv", dndt::train::log_to_csv(res.log));
  write_effective_config(a.out + ".config.json",
                         json{{"data", a.data},
                              {"epochs", a.epochs},
                              {"batch", a.batch},
                              {"lr", a.lr},
                              {"warm_start", a.warm_start},
                              {"crop", a.crop},
                              {"gamma", a.gamma},
                              {"val_fraction", a.val_fraction},
                              {"gate", a.gate},
                              {"seed", a.seed},
                              {"out", a.out}});
  std::printf("%s\n", a.out.c_str());
  return 0;
}

struct InferArgs {
  std::string ckpt;
  std::string image;
  std::vector<std::string> data;
  double tau = 0.5;
  double nms_radius = 2.0;
  int window = 7;
  std::string out;
};

std::vector<dndt::Image> gather_frames(const InferArgs& a) {
  const bool has_image = !a.image.empty();
  const bool has_data = !a.data.empty();
  if (has_image == has_data)
    throw dndt::UsageError("give exactly one of --image or --data");
  std::vector<dndt::Image> frames;
  if (has_image) {
    frames.push_back(dndt::read_pgm16(a.image));
  } else {
    for (const auto& d : a.data) {
      auto ds = dndt::sim::read_dataset(d);
      for (auto& fp : ds.frames) frames.push_back(std::move(fp.noisy));
    }
  }
  return frames;
}

json infer_config_json(const InferArgs& a) {
  return json{{"ckpt", a.ckpt},     {"image", a.image},
              {"data", a.data},     {"tau", a.tau},
              {"nms_radius", a.nms_radius}, {"window", a.window},
              {"out", a.out}};
}

int cmd_detect(const InferArgs& a) {
  auto mp = dndt::model::load_checkpoint(a.ckpt);
  dndt::eval::DetectConfig dc;
  dc.tau = a.tau;
  dc.nms_radius = a.nms_radius;
  dc.window = a.window;
  dc.validate();
  auto frames = gather_frames(a);
  std::vector<std::vector<dndt::eval::Detection>> per_frame;
  per_frame.reserve(frames.size());
  for (const auto& fr : frames)
    per_frame.push_back(dndt::eval::detect(mp, fr, dc));
  write_text_file(a.out, dndt::eval::detections_to_csv(per_frame));
  write_effective_config(a.out + ".config.json", infer_config_json(a));
  std::printf("%s\n", a.out.c_str());
  return 0;
}

int cmd_denoise(const InferArgs& a) {
  auto mp = dndt::model::load_checkpoint(a.ckpt);
  auto frames = gather_frames(a);
  const bool single = !a.image.empty();
  if (!single) fs::create_directories(a.out);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    auto den = dndt::eval::denoise(mp, frames[f]);
    // back to input intensity units via the recorded normalization rule
    const auto w = dndt::norm_window(frames[f], mp.norm_rule);
    for (auto& v : den.pix) v = w.lo + v * (w.hi - w.lo);
    std::string path = a.out;
    if (!single) {
      char name[32];
      std::snprintf(name, sizeof(name), "denoised_%04zu.pgm", f);
      path = (fs::path(a.out) / name).string();
    }
    dndt::write_pgm16(path, den);
  }
  const std::string cfg_path =
      single ? a.out + ".config.json"
             : (fs::path(a.out) / "run_config.json").string();
  write_effective_config(cfg_path, infer_config_json(a));
  std::printf("%s\n", a.out.c_str());
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::vector<std::string> data;
  double gate = 5.0;
  double tau = 0.5;
  double nms_radius = 2.0;
  int window = 7;
  int threads = 1;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  auto mp = dndt::model::load_checkpoint(a.ckpt);
  auto data = read_datasets(a.data);
  dndt::eval::DetectConfig dc;
  dc.tau = a.tau;
  dc.nms_radius = a.nms_radius;
  dc.window = a.window;
  dc.validate();
  std::vector<dndt::eval::SequenceMetrics> seqs;
  seqs.reserve(data.size());
  for (const auto& ds : data)
    seqs.push_back(dndt::eval::evaluate(mp, ds, a.gate, dc, a.threads));
  auto report = dndt::eval::make_report(std::move(seqs), a.gate, dc);
  write_text_file(a.out, dndt::eval::report_to_json(report));
  const std::string table = dndt::eval::report_to_text(report);
  write_text_file(a.out + ".txt", table);
  write_effective_config(a.out + ".config.json",
                         json{{"ckpt", a.ckpt},
                              {"data", a.data},
                              {"gate", a.gate},
                              {"tau", a.tau},
                              {"nms_radius", a.nms_radius},
                              {"window", a.window},
                              {"threads", a.threads},
                              {"out", a.out}});
  std::fputs(table.c_str(), stdout);
  return 0;
}

struct GradcheckArgs {
  int instances = 100;
  std::uint64_t seed = 1;
  bool skip_model = false;
  std::string sabotage;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  dndt::gradsuite::SuiteOptions opt;
  opt.instances_per_op = a.instances;
  opt.seed = a.seed;
  opt.include_model = !a.skip_model;
  opt.sabotage = a.sabotage;
  auto results = dndt::gradsuite::run_suite(opt);
  std::fputs(dndt::gradsuite::report_text(results).c_str(), stdout);
  return dndt::gradsuite::all_pass(results)
             ? 0
             : static_cast<int>(dndt::ExitCode::numeric);
}

struct BenchArgs {
  int size = 128;
  int reps = 3;
};

int cmd_bench(const BenchArgs& a) {
  if (a.size < 16 || a.size % 4 != 0 || a.reps < 1)
    throw dndt::UsageError("bench: size must be >=16 and divisible by 4, reps >= 1");
  dndt::model::ModelConfig mc;
  auto mp = dndt::model::init_params(mc);
  dndt::rng::Stream rs(7);
  std::vector<float> img(static_cast<std::size_t>(a.size) * a.size);
  for (auto& v : img) v = static_cast<float>(rs.uniform());

  using clock = std::chrono::steady_clock;
  auto time_ms = [&](bool with_backward) {
    double best = 1e300;
    for (int r = 0; r < a.reps; ++r) {
      const auto t0 = clock::now();
      dndt::ad::Tape<float> tape;
      auto pt = dndt::model::make_param_tensors(tape, mp, with_backward);
      auto x = tape.constant({1, 1, a.size, a.size}, img);
      auto fwd = dndt::model::forward(pt, mc, x);
      if (with_backward) {
        auto y = dndt::ad::sum(dndt::ad::add(fwd.denoised, fwd.score_logits));
        tape.backward(y);
      }
      best = std::min(best, std::chrono::duration<double, std::milli>(
                                clock::now() - t0)
                                .count());
    }
    return best;
  };

  const double fwd = time_ms(false);
  const double fwd_bwd = time_ms(true);
  std::printf("model: default (%zu parameters), input %dx%d, best of %d\n",
              mp.total_count(), a.size, a.size, a.reps);
  std::printf("forward_ms %.2f\n", fwd);
  std::printf("forward_backward_ms %.2f\n", fwd_bwd);
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"joint denoising and sub-pixel particle detection"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path,
                 "flat JSON config file (flags override file values)");

  GenArgs gen;
  auto* cgen = app.add_subcommand("gen", "generate a synthetic dataset");
  cgen->add_option("--scenario", gen.scenario, "vesicle|receptor|microtubule");
  cgen->add_option("--snr", gen.snr, "peak signal-to-noise ratio");
  cgen->add_option("--particles", gen.particles, "particles per frame");
  cgen->add_option("--frames", gen.frames, "frame count");
  cgen->add_option("--size", gen.size, "frame size, WIDTHxHEIGHT");
  cgen->add_option("--background", gen.background, "background photon level");
  cgen->add_option("--psf-sigma,--psf_sigma", gen.psf_sigma, "PSF sigma in px");
  cgen->add_option("--seed", gen.seed, "generator seed");
  cgen->add_option("--threads", gen.threads, "frame-render threads")
      ->default_val(default_threads());
  cgen->add_option("--out", gen.out, "output dataset directory")->required();
  cgen->add_flag("--force", gen.force, "overwrite a non-empty directory");

  TrainArgs tr;
  auto* ctr = app.add_subcommand("train", "train a model on datasets");
  ctr->add_option("--data", tr.data, "dataset directory (repeatable)");
  ctr->add_option("--epochs", tr.epochs, "training epochs");
  ctr->add_option("--batch", tr.batch, "batch size");
  ctr->add_option("--lr", tr.lr, "initial learning rate");
  ctr->add_option("--warm-start,--warm_start", tr.warm_start,
                  "epochs with gamma=0");
  ctr->add_option("--crop", tr.crop, "square crop size");
  ctr->add_option("--gamma", tr.gamma, "denoising loss weight");
  ctr->add_option("--val-fraction,--val_fraction", tr.val_fraction,
                  "validation fraction");
  ctr->add_option("--gate", tr.gate, "matching gate for validation F1, px");
  ctr->add_option("--seed", tr.seed, "training + init seed");
  ctr->add_option("--out", tr.out, "final checkpoint path")->required();

  InferArgs det;
  auto* cdet = app.add_subcommand("detect", "detect particles (CSV out)");
  cdet->add_option("--ckpt", det.ckpt, "checkpoint path")->required();
  cdet->add_option("--image", det.image, "single 16-bit PGM frame");
  cdet->add_option("--data", det.data, "dataset directory (repeatable)");
  cdet->add_option("--tau", det.tau, "score threshold");
  cdet->add_option("--nms-radius,--nms_radius", det.nms_radius, "suppression radius, px");
  cdet->add_option("--window", det.window, "readout window, odd");
  cdet->add_option("--out", det.out, "detections CSV path")->required();

  InferArgs den;
  auto* cden = app.add_subcommand("denoise", "denoise frames (PGM out)");
  cden->add_option("--ckpt", den.ckpt, "checkpoint path")->required();
  cden->add_option("--image", den.image, "single 16-bit PGM frame");
  cden->add_option("--data", den.data, "dataset directory (repeatable)");
  cden->add_option("--out", den.out, "output PGM path (or directory for --data)")
      ->required();

  EvalArgs ev;
  auto* cev = app.add_subcommand("eval", "evaluate a checkpoint on datasets");
  cev->add_option("--ckpt", ev.ckpt, "checkpoint path")->required();
  cev->add_option("--data", ev.data, "dataset directory (repeatable)");
  cev->add_option("--gate", ev.gate, "matching gate, px");
  cev->add_option("--tau", ev.tau, "score threshold");
  cev->add_option("--nms-radius,--nms_radius", ev.nms_radius, "suppression radius, px");
  cev->add_option("--window", ev.window, "readout window, odd");
  cev->add_option("--threads", ev.threads, "evaluation threads")
      ->default_val(default_threads());
  cev->add_option("--out", ev.out, "report JSON path")->required();

  GradcheckArgs gc;
  auto* cgc = app.add_subcommand("gradcheck", "run the gradient-check suite");
  cgc->add_option("--instances", gc.instances, "random instances per op");
  cgc->add_option("--seed", gc.seed, "suite seed");
  cgc->add_flag("--skip-model,--skip_model", gc.skip_model, "skip the end-to-end model check");
  cgc->add_option("--sabotage", gc.sabotage,
                  "test hook: negate this op's analytic gradient");

  BenchArgs bn;
  auto* cbn = app.add_subcommand("bench", "time model forward/backward");
  cbn->add_option("--size", bn.size, "input side length");
  cbn->add_option("--reps", bn.reps, "repetitions (best-of)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(dndt::ExitCode::usage);
  }

  const json file_cfg = load_config_file(config_path);

  if (cgen->parsed()) {
    Overlay o(cgen, file_cfg);
    o.bind("scenario", gen.scenario);
    o.bind("snr", gen.snr);
    o.bind("particles", gen.particles);
    o.bind("frames", gen.frames);
    o.bind("size", gen.size);
    o.bind("background", gen.background);
    o.bind("psf_sigma", gen.psf_sigma);
    o.bind("seed", gen.seed);
    o.bind("threads", gen.threads);
    o.bind("out", gen.out);
    o.bind("force", gen.force);
    o.finish();
    return cmd_gen(gen);
  }
  if (ctr->parsed()) {
    Overlay o(ctr, file_cfg);
    o.bind("data", tr.data);
    o.bind("epochs", tr.epochs);
    o.bind("batch", tr.batch);
    o.bind("lr", tr.lr);
    o.bind("warm_start", tr.warm_start);
    o.bind("crop", tr.crop);
    o.bind("gamma", tr.gamma);
    o.bind("val_fraction", tr.val_fraction);
    o.bind("gate", tr.gate);
    o.bind("seed", tr.seed);
    o.bind("out", tr.out);
    o.finish();
    return cmd_train(tr);
  }
  if (cdet->parsed()) {
    Overlay o(cdet, file_cfg);
    o.bind("ckpt", det.ckpt);
    o.bind("image", det.image);
    o.bind("data", det.data);
    o.bind("tau", det.tau);
    o.bind("nms_radius", det.nms_radius);
    o.bind("window", det.window);
    o.bind("out", det.out);
    o.finish();
    return cmd_detect(det);
  }
  if (cden->parsed()) {
    Overlay o(cden, file_cfg);
    o.bind("ckpt", den.ckpt);
    o.bind("image", den.image);
    o.bind("data", den.data);
    o.bind("out", den.out);
    o.finish();
    return cmd_denoise(den);
  }
  if (cev->parsed()) {
    Overlay o(cev, file_cfg);
    o.bind("ckpt", ev.ckpt);
    o.bind("data", ev.data);
    o.bind("gate", ev.gate);
    o.bind("tau", ev.tau);
    o.bind("nms_radius", ev.nms_radius);
    o.bind("window", ev.window);
    o.bind("threads", ev.threads);
    o.bind("out", ev.out);
    o.finish();
    return cmd_eval(ev);
  }
  if (cgc->parsed()) {
    Overlay o(cgc, file_cfg);
    o.bind("instances", gc.instances);
    o.bind("seed", gc.seed);
    o.bind("skip_model", gc.skip_model);
    o.bind("sabotage", gc.sabotage);
    o.finish();
    return cmd_gradcheck(gc);
  }
  if (cbn->parsed()) {
    Overlay o(cbn, file_cfg);
    o.bind("size", bn.size);
    o.bind("reps", bn.reps);
    o.finish();
    return cmd_bench(bn);
  }
  return static_cast<int>(dndt::ExitCode::usage);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dndt::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(dndt::ExitCode::usage);
  } catch (const dndt::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(dndt::ExitCode::numeric);
  } catch (const dndt::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(dndt::ExitCode::data);
  } catch (const dndt::ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(dndt::ExitCode::data);
  } catch (const dndt::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(dndt::ExitCode::data);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
