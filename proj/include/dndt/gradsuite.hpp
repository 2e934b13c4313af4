#pragma once

// The full gradient-verification suite: every differentiable op and every
// loss against central finite differences (>= 100 random small instances
// each), plus one end-to-end check of a tiny model + joint loss where every
// parameter must match FD.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dndt/errors.hpp"
#include "dndt/gradcheck.hpp"
#include "dndt/losses.hpp"
#include "dndt/model.hpp"
#include "dndt/rng.hpp"
#include "dndt/tensor.hpp"

namespace dndt::gradsuite {

struct OpResult {
  std::string name;
  int instances = 0;
  double max_rel_err = 0.0;
  double tol = 1e-4;
  bool pass = true;
};

struct SuiteOptions {
  int instances_per_op = 100;
  double tol_ops = 1e-4;
  double tol_model = 1e-3;
  std::uint64_t seed = 1;
  bool include_model = true;  // the end-to-end check dominates the runtime
  std::string sabotage;       // test hook: negate this op's analytic gradient
};

namespace detail {

using ad::GradCheckInput;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using Builder =
    std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>;

inline std::vector<double> randu(rng::Stream& rs, std::size_t n, double lo,
                                 double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rs.uniform(lo, hi);
  return v;
}

// Random-weight contraction to a scalar. A plain sum would hide entire
// gradient directions (e.g. instance_norm output always sums to ~0).
inline Tensor<double> contract(Tape<double>& tp, const Tensor<double>& t,
                               const std::vector<double>& w) {
  const Shape s = t.shape();  // copy: node storage may reallocate
  auto wt = tp.constant(s, std::vector<double>(w.begin(), w.end()));
  return ad::sum(ad::mul(t, wt));
}

struct Runner {
  const SuiteOptions& opt;
  std::vector<OpResult>& out;
  rng::Stream rs;

  Runner(const SuiteOptions& o, std::vector<OpResult>& res)
      : opt(o), out(res), rs(rng::mix(o.seed, 0x67726164ull)) {}

  void run(const std::string& name, int instances, double tol,
           const std::function<void(rng::Stream&, std::vector<GradCheckInput>&,
                                    Builder&)>& make) {
    OpResult r;
    r.name = name;
    r.instances = instances;
    r.tol = tol;
    const double scale = name == opt.sabotage ? -1.0 : 1.0;
    for (int i = 0; i < instances; ++i) {
      std::vector<GradCheckInput> inputs;
      Builder f;
      make(rs, inputs, f);
      auto rep = ad::grad_check(f, std::move(inputs), 1e-5, scale);
      if (!rep.finite) {
        r.pass = false;
        r.max_rel_err = std::numeric_limits<double>::infinity();
        break;
      }
      r.max_rel_err = std::max(r.max_rel_err, rep.max_rel_err);
    }
    r.pass = r.pass && r.max_rel_err < tol;
    out.push_back(r);
  }
};

}  // namespace detail

inline std::vector<OpResult> run_suite(const SuiteOptions& opt = {}) {
  using namespace detail;
  std::vector<OpResult> results;
  Runner run(opt, results);
  const int n = opt.instances_per_op;
  const double tol = opt.tol_ops;

  auto elementwise_pair = [&](const std::string& name,
                              Tensor<double> (*op)(const Tensor<double>&,
                                                   const Tensor<double>&),
                              double lo_b, double hi_b, bool abs_b) {
    run.run(name, n, tol,
            [=](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
              in.push_back({{2, 3}, randu(r, 6, -2.0, 2.0)});
              auto b = randu(r, 6, lo_b, hi_b);
              if (abs_b)
                for (auto& x : b)
                  if (r.uniform() < 0.5) x = -x;
              in.push_back({{2, 3}, b});
              auto w = randu(r, 6, -1.0, 1.0);
              f = [op, w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
                return contract(tp, op(xs[0], xs[1]), w);
              };
            });
  };

  elementwise_pair("add", &ad::add<double>, -2.0, 2.0, false);
  elementwise_pair("sub", &ad::sub<double>, -2.0, 2.0, false);
  elementwise_pair("mul", &ad::mul<double>, -2.0, 2.0, false);
  elementwise_pair("div", &ad::div<double>, 0.5, 2.0, true);  // |b| in [0.5,2]

  run.run("scale", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{2, 3}, randu(r, 6, -2.0, 2.0)});
            const double c = r.uniform(-3.0, 3.0);
            auto w = randu(r, 6, -1.0, 1.0);
            f = [c, w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::scale(xs[0], c), w);
            };
          });

  run.run("offset", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{2, 3}, randu(r, 6, -2.0, 2.0)});
            const double c = r.uniform(-3.0, 3.0);
            auto w = randu(r, 6, -1.0, 1.0);
            f = [c, w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::offset(xs[0], c), w);
            };
          });

  run.run("sqrt_clamped", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{2, 3}, randu(r, 6, 0.1, 3.0)});  // above the floor
            auto w = randu(r, 6, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::sqrt_clamped(xs[0]), w);
            };
          });

  run.run("sum", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{3, 2}, randu(r, 6, -2.0, 2.0)});
            f = [](Tape<double>&, const std::vector<Tensor<double>>& xs) {
              return ad::sum(xs[0]);
            };
          });

  run.run("relu", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            std::vector<double> v(6);
            for (auto& x : v)
              do x = r.uniform(-2.0, 2.0);
              while (std::fabs(x) < 1e-3);  // keep clear of the kink
            in.push_back({{2, 3}, std::move(v)});
            auto w = randu(r, 6, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::relu(xs[0]), w);
            };
          });

  run.run("sigmoid", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{2, 3}, randu(r, 6, -4.0, 4.0)});
            auto w = randu(r, 6, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::sigmoid(xs[0]), w);
            };
          });

  auto conv_case = [&](const std::string& name, int k) {
    const int H = k == 1 ? 4 : 5;
    run.run(name, n, tol,
            [=](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
              in.push_back(
                  {{1, 2, H, H}, randu(r, 2ull * H * H, -1.0, 1.0)});
              in.push_back({{2, 2, k, k},
                            randu(r, 4ull * k * k, -1.0, 1.0)});
              in.push_back({{2}, randu(r, 2, -0.5, 0.5)});
              auto w = randu(r, 2ull * H * H, -1.0, 1.0);
              f = [k, w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
                return contract(tp, ad::conv2d(xs[0], xs[1], xs[2], k), w);
              };
            });
  };
  conv_case("conv2d_k1", 1);
  conv_case("conv2d_k3", 3);

  run.run("instance_norm", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 2, 4, 4}, randu(r, 32, -2.0, 2.0)});
            in.push_back({{2}, randu(r, 2, 0.5, 1.5)});
            in.push_back({{2}, randu(r, 2, -0.5, 0.5)});
            auto w = randu(r, 32, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(
                  tp, ad::instance_norm(xs[0], xs[1], xs[2], 1e-5), w);
            };
          });

  run.run("maxpool2", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            // redraw until every 2x2 block has a clear, isolated maximum
            std::vector<double> v;
            bool ok = false;
            while (!ok) {
              v = randu(r, 16, -2.0, 2.0);
              ok = true;
              for (int by = 0; by < 2 && ok; ++by)
                for (int bx = 0; bx < 2 && ok; ++bx) {
                  double m1 = -1e9, m2 = -1e9;
                  for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                      const double x = v[(by * 2 + dy) * 4 + bx * 2 + dx];
                      if (x > m1) {
                        m2 = m1;
                        m1 = x;
                      } else if (x > m2) {
                        m2 = x;
                      }
                    }
                  ok = m1 - m2 > 1e-2;
                }
            }
            in.push_back({{1, 1, 4, 4}, std::move(v)});
            auto w = randu(r, 4, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::maxpool2(xs[0]), w);
            };
          });

  run.run("upsample_bilinear2", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 1, 3, 3}, randu(r, 9, -2.0, 2.0)});
            auto w = randu(r, 36, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::upsample_bilinear2(xs[0]), w);
            };
          });

  run.run("concat_channels", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 2, 3, 3}, randu(r, 18, -2.0, 2.0)});
            in.push_back({{1, 1, 3, 3}, randu(r, 9, -2.0, 2.0)});
            auto w = randu(r, 27, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::concat_channels<double>({xs[0], xs[1]}), w);
            };
          });

  run.run("softmax2d", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 1, 3, 3}, randu(r, 9, -2.0, 2.0)});
            auto w = randu(r, 9, -1.0, 1.0);
            f = [w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::softmax2d(xs[0]), w);
            };
          });

  run.run("slice_window", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 1, 8, 8}, randu(r, 64, -2.0, 2.0)});
            const int r0 = static_cast<int>(r.uniform_int(0, 5));
            const int c0 = static_cast<int>(r.uniform_int(0, 5));
            auto w = randu(r, 9, -1.0, 1.0);
            f = [r0, c0, w](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              return contract(tp, ad::slice_window(xs[0], r0, c0, 3), w);
            };
          });

  // ---- losses ----

  run.run("dice_loss", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{3, 3}, randu(r, 9, 0.05, 0.95)});
            in.push_back({{3, 3}, randu(r, 9, 0.05, 0.95)});
            f = [](Tape<double>&, const std::vector<Tensor<double>>& xs) {
              return loss::dice_loss(xs[0], xs[1]);
            };
          });

  run.run("balanced_bce", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{3, 3}, randu(r, 9, 0.05, 0.95)});
            auto ref = randu(r, 9, 0.0, 1.0);
            f = [ref](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              auto rt = tp.constant({3, 3}, std::vector<double>(ref));
              return loss::balanced_bce(xs[0], rt);
            };
          });

  run.run("deno_loss", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{3, 3}, randu(r, 9, 0.05, 0.95)});
            auto ref = randu(r, 9, 0.0, 1.0);
            f = [ref](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              auto rt = tp.constant({3, 3}, std::vector<double>(ref));
              return loss::deno_loss(xs[0], rt);
            };
          });

  run.run("dsnt", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{5, 5}, randu(r, 25, -2.0, 2.0)});
            const double wx = r.uniform(-1.0, 1.0), wy = r.uniform(-1.0, 1.0);
            f = [wx, wy](Tape<double>& tp, const std::vector<Tensor<double>>& xs) {
              auto xy = loss::dsnt(ad::softmax2d(xs[0]));
              auto w = tp.constant({2}, {wx, wy});
              return ad::sum(ad::mul(xy, w));
            };
          });

  run.run("jsd", n, tol,
          [](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{4, 4}, randu(r, 16, -2.0, 2.0)});
            auto q = randu(r, 16, 0.05, 1.0);
            double qs = 0.0;
            for (double x : q) qs += x;
            for (auto& x : q) x /= qs;
            f = [q](Tape<double>&, const std::vector<Tensor<double>>& xs) {
              return loss::jsd(ad::softmax2d(xs[0]), q);
            };
          });

  auto random_truth = [](rng::Stream& r, int hw, int count) {
    std::vector<loss::Particle> truth;
    for (int i = 0; i < count; ++i)
      truth.push_back({i + 1, r.uniform(3.0, hw - 4.0), r.uniform(3.0, hw - 4.0),
                       true});
    return truth;
  };

  run.run("det_loss", n, tol,
          [&](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 1, 12, 12}, randu(r, 144, -2.0, 2.0)});
            auto truth = random_truth(r, 12, 2);
            const std::uint64_t ws = r.next_u64();
            f = [truth, ws](Tape<double>&, const std::vector<Tensor<double>>& xs) {
              loss::LossConfig cfg;
              cfg.window = 5;
              cfg.jitter = 1;
              return loss::det_loss(xs[0], truth, cfg, ws).loss;
            };
          });

  run.run("joint_loss", n, tol,
          [&](rng::Stream& r, std::vector<GradCheckInput>& in, Builder& f) {
            in.push_back({{1, 1, 12, 12}, randu(r, 144, -2.0, 2.0)});
            in.push_back({{1, 1, 12, 12}, randu(r, 144, -2.0, 2.0)});
            auto clean = randu(r, 144, 0.0, 1.0);
            auto truth = random_truth(r, 12, 2);
            const std::uint64_t ws = r.next_u64();
            f = [clean, truth, ws](Tape<double>& tp,
                                   const std::vector<Tensor<double>>& xs) {
              auto ct = tp.constant({1, 1, 12, 12}, std::vector<double>(clean));
              loss::LossConfig cfg;
              cfg.window = 5;
              cfg.jitter = 1;
              return loss::joint_loss(xs[0], ad::sigmoid(xs[1]), ct, truth, cfg, ws)
                  .total;
            };
          });

  if (opt.include_model) {
    // Tiny end-to-end network + joint loss: every parameter against FD.
    model::ModelConfig mc;
    mc.enc = {2, 4, 8};
    mc.dec = {4, 2};
    mc.init_seed = opt.seed;
    auto mp = model::init_params(mc);
    rng::Stream rs(rng::mix(opt.seed, 0x6d6f64656cull));
    auto image = randu(rs, 256, 0.0, 1.0);
    auto clean = randu(rs, 256, 0.0, 1.0);
    std::vector<loss::Particle> truth = {{1, 5.3, 6.1, true},
                                         {2, 10.6, 9.2, true}};
    std::vector<GradCheckInput> inputs;
    for (std::size_t k = 0; k < mp.values.size(); ++k)
      inputs.push_back({mp.defs[k].shape,
                        std::vector<double>(mp.values[k].begin(),
                                            mp.values[k].end())});
    Builder f = [&mc, &mp, image, clean,
                 truth](Tape<double>& tp,
                        const std::vector<Tensor<double>>& xs) {
      model::ParamTensors<double> pt;
      pt.ordered = xs;
      for (std::size_t k = 0; k < xs.size(); ++k)
        pt.by_name.emplace(mp.defs[k].name, xs[k]);
      auto x = tp.constant({1, 1, 16, 16}, std::vector<double>(image));
      auto fwd = model::forward(pt, mc, x);
      auto ct = tp.constant({1, 1, 16, 16}, std::vector<double>(clean));
      loss::LossConfig cfg;
      cfg.window = 5;
      cfg.jitter = 1;
      return loss::joint_loss(fwd.score_logits, fwd.denoised, ct, truth, cfg, 99)
          .total;
    };
    OpResult r;
    r.name = "model_joint_end_to_end";
    r.instances = 1;
    r.tol = opt.tol_model;
    const double scale = r.name == opt.sabotage ? -1.0 : 1.0;
    auto rep = ad::grad_check(f, std::move(inputs), 1e-5, scale);
    r.max_rel_err = rep.max_rel_err;
    r.pass = rep.pass(opt.tol_model);
    results.push_back(r);
  }

  return results;
}

inline bool all_pass(const std::vector<OpResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return !results.empty();
}

inline std::string report_text(const std::vector<OpResult>& results) {
  std::string out =
      "op                        instances   max_rel_err   status\n";
  char buf[128];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%-25s %9d   %11.3e   %s\n", r.name.c_str(),
                  r.instances, r.max_rel_err, r.pass ? "pass" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace dndt::gradsuite
