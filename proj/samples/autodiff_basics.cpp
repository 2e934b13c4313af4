// Walkthrough of the reverse-mode tape: build a small expression graph,
// run backward, and compare one gradient entry against finite differences.
#include <cstdio>
#include <vector>

#include "dndt/gradcheck.hpp"
#include "dndt/tensor.hpp"

int main() {
  using namespace dndt::ad;

  // f(x, w) = sum(relu(conv(x, w)) ^ 2) on a tiny 4x4 single-channel image.
  Tape<double> tape;
  std::vector<double> xv(16);
  for (int i = 0; i < 16; ++i) xv[i] = 0.1 * (i - 8);
  std::vector<double> wv = {0.2, -0.1, 0.0, 0.3, 0.5, -0.2, 0.1, 0.0, -0.4};

  auto x = tape.leaf({1, 1, 4, 4}, xv, true);
  auto w = tape.leaf({1, 1, 3, 3}, wv, true);
  auto b = tape.leaf({1}, std::vector<double>{0.05}, true);

  auto h = relu(conv2d(x, w, b, 3));
  auto loss = sum(mul(h, h));
  std::printf("loss = %.9f\n", loss.value()[0]);

  tape.backward(loss);
  std::printf("dloss/db = %.9f\n", b.grad()[0]);
  std::printf("dloss/dw[0] = %.9f\n", w.grad()[0]);

  // Cross-check the weight gradient numerically.
  auto report = grad_check(
      [&](Tape<double>& t, const Tensor<double>& wt) {
        auto xt = t.constant({1, 1, 4, 4}, xv);
        auto bt = t.constant({1}, {0.05});
        auto ht = relu(conv2d(xt, wt, bt, 3));
        return sum(mul(ht, ht));
      },
      {1, 1, 3, 3}, wv);
  std::printf("finite-difference max rel err = %.3e (%s)\n", report.max_rel_err,
              report.pass(1e-4) ? "ok" : "MISMATCH");
  return report.pass(1e-4) ? 0 : 1;
}
