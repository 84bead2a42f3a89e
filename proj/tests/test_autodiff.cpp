#include "rigrad/autodiff.hpp"

#include <random>
#include <thread>

#include "doctest.h"
#include "test_util.hpp"

using namespace rigrad;
using rigrad::test::central_diff;
using rigrad::test::rel_err;

namespace {

// A tiny straight-line program over safe compositions of the primitive set,
// evaluated identically with double, DualScalar and TapeVar.  Safety means
// every op is composed so that its domain holds for any finite argument.
struct Instr {
  int op;
  int a;
  int b;
  double c;
};

// The randomized differentiation property covers the smooth composite set;
// the kinked ops (min/max) and tan get deterministic cases instead, since a
// finite-difference oracle is meaningless across a subgradient switch.
enum InstrOp {
  kAdd, kSub, kMul, kSafeDiv,        // a / (1.5 + b*b)
  kSin, kCos,
  kBoundedExp,                       // exp(a / (1 + a*a))
  kSafeLog,                          // log(0.5 + a*a)
  kSafeSqrt,                         // sqrt(0.25 + a*a)
  kPowConst,                         // (0.5 + a*a) ^ c
  kAbsSmooth,
  kNumOps,
};

template <typename T>
T eval_instr(const Instr& in, const std::vector<T>& slot) {
  using std::cos;
  using std::exp;
  using std::log;
  using std::max;
  using std::min;
  using std::pow;
  using std::sin;
  using std::sqrt;
  using std::tan;
  const T& a = slot[static_cast<std::size_t>(in.a)];
  switch (in.op) {
    case kAdd: return a + slot[static_cast<std::size_t>(in.b)];
    case kSub: return a - slot[static_cast<std::size_t>(in.b)];
    case kMul: return a * slot[static_cast<std::size_t>(in.b)];
    case kSafeDiv: { const T& b = slot[static_cast<std::size_t>(in.b)]; return a / (b * b + 1.5); }
    case kSin: return sin(a);
    case kCos: return cos(a);
    case kBoundedExp: return exp(a / (a * a + 1.0));
    case kSafeLog: return log(a * a + 0.5);
    case kSafeSqrt: return sqrt(a * a + 0.25);
    case kPowConst: return pow(a * a + 0.5, in.c);
    // Wide smoothing so the finite-difference oracle resolves the curvature.
    case kAbsSmooth: return abs_smooth(a, 1e-2);
    default: throw std::logic_error("bad op");
  }
}

template <typename T>
T eval_program(const std::vector<Instr>& prog, const std::vector<T>& leaves) {
  std::vector<T> slot = leaves;
  for (const Instr& in : prog) slot.push_back(eval_instr(in, slot));
  return slot.back();
}

struct Program {
  std::vector<Instr> instrs;
  std::vector<double> leaves;
};

// Random program whose intermediate values stay within |v| <= 1e3 so the
// finite-difference oracle is well conditioned.
Program random_program(std::mt19937& rng) {
  std::uniform_int_distribution<int> nleaf(1, 4);
  std::uniform_int_distribution<int> nop(3, 12);
  std::uniform_real_distribution<double> leafval(-2.0, 2.0);
  std::uniform_int_distribution<int> opdist(0, kNumOps - 1);
  const double pow_choices[] = {2.0, 3.0, 0.5, -1.0};

  Program p;
  const int leaves = nleaf(rng);
  for (int i = 0; i < leaves; ++i) p.leaves.push_back(leafval(rng));

  std::vector<double> slot = p.leaves;
  const int ops = nop(rng);
  for (int i = 0; i < ops; ++i) {
    for (int attempt = 0; attempt < 32; ++attempt) {
      Instr in;
      in.op = opdist(rng);
      std::uniform_int_distribution<int> pick(0, static_cast<int>(slot.size()) - 1);
      in.a = pick(rng);
      in.b = pick(rng);
      in.c = pow_choices[static_cast<std::size_t>(rng() % 4)];
      const double v = eval_instr(in, slot);
      if (std::isfinite(v) && std::fabs(v) <= 30.0) {
        slot.push_back(v);
        p.instrs.push_back(in);
        break;
      }
    }
  }
  return p;
}

double tape_eval_and_grad(Tape& tape, const Program& p, std::vector<double>& grad_out) {
  std::vector<TapeVar> leaves;
  leaves.reserve(p.leaves.size());
  for (double v : p.leaves) leaves.push_back(record(tape, v));
  TapeVar out = eval_program(p.instrs, leaves);
  grad_out = grad(tape, out, leaves);
  return out.value();
}

}  // namespace

TEST_CASE("leaf gradient is one") {
  Tape t;
  TapeVar v = record(t, 3.0);
  std::vector<TapeVar> in{v};
  auto g = grad(t, v, in);
  CHECK(g.size() == 1);
  CHECK(g[0] == 1.0);
}

TEST_CASE("record at capacity raises TapeFull") {
  Tape t(3);
  record(t, 0.0);
  record(t, 1.0);
  record(t, 2.0);
  CHECK_THROWS_WITH_AS(record(t, 3.0), doctest::Contains("max_nodes"), Error);
  try {
    record(t, 3.0);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::TapeFull);
  }
}

TEST_CASE("derivative of x^2 at zero is zero") {
  Tape t;
  TapeVar x = record(t, 0.0);
  TapeVar y = x * x;
  std::vector<TapeVar> in{x};
  CHECK(grad(t, y, in)[0] == 0.0);
}

TEST_CASE("analytic spot checks") {
  Tape t;
  TapeVar x = record(t, 3.0);
  TapeVar y = x * x;
  std::vector<TapeVar> in{x};
  CHECK(grad(t, y, in)[0] == doctest::Approx(6.0));

  TapeVar z = record(t, 0.0);
  TapeVar s = sin(z);
  std::vector<TapeVar> in2{z};
  CHECK(grad(t, s, in2)[0] == doctest::Approx(1.0));
}

TEST_CASE("exp(x*w + b) gradient matches central differences") {
  const std::vector<double> x0{0.5, -1.2, 0.3};
  auto f = [](std::span<const double> v) { return std::exp(v[0] * v[1] + v[2]); };

  Tape t;
  TapeVar x = record(t, x0[0]);
  TapeVar w = record(t, x0[1]);
  TapeVar b = record(t, x0[2]);
  TapeVar y = exp(x * w + b);
  std::vector<TapeVar> in{x, w, b};
  auto g = grad(t, y, in);
  auto g_fd = central_diff(f, x0, 1e-6);
  for (int i = 0; i < 3; ++i) CHECK(rel_err(g[i], g_fd[i], 1e-9) < 1e-6);
}

TEST_CASE("rewind to zero empties the tape and restores capacity") {
  Tape t(8);
  for (int i = 0; i < 8; ++i) record(t, i);
  CHECK(t.size() == 8);
  checkpoint_and_rewind(t, 0);
  CHECK(t.size() == 0);
  for (int i = 0; i < 8; ++i) record(t, i);  // full capacity available again
  CHECK(t.size() == 8);
}

TEST_CASE("leaves recorded before the mark stay differentiable after rewind") {
  Tape t;
  TapeVar x = record(t, 2.0);
  const std::size_t mark = t.mark();
  TapeVar y = x * x * x;
  std::vector<TapeVar> in{x};
  CHECK(grad(t, y, in)[0] == doctest::Approx(12.0));
  checkpoint_and_rewind(t, mark);
  TapeVar y2 = x * x;
  CHECK(grad(t, y2, in)[0] == doctest::Approx(4.0));
}

TEST_CASE("rewind and re-record reproduces identical gradients") {
  std::mt19937 rng(1234);
  Program p = random_program(rng);
  Tape t;
  std::vector<double> g1, g2;
  tape_eval_and_grad(t, p, g1);
  checkpoint_and_rewind(t, 0);
  tape_eval_and_grad(t, p, g2);
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("rewind beyond live region raises InvalidMark") {
  Tape t;
  record(t, 1.0);
  CHECK_THROWS_AS(checkpoint_and_rewind(t, 5), Error);
  try {
    checkpoint_and_rewind(t, 5);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidMark);
  }
}

TEST_CASE("cross-tape arithmetic is rejected") {
  Tape t1, t2;
  TapeVar a = record(t1, 1.0);
  TapeVar b = record(t2, 2.0);
  CHECK_THROWS_AS(a + b, Error);
  try {
    a* b;
  } catch (const Error& e) {
    CHECK(e.code() == Errc::CrossTape);
  }
}

TEST_CASE("stale variables are rejected after rewind") {
  Tape t;
  TapeVar x = record(t, 1.0);
  const std::size_t mark = t.mark();
  TapeVar y = x + 1.0;
  checkpoint_and_rewind(t, mark);
  CHECK_THROWS_AS(y + 1.0, Error);
  CHECK_NOTHROW(x + 1.0);
}

TEST_CASE("division by near-zero raises NumericDomain") {
  Tape t;
  TapeVar a = record(t, 1.0);
  TapeVar b = record(t, 1e-13);
  CHECK_THROWS_AS(a / b, Error);
  try {
    a / b;
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NumericDomain);
  }
  DualScalar da(1.0, 1.0), db(1e-13, 0.0);
  CHECK_THROWS_AS(da / db, Error);
}

TEST_CASE("min/max route the derivative to the selected argument, ties first") {
  Tape t;
  TapeVar a = record(t, 2.0);
  TapeVar b = record(t, 5.0);
  std::vector<TapeVar> in{a, b};
  auto g = grad(t, min(a, b), in);
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  g = grad(t, max(a, b), in);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);

  TapeVar c = record(t, 2.0);  // tie with a
  std::vector<TapeVar> in2{a, c};
  g = grad(t, min(a, c), in2);
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  g = grad(t, max(a, c), in2);
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);

  DualScalar x(2.0, 1.0), y(2.0, 7.0);
  CHECK(min(x, y).deriv == 1.0);
  CHECK(max(x, y).deriv == 1.0);
}

TEST_CASE("recording N scalar ops allocates exactly N nodes") {
  Tape t;
  const std::size_t n0 = t.size();
  TapeVar x = record(t, 1.5);
  CHECK(t.size() == n0 + 1);
  TapeVar y = x * x;
  CHECK(t.size() == n0 + 2);
  TapeVar z = y + 3.0;
  CHECK(t.size() == n0 + 3);
  TapeVar w = sin(z);
  CHECK(t.size() == n0 + 4);
  TapeVar u = w - x;
  (void)u;
  CHECK(t.size() == n0 + 5);
}

TEST_CASE("gradient of a sum of independent subexpressions concatenates") {
  Tape t;
  TapeVar a = record(t, 0.7);
  TapeVar b = record(t, -0.4);
  TapeVar c = record(t, 1.9);
  TapeVar f1 = sin(a) * a;
  TapeVar f2 = exp(b * 0.5);
  TapeVar f3 = c * c * c;
  TapeVar y = f1 + f2 + f3;

  std::vector<TapeVar> all{a, b, c};
  auto g_all = grad(t, y, all);
  std::vector<TapeVar> ia{a}, ib{b}, ic{c};
  CHECK(g_all[0] == doctest::Approx(grad(t, f1, ia)[0]).epsilon(1e-14));
  CHECK(g_all[1] == doctest::Approx(grad(t, f2, ib)[0]).epsilon(1e-14));
  CHECK(g_all[2] == doctest::Approx(grad(t, f3, ic)[0]).epsilon(1e-14));
}

TEST_CASE("dual-number chain rule and passive constants") {
  DualScalar x(0.8, 1.0);
  DualScalar y = x * x * sin(x);
  const double xv = 0.8;
  CHECK(rel_err(y.deriv, 2 * xv * std::sin(xv) + xv * xv * std::cos(xv)) < 1e-14);
  DualScalar c(4.2);
  CHECK(c.deriv == 0.0);
  CHECK((x + c).deriv == 1.0);
  CHECK((x * c).deriv == doctest::Approx(4.2));
}

TEST_CASE("tan derivative matches the analytic value on both modes") {
  const double xv = 0.7;
  DualScalar xd(xv, 1.0);
  const double expect = 1.0 / (std::cos(xv) * std::cos(xv));
  CHECK(rel_err(tan(xd).deriv, expect) < 1e-14);

  Tape t;
  TapeVar x = record(t, xv);
  std::vector<TapeVar> in{x};
  CHECK(rel_err(grad(t, tan(x), in)[0], expect) < 1e-14);
}

TEST_CASE("reverse matches forward matches finite differences on 1000 random expressions") {
  std::mt19937 rng(20240817);
  Tape t;
  for (int trial = 0; trial < 1000; ++trial) {
    Program p = random_program(rng);
    checkpoint_and_rewind(t, 0);

    std::vector<double> g_rev;
    const double f0 = tape_eval_and_grad(t, p, g_rev);

    // Forward mode: one pass per seed direction.
    std::vector<double> g_fwd(p.leaves.size());
    for (std::size_t i = 0; i < p.leaves.size(); ++i) {
      std::vector<DualScalar> duals;
      for (std::size_t k = 0; k < p.leaves.size(); ++k)
        duals.emplace_back(p.leaves[k], k == i ? 1.0 : 0.0);
      g_fwd[i] = eval_program(p.instrs, duals).deriv;
    }

    auto f = [&p](std::span<const double> v) {
      std::vector<double> leaves(v.begin(), v.end());
      return eval_program(p.instrs, leaves);
    };
    // Richardson extrapolation of central differences: h=1e-6 truncation can
    // itself exceed 1e-5 relative on third-derivative-heavy draws.
    auto g_h = central_diff(f, p.leaves, 1e-6);
    auto g_h2 = central_diff(f, p.leaves, 5e-7);
    std::vector<double> g_fd(g_h.size());
    for (std::size_t i = 0; i < g_h.size(); ++i) g_fd[i] = (4.0 * g_h2[i] - g_h[i]) / 3.0;

    // Components are compared at the scale of the whole gradient so that
    // cancellation-dominated near-zero entries do not dominate the check.
    // The FD floor sits above the oracle's roundoff noise (~1e-10 absolute)
    // divided by the tolerance; below it only the exact modes judge.
    double gscale = std::max(1.0, std::fabs(f0));
    for (double g : g_fwd) gscale = std::max(gscale, std::fabs(g));
    for (std::size_t i = 0; i < p.leaves.size(); ++i) {
      CAPTURE(trial);
      CAPTURE(i);
      CHECK(rel_err(g_rev[i], g_fwd[i], gscale) < 1e-10);
      CHECK(rel_err(g_rev[i], g_fd[i], 1e-3 * gscale) < 1e-5);
      CHECK(rel_err(g_fwd[i], g_fd[i], 1e-3 * gscale) < 1e-5);
    }
  }
}

TEST_CASE("independent tapes work concurrently") {
  auto worker = [](unsigned seed, bool* ok) {
    std::mt19937 rng(seed);
    Tape t;
    *ok = true;
    for (int i = 0; i < 50; ++i) {
      Program p = random_program(rng);
      checkpoint_and_rewind(t, 0);
      std::vector<double> g_rev;
      tape_eval_and_grad(t, p, g_rev);
      for (std::size_t k = 0; k < p.leaves.size(); ++k) {
        std::vector<DualScalar> duals;
        for (std::size_t j = 0; j < p.leaves.size(); ++j)
          duals.emplace_back(p.leaves[j], j == k ? 1.0 : 0.0);
        if (rel_err(g_rev[k], eval_program(p.instrs, duals).deriv, 1e-12) > 1e-10) *ok = false;
      }
    }
  };
  bool ok[4] = {};
  std::vector<std::thread> threads;
  for (unsigned i = 0; i < 4; ++i) threads.emplace_back(worker, 100 + i, &ok[i]);
  for (auto& th : threads) th.join();
  for (bool o : ok) CHECK(o);
}
