#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ebtl/adam.hpp"
#include "ebtl/rng.hpp"
#include "ebtl/tensor.hpp"
#include "support/finite_diff.hpp"

using ebtl::Rng;
using ebtl::nn::Tape;
using ebtl::nn::Tensor;
using ebtl_test::central_diff;
using ebtl_test::max_rel_err;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("forward op examples") {
  Tape tape;
  SECTION("log_sum_exp of equal logits") {
    auto y = tape.log_sum_exp(Tensor::row({0, 0, 0, 0}));
    CHECK(y.value() == Catch::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SECTION("matmul identity") {
    Rng rng(7);
    auto a = Tensor::matrix(3, 3, random_vec(rng, 9));
    auto eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto out = tape.matmul(eye, a);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == a[i]);
  }
  SECTION("relu subgradient convention") {
    auto x = tape.leaf(Tensor::row({-1.0, 2.0}));
    auto y = tape.sum(tape.relu(x));
    auto grads = tape.backward(y);
    const auto& g = grads.at(x.node()).data();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
  }
  SECTION("clip requires lo <= hi") {
    CHECK_THROWS_AS(tape.clip(Tensor::row({1.0}), 2.0, 1.0), ebtl::Error);
  }
  SECTION("shape mismatch names the op and shapes") {
    CHECK_THROWS_WITH(tape.add(Tensor::row({1, 2}), Tensor::row({1, 2, 3})),
                      Catch::Matchers::ContainsSubstring("add") &&
                          Catch::Matchers::ContainsSubstring("[2]") &&
                          Catch::Matchers::ContainsSubstring("[3]"));
    CHECK_THROWS_AS(tape.matmul(Tensor::matrix(2, 3, std::vector<double>(6, 0.0)),
                                Tensor::matrix(2, 3, std::vector<double>(6, 0.0))),
                    ebtl::ShapeError);
  }
}

TEST_CASE("backward basics") {
  Tape tape;
  SECTION("d(x^2)/dx at 3") {
    auto x = tape.leaf(Tensor::scalar(3.0));
    auto y = tape.sum(tape.square(x));
    auto grads = tape.backward(y);
    CHECK(grads.at(x.node()).value() == Catch::Approx(6.0));
  }
  SECTION("log_sum_exp gradient is softmax") {
    auto x = tape.leaf(Tensor::row({0.0, 0.0}));
    auto y = tape.log_sum_exp(x);
    auto grads = tape.backward(y);
    CHECK(grads.at(x.node()).data()[0] == Catch::Approx(0.5));
    CHECK(grads.at(x.node()).data()[1] == Catch::Approx(0.5));
  }
  SECTION("non-scalar loss rejected") {
    auto x = tape.leaf(Tensor::row({1.0, 2.0}));
    auto y = tape.relu(x);
    CHECK_THROWS_WITH(tape.backward(y), Catch::Matchers::ContainsSubstring("scalar"));
  }
  SECTION("backward on a cleared tape rejected") {
    auto x = tape.leaf(Tensor::scalar(1.0));
    auto y = tape.sum(tape.square(x));
    tape.clear();
    CHECK_THROWS_WITH(tape.backward(y), Catch::Matchers::ContainsSubstring("cleared"));
  }
  SECTION("unused leaves get zero gradients") {
    auto x = tape.leaf(Tensor::scalar(2.0));
    auto unused = tape.leaf(Tensor::row({1.0, 2.0, 3.0}));
    auto y = tape.sum(tape.square(x));
    auto grads = tape.backward(y);
    REQUIRE(grads.count(unused.node()) == 1);
    for (double g : grads.at(unused.node()).data()) CHECK(g == 0.0);
  }
}

TEST_CASE("gradient check: every differentiable op") {
  Rng rng(20240901);
  Tape tape;

  // Builds a scalar composite from a flat parameter vector, returning its
  // value; the same builder runs on the tape for analytic gradients.
  auto check_op = [&](std::size_t n_in,
                      const std::function<Tensor(Tape&, const Tensor&)>& build) {
    auto xv = random_vec(rng, n_in, -1.5, 1.5);
    tape.clear();
    auto x = tape.leaf(Tensor::row(xv));
    auto loss = build(tape, x);
    auto grads = tape.backward(loss);
    auto analytic = grads.at(x.node()).data();
    auto numeric = central_diff(
        [&](const std::vector<double>& v) {
          Tape t2;
          return build(t2, Tensor::row(v)).value();
        },
        xv);
    INFO("max rel err " << max_rel_err(analytic, numeric));
    CHECK(max_rel_err(analytic, numeric) < 1e-4);
  };

  check_op(6, [](Tape& t, const Tensor& x) { return t.mean(t.relu(x)); });
  check_op(6, [](Tape& t, const Tensor& x) { return t.mean(t.tanh(x)); });
  check_op(6, [](Tape& t, const Tensor& x) { return t.mean(t.exponent(x)); });
  check_op(6, [](Tape& t, const Tensor& x) {
    return t.mean(t.logarithm(t.shift(t.square(x), 0.5)));
  });
  check_op(6, [](Tape& t, const Tensor& x) { return t.mean(t.square(x)); });
  check_op(6, [](Tape& t, const Tensor& x) { return t.sum(t.clip(x, -0.8, 0.9)); });
  check_op(6, [](Tape& t, const Tensor& x) { return t.sum(t.negate(t.scale(x, 1.7))); });
  check_op(8, [](Tape& t, const Tensor& x) { return t.log_sum_exp(x); });

  SECTION("binary ops") {
    auto xv = random_vec(rng, 12, -1.0, 1.0);
    auto eval = [](Tape& t, const std::vector<double>& v, std::vector<double>* out_grad) {
      auto a = Tensor::row(std::vector<double>(v.begin(), v.begin() + 6));
      auto b = Tensor::row(std::vector<double>(v.begin() + 6, v.end()));
      Tensor la = a, lb = b;
      if (out_grad) {
        la = t.leaf(a);
        lb = t.leaf(b);
      }
      auto s1 = t.multiply(la, lb);
      auto s2 = t.subtract(la, lb);
      auto s3 = t.minimum(s1, s2);
      auto s4 = t.maximum(la, t.add(lb, s3));
      auto loss = t.mean(t.add(s3, s4));
      if (out_grad) {
        auto grads = t.backward(loss);
        *out_grad = grads.at(la.node()).data();
        const auto& gb = grads.at(lb.node()).data();
        out_grad->insert(out_grad->end(), gb.begin(), gb.end());
      }
      return loss.value();
    };
    std::vector<double> analytic;
    {
      Tape t;
      eval(t, xv, &analytic);
    }
    auto numeric = central_diff(
        [&](const std::vector<double>& v) {
          Tape t2;
          return eval(t2, v, nullptr);
        },
        xv);
    CHECK(max_rel_err(analytic, numeric) < 1e-4);
  }

  SECTION("matmul, gather, log_softmax, sum_rows, row bias") {
    auto xv = random_vec(rng, 24, -1.0, 1.0);
    auto eval = [](Tape& t, const std::vector<double>& v, std::vector<double>* out_grad) {
      auto a = Tensor::matrix(3, 4, std::vector<double>(v.begin(), v.begin() + 12));
      auto b = Tensor::matrix(4, 2, std::vector<double>(v.begin() + 12, v.begin() + 20));
      auto c = Tensor::row(std::vector<double>(v.begin() + 20, v.end()));
      Tensor la = a, lb = b, lc = c;
      if (out_grad) {
        la = t.leaf(a);
        lb = t.leaf(b);
        lc = t.leaf(c);
      }
      auto mm = t.matmul(la, lb);                       // [3,2]
      auto g = t.gather(t.log_softmax(mm), {0, 1, 0});  // [3]
      auto rows = t.sum_rows(t.add(mm, Tensor::row({0.3, -0.2})));
      auto lse = t.log_sum_exp(t.add(la, lc));  // row-bias broadcast, then [3]
      auto loss = t.mean(t.add(t.add(g, rows), lse));
      if (out_grad) {
        auto grads = t.backward(loss);
        out_grad->clear();
        for (int node : {la.node(), lb.node(), lc.node()}) {
          const auto& gr = grads.at(node).data();
          out_grad->insert(out_grad->end(), gr.begin(), gr.end());
        }
      }
      return loss.value();
    };
    std::vector<double> analytic;
    {
      Tape t;
      eval(t, xv, &analytic);
    }
    auto numeric = central_diff(
        [&](const std::vector<double>& v) {
          Tape t2;
          return eval(t2, v, nullptr);
        },
        xv);
    CHECK(max_rel_err(analytic, numeric) < 1e-4);
  }

  SECTION("conv2d") {
    const std::size_t c_in = 2, h = 5, w = 5, c_out = 3, kh = 3, kw = 3;
    const std::size_t nx = 2 * c_in * h * w, nw = c_out * c_in * kh * kw, nb = c_out;
    auto xv = random_vec(rng, nx + nw + nb, -0.7, 0.7);
    auto eval = [&](Tape& t, const std::vector<double>& v, std::vector<double>* gx,
                    std::vector<double>* gw, std::vector<double>* gb) {
      auto x = Tensor::matrix(2, c_in * h * w, std::vector<double>(v.begin(), v.begin() + nx));
      auto wt = Tensor::matrix(c_out, c_in * kh * kw,
                               std::vector<double>(v.begin() + nx, v.begin() + nx + nw));
      auto bt = Tensor::row(std::vector<double>(v.begin() + nx + nw, v.end()));
      Tensor lx = x, lw = wt, lb = bt;
      if (gx) {
        lx = t.leaf(x);
        lw = t.leaf(wt);
        lb = t.leaf(bt);
      }
      auto y = t.conv2d(lx, lw, lb, c_in, h, w, kh, kw);
      auto loss = t.mean(t.square(t.tanh(y)));
      if (gx) {
        auto grads = t.backward(loss);
        *gx = grads.at(lx.node()).data();
        *gw = grads.at(lw.node()).data();
        *gb = grads.at(lb.node()).data();
      }
      return loss.value();
    };
    std::vector<double> gx, gw, gb;
    {
      Tape t;
      eval(t, xv, &gx, &gw, &gb);
    }
    std::vector<double> analytic = gx;
    analytic.insert(analytic.end(), gw.begin(), gw.end());
    analytic.insert(analytic.end(), gb.begin(), gb.end());
    auto numeric = central_diff(
        [&](const std::vector<double>& v) {
          Tape t2;
          return eval(t2, v, nullptr, nullptr, nullptr);
        },
        xv);
    CHECK(max_rel_err(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("two-layer MLP matches finite differences") {
  Rng rng(99);
  const std::size_t din = 5, dh = 4, dout = 3, batch = 3;
  auto obs = random_vec(rng, batch * din, -1, 1);
  const std::size_t nw1 = din * dh, nb1 = dh, nw2 = dh * dout, nb2 = dout;
  auto theta = random_vec(rng, nw1 + nb1 + nw2 + nb2, -0.8, 0.8);

  auto eval = [&](Tape& t, const std::vector<double>& v, bool with_grads,
                  std::vector<double>* out_grad) {
    std::size_t o = 0;
    auto take = [&](std::size_t n) {
      std::vector<double> part(v.begin() + o, v.begin() + o + n);
      o += n;
      return part;
    };
    auto w1 = Tensor::matrix(din, dh, take(nw1));
    auto b1 = Tensor::row(take(nb1));
    auto w2 = Tensor::matrix(dh, dout, take(nw2));
    auto b2 = Tensor::row(take(nb2));
    Tensor lw1 = w1, lb1 = b1, lw2 = w2, lb2 = b2;
    if (with_grads) {
      lw1 = t.leaf(w1);
      lb1 = t.leaf(b1);
      lw2 = t.leaf(w2);
      lb2 = t.leaf(b2);
    }
    auto x = Tensor::matrix(batch, din, obs);
    auto h1 = t.tanh(t.add(t.matmul(x, lw1), lb1));
    auto logits = t.add(t.matmul(h1, lw2), lb2);
    auto lp = t.log_softmax(logits);
    auto loss = t.negate(t.mean(t.gather(lp, {0, 2, 1})));
    if (with_grads) {
      auto grads = t.backward(loss);
      out_grad->clear();
      for (auto node : {lw1.node(), lb1.node(), lw2.node(), lb2.node()}) {
        const auto& g = grads.at(node).data();
        out_grad->insert(out_grad->end(), g.begin(), g.end());
      }
    }
    return loss.value();
  };

  std::vector<double> analytic;
  {
    Tape t;
    eval(t, theta, true, &analytic);
  }
  auto numeric = central_diff(
      [&](const std::vector<double>& v) {
        Tape t2;
        return eval(t2, v, false, nullptr);
      },
      theta);
  CHECK(max_rel_err(analytic, numeric) < 1e-4);
}

TEST_CASE("log_sum_exp identities") {
  Tape tape;
  Rng rng(5);
  SECTION("single logit is exact") {
    for (double v : {-3.0, 0.0, 42.0, 1e6}) {
      CHECK(tape.log_sum_exp(Tensor::row({v})).value() == v);
    }
  }
  SECTION("shift invariance") {
    for (int trial = 0; trial < 20; ++trial) {
      auto x = random_vec(rng, 6, -5, 5);
      const double c = rng.uniform(-100, 100);
      auto shifted = x;
      for (auto& v : shifted) v += c;
      const double base = tape.log_sum_exp(Tensor::row(x)).value();
      const double moved = tape.log_sum_exp(Tensor::row(shifted)).value();
      CHECK(std::abs(moved - (base + c)) < 1e-10);
    }
  }
}

TEST_CASE("backward determinism: identical tapes give bitwise-identical gradients") {
  auto run = [] {
    Tape t;
    Rng rng(123);
    auto w = t.leaf(Tensor::matrix(4, 4, [&] {
      std::vector<double> v(16);
      for (auto& x : v) x = rng.uniform(-1, 1);
      return v;
    }()));
    auto x = Tensor::matrix(2, 4, {0.1, -0.4, 0.7, 0.2, 0.5, 0.5, -0.9, 0.3});
    auto y = t.mean(t.square(t.tanh(t.matmul(x, w))));
    return t.backward(y).begin()->second.data();
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("adam optimizer") {
  using ebtl::nn::AdamState;
  using ebtl::nn::ParamMap;

  SECTION("zero gradient leaves parameters unchanged and bumps step_count") {
    ParamMap params{{"w", Tensor::row({1.0, -2.0})}};
    AdamState st;
    adam_step(params, {{"w", Tensor::row({0.0, 0.0})}}, st, 0.1);
    CHECK(params.at("w").data()[0] == 1.0);
    CHECK(params.at("w").data()[1] == -2.0);
    CHECK(st.step_count == 1);
  }
  SECTION("first step moves by ~lr against the gradient sign") {
    ParamMap params{{"w", Tensor::row({1.0, 1.0})}};
    AdamState st;
    adam_step(params, {{"w", Tensor::row({0.3, -4.0})}}, st, 0.05);
    CHECK(params.at("w").data()[0] == Catch::Approx(1.0 - 0.05).margin(1e-6));
    CHECK(params.at("w").data()[1] == Catch::Approx(1.0 + 0.05).margin(1e-6));
  }
  SECTION("100 steps on f(x)=x^2 from x=1 converges below 0.05") {
    ParamMap params{{"x", Tensor::scalar(1.0)}};
    AdamState st;
    for (int i = 0; i < 100; ++i) {
      const double x = params.at("x").value();
      adam_step(params, {{"x", Tensor::scalar(2.0 * x)}}, st, 0.1);
    }
    CHECK(std::abs(params.at("x").value()) < 0.05);
  }
  SECTION("non-finite gradient identifies the parameter") {
    ParamMap params{{"bad", Tensor::scalar(1.0)}};
    AdamState st;
    std::vector<double> inf{std::numeric_limits<double>::infinity()};
    CHECK_THROWS_WITH(adam_step(params, {{"bad", Tensor({}, {1.0 / 0.0})}}, st, 0.1),
                      Catch::Matchers::ContainsSubstring("bad"));
    (void)inf;
  }
  SECTION("frozen parameters stay bitwise identical") {
    ParamMap params{{"enc", Tensor::row({0.5, 0.25})}, {"head", Tensor::row({0.5, 0.25})}};
    AdamState st;
    for (int i = 0; i < 3; ++i)
      adam_step(params, {{"enc", Tensor::row({1.0, 1.0})}, {"head", Tensor::row({1.0, 1.0})}}, st,
                0.1, {"enc"});
    CHECK(params.at("enc").data()[0] == 0.5);
    CHECK(params.at("enc").data()[1] == 0.25);
    CHECK(params.at("head").data()[0] != 0.5);
  }
}
