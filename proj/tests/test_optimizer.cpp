#include <doctest.h>

#include <cmath>

#include "promptlab/optimizer.hpp"

using namespace promptlab;

TEST_CASE("zero grads with zero decay is a no-op") {
  auto p = Tensor::from_vector({1.5, -2.5, 0.25}, true);
  const auto before = p->data;
  AdamW opt({ParamGroup{{p}, 0.01, 0.0}});
  for (int i = 0; i < 10; ++i) opt.step();
  CHECK(p->data == before);
}

TEST_CASE("closed-form decoupled decay with zero grads") {
  auto p = Tensor::from_vector({1.0, -3.0, 0.5}, true);
  const auto before = p->data;
  AdamW opt({ParamGroup{{p}, 0.01, 1e-5}});
  for (int i = 0; i < 10; ++i) opt.step();
  const double factor = std::pow(1.0 - 0.01 * 1e-5, 10);
  for (std::size_t i = 0; i < p->size(); ++i)
    CHECK(std::abs(p->data[i] - before[i] * factor) <= 1e-12);
}

TEST_CASE("quadratic convergence") {
  auto theta = Tensor::from_vector({0.0}, true);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  AdamW opt({ParamGroup{{theta}, 0.1, 0.0}}, cfg);
  for (int step = 0; step < 500; ++step) {
    opt.zero_grads();
    theta->grad[0] = 2.0 * (theta->data[0] - 3.0);  // d/dx (x-3)^2
    opt.step();
  }
  CHECK(std::abs(theta->data[0] - 3.0) <= 1e-3);
}

TEST_CASE("lambda=0 equals a plain Adam reference") {
  auto p = Tensor::from_vector({0.7, -0.3}, true);
  // Independent reference implementation of Adam, from the definition.
  std::vector<double> ref = p->data, m(2, 0.0), v(2, 0.0);
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  AdamWConfig cfg;
  cfg.lr = lr;
  AdamW opt({ParamGroup{{p}, lr, 0.0}}, cfg);
  Rng rng(4);
  for (int t = 1; t <= 25; ++t) {
    std::vector<double> g{rng.next_gaussian(), rng.next_gaussian()};
    opt.zero_grads();
    p->grad = g;
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mhat = m[i] / (1 - std::pow(b1, t));
      const double vhat = v[i] / (1 - std::pow(b2, t));
      ref[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  for (int i = 0; i < 2; ++i) CHECK(p->data[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("NaN gradient aborts with the tensor name") {
  auto p = Tensor::from_vector({1.0}, true);
  p->name = "prompt.coef0";
  AdamW opt({ParamGroup{{p}, 0.01, 0.0}});
  p->grad[0] = std::nan("");
  CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("prompt.coef0"), std::runtime_error);
}

TEST_CASE("zero_grads") {
  auto a = Tensor::from_vector({1, 2}, true);
  auto b = Tensor::from_vector({3}, true);
  a->grad = {5, 6};
  b->grad = {7};
  const auto data_a = a->data;
  zero_grads({a, b});
  CHECK(a->grad == std::vector<double>{0, 0});
  CHECK(b->grad == std::vector<double>{0});
  zero_grads({a, b});  // idempotent
  CHECK(a->grad == std::vector<double>{0, 0});
  CHECK(a->data == data_a);  // data untouched
}

TEST_CASE("invalid configs rejected") {
  auto p = Tensor::from_vector({1.0}, true);
  AdamWConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(AdamW({ParamGroup{{p}, 0.01, 0.0}}, cfg), std::invalid_argument);
  cfg.lr = 0.01;
  cfg.beta2 = 1.0;
  CHECK_THROWS_AS(AdamW({ParamGroup{{p}, 0.01, 0.0}}, cfg), std::invalid_argument);
}

TEST_CASE("determinism of steps") {
  auto run = [] {
    auto p = Tensor::from_vector({0.2, 0.4}, true);
    AdamW opt({ParamGroup{{p}, 0.01, 1e-4}});
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
      opt.zero_grads();
      p->grad = {rng.next_gaussian(), rng.next_gaussian()};
      opt.step();
    }
    return p->data;
  };
  CHECK(run() == run());
}
