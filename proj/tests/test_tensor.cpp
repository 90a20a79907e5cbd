#include <doctest.h>

#include <cmath>

#include "promptlab/tensor.hpp"

using namespace promptlab;

TEST_CASE("matmul identity") {
  Tape tape;
  auto id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  auto c = tape.matmul(id, b);
  CHECK(c->data == std::vector<double>{3, 4, 5, 6});
}

TEST_CASE("matmul direct evaluation") {
  Tape tape;
  auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto b = Tensor::matrix(2, 1, {0, 1});
  auto c = tape.matmul(a, b);
  CHECK(c->data == std::vector<double>{2, 4});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  auto a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(42);
  auto a = Tensor::gaussian({3, 4}, rng, 1.0, true);
  auto b = Tensor::gaussian({4, 2}, rng, 1.0, true);
  auto forward = [&]() {
    Tape t;
    return t.sum(t.matmul(a, b))->data[0];
  };
  Tape tape;
  tape.backward(tape.sum(tape.matmul(a, b)));
  auto fd_a = finite_difference_gradient(forward, *a);
  auto fd_b = finite_difference_gradient(forward, *b);
  CHECK(max_relative_error(a->grad, fd_a) < 1e-6);
  CHECK(max_relative_error(b->grad, fd_b) < 1e-6);
}

TEST_CASE("softmax_columns basics") {
  Tape tape;
  SUBCASE("symmetric column") {
    auto x = Tensor::from_vector({0, 0});
    auto y = tape.softmax_columns(x);
    CHECK(y->data[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y->data[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("large inputs stay finite, larger entry wins") {
    auto x = Tensor::from_vector({1000.0, 1000.1});
    auto y = tape.softmax_columns(x);
    CHECK(std::isfinite(y->data[0]));
    CHECK(y->data[1] > y->data[0]);
    CHECK(y->data[0] + y->data[1] == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("direct evaluation") {
    auto x = Tensor::from_vector({1, 2, 3});
    auto y = tape.softmax_columns(x);
    const double z = std::exp(1) + std::exp(2) + std::exp(3);
    CHECK(y->data[0] == doctest::Approx(std::exp(1) / z).epsilon(1e-14));
    CHECK(y->data[2] == doctest::Approx(std::exp(3) / z).epsilon(1e-14));
  }
}

TEST_CASE("softmax_columns columns sum to 1 for random matrices") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    auto x = Tensor::gaussian({5, 4}, rng, 10.0);
    auto y = tape.softmax_columns(x);
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 5; ++i) s += y->at(i, j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer_norm") {
  Tape tape;
  auto gain = Tensor::from_vector({1, 1});
  auto bias = Tensor::from_vector({0, 0});
  SUBCASE("constant input maps to zero") {
    auto x = Tensor::from_vector({5, 5});
    auto y = tape.layer_norm(x, gain, bias, 1e-8);
    CHECK(y->data[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(y->data[1] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("[1,-1] is its own normalization as eps -> 0") {
    auto x = Tensor::from_vector({1, -1});
    auto y = tape.layer_norm(x, gain, bias, 1e-14);
    CHECK(y->data[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y->data[1] == doctest::Approx(-1.0).epsilon(1e-6));
  }
  SUBCASE("zero mean unit variance before gain/bias") {
    Rng rng(3);
    auto x = Tensor::gaussian({8}, rng, 2.0);
    auto g8 = Tensor::full({8}, 1.0);
    auto b8 = Tensor::zeros({8});
    auto y = tape.layer_norm(x, g8, b8, 1e-12);
    double mean = 0, var = 0;
    for (double v : y->data) mean += v;
    mean /= 8;
    for (double v : y->data) var += (v - mean) * (v - mean);
    var /= 8;
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(std::abs(var - 1.0) <= 1e-10);
  }
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(11);
  auto x = Tensor::gaussian({6}, rng, 1.0, true);
  auto gain = Tensor::gaussian({6}, rng, 0.5, true);
  auto bias = Tensor::gaussian({6}, rng, 0.5, true);
  auto forward = [&]() {
    Tape t;
    auto y = t.layer_norm(x, gain, bias, 1e-5);
    return t.sum(t.mul(y, y))->data[0];
  };
  Tape tape;
  auto y = tape.layer_norm(x, gain, bias, 1e-5);
  tape.backward(tape.sum(tape.mul(y, y)));
  CHECK(max_relative_error(x->grad, finite_difference_gradient(forward, *x)) < 1e-5);
  CHECK(max_relative_error(gain->grad, finite_difference_gradient(forward, *gain)) < 1e-5);
  CHECK(max_relative_error(bias->grad, finite_difference_gradient(forward, *bias)) < 1e-5);
}

TEST_CASE("dropout") {
  SUBCASE("p=0 while training is the identity") {
    Tape tape;
    auto x = Tensor::from_vector({1, 2, 3});
    CHECK(tape.dropout(x, 0.0, true)->data == x->data);
  }
  SUBCASE("eval mode is the identity, bit-exact") {
    Tape tape;
    auto x = Tensor::from_vector({0.1, -0.25, 1e300});
    auto y = tape.dropout(x, 0.5, false);
    CHECK(y.get() == x.get());
  }
  SUBCASE("p >= 1 rejected") {
    Tape tape;
    auto x = Tensor::from_vector({1});
    CHECK_THROWS_AS(tape.dropout(x, 1.0, true), std::invalid_argument);
  }
  SUBCASE("inverted scaling keeps the mean") {
    Tape tape(Rng(99));
    auto x = Tensor::full({100000}, 1.0);
    auto y = tape.dropout(x, 0.5, true);
    double mean = 0;
    for (double v : y->data) mean += v;
    mean /= static_cast<double>(y->size());
    CHECK(std::abs(mean - 1.0) < 0.02);
  }
}

TEST_CASE("cross_entropy") {
  SUBCASE("uniform logits give ln V") {
    Tape tape;
    auto logits = Tensor::zeros({4});
    CHECK(tape.cross_entropy(logits, 2)->data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }
  SUBCASE("confident correct prediction") {
    Tape tape;
    auto logits = Tensor::from_vector({10, 0, 0});
    const double expected = -std::log(std::exp(10.0) / (std::exp(10.0) + 2.0));
    CHECK(tape.cross_entropy(logits, 0)->data[0] == doctest::Approx(expected).epsilon(1e-10));
    CHECK(expected == doctest::Approx(9.1e-5).epsilon(0.01));
  }
  SUBCASE("target out of range") {
    Tape tape;
    auto logits = Tensor::zeros({3});
    CHECK_THROWS_AS(tape.cross_entropy(logits, 3), std::out_of_range);
  }
  SUBCASE("gradient is softmax minus one-hot") {
    Rng rng(5);
    auto logits = Tensor::gaussian({6}, rng, 2.0, true);
    Tape tape;
    tape.backward(tape.cross_entropy(logits, 4));
    Tape t2;
    auto soft = t2.softmax_columns(logits);
    for (std::size_t i = 0; i < 6; ++i) {
      const double expected = soft->data[i] - (i == 4 ? 1.0 : 0.0);
      CHECK(std::abs(logits->grad[i] - expected) <= 1e-10);
    }
  }
}

TEST_CASE("backpropagate") {
  SUBCASE("sum gives ones") {
    auto x = Tensor::from_vector({1, 2, 3}, true);
    Tape tape;
    backpropagate(tape.sum(x), tape);
    CHECK(x->grad == std::vector<double>{1, 1, 1});
  }
  SUBCASE("non-scalar loss rejected") {
    auto x = Tensor::from_vector({1, 2}, true);
    Tape tape;
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  }
  SUBCASE("squared norm of E*p matches finite differences") {
    Rng rng(17);
    auto e = Tensor::gaussian({4, 3}, rng, 1.0, true);
    auto p = Tensor::gaussian({3}, rng, 1.0, true);
    auto forward = [&]() {
      Tape t;
      auto v = t.matmul(e, p);
      return t.sum(t.mul(v, v))->data[0];
    };
    Tape tape;
    auto v = tape.matmul(e, p);
    tape.backward(tape.sum(tape.mul(v, v)));
    CHECK(max_relative_error(e->grad, finite_difference_gradient(forward, *e)) <= 1e-6);
    CHECK(max_relative_error(p->grad, finite_difference_gradient(forward, *p)) <= 1e-6);
  }
  SUBCASE("tensor used twice accumulates both paths") {
    auto x = Tensor::from_vector({2, 3}, true);
    auto forward = [&]() {
      Tape t;
      return t.sum(t.mul(x, x))->data[0];  // x used twice
    };
    Tape tape;
    tape.backward(tape.sum(tape.mul(x, x)));
    CHECK(x->grad[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(x->grad[1] == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(max_relative_error(x->grad, finite_difference_gradient(forward, *x)) <= 1e-8);
  }
  SUBCASE("grads accumulate across backward calls until zeroed") {
    auto x = Tensor::from_vector({1}, true);
    {
      Tape tape;
      tape.backward(tape.sum(x));
    }
    {
      Tape tape;
      tape.backward(tape.sum(x));
    }
    CHECK(x->grad[0] == doctest::Approx(2.0));
    x->zero_grad();
    CHECK(x->grad[0] == 0.0);
  }
}

TEST_CASE("finite_difference_gradient") {
  SUBCASE("quadratic") {
    auto x = Tensor::from_vector({3});
    auto f = [&]() { return x->data[0] * x->data[0]; };
    auto g = finite_difference_gradient(f, *x, 1e-5);
    CHECK(std::abs(g[0] - 6.0) <= 1e-8);
  }
  SUBCASE("constant function has zero gradient") {
    auto x = Tensor::from_vector({1, 2, 3});
    auto f = [&]() { return 42.0; };
    for (double g : finite_difference_gradient(f, *x)) CHECK(g == 0.0);
  }
}

TEST_CASE("determinism: same seed gives bit-identical forward and grads") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto w = Tensor::gaussian({4, 4}, rng, 1.0, true);
    auto x = Tensor::gaussian({4, 3}, rng, 1.0, true);
    Tape tape{Rng(seed)};
    auto y = tape.dropout(tape.relu(tape.matmul(w, x)), 0.3, true);
    tape.backward(tape.sum(y));
    return std::make_pair(y->data, w->grad);
  };
  auto [y1, g1] = run(123);
  auto [y2, g2] = run(123);
  CHECK(y1 == y2);
  CHECK(g1 == g2);
}

TEST_CASE("slice/concat/stack round trips") {
  Rng rng(8);
  auto a = Tensor::gaussian({4, 3}, rng, 1.0, true);
  Tape tape;
  auto top = tape.slice_rows(a, 0, 2);
  auto bottom = tape.slice_rows(a, 2, 4);
  auto back = tape.concat_rows({top, bottom});
  CHECK(back->data == a->data);
  auto left = tape.slice_cols(a, 0, 1);
  auto right = tape.slice_cols(a, 1, 3);
  auto recol = tape.concat_cols(left, right);
  CHECK(recol->data == a->data);
  tape.backward(tape.sum(back));
  for (double g : a->grad) CHECK(g == 1.0);
}
