#include <cmath>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "mtlstm/rng.hpp"
#include "mtlstm/tape.hpp"
#include "mtlstm/tensor.hpp"
#include "test_util.hpp"

using namespace mtlstm;
using testutil::random_tensor;
using testutil::require_grad_matches;

namespace {

// Independent triple-loop reference multiply.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul basics", "[tensor]") {
  Tape tape;
  SECTION("identity") {
    Value eye = tape.leaf(Tensor::from_matrix(2, 2, {1, 0, 0, 1}));
    Value m = tape.leaf(Tensor::from_matrix(2, 2, {1, 2, 3, 4}));
    Value out = matmul(eye, m);
    REQUIRE(out.tensor().data() == std::vector<double>{1, 2, 3, 4});
  }
  SECTION("1x2 by 2x1") {
    Value a = tape.leaf(Tensor::from_matrix(1, 2, {1, 2}));
    Value b = tape.leaf(Tensor::from_matrix(2, 1, {3, 4}));
    REQUIRE(matmul(a, b).tensor()[0] == 11.0);
  }
  SECTION("random 3x4 by 4x2 matches triple-loop reference") {
    Rng rng(7);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {4, 2});
    Tensor expected = naive_matmul(a, b);
    Value out = matmul(tape.leaf(a), tape.leaf(b));
    for (std::size_t i = 0; i < expected.size(); ++i) {
      REQUIRE(out.tensor()[i] == Catch::Approx(expected[i]).margin(1e-14));
    }
  }
  SECTION("shape mismatch names both shapes") {
    Value a = tape.leaf(Tensor::from_matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    Value b = tape.leaf(Tensor::from_vector({1, 2}));
    REQUIRE_THROWS_WITH(matmul(a, b),
                        Catch::Matchers::ContainsSubstring("[2x3]") &&
                            Catch::Matchers::ContainsSubstring("[2]"));
  }
}

TEST_CASE("add and elementwise_mul", "[tensor]") {
  Tape tape;
  Value a = tape.leaf({1, 2});
  Value zero = tape.leaf({0, 0});
  REQUIRE(add(a, zero).tensor().data() == std::vector<double>{1, 2});

  Value x = tape.leaf({2, 3});
  Value y = tape.leaf({4, 5});
  REQUIRE(mul(x, y).tensor().data() == std::vector<double>{8, 15});

  SECTION("zeros absorb under mul") {
    Rng rng(3);
    Value r = tape.leaf(random_tensor(rng, {5}));
    Value z = tape.leaf(Tensor::zeros({5}));
    for (double v : mul(r, z).tensor().data()) REQUIRE(v == 0.0);
  }
  SECTION("shape mismatch") {
    REQUIRE_THROWS_AS(add(a, tape.leaf({1, 2, 3})), ShapeError);
    REQUIRE_THROWS_AS(mul(a, tape.leaf({1, 2, 3})), ShapeError);
  }
}

TEST_CASE("sigmoid and tanh", "[tensor]") {
  Tape tape;
  REQUIRE(sigmoid(tape.leaf({0.0})).tensor()[0] == 0.5);
  REQUIRE(tanh(tape.leaf({0.0})).tensor()[0] == 0.0);
  // closed form: sigma(ln 3) = 3/4
  REQUIRE(sigmoid(tape.leaf({std::log(3.0)})).tensor()[0] ==
          Catch::Approx(0.75).margin(1e-15));
  SECTION("saturates without overflow") {
    Value big = tape.leaf({1e4, -1e4});
    const Tensor& s = sigmoid(big).tensor();
    REQUIRE(s[0] == 1.0);
    REQUIRE(s[1] == 0.0);
    REQUIRE(std::abs(tanh(big).tensor()[0]) == 1.0);
  }
}

TEST_CASE("softmax", "[tensor]") {
  Tape tape;
  SECTION("uniform on equal logits") {
    const Tensor& y = softmax(tape.leaf({0, 0, 0})).tensor();
    for (std::size_t i = 0; i < 3; ++i) {
      REQUIRE(y[i] == Catch::Approx(1.0 / 3).margin(1e-15));
    }
  }
  SECTION("stable under large equal logits") {
    const Tensor& y = softmax(tape.leaf({1000.0, 1000.0})).tensor();
    REQUIRE(y[0] == 0.5);
    REQUIRE(y[1] == 0.5);
  }
  SECTION("log-scale logits give proportional mass") {
    const Tensor& y =
        softmax(tape.leaf({std::log(1.0), std::log(2.0), std::log(3.0)})).tensor();
    REQUIRE(y[0] == Catch::Approx(1.0 / 6).margin(1e-14));
    REQUIRE(y[1] == Catch::Approx(2.0 / 6).margin(1e-14));
    REQUIRE(y[2] == Catch::Approx(3.0 / 6).margin(1e-14));
  }
  SECTION("sums to one and shift-invariant, 100 random cases") {
    Rng rng(11);
    for (int c = 0; c < 100; ++c) {
      std::size_t n = 2 + rng.uniform_index(7);
      Tensor logits = random_tensor(rng, {n}, -30.0, 30.0);
      Tape t2;
      const Tensor& y = softmax(t2.leaf(logits)).tensor();
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += y[i];
      REQUIRE(std::abs(total - 1.0) <= 1e-12);

      double shift = rng.uniform(-5.0, 5.0);
      Tensor shifted = logits;
      for (std::size_t i = 0; i < n; ++i) shifted[i] += shift;
      const Tensor& y2 = softmax(t2.leaf(shifted)).tensor();
      for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(std::abs(y[i] - y2[i]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("cross_entropy", "[tensor]") {
  Tape tape;
  SECTION("perfect one-hot prediction has zero loss") {
    Value p = tape.leaf({0, 1, 0});
    Value y = tape.leaf({0, 1, 0});
    REQUIRE(cross_entropy(p, y).tensor()[0] == 0.0);
  }
  SECTION("uniform prediction over 4 classes costs ln 4") {
    Value p = tape.leaf({0.25, 0.25, 0.25, 0.25});
    Value y = tape.leaf({1, 0, 0, 0});
    REQUIRE(cross_entropy(p, y).tensor()[0] ==
            Catch::Approx(std::log(4.0)).margin(1e-15));
  }
  SECTION("soft truth") {
    Value p = tape.leaf({0.25, 0.75});
    Value y = tape.leaf({0.5, 0.5});
    double expected = -0.5 * std::log(0.25) - 0.5 * std::log(0.75);
    REQUIRE(cross_entropy(p, y).tensor()[0] ==
            Catch::Approx(expected).margin(1e-12));
    REQUIRE(cross_entropy(p, y).tensor()[0] == Catch::Approx(0.8370).margin(5e-5));
  }
  SECTION("zero prediction is clamped, not -inf") {
    Value p = tape.leaf({0.0, 1.0});
    Value y = tape.leaf({1.0, 0.0});
    REQUIRE(cross_entropy(p, y).tensor()[0] ==
            Catch::Approx(-std::log(kLogFloor)));
  }
  SECTION("non-negative; zero only at one-hot support, 100 random cases") {
    Rng rng(13);
    for (int c = 0; c < 100; ++c) {
      std::size_t n = 2 + rng.uniform_index(5);
      Tape t2;
      Tensor logits = random_tensor(rng, {n}, -3.0, 3.0);
      Value p = softmax(t2.leaf(logits));
      std::size_t hot = rng.uniform_index(n);
      Tensor truth({n});
      truth[hot] = 1.0;
      double loss = cross_entropy(p, t2.leaf(truth)).tensor()[0];
      REQUIRE(loss >= 0.0);
      REQUIRE(loss > 0.0);  // softmax output is never exactly one-hot
    }
  }
}

TEST_CASE("concat", "[tensor]") {
  Tape tape;
  REQUIRE(concat(tape.leaf({1, 2}), tape.leaf({3})).tensor().data() ==
          std::vector<double>{1, 2, 3});
  SECTION("single operand is identity") {
    Tensor x = Tensor::from_vector({4, 5, 6});
    REQUIRE(concat(std::vector<Value>{tape.leaf(x)}).tensor().data() == x.data());
  }
  SECTION("matrix concat needs equal leading dims") {
    Value a = tape.leaf(Tensor::from_matrix(2, 2, {1, 2, 3, 4}));
    Value b = tape.leaf(Tensor::from_matrix(3, 1, {5, 6, 7}));
    REQUIRE_THROWS_AS(concat(a, b), ShapeError);
  }
  SECTION("backward routes gradient slices to each input") {
    Rng rng(5);
    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          Value joined = concat(std::vector<Value>{vs[0], vs[1], vs[2]});
          return sum(mul(joined, joined));
        },
        {random_tensor(rng, {3}), random_tensor(rng, {2}),
         random_tensor(rng, {4})});
  }
}

TEST_CASE("backward basics", "[tensor]") {
  SECTION("identity loss") {
    Tape tape;
    Value x = tape.leaf({3.0});
    tape.backward(x);
    REQUIRE(x.grad()[0] == 1.0);
  }
  SECTION("sum of sigmoid at zero has gradient 0.25 per entry") {
    Tape tape;
    Value x = tape.leaf({0.0, 0.0, 0.0});
    Value loss = sum(sigmoid(x));
    tape.backward(loss);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(x.grad()[i] == 0.25);
    REQUIRE(loss.grad()[0] == 1.0);
  }
  SECTION("non-scalar loss rejected") {
    Tape tape;
    Value x = tape.leaf({1.0, 2.0});
    REQUIRE_THROWS_AS(tape.backward(x), ShapeError);
  }
  SECTION("node unreachable from the loss keeps zero gradient") {
    Tape tape;
    Value x = tape.leaf({1.0});
    Value unused = sigmoid(tape.leaf({2.0, 3.0}));
    tape.backward(sum(mul(x, x)));
    REQUIRE(unused.grad()[0] == 0.0);
    REQUIRE(unused.grad()[1] == 0.0);
  }
  SECTION("random two-layer composite matches finite differences") {
    Rng rng(17);
    Tensor w1 = random_tensor(rng, {4, 3});
    Tensor w2 = random_tensor(rng, {2, 4});
    Tensor x = random_tensor(rng, {3});
    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          Value h = tanh(matmul(vs[0], vs[2]));
          Value y = sigmoid(matmul(vs[1], h));
          return sum(y);
        },
        {w1, w2, x}, 1e-6, 1e-5);
  }
}

TEST_CASE("every op matches finite differences over 20 seeds", "[tensor]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    std::size_t m = 1 + rng.uniform_index(8);
    std::size_t k = 1 + rng.uniform_index(8);

    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          return sum(tanh(matmul(vs[0], vs[1])));
        },
        {random_tensor(rng, {m, k}), random_tensor(rng, {k})});

    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          return sum(mul(add(vs[0], vs[1]), vs[2]));
        },
        {random_tensor(rng, {k}), random_tensor(rng, {k}),
         random_tensor(rng, {k})});

    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          return sum(mul(sigmoid(vs[0]), tanh(vs[0])));
        },
        {random_tensor(rng, {k}, -2.0, 2.0)});

    std::size_t c = 2 + rng.uniform_index(6);
    Tensor truth({c});
    truth[rng.uniform_index(c)] = 1.0;
    require_grad_matches(
        [truth](Tape& t, const std::vector<Value>& vs) {
          return cross_entropy(softmax(vs[0]), t.leaf(truth));
        },
        {random_tensor(rng, {c}, -2.0, 2.0)});

    // cross_entropy gradient w.r.t. both prediction and truth
    Tensor pred({c});
    for (std::size_t i = 0; i < c; ++i) pred[i] = rng.uniform(0.05, 1.0);
    Tensor soft({c});
    for (std::size_t i = 0; i < c; ++i) soft[i] = rng.uniform(0.0, 1.0);
    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          return cross_entropy(vs[0], vs[1]);
        },
        {pred, soft});

    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          return scale(sum_squares(concat(vs[0], vs[1])), 0.5);
        },
        {random_tensor(rng, {m}), random_tensor(rng, {k})});

    require_grad_matches(
        [](Tape& t, const std::vector<Value>& vs) {
          return sum(embed_row(vs[0], 1));
        },
        {random_tensor(rng, {3, k})});
  }
}

TEST_CASE("gradients accumulate across consumers", "[tensor]") {
  Tape tape;
  Value x = tape.leaf({2.0});
  Value y = add(mul(x, x), x);  // x^2 + x, d/dx = 2x + 1 = 5
  tape.backward(sum(y));
  REQUIRE(x.grad()[0] == 5.0);
}

TEST_CASE("finite_diff_grad", "[tensor]") {
  SECTION("quadratic") {
    auto f = [](const Tensor& x) { return x[0] * x[0]; };
    Tensor g = finite_diff_grad(f, Tensor::from_vector({3.0}), 1e-5);
    REQUIRE(g[0] == Catch::Approx(6.0).margin(1e-8));
  }
  SECTION("constant") {
    auto f = [](const Tensor&) { return 4.2; };
    Tensor g = finite_diff_grad(f, Tensor::from_vector({1.0, -1.0, 0.5}));
    for (double v : g.data()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("tape replay is deterministic", "[tensor]") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tape tape;
    Value w = tape.leaf(random_tensor(rng, {4, 4}));
    Value x = tape.leaf(random_tensor(rng, {4}));
    Value loss = sum(sigmoid(matmul(w, x)));
    tape.backward(loss);
    std::vector<double> out = loss.tensor().data();
    auto wg = w.grad().data();
    out.insert(out.end(), wg.begin(), wg.end());
    return out;
  };
  REQUIRE(run(99) == run(99));
}

TEST_CASE("non-finite results are an error, never silent", "[tensor]") {
  Tape tape;
  Value big = tape.leaf({1e308});
  REQUIRE_THROWS_AS(mul(big, big), NumericError);
  REQUIRE_THROWS_AS(tape.leaf({std::nan("")}), NumericError);
}

TEST_CASE("tape node ids are topologically ordered", "[tensor]") {
  Tape tape;
  Value a = tape.leaf({1.0});
  Value b = sigmoid(a);
  Value c = add(a, b);
  REQUIRE(a.id < b.id);
  REQUIRE(b.id < c.id);
}
