#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_suite.hpp"
#include "lab/tensor.hpp"

using namespace lab;
using lab::testing::random_tensor;

TEST_CASE("conv1d with identity kernel reproduces the input") {
  Rng rng = Rng::stream(7, "conv_id");
  for (int dil : {1, 2, 4}) {
    const int C = 3;
    Tensor x = random_tensor({2, 9, C}, rng);
    Tensor w = Tensor::zeros({3, C, C});
    for (int c = 0; c < C; ++c) w.data()[static_cast<size_t>((1 * C + c) * C + c)] = 1.0;
    Tensor b = Tensor::zeros({C});
    Tensor y = conv1d(x, w, b, dil);
    REQUIRE(y.shape() == x.shape());
    for (int i = 0; i < x.numel(); ++i)
      CHECK(y.data()[static_cast<size_t>(i)] ==
            doctest::Approx(x.data()[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("conv1d preserves sequence length for dilations 1,2,4") {
  Rng rng = Rng::stream(8, "conv_len");
  for (int dil : {1, 2, 4}) {
    for (int T : {1, 2, 5, 16}) {
      Tensor x = random_tensor({1, T, 2}, rng);
      Tensor w = random_tensor({3, 2, 4}, rng);
      Tensor b = random_tensor({4}, rng);
      Tensor y = conv1d(x, w, b, dil);
      CHECK(y.dim(1) == T);
    }
  }
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor x = Tensor::full({16}, 0.73);
  Tensor y = softmax(x);
  for (real v : y.data()) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
}

TEST_CASE("cross-entropy of uniform logits equals ln K") {
  for (int K : {16, 256}) {
    Tensor logits = Tensor::full({1, K}, 0.2);
    for (int target : {0, K / 2, K - 1}) {
      Tensor loss = cross_entropy_logits(logits, {target});
      CHECK(std::abs(loss.value() - std::log(static_cast<real>(K))) < 1e-6);
    }
  }
}

TEST_CASE("shape mismatch diagnostics name the op and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), std::runtime_error);
  CHECK_THROWS_AS(layer_norm(a, Tensor::zeros({4}), Tensor::zeros({4})),
                  std::runtime_error);
}

TEST_CASE("non-finite input is rejected") {
  CHECK_THROWS_AS(Tensor::from({2}, {1.0, std::nan("")}, false), NumericError);
  CHECK_THROWS_AS(Tensor::from({1}, {INFINITY}, false), NumericError);
}

TEST_CASE("forward evaluation is deterministic") {
  auto build = [] {
    Rng rng = Rng::stream(3, "det");
    Tensor x = random_tensor({2, 4, 6}, rng);
    Tensor w1 = random_tensor({6, 6}, rng), b1 = random_tensor({6}, rng);
    Tensor g = Tensor::full({6}, 1.0), be = Tensor::zeros({6});
    return softmax(layer_norm(gelu(linear(x, w1, b1)), g, be));
  };
  Tensor y1 = build(), y2 = build();
  for (int i = 0; i < y1.numel(); ++i)
    CHECK(y1.data()[static_cast<size_t>(i)] == y2.data()[static_cast<size_t>(i)]);
}

TEST_CASE("cosine similarity endpoints") {
  Tensor a = Tensor::from({1, 3}, {1.0, 2.0, -1.0});
  Tensor b = scale(a, 2.5);
  CHECK(cosine_similarity(a, b).value() == doctest::Approx(1.0).epsilon(1e-9));
  Tensor c = scale(a, -0.5);
  CHECK(cosine_similarity(a, c).value() == doctest::Approx(-1.0).epsilon(1e-9));
  Tensor d = Tensor::from({1, 3}, {2.0, -1.0, 0.0});  // orthogonal to a
  CHECK(cosine_similarity(a, d).value() == doctest::Approx(0.0).epsilon(1e-9));
  Tensor z = Tensor::zeros({1, 3});
  CHECK(std::isfinite(cosine_similarity(a, z).value()));  // eps-guarded
}

TEST_CASE("concat and slice are inverses along an axis") {
  Rng rng = Rng::stream(11, "cat");
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 2, 4}, rng);
  Tensor cat = concat({a, b}, 1);
  REQUIRE(cat.shape() == std::vector<int>{2, 5, 4});
  Tensor back = slice(cat, 1, 3, 2);
  for (int i = 0; i < b.numel(); ++i)
    CHECK(back.data()[static_cast<size_t>(i)] == b.data()[static_cast<size_t>(i)]);
}

TEST_CASE("gather_rows rejects out-of-range indices") {
  Tensor table = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(gather_rows(table, {0, 4}), std::runtime_error);
  CHECK_THROWS_AS(gather_rows(table, {-1}), std::runtime_error);
}

TEST_CASE("avg_pool2d rejects non-divisible spatial dims") {
  CHECK_THROWS_AS(avg_pool2d(Tensor::zeros({1, 5, 4, 2}), 2), std::runtime_error);
}
