#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "define/rng.hpp"
#include "define/tensor.hpp"
#include "support/oracles.hpp"

using namespace define;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, define::Rng& rng,
                     bool requires_grad = true, double scale = 1.0) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor identity(std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("matmul matches hand-computed products", "[tensor]") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(a, identity(2)).values() == std::vector<double>{1, 2, 3, 4});

  Tensor col({2, 1}, {5, 6});
  CHECK(matmul(identity(2), col).values() == std::vector<double>{5, 6});

  Tensor ones({2, 1}, {1, 1});
  CHECK(matmul(a, ones).values() == std::vector<double>{3, 7});
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes", "[tensor]") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH(matmul(a, b),
                    Catch::Matchers::ContainsSubstring("[2x3]") &&
                        Catch::Matchers::ContainsSubstring("[2x2]"));
}

TEST_CASE("matmul agrees with a naive triple loop", "[tensor]") {
  define::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 1 + rng.next_below(6), k = 1 + rng.next_below(6),
                      n = 1 + rng.next_below(6);
    Tensor a = random_tensor({r, k}, rng, false);
    Tensor b = random_tensor({k, n}, rng, false);
    testsupport::Mat ma{r, k, a.values()}, mb{k, n, b.values()};
    auto expect = testsupport::naive_matmul(ma, mb);
    Tensor got = matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got.values()[i] == Catch::Approx(expect.v[i]).margin(1e-12));
  }
}

TEST_CASE("split produces contiguous chunks", "[tensor]") {
  Tensor x({4}, {1, 2, 3, 4});
  auto parts = split(x, 2);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].values() == std::vector<double>{1, 2});
  CHECK(parts[1].values() == std::vector<double>{3, 4});

  auto whole = split(x, 1);
  CHECK(whole[0].values() == x.values());

  Tensor y({6}, {1, 2, 3, 4, 5, 6});
  auto thirds = split(y, 3);
  CHECK(thirds[0].values() == std::vector<double>{1, 2});
  CHECK(thirds[1].values() == std::vector<double>{3, 4});
  CHECK(thirds[2].values() == std::vector<double>{5, 6});

  CHECK_THROWS_AS(split(x, 3), std::invalid_argument);
}

TEST_CASE("concat joins parts and inverts split", "[tensor]") {
  Tensor p0({2}, {1, 2}), p1({2}, {3, 4});
  CHECK(concat({p0, p1}).values() == std::vector<double>{1, 2, 3, 4});
  CHECK(concat({p0}).values() == p0.values());

  Tensor a({1}, {1}), b({1}, {2}), c({1}, {3});
  CHECK(concat({a, b, c}).values() == std::vector<double>{1, 2, 3});

  Tensor r2 = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(concat({p0, r2}), std::invalid_argument);

  define::Rng rng(5);
  for (auto [d, g] : {std::pair<std::size_t, std::size_t>{12, 3}, {8, 4}, {6, 1}, {10, 10}}) {
    Tensor x = random_tensor({d}, rng, false);
    CHECK(concat(split(x, g)).values() == x.values());
  }
}

TEST_CASE("softmax cross entropy handles the uniform and extreme cases", "[tensor]") {
  Tensor uniform = Tensor::zeros({3, 10});
  Tensor loss = softmax_cross_entropy(uniform, {0, 4, 9});
  CHECK(loss.item() == Catch::Approx(std::log(10.0)).epsilon(1e-12));

  Tensor spiked({1, 2}, {1000.0, 0.0});
  Tensor l2 = softmax_cross_entropy(spiked, {0});
  CHECK(std::isfinite(l2.item()));
  CHECK(l2.item() == Catch::Approx(std::log1p(std::exp(-1000.0))).margin(1e-12));

  CHECK_THROWS_AS(softmax_cross_entropy(uniform, {0, 4}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(uniform, {0, 4, 10}), std::out_of_range);
}

TEST_CASE("embedding lookup gathers rows", "[tensor]") {
  Tensor table = identity(3);
  Tensor row = embedding_lookup(table, {1});
  CHECK(row.values() == std::vector<double>{0, 1, 0});
  CHECK_THROWS_AS(embedding_lookup(table, {3}), std::out_of_range);
  CHECK_THROWS_AS(embedding_lookup(table, {-1}), std::out_of_range);
}

TEST_CASE("backward fills leaf gradients", "[tensor]") {
  SECTION("sum gives ones") {
    Tensor x({3}, {2, -1, 5}, true);
    Tape tape;
    define::backward(sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});
  }
  SECTION("dot(x,x) gives 2x") {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    define::backward(sum(mul(x, x)));
    CHECK(x.grad() == std::vector<double>{2, 4});
  }
  SECTION("no path means no gradient") {
    Tensor x({2}, {1, 2}, true);
    Tensor y({2}, {3, 4}, true);
    Tape tape;
    define::backward(sum(y));
    CHECK_FALSE(x.has_grad());
    CHECK(y.has_grad());
  }
  SECTION("repeated backward accumulates") {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    Tensor loss = sum(mul(x, x));
    define::backward(loss);
    define::backward(loss);
    CHECK(x.grad() == std::vector<double>{4, 8});
  }
  SECTION("non-scalar loss is rejected") {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(define::backward(y), std::invalid_argument);
  }
  SECTION("loss from another tape is rejected") {
    Tensor x({2}, {1, 2}, true);
    Tensor loss;
    {
      Tape inner;
      loss = sum(x);
    }
    Tape outer;
    CHECK_THROWS_AS(define::backward(loss), std::invalid_argument);
  }
}

TEST_CASE("tensors without requires_grad never accumulate", "[tensor]") {
  Tensor x({2}, {1, 2}, false);
  Tensor w({2}, {3, 4}, true);
  Tape tape;
  define::backward(sum(mul(x, w)));
  CHECK_FALSE(x.has_grad());
  CHECK(w.grad() == std::vector<double>{1, 2});
}

TEST_CASE("ops outside a tape do not record", "[tensor]") {
  Tensor x({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  {
    Tape::NoGradGuard guard;
    Tensor z = mul(x, x);
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(tape.node_count() == 0);
}

TEST_CASE("autodiff matches central differences for every op", "[tensor]") {
  define::Rng rng(99);
  auto check = [&](auto&& build, std::vector<Tensor> params) {
    const double err = testsupport::max_grad_rel_err(build, params);
    CHECK(err < 1e-4);
  };

  for (int point = 0; point < 20; ++point) {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    check([&] { return sum(matmul(a, b)); }, {a, b});

    Tensor c = random_tensor({3, 4}, rng);
    Tensor d = random_tensor({2, 4}, rng);
    check([&] { return sum(matmul_nt(c, d)); }, {c, d});

    Tensor e = random_tensor({2, 6}, rng);
    Tensor f = random_tensor({2, 6}, rng);
    Tensor bias = random_tensor({6}, rng);
    check([&] { return sum(mul(add(e, bias), f)); }, {e, f, bias});

    Tensor g = random_tensor({5}, rng);
    check([&] { return sum(mul(tanh(g), sigmoid(g))); }, {g});

    Tensor h = random_tensor({2, 8}, rng);
    check(
        [&] {
          auto parts = split(h, 4);
          std::swap(parts[0], parts[2]);
          return sum(tanh(concat(parts)));
        },
        {h});

    Tensor table = random_tensor({5, 3}, rng);
    check(
        [&] {
          Tensor rows = embedding_lookup(table, {0, 3, 3, 1});
          return sum(mul(rows, rows));
        },
        {table});

    Tensor logits = random_tensor({3, 6}, rng, true, 2.0);
    check([&] { return softmax_cross_entropy(logits, {1, 5, 0}); }, {logits});

    Tensor m = random_tensor({4, 3}, rng);
    check(
        [&] {
          Tensor top = slice_rows(m, 0, 2);
          Tensor bot = slice_rows(m, 2, 2);
          return sum(mul(concat_rows({bot, top}), m));
        },
        {m});

    Tensor p = random_tensor({2, 5}, rng);
    std::vector<std::size_t> perm = rng.permutation(5);
    check([&] { return sum(mul(permute_cols(p, perm), p)); }, {p});
  }
}

TEST_CASE("identical seeds give bit-identical values and gradients", "[tensor]") {
  auto run = [] {
    define::Rng rng(1234);
    Tensor w = random_tensor({4, 4}, rng, true);
    Tensor x = random_tensor({2, 4}, rng, false);
    Tape tape;
    Tensor loss = softmax_cross_entropy(matmul(x, w), {1, 3});
    define::backward(loss);
    return std::pair{w.values(), w.grad()};
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("worker cap does not change matmul results", "[tensor]") {
  define::Rng rng(7);
  Tensor a = random_tensor({300, 80}, rng, false);
  Tensor b = random_tensor({80, 120}, rng, false);
  const int saved = define::detail::thread_cap();
  define::detail::set_thread_cap(1);
  Tensor serial = matmul(a, b);
  define::detail::set_thread_cap(4);
  Tensor threaded = matmul(a, b);
  define::detail::set_thread_cap(saved);
  CHECK(std::memcmp(serial.values().data(), threaded.values().data(),
                    serial.size() * sizeof(double)) == 0);
}
