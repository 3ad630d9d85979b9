#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "define/rng.hpp"
#include "define/transforms.hpp"
#include "support/oracles.hpp"

using namespace define;

namespace {

Tensor random_input(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-1, 1);
  return Tensor({rows, cols}, std::move(v));
}

void set_identity_blocks(GroupLinearLayer& layer, double scale = 1.0) {
  for (auto& w : layer.weights) {
    std::fill(w.values().begin(), w.values().end(), 0.0);
    for (std::size_t i = 0; i < w.rows() && i < w.cols(); ++i)
      w.at(i, i) = scale;
  }
}

// Dense assembly of the block-diagonal weight, multiplied with a plain loop.
testsupport::Mat block_diagonal_reference(const Tensor& x,
                                          const GroupLinearLayer& layer) {
  testsupport::Mat full{layer.in_dim, layer.out_dim,
                        std::vector<double>(layer.in_dim * layer.out_dim, 0.0)};
  const std::size_t gin = layer.in_dim / layer.groups;
  const std::size_t gout = layer.out_dim / layer.groups;
  for (std::size_t j = 0; j < layer.groups; ++j)
    for (std::size_t r = 0; r < gin; ++r)
      for (std::size_t c = 0; c < gout; ++c)
        full.at(j * gin + r, j * gout + c) = layer.weights[j].at(r, c);
  testsupport::Mat xm{x.rows(), x.cols(), x.values()};
  return testsupport::naive_matmul(xm, full);
}

}  // namespace

TEST_CASE("group transform with identity blocks", "[transforms]") {
  Rng rng(3);
  GroupLinearLayer layer(2, 4, 4, rng);
  set_identity_blocks(layer);
  Tensor x({1, 4}, {1, 2, 3, 4});
  CHECK(group_transform(x, layer).values() == std::vector<double>{1, 2, 3, 4});

  set_identity_blocks(layer);
  for (auto& v : layer.weights[1].values()) v *= 2.0;
  CHECK(group_transform(x, layer).values() == std::vector<double>{1, 2, 6, 8});
}

TEST_CASE("single-group transform is exactly matmul", "[transforms]") {
  Rng rng(17);
  GroupLinearLayer layer(1, 5, 3, rng);
  Tensor x = random_input(4, 5, rng);
  Tensor via_group = group_transform(x, layer);
  Tensor via_matmul = matmul(x, layer.weights[0]);
  CHECK(std::memcmp(via_group.values().data(), via_matmul.values().data(),
                    via_group.size() * sizeof(double)) == 0);
}

TEST_CASE("group transform rejects wrong widths", "[transforms]") {
  Rng rng(1);
  GroupLinearLayer layer(2, 4, 6, rng);
  Tensor x = random_input(2, 5, rng);
  CHECK_THROWS_AS(group_transform(x, layer), std::invalid_argument);
}

TEST_CASE("group transform matches the block-diagonal assembly", "[transforms]") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t g = 1 + rng.next_below(4);
    const std::size_t in = g * (1 + rng.next_below(5));
    const std::size_t out = g * (1 + rng.next_below(5));
    const std::size_t batch = 1 + rng.next_below(4);
    GroupLinearLayer layer(g, in, out, rng);
    Tensor x = random_input(batch, in, rng);
    Tensor got = group_transform(x, layer);
    auto expect = block_diagonal_reference(x, layer);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.values()[i] - expect.v[i]) < 1e-9);
  }
}

TEST_CASE("group schedule halves down to one", "[transforms]") {
  CHECK(group_schedule(8, 4) == std::vector<std::size_t>{8, 4, 2, 1});
  CHECK(group_schedule(1, 3) == std::vector<std::size_t>{1, 1, 1});
  CHECK(group_schedule(4, 5) == std::vector<std::size_t>{4, 2, 1, 1, 1});

  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t g_max = 1 + rng.next_below(32);
    const std::size_t depth = 1 + rng.next_below(12);
    auto gs = group_schedule(g_max, depth);
    REQUIRE(gs.size() == depth);
    CHECK(gs.front() == g_max);
    for (std::size_t l = 0; l < depth; ++l) {
      CHECK(gs[l] >= 1);
      if (l > 0) CHECK(gs[l] <= gs[l - 1]);
    }
  }
}

TEST_CASE("dim schedule snaps linspace to multiples of g_max", "[transforms]") {
  CHECK(dim_schedule(64, 1024, 3, 4) ==
        std::vector<std::size_t>{64, 384, 704, 1024});
  CHECK(dim_schedule(128, 1024, 3, 4) ==
        std::vector<std::size_t>{128, 428, 724, 1024});
  CHECK(dim_schedule(48, 48, 4, 4) ==
        std::vector<std::size_t>{48, 48, 48, 48, 48});
  CHECK_THROWS_AS(dim_schedule(30, 64, 2, 4), std::invalid_argument);
  CHECK_THROWS_AS(dim_schedule(64, 30, 2, 4), std::invalid_argument);

  // ties round up: halfway between 724 and 728 lands on 728
  CHECK(dim_schedule(720, 732, 2, 4)[1] == 728);

  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t g_max = 1 << rng.next_below(4);
    const std::size_t n = g_max * (1 + rng.next_below(16));
    const std::size_t k = n + g_max * rng.next_below(64);
    const std::size_t depth = 1 + rng.next_below(8);
    auto dims = dim_schedule(n, k, depth, g_max);
    REQUIRE(dims.size() == depth + 1);
    CHECK(dims.front() == n);
    CHECK(dims.back() == k);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) CHECK(dims[l] <= dims[l + 1]);
    for (std::size_t d : dims) CHECK(d % g_max == 0);
  }
}

TEST_CASE("closed-form parameter counts", "[transforms]") {
  TransformSpec hgt{Variant::HGT, 3, {4, 8, 16, 32}, {4, 2, 1}};
  CHECK(param_count(hgt) == 584);

  TransformSpec lt{Variant::LT, 3, {4, 8, 16, 32}, {1, 1, 1}};
  CHECK(param_count(lt) == 672);

  TransformSpec glt{Variant::GLT, 3, {4, 8, 16, 32}, {4, 4, 4}, 4};
  CHECK(param_count(glt) == 168);
}

TEST_CASE("parameter count equals allocated scalars", "[transforms]") {
  Rng rng(41);
  for (Variant v : {Variant::LT, Variant::GLT, Variant::GLT_SHUFFLE,
                    Variant::HGT, Variant::HGT_RESIDUAL}) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t g_max = 1 << rng.next_below(4);
      const std::size_t n = g_max * (1 + rng.next_below(6));
      // keep k/2 a multiple of g_max so the residual variant is valid too
      const std::size_t k = 2 * n + 2 * g_max * rng.next_below(8);
      const std::size_t depth = 1 + rng.next_below(4);
      const bool bias = rng.next_below(2) == 1;
      TransformSpec spec = TransformSpec::make(v, n, k, depth, g_max, trial, bias);
      TransformStack stack(spec, rng);
      CHECK(param_count(spec) == stack.parameter_count());
    }
  }
}

TEST_CASE("stack with identity blocks and constant dims is the identity", "[transforms]") {
  Rng rng(5);
  TransformSpec spec{Variant::HGT, 3, {8, 8, 8, 8}, {4, 2, 1}};
  TransformStack stack(spec, rng);
  for (auto& layer : stack.layers()) set_identity_blocks(layer);
  Tensor x = random_input(3, 8, rng);
  Tensor y = stack.forward(x);
  CHECK(y.values() == x.values());
}

TEST_CASE("HGT with g_max=1 is bitwise equal to LT", "[transforms]") {
  const std::size_t n = 6, k = 18, depth = 3;
  Rng rng_a(77), rng_b(77);
  TransformStack hgt(TransformSpec::make(Variant::HGT, n, k, depth, 1), rng_a);
  TransformStack lt(TransformSpec::make(Variant::LT, n, k, depth, 1), rng_b);
  Rng rng_x(9);
  Tensor x = random_input(4, n, rng_x);
  Tensor ya = hgt.forward(x), yb = lt.forward(x);
  CHECK(std::memcmp(ya.values().data(), yb.values().data(),
                    ya.size() * sizeof(double)) == 0);
}

TEST_CASE("GLT with g=1 is bitwise equal to LT", "[transforms]") {
  const std::size_t n = 6, k = 18, depth = 2;
  Rng rng_a(78), rng_b(78);
  TransformStack glt(TransformSpec::make(Variant::GLT, n, k, depth, 1), rng_a);
  TransformStack lt(TransformSpec::make(Variant::LT, n, k, depth, 1), rng_b);
  Rng rng_x(10);
  Tensor x = random_input(2, n, rng_x);
  CHECK(std::memcmp(glt.forward(x).values().data(),
                    lt.forward(x).values().data(),
                    glt.forward(x).size() * sizeof(double)) == 0);
}

TEST_CASE("random stacks match a dense layer-by-layer oracle", "[transforms]") {
  Rng rng(55);
  for (Variant v : {Variant::LT, Variant::GLT, Variant::HGT}) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t g_max = 1 << rng.next_below(3);
      const std::size_t n = g_max * (1 + rng.next_below(4));
      const std::size_t k = n + g_max * (1 + rng.next_below(8));
      const std::size_t depth = 1 + rng.next_below(3);
      TransformStack stack(TransformSpec::make(v, n, k, depth, g_max), rng);
      Tensor x = random_input(2, n, rng);

      testsupport::Mat h{x.rows(), x.cols(), x.values()};
      Tensor cur = x;
      for (const auto& layer : stack.layers()) {
        h = block_diagonal_reference(cur, layer);
        cur = group_transform(cur, layer);
      }
      Tensor y = stack.forward(x);
      REQUIRE(y.size() == h.v.size());
      for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(std::abs(y.values()[i] - h.v[i]) < 1e-9);
    }
  }
}

TEST_CASE("shuffle permutations are seeded and deterministic", "[transforms]") {
  const std::size_t n = 8, k = 16, depth = 3, g = 4;
  Rng rng_a(91), rng_b(91), rng_c(91);
  TransformStack a(TransformSpec::make(Variant::GLT_SHUFFLE, n, k, depth, g, 5), rng_a);
  TransformStack b(TransformSpec::make(Variant::GLT_SHUFFLE, n, k, depth, g, 5), rng_b);
  TransformStack plain(TransformSpec::make(Variant::GLT, n, k, depth, g), rng_c);
  Rng rng_x(12);
  Tensor x = random_input(2, n, rng_x);

  Tensor ya = a.forward(x), yb = b.forward(x);
  CHECK(ya.values() == yb.values());

  // same weight draws as the unshuffled stack, different wiring
  REQUIRE(a.boundary_permutations().size() == depth - 1);
  bool any_nontrivial = false;
  for (const auto& perm : a.boundary_permutations())
    for (std::size_t i = 0; i < perm.size(); ++i)
      if (perm[i] != i) any_nontrivial = true;
  CHECK(any_nontrivial);
  CHECK(ya.values() != plain.forward(x).values());
}

TEST_CASE("shuffle is applied even when g=1", "[transforms]") {
  Rng rng(93);
  TransformStack shuffled(
      TransformSpec::make(Variant::GLT_SHUFFLE, 4, 8, 2, 1, 99), rng);
  Rng rng2(93);
  TransformStack plain(TransformSpec::make(Variant::GLT, 4, 8, 2, 1), rng2);
  Rng rng_x(2);
  Tensor x = random_input(1, 4, rng_x);
  REQUIRE(shuffled.boundary_permutations().size() == 1);
  const auto& perm = shuffled.boundary_permutations()[0];
  bool nontrivial = false;
  for (std::size_t i = 0; i < perm.size(); ++i)
    if (perm[i] != i) nontrivial = true;
  REQUIRE(nontrivial);
  CHECK(shuffled.forward(x).values() != plain.forward(x).values());
}

TEST_CASE("residual variant pins interior widths to k/2", "[transforms]") {
  Rng rng(101);
  TransformSpec spec = TransformSpec::make(Variant::HGT_RESIDUAL, 8, 32, 4, 4);
  CHECK(spec.dims == std::vector<std::size_t>{8, 16, 16, 16, 32});
  TransformStack stack(spec, rng);
  Tensor x = random_input(2, 8, rng);
  CHECK(stack.forward(x).cols() == 32);

  // middle layers really add their input back
  for (auto& layer : stack.layers()) set_identity_blocks(layer);
  Tensor y = stack.forward(x);
  // layer1 copies (identity into 16 wide, zero pad), layers 2 and 3 double, layer 4 projects
  // with identity blocks of g=1 widths 16->32: doubling happens twice
  Tensor first = group_transform(x, stack.layers()[0]);
  CHECK(y.at(0, 0) == Catch::Approx(4.0 * first.at(0, 0)));

  CHECK_THROWS_AS(TransformSpec::make(Variant::HGT_RESIDUAL, 8, 10, 3, 2),
                  std::invalid_argument);
}

TEST_CASE("every stack variant passes a finite-difference check", "[transforms]") {
  Rng rng(111);
  for (Variant v : {Variant::LT, Variant::GLT, Variant::GLT_SHUFFLE,
                    Variant::HGT, Variant::HGT_RESIDUAL}) {
    for (bool bias : {false, true}) {
      TransformSpec spec = TransformSpec::make(v, 4, 8, 3, 2, 7, bias);
      TransformStack stack(spec, rng);
      Tensor x = random_input(2, 4, rng);
      const double err = testsupport::max_grad_rel_err(
          [&] { return sum(mul(stack.forward(x), stack.forward(x))); },
          stack.parameters());
      INFO(variant_name(v) << " bias=" << bias);
      CHECK(err < 1e-4);
    }
  }
}
