#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "msa/errors.hpp"
#include "msa/gradcheck.hpp"
#include "msa/ops.hpp"
#include "msa/rng.hpp"
#include "msa/tape.hpp"
#include "msa/tensor.hpp"

using namespace msa;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("tensor shape/data invariants") {
  Tensor t = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor::from_vector({2, 3}, {1, 2}), Error);
  CHECK_THROWS_AS(Tensor::from_vector({0, 3}, {}), Error);
  CHECK(Tensor::zeros({4}).all_finite());
}

TEST_CASE("matmul identity and hand oracle") {
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, a);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == a.data()[i]);

  // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]], by hand
  Tensor b = Tensor::from_vector({2, 1}, {5, 6});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(17.0));
  CHECK(c.at(1, 0) == doctest::Approx(39.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kShape);
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x5") != std::string::npos);
  }
}

TEST_CASE("softmax_rows oracle values") {
  // constant row -> uniform
  Tensor c = Tensor::from_vector({1, 3}, {4.2, 4.2, 4.2});
  Tensor sc = softmax_rows(c, 0.7);
  for (std::size_t j = 0; j < 3; ++j) CHECK(sc.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // [1, 0] at temperature 1: [e/(e+1), 1/(e+1)], evaluated via log-sum-exp
  Tensor r = softmax_rows(Tensor::from_vector({1, 2}, {1, 0}), 1.0);
  const double e = std::exp(1.0);
  CHECK(r.at(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-12));
  CHECK(r.at(0, 1) == doctest::Approx(1 / (e + 1)).epsilon(1e-12));
  CHECK(r.at(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));

  // flat limit: huge temperature -> uniform
  Tensor f = softmax_rows(Tensor::from_vector({1, 2}, {1, 0}), 1e9);
  CHECK(f.at(0, 0) == doctest::Approx(0.5).epsilon(1e-8));

  CHECK_THROWS_AS(softmax_rows(c, 0.0), Error);
  CHECK_THROWS_AS(softmax_rows(c, -1.0), Error);
}

TEST_CASE("softmax_rows properties: row sums and shift invariance") {
  Rng rng(99);
  for (int iter = 0; iter < 50; ++iter) {
    const std::size_t r = 1 + rng.index(5), c = 1 + rng.index(6);
    Tensor m = random_tensor({r, c}, rng, -50.0, 50.0);
    const double tau = rng.uniform(0.05, 3.0);
    Tensor s = softmax_rows(m, tau);
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += s.at(i, j);
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
    // add a per-row constant
    std::vector<double> shifted(m.data().begin(), m.data().end());
    std::vector<double> consts(r);
    for (std::size_t i = 0; i < r; ++i) consts[i] = rng.uniform(-5.0, 5.0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) shifted[i * c + j] += consts[i];
    }
    Tensor s2 = softmax_rows(Tensor::from_vector({r, c}, std::move(shifted)), tau);
    for (std::size_t i = 0; i < r * c; ++i) {
      CHECK(std::abs(s.data()[i] - s2.data()[i]) < 1e-9);
    }
  }
}

TEST_CASE("backward: sum gives ones, x*x gives 2x") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::from_vector({3}, {1, 2, 3}));
  Gradients g1 = tape.backward(sum(x));
  for (std::size_t i = 0; i < 3; ++i) CHECK(g1.at(x).data()[i] == 1.0);

  Tape tape2;
  Tensor x2 = tape2.leaf(Tensor::from_vector({3}, {1, 2, 3}));
  Gradients g2 = tape2.backward(sum(mul(x2, x2)));
  // d/dx sum(x^2) = 2x, by hand
  CHECK(g2.at(x2).data()[0] == doctest::Approx(2.0));
  CHECK(g2.at(x2).data()[1] == doctest::Approx(4.0));
  CHECK(g2.at(x2).data()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward: untouched leaves get zeros, untracked loss gives empty map") {
  Tape tape;
  Tensor used = tape.leaf(Tensor::from_vector({2}, {1, 1}));
  Tensor unused = tape.leaf(Tensor::from_vector({2}, {5, 5}));
  Gradients g = tape.backward(sum(used));
  CHECK(g.size() == 2);
  CHECK(g.at(unused).data()[0] == 0.0);
  CHECK(g.at(unused).data()[1] == 0.0);

  Tape tape2;
  Tensor plain = Tensor::scalar(3.0);  // never tracked
  Gradients empty = tape2.backward(plain);
  CHECK(empty.size() == 0);
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::from_vector({2}, {1, 2}));
  CHECK_THROWS_AS(tape.backward(x), Error);
}

TEST_CASE("tape linearity: grad of sum of losses equals sum of grads") {
  Rng rng(7);
  for (int iter = 0; iter < 20; ++iter) {
    Tensor xv = random_tensor({4}, rng);
    Tensor yv = random_tensor({4}, rng);

    auto run = [&](int which) {
      Tape tape;
      Tensor x = tape.leaf(xv);
      Tensor y = tape.leaf(yv);
      Tensor l1 = sum(mul(x, y));
      Tensor l2 = sum(tanh_op(x));
      Tensor loss = which == 0 ? l1 : which == 1 ? l2 : add(l1, l2);
      return tape.backward(loss).at(x);
    };
    Tensor ga = run(0), gb = run(1), gsum = run(2);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::abs(ga.data()[i] + gb.data()[i] - gsum.data()[i]) < 1e-12);
    }
  }
}

TEST_CASE("grad_check: linear function is exact") {
  auto f = [](const std::vector<Tensor>& ps) { return scale(sum(ps[0]), 3.0); };
  Rng rng(3);
  std::vector<Tensor> params = {random_tensor({5}, rng)};
  GradCheckResult r = grad_check(f, params, 1e-5, 32, 11);
  CHECK(r.evaluated == 32);
  CHECK(r.max_rel_error < 1e-10);
}

TEST_CASE("grad_check rejects bad eps and non-finite functions") {
  auto f = [](const std::vector<Tensor>& ps) { return sum(ps[0]); };
  std::vector<Tensor> params = {Tensor::from_vector({2}, {1, 2})};
  CHECK_THROWS_AS(grad_check(f, params, 1e-2, 4, 0), Error);

  auto bad = [](const std::vector<Tensor>& ps) {
    return Tensor::scalar(std::log(ps[0].data()[0] - 100.0));  // NaN on our inputs
  };
  CHECK_THROWS_AS(grad_check(bad, params, 1e-5, 4, 0), Error);
}

TEST_CASE("grad_check skips probes at a hinge kink") {
  // margin - pos + neg == 0 exactly: every probe lands on the kink
  Tensor s = Tensor::from_vector({2, 2}, {0.5, 0.3, 0.3, 0.5});
  auto f = [](const std::vector<Tensor>& ps) {
    return triplet_hinge(ps[0], 0.2, NegativeStrategy::kSumAll);
  };
  GradCheckResult r = grad_check(f, {s}, 1e-5, 16, 5);
  CHECK(r.skipped == 16);
  CHECK(r.evaluated == 0);
}

TEST_CASE("grad_check covers every tensor op") {
  Rng rng(12345);
  const std::size_t b = 3, p = 4, d = 8, heads = 2;
  std::vector<std::uint8_t> mask = {1, 1, 0, 1,  1, 0, 0, 1,  1, 1, 1, 1};

  auto check = [&](const char* name, const ScalarFn& f, std::vector<Tensor> params) {
    GradCheckResult r = grad_check(f, params, 1e-5, 40, 77);
    INFO(name << ": max relative error " << r.max_rel_error);
    CHECK(r.evaluated > 0);
    CHECK(r.max_rel_error < 1e-6);
  };

  check("add/sub/mul/scale",
        [](const std::vector<Tensor>& ps) {
          return sum(mul(sub(scale(ps[0], 1.7), ps[1]), add(ps[0], ps[1])));
        },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});

  check("matmul/transpose",
        [](const std::vector<Tensor>& ps) {
          return sum(matmul(ps[0], transpose(ps[1])));
        },
        {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)});

  check("tanh/sigmoid/reshape",
        [](const std::vector<Tensor>& ps) {
          return sum(mul(tanh_op(reshape(ps[0], {6, 2})), sigmoid(reshape(ps[0], {6, 2}))));
        },
        {random_tensor({3, 4}, rng)});

  check("add_rowvec/softmax_rows",
        [](const std::vector<Tensor>& ps) {
          Tensor sm = softmax_rows(add_rowvec(ps[0], ps[1]), 0.7);
          return sum(mul(sm, sm));
        },
        {random_tensor({3, 4}, rng), random_tensor({4}, rng)});

  check("channel_linear/avg_pool2/global_avg_pool",
        [](const std::vector<Tensor>& ps) {
          Tensor y = channel_linear(ps[0], ps[1], &ps[2]);
          return sum(mul(global_avg_pool(avg_pool2(y)), ps[3]));
        },
        {random_tensor({2, 3, 4, 4}, rng), random_tensor({5, 3}, rng),
         random_tensor({5}, rng), random_tensor({2, 5}, rng)});

  check("embedding/add_posenc/token_softmax_attention/mask_rows/masked_mean_rows",
        [&](const std::vector<Tensor>& ps) {
          std::vector<std::int64_t> ids = {0, 2, 1, 4, 3, 0, 2, 2, 4, 1, 0, 3};
          Tensor e = add_posenc(embedding_lookup(ps[0], ids, b, p), ps[1]);
          Tensor attn = token_softmax_attention(e, e, e, mask, heads,
                                                1.0 / std::sqrt(double(d / heads)));
          Tensor local = mask_rows(add(e, attn), mask);
          return sum(mul(masked_mean_rows(local, mask), ps[2]));
        },
        {random_tensor({5, d}, rng), random_tensor({p, d}, rng),
         random_tensor({b, d}, rng)});

  check("pairwise_gated_attention/add_cls_broadcast/pairwise_cosine",
        [&](const std::vector<Tensor>& ps) {
          Tensor agg = pairwise_gated_attention(ps[0], ps[1], ps[2], mask, 1.3, heads);
          Tensor u = add_cls_broadcast(agg, ps[3]);
          Tensor m = pairwise_cosine(ps[0], u);
          return sum(mul(m, m));
        },
        {random_tensor({b, d}, rng), random_tensor({b, p, d}, rng),
         random_tensor({b, p, d}, rng), random_tensor({b, d}, rng)});

  check("pairwise_softmax_attention",
        [&](const std::vector<Tensor>& ps) {
          Tensor out = pairwise_softmax_attention(ps[0], ps[1], ps[2], ps[3], ps[4],
                                                  mask, heads);
          return sum(mul(out, out));
        },
        {random_tensor({b, d}, rng), random_tensor({b, d}, rng),
         random_tensor({b, d}, rng), random_tensor({b, p, d}, rng),
         random_tensor({b, p, d}, rng)});

  check("cosine_matrix/diagonal_nll",
        [](const std::vector<Tensor>& ps) {
          return diagonal_nll(cosine_matrix(ps[0], ps[1]), 0.2);
        },
        {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)});

  check("rows_kl both sides",
        [](const std::vector<Tensor>& ps) {
          return rows_kl(ps[0], ps[1], 0.8);
        },
        {random_tensor({4, 4}, rng), random_tensor({4, 4}, rng)});

  check("triplet_hinge hardest",
        [](const std::vector<Tensor>& ps) {
          return triplet_hinge(ps[0], 0.2, NegativeStrategy::kHardest);
        },
        {random_tensor({4, 4}, rng)});

  check("triplet_hinge sum_all",
        [](const std::vector<Tensor>& ps) {
          return triplet_hinge(ps[0], 0.2, NegativeStrategy::kSumAll);
        },
        {random_tensor({4, 4}, rng)});
}

TEST_CASE("detach blocks gradient flow") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::from_vector({3}, {1, 2, 3}));
  Tensor loss = sum(mul(detach(x), x));  // only the tracked factor contributes
  Gradients g = tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g.at(x).data()[i] == doctest::Approx(x.data()[i]));
  }
}

TEST_CASE("operands from different tapes are rejected") {
  Tape t1, t2;
  Tensor a = t1.leaf(Tensor::from_vector({2}, {1, 2}));
  Tensor b = t2.leaf(Tensor::from_vector({2}, {3, 4}));
  CHECK_THROWS_AS(add(a, b), Error);
}
