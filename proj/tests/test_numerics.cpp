#include <cmath>

#include "support.hpp"

using namespace perldiff;
using perldiff::test::random_tensor;

namespace {

// Plain triple loop, independent of the library's Eigen path.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (int k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

Tensor eval_matmul(const Tensor& a, const Tensor& b) {
  Graph g(false);
  return g.value(ops::matmul(g.constant(a), g.constant(b)));
}

// Loss that touches `out` through a fixed random projection so that every
// output element has a distinct weight.
Var project_to_scalar(Graph& g, Var out, std::uint64_t seed) {
  CounterRng rng(seed, "projection");
  const Tensor w = random_tensor(out.dims(), rng);
  return ops::sum(ops::mul(out, g.constant(w)));
}

using OpBuilder = std::function<Var(Graph&, ParameterStore&)>;

double check_op(const OpBuilder& op, ParameterStore& store) {
  const auto loss = [&](Graph& g, ParameterStore& s) { return project_to_scalar(g, op(g, s), 99); };
  const GradCheckResult r = gradient_check(loss, store, 1e-3);
  CHECK(r.checked > 0);
  return r.max_rel_error;
}

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("matmul examples") {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
    CHECK(eval_matmul(a, b) == Tensor::matrix({{19, 22}, {43, 50}}));
    CHECK(eval_matmul(Tensor::matrix({{1, 0}, {0, 1}}), a) == a);
    CHECK(eval_matmul(Tensor::matrix({{2}}), Tensor::matrix({{3}})) == Tensor::matrix({{6}}));
  }

  TEST_CASE("matmul shape mismatch throws") {
    Graph g(false);
    CHECK_THROWS_AS(ops::matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), ShapeError);
  }

  TEST_CASE("matmul agrees with the triple loop and is associative") {
    CounterRng rng(1, "matmul");
    for (int trial = 0; trial < 20; ++trial) {
      const int m = rng.uniform_int(1, 7), k = rng.uniform_int(1, 7), n = rng.uniform_int(1, 7), p = rng.uniform_int(1, 7);
      const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), c = random_tensor({n, p}, rng);
      CHECK(max_abs_diff(eval_matmul(a, b), naive_matmul(a, b)) < 1e-12);
      const Tensor left = eval_matmul(eval_matmul(a, b), c);
      const Tensor right = eval_matmul(a, eval_matmul(b, c));
      CHECK(max_abs_diff(left, right) < 1e-9);
    }
  }

  TEST_CASE("softmax examples") {
    Graph g(false);
    auto sm = [&](std::vector<double> v) {
      const int n = static_cast<int>(v.size());
      return g.value(ops::softmax_lastdim(g.constant(Tensor({1, n}, std::move(v)))));
    };
    const Tensor u = sm({0, 0, 0});
    for (int i = 0; i < 3; ++i) CHECK(u[static_cast<std::size_t>(i)] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    const Tensor s = sm({0, 5});
    CHECK(std::abs(s[0] - 0.0066929) < 1e-6);
    CHECK(std::abs(s[1] - 0.9933071) < 1e-6);
    const double expect = 1.0 / (1.0 + std::exp(5.0));
    for (double c : {-300.0, -7.0, 0.0, 12.5, 700.0}) {
      const Tensor r = sm({c, c + 5});
      CHECK(std::abs(r[0] - expect) < 1e-12);
      CHECK(r.all_finite());
    }
  }

  TEST_CASE("softmax rows sum to one on wide inputs") {
    CounterRng rng(2, "softmax");
    Graph g(false);
    const Tensor x = random_tensor({64, 17}, rng, -50.0, 50.0);
    const Tensor y = g.value(ops::softmax_lastdim(g.constant(x)));
    REQUIRE(y.all_finite());
    for (int r = 0; r < 64; ++r) {
      double s = 0.0;
      for (int c = 0; c < 17; ++c) {
        CHECK(y.at(r, c) >= 0.0);
        s += y.at(r, c);
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }

  TEST_CASE("conv2d examples") {
    CounterRng rng(3, "conv");
    Graph g(false);
    const Tensor x = random_tensor({2, 5, 6}, rng);
    // Delta kernel mixing channels: out0 = in1, out1 = 2 * in0.
    Tensor k({2, 2, 3, 3});
    k[(0 * 2 + 1) * 9 + 4] = 1.0;
    k[(1 * 2 + 0) * 9 + 4] = 2.0;
    const Tensor y = g.value(ops::conv2d(g.constant(x), g.constant(k), 1));
    const std::size_t plane = 30;
    for (std::size_t p = 0; p < plane; ++p) {
      CHECK(y[p] == x[plane + p]);
      CHECK(y[plane + p] == 2.0 * x[p]);
    }
    const Tensor z = g.value(ops::conv2d(g.constant(x), g.constant(Tensor({3, 2, 3, 3})), 2));
    CHECK(z.dims() == Dims{3, 3, 3});
    CHECK(z.max_abs() == 0.0);

    const Tensor flat({1, 6, 6}, 0.7);
    const Tensor y9 = g.value(ops::conv2d(g.constant(flat), g.constant(Tensor({1, 1, 3, 3}, 1.0)), 1));
    for (int i = 1; i < 5; ++i)
      for (int j = 1; j < 5; ++j) CHECK(y9[static_cast<std::size_t>(i * 6 + j)] == doctest::Approx(9 * 0.7).epsilon(1e-14));
    CHECK(y9[0] == doctest::Approx(4 * 0.7).epsilon(1e-14));
  }

  TEST_CASE("conv2d rejects mismatched channels") {
    Graph g(false);
    CHECK_THROWS_AS(ops::conv2d(g.constant(Tensor({2, 4, 4})), g.constant(Tensor({1, 3, 3, 3})), 1), ShapeError);
  }

  TEST_CASE("gradient_check examples") {
    ParameterStore store;
    store.add("theta", Tensor::scalar(3.0));
    const auto square = [](Graph& g, ParameterStore& s) {
      const Var t = g.parameter(s, "theta");
      return ops::sum(ops::mul(t, t));
    };
    const GradCheckResult r = gradient_check(square, store);
    CHECK(r.analytic == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(r.numeric == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(r.max_rel_error < 1e-8);

    CounterRng rng(4, "gc");
    ParameterStore chain;
    chain.add("a", random_tensor({4, 4}, rng));
    chain.add("b", random_tensor({4, 4}, rng));
    const Tensor target = random_tensor({4, 4}, rng);
    const Tensor right = random_tensor({4, 4}, rng);
    const auto mm = [&](Graph& g, ParameterStore& s) {
      const Var ab = ops::matmul(g.parameter(s, "a"), g.constant(right));
      return ops::mse(ops::matmul(ab, g.parameter(s, "b")), g.constant(target));
    };
    CHECK(gradient_check(mm, chain).max_rel_error < 1e-6);
    const auto sm = [&](Graph& g, ParameterStore& s) {
      return ops::mse(ops::softmax_lastdim(ops::matmul(g.parameter(s, "a"), g.parameter(s, "b"))), g.constant(target));
    };
    CHECK(gradient_check(sm, chain).max_rel_error < 1e-5);
  }

  TEST_CASE("gradient_check flags a non-deterministic loss") {
    ParameterStore store;
    store.add("theta", Tensor::scalar(1.0));
    int calls = 0;
    const auto flaky = [&](Graph& g, ParameterStore& s) {
      ++calls;
      return ops::scale(g.parameter(s, "theta"), 1.0 + 1e-3 * calls);
    };
    CHECK_THROWS_AS(gradient_check(flaky, store), GradCheckError);
  }

  TEST_CASE("every differentiable op passes a finite-difference check") {
    CounterRng rng(5, "ops");
    ParameterStore s;
    s.add("a", random_tensor({3, 4}, rng));
    s.add("b", random_tensor({4, 5}, rng));
    s.add("c", random_tensor({3, 4}, rng));
    s.add("d", random_tensor({5, 4}, rng));
    s.add("row", random_tensor({1, 4}, rng));
    s.add("one", Tensor::scalar(0.8));
    s.add("img", random_tensor({4, 6, 6}, rng));
    s.add("img2", random_tensor({2, 6, 6}, rng));
    s.add("k", random_tensor({3, 4, 3, 3}, rng));
    s.add("cb", random_tensor({4}, rng));
    s.add("gamma", random_tensor({4}, rng, 0.5, 1.5));
    s.add("beta", random_tensor({4}, rng));
    s.add("logits", random_tensor({3, 5}, rng, -3.0, 3.0));
    const Tensor target = random_tensor({3, 4}, rng);

    auto p = [](Graph& g, ParameterStore& st, const char* n) { return g.parameter(st, n); };
    const std::vector<std::pair<const char*, OpBuilder>> cases = {
        {"matmul", [&](Graph& g, ParameterStore& st) { return ops::matmul(p(g, st, "a"), p(g, st, "b")); }},
        {"matmul_nt", [&](Graph& g, ParameterStore& st) { return ops::matmul_nt(p(g, st, "a"), p(g, st, "d")); }},
        {"transpose", [&](Graph& g, ParameterStore& st) { return ops::transpose(p(g, st, "a")); }},
        {"add", [&](Graph& g, ParameterStore& st) { return ops::add(p(g, st, "a"), p(g, st, "c")); }},
        {"sub", [&](Graph& g, ParameterStore& st) { return ops::sub(p(g, st, "a"), p(g, st, "c")); }},
        {"mul", [&](Graph& g, ParameterStore& st) { return ops::mul(p(g, st, "a"), p(g, st, "c")); }},
        {"mul_self", [&](Graph& g, ParameterStore& st) { return ops::mul(p(g, st, "a"), p(g, st, "a")); }},
        {"scale", [&](Graph& g, ParameterStore& st) { return ops::scale(p(g, st, "a"), -1.7); }},
        {"scale_by", [&](Graph& g, ParameterStore& st) { return ops::scale_by(p(g, st, "a"), p(g, st, "one")); }},
        {"add_row_bias", [&](Graph& g, ParameterStore& st) { return ops::add_row_bias(p(g, st, "a"), p(g, st, "row")); }},
        {"add_channel_bias",
         [&](Graph& g, ParameterStore& st) { return ops::add_channel_bias(p(g, st, "img"), p(g, st, "cb")); }},
        {"softmax", [&](Graph& g, ParameterStore& st) { return ops::softmax_lastdim(p(g, st, "logits")); }},
        {"silu", [&](Graph& g, ParameterStore& st) { return ops::silu(p(g, st, "a")); }},
        {"conv2d_s1", [&](Graph& g, ParameterStore& st) { return ops::conv2d(p(g, st, "img"), p(g, st, "k"), 1); }},
        {"conv2d_s2", [&](Graph& g, ParameterStore& st) { return ops::conv2d(p(g, st, "img"), p(g, st, "k"), 2); }},
        {"group_norm",
         [&](Graph& g, ParameterStore& st) {
           return ops::group_norm(p(g, st, "img"), 2, p(g, st, "gamma"), p(g, st, "beta"));
         }},
        {"concat0", [&](Graph& g, ParameterStore& st) { return ops::concat0(p(g, st, "img"), p(g, st, "img2")); }},
        {"concat_cols", [&](Graph& g, ParameterStore& st) { return ops::concat_cols(p(g, st, "a"), p(g, st, "logits")); }},
        {"upsample2x", [&](Graph& g, ParameterStore& st) { return ops::upsample2x(p(g, st, "img2")); }},
        {"mean_spatial", [&](Graph& g, ParameterStore& st) { return ops::mean_spatial(p(g, st, "img")); }},
        {"reshape", [&](Graph& g, ParameterStore& st) { return ops::reshape(p(g, st, "a"), {2, 6}); }},
        {"broadcast_rows", [&](Graph& g, ParameterStore& st) { return ops::broadcast_rows(p(g, st, "row"), 5); }},
        {"fill_invalid_rows",
         [&](Graph& g, ParameterStore& st) {
           return ops::fill_invalid_rows(p(g, st, "a"), {true, false, true}, p(g, st, "row"));
         }},
        {"mse", [&](Graph& g, ParameterStore& st) { return ops::mse(p(g, st, "a"), g.constant(target)); }},
        {"mean", [&](Graph& g, ParameterStore& st) { return ops::mean(p(g, st, "a")); }},
        {"sum", [&](Graph& g, ParameterStore& st) { return ops::sum(p(g, st, "logits")); }},
    };
    for (const auto& [name, op] : cases) {
      CAPTURE(name);
      ParameterStore local = s;
      CHECK(check_op(op, local) < 1e-4);
    }
  }

  TEST_CASE("a parameter used twice gets one leaf") {
    ParameterStore s;
    s.add("w", Tensor::scalar(2.0));
    Graph g;
    const Var a = g.parameter(s, "w");
    const Var b = g.parameter(s, "w");
    CHECK(a.id == b.id);
    g.backward(ops::sum(ops::mul(a, b)));
    CHECK(s.entry("w").grad[0] == doctest::Approx(4.0));
  }

  TEST_CASE("backward requires a recording graph and a scalar") {
    Graph off(false);
    CHECK_THROWS(off.backward(off.constant(Tensor::scalar(1.0))));
    Graph on;
    CHECK_THROWS_AS(on.backward(on.constant(Tensor({2}))), ShapeError);
  }

  TEST_CASE("adamw examples") {
    CounterRng rng(6, "adam");
    ParameterStore s;
    s.add("w", random_tensor({3, 3}, rng));
    const Tensor before = s.value("w");

    s.mark_all_grads();
    adamw_step(s, 1e-2, 1);
    CHECK(s.value("w") == before);

    s.mark_all_grads();
    adamw_step(s, 1e-2, 1, AdamWConfig{.weight_decay = 0.01});
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(s.value("w")[i] == doctest::Approx(before[i] * (1 - 1e-2 * 0.01)).epsilon(1e-14));

    ParameterStore f;
    f.add("w", before);
    f.mark_all_grads();
    for (std::size_t i = 0; i < before.size(); ++i) f.entry("w").grad[i] = (i % 2 == 0 ? 1.0 : -1.0) * (0.1 + static_cast<double>(i));
    const double lr = 5e-5;
    adamw_step(f, lr, 1);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(std::abs(std::abs(f.value("w")[i] - before[i]) - lr) < 1e-6);
    CHECK(f.entry("w").has_grad == false);
  }

  TEST_CASE("adamw names the parameter missing a gradient") {
    ParameterStore s;
    s.add("alpha", Tensor::scalar(1.0));
    s.add("beta", Tensor::scalar(1.0));
    s.entry("alpha").grad = Tensor::scalar(0.5);
    s.entry("alpha").has_grad = true;
    try {
      adamw_step(s, 1e-3, 1);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("'beta'") != std::string::npos);
    }
  }

  TEST_CASE("adamw is deterministic and optimizer state starts at zero") {
    CounterRng rng(7, "adam-det");
    ParameterStore a;
    a.add("w", random_tensor({4, 2}, rng));
    CHECK(a.entry("w").first_moment.max_abs() == 0.0);
    CHECK(a.entry("w").second_moment.max_abs() == 0.0);
    ParameterStore b = a;
    const Tensor g = random_tensor({4, 2}, rng);
    for (int step = 1; step <= 5; ++step) {
      for (ParameterStore* s : {&a, &b}) {
        s->mark_all_grads();
        s->entry("w").grad = g;
      }
      adamw_step(a, 1e-3, step);
      adamw_step(b, 1e-3, step);
    }
    CHECK(a.value("w") == b.value("w"));
    CHECK(a.entry("w").second_moment == b.entry("w").second_moment);
  }

  TEST_CASE("warmup ramps linearly then holds") {
    CHECK(warmup_lr(5e-5, 1, 1000) == doctest::Approx(5e-8));
    CHECK(warmup_lr(5e-5, 500, 1000) == doctest::Approx(2.5e-5));
    CHECK(warmup_lr(5e-5, 1000, 1000) == doctest::Approx(5e-5));
    CHECK(warmup_lr(5e-5, 20000, 1000) == 5e-5);
  }

  TEST_CASE("parameter names are unique and gradients match shapes") {
    ParameterStore s;
    s.add("x", Tensor({2, 3}));
    CHECK_THROWS(s.add("x", Tensor({1})));
    Graph g;
    const Var x = g.parameter(s, "x");
    g.backward(ops::sum(ops::silu(x)));
    CHECK(s.entry("x").grad.dims() == s.value("x").dims());
  }

  TEST_CASE("counter rng is reproducible and forks independently") {
    CounterRng a(11, "stream"), b(11, "stream"), c(11, "other");
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(CounterRng(11, "stream").next_u64() != c.next_u64());
    const CounterRng base(3, "base");
    CHECK(base.fork("x", 1).key() != base.fork("x", 2).key());
    CHECK(base.fork("x", 1).key() == base.fork("x", 1).key());
    CounterRng n(12, "normal");
    double sum = 0.0, sq = 0.0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) {
      const double v = n.normal();
      sum += v;
      sq += v * v;
    }
    CHECK(std::abs(sum / draws) < 4.0 / std::sqrt(draws));
    CHECK(std::abs(sq / draws - 1.0) < 4.0 * std::sqrt(2.0 / draws));
  }
}
