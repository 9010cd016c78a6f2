#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "vrpo/optim.hpp"
#include "vrpo/tensor.hpp"

using namespace vrpo;

TEST_CASE("matmul identity and oracle") {
  const float id2[] = {1, 0, 0, 1};
  Tensor i2 = Tensor::from_span({2, 2}, id2);
  Tensor prod = matmul(i2, i2);
  for (int i = 0; i < 4; ++i) CHECK(prod.data()[i] == doctest::Approx(id2[i]));

  const float a_vals[] = {1, 2, 3, 4};
  Tensor a = Tensor::from_span({2, 2}, a_vals);
  Tensor ai = matmul(a, i2);
  for (int i = 0; i < 4; ++i) CHECK(ai.data()[i] == doctest::Approx(a_vals[i]));

  Rng rng(7);
  Tensor x = Tensor::randn({3, 4}, rng);
  Tensor y = Tensor::randn({4, 2}, rng);
  MatRM expect = test::matmul_oracle(x.to_matrix(), y.to_matrix());
  Tensor got = matmul(x, y);
  CHECK((got.mat() - expect).cwiseAbs().maxCoeff() < 1e-6f);

  CHECK_THROWS_AS(matmul(x, x), DimensionError);
}

TEST_CASE("softmax values, stability, axis") {
  Tensor z = Tensor::from_span({2}, std::vector<float>{0.0f, 0.0f});
  Tensor s = softmax(z);
  CHECK(s.data()[0] == doctest::Approx(0.5f));
  CHECK(s.data()[1] == doctest::Approx(0.5f));

  Tensor big = Tensor::from_span({2}, std::vector<float>{1000.0f, 0.0f});
  Tensor sb = softmax(big);
  CHECK(std::isfinite(sb.data()[0]));
  CHECK(sb.data()[0] == doctest::Approx(1.0f));
  CHECK(sb.data()[1] == doctest::Approx(0.0f).epsilon(1e-6));

  Tensor t = Tensor::from_span({3}, std::vector<float>{1.0f, 2.0f, 3.0f});
  auto oracle = test::softmax_oracle({1.0, 2.0, 3.0});
  Tensor st = softmax(t);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(st.data()[i] - oracle[static_cast<std::size_t>(i)]) < 1e-7);

  // sums to one for arbitrary finite input
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor r = Tensor::randn({5, 9}, rng, 10.0f);
    Tensor sr = softmax(r);
    for (int i = 0; i < 5; ++i) {
      float sum = 0.0f;
      for (int j = 0; j < 9; ++j) sum += sr.mat()(i, j);
      CHECK(std::abs(sum - 1.0f) <= 1e-6f);
    }
  }

  // axis 0 equals transpose-softmax-transpose
  Tensor m = Tensor::randn({4, 3}, rng);
  Tensor s0 = softmax(m, 0);
  Tensor s1 = transpose(softmax(transpose(m)));
  CHECK((s0.mat() - s1.mat()).cwiseAbs().maxCoeff() < 1e-7f);
}

TEST_CASE("layer_norm values and oracle") {
  Tensor g = Tensor::full({4}, 1.0f);
  Tensor b = Tensor::zeros({4});

  Tensor c = Tensor::full({4}, 3.25f);
  Tensor yc = layer_norm(c, g, b);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(yc.data()[i]) < 1e-4f);

  Tensor pm = Tensor::from_span({2}, std::vector<float>{1.0f, -1.0f});
  Tensor g2 = Tensor::full({2}, 1.0f);
  Tensor b2 = Tensor::zeros({2});
  Tensor ypm = layer_norm(pm, g2, b2);
  CHECK(ypm.data()[0] == doctest::Approx(1.0f).epsilon(1e-4));
  CHECK(ypm.data()[1] == doctest::Approx(-1.0f).epsilon(1e-4));

  Rng rng(11);
  Tensor x = Tensor::randn({6}, rng, 2.0f);
  std::vector<double> xd(6);
  for (int i = 0; i < 6; ++i) xd[static_cast<std::size_t>(i)] = x.data()[i];
  auto oracle = test::layer_norm_oracle(xd, 1e-5);
  Tensor g6 = Tensor::full({6}, 1.0f);
  Tensor b6 = Tensor::zeros({6});
  Tensor y = layer_norm(x, g6, b6);
  for (int i = 0; i < 6; ++i)
    CHECK(std::abs(y.data()[i] - oracle[static_cast<std::size_t>(i)]) < 1e-5);
}

TEST_CASE("backward basics: sum and dot") {
  GradTape tape;
  Rng rng(5);
  Tensor x = Tensor::randn({7}, rng, 1.0f, true);
  {
    TapeScope scope(tape);
    Tensor loss = sum(x);
    backward(loss);
  }
  for (int i = 0; i < 7; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0f));
  tape.clear();

  x.zero_grad();
  {
    TapeScope scope(tape);
    Tensor loss = dot(x, x);
    backward(loss);
  }
  for (int i = 0; i < 7; ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]).epsilon(1e-5));
  tape.clear();

  // non-scalar loss rejected
  {
    TapeScope scope(tape);
    Tensor v = add(x, x);
    CHECK_THROWS_AS(backward(v), ContractError);
  }
  tape.clear();
}

TEST_CASE("backward determinism: identical grads across two runs") {
  Rng rng(17);
  Tensor w = Tensor::randn({6, 6}, rng, 0.5f, true);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0f, true);
  GradTape tape;
  ArrX first_w, first_x;
  {
    TapeScope scope(tape);
    Tensor loss = sum(tanh_t(matmul(x, w)));
    backward(loss);
    first_w = w.grad();
    first_x = x.grad();
    backward(loss);  // same tape, second run
  }
  CHECK((w.grad() == first_w).all());
  CHECK((x.grad() == first_x).all());
  tape.clear();
}

namespace {

// Pushes every entry at least `margin` away from `kink`.
vrpo::Tensor away_from(vrpo::Tensor t, float kink, float margin) {
  for (std::int64_t i = 0; i < t.size(); ++i) {
    float& v = t.data()[i];
    if (std::abs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin) * 2.0f;
  }
  return t;
}

}  // namespace

TEST_CASE("gradcheck: every differentiable op, 10 seeds") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor a = Tensor::randn({3, 5}, rng, 1.0f, true);
    Tensor b = Tensor::randn({5, 4}, rng, 0.5f, true);
    Tensor c = Tensor::randn({3, 4}, rng, 1.0f, true);
    Tensor rv = Tensor::randn({4}, rng, 1.0f, true);
    Tensor g = Tensor::randn({5}, rng, 0.3f, true);
    Tensor h = Tensor::randn({5}, rng, 0.3f, true);
    Tensor w_a = Tensor::randn({3, 5}, rng, 0.25f);  // fixed coefficients
    Tensor w_b = Tensor::randn({3, 4}, rng, 0.25f);

    int check_counter = 0;
    auto check = [&](std::vector<Tensor> params, std::function<Tensor()> fn) {
      auto res = test::gradcheck_directional(std::move(params), fn, rng, 4);
      CHECK(res.max_rel_err < 1e-3);
      if (res.max_rel_err >= 1e-3) MESSAGE("op #", check_counter, " err ", res.max_rel_err);
      ++check_counter;
    };

    check({a, b}, [&] { return sum(mul(w_b, matmul(a, b))); });
    check({a}, [&] { return sum(mul(w_a, transpose(transpose(a)))); });
    check({c, rv}, [&] { return sum(mul(w_b, add(c, rv))); });
    check({c, rv}, [&] { return sum(mul(w_b, sub(c, rv))); });
    check({a}, [&] { return sum(mul(w_a, scale(a, 1.7f))); });
    check({a}, [&] { return sum(mul(w_a, add_scalar(a, 0.3f))); });
    check({a}, [&] { return sum(mul(w_a, exp_t(scale(a, 0.3f)))); });
    check({a}, [&] { return sum(mul(w_a, log_t(add_scalar(mul(a, a), 0.5f)))); });
    check({a}, [&] { return sum(mul(w_a, tanh_t(a))); });
    check({a}, [&] { return sum(mul(w_a, gelu(a))); });
    {
      Tensor a_off = away_from(Tensor::randn({3, 5}, rng, 1.0f, true), 0.0f, 0.05f);
      check({a_off}, [&] { return sum(mul(w_a, relu(a_off))); });
    }
    check({a}, [&] { return sum(mul(w_a, softmax(a))); });
    check({a}, [&] { return sum(mul(w_a, log_softmax(a))); });
    check({a, g, h}, [&] { return sum(mul(w_a, layer_norm(a, g, h))); });
    check({a}, [&] { return mean(mul(a, a)); });
    {
      // operands separated so the min branch never flips under perturbation
      MatRM m0;
      {
        NoGradScope ng;
        m0 = matmul(a, b).to_matrix();
      }
      Tensor c_sep = Tensor::from_matrix(m0, true);
      Rng flip(seed * 7 + 1);
      std::uniform_real_distribution<float> delta(0.3f, 0.9f);
      std::bernoulli_distribution coin(0.5);
      for (std::int64_t i = 0; i < c_sep.size(); ++i)
        c_sep.data()[i] += coin(flip) ? delta(flip) : -delta(flip);
      check({a, b, c_sep}, [&] { return sum(mul(w_b, minimum(matmul(a, b), c_sep))); });
    }
    {
      Tensor a_cl = away_from(
          away_from(Tensor::randn({3, 5}, rng, 1.0f, true), 0.8f, 0.05f), -0.8f, 0.05f);
      check({a_cl}, [&] { return sum(mul(w_a, clamp(a_cl, -0.8f, 0.8f))); });
    }
    Tensor w_r2 = Tensor::randn({2, 5}, rng, 0.25f);
    check({a}, [&] { return sum(mul(w_r2, rows(a, 1, 2))); });
    Tensor w_c3 = Tensor::randn({3, 3}, rng, 0.25f);
    check({a}, [&] { return sum(mul(w_c3, cols(a, 2, 3))); });
    std::vector<int> gidx = {2, 0, 1, 2};
    Tensor w_g = Tensor::randn({4, 5}, rng, 0.25f);
    check({a}, [&] { return sum(mul(w_g, gather_rows(a, gidx))); });
    std::vector<int> pidx = {1, 3, 0};
    check({a}, [&] { return sum(pick_per_row(a, pidx)); });
    check({a}, [&] {
      std::vector<Tensor> parts = {a, scale(a, 0.5f)};
      Tensor cat = concat_rows(parts);
      return sum(mul(concat_rows(std::vector<Tensor>{w_a, w_a}), cat));
    });
    Tensor w_cc = Tensor::randn({3, 8}, rng, 0.15f);
    check({a, c}, [&] {
      std::vector<Tensor> parts = {matmul(a, b), c};
      return sum(mul(w_cc, concat_cols(parts)));
    });
    std::vector<int> rope_pos = {0, 3, 9};
    check({a}, [&] { return sum(mul(w_b, rope(matmul(a, detach(b)), rope_pos, 2))); });
    Tensor w_rs = Tensor::randn({5, 3}, rng, 0.25f);
    check({a}, [&] { return sum(mul(w_rs, reshape(a, {5, 3}))); });
  }
}

TEST_CASE("gradcheck: two-layer MLP against finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed * 131);
    Tensor x = Tensor::randn({4, 6}, rng);
    Tensor w1 = Tensor::randn({6, 8}, rng, 0.5f, true);
    Tensor b1 = Tensor::randn({8}, rng, 0.1f, true);
    Tensor w2 = Tensor::randn({8, 3}, rng, 0.5f, true);
    Tensor b2 = Tensor::randn({3}, rng, 0.1f, true);
    Tensor coef = Tensor::randn({4, 3}, rng);

    auto fn = [&] {
      Tensor h = tanh_t(add(matmul(x, w1), b1));
      Tensor y = add(matmul(h, w2), b2);
      return sum(mul(coef, y));
    };
    // step sized for float32 forward-evaluation noise
    auto res = test::gradcheck_directional({w1, b1, w2, b2}, fn, rng, 6, 1e-2f);
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("adamw minimizes a quadratic") {
  Rng rng(23);
  Tensor x = Tensor::randn({8}, rng, 2.0f, true);
  AdamWConfig cfg;
  cfg.lr = 0.05f;
  cfg.warmup_steps = 0;
  AdamW opt({x}, cfg);
  GradTape tape;
  float first = 0.0f, last = 0.0f;
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    TapeScope scope(tape);
    Tensor loss = mean(mul(x, x));
    if (step == 0) first = loss.item();
    last = loss.item();
    backward(loss);
    tape.clear();
    opt.step();
  }
  CHECK(last < 0.01f * first);
}
