#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"

using namespace itrack;
using namespace itrack::ad;
using itrack::testing::check_gradients;
using itrack::testing::random_matrix;

namespace {

struct Inputs {
  Parameter a{"a", 3, 4}, b{"b", 4, 5}, c{"c", 3, 5}, bias{"bias", 1, 5};
  Parameter x{"x", 6, 2}, w{"w", 2, 5};
  ParamList list() { return {&a, &b, &c, &bias, &x, &w}; }

  explicit Inputs(std::mt19937_64& rng) {
    for (Parameter* p : list()) p->value = random_matrix(rng, p->value.rows(), p->value.cols());
  }
};

void require_clean(const itrack::testing::GradReport& r) {
  CHECK(r.worst < 1e-4);
  CHECK(r.kinks * 50 <= r.checked);
}

}  // namespace

TEST_CASE("elementwise and reduction ops match finite differences") {
  for (int cfg = 0; cfg < 20; ++cfg) {
    std::mt19937_64 rng(100 + cfg);
    Inputs in(rng);
    const Matrix wts = random_matrix(rng, 3, 5);
    const Matrix mc = random_matrix(rng, 3, 5);
    auto loss = [&](Tape& t) {
      Var a = t.param(in.a), b = t.param(in.b), c = t.param(in.c), bias = t.param(in.bias);
      Var ab = add_bias(matmul(a, b), bias);
      Var s1 = add(tanh(ab), sigmoid(c));
      Var s2 = sub(mul(s1, c), scale(relu(ab), 0.3));
      Var s3 = add(mul_const(softplus(s2), mc), neg(add_scalar(square(c), 0.1)));
      Var s4 = add(log(add_scalar(square(ab), 1.0)), exp(scale(c, 0.2)));
      Var s5 = minimum(clamp(s3, -1.5, 1.5), s4);
      Var r = add(weighted_sum(s5, wts), mean(s2));
      return add(r, sum(row_sum(logsumexp_rows(s4))));
    };
    require_clean(check_gradients(in.list(), loss, cfg));
  }
}

TEST_CASE("structural ops match finite differences") {
  for (int cfg = 0; cfg < 20; ++cfg) {
    std::mt19937_64 rng(200 + cfg);
    Inputs in(rng);
    const Matrix wts = random_matrix(rng, 6, 3);
    auto loss = [&](Tape& t) {
      Var a = t.param(in.a), c = t.param(in.c), x = t.param(in.x);
      Var cc = concat_cols({a, c});            // 3 x 9
      Var cr = concat_rows({slice_cols(cc, 2, 3), slice_cols(c, 0, 3)});  // 6 x 3
      Var tr = tile_rows(slice_rows(c, 1, 2), 3);  // 6 x 5
      Var bc = blocks_to_cols(slice_cols(tr, 0, 1), 3);  // 2 x 3
      Var v = add(weighted_sum(tanh(cr), wts), sum(square(bc)));
      return add(v, sum(tanh(matmul(x, slice_rows(slice_cols(cc, 0, 5), 0, 2)))));
    };
    require_clean(check_gradients(in.list(), loss, cfg));
  }
}

TEST_CASE("tiled affine relu matches the unfused graph and its gradients") {
  for (int cfg = 0; cfg < 20; ++cfg) {
    std::mt19937_64 rng(300 + cfg);
    Inputs in(rng);
    const Matrix wts = random_matrix(rng, 6, 5);
    auto fused = [&](Tape& t) {
      Var base = t.param(in.c);
      return tiled_affine_relu(slice_rows(base, 0, 3), t.param(in.x), t.param(in.w),
                               t.param(in.bias), 2);
    };
    auto unfused = [&](Tape& t) {
      Var base = t.param(in.c);
      return relu(add_bias(add(tile_rows(base, 2), matmul(t.param(in.x), t.param(in.w))),
                           t.param(in.bias)));
    };
    {
      Tape t1, t2;
      CHECK((fused(t1).value() - unfused(t2).value()).cwiseAbs().maxCoeff() < 1e-12);
    }
    require_clean(check_gradients(
        in.list(), [&](Tape& t) { return weighted_sum(fused(t), wts); }, cfg));
  }
}

TEST_CASE("conv2d matches finite differences") {
  const ConvShape s{7, 7, 2, 3, 2, 3};
  for (int cfg = 0; cfg < 20; ++cfg) {
    std::mt19937_64 rng(400 + cfg);
    Parameter x("x", 2, s.in_size()), w("w", s.patch(), s.out_c), b("b", 1, s.out_c);
    for (Parameter* p : {&x, &w, &b}) p->value = random_matrix(rng, p->value.rows(), p->value.cols());
    const Matrix wts = random_matrix(rng, 2, s.out_size());
    auto loss = [&](Tape& t) {
      return weighted_sum(tanh(conv2d(t.param(x), t.param(w), t.param(b), s)), wts);
    };
    require_clean(check_gradients({&x, &w, &b}, loss, cfg));
  }
}

TEST_CASE("conv2d forward against a direct loop") {
  const ConvShape s{5, 5, 2, 3, 1, 2};
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(rng, 1, s.in_size());
  const Matrix w = random_matrix(rng, s.patch(), s.out_c), b = random_matrix(rng, 1, s.out_c);
  Tape t;
  const Matrix y = conv2d(t.constant(x), t.constant(w), t.constant(b), s).value();
  for (int oy = 0; oy < s.out_h(); ++oy) {
    for (int ox = 0; ox < s.out_w(); ++ox) {
      for (int oc = 0; oc < s.out_c; ++oc) {
        double acc = b(0, oc);
        for (int ky = 0; ky < s.kernel; ++ky) {
          for (int kx = 0; kx < s.kernel; ++kx) {
            for (int ic = 0; ic < s.in_c; ++ic) {
              const int in_idx = ((oy + ky) * s.in_w + (ox + kx)) * s.in_c + ic;
              const int w_idx = (ky * s.kernel + kx) * s.in_c + ic;
              acc += x(0, in_idx) * w(w_idx, oc);
            }
          }
        }
        CHECK(y(0, (oy * s.out_w() + ox) * s.out_c + oc) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("detach blocks gradient flow") {
  Parameter p("p", 2, 3);
  p.value.setConstant(0.5);
  zero_grads({&p});
  Tape t;
  Var v = t.param(p);
  t.backward(add(sum(square(detach(v))), sum(v)));
  CHECK(p.grad == Matrix::Ones(2, 3));
}

TEST_CASE("constant loss gives zero gradients") {
  Parameter p("p", 2, 2);
  p.value.setOnes();
  p.grad.setConstant(3.0);
  zero_grads({&p});
  Tape t;
  Var v = t.param(p);
  t.backward(add(scale(sum(v), 0.0), sum(t.constant(Matrix::Ones(1, 1)))));
  CHECK(p.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects non-scalar and non-finite losses") {
  Parameter p("p", 2, 2);
  p.value.setOnes();
  {
    Tape t;
    CHECK_THROWS_AS(t.backward(t.param(p)), GradientError);
  }
  {
    Tape t;
    Var v = t.param(p);
    CHECK_THROWS_AS(t.backward(sum(log(sub(v, v)))), GradientError);
  }
  Matrix nan = Matrix::Constant(2, 2, std::numeric_limits<double>::quiet_NaN());
  {
    Tape t;
    CHECK_THROWS_AS(t.backward(sum(mul_const(t.param(p), nan))), GradientError);
  }
}

TEST_CASE("adam with zero learning rate leaves parameters bit exact") {
  std::mt19937_64 rng(1);
  Parameter p("p", 3, 3);
  p.value = random_matrix(rng, 3, 3);
  const Matrix before = p.value;
  Adam opt({&p}, {0.0});
  for (int i = 0; i < 10; ++i) {
    opt.zero_grad();
    Tape t;
    t.backward(sum(square(t.param(p))));
    opt.step();
  }
  CHECK(p.value == before);
}

TEST_CASE("adam minimizes a quadratic") {
  Parameter p("p", 1, 4);
  p.value << 3.0, -2.0, 1.0, 5.0;
  Adam opt({&p}, {0.05});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    Tape t;
    t.backward(sum(square(add_scalar(t.param(p), -1.0))));
    opt.step();
  }
  CHECK((p.value.array() - 1.0).abs().maxCoeff() < 1e-3);
  CHECK(opt.steps() == 2000);
}
