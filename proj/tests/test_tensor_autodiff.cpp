#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "stv/gradcheck.hpp"
#include "stv/tape.hpp"
#include "stv/tensor.hpp"
#include "test_util.hpp"

using namespace stv;
using namespace stv::ad;
using stv::test::random_tensor;
using stv::test::tape_fn;

TEST(Tensor, InvariantsAndConstruction) {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  t.check_invariants();
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
}

TEST(Tensor, SerializationRoundTrip) {
  Tensor t = random_tensor({3, 4, 2}, 11);
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor back = read_tensor(ss);
  EXPECT_EQ(back.shape, t.shape);
  EXPECT_EQ(back.data, t.data);
}

TEST(Tensor, SerializationTruncated) {
  Tensor t = random_tensor({4}, 3);
  std::stringstream ss;
  write_tensor(ss, t);
  std::string blob = ss.str();
  std::stringstream cut(blob.substr(0, blob.size() - 9));
  EXPECT_THROW(read_tensor(cut), IoError);
}

TEST(Elementwise, HadamardDefinition) {
  Tape t;
  Var a = t.leaf(Tensor::from({2}, {1, 2}));
  Var b = t.leaf(Tensor::from({2}, {3, 4}));
  Var c = mul(t, a, b);
  EXPECT_EQ(t.value(c).data, (std::vector<double>{3, 8}));
}

TEST(Elementwise, HingeClampDefinition) {
  Tape t;
  Var a = t.leaf(Tensor::from({3}, {-1.8, 0.0, 0.3}));
  Var c = hinge_clamp(t, a);
  EXPECT_EQ(t.value(c).data, (std::vector<double>{0.0, 0.0, 0.3}));
}

TEST(Elementwise, SumMatchesDirectLoopOracle) {
  Tensor x = random_tensor({4, 4}, 21);
  double oracle = 0.0;
  for (double v : x.data) oracle += v;  // independent accumulation
  Tape t;
  Var s = sum(t, t.leaf(x));
  EXPECT_NEAR(t.value(s).data[0], oracle, 1e-12);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var a = t.leaf(Tensor({2, 3}));
  Var b = t.leaf(Tensor({3, 2}));
  try {
    add(t, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, SqrtNegativeDomainError) {
  Tape t;
  Var a = t.leaf(Tensor::from({2}, {4.0, -1.0}));
  EXPECT_THROW(ad::sqrt(t, a), DomainError);
}

TEST(Elementwise, DispatchMirrorsNamedOps) {
  Tape t;
  Var a = t.leaf(Tensor::from({3}, {1, -2, 3}));
  Var r1 = elementwise_and_reduce(t, EwKind::relu, {a});
  Var r2 = relu(t, a);
  EXPECT_EQ(t.value(r1).data, t.value(r2).data);
  Var s = elementwise_and_reduce(t, EwKind::scale, {a}, 2.0);
  EXPECT_EQ(t.value(s).data, (std::vector<double>{2, -4, 6}));
  EXPECT_THROW(elementwise_and_reduce(t, EwKind::add, {a}), DomainError);
}

TEST(Elementwise, OpsArePure) {
  Tensor x = random_tensor({5}, 33);
  const std::vector<double> snapshot = x.data;
  Tape t;
  Var a = t.leaf(x);
  square(t, a);
  relu(t, a);
  sum(t, a);
  EXPECT_EQ(x.data, snapshot);
  // identical outputs on identical inputs
  Tape t2;
  Var a2 = t2.leaf(x);
  EXPECT_EQ(t.value(square(t, a)).data, t2.value(square(t2, a2)).data);
}

TEST(Matmul, IdentityTimesMatrix) {
  Tensor id({3, 3});
  for (int i = 0; i < 3; ++i) id.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;
  Tensor m = random_tensor({3, 4}, 5);
  Tape t;
  Var r = matmul(t, t.leaf(id), t.leaf(m));
  for (std::size_t i = 0; i < m.numel(); ++i)
    EXPECT_DOUBLE_EQ(t.value(r).data[i], m.data[i]);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Tensor a = random_tensor({2, 3}, 7);
  Tensor b = random_tensor({3, 2}, 8);
  // naive triple loop oracle
  double oracle[2][2] = {};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 3; ++k)
        oracle[i][j] += a.data[static_cast<std::size_t>(i * 3 + k)] *
                        b.data[static_cast<std::size_t>(k * 2 + j)];
  Tape t;
  Var r = matmul(t, t.leaf(a), t.leaf(b));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      EXPECT_NEAR(t.value(r).at2(static_cast<std::size_t>(i), static_cast<std::size_t>(j)),
                  oracle[i][j], 1e-12);
}

TEST(Matmul, InnerDimensionMismatch) {
  Tape t;
  Var a = t.leaf(Tensor({2, 3}));
  Var b = t.leaf(Tensor({2, 3}));
  EXPECT_THROW(matmul(t, a, b), ShapeError);
}

TEST(L2Normalize, ThreeFourFive) {
  Tape t;
  Var v = l2_normalize(t, t.leaf(Tensor::from({2}, {3, 4})));
  EXPECT_NEAR(t.value(v).data[0], 0.6, 1e-15);
  EXPECT_NEAR(t.value(v).data[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitVectorFixedPoint) {
  Tensor u = random_tensor({6}, 9);
  double r = 0.0;
  for (double x : u.data) r += x * x;
  r = std::sqrt(r);
  for (double& x : u.data) x /= r;
  Tape t;
  Var v = l2_normalize(t, t.leaf(u));
  for (std::size_t i = 0; i < u.numel(); ++i)
    EXPECT_NEAR(t.value(v).data[i], u.data[i], 1e-12);
  double norm = 0.0;
  for (double x : t.value(v).data) norm += x * x;
  EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-9);
}

TEST(L2Normalize, NearZeroVectorRejected) {
  Tape t;
  EXPECT_THROW(l2_normalize(t, t.leaf(Tensor::from({3}, {0, 0, 0}))), DomainError);
}

TEST(L2Normalize, JacobianFiniteDifference) {
  // random 8-vector; probe the full Jacobian through random projections
  Tensor x = random_tensor({8}, 42, 0.2, 1.0);
  Tensor w = random_tensor({8}, 43);
  auto f = tape_fn([&](Tape& t, const std::vector<Var>& p) {
    Var y = l2_normalize(t, p[0]);
    return sum(t, mul(t, y, t.leaf(w)));
  });
  EXPECT_LT(finite_difference_check(f, {x}, 1e-6), 1e-6);
}

TEST(Softmax, SymmetryAndShiftInvariance) {
  Tape t;
  Var s1 = softmax(t, t.leaf(Tensor::from({2}, {0, 0})));
  EXPECT_DOUBLE_EQ(t.value(s1).data[0], 0.5);
  EXPECT_DOUBLE_EQ(t.value(s1).data[1], 0.5);
  Var s2 = softmax(t, t.leaf(Tensor::from({2}, {1000, 1000})));
  EXPECT_DOUBLE_EQ(t.value(s2).data[0], 0.5);
  EXPECT_DOUBLE_EQ(t.value(s2).data[1], 0.5);
}

TEST(Softmax, MatchesDirectOracle) {
  Tensor x = random_tensor({5}, 17, -2.0, 2.0);
  // direct exp/sum oracle
  double z = 0.0;
  std::vector<double> expect(5);
  for (int i = 0; i < 5; ++i) z += std::exp(x.data[static_cast<std::size_t>(i)]);
  for (int i = 0; i < 5; ++i)
    expect[static_cast<std::size_t>(i)] = std::exp(x.data[static_cast<std::size_t>(i)]) / z;
  Tape t;
  Var s = softmax(t, t.leaf(x));
  double total = 0.0;
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(t.value(s).data[static_cast<std::size_t>(i)], expect[static_cast<std::size_t>(i)],
                1e-12);
    EXPECT_GT(t.value(s).data[static_cast<std::size_t>(i)], 0.0);
    EXPECT_LT(t.value(s).data[static_cast<std::size_t>(i)], 1.0);
    total += t.value(s).data[static_cast<std::size_t>(i)];
  }
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(Softmax, NonFiniteRejected) {
  Tape t;
  EXPECT_THROW(softmax(t, t.leaf(Tensor::from({2}, {1.0, INFINITY}))), DomainError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = random_tensor({3, 3}, 1);
  x.requires_grad = true;
  Tape t;
  Var v = t.leaf(x);
  t.backward(sum(t, v));
  for (double g : t.grad(v)) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, QuadraticGivesTwoX) {
  Tensor x = random_tensor({7}, 2);
  x.requires_grad = true;
  Tape t;
  Var v = t.leaf(x);
  t.backward(sum(t, mul(t, v, v)));
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(t.grad(v)[i], 2.0 * x.data[i], 1e-14);
}

TEST(Backward, TwiceAccumulatesExactlyDouble) {
  Tensor x = random_tensor({4}, 3);
  x.requires_grad = true;
  Tape t;
  Var v = t.leaf(x);
  Var loss = sum(t, square(t, v));
  t.backward(loss);
  std::vector<double> once = t.grad(v);
  t.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i)
    EXPECT_DOUBLE_EQ(t.grad(v)[i], 2.0 * once[i]);
  t.zero_grad();
  t.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_DOUBLE_EQ(t.grad(v)[i], once[i]);
}

TEST(Backward, RequiresScalarLossInGraph) {
  Tape t;
  Tensor x = random_tensor({3}, 4);
  x.requires_grad = true;
  Var v = t.leaf(x);
  EXPECT_THROW(t.backward(v), ShapeError);        // not scalar
  EXPECT_THROW(t.backward(Var{99}), DomainError);  // not in graph
}

TEST(Backward, CompositeMatmulReluSum) {
  Tensor a = random_tensor({3, 4}, 5);
  Tensor b = random_tensor({4, 2}, 6);
  auto f = tape_fn([](Tape& t, const std::vector<Var>& p) {
    return sum(t, relu(t, matmul(t, p[0], p[1])));
  });
  EXPECT_LT(finite_difference_check(f, {a, b}, 1e-5), 1e-6);
}

TEST(Backward, NonGradInputsRecordButDoNotFlow) {
  Tape t;
  Tensor x = random_tensor({3}, 8);
  x.requires_grad = true;
  Tensor c = random_tensor({3}, 9);  // constant
  Var vx = t.leaf(x);
  Var vc = t.leaf(c);
  std::size_t before = t.grad_node_count();
  Var prod = mul(t, vc, vc);  // pure constant computation
  EXPECT_EQ(t.grad_node_count(), before);
  t.backward(sum(t, mul(t, vx, prod)));
  EXPECT_TRUE(t.grad(vc).empty());
  EXPECT_FALSE(t.grad(vx).empty());
}

// Property: analytic gradients of all primitive differentiable ops match
// central finite differences at random non-degenerate points.
TEST(Backward, PrimitiveOpGradientSweep) {
  struct Case {
    const char* name;
    ad::CheckedFn fn;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases;
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    Tensor a = random_tensor({3, 4}, seed, 0.3, 1.5);  // positive: safe for sqrt, off-kink
    Tensor b = random_tensor({3, 4}, seed + 50, 0.3, 1.5);
    Tensor m = random_tensor({3, 5}, seed + 100);
    Tensor w = random_tensor({4, 3}, seed + 150);
    cases.push_back({"add", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return sum(t, add(t, p[0], p[1]));
                     }),
                     {a, b}});
    cases.push_back({"sub", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return sum(t, square(t, sub(t, p[0], p[1])));
                     }),
                     {a, b}});
    cases.push_back({"hadamard", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return sum(t, mul(t, p[0], p[1]));
                     }),
                     {a, b}});
    cases.push_back({"scale_mean", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return mean(t, scale(t, p[0], 2.5));
                     }),
                     {a}});
    cases.push_back({"sqrt", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return sum(t, ad::sqrt(t, p[0]));
                     }),
                     {a}});
    cases.push_back({"hinge", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return sum(t, hinge_clamp(t, affine(t, p[0], 1.0, -0.9)));
                     }),
                     {a}});
    cases.push_back({"matmul", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       return sum(t, matmul(t, p[0], p[1]));
                     }),
                     {w, m}});
    cases.push_back({"softmax_rows", tape_fn([&](Tape& t, const std::vector<Var>& p) {
                       Var s = softmax_rows(t, p[0]);
                       return sum(t, square(t, s));
                     }),
                     {m}});
    cases.push_back({"l2norm_rows", tape_fn([&](Tape& t, const std::vector<Var>& p) {
                       Var y = l2_normalize_rows(t, p[0]);
                       return sum(t, mul(t, y, t.leaf(random_tensor({3, 4}, 999))));
                     }),
                     {a}});
    cases.push_back({"gather_concat", tape_fn([](Tape& t, const std::vector<Var>& p) {
                       Var g = gather_rows(t, p[0], {2, 0, 2});
                       Var f = reshape(t, g, {15});
                       Var c = select_column(t, p[0], 1);
                       return sum(t, square(t, concat(t, {f, c})));
                     }),
                     {m}});
  }
  for (auto& c : cases) {
    EXPECT_LT(finite_difference_check(c.fn, c.params, 1e-5), 1e-6) << c.name;
  }
}

TEST(GradCheck, LinearIsExact) {
  Tensor x = random_tensor({6}, 12);
  Tensor w = random_tensor({6}, 13);
  auto f = tape_fn([&](Tape& t, const std::vector<Var>& p) {
    return sum(t, mul(t, p[0], t.leaf(w)));
  });
  EXPECT_LT(finite_difference_check(f, {x}, 1e-4), 1e-10);
}

TEST(GradCheck, RejectsBadEps) {
  auto f = tape_fn([](Tape& t, const std::vector<Var>& p) { return sum(t, p[0]); });
  EXPECT_THROW(finite_difference_check(f, {Tensor({2})}, 0.0), DomainError);
  EXPECT_THROW(finite_difference_check(f, {Tensor({2})}, 0.1), DomainError);
}

TEST(GradCheck, DetectsNonDeterminism) {
  int calls = 0;
  ad::CheckedFn f = [&calls](const std::vector<Tensor>&, std::vector<Tensor>* grads) {
    if (grads) grads->assign(1, Tensor({2}));
    return static_cast<double>(calls++);
  };
  EXPECT_THROW(finite_difference_check(f, {Tensor({2})}, 1e-5), DomainError);
}
