#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "ambokd/distill.hpp"
#include "ambokd/model.hpp"

using namespace ambokd;

namespace {

Tensor random_input(std::mt19937_64& rng, Shape shape) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = d(rng);
  return t;
}

Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

// Repeats sample 0 of a batch into every row.
Tensor repeat_first(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t per = x.size() / x.dim(0);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i % per];
  return out;
}

Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

}  // namespace

TEST(Model, DefaultShapes) {
  const ModelSpec spec;
  const ParamSet params = init_params(spec, 1);
  std::mt19937_64 rng(1);
  const BranchOutputs out = infer(spec, params, random_input(rng, batched(4, spec.visual.input)),
                                  random_input(rng, batched(4, spec.eeg.input)));
  EXPECT_EQ(out.fv.shape(), (Shape{4, 64}));
  EXPECT_EQ(out.fe.shape(), (Shape{4, 64}));
  EXPECT_EQ(out.ff.shape(), (Shape{4, 128}));
  for (Branch b : kBranches) EXPECT_EQ(out.logits(b).shape(), (Shape{4, 2}));
  EXPECT_TRUE(out.ff.all_finite());
}

TEST(Model, IdenticalInputsGiveIdenticalRows) {
  const ModelSpec spec;
  const ParamSet params = init_params(spec, 2);
  std::mt19937_64 rng(2);
  const BranchOutputs out =
      infer(spec, params, repeat_first(random_input(rng, batched(3, spec.visual.input))),
            repeat_first(random_input(rng, batched(3, spec.eeg.input))));
  for (const Tensor* t : {&out.fe, &out.fv, &out.ff, &out.gf}) {
    const std::size_t w = t->dim(1);
    for (std::size_t r = 1; r < 3; ++r)
      for (std::size_t c = 0; c < w; ++c) EXPECT_EQ((*t)[r * w + c], (*t)[c]);
  }
}

TEST(Model, ZeroInputIsFinite) {
  const ModelSpec spec;
  ParamSet params = init_params(spec, 3);
  params.set("visual.enc.fc.b", Tensor({64}));
  const BranchOutputs out =
      infer(spec, params, Tensor(batched(2, spec.visual.input)), Tensor(batched(2, spec.eeg.input)));
  EXPECT_TRUE(out.fv.all_finite());
  EXPECT_TRUE(out.gf.all_finite());
}

TEST(Model, WrongInputShapeIsDimensionError) {
  const ModelSpec spec;
  const ParamSet params = init_params(spec, 3);
  EXPECT_THROW(infer(spec, params, Tensor({2, 3, 8, 8}), Tensor(batched(2, spec.eeg.input))),
               dimension_error);
  EXPECT_THROW(infer(spec, params, Tensor(batched(2, spec.visual.input)),
                     Tensor(batched(3, spec.eeg.input))),
               dimension_error);
}

TEST(Model, InitIsSeededPerNameAndBounded) {
  const ModelSpec spec;
  const ParamSet a = init_params(spec, 7), b = init_params(spec, 7), c = init_params(spec, 8);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  const double bound = std::sqrt(1.0 / 64.0);
  for (double v : a.get("visual.cls.w").data()) EXPECT_LE(std::abs(v), bound);
  // Changing the fusion layout leaves encoder weights untouched.
  ModelSpec other = spec;
  other.fusion.heads = 3;
  EXPECT_EQ(init_params(other, 7).get("eeg.enc.fc.w"), a.get("eeg.enc.fc.w"));
}

TEST(Model, OwnershipPartitionsParameters) {
  const ParamSet params = init_params(ModelSpec{}, 1);
  std::set<std::string> seen;
  for (Branch b : kBranches)
    for (const std::string& n : owned_names(params, b)) EXPECT_TRUE(seen.insert(n).second) << n;
  EXPECT_EQ(seen.size(), params.size());
}

TEST(Alignment, IdentityMapsConcatenate) {
  const ModelSpec spec;
  ParamSet params = init_params(spec, 1);
  params.set("fusion.align_e.w", identity(64));
  params.set("fusion.align_v.w", identity(64));
  params.set("fusion.align_e.b", Tensor({64}));
  params.set("fusion.align_v.b", Tensor({64}));
  std::mt19937_64 rng(4);
  const Tensor a = random_input(rng, {4, 64}), b = random_input(rng, {4, 64});
  Tape t;
  Bindings p(t, params);
  const Tensor fc = align_concat(t.constant(a), t.constant(b), spec.fusion, p).value();
  ASSERT_EQ(fc.shape(), (Shape{4, 128}));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      EXPECT_EQ(fc[r * 128 + c], a[r * 64 + c]);
      EXPECT_EQ(fc[r * 128 + 64 + c], b[r * 64 + c]);
    }
}

TEST(Alignment, ZeroWeightsGiveBiasRows) {
  const ModelSpec spec;
  ParamSet params = init_params(spec, 1);
  params.set("fusion.align_e.w", Tensor({64, 64}));
  params.set("fusion.align_v.w", Tensor({64, 64}));
  std::mt19937_64 rng(5);
  Tape t;
  Bindings p(t, params);
  const Tensor fc = align_concat(t.constant(random_input(rng, {3, 64})),
                                 t.constant(random_input(rng, {3, 64})), spec.fusion, p)
                        .value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      EXPECT_EQ(fc[r * 128 + c], params.get("fusion.align_e.b")[c]);
      EXPECT_EQ(fc[r * 128 + 64 + c], params.get("fusion.align_v.b")[c]);
    }
  EXPECT_THROW(align_concat(t.constant(Tensor({3, 64})), t.constant(Tensor({3, 32})), spec.fusion, p),
               dimension_error);
}

TEST(Attention, IdenticalKeysGiveUniformRows) {
  const ModelSpec spec;
  ParamSet params = init_params(spec, 1);
  params.set("fusion.head0.wk", Tensor(params.get("fusion.head0.wk").shape()));
  std::mt19937_64 rng(6);
  Tape t;
  Bindings p(t, params);
  const AttentionOutput a = attention_head(t.constant(random_input(rng, {2, 128})), 0, spec.fusion, p);
  for (double v : a.scores.value().data()) EXPECT_NEAR(v, 1.0 / 8.0, 1e-15);
}

TEST(Attention, RowsSumToOne) {
  const ModelSpec spec;
  std::mt19937_64 rng(7);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ParamSet params = init_params(spec, seed);
    Tape t;
    Bindings p(t, params);
    const Tensor s =
        attention_head(t.constant(random_input(rng, {3, 128})), 1, spec.fusion, p).scores.value();
    ASSERT_EQ(s.shape(), (Shape{3, 8, 8}));
    for (std::size_t r = 0; r < 24; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 8; ++c) sum += s[r * 8 + c];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Attention, IdentityAttentionReturnsValues) {
  // Orthogonal, large queries equal to keys drive A to the identity.
  Tensor qk({1, 3, 3});
  for (std::size_t i = 0; i < 3; ++i) qk[i * 3 + i] = 100.0;
  std::mt19937_64 rng(8);
  const Tensor v = random_input(rng, {1, 3, 3});
  Tape t;
  const AttentionOutput a = attend(t.constant(qk), t.constant(qk), t.constant(v));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(a.heads.value()[i], v[i], 1e-12);
}

TEST(Attention, ZeroKeyWidthRejected) {
  FusionSpec f;
  f.key_width = 0;
  Tape t;
  ParamSet empty;
  Bindings p(t, empty);
  EXPECT_THROW(attention_head(t.constant(Tensor({1, 128})), 0, f, p), parameter_error);
}

TEST(Fusion, FeatureSoftmaxRowsSumToOne) {
  const ModelSpec spec;
  const ParamSet params = init_params(spec, 9);
  std::mt19937_64 rng(9);
  Tape t;
  Bindings p(t, params);
  const Tensor ff = fuse(t.constant(random_input(rng, {4, 64})), t.constant(random_input(rng, {4, 64})),
                         spec.fusion, p)
                        .value();
  ASSERT_EQ(ff.shape(), (Shape{4, 128}));
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 128; ++c) sum += ff[r * 128 + c];
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Fusion, SingleHeadIsOutputLayerOverThatHead) {
  ModelSpec spec;
  spec.fusion.heads = 1;
  const ParamSet params = init_params(spec, 10);
  std::mt19937_64 rng(10);
  const Tensor fe = random_input(rng, {2, 64}), fv = random_input(rng, {2, 64});
  Tape t;
  Bindings p(t, params);
  const Tensor ff = fuse(t.constant(fe), t.constant(fv), spec.fusion, p).value();
  Var fc = align_concat(t.constant(fe), t.constant(fv), spec.fusion, p);
  Var h = attention_head(fc, 0, spec.fusion, p).heads;
  Var manual = softmax(linear(reshape(h, {2, 128}), p("fusion.out.w"), p("fusion.out.b")));
  EXPECT_EQ(manual.value(), ff);
}

TEST(Fusion, BatchPermutationEquivariant) {
  const ModelSpec spec;
  const ParamSet params = init_params(spec, 11);
  std::mt19937_64 rng(11);
  const Tensor xa = random_input(rng, batched(3, spec.visual.input));
  const Tensor xb = random_input(rng, batched(3, spec.eeg.input));
  auto swap01 = [](const Tensor& x) {
    Tensor y = x;
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < per; ++i) std::swap(y[i], y[per + i]);
    return y;
  };
  const BranchOutputs a = infer(spec, params, xa, xb);
  const BranchOutputs b = infer(spec, params, swap01(xa), swap01(xb));
  for (Branch br : kBranches) EXPECT_EQ(swap01(a.logits(br)), b.logits(br));
}

TEST(Fusion, EveryFusionParameterReceivesGradient) {
  const ModelSpec spec;
  ParamSet params = init_params(spec, 12);
  std::mt19937_64 rng(12);
  Tape t;
  Bindings p(t, params);
  BranchVars out = forward(spec, p, t.constant(random_input(rng, batched(6, spec.visual.input))),
                           t.constant(random_input(rng, batched(6, spec.eeg.input))));
  const std::vector<std::uint32_t> labels{0, 1, 1, 0, 1, 0};
  t.backward(cross_entropy(out.gf, labels));
  params.zero_grads();
  t.accumulate_grads(params);
  for (const std::string& n : owned_names(params, Branch::fusion)) {
    double norm = 0.0;
    for (double g : params.grad(n).data()) norm += g * g;
    EXPECT_GT(norm, 0.0) << n;
  }
  // Encoders see constants from the fusion branch by default.
  for (const std::string& n : owned_names(params, Branch::eeg))
    for (double g : params.grad(n).data()) EXPECT_EQ(g, 0.0) << n;
}

TEST(Classify, ConstantAndBasisExamples) {
  Tape t;
  Tensor b = Tensor::vector({0.3, -0.3});
  std::mt19937_64 rng(13);
  const Tensor f = random_input(rng, {4, 64});
  const Tensor g = classify(t.constant(f), t.constant(Tensor({64, 2})), t.constant(b)).value();
  ASSERT_EQ(g.shape(), (Shape{4, 2}));
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(g[r * 2], 0.3);
    EXPECT_EQ(g[r * 2 + 1], -0.3);
  }
  const Tensor w = random_input(rng, {3, 2});
  const Tensor e1 = Tensor::matrix(1, 3, {0, 1, 0});
  const Tensor row = classify(t.constant(e1), t.constant(w), t.constant(Tensor({2}))).value();
  EXPECT_EQ(row[0], w[2]);
  EXPECT_EQ(row[1], w[3]);
  EXPECT_THROW(classify(t.constant(f), t.constant(Tensor({32, 2})), t.constant(b)), dimension_error);
}

TEST(ModelSpec, ValidationNamesKeys) {
  ModelSpec spec;
  spec.fusion.tokens = 7;
  try {
    spec.validate();
    FAIL();
  } catch (const config_error& e) {
    EXPECT_NE(std::string(e.what()).find("model.fusion.tokens"), std::string::npos);
  }
}
