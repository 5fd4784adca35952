#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ambokd/distill.hpp"
#include "ambokd/gradcheck.hpp"
#include "ambokd/model.hpp"

// Finite-difference checks of every differentiable block on a small model.
// Each block is reduced to a scalar by a random projection so that no
// gradient entry vanishes by symmetry.
namespace ambokd {

/// Small enough for exhaustive central differences, with every code path of
/// the full model (two conv stages, two heads, 3 classes).
inline ModelSpec gradcheck_model_spec() {
  ModelSpec m;
  m.visual.input = {2, 6, 6};
  m.visual.hidden = {2, 3};
  m.visual.feature_len = 6;
  m.eeg.input = {3, 8};
  m.eeg.hidden = {4};
  m.eeg.feature_len = 6;
  m.fusion.heads = 2;
  m.fusion.aligned_len = 6;
  m.fusion.tokens = 3;
  m.fusion.key_width = 3;
  m.fusion.out_len = 5;
  m.num_classes = 3;
  return m;
}

inline const std::vector<std::string>& gradcheck_blocks() {
  static const std::vector<std::string> blocks = {
      "visual_encoder", "eeg_encoder", "alignment", "attention_head", "fusion",
      "classifier",     "cross_entropy", "kd_loss", "composite"};
  return blocks;
}

struct GradCheckCase {
  std::string block;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

namespace detail {

inline constexpr std::size_t kGradCheckBatch = 3;
inline constexpr double kGradCheckParamStd = 0.5;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = normal(rng);
  return t;
}

inline Shape batched(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

/// Parameters of the block plus its inputs ("x.*") as differentiable leaves,
/// and the scalar objective over them.
struct BlockProblem {
  ParamSet params;
  ScalarFn fn;
};

inline ParamSet select(const ParamSet& all, const std::vector<std::string>& prefixes) {
  ParamSet out;
  for (const auto& [name, value] : all.values())
    for (const std::string& pre : prefixes)
      if (name.starts_with(pre)) {
        out.add(name, value);
        break;
      }
  return out;
}

inline BlockProblem make_block_problem(const std::string& block, std::uint64_t seed,
                                       const ModelSpec& spec) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + 17);
  const std::size_t n = kGradCheckBatch;
  const std::size_t m = spec.num_classes;
  ParamSet all = init_params(spec, seed);
  // Blocks containing attention are evaluated at a generic point rather than
  // a fresh init: with fan-in scaled weights the attention is nearly uniform
  // and query/key gradients sink below what central differences resolve.
  if (block == "attention_head" || block == "fusion" || block == "composite")
    for (const std::string& name : all.names())
      all.set(name, random_tensor(rng, all.get(name).shape(), kGradCheckParamStd));
  std::uniform_int_distribution<std::uint32_t> pick_label(0, static_cast<std::uint32_t>(m - 1));
  std::vector<std::uint32_t> labels(n);
  for (auto& l : labels) l = pick_label(rng);

  BlockProblem bp;
  auto projection = [&](Shape s) { return random_tensor(rng, std::move(s)); };

  if (block == "visual_encoder") {
    bp.params = select(all, {"visual.enc."});
    bp.params.add("x.visual", random_tensor(rng, batched(n, spec.visual.input)));
    Tensor r = projection({n, spec.visual.feature_len});
    bp.fn = [spec, r](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return dot_const(encode_visual(p("x.visual"), spec.visual, p), r);
    };
  } else if (block == "eeg_encoder") {
    bp.params = select(all, {"eeg.enc."});
    bp.params.add("x.eeg", random_tensor(rng, batched(n, spec.eeg.input)));
    Tensor r = projection({n, spec.eeg.feature_len});
    bp.fn = [spec, r](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return dot_const(encode_eeg(p("x.eeg"), spec.eeg, p), r);
    };
  } else if (block == "alignment") {
    bp.params = select(all, {"fusion.align_"});
    bp.params.add("x.fe", random_tensor(rng, {n, spec.eeg.feature_len}));
    bp.params.add("x.fv", random_tensor(rng, {n, spec.visual.feature_len}));
    Tensor r = projection({n, spec.fusion.concat_len()});
    bp.fn = [spec, r](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return dot_const(align_concat(p("x.fe"), p("x.fv"), spec.fusion, p), r);
    };
  } else if (block == "attention_head") {
    bp.params = select(all, {"fusion.head0."});
    bp.params.add("x.fc", random_tensor(rng, {n, spec.fusion.concat_len()}));
    Tensor r = projection({n, spec.fusion.tokens, spec.fusion.key_width});
    bp.fn = [spec, r](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return dot_const(attention_head(p("x.fc"), 0, spec.fusion, p).heads, r);
    };
  } else if (block == "fusion") {
    bp.params = select(all, {"fusion.align_", "fusion.head", "fusion.out."});
    bp.params.add("x.fe", random_tensor(rng, {n, spec.eeg.feature_len}));
    bp.params.add("x.fv", random_tensor(rng, {n, spec.visual.feature_len}));
    Tensor r = projection({n, spec.fusion.out_len});
    bp.fn = [spec, r](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return dot_const(fuse(p("x.fe"), p("x.fv"), spec.fusion, p), r);
    };
  } else if (block == "classifier") {
    bp.params = select(all, {"fusion.cls."});
    bp.params.add("x.ff", random_tensor(rng, {n, spec.fusion.out_len}));
    Tensor r = projection({n, m});
    bp.fn = [r](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return dot_const(classify(p("x.ff"), p("fusion.cls.w"), p("fusion.cls.b")), r);
    };
  } else if (block == "cross_entropy") {
    bp.params.add("x.logits", random_tensor(rng, {n, m}, 2.0));
    bp.fn = [labels](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return cross_entropy(p("x.logits"), labels);
    };
  } else if (block == "kd_loss") {
    bp.params.add("x.student", random_tensor(rng, {n, m}, 2.0));
    Tensor teacher = random_tensor(rng, {n, m}, 2.0);
    bp.fn = [teacher](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      return kd_loss(p("x.student"), teacher, 4.0);
    };
  } else if (block == "composite") {
    // Sum of the three student objectives with gradients flowing through
    // the fusion branch into both encoders. Teacher targets are taken at the
    // unperturbed parameters, matching their detached role in training.
    bp.params = all;
    Tensor xa = random_tensor(rng, batched(n, spec.visual.input));
    Tensor xb = random_tensor(rng, batched(n, spec.eeg.input));
    std::uniform_real_distribution<double> weight(0.1, 0.3);
    std::array<double, 6> w{};
    for (double& v : w) v = weight(rng);
    const BranchOutputs teachers = infer(spec, all, xa, xb);
    bp.fn = [spec, xa, xb, labels, w, teachers](Tape& t, const ParamSet& ps) {
      Bindings p(t, ps);
      BranchVars out = forward(spec, p, t.constant(xa), t.constant(xb), ForwardOptions{true});
      std::optional<Var> total;
      for (Branch s : kBranches) {
        const auto [ta, tb] = teachers_of(s);
        Var l = total_loss(cross_entropy(out.logits(s), labels),
                           kd_loss(out.logits(s), teachers.logits(ta), 4.0),
                           kd_loss(out.logits(s), teachers.logits(tb), 4.0),
                           w[2 * index(s)], w[2 * index(s) + 1], 4.0);
        total = total ? add(*total, l) : l;
      }
      return *total;
    };
  } else {
    throw parameter_error("unknown gradcheck block '" + block + "'");
  }
  return bp;
}

}  // namespace detail

/// Checks one block at one seed. With `corrupt`, a value-neutral term whose
/// tape gradient is wrong is added to the objective, which the check must
/// flag.
inline GradCheckCase run_gradcheck_case(const std::string& block, std::uint64_t seed,
                                        double eps = 1e-5, bool corrupt = false) {
  detail::BlockProblem bp = detail::make_block_problem(block, seed, gradcheck_model_spec());
  ScalarFn fn = bp.fn;
  if (corrupt) {
    const std::string target = bp.params.names().front();
    Tensor delta(bp.params.get(target).shape(), 1e-2);
    fn = [inner = bp.fn, target, delta](Tape& t, const ParamSet& ps) {
      Var base = inner(t, ps);
      Bindings p(t, ps);
      Var leaf = p(target);
      return add(base, add(dot_const(leaf, delta), scale(dot_const(detach(leaf), delta), -1.0)));
    };
  }
  return {block, seed, grad_check_report(fn, bp.params, eps)};
}

/// Largest absolute gap between the tape gradient of mean cross-entropy and
/// the closed form (softmax - onehot) / N over random instances.
inline double ce_oracle_max_error(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> rows(1, 6), cols(2, 6);
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = rows(rng), m = cols(rng);
    Tensor logits = detail::random_tensor(rng, {n, m}, 3.0);
    std::uniform_int_distribution<std::uint32_t> label(0, static_cast<std::uint32_t>(m - 1));
    std::vector<std::uint32_t> labels(n);
    for (auto& l : labels) l = label(rng);
    Tape tape;
    Var x = tape.variable(logits);
    tape.backward(cross_entropy(x, labels));
    const Tensor g = tape.grad(x);
    const Tensor oracle = ce_logit_gradient_oracle(logits, labels);
    for (std::size_t i = 0; i < g.size(); ++i)
      worst = std::max(worst, std::abs(g[i] - oracle[i]));
  }
  return worst;
}

}  // namespace ambokd
