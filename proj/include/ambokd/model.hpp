#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ambokd/amb.hpp"
#include "ambokd/errors.hpp"
#include "ambokd/ops.hpp"
#include "ambokd/tape.hpp"

// The three branches: an image-like conv encoder, a matrix-like temporal
// encoder, and a multi-head self-attention fusion branch over both features.
// Each branch ends in an affine classifier.
namespace ambokd {

enum class EncoderKind { toy_conv, toy_temporal };

/// toy_conv: input {C, H, W}, hidden {conv1 channels, conv2 channels}.
/// toy_temporal: input {channels, samples}, hidden {per-channel width}.
struct EncoderSpec {
  EncoderKind kind = EncoderKind::toy_conv;
  Shape input;
  std::vector<std::size_t> hidden;
  std::size_t feature_len = 64;
};

inline EncoderSpec default_visual_spec() {
  return {EncoderKind::toy_conv, {3, 16, 16}, {4, 8}, 64};
}

inline EncoderSpec default_eeg_spec() {
  return {EncoderKind::toy_temporal, {8, 64}, {16}, 64};
}

/// Each sample's concatenated feature (2·aligned_len values) is viewed as a
/// grid of `tokens` rows so attention mixes tokens within the sample.
struct FusionSpec {
  std::size_t heads = 2;
  std::size_t aligned_len = 64;
  std::size_t tokens = 8;
  std::size_t key_width = 16;
  std::size_t out_len = 128;
  bool feature_softmax = true;

  std::size_t concat_len() const { return 2 * aligned_len; }
  std::size_t token_dim() const { return concat_len() / tokens; }
};

struct ModelSpec {
  EncoderSpec visual = default_visual_spec();
  EncoderSpec eeg = default_eeg_spec();
  FusionSpec fusion;
  std::size_t num_classes = 2;

  void validate() const {
    auto check_encoder = [](const EncoderSpec& e, const char* key) {
      const std::string k(key);
      if (e.feature_len == 0) throw config_error(k + ".feature_len must be positive");
      if (e.kind == EncoderKind::toy_conv) {
        if (e.input.size() != 3) throw config_error(k + ".input must be C,H,W");
        if (e.hidden.size() != 2) throw config_error(k + ".hidden must list 2 conv widths");
      } else {
        if (e.input.size() != 2) throw config_error(k + ".input must be channels,samples");
        if (e.hidden.size() != 1) throw config_error(k + ".hidden must list 1 width");
      }
      for (std::size_t d : e.input)
        if (d == 0) throw config_error(k + ".input dimensions must be positive");
      for (std::size_t d : e.hidden)
        if (d == 0) throw config_error(k + ".hidden widths must be positive");
    };
    check_encoder(visual, "model.visual");
    check_encoder(eeg, "model.eeg");
    if (visual.feature_len != eeg.feature_len)
      throw config_error("model.visual.feature_len and model.eeg.feature_len must match");
    if (fusion.heads == 0) throw config_error("model.fusion.heads must be >= 1");
    if (fusion.key_width == 0) throw config_error("model.fusion.key_width must be >= 1");
    if (fusion.aligned_len == 0 || fusion.out_len == 0)
      throw config_error("model.fusion lengths must be positive");
    if (fusion.tokens == 0 || fusion.concat_len() % fusion.tokens != 0)
      throw config_error("model.fusion.tokens must divide 2*aligned_len");
    if (num_classes < 2) throw config_error("model.num_classes must be >= 2");
  }
};

/// Parameter names are prefixed by the owning branch ("eeg.", "visual.",
/// "fusion.").
inline std::string_view owner_prefix(Branch b) {
  switch (b) {
    case Branch::eeg: return "eeg.";
    case Branch::visual: return "visual.";
    case Branch::fusion: return "fusion.";
  }
  return "";
}

inline bool owned_by(std::string_view name, Branch b) {
  return name.starts_with(owner_prefix(b));
}

inline std::vector<std::string> owned_names(const ParamSet& params, Branch b) {
  std::vector<std::string> out;
  for (const std::string& n : params.names())
    if (owned_by(n, b)) out.push_back(n);
  return out;
}

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct ParamInit {
  std::string name;
  Shape shape;
  std::size_t fan_in;
};

inline std::vector<ParamInit> param_layout(const ModelSpec& spec) {
  std::vector<ParamInit> out;
  const std::size_t m = spec.num_classes;
  {
    const EncoderSpec& v = spec.visual;
    const std::size_t c = v.input[0], c1 = v.hidden[0], c2 = v.hidden[1];
    const std::size_t h2 = ((v.input[1] + 1) / 2 + 1) / 2;
    const std::size_t w2 = ((v.input[2] + 1) / 2 + 1) / 2;
    out.push_back({"visual.enc.conv1.w", {c1, c, 3, 3}, c * 9});
    out.push_back({"visual.enc.conv1.b", {c1}, c * 9});
    out.push_back({"visual.enc.conv2.w", {c2, c1, 3, 3}, c1 * 9});
    out.push_back({"visual.enc.conv2.b", {c2}, c1 * 9});
    out.push_back({"visual.enc.fc.w", {c2 * h2 * w2, v.feature_len}, c2 * h2 * w2});
    out.push_back({"visual.enc.fc.b", {v.feature_len}, c2 * h2 * w2});
    out.push_back({"visual.cls.w", {v.feature_len, m}, v.feature_len});
    out.push_back({"visual.cls.b", {m}, v.feature_len});
  }
  {
    const EncoderSpec& e = spec.eeg;
    const std::size_t ch = e.input[0], t = e.input[1], h = e.hidden[0];
    out.push_back({"eeg.enc.temporal.w", {t, h}, t});
    out.push_back({"eeg.enc.temporal.b", {h}, t});
    out.push_back({"eeg.enc.fc.w", {ch * h, e.feature_len}, ch * h});
    out.push_back({"eeg.enc.fc.b", {e.feature_len}, ch * h});
    out.push_back({"eeg.cls.w", {e.feature_len, m}, e.feature_len});
    out.push_back({"eeg.cls.b", {m}, e.feature_len});
  }
  {
    const FusionSpec& f = spec.fusion;
    const std::size_t fl = spec.eeg.feature_len;
    const std::size_t td = f.token_dim(), dl = f.key_width;
    out.push_back({"fusion.align_e.w", {fl, f.aligned_len}, fl});
    out.push_back({"fusion.align_e.b", {f.aligned_len}, fl});
    out.push_back({"fusion.align_v.w", {fl, f.aligned_len}, fl});
    out.push_back({"fusion.align_v.b", {f.aligned_len}, fl});
    for (std::size_t j = 0; j < f.heads; ++j) {
      const std::string p = "fusion.head" + std::to_string(j) + ".";
      // Keys carry no bias: a key bias shifts every score of a query
      // equally and cancels in the softmax.
      out.push_back({p + "wq", {td, dl}, td});
      out.push_back({p + "bq", {dl}, td});
      out.push_back({p + "wk", {td, dl}, td});
      out.push_back({p + "wv", {td, dl}, td});
      out.push_back({p + "bv", {dl}, td});
    }
    const std::size_t cat = f.tokens * f.heads * dl;
    out.push_back({"fusion.out.w", {cat, f.out_len}, cat});
    out.push_back({"fusion.out.b", {f.out_len}, cat});
    out.push_back({"fusion.cls.w", {f.out_len, m}, f.out_len});
    out.push_back({"fusion.cls.b", {m}, f.out_len});
  }
  return out;
}

}  // namespace detail

/// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) per element. Each parameter
/// draws from its own stream keyed by (seed, name).
inline ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamSet params;
  for (const auto& p : detail::param_layout(spec)) {
    const std::uint64_t key = detail::fnv1a(p.name);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
    std::mt19937_64 rng(seq);
    const double bound = std::sqrt(1.0 / static_cast<double>(p.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(p.shape);
    for (double& v : t.data()) v = dist(rng);
    params.add(p.name, std::move(t));
  }
  return params;
}

/// Resolves parameter names to tape leaves: trainable names become bound
/// variables, the rest constants. Each name is materialized once per tape.
class Bindings {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  Bindings(Tape& tape, const ParamSet& params, Predicate trainable = {})
      : tape_(tape), params_(params), trainable_(std::move(trainable)) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const bool train = !trainable_ || trainable_(name);
    Var v = train ? tape_.param(params_, name) : tape_.frozen_param(params_, name);
    cache_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParamSet& params_;
  Predicate trainable_;
  std::map<std::string, Var> cache_;
};

/// Two stride-2 conv+tanh stages, flatten, affine to the feature length.
inline Var encode_visual(Var input, const EncoderSpec& spec, Bindings& p) {
  const Tensor& x = input.value();
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec.input)
    throw dimension_error("encode_visual: expected [batch x " + shape_str(spec.input) +
                          "], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  Var h = tanh(conv2d(input, p("visual.enc.conv1.w"), p("visual.enc.conv1.b"), 2, 1));
  h = tanh(conv2d(h, p("visual.enc.conv2.w"), p("visual.enc.conv2.b"), 2, 1));
  h = reshape(h, {n, h.value().size() / n});
  return linear(h, p("visual.enc.fc.w"), p("visual.enc.fc.b"));
}

/// Shared per-channel temporal affine + tanh, then affine to the feature
/// length.
inline Var encode_eeg(Var input, const EncoderSpec& spec, Bindings& p) {
  const Tensor& x = input.value();
  if (x.rank() != 3 || Shape(x.shape().begin() + 1, x.shape().end()) != spec.input)
    throw dimension_error("encode_eeg: expected [batch x " + shape_str(spec.input) +
                          "], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), ch = x.dim(1), t = x.dim(2);
  Var h = reshape(input, {n * ch, t});
  h = tanh(linear(h, p("eeg.enc.temporal.w"), p("eeg.enc.temporal.b")));
  h = reshape(h, {n, ch * spec.hidden[0]});
  return linear(h, p("eeg.enc.fc.w"), p("eeg.enc.fc.b"));
}

/// concat(FC_e(F_e), FC_v(F_v)) along the feature axis.
inline Var align_concat(Var fe, Var fv, const FusionSpec& spec, Bindings& p) {
  const Tensor& e = fe.value();
  const Tensor& v = fv.value();
  if (e.rank() != 2 || v.rank() != 2 || e.dim(0) != v.dim(0) || e.dim(1) != v.dim(1))
    throw dimension_error("align_concat: feature shapes " + shape_str(e.shape()) +
                          " and " + shape_str(v.shape()) + " differ");
  if (p("fusion.align_e.w").value().dim(0) != e.dim(1))
    throw dimension_error("align_concat: feature length " + std::to_string(e.dim(1)) +
                          " does not match alignment input " +
                          std::to_string(p("fusion.align_e.w").value().dim(0)));
  (void)spec;
  return concat_last({linear(fe, p("fusion.align_e.w"), p("fusion.align_e.b")),
                      linear(fv, p("fusion.align_v.w"), p("fusion.align_v.b"))});
}

struct AttentionOutput {
  Var q, k, v;
  Var scores;  ///< A, [batch × tokens × tokens]
  Var heads;   ///< H, [batch × tokens × key_width]
};

/// A = softmax(Q Kᵀ / sqrt(d)), H = A V over the token rows of each sample.
inline AttentionOutput attend(Var q, Var k, Var v) {
  const std::size_t d = q.value().dim(2);
  Var scores = softmax(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(double(d))));
  return {q, k, v, scores, bmm(scores, v)};
}

/// One self-attention head over the token grid of F_c.
inline AttentionOutput attention_head(Var fc, std::size_t head, const FusionSpec& spec,
                                      Bindings& p) {
  if (spec.key_width == 0) throw parameter_error("attention_head: key width must be >= 1");
  const Tensor& x = fc.value();
  if (x.rank() != 2 || x.dim(1) != spec.concat_len())
    throw dimension_error("attention_head: expected [batch x " +
                          std::to_string(spec.concat_len()) + "], got " +
                          shape_str(x.shape()));
  const std::size_t n = x.dim(0), tk = spec.tokens, td = spec.token_dim(),
                    dl = spec.key_width;
  const std::string pre = "fusion.head" + std::to_string(head) + ".";
  Var rows = reshape(fc, {n * tk, td});
  Var q = reshape(linear(rows, p(pre + "wq"), p(pre + "bq")), {n, tk, dl});
  Var k = reshape(matmul(rows, p(pre + "wk")), {n, tk, dl});
  Var v = reshape(linear(rows, p(pre + "wv"), p(pre + "bv")), {n, tk, dl});
  return attend(q, k, v);
}

/// F_f = [softmax](FC(H_1 ‖ … ‖ H_J)), heads concatenated per token.
inline Var fuse(Var fe, Var fv, const FusionSpec& spec, Bindings& p) {
  Var fc = align_concat(fe, fv, spec, p);
  const std::size_t n = fc.value().dim(0);
  std::vector<Var> hs;
  for (std::size_t j = 0; j < spec.heads; ++j)
    hs.push_back(attention_head(fc, j, spec, p).heads);
  Var cat = spec.heads == 1 ? hs.front() : concat_last(hs);
  cat = reshape(cat, {n, spec.tokens * spec.heads * spec.key_width});
  Var out = linear(cat, p("fusion.out.w"), p("fusion.out.b"));
  return spec.feature_softmax ? softmax(out) : out;
}

/// G = F·W + b with W [f × M].
inline Var classify(Var features, Var weight, Var bias) {
  const Tensor& f = features.value();
  const Tensor& w = weight.value();
  if (f.rank() != 2 || w.rank() != 2 || f.dim(1) != w.dim(0) ||
      bias.value().size() != w.dim(1))
    throw dimension_error("classify: features " + shape_str(f.shape()) + ", weight " +
                          shape_str(w.shape()) + ", bias " +
                          shape_str(bias.value().shape()));
  return linear(features, weight, bias);
}

struct BranchVars {
  Var fe, fv, ff;
  Var ge, gv, gf;

  Var logits(Branch b) const {
    switch (b) {
      case Branch::eeg: return ge;
      case Branch::visual: return gv;
      case Branch::fusion: return gf;
    }
    return gf;
  }
};

/// Materialized per-batch features and logits of the three branches.
struct BranchOutputs {
  Tensor fe, fv, ff;
  Tensor ge, gv, gf;

  const Tensor& logits(Branch b) const {
    switch (b) {
      case Branch::eeg: return ge;
      case Branch::visual: return gv;
      case Branch::fusion: return gf;
    }
    return gf;
  }
};

struct ForwardOptions {
  /// When false the fusion branch sees encoder features as constants.
  bool fusion_backprop_encoders = false;
};

/// Full three-branch forward pass on one batch.
inline BranchVars forward(const ModelSpec& spec, Bindings& p, Var visual_in, Var eeg_in,
                          const ForwardOptions& opts = {}) {
  BranchVars out;
  out.fv = encode_visual(visual_in, spec.visual, p);
  out.fe = encode_eeg(eeg_in, spec.eeg, p);
  if (out.fe.value().dim(0) != out.fv.value().dim(0))
    throw dimension_error("forward: modality batch sizes differ");
  Var fe_in = opts.fusion_backprop_encoders ? out.fe : detach(out.fe);
  Var fv_in = opts.fusion_backprop_encoders ? out.fv : detach(out.fv);
  out.ff = fuse(fe_in, fv_in, spec.fusion, p);
  out.ge = classify(out.fe, p("eeg.cls.w"), p("eeg.cls.b"));
  out.gv = classify(out.fv, p("visual.cls.w"), p("visual.cls.b"));
  out.gf = classify(out.ff, p("fusion.cls.w"), p("fusion.cls.b"));
  return out;
}

/// Forward pass without gradient recording, returning plain tensors.
inline BranchOutputs infer(const ModelSpec& spec, const ParamSet& params,
                           const Tensor& visual_in, const Tensor& eeg_in) {
  Tape tape;
  Bindings p(tape, params, [](const std::string&) { return false; });
  BranchVars v = forward(spec, p, tape.constant(visual_in), tape.constant(eeg_in));
  return {v.fe.value(), v.fv.value(), v.ff.value(),
          v.ge.value(), v.gv.value(), v.gf.value()};
}

}  // namespace ambokd
