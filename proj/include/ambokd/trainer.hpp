#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ambokd/amb.hpp"
#include "ambokd/checkpoint.hpp"
#include "ambokd/config.hpp"
#include "ambokd/data.hpp"
#include "ambokd/distill.hpp"
#include "ambokd/metrics.hpp"
#include "ambokd/model.hpp"
#include "ambokd/optim.hpp"
#include "ambokd/variant.hpp"

// Tri-branch mutual distillation training: one shared forward pass per batch,
// every student's loss and gradient from those values, then all student
// optimizer steps.
namespace ambokd {

/// Model, parameters, one optimizer per branch, and the balancing state.
struct TrainingState {
  ModelSpec spec;
  ParamSet params;
  VariantPlan plan;
  AmbState amb;
  double tau = 4.0;
  bool fusion_backprop_encoders = false;
  std::array<std::optional<ModulatedAdam>, 3> optimizers;

  TrainingState(ModelSpec model, ParamSet initial, VariantPlan variant_plan, AmbConfig amb_cfg,
                AdamConfig adam, double temperature, bool backprop_encoders)
      : spec(std::move(model)),
        params(std::move(initial)),
        plan(variant_plan),
        amb(amb_cfg),
        tau(temperature),
        fusion_backprop_encoders(backprop_encoders || variant_plan.fusion_owns_encoders) {
    for (Branch b : kBranches) {
      if (!plan.role(b).updated) continue;
      optimizers[index(b)].emplace(adam, params, trainable_names(b));
    }
  }

  /// Parameters stepped by branch b's optimizer.
  std::vector<std::string> trainable_names(Branch b) const {
    std::vector<std::string> names;
    for (const std::string& n : params.names()) {
      if (owned_by(n, b)) names.push_back(n);
      else if (b == Branch::fusion && plan.fusion_owns_encoders &&
               (n.starts_with("eeg.enc.") || n.starts_with("visual.enc.")))
        names.push_back(n);
    }
    return names;
  }

  bool is_trainable(const std::string& name) const {
    for (Branch b : kBranches) {
      if (!plan.role(b).updated) continue;
      for (const std::string& n : optimizers[index(b)]->owned())
        if (n == name) return true;
    }
    return false;
  }
};

struct StepRecord {
  std::array<LossBundle, 3> losses{};
  std::array<double, 3> rdg{1.0, 1.0, 1.0};
  std::array<bool, 3> updated{};
};

namespace detail {

inline std::string describe(const StepRecord& r) {
  std::ostringstream os;
  os.precision(9);
  for (Branch b : kBranches) {
    const LossBundle& l = r.losses[index(b)];
    os << branch_name(b) << ": ce=" << l.ce << " kd_a=" << l.kd_a << " kd_b=" << l.kd_b
       << " alpha=" << l.alpha << " beta=" << l.beta << " tau=" << l.tau
       << " total=" << l.total << " rdg=" << r.rdg[index(b)] << "; ";
  }
  return os.str();
}

}  // namespace detail

/// One optimization step on a batch.
inline StepRecord train_step(TrainingState& st, const Batch& batch) {
  if (batch.labels.empty()) throw data_error("train_step: empty batch");
  Tape tape;
  Bindings p(tape, st.params, [&](const std::string& n) { return st.is_trainable(n); });
  ForwardOptions opts{st.fusion_backprop_encoders};
  BranchVars out = forward(st.spec, p, tape.constant(batch.modality_a),
                           tape.constant(batch.modality_b), opts);

  StepRecord rec;
  std::array<Var, 3> ce_vars;
  std::array<double, 3> ce{};
  for (Branch b : kBranches) {
    ce_vars[index(b)] = cross_entropy(out.logits(b), batch.labels);
    ce[index(b)] = ce_vars[index(b)].value()[0];
  }

  std::optional<Var> objective;
  for (Branch s : kBranches) {
    const StudentRole& role = st.plan.role(s);
    const auto [ta, tb] = teachers_of(s);
    Var kd_a = kd_loss(out.logits(s), out.logits(ta).value(), st.tau);
    Var kd_b = kd_loss(out.logits(s), out.logits(tb).value(), st.tau);

    KdWeights w{1.0, 1.0};
    if (st.plan.dynamic_weights && role.use_teacher_a && role.use_teacher_b)
      w = dynamic_weights(ce[index(s)], ce[index(ta)], ce[index(tb)], st.amb.config());
    if (!role.use_teacher_a) w.alpha = 0.0;
    if (!role.use_teacher_b) w.beta = 0.0;

    LossBundle& l = rec.losses[index(s)];
    l.ce = ce[index(s)];
    l.kd_a = kd_a.value()[0];
    l.kd_b = kd_b.value()[0];
    l.alpha = w.alpha;
    l.beta = w.beta;
    l.tau = st.tau;
    l.total = total_loss(l.ce, l.kd_a, l.kd_b, l.alpha, l.beta, l.tau);
    if (!role.updated) continue;

    Var total = ce_vars[index(s)];
    if (role.use_teacher_a) total = add(total, scale(kd_a, w.alpha * st.tau * st.tau));
    if (role.use_teacher_b) total = add(total, scale(kd_b, w.beta * st.tau * st.tau));
    objective = objective ? add(*objective, total) : total;

    rec.updated[index(s)] = true;
    if (st.plan.dynamic_gradients) rec.rdg[index(s)] = st.amb.gradient_ratio(s, ce);
  }

  for (const LossBundle& l : rec.losses)
    if (!std::isfinite(l.total) || !std::isfinite(l.ce))
      throw numerical_error("non-finite loss: " + detail::describe(rec));

  st.amb.observe(ce);
  if (!objective) return rec;

  // Student parameter sets are disjoint unless fusion flows into the
  // encoders; then the encoders accumulate their own and the fusion loss.
  // Teachers enter every KD term as constants.
  tape.backward(*objective);
  st.params.zero_grads();
  tape.accumulate_grads(st.params);
  for (Branch s : kBranches)
    if (rec.updated[index(s)]) st.optimizers[index(s)]->step(st.params, rec.rdg[index(s)]);
  return rec;
}

/// Per-branch metrics on a dataset, inferred in chunks.
inline std::array<Metrics, 3> evaluate(const ModelSpec& spec, const ParamSet& params,
                                       const Dataset& data, std::size_t chunk = 256) {
  if (data.size() == 0) throw data_error("evaluate: empty dataset");
  std::array<Tensor, 3> probs;
  for (auto& t : probs) t = Tensor({data.size(), spec.num_classes});
  std::vector<std::uint32_t> labels;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Batch b = gather(data, idx);
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    const BranchOutputs o = infer(spec, params, b.modality_a, b.modality_b);
    for (Branch br : kBranches) {
      const Tensor sm = softmax_values(o.logits(br));
      std::copy(sm.data().begin(), sm.data().end(),
                probs[index(br)].data().begin() +
                    static_cast<std::ptrdiff_t>(start * spec.num_classes));
    }
  }
  return {classification_metrics(probs[0], labels), classification_metrics(probs[1], labels),
          classification_metrics(probs[2], labels)};
}

struct BranchEpochStats {
  double ce = 0.0;
  double kd_a = 0.0;
  double kd_b = 0.0;
  double alpha_mean = 0.0;
  double beta_mean = 0.0;
  double rdg_mean = 0.0;
  double rdg_min = 0.0;
  double rdg_max = 0.0;
  Metrics val;
};

struct EpochReport {
  int epoch = 0;
  std::array<BranchEpochStats, 3> branches{};
};

struct RunResult {
  std::vector<EpochReport> reports;
  ModelSpec spec;
  ParamSet params;
};

/// Train/validation data for a config: loaded or generated, split, and with
/// validation noise applied.
struct PreparedData {
  Dataset train;
  Dataset validation;
};

inline Dataset load_or_generate(const RunConfig& cfg) {
  return cfg.data_path.empty() ? generate(cfg.synth) : load(cfg.data_path);
}

inline PreparedData prepare_data(const RunConfig& cfg, const Dataset& full) {
  auto [train, val] = split(full, cfg.train_fraction, cfg.seed);
  if (cfg.val_noise) apply_validation_noise(val, cfg.val_noise_level, cfg.seed + 0x9e3779b9ull);
  return {std::move(train), std::move(val)};
}

/// Fills the model's input shapes and class count from the data.
inline ModelSpec resolve_model(const RunConfig& cfg, const Dataset& data) {
  ModelSpec m = cfg.model;
  m.visual.input = data.shape_a;
  m.eeg.input = data.shape_b;
  m.num_classes = data.num_classes;
  m.validate();
  return m;
}

inline VariantPlan resolve_plan(const RunConfig& cfg) {
  VariantPlan plan = plan_for(cfg.variant);
  plan.dynamic_weights = plan.dynamic_weights && cfg.amb_dynamic_weights;
  plan.dynamic_gradients = plan.dynamic_gradients && cfg.amb_dynamic_gradients;
  return plan;
}

/// Invoked after each epoch's validation pass.
using EpochCallback = std::function<void(const EpochReport&)>;
/// Invoked after every optimization step with the 1-based epoch.
using StepCallback = std::function<void(int, const StepRecord&)>;

inline RunResult run_experiment(const RunConfig& cfg, const PreparedData& data,
                                const EpochCallback& on_epoch = {},
                                const StepCallback& on_step = {}) {
  cfg.validate();
  if (data.train.size() == 0) throw data_error("run_experiment: empty training set");
  if (data.validation.size() == 0) throw data_error("run_experiment: empty validation set");
  const ModelSpec spec = resolve_model(cfg, data.train);
  TrainingState st(spec, init_params(spec, cfg.seed), resolve_plan(cfg), cfg.amb, cfg.optim,
                   cfg.tau, cfg.fusion_backprop_encoders);

  RunResult result;
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    st.amb.begin_epoch(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochReport rep;
    rep.epoch = epoch;
    for (auto& b : rep.branches) {
      b.rdg_min = std::numeric_limits<double>::infinity();
      b.rdg_max = -std::numeric_limits<double>::infinity();
    }
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch batch = gather(data.train, std::span(order).subspan(start, end - start));
      const StepRecord r = train_step(st, batch);
      if (on_step) on_step(epoch, r);
      ++batches;
      for (Branch b : kBranches) {
        BranchEpochStats& s = rep.branches[index(b)];
        const LossBundle& l = r.losses[index(b)];
        s.ce += l.ce;
        s.kd_a += l.kd_a;
        s.kd_b += l.kd_b;
        s.alpha_mean += l.alpha;
        s.beta_mean += l.beta;
        s.rdg_mean += r.rdg[index(b)];
        s.rdg_min = std::min(s.rdg_min, r.rdg[index(b)]);
        s.rdg_max = std::max(s.rdg_max, r.rdg[index(b)]);
      }
    }
    const auto val = evaluate(spec, st.params, data.validation);
    for (Branch b : kBranches) {
      BranchEpochStats& s = rep.branches[index(b)];
      const double n = static_cast<double>(batches);
      s.ce /= n;
      s.kd_a /= n;
      s.kd_b /= n;
      s.alpha_mean /= n;
      s.beta_mean /= n;
      s.rdg_mean /= n;
      s.val = val[index(b)];
    }
    if (on_epoch) on_epoch(rep);
    result.reports.push_back(rep);
  }
  result.spec = spec;
  result.params = std::move(st.params);
  return result;
}

inline RunResult run_experiment(const RunConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  return run_experiment(cfg, prepare_data(cfg, load_or_generate(cfg)), on_epoch);
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt9(const std::optional<double>& v) { return v ? fmt9(*v) : "NA"; }

}  // namespace detail

inline constexpr const char* kMetricsHeader =
    "epoch,branch,ce,kd_a,kd_b,alpha_mean,beta_mean,rdg_mean,rdg_min,rdg_max,auc,acc,f1,"
    "precision";

/// One row per epoch per branch, 9 significant digits.
inline std::string format_metrics_csv(const std::vector<EpochReport>& reports) {
  using detail::fmt9;
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const EpochReport& r : reports)
    for (Branch b : kBranches) {
      const BranchEpochStats& s = r.branches[index(b)];
      out += std::to_string(r.epoch) + "," + branch_name(b) + "," + fmt9(s.ce) + "," +
             fmt9(s.kd_a) + "," + fmt9(s.kd_b) + "," + fmt9(s.alpha_mean) + "," +
             fmt9(s.beta_mean) + "," + fmt9(s.rdg_mean) + "," + fmt9(s.rdg_min) + "," +
             fmt9(s.rdg_max) + "," + fmt9(s.val.auc) + "," + fmt9(s.val.acc) + "," +
             fmt9(s.val.f1) + "," + fmt9(s.val.precision) + "\n";
    }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw io_error("write to '" + path + "' failed");
}

/// CSV of per-sample features: label, F_e, F_v, F_f.
inline std::string format_embeddings_csv(const ModelSpec& spec, const ParamSet& params,
                                         const Dataset& data, std::size_t chunk = 256) {
  using detail::fmt9;
  const std::size_t le = spec.eeg.feature_len, lv = spec.visual.feature_len,
                    lf = spec.fusion.out_len;
  std::string out = "label";
  for (std::size_t i = 0; i < le; ++i) out += ",fe_" + std::to_string(i);
  for (std::size_t i = 0; i < lv; ++i) out += ",fv_" + std::to_string(i);
  for (std::size_t i = 0; i < lf; ++i) out += ",ff_" + std::to_string(i);
  out += "\n";
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Batch b = gather(data, idx);
    const BranchOutputs o = infer(spec, params, b.modality_a, b.modality_b);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out += std::to_string(b.labels[r]);
      for (std::size_t i = 0; i < le; ++i) out += "," + fmt9(o.fe[r * le + i]);
      for (std::size_t i = 0; i < lv; ++i) out += "," + fmt9(o.fv[r * lv + i]);
      for (std::size_t i = 0; i < lf; ++i) out += "," + fmt9(o.ff[r * lf + i]);
      out += "\n";
    }
  }
  return out;
}

inline void dump_embeddings(const ModelSpec& spec, const ParamSet& params, const Dataset& data,
                            const std::string& path) {
  write_text(path, format_embeddings_csv(spec, params, data));
}

}  // namespace ambokd
