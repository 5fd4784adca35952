#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ambokd/amb.hpp"
#include "ambokd/data.hpp"
#include "ambokd/errors.hpp"
#include "ambokd/model.hpp"
#include "ambokd/optim.hpp"
#include "ambokd/variant.hpp"

namespace ambokd {

/// Everything needed to reproduce one training run.
struct RunConfig {
  Variant variant = Variant::ambokd;
  std::uint64_t seed = 1;
  int epochs = 15;
  std::size_t batch_size = 64;
  std::string out_dir;

  std::string data_path;  ///< empty: generate from `synth`
  SynthSpec synth;
  double train_fraction = 0.8;
  bool val_noise = true;
  double val_noise_level = 0.2;

  ModelSpec model;
  double tau = 4.0;
  AmbConfig amb;
  /// Force-off switches layered on top of the variant's plan.
  bool amb_dynamic_weights = true;
  bool amb_dynamic_gradients = true;

  AdamConfig optim;
  bool fusion_backprop_encoders = false;

  void validate() const {
    if (epochs < 1) throw config_error("epochs must be >= 1");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw config_error("data.train_fraction must lie in (0, 1)");
    if (!(val_noise_level >= 0.0 && val_noise_level <= 1.0))
      throw config_error("data.val_noise_level must lie in [0, 1]");
    if (!(tau > 0.0)) throw config_error("distill.tau must be positive");
    if (data_path.empty()) {
      try {
        synth.validate();
      } catch (const parameter_error& e) {
        throw config_error(std::string("data: ") + e.what());
      }
    } else if (!std::ifstream(data_path)) {
      throw config_error("data.path '" + data_path + "' does not exist");
    }
    model.validate();
    amb.validate();
    optim.validate();
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw config_error(key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw config_error(key + ": expected a nonnegative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw config_error(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_dims(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto d = parse_uint(key, trim(part));
    if (d == 0) throw config_error(key + ": dimensions must be positive");
    out.push_back(static_cast<std::size_t>(d));
  }
  if (out.empty()) throw config_error(key + ": expected comma-separated dimensions");
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt_dims(const std::vector<std::size_t>& d) {
  std::string out;
  for (std::size_t i = 0; i < d.size(); ++i) out += (i ? "," : "") + std::to_string(d[i]);
  return out;
}

struct ConfigKey {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Declares a key bound to a member reachable from RunConfig.
template <typename Access>
ConfigKey real_key(std::string key, Access access) {
  return {key,
          [key, access](RunConfig& c, const std::string& v) { access(c) = parse_double(key, v); },
          [access](const RunConfig& c) { return fmt_double(access(c)); }};
}

template <typename T, typename Access>
ConfigKey uint_key(std::string key, Access access) {
  return {key,
          [key, access](RunConfig& c, const std::string& v) {
            access(c) = static_cast<T>(parse_uint(key, v));
          },
          [access](const RunConfig& c) {
            return std::to_string(access(c));
          }};
}

template <typename Access>
ConfigKey bool_key(std::string key, Access access) {
  return {key,
          [key, access](RunConfig& c, const std::string& v) { access(c) = parse_bool(key, v); },
          [access](const RunConfig& c) {
            return std::string(access(c) ? "true" : "false");
          }};
}

template <typename Access>
ConfigKey dims_key(std::string key, Access access) {
  return {key,
          [key, access](RunConfig& c, const std::string& v) { access(c) = parse_dims(key, v); },
          [access](const RunConfig& c) { return fmt_dims(access(c)); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"variant",
                 [](RunConfig& c, const std::string& v) { c.variant = parse_variant(v); },
                 [](const RunConfig& c) { return std::string(variant_name(c.variant)); }});
    k.push_back(uint_key<std::uint64_t>("seed", [](auto& c) -> auto& { return c.seed; }));
    k.push_back({"epochs",
                 [](RunConfig& c, const std::string& v) {
                   c.epochs = static_cast<int>(parse_uint("epochs", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.epochs); }});
    k.push_back(uint_key<std::size_t>("batch_size",
                                      [](auto& c) -> auto& { return c.batch_size; }));
    k.push_back({"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
                 [](const RunConfig& c) { return c.out_dir; }});

    k.push_back({"data.path", [](RunConfig& c, const std::string& v) { c.data_path = v; },
                 [](const RunConfig& c) { return c.data_path; }});
    k.push_back(uint_key<std::size_t>("data.n_samples",
                                      [](auto& c) -> auto& { return c.synth.n_samples; }));
    k.push_back(real_key("data.positive_fraction",
                         [](auto& c) -> auto& { return c.synth.positive_fraction; }));
    k.push_back(dims_key("data.shape_a", [](auto& c) -> auto& { return c.synth.shape_a; }));
    k.push_back(dims_key("data.shape_b", [](auto& c) -> auto& { return c.synth.shape_b; }));
    k.push_back(real_key("data.sep_a", [](auto& c) -> auto& { return c.synth.sep_a; }));
    k.push_back(real_key("data.sep_b", [](auto& c) -> auto& { return c.synth.sep_b; }));
    k.push_back(real_key("data.noise_a", [](auto& c) -> auto& { return c.synth.noise_a; }));
    k.push_back(real_key("data.noise_b", [](auto& c) -> auto& { return c.synth.noise_b; }));
    k.push_back(uint_key<std::uint32_t>("data.num_classes",
                                        [](auto& c) -> auto& { return c.synth.num_classes; }));
    k.push_back(uint_key<std::uint64_t>("data.seed",
                                        [](auto& c) -> auto& { return c.synth.seed; }));
    k.push_back(real_key("data.train_fraction",
                         [](auto& c) -> auto& { return c.train_fraction; }));
    k.push_back(bool_key("data.val_noise", [](auto& c) -> auto& { return c.val_noise; }));
    k.push_back(real_key("data.val_noise_level",
                         [](auto& c) -> auto& { return c.val_noise_level; }));

    k.push_back({"model.feature_len",
                 [](RunConfig& c, const std::string& v) {
                   const auto n = static_cast<std::size_t>(parse_uint("model.feature_len", v));
                   c.model.visual.feature_len = c.model.eeg.feature_len = n;
                 },
                 [](const RunConfig& c) { return std::to_string(c.model.visual.feature_len); }});
    k.push_back(dims_key("model.visual.hidden",
                         [](auto& c) -> auto& { return c.model.visual.hidden; }));
    k.push_back(dims_key("model.eeg.hidden",
                         [](auto& c) -> auto& { return c.model.eeg.hidden; }));
    k.push_back(uint_key<std::size_t>("model.fusion.heads",
                                      [](auto& c) -> auto& { return c.model.fusion.heads; }));
    k.push_back(uint_key<std::size_t>(
        "model.fusion.aligned_len", [](auto& c) -> auto& { return c.model.fusion.aligned_len; }));
    k.push_back(uint_key<std::size_t>("model.fusion.tokens",
                                      [](auto& c) -> auto& { return c.model.fusion.tokens; }));
    k.push_back(uint_key<std::size_t>(
        "model.fusion.key_width", [](auto& c) -> auto& { return c.model.fusion.key_width; }));
    k.push_back(uint_key<std::size_t>("model.fusion.out_len",
                                      [](auto& c) -> auto& { return c.model.fusion.out_len; }));
    k.push_back(bool_key("model.fusion.feature_softmax",
                         [](auto& c) -> auto& { return c.model.fusion.feature_softmax; }));

    k.push_back(real_key("distill.tau", [](auto& c) -> auto& { return c.tau; }));

    k.push_back(real_key("amb.gamma", [](auto& c) -> auto& { return c.amb.gamma; }));
    k.push_back(real_key("amb.r_min", [](auto& c) -> auto& { return c.amb.r_min; }));
    k.push_back(real_key("amb.r_max", [](auto& c) -> auto& { return c.amb.r_max; }));
    k.push_back(real_key("amb.alpha_min", [](auto& c) -> auto& { return c.amb.alpha_min; }));
    k.push_back(real_key("amb.alpha_max", [](auto& c) -> auto& { return c.amb.alpha_max; }));
    k.push_back(real_key("amb.beta_min", [](auto& c) -> auto& { return c.amb.beta_min; }));
    k.push_back(real_key("amb.beta_max", [](auto& c) -> auto& { return c.amb.beta_max; }));
    k.push_back(real_key("amb.ratio_floor",
                         [](auto& c) -> auto& { return c.amb.ratio_floor; }));
    k.push_back(bool_key("amb.dynamic_weights",
                         [](auto& c) -> auto& { return c.amb_dynamic_weights; }));
    k.push_back(bool_key("amb.dynamic_gradients",
                         [](auto& c) -> auto& { return c.amb_dynamic_gradients; }));

    k.push_back(real_key("optim.eta", [](auto& c) -> auto& { return c.optim.eta; }));
    k.push_back(real_key("optim.beta1", [](auto& c) -> auto& { return c.optim.beta1; }));
    k.push_back(real_key("optim.beta2", [](auto& c) -> auto& { return c.optim.beta2; }));
    k.push_back(real_key("optim.epsilon", [](auto& c) -> auto& { return c.optim.epsilon; }));
    k.push_back(bool_key("optim.bias_correction",
                         [](auto& c) -> auto& { return c.optim.bias_correction; }));
    k.push_back(bool_key("optim.fusion_backprop_encoders",
                         [](auto& c) -> auto& { return c.fusion_backprop_encoders; }));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Sets one dotted key. Unknown keys and malformed values raise config_error
/// naming the key.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.key == key) {
      k.set(cfg, value);
      return;
    }
  throw config_error("unknown config key '" + key + "'");
}

/// Applies `key = value` lines. '#' starts a comment; blank lines are skipped.
inline void apply_config_text(RunConfig& cfg, std::string_view text,
                              const std::string& source = "<config>") {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw config_error(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(base, ss.str(), path);
  return base;
}

/// Every key with its resolved value, one `key = value` per line.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.key + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace ambokd
