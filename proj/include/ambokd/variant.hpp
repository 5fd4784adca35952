#pragma once

#include <array>
#include <utility>
#include <string>
#include <string_view>

#include "ambokd/amb.hpp"
#include "ambokd/errors.hpp"

namespace ambokd {

enum class Variant {
  ambokd,      ///< mutual distillation with dynamic weights and gradient ratios
  mmokd,       ///< mutual distillation, alpha = beta = 1, R^DG = 1
  mmokd_dk,    ///< dynamic KD weights only
  mmokd_dg,    ///< dynamic gradient ratios only
  mkd,         ///< fusion is the only distilled student; encoders train on CE
  dml_style,   ///< EEG and visual distill from each other; no fusion branch
  unimodal_e,  ///< EEG branch alone on CE
  unimodal_v,  ///< visual branch alone on CE
  amm,         ///< fusion model trained end to end on CE
};

inline constexpr std::array<std::pair<Variant, std::string_view>, 9> kVariantNames = {{
    {Variant::ambokd, "ambokd"},
    {Variant::mmokd, "mmokd"},
    {Variant::mmokd_dk, "mmokd-dk"},
    {Variant::mmokd_dg, "mmokd-dg"},
    {Variant::mkd, "mkd"},
    {Variant::dml_style, "dml"},
    {Variant::unimodal_e, "unimodal-e"},
    {Variant::unimodal_v, "unimodal-v"},
    {Variant::amm, "amm"},
}};

inline std::string variant_list() {
  std::string out;
  for (const auto& [_, name] : kVariantNames) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

inline std::string_view variant_name(Variant v) {
  for (const auto& [var, name] : kVariantNames)
    if (var == v) return name;
  return "?";
}

/// Accepts the canonical names, case-insensitively, with '_' for '-'.
inline Variant parse_variant(std::string_view text) {
  std::string norm;
  for (char c : text) {
    char l = static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
    norm.push_back(l == '_' ? '-' : l);
  }
  if (norm == "dml-style") norm = "dml";
  for (const auto& [var, name] : kVariantNames)
    if (name == norm) return var;
  throw config_error("unknown variant '" + std::string(text) +
                     "'; valid variants: " + variant_list());
}

/// How one branch is trained within a variant.
struct StudentRole {
  bool updated = false;
  bool use_teacher_a = false;
  bool use_teacher_b = false;
};

/// Per-variant training plan: which branches are students, which KD terms
/// they see, and which AMB mechanisms apply.
struct VariantPlan {
  std::array<StudentRole, 3> roles{};
  bool dynamic_weights = false;
  bool dynamic_gradients = false;
  /// The fusion student also owns and trains both encoders.
  bool fusion_owns_encoders = false;

  const StudentRole& role(Branch b) const { return roles[index(b)]; }
};

inline VariantPlan plan_for(Variant v) {
  VariantPlan p;
  const StudentRole mutual{true, true, true};
  const StudentRole ce_only{true, false, false};
  switch (v) {
    case Variant::ambokd:
      p.roles = {mutual, mutual, mutual};
      p.dynamic_weights = p.dynamic_gradients = true;
      break;
    case Variant::mmokd:
      p.roles = {mutual, mutual, mutual};
      break;
    case Variant::mmokd_dk:
      p.roles = {mutual, mutual, mutual};
      p.dynamic_weights = true;
      break;
    case Variant::mmokd_dg:
      p.roles = {mutual, mutual, mutual};
      p.dynamic_gradients = true;
      break;
    case Variant::mkd:
      p.roles = {ce_only, ce_only, mutual};
      break;
    case Variant::dml_style:
      // EEG's teacher a is visual and visual's teacher a is EEG.
      p.roles = {StudentRole{true, true, false}, StudentRole{true, true, false}, {}};
      break;
    case Variant::unimodal_e:
      p.roles[index(Branch::eeg)] = ce_only;
      break;
    case Variant::unimodal_v:
      p.roles[index(Branch::visual)] = ce_only;
      break;
    case Variant::amm:
      p.roles[index(Branch::fusion)] = ce_only;
      p.fusion_owns_encoders = true;
      break;
  }
  return p;
}

}  // namespace ambokd
