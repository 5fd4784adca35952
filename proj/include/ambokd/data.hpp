#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ambokd/binary_io.hpp"
#include "ambokd/errors.hpp"
#include "ambokd/tensor.hpp"

namespace ambokd {

/// One (image-like, matrix-like, label) triple.
struct PairedSample {
  Tensor modality_a;  ///< [C × H × W]
  Tensor modality_b;  ///< [channels × samples]
  std::uint32_t label = 0;

  friend bool operator==(const PairedSample&, const PairedSample&) = default;
};

struct Dataset {
  Shape shape_a{3, 16, 16};
  Shape shape_b{8, 64};
  std::uint32_t num_classes = 2;
  std::vector<PairedSample> samples;

  std::size_t size() const { return samples.size(); }

  std::size_t count_label(std::uint32_t label) const {
    return static_cast<std::size_t>(std::count_if(
        samples.begin(), samples.end(), [&](const auto& s) { return s.label == label; }));
  }

  void validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.modality_a.shape() != shape_a || s.modality_b.shape() != shape_b)
        throw data_error("sample " + std::to_string(i) + " has shapes " +
                         shape_str(s.modality_a.shape()) + "/" +
                         shape_str(s.modality_b.shape()) + ", dataset expects " +
                         shape_str(shape_a) + "/" + shape_str(shape_b));
      if (s.label >= num_classes)
        throw data_error("sample " + std::to_string(i) + " label " +
                         std::to_string(s.label) + " >= class count " +
                         std::to_string(num_classes));
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// A batch gathered into contiguous tensors.
struct Batch {
  Tensor modality_a;  ///< [n × C × H × W]
  Tensor modality_b;  ///< [n × channels × samples]
  std::vector<std::uint32_t> labels;
};

inline Batch gather(const Dataset& data, std::span<const std::size_t> indices) {
  Shape sa{indices.size()};
  sa.insert(sa.end(), data.shape_a.begin(), data.shape_a.end());
  Shape sb{indices.size()};
  sb.insert(sb.end(), data.shape_b.begin(), data.shape_b.end());
  Batch b{Tensor(sa), Tensor(sb), {}};
  const std::size_t na = shape_size(data.shape_a), nb = shape_size(data.shape_b);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const PairedSample& s = data.samples.at(indices[i]);
    std::copy_n(s.modality_a.data().data(), na, b.modality_a.data().data() + i * na);
    std::copy_n(s.modality_b.data().data(), nb, b.modality_b.data().data() + i * nb);
    b.labels.push_back(s.label);
  }
  return b;
}

struct SynthSpec {
  std::size_t n_samples = 2500;
  double positive_fraction = 0.29;
  Shape shape_a{3, 16, 16};
  Shape shape_b{8, 64};
  double sep_a = 2.0;
  double sep_b = 1.2;
  double noise_a = 1.0;
  double noise_b = 1.0;
  std::uint32_t num_classes = 2;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(positive_fraction > 0.0 && positive_fraction < 1.0))
      throw parameter_error("positive fraction must lie in (0, 1), got " +
                            std::to_string(positive_fraction));
    if (!(sep_a >= 0.0) || !(sep_b >= 0.0))
      throw parameter_error("class separations must be >= 0");
    if (!(noise_a >= 0.0) || !(noise_b >= 0.0))
      throw parameter_error("noise std must be >= 0");
    if (num_classes < 2 || num_classes > 256)
      throw parameter_error("class count must lie in [2, 256]");
    if (shape_a.size() != 3) throw parameter_error("modality A shape must be C,H,W");
    if (shape_b.size() != 2) throw parameter_error("modality B shape must be channels,samples");
    for (std::size_t d : shape_a)
      if (d == 0) throw parameter_error("modality A dimensions must be positive");
    for (std::size_t d : shape_b)
      if (d == 0) throw parameter_error("modality B dimensions must be positive");
  }
};

namespace detail {

inline std::vector<double> random_unit(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> normal;
  std::vector<double> u(n);
  double norm = 0.0;
  for (double& v : u) {
    v = normal(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : u) v /= norm;
  return u;
}

// Stored values are kept float32-representable so the on-disk format
// round-trips exactly.
inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Class-conditional Gaussian data. In the binary case the two class means
/// sit at ∓sep/2 along one fixed random unit direction per modality; with
/// M > 2 classes, class c sits at (sep/√2)·u_c. Noise is i.i.d. N(0, noise²).
inline Dataset generate(const SynthSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.shape_a = spec.shape_a;
  ds.shape_b = spec.shape_b;
  ds.num_classes = spec.num_classes;
  const std::size_t na = shape_size(spec.shape_a), nb = shape_size(spec.shape_b);

  std::mt19937_64 rng(spec.seed);
  std::vector<std::vector<double>> dir_a, dir_b;
  const std::size_t ndirs = spec.num_classes == 2 ? 1 : spec.num_classes;
  for (std::size_t c = 0; c < ndirs; ++c) dir_a.push_back(detail::random_unit(rng, na));
  for (std::size_t c = 0; c < ndirs; ++c) dir_b.push_back(detail::random_unit(rng, nb));

  // Label 0 is the negative class; positives split evenly over the others.
  const auto n_pos = static_cast<std::size_t>(
      std::llround(static_cast<double>(spec.n_samples) * spec.positive_fraction));
  std::vector<std::uint32_t> labels(spec.n_samples, 0);
  for (std::size_t i = 0; i < n_pos; ++i)
    labels[i] = 1 + static_cast<std::uint32_t>(i % (spec.num_classes - 1));
  std::shuffle(labels.begin(), labels.end(), rng);

  auto mean_coef = [&](std::uint32_t label, double sep, std::size_t& dir) {
    if (spec.num_classes == 2) {
      dir = 0;
      return label == 1 ? sep / 2.0 : -sep / 2.0;
    }
    dir = label;
    return sep / std::sqrt(2.0);
  };

  std::normal_distribution<double> normal;
  ds.samples.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    PairedSample s{Tensor(spec.shape_a), Tensor(spec.shape_b), labels[i]};
    std::size_t d = 0;
    double coef = mean_coef(labels[i], spec.sep_a, d);
    for (std::size_t k = 0; k < na; ++k)
      s.modality_a[k] = detail::to_f32(coef * dir_a[d][k] + spec.noise_a * normal(rng));
    coef = mean_coef(labels[i], spec.sep_b, d);
    for (std::size_t k = 0; k < nb; ++k)
      s.modality_b[k] = detail::to_f32(coef * dir_b[d][k] + spec.noise_b * normal(rng));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

enum class NoiseKind { gaussian, salt_pepper };

/// Number of positions salt-and-pepper noise overwrites: floor(level·n).
inline std::size_t salt_pepper_count(double level, std::size_t n) {
  // The 1e-9 slack keeps products like 0.2·1000 from landing one ulp short.
  return static_cast<std::size_t>(std::floor(level * static_cast<double>(n) + 1e-9));
}

/// Positions salt-and-pepper noise overwrites in a tensor of n elements:
/// floor(level·n) distinct indices drawn by a partial Fisher-Yates shuffle.
inline std::vector<std::size_t> salt_pepper_positions(std::size_t n, double level,
                                                      std::mt19937_64& rng) {
  const std::size_t k = salt_pepper_count(level, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

/// Gaussian: adds i.i.d. N(0, level²). Salt-and-pepper: overwrites
/// floor(level·n) seeded positions, the first half with the tensor minimum
/// and the rest with its maximum.
inline Tensor add_noise(const Tensor& x, NoiseKind kind, double level, std::uint64_t seed) {
  if (!(level >= 0.0) || !std::isfinite(level))
    throw parameter_error("add_noise: level must be >= 0, got " + std::to_string(level));
  if (kind == NoiseKind::salt_pepper && level > 1.0)
    throw parameter_error("add_noise: salt-and-pepper level must be <= 1, got " +
                          std::to_string(level));
  Tensor out = x;
  if (level == 0.0 || x.empty()) return out;
  std::mt19937_64 rng(seed);
  if (kind == NoiseKind::gaussian) {
    std::normal_distribution<double> normal(0.0, level);
    for (double& v : out.data()) v += normal(rng);
    return out;
  }
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  const double vmin = *lo, vmax = *hi;
  const std::vector<std::size_t> pos = salt_pepper_positions(x.size(), level, rng);
  for (std::size_t i = 0; i < pos.size(); ++i) out[pos[i]] = i < pos.size() / 2 ? vmin : vmax;
  return out;
}

enum class NoiseAssignment : std::uint8_t { clean, gaussian, salt_pepper };

/// Applies the validation protocol to modality A: a seeded third of the
/// samples get Gaussian noise, another third salt-and-pepper, the remainder
/// stays clean. With n not divisible by 3 the clean group takes the excess.
inline std::vector<NoiseAssignment> apply_validation_noise(Dataset& data, double level,
                                                           std::uint64_t seed) {
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<NoiseAssignment> assign(n, NoiseAssignment::clean);
  const std::size_t third = n / 3;
  for (std::size_t i = 0; i < 2 * third; ++i)
    assign[order[i]] = i < third ? NoiseAssignment::gaussian : NoiseAssignment::salt_pepper;
  for (std::size_t i = 0; i < n; ++i) {
    if (assign[i] == NoiseAssignment::clean) continue;
    const auto kind = assign[i] == NoiseAssignment::gaussian ? NoiseKind::gaussian
                                                             : NoiseKind::salt_pepper;
    data.samples[i].modality_a =
        add_noise(data.samples[i].modality_a, kind, level, seed * 1000003ull + i);
  }
  return assign;
}

/// Stratified split; each class contributes round(count·fraction) samples to
/// the training side. Both sides keep the original sample order.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction,
                                         std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw parameter_error("split: train fraction must lie in (0, 1), got " +
                          std::to_string(train_fraction));
  std::mt19937_64 rng(seed);
  std::vector<bool> in_train(data.size(), false);
  for (std::uint32_t c = 0; c < data.num_classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.samples[i].label == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = static_cast<std::size_t>(
        std::llround(static_cast<double>(idx.size()) * train_fraction));
    for (std::size_t i = 0; i < take; ++i) in_train[idx[i]] = true;
  }
  Dataset train{data.shape_a, data.shape_b, data.num_classes, {}};
  Dataset val{data.shape_a, data.shape_b, data.num_classes, {}};
  for (std::size_t i = 0; i < data.size(); ++i)
    (in_train[i] ? train : val).samples.push_back(data.samples[i]);
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// PMD1 binary format, little-endian:
//   "PMD1" u32 version u32 n
//   u8 rank_a, u32 dims_a[rank_a]; u8 rank_b, u32 dims_b[rank_b]
//   u32 class_count
//   n × { f32 modality_a[...], f32 modality_b[...], u8 label }

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void write_shape(ByteWriter& w, const Shape& s) {
  w.u8(static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) w.u32(static_cast<std::uint32_t>(d));
}

inline Shape read_shape(ByteReader& r, const char* what) {
  const std::uint8_t rank = r.u8(what);
  Shape s;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const std::uint32_t d = r.u32(what);
    if (d == 0) r.fail(std::string("zero dimension in ") + what);
    s.push_back(d);
  }
  return s;
}

}  // namespace detail

/// Serializes to PMD1 bytes. Values are narrowed to float32.
inline std::vector<unsigned char> encode_dataset(const Dataset& data) {
  data.validate();
  detail::ByteWriter w;
  w.bytes("PMD1", 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  detail::write_shape(w, data.shape_a);
  detail::write_shape(w, data.shape_b);
  w.u32(data.num_classes);
  for (const PairedSample& s : data.samples) {
    for (double v : s.modality_a.data()) w.f32(static_cast<float>(v));
    for (double v : s.modality_b.data()) w.f32(static_cast<float>(v));
    w.u8(static_cast<std::uint8_t>(s.label));
  }
  return w.buffer();
}

inline Dataset decode_dataset(std::vector<unsigned char> bytes, const std::string& path) {
  detail::ByteReader r(std::move(bytes), path);
  r.expect_magic("PMD1");
  const std::uint32_t version = r.u32("version");
  if (version != kDatasetVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint32_t n = r.u32("sample count");
  Dataset ds;
  ds.shape_a = detail::read_shape(r, "modality A shape");
  ds.shape_b = detail::read_shape(r, "modality B shape");
  ds.num_classes = r.u32("class count");
  if (ds.num_classes < 2 || ds.num_classes > 256)
    r.fail("class count " + std::to_string(ds.num_classes) + " out of range");
  const std::size_t na = shape_size(ds.shape_a), nb = shape_size(ds.shape_b);
  const std::size_t record = 4 * (na + nb) + 1;
  if (r.remaining() / record < n)
    r.fail("truncated file: " + std::to_string(n) + " samples declared, " +
           std::to_string(r.remaining()) + " bytes remain");
  ds.samples.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    PairedSample s{Tensor(ds.shape_a), Tensor(ds.shape_b), 0};
    for (double& v : s.modality_a.data()) v = r.f32("modality A");
    for (double& v : s.modality_b.data()) v = r.f32("modality B");
    s.label = r.u8("label");
    if (s.label >= ds.num_classes) r.fail("label " + std::to_string(s.label) + " out of range");
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) r.fail("trailing bytes after last sample");
  return ds;
}

inline void save(const Dataset& data, const std::string& path) {
  detail::write_file(path, encode_dataset(data));
}

inline Dataset load(const std::string& path) {
  return decode_dataset(detail::read_file(path), path);
}

}  // namespace ambokd
