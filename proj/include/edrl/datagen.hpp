// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic two-modality classification data with planted latent factors.
//
// Every sample of class c draws a common factor z_com ~ N(mu_c^com, I) and
// one unique factor per modality z_uni^m ~ N(mu_c^{uni,m}, I). Token t of
// modality m is A_{m,t} [z_com; z_uni^m] + noise / snr, with A_{m,t} a fixed
// random full-rank map. Class means are centred and scaled so the mean
// pairwise distance between classes equals the configured separation.

#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "edrl/blobfile.hpp"
#include "edrl/rng.hpp"
#include "edrl/tensor.hpp"
#include "edrl/types.hpp"
#include "json.hpp"

namespace edrl {

struct SyntheticSpec {
  std::size_t classes = 2;
  std::size_t samples_per_class = 200;
  std::size_t tokens = 8;
  std::size_t width_m1 = 16;
  std::size_t width_m2 = 16;
  std::size_t common_dim = 4;
  std::size_t unique_dim = 4;
  double snr = 10.0;
  double common_separation = 2.5;
  double unique_separation = 1.5;
  double test_fraction = 0.2;
  bool nonlinear_mix = false;
  std::uint64_t seed = 1;

  std::size_t width(Modality m) const { return m == Modality::m1 ? width_m1 : width_m2; }

  void validate() const {
    if (classes < 2 || samples_per_class == 0 || tokens == 0 || width_m1 == 0 || width_m2 == 0) {
      throw std::invalid_argument("synthetic spec: class count >= 2 and positive extents required");
    }
    if (common_dim == 0 || unique_dim == 0) throw std::invalid_argument("synthetic spec: factor dimensions must be positive");
    if (common_dim + unique_dim > std::min(width_m1, width_m2)) {
      throw std::invalid_argument("synthetic spec: factor dimensions exceed a modality's raw width");
    }
    if (!(snr > 0.0) || common_separation < 0.0 || unique_separation < 0.0) {
      throw std::invalid_argument("synthetic spec: snr must be positive and separations non-negative");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("synthetic spec: test_fraction in (0, 1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSpec, classes, samples_per_class, tokens, width_m1, width_m2,
                                                common_dim, unique_dim, snr, common_separation, unique_separation,
                                                test_fraction, nonlinear_mix, seed)

/// Two-modality token batch. Missing modalities carry zero payloads; the
/// `present` flags are authoritative.
struct SampleBatch {
  std::array<Tensor, kModalities> tokens;  // [B, T, W_m]
  std::vector<std::size_t> labels;
  std::vector<std::array<bool, kModalities>> present;
  std::array<double, kModalities> noise_variance{0.0, 0.0};

  std::size_t size() const { return labels.size(); }
  const Tensor& modality(Modality m) const { return tokens[index(m)]; }

  bool all_present(Modality m) const {
    for (const auto& p : present)
      if (!p[index(m)]) return false;
    return true;
  }

  bool any_present(Modality m) const {
    for (const auto& p : present)
      if (p[index(m)]) return true;
    return false;
  }

  SampleBatch subset(const std::vector<std::size_t>& rows) const {
    SampleBatch out;
    for (auto m : kAllModalities) out.tokens[index(m)] = gather_rows(tokens[index(m)].detach(), rows);
    for (auto r : rows) {
      out.labels.push_back(labels.at(r));
      out.present.push_back(present.at(r));
    }
    out.noise_variance = noise_variance;
    return out;
  }

  void validate(std::size_t classes) const {
    const std::size_t b = size();
    if (present.size() != b) throw DataError("availability flags do not match the batch size");
    for (auto m : kAllModalities) {
      const auto& t = tokens[index(m)];
      if (!t.defined() || t.rank() != 3 || t.dim(0) != b) throw DataError("token tensor shape does not match batch");
    }
    if (tokens[0].dim(1) != tokens[1].dim(1)) throw DataError("modalities disagree on token count");
    for (std::size_t i = 0; i < b; ++i) {
      if (labels[i] >= classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
      if (!present[i][0] && !present[i][1]) throw DataError("sample " + std::to_string(i) + " has no modality");
    }
  }
};

/// Latent factors behind a batch, row-aligned with it.
struct LatentFactors {
  std::vector<double> common;                            // [N, common_dim]
  std::array<std::vector<double>, kModalities> unique;   // [N, unique_dim]
};

struct DatasetSplits {
  SampleBatch train;
  SampleBatch test;
};

struct SyntheticData {
  DatasetSplits splits;
  LatentFactors train_latents;
  LatentFactors test_latents;
};

namespace detail {

/// K centred class means in `dim` dimensions, mean pairwise distance = separation.
inline std::vector<double> class_means(std::size_t classes, std::size_t dim, double separation, Rng rng) {
  std::vector<double> mu(classes * dim);
  for (double& v : mu) v = rng.normal();
  for (std::size_t j = 0; j < dim; ++j) {
    double centre = 0.0;
    for (std::size_t c = 0; c < classes; ++c) centre += mu[c * dim + j];
    centre /= static_cast<double>(classes);
    for (std::size_t c = 0; c < classes; ++c) mu[c * dim + j] -= centre;
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < classes; ++a)
    for (std::size_t b = a + 1; b < classes; ++b, ++pairs) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d2 += std::pow(mu[a * dim + j] - mu[b * dim + j], 2);
      total += std::sqrt(d2);
    }
  const double mean_distance = total / static_cast<double>(pairs);
  for (double& v : mu) v = mean_distance > 0.0 ? v * separation / mean_distance : 0.0;
  return mu;
}

}  // namespace detail

/// Stream ids: 1 class means, 2 mixing maps, 3 split shuffle; 1000 + n for
/// sample n (class-major order). Results do not depend on generation order.
inline SyntheticData generate_with_latents(const SyntheticSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  const std::size_t k = spec.classes, dc = spec.common_dim, du = spec.unique_dim, t_count = spec.tokens;
  const std::size_t f = dc + du;

  Rng means_rng = root.substream(1);
  const auto mu_com = detail::class_means(k, dc, spec.common_separation, means_rng.substream(0));
  const std::array<std::vector<double>, kModalities> mu_uni{
      detail::class_means(k, du, spec.unique_separation, means_rng.substream(1)),
      detail::class_means(k, du, spec.unique_separation, means_rng.substream(2))};

  // mixing maps A_{m,t}: [W_m, f] entries N(0, 1/f)
  std::array<std::vector<double>, kModalities> maps;
  for (auto m : kAllModalities) {
    Rng r = root.substream(2).substream(index(m));
    auto& a = maps[index(m)];
    a.resize(t_count * spec.width(m) * f);
    for (double& v : a) v = r.normal() / std::sqrt(static_cast<double>(f));
  }

  const std::size_t n = k * spec.samples_per_class;
  std::array<std::vector<double>, kModalities> raw{std::vector<double>(n * t_count * spec.width_m1),
                                                  std::vector<double>(n * t_count * spec.width_m2)};
  LatentFactors all;
  all.common.resize(n * dc);
  for (auto& u : all.unique) u.resize(n * du);
  std::vector<std::size_t> labels(n);

  const double noise_sd = 1.0 / spec.snr;
  for (std::size_t id = 0; id < n; ++id) {
    const std::size_t c = id / spec.samples_per_class;
    labels[id] = c;
    Rng r = root.substream(1000 + id);
    for (std::size_t j = 0; j < dc; ++j) all.common[id * dc + j] = mu_com[c * dc + j] + r.normal();
    for (auto m : kAllModalities)
      for (std::size_t j = 0; j < du; ++j)
        all.unique[index(m)][id * du + j] = mu_uni[index(m)][c * du + j] + r.normal();
    for (auto m : kAllModalities) {
      const std::size_t w = spec.width(m);
      std::vector<double> z(f);
      for (std::size_t j = 0; j < dc; ++j) z[j] = all.common[id * dc + j];
      for (std::size_t j = 0; j < du; ++j) z[dc + j] = all.unique[index(m)][id * du + j];
      for (std::size_t t = 0; t < t_count; ++t) {
        const double* a = maps[index(m)].data() + t * w * f;
        for (std::size_t row = 0; row < w; ++row) {
          double s = 0.0;
          for (std::size_t j = 0; j < f; ++j) s += a[row * f + j] * z[j];
          if (spec.nonlinear_mix) s = std::tanh(s);
          raw[index(m)][(id * t_count + t) * w + row] = s + noise_sd * r.normal();
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = root.substream(3);
  shuffle_rng.shuffle(std::span<std::size_t>(order));
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(n)));
  if (n_test == 0 || n_test >= n) throw std::invalid_argument("synthetic spec: split leaves an empty partition");

  const auto build = [&](std::size_t begin, std::size_t end, LatentFactors& lat) {
    SampleBatch b;
    const std::size_t rows = end - begin;
    for (auto m : kAllModalities) {
      const std::size_t w = spec.width(m);
      std::vector<double> v(rows * t_count * w);
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(raw[index(m)].begin() + static_cast<std::ptrdiff_t>(order[begin + i] * t_count * w), t_count * w,
                    v.begin() + static_cast<std::ptrdiff_t>(i * t_count * w));
      b.tokens[index(m)] = Tensor({rows, t_count, w}, std::move(v));
    }
    lat.common.resize(rows * dc);
    for (auto& u : lat.unique) u.resize(rows * du);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t id = order[begin + i];
      b.labels.push_back(labels[id]);
      b.present.push_back({true, true});
      std::copy_n(all.common.begin() + static_cast<std::ptrdiff_t>(id * dc), dc,
                  lat.common.begin() + static_cast<std::ptrdiff_t>(i * dc));
      for (auto m : kAllModalities)
        std::copy_n(all.unique[index(m)].begin() + static_cast<std::ptrdiff_t>(id * du), du,
                    lat.unique[index(m)].begin() + static_cast<std::ptrdiff_t>(i * du));
    }
    return b;
  };

  SyntheticData out;
  out.splits.test = build(0, n_test, out.test_latents);
  out.splits.train = build(n_test, n, out.train_latents);
  return out;
}

inline DatasetSplits generate(const SyntheticSpec& spec) { return generate_with_latents(spec).splits; }

/// Marks `m` missing on every sample and zeroes its payload. The input is
/// not modified.
inline SampleBatch corrupt_missing(const SampleBatch& batch, Modality m) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch.present[i][index(other(m))]) {
      throw std::invalid_argument("cannot remove " + to_string(m) + ": it is the last available modality of sample " +
                                  std::to_string(i));
    }
  }
  SampleBatch out = batch;
  out.tokens[index(m)] = Tensor::zeros(batch.modality(m).shape());
  for (auto& p : out.present) p[index(m)] = false;
  return out;
}

/// Adds i.i.d. N(0, variance) to the present samples of modality `m`.
inline SampleBatch corrupt_noise(const SampleBatch& batch, Modality m, double variance, Rng& rng) {
  if (!(variance >= 0.0)) throw std::invalid_argument("noise variance must be non-negative, got " + std::to_string(variance));
  SampleBatch out = batch;
  if (variance == 0.0) return out;
  Tensor noisy = batch.modality(m).clone();
  auto v = noisy.mutable_values();
  const std::size_t per_sample = batch.size() ? v.size() / batch.size() : 0;
  const double sd = std::sqrt(variance);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch.present[i][index(m)]) continue;
    for (std::size_t j = 0; j < per_sample; ++j) v[i * per_sample + j] += sd * rng.normal();
  }
  out.tokens[index(m)] = std::move(noisy);
  out.noise_variance[index(m)] += variance;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetFile {
  SyntheticSpec spec;
  DatasetSplits splits;
};

namespace detail {

inline void append_batch_blobs(std::vector<Blob>& out, const std::string& split, const SampleBatch& b) {
  for (auto m : kAllModalities) {
    const auto& t = b.modality(m);
    out.push_back({split + "/" + to_string(m), t.shape(), {t.values().begin(), t.values().end()}});
  }
  Blob labels{split + "/labels", {b.size()}, {}};
  Blob present{split + "/present", {b.size(), kModalities}, {}};
  for (std::size_t i = 0; i < b.size(); ++i) {
    labels.values.push_back(static_cast<double>(b.labels[i]));
    for (auto m : kAllModalities) present.values.push_back(b.present[i][index(m)] ? 1.0 : 0.0);
  }
  out.push_back(std::move(labels));
  out.push_back(std::move(present));
}

inline SampleBatch read_batch_blobs(const BlobFile& file, const std::string& split) {
  SampleBatch b;
  for (auto m : kAllModalities) {
    const auto& blob = file.get(split + "/" + to_string(m));
    b.tokens[index(m)] = Tensor(blob.shape, blob.values);
  }
  for (double v : file.get(split + "/labels").values) {
    if (v < 0.0 || v != std::floor(v)) throw DataError("non-integer label in '" + split + "'");
    b.labels.push_back(static_cast<std::size_t>(v));
  }
  const auto& present = file.get(split + "/present").values;
  if (present.size() != kModalities * b.labels.size()) throw DataError("availability flags do not match labels");
  for (std::size_t i = 0; i < b.labels.size(); ++i) b.present.push_back({present[2 * i] != 0.0, present[2 * i + 1] != 0.0});
  const auto& nv = file.header.at("splits").at(split).at("noise_variance");
  b.noise_variance = {nv.at(0).get<double>(), nv.at(1).get<double>()};
  return b;
}

}  // namespace detail

inline std::string encode_dataset(const DatasetFile& data) {
  std::vector<Blob> blobs;
  detail::append_batch_blobs(blobs, "train", data.splits.train);
  detail::append_batch_blobs(blobs, "test", data.splits.test);
  nlohmann::json meta;
  meta["spec"] = data.spec;
  meta["seed"] = data.spec.seed;
  for (const auto& [name, b] : {std::pair<std::string, const SampleBatch*>{"train", &data.splits.train},
                                {"test", &data.splits.test}}) {
    meta["splits"][name] = {{"size", b->size()}, {"noise_variance", b->noise_variance}};
  }
  return encode_blob_file("edrl-dataset", kDatasetFormatVersion, std::move(meta), blobs);
}

inline DatasetFile decode_dataset(const std::string& bytes) {
  const BlobFile file = decode_blob_file(bytes, "edrl-dataset", kDatasetFormatVersion);
  DatasetFile out;
  try {
    out.spec = file.header.at("spec").get<SyntheticSpec>();
    out.splits.train = detail::read_batch_blobs(file, "train");
    out.splits.test = detail::read_batch_blobs(file, "test");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dataset header: ") + e.what());
  } catch (const ShapeError& e) {
    throw DataError(std::string("inconsistent dataset blobs: ") + e.what());
  }
  out.splits.train.validate(out.spec.classes);
  out.splits.test.validate(out.spec.classes);
  return out;
}

inline void save_dataset(const std::string& path, const DatasetFile& data) { write_file_bytes(path, encode_dataset(data)); }

inline DatasetFile load_dataset(const std::string& path) { return decode_dataset(read_file_bytes(path)); }

}  // namespace edrl
