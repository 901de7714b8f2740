#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "featmine/errors.hpp"
#include "featmine/ops.hpp"
#include "featmine/rng.hpp"
#include "featmine/tensor.hpp"

namespace featmine {

enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError(detail::concat("unknown split '", s, "' (train|test)"));
}

enum class NoiseKind { symmetric, pair };

inline std::string_view to_string(NoiseKind k) { return k == NoiseKind::symmetric ? "symmetric" : "pair"; }
inline NoiseKind parse_noise_kind(std::string_view s) {
  if (s == "symmetric") return NoiseKind::symmetric;
  if (s == "pair") return NoiseKind::pair;
  throw ConfigError(detail::concat("unknown noise kind '", s, "' (symmetric|pair)"));
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::symmetric;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  bool operator==(const NoiseSpec&) const = default;
};

struct SubsetSpec {
  int per_class = 0;
  std::uint64_t seed = 0;
  bool operator==(const SubsetSpec&) const = default;
};

struct SyntheticSpec {
  int num_classes = 10;
  int per_class = 100;
  std::int64_t side = 32;
  std::uint64_t seed = 0;
  double noise = 40.0;  // pixel noise standard deviation
  bool operator==(const SyntheticSpec&) const = default;
};

/// Everything needed to rebuild a dataset from raw files and seeds.
struct Provenance {
  std::vector<std::string> sources;
  std::optional<SyntheticSpec> synthetic;
  std::optional<NoiseSpec> noise;
  std::optional<SubsetSpec> subset;
  bool operator==(const Provenance&) const = default;
};

/// Images are stored exactly as in the CIFAR binary layout: per image, the
/// red plane, then green, then blue, each row-major.
struct Dataset {
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::vector<std::uint8_t> coarse_labels;  // CIFAR-100 only
  int num_classes = 10;
  int version = 10;  // 10 or 100; 0 for synthetic data
  std::int64_t side = 32;
  Split split = Split::train;
  Provenance provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return static_cast<std::size_t>(3 * side * side); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {images.data() + i * image_bytes(), image_bytes()};
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    return counts;
  }
};

namespace cifar {

inline constexpr std::size_t kPixels = 3072;
inline std::size_t record_size(int version) { return version == 100 ? 3074 : 3073; }

inline void check_version(int version) {
  if (version != 10 && version != 100) {
    throw ConfigError(detail::concat("CIFAR version must be 10 or 100, got ", version));
  }
}

/// Standard file names inside an extracted CIFAR binary archive.
inline std::vector<std::string> standard_files(int version, Split split) {
  if (version == 100) return {split == Split::train ? "train.bin" : "test.bin"};
  if (split == Split::test) return {"test_batch.bin"};
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
          "data_batch_5.bin"};
}

inline std::size_t standard_records(int version, Split split) {
  if (version == 10) return 10000;  // per batch file
  return split == Split::train ? 50000 : 10000;
}

/// Appends the records of one file to `out`. `expected_records`, when
/// given, rejects files with more or fewer complete records.
inline void read_file(const std::filesystem::path& path, int version, Dataset& out,
                      std::optional<std::size_t> expected_records = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset file " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  const std::size_t rec = record_size(version);
  if (bytes.empty()) throw FormatError(path.string() + ": empty dataset file", 0);
  if (bytes.size() % rec != 0) {
    throw FormatError(detail::concat(path.string(), ": truncated record (file is ", bytes.size(),
                                     " bytes, records are ", rec, " bytes)"),
                      bytes.size() / rec * rec);
  }
  const std::size_t count = bytes.size() / rec;
  if (expected_records && count != *expected_records) {
    const std::size_t offset = std::min(count, *expected_records) * rec;
    throw FormatError(detail::concat(path.string(), ": expected ", *expected_records,
                                     " records, found ", count),
                      offset);
  }
  const int label_limit = version == 100 ? 100 : 10;
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* p = bytes.data() + r * rec;
    if (version == 100) {
      if (p[0] >= 20) throw FormatError(path.string() + ": coarse label out of range", r * rec);
      out.coarse_labels.push_back(p[0]);
      ++p;
    }
    if (p[0] >= label_limit) {
      throw FormatError(detail::concat(path.string(), ": label ", int(p[0]), " out of range"),
                        r * rec + (version == 100 ? 1 : 0));
    }
    out.labels.push_back(p[0]);
    out.images.insert(out.images.end(), p + 1, p + 1 + kPixels);
  }
}

}  // namespace cifar

/// Loads a CIFAR binary file, or every standard file of the split when
/// `path` is a directory (the extracted archive or its parent).
inline Dataset load_cifar(const std::filesystem::path& path, int version, Split split) {
  cifar::check_version(version);
  Dataset ds;
  ds.version = version;
  ds.num_classes = version;
  ds.split = split;
  if (!std::filesystem::exists(path)) {
    throw ConfigError("dataset path does not exist: " + path.string());
  }
  if (std::filesystem::is_directory(path)) {
    std::filesystem::path dir = path;
    const char* nested = version == 10 ? "cifar-10-batches-bin" : "cifar-100-binary";
    if (std::filesystem::is_directory(dir / nested)) dir /= nested;
    for (const auto& name : cifar::standard_files(version, split)) {
      const auto file = dir / name;
      if (!std::filesystem::exists(file)) {
        throw ConfigError("missing CIFAR file " + file.string());
      }
      cifar::read_file(file, version, ds, cifar::standard_records(version, split));
      ds.provenance.sources.push_back(file.string());
    }
  } else {
    cifar::read_file(path, version, ds);
    ds.provenance.sources.push_back(path.string());
  }
  return ds;
}

/// Writes the dataset in CIFAR binary layout. Loading a file and writing it
/// back reproduces it byte for byte.
inline void write_cifar(const Dataset& ds, const std::filesystem::path& path) {
  cifar::check_version(ds.version);
  if (ds.side != 32) throw ConfigError("CIFAR layout requires 32x32 images");
  if (ds.version == 100 && ds.coarse_labels.size() != ds.size()) {
    throw ConfigError("CIFAR-100 output needs coarse labels for every record");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.version == 100) out.put(static_cast<char>(ds.coarse_labels[i]));
    out.put(static_cast<char>(ds.labels[i]));
    const auto img = ds.image(i);
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  }
  if (!out) throw ConfigError("failed writing " + path.string());
}

/// Class-conditional 32x32 RGB images: each class is a distinct oriented
/// grating with its own colour balance, randomly shifted and noised per
/// sample. Used where CIFAR files are unavailable.
inline Dataset make_synthetic(const SyntheticSpec& spec, Split split) {
  if (spec.num_classes < 2 || spec.per_class < 1 || spec.side < 4) {
    throw ConfigError("synthetic dataset: need >= 2 classes, >= 1 sample per class, side >= 4");
  }
  Dataset ds;
  ds.version = 0;
  ds.num_classes = spec.num_classes;
  ds.side = spec.side;
  ds.split = split;
  ds.provenance.synthetic = spec;
  const std::int64_t side = spec.side;
  const std::size_t n = static_cast<std::size_t>(spec.num_classes) * spec.per_class;
  ds.images.resize(n * ds.image_bytes());
  ds.labels.resize(n);

  RngStream classes("synthetic.classes", spec.seed);
  struct Proto {
    double fx, fy;
    std::array<double, 3> gain, bias;
  };
  std::vector<Proto> protos;
  for (int c = 0; c < spec.num_classes; ++c) {
    auto rng = classes.draw();
    const double angle = rng.uniform(0.0, 3.14159265358979);
    const double freq = rng.uniform(1.0, 4.0) * 2.0 * 3.14159265358979 / double(side);
    Proto p{freq * std::cos(angle), freq * std::sin(angle), {}, {}};
    for (int ch = 0; ch < 3; ++ch) {
      p.gain[ch] = rng.uniform(30.0, 90.0);
      p.bias[ch] = rng.uniform(70.0, 180.0);
    }
    protos.push_back(p);
  }

  RngStream samples(split == Split::train ? "synthetic.train" : "synthetic.test", spec.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
    ds.labels[i] = label;
    auto rng = samples.draw();
    const Proto& p = protos[static_cast<std::size_t>(label)];
    const double phase = rng.uniform(0.0, 6.28318530717959);
    std::uint8_t* img = ds.images.data() + i * ds.image_bytes();
    for (int ch = 0; ch < 3; ++ch) {
      for (std::int64_t y = 0; y < side; ++y) {
        for (std::int64_t x = 0; x < side; ++x) {
          const double v = p.bias[ch] + p.gain[ch] * std::sin(p.fx * x + p.fy * y + phase) +
                           spec.noise * rng.normal();
          img[(ch * side + y) * side + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
  }
  return ds;
}

/// Exactly round(epsilon * N) uniformly chosen samples get a wrong label:
/// uniform over the other classes (symmetric) or i -> (i + 1) mod C (pair).
inline Dataset corrupt_labels(const Dataset& ds, const NoiseSpec& spec) {
  if (!(spec.epsilon >= 0.0 && spec.epsilon < 1.0)) {
    throw ConfigError(detail::concat("noise epsilon must be in [0, 1), got ", spec.epsilon));
  }
  if (ds.split != Split::train) throw ConfigError("label noise applies to the train split only");
  Dataset out = ds;
  out.provenance.noise = spec;
  const std::size_t n = ds.size();
  const auto flips = static_cast<std::size_t>(std::floor(spec.epsilon * double(n) + 0.5));
  auto rng = RngStream("noise", spec.seed).draw();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  // Partial Fisher-Yates: the first `flips` entries are a uniform sample.
  for (std::size_t i = 0; i < flips; ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(order[i], order[j]);
  }
  const int classes = ds.num_classes;
  for (std::size_t i = 0; i < flips; ++i) {
    int& label = out.labels[order[i]];
    if (spec.kind == NoiseKind::pair) {
      label = (label + 1) % classes;
    } else {
      const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes - 1)));
      label = r >= label ? r + 1 : r;
    }
  }
  return out;
}

/// Exactly k samples per class, drawn uniformly without replacement; the
/// result keeps the original relative order.
inline Dataset subset_per_class(const Dataset& ds, const SubsetSpec& spec) {
  const auto counts = ds.class_counts();
  const auto smallest = *std::min_element(counts.begin(), counts.end());
  if (spec.per_class < 1 || static_cast<std::size_t>(spec.per_class) > smallest) {
    throw ConfigError(detail::concat("subset: ", spec.per_class,
                                     " samples per class requested, smallest class has ",
                                     smallest));
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  }
  RngStream stream("subset", spec.seed);
  std::vector<std::size_t> keep;
  for (auto& members : by_class) {
    auto rng = stream.draw();
    rng.shuffle(members.begin(), members.end());
    keep.insert(keep.end(), members.begin(), members.begin() + spec.per_class);
  }
  std::sort(keep.begin(), keep.end());

  Dataset out;
  out.num_classes = ds.num_classes;
  out.version = ds.version;
  out.side = ds.side;
  out.split = ds.split;
  out.provenance = ds.provenance;
  out.provenance.subset = spec;
  for (auto i : keep) {
    out.labels.push_back(ds.labels[i]);
    if (!ds.coarse_labels.empty()) out.coarse_labels.push_back(ds.coarse_labels[i]);
    const auto img = ds.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
  }
  return out;
}

/// Per-channel normalisation constants.
struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.25f, 0.25f, 0.25f};

  static Normalization for_version(int version) {
    if (version == 100) return {{0.5071f, 0.4866f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}};
    return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  }
};

/// Crop of the zero-padded image (pad 4 on each side) at offset
/// (offset_x, offset_y) in [0, 8]; offset (4, 4) is the identity.
inline std::vector<std::uint8_t> pad_crop(std::span<const std::uint8_t> image, std::int64_t side,
                                          std::int64_t offset_x, std::int64_t offset_y,
                                          std::int64_t pad = 4) {
  std::vector<std::uint8_t> out(image.size(), 0);
  for (std::int64_t ch = 0; ch < 3; ++ch)
    for (std::int64_t y = 0; y < side; ++y) {
      const std::int64_t sy = y + offset_y - pad;
      if (sy < 0 || sy >= side) continue;
      for (std::int64_t x = 0; x < side; ++x) {
        const std::int64_t sx = x + offset_x - pad;
        if (sx < 0 || sx >= side) continue;
        out[static_cast<std::size_t>((ch * side + y) * side + x)] =
            image[static_cast<std::size_t>((ch * side + sy) * side + sx)];
      }
    }
  return out;
}

inline std::vector<std::uint8_t> hflip(std::span<const std::uint8_t> image, std::int64_t side) {
  std::vector<std::uint8_t> out(image.size());
  for (std::int64_t row = 0; row < 3 * side; ++row)
    for (std::int64_t x = 0; x < side; ++x)
      out[static_cast<std::size_t>(row * side + x)] =
          image[static_cast<std::size_t>(row * side + side - 1 - x)];
  return out;
}

struct MixupState {
  std::vector<std::size_t> permutation;
  std::vector<int> permuted_labels;
  double coefficient = 1.0;
};

struct LabeledBatch {
  Tensor images;
  std::vector<int> labels;
  std::optional<MixupState> mixup;

  std::size_t size() const { return labels.size(); }

  /// Soft targets: one-hot rows, or the mixup blend of two one-hot rows.
  Tensor targets(int num_classes) const {
    Tensor t = one_hot<float>(labels, num_classes);
    if (!mixup) return t;
    const Tensor other = one_hot<float>(mixup->permuted_labels, num_classes);
    const auto m = static_cast<float>(mixup->coefficient);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = m * t[i] + (1.0f - m) * other[i];
    return t;
  }
};

/// Assembles a normalised batch. With `augment_rng`, every image gets a
/// random pad-and-crop (offset uniform in [0, 8]^2) and a horizontal flip
/// with probability 1/2, drawn in that order.
inline LabeledBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                               const Normalization& norm, CounterRng* augment_rng = nullptr) {
  if (indices.empty()) throw ConfigError("batch must contain at least one sample");
  const std::int64_t side = ds.side;
  LabeledBatch batch;
  batch.images = Tensor(Shape{static_cast<std::int64_t>(indices.size()), 3, side, side});
  const std::int64_t plane = side * side;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::vector<std::uint8_t> img(ds.image(indices[b]).begin(), ds.image(indices[b]).end());
    if (augment_rng) {
      const auto ox = static_cast<std::int64_t>(augment_rng->below(9));
      const auto oy = static_cast<std::int64_t>(augment_rng->below(9));
      img = pad_crop(img, side, ox, oy);
      if (augment_rng->uniform() < 0.5) img = hflip(img, side);
    }
    float* dst = batch.images.raw() + static_cast<std::int64_t>(b) * 3 * plane;
    for (std::int64_t ch = 0; ch < 3; ++ch) {
      for (std::int64_t i = 0; i < plane; ++i) {
        dst[ch * plane + i] =
            (static_cast<float>(img[static_cast<std::size_t>(ch * plane + i)]) / 255.0f -
             norm.mean[ch]) /
            norm.stddev[ch];
      }
    }
    batch.labels.push_back(ds.labels[indices[b]]);
  }
  return batch;
}

/// x <- m * x + (1 - m) * x[perm].
inline LabeledBatch apply_mixup(LabeledBatch batch, double coefficient,
                                std::vector<std::size_t> permutation) {
  const std::int64_t per_image = batch.images.numel() / static_cast<std::int64_t>(batch.size());
  const Tensor original = batch.images;
  const auto m = static_cast<float>(coefficient);
  MixupState state;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t j = permutation[i];
    float* dst = batch.images.raw() + static_cast<std::int64_t>(i) * per_image;
    const float* a = original.raw() + static_cast<std::int64_t>(i) * per_image;
    const float* b = original.raw() + static_cast<std::int64_t>(j) * per_image;
    for (std::int64_t k = 0; k < per_image; ++k) dst[k] = m * a[k] + (1.0f - m) * b[k];
    state.permuted_labels.push_back(batch.labels[j]);
  }
  state.permutation = std::move(permutation);
  state.coefficient = coefficient;
  batch.mixup = std::move(state);
  return batch;
}

/// Mixup with coefficient ~ Beta(alpha, alpha) and a uniform permutation.
inline LabeledBatch mixup(LabeledBatch batch, double alpha, CounterRng& rng) {
  if (!(alpha > 0.0)) throw ConfigError("mixup alpha must be positive");
  const double m = rng.beta(alpha, alpha);
  std::vector<std::size_t> perm(batch.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm.begin(), perm.end());
  return apply_mixup(std::move(batch), m, std::move(perm));
}

}  // namespace featmine
