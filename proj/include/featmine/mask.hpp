#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "featmine/rng.hpp"
#include "featmine/tensor.hpp"

namespace featmine {

/// Box drawn for a segmentation mask. (r_x, r_y) is the box centre in
/// feature-map cell units; r_w and r_h are its full extents before clipping.
struct BoxCoords {
  double r_x = 0.0;
  double r_y = 0.0;
  double r_w = 0.0;
  double r_h = 0.0;
  double lambda = 0.0;

  /// Area ratio r_w * r_h / (W * H) of the unclipped box.
  double area_ratio(std::int64_t width, std::int64_t height) const {
    return (r_w * r_h) / (static_cast<double>(width) * static_cast<double>(height));
  }
};

/// Box extents for a given lambda: both sides scale with sqrt(1 - lambda) so
/// the unclipped box covers a 1 - lambda fraction of the map.
inline BoxCoords box_for_lambda(std::int64_t width, std::int64_t height, double lambda,
                                double center_x, double center_y) {
  const double side = std::sqrt(1.0 - lambda);
  return {center_x, center_y, static_cast<double>(width) * side,
          static_cast<double>(height) * side, lambda};
}

/// lambda ~ U(0,1), r_x ~ U(0,W), r_y ~ U(0,H), drawn in that order.
inline BoxCoords sample_box(std::int64_t width, std::int64_t height, CounterRng& rng) {
  if (width < 1 || height < 1) {
    throw ConfigError(detail::concat("sample_box: invalid extent ", width, "x", height));
  }
  const double lambda = rng.uniform();
  const double cx = rng.uniform(0.0, static_cast<double>(width));
  const double cy = rng.uniform(0.0, static_cast<double>(height));
  return box_for_lambda(width, height, lambda, cx, cy);
}

inline BoxCoords sample_box(std::int64_t width, std::int64_t height, RngStream& stream) {
  auto rng = stream.draw();
  return sample_box(width, height, rng);
}

enum class MaskKind { box, point, channel };
enum class Pairing { complementary, non_complementary };

inline std::string_view to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::box: return "box";
    case MaskKind::point: return "point";
    case MaskKind::channel: return "channel";
  }
  return "box";
}

inline std::string_view to_string(Pairing pairing) {
  return pairing == Pairing::complementary ? "complementary" : "non_complementary";
}

inline MaskKind parse_mask_kind(std::string_view s) {
  if (s == "box") return MaskKind::box;
  if (s == "point") return MaskKind::point;
  if (s == "channel") return MaskKind::channel;
  throw ConfigError(detail::concat("unknown mask variant '", s, "' (box|point|channel)"));
}

inline Pairing parse_pairing(std::string_view s) {
  if (s == "complementary") return Pairing::complementary;
  if (s == "non_complementary" || s == "non-complementary") return Pairing::non_complementary;
  throw ConfigError(
      detail::concat("unknown pairing '", s, "' (complementary|non_complementary)"));
}

/// 0/1 mask over either the spatial grid (box, point) or the channels.
struct BinaryMask {
  MaskKind kind = MaskKind::box;
  std::int64_t height = 0;    // spatial kinds
  std::int64_t width = 0;     // spatial kinds
  std::int64_t channels = 0;  // channel kind
  std::vector<std::uint8_t> bits;
  std::optional<BoxCoords> coords;
  std::optional<DrawRecord> seed_draw;

  static BinaryMask spatial(MaskKind kind, std::int64_t height, std::int64_t width,
                            std::uint8_t fill = 0) {
    BinaryMask m;
    m.kind = kind;
    m.height = height;
    m.width = width;
    m.bits.assign(static_cast<std::size_t>(height * width), fill);
    return m;
  }
  static BinaryMask channel_mask(std::int64_t channels, std::uint8_t fill = 0) {
    BinaryMask m;
    m.kind = MaskKind::channel;
    m.channels = channels;
    m.bits.assign(static_cast<std::size_t>(channels), fill);
    return m;
  }

  bool is_spatial() const { return kind != MaskKind::channel; }

  std::uint8_t operator()(std::int64_t row, std::int64_t col) const {
    return bits[static_cast<std::size_t>(row * width + col)];
  }
  std::uint8_t& operator()(std::int64_t row, std::int64_t col) {
    return bits[static_cast<std::size_t>(row * width + col)];
  }

  std::int64_t count_ones() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  /// Broadcastable factor: (1, 1, H, W) for spatial kinds, (1, C, 1, 1) for
  /// channel masks.
  template <typename T = float>
  BasicTensor<T> to_tensor() const {
    BasicTensor<T> out(is_spatial() ? Shape{1, 1, height, width} : Shape{1, channels, 1, 1});
    for (std::size_t i = 0; i < bits.size(); ++i) out[static_cast<std::int64_t>(i)] = T(bits[i]);
    return out;
  }

  /// Same support, regardless of provenance.
  bool same_bits(const BinaryMask& other) const {
    return kind == other.kind && height == other.height && width == other.width &&
           channels == other.channels && bits == other.bits;
  }
};

namespace detail {

// Round half up, then clamp to [0, limit].
inline std::int64_t edge_cell(double x, std::int64_t limit) {
  const auto r = static_cast<std::int64_t>(std::floor(x + 0.5));
  return std::clamp<std::int64_t>(r, 0, limit);
}

}  // namespace detail

/// Rows [round(r_y - r_h/2), round(r_y + r_h/2)) and the same for columns
/// are set, clipped to the grid.
inline BinaryMask rasterize_box(const BoxCoords& coords, std::int64_t width,
                                std::int64_t height) {
  BinaryMask m = BinaryMask::spatial(MaskKind::box, height, width);
  const auto y0 = detail::edge_cell(coords.r_y - coords.r_h / 2.0, height);
  const auto y1 = detail::edge_cell(coords.r_y + coords.r_h / 2.0, height);
  const auto x0 = detail::edge_cell(coords.r_x - coords.r_w / 2.0, width);
  const auto x1 = detail::edge_cell(coords.r_x + coords.r_w / 2.0, width);
  for (std::int64_t i = y0; i < y1; ++i)
    for (std::int64_t j = x0; j < x1; ++j) m(i, j) = 1;
  m.coords = coords;
  return m;
}

inline BinaryMask complement(const BinaryMask& mask) {
  BinaryMask out = mask;
  for (auto& b : out.bits) b = static_cast<std::uint8_t>(1 - b);
  return out;
}

inline BinaryMask sample_box_mask(std::int64_t width, std::int64_t height, RngStream& stream) {
  DrawRecord record;
  auto rng = stream.draw(record);
  BinaryMask m = rasterize_box(sample_box(width, height, rng), width, height);
  m.seed_draw = record;
  return m;
}

/// Each cell kept independently with probability keep_prob.
inline BinaryMask sample_point_mask(std::int64_t width, std::int64_t height, double keep_prob,
                                    CounterRng& rng) {
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
    throw ConfigError(detail::concat("sample_point_mask: keep_prob ", keep_prob,
                                     " outside [0, 1]"));
  }
  BinaryMask m = BinaryMask::spatial(MaskKind::point, height, width);
  for (auto& b : m.bits) b = rng.uniform() < keep_prob ? 1 : 0;
  return m;
}

/// Point mask whose keep probability is 1 - lambda, lambda ~ U(0,1).
inline BinaryMask sample_point_mask(std::int64_t width, std::int64_t height, RngStream& stream) {
  DrawRecord record;
  auto rng = stream.draw(record);
  const double lambda = rng.uniform();
  BinaryMask m = sample_point_mask(width, height, 1.0 - lambda, rng);
  m.seed_draw = record;
  return m;
}

/// Uniformly random subset of round(C * (1 - lambda)) channels.
inline BinaryMask channel_mask_for_lambda(std::int64_t channels, double lambda, CounterRng& rng) {
  if (channels < 2) throw ConfigError("sample_channel_mask: need at least two channels");
  BinaryMask m = BinaryMask::channel_mask(channels);
  const auto keep = static_cast<std::int64_t>(
      std::floor(static_cast<double>(channels) * (1.0 - lambda) + 0.5));
  std::vector<std::int64_t> order(static_cast<std::size_t>(channels));
  for (std::int64_t i = 0; i < channels; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order.begin(), order.end());
  for (std::int64_t i = 0; i < keep; ++i) m.bits[static_cast<std::size_t>(order[i])] = 1;
  return m;
}

inline BinaryMask sample_channel_mask(std::int64_t channels, RngStream& stream) {
  DrawRecord record;
  auto rng = stream.draw(record);
  const double lambda = rng.uniform();
  BinaryMask m = channel_mask_for_lambda(channels, lambda, rng);
  m.seed_draw = record;
  return m;
}

/// One mask of the given kind for a (C, H, W) feature map.
inline BinaryMask sample_mask(MaskKind kind, std::int64_t channels, std::int64_t height,
                              std::int64_t width, RngStream& stream) {
  switch (kind) {
    case MaskKind::box: return sample_box_mask(width, height, stream);
    case MaskKind::point: return sample_point_mask(width, height, stream);
    case MaskKind::channel: return sample_channel_mask(channels, stream);
  }
  throw ConfigError("unknown mask kind");
}

/// Complementary pairs come from one draw as (M, 1 - M); non-complementary
/// pairs are two consecutive independent draws.
inline std::pair<BinaryMask, BinaryMask> sample_pair(MaskKind kind, Pairing pairing,
                                                     std::int64_t channels, std::int64_t height,
                                                     std::int64_t width, RngStream& stream) {
  BinaryMask first = sample_mask(kind, channels, height, width, stream);
  if (pairing == Pairing::complementary) {
    BinaryMask second = complement(first);
    return {std::move(first), std::move(second)};
  }
  BinaryMask second = sample_mask(kind, channels, height, width, stream);
  return {std::move(first), std::move(second)};
}

/// Box-variant pair on a W x H grid.
inline std::pair<BinaryMask, BinaryMask> sample_pair(std::int64_t width, std::int64_t height,
                                                     Pairing pairing, RngStream& stream) {
  return sample_pair(MaskKind::box, pairing, 1, height, width, stream);
}

/// Binary PGM (P5), 255 where the mask is set. Channel masks are written as
/// a 1 x C strip.
inline void write_pgm(const BinaryMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  const std::int64_t w = mask.is_spatial() ? mask.width : mask.channels;
  const std::int64_t h = mask.is_spatial() ? mask.height : 1;
  out << "P5\n" << w << ' ' << h << "\n255\n";
  for (auto b : mask.bits) out.put(static_cast<char>(b ? 255 : 0));
}

}  // namespace featmine
