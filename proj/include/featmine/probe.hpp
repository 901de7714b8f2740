#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "featmine/data.hpp"
#include "featmine/fm_strategy.hpp"
#include "featmine/trainer.hpp"

namespace featmine {

struct ActivationStats {
  std::string layer_id;
  double threshold = 0.5;
  double count_per_sample = 0.0;
  int sample_count = 0;
};

/// Number of entries strictly greater than `threshold`.
inline std::int64_t count_above(std::span<const float> values, double threshold) {
  std::int64_t n = 0;
  for (float v : values) n += static_cast<double>(v) > threshold;
  return n;
}

/// Draws `sample_count` distinct images and reports, for each requested
/// stage output, the mean per-image number of activations above threshold.
inline std::vector<ActivationStats> activation_counts(Model& model, const Dataset& ds,
                                                      const std::vector<std::string>& layer_ids,
                                                      double threshold = 0.5,
                                                      int sample_count = 64,
                                                      std::uint64_t seed = 0) {
  std::vector<std::size_t> stages;
  for (const auto& id : layer_ids) stages.push_back(stage_index(id));
  if (sample_count < 1 || static_cast<std::size_t>(sample_count) > ds.size()) {
    throw ConfigError(detail::concat("probe: sample_count ", sample_count, " not in [1, ",
                                     ds.size(), "]"));
  }
  auto rng = RngStream("probe", seed).draw();
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < static_cast<std::size_t>(sample_count); ++i) {
    std::swap(order[i], order[i + rng.below(order.size() - i)]);
  }

  std::vector<std::int64_t> totals(stages.size(), 0);
  const auto norm = Normalization::for_version(ds.version);
  const Mode previous = model.mode();
  model.eval();
  {
    NoGradGuard guard;
    for (int i = 0; i < sample_count; ++i) {
      const std::size_t idx[1] = {order[static_cast<std::size_t>(i)]};
      const auto batch = make_batch(ds, idx, norm);
      const auto outs = model.forward_stages(Var<float>(batch.images));
      for (std::size_t s = 0; s < stages.size(); ++s) {
        totals[s] += count_above(outs[stages[s]].tensor.value().data(), threshold);
      }
    }
  }
  if (previous == Mode::train) model.train();

  std::vector<ActivationStats> out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    out.push_back({layer_ids[s], threshold, double(totals[s]) / double(sample_count), sample_count});
  }
  return out;
}

struct CamMap {
  int class_id = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> heat;  // row-major, in [0, 1]
  double at(std::int64_t row, std::int64_t col) const {
    return heat[static_cast<std::size_t>(row * width + col)];
  }
};

/// heat = sum_k w[class, k] * F_k over one image's last-stage features
/// (1, C, H, W), negatives clipped, then min-max scaled. A flat map is
/// returned as all zeros.
inline CamMap cam_from_features(const Tensor& features, const Tensor& fc_weight, int class_id) {
  const Shape s = features.shape();
  if (s.n != 1) throw InputError("cam: expected features of a single image");
  if (class_id < 0 || class_id >= fc_weight.shape().n) {
    throw InputError(detail::concat("cam: class_id ", class_id, " out of range [0, ",
                                    fc_weight.shape().n, ")"));
  }
  if (fc_weight.shape().c != s.c) throw InputError("cam: weight width does not match channels");
  CamMap cam{class_id, s.h, s.w, std::vector<double>(static_cast<std::size_t>(s.h * s.w), 0.0)};
  for (std::int64_t k = 0; k < s.c; ++k) {
    const double w = fc_weight.at(class_id, k, 0, 0);
    for (std::int64_t i = 0; i < s.h * s.w; ++i) {
      cam.heat[static_cast<std::size_t>(i)] += w * features[k * s.h * s.w + i];
    }
  }
  for (auto& v : cam.heat) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(cam.heat.begin(), cam.heat.end());
  const double min = *lo, range = *hi - *lo;
  for (auto& v : cam.heat) v = range > 0.0 ? (v - min) / range : 0.0;
  return cam;
}

/// CAM of the main classifier for one normalised image (1, 3, S, S).
inline CamMap compute_cam(Model& model, const Tensor& image, int class_id) {
  const Mode previous = model.mode();
  model.eval();
  NoGradGuard guard;
  Tensor features;
  try {
    features = model.forward_stages(Var<float>(image)).back().tensor.value();
  } catch (...) {
    if (previous == Mode::train) model.train();
    throw;
  }
  if (previous == Mode::train) model.train();
  return cam_from_features(features, model.fc_weight().value(), class_id);
}

namespace detail {

inline std::array<std::uint8_t, 3> heat_color(double v) {
  // Blue -> cyan -> yellow -> red.
  const double r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  const double g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  const double b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255 * r)),
          static_cast<std::uint8_t>(std::lround(255 * g)),
          static_cast<std::uint8_t>(std::lround(255 * b))};
}

inline void write_ppm_pixels(const std::string& path, std::int64_t width, std::int64_t height,
                             const std::vector<std::uint8_t>& rgb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

}  // namespace detail

/// Colour-mapped heat map, each cell enlarged to `scale` x `scale` pixels.
inline void write_cam_ppm(const CamMap& cam, const std::string& path, int scale = 4) {
  const std::int64_t w = cam.width * scale, h = cam.height * scale;
  std::vector<std::uint8_t> rgb;
  rgb.reserve(static_cast<std::size_t>(w * h * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto c = detail::heat_color(cam.at(y / scale, x / scale));
      rgb.insert(rgb.end(), c.begin(), c.end());
    }
  detail::write_ppm_pixels(path, w, h, rgb);
}

/// Image (CIFAR planar bytes) blended half-and-half with the nearest-cell
/// upsampled heat map.
inline void write_cam_overlay_ppm(std::span<const std::uint8_t> image, std::int64_t side,
                                  const CamMap& cam, const std::string& path) {
  std::vector<std::uint8_t> rgb;
  rgb.reserve(static_cast<std::size_t>(side * side * 3));
  for (std::int64_t y = 0; y < side; ++y)
    for (std::int64_t x = 0; x < side; ++x) {
      const auto c = detail::heat_color(cam.at(y * cam.height / side, x * cam.width / side));
      for (int ch = 0; ch < 3; ++ch) {
        const double px = image[static_cast<std::size_t>((ch * side + y) * side + x)];
        rgb.push_back(static_cast<std::uint8_t>(std::lround(0.5 * px + 0.5 * c[ch])));
      }
    }
  detail::write_ppm_pixels(path, side, side, rgb);
}

/// Named constant masks for the fixed-mask observation runs:
/// all_ones, left_half, right_half, top_half, bottom_half,
/// top_left, top_right, bottom_left, bottom_right (quadrants).
inline BinaryMask named_fixed_mask(const std::string& name, std::int64_t height,
                                   std::int64_t width) {
  BinaryMask m = BinaryMask::spatial(MaskKind::box, height, width);
  const std::int64_t hh = height / 2, hw = width / 2;
  auto set = [&](std::int64_t r0, std::int64_t r1, std::int64_t c0, std::int64_t c1) {
    for (std::int64_t i = r0; i < r1; ++i)
      for (std::int64_t j = c0; j < c1; ++j) m(i, j) = 1;
  };
  if (name == "all_ones") set(0, height, 0, width);
  else if (name == "left_half") set(0, height, 0, hw);
  else if (name == "right_half") set(0, height, hw, width);
  else if (name == "top_half") set(0, hh, 0, width);
  else if (name == "bottom_half") set(hh, height, 0, width);
  else if (name == "top_left") set(0, hh, 0, hw);
  else if (name == "top_right") set(0, hh, hw, width);
  else if (name == "bottom_left") set(hh, height, 0, hw);
  else if (name == "bottom_right") set(hh, height, hw, width);
  else throw ConfigError("unknown fixed mask '" + name + "'");
  return m;
}

struct FixedMaskResult {
  TrainResult training;
  std::vector<CamMap> cams;
  std::vector<std::size_t> cam_indices;  // into the evaluation dataset
};

/// Trains without auxiliary heads while a constant mask multiplies the last
/// stage on the main path, then computes CAMs of the first `cam_images` test
/// images for their true class.
inline FixedMaskResult fixed_mask_training_experiment(Model& model, const BinaryMask& mask,
                                                      const Dataset& train_set,
                                                      const Dataset& test_set,
                                                      const Schedule& schedule,
                                                      const SeedBundle& seeds,
                                                      int cam_images = 4, bool augment = true) {
  const std::size_t last = stage_names().size() - 1;
  if (mask.height != model.stage_size(last) || mask.width != model.stage_size(last)) {
    throw ConfigError(detail::concat("fixed mask is ", mask.height, "x", mask.width,
                                     ", last stage is ", model.stage_size(last), "x",
                                     model.stage_size(last)));
  }
  FeatureMining<float> no_fm;
  TrainOptions options;
  options.augment = augment;
  options.fixed_main_mask = mask;
  FixedMaskResult result;
  result.training = train(model, no_fm, train_set, &test_set, schedule, seeds, options);

  const auto norm = Normalization::for_version(test_set.version);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cam_images), test_set.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx[1] = {i};
    const auto batch = make_batch(test_set, idx, norm);
    result.cams.push_back(compute_cam(model, batch.images, test_set.labels[i]));
    result.cam_indices.push_back(i);
  }
  return result;
}

}  // namespace featmine
