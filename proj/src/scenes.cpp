#include "detgan/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "detgan/bytes.hpp"
#include "detgan/errors.hpp"
#include "detgan/rng.hpp"

namespace detgan {

void SceneConfig::validate() const {
  if (image_side < 8 || image_side > 65535) throw ContractError("scene.image_side out of range");
  if (!(object_size_min > 0) || object_size_max < object_size_min ||
      !(object_size_max < image_side / 2.0)) {
    throw ContractError("scene object size range must lie in (0, image_side/2)");
  }
  if (background_grid < 2) throw ContractError("scene.background_grid must be >= 2");
  if (object_intensity_max < object_intensity_min) throw ContractError("scene intensity range inverted");
  if (insertion_shift < 0) throw ContractError("scene.insertion_shift must be >= 0");
  if (train_labelled < 1 || train_clean < 1 || val_labelled < 1 || test_labelled < 1) {
    throw ContractError("scene split counts must be >= 1");
  }
}

namespace {

std::vector<double> background(const SceneConfig& cfg, Rng& rng) {
  const int side = cfg.image_side;
  const int g = cfg.background_grid;
  std::vector<double> ctrl(static_cast<std::size_t>(g * g));
  for (auto& v : ctrl) v = rng.uniform(-1.0, 1.0);
  std::vector<double> px(static_cast<std::size_t>(side * side));
  for (int y = 0; y < side; ++y) {
    const double fy = (y + 0.5) / side * (g - 1);
    const int y0 = std::min(static_cast<int>(fy), g - 2);
    const double ty = fy - y0;
    for (int x = 0; x < side; ++x) {
      const double fx = (x + 0.5) / side * (g - 1);
      const int x0 = std::min(static_cast<int>(fx), g - 2);
      const double tx = fx - x0;
      auto c = [&](int yy, int xx) { return ctrl[static_cast<std::size_t>(yy * g + xx)]; };
      const double smooth = (1 - ty) * ((1 - tx) * c(y0, x0) + tx * c(y0, x0 + 1)) +
                            ty * ((1 - tx) * c(y0 + 1, x0) + tx * c(y0 + 1, x0 + 1));
      px[static_cast<std::size_t>(y * side + x)] = cfg.background_level +
                                                   cfg.background_amplitude * smooth +
                                                   cfg.texture_amplitude * rng.normal();
    }
  }
  return px;
}

Tensor image_tensor(int side, std::vector<double> px) {
  for (auto& v : px) v = std::clamp(v, -1.0, 1.0);
  const auto s = static_cast<std::size_t>(side);
  return Tensor::from_data({1, s, s}, std::move(px));
}

double mean_l1(const Tensor& a, const Tensor& b) {
  const auto da = a.data();
  const auto db = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) s += std::abs(da[i] - db[i]);
  return s / static_cast<double>(da.size());
}

}  // namespace

Tensor box_mask(const Box& box, int side) {
  const PixelRect r = to_pixel_rect(box);
  const auto s = static_cast<std::size_t>(side);
  std::vector<double> m(s * s, 0.0);
  for (int y = std::max(0, r.y0); y < std::min(side, r.y1); ++y)
    for (int x = std::max(0, r.x0); x < std::min(side, r.x1); ++x) m[static_cast<std::size_t>(y * side + x)] = 1.0;
  return Tensor::from_data({1, s, s}, std::move(m));
}

SceneSample make_clean(const SceneConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  SceneSample s;
  s.image = image_tensor(cfg.image_side, background(cfg, rng));
  s.domain = Domain::Clean;
  const auto side = static_cast<std::size_t>(cfg.image_side);
  s.mask = Tensor::zeros({1, side, side});
  return s;
}

SceneSample make_labelled(const SceneConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const int side = cfg.image_side;
  for (;;) {
    std::vector<double> px = background(cfg, rng);
    const double ra = 0.5 * rng.uniform(cfg.object_size_min, cfg.object_size_max);
    const double rb = 0.5 * rng.uniform(cfg.object_size_min, cfg.object_size_max);
    const double angle = rng.uniform(0.0, 3.141592653589793);
    const double intensity = rng.uniform(cfg.object_intensity_min, cfg.object_intensity_max);
    const double reach = std::max(ra, rb) + 2.0;
    const double cx = rng.uniform(reach, side - reach);
    const double cy = rng.uniform(reach, side - reach);
    const double ca = std::cos(angle), sa = std::sin(angle);

    int x_lo = side, y_lo = side, x_hi = -1, y_hi = -1;
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (ca * dx + sa * dy) / ra;
        const double v = (-sa * dx + ca * dy) / rb;
        const double r = std::sqrt(u * u + v * v);
        const double profile = 1.0 / (1.0 + std::exp((r - 1.0) / cfg.edge_softness));
        if (profile < 0.1) continue;
        px[static_cast<std::size_t>(y * side + x)] += intensity * profile;
        x_lo = std::min(x_lo, x);
        y_lo = std::min(y_lo, y);
        x_hi = std::max(x_hi, x);
        y_hi = std::max(y_hi, y);
      }
    }
    if (x_hi < 0) continue;
    // Tight pixel cover dilated by one pixel on every side.
    const Box box{static_cast<double>(x_lo - 1), static_cast<double>(y_lo - 1),
                  static_cast<double>(x_hi + 2), static_cast<double>(y_hi + 2)};
    if (box.x_min < 1 || box.y_min < 1 || box.x_max > side - 1 || box.y_max > side - 1) continue;

    Tensor image = image_tensor(side, std::move(px));
    const auto d = image.data();
    double inside = 0, outside = 0;
    int n_in = 0, n_out = 0;
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const bool in = x >= box.x_min && x < box.x_max && y >= box.y_min && y < box.y_max;
        (in ? inside : outside) += d[static_cast<std::size_t>(y * side + x)];
        ++(in ? n_in : n_out);
      }
    }
    if (inside / n_in - outside / n_out < cfg.min_contrast) continue;

    SceneSample s;
    s.image = std::move(image);
    s.domain = Domain::Labelled;
    s.boxes = {box};
    s.mask = box_mask(box, side);
    return s;
  }
}

Insertion sample_insertion(const SceneSample& clean, const std::vector<SceneSample>& pool,
                           std::uint64_t seed, int shift) {
  if (pool.empty()) throw ContractError("sample_insertion: empty labelled pool");
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].boxes.empty()) throw ContractError("sample_insertion: pool image without a box");
    const double d = mean_l1(clean.image, pool[i].image);
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  const int side = static_cast<int>(clean.image.dim(2));
  const Box ref = pool[best].boxes.front();
  Rng rng(seed);
  const int sx = shift > 0 ? rng.uniform_int(-shift, shift) : 0;
  const int sy = shift > 0 ? rng.uniform_int(-shift, shift) : 0;
  // Clamp the shift so the box keeps a one-pixel margin.
  const double dx = std::clamp(static_cast<double>(sx), 1.0 - ref.x_min, side - 1.0 - ref.x_max);
  const double dy = std::clamp(static_cast<double>(sy), 1.0 - ref.y_min, side - 1.0 - ref.y_max);
  const Box box{ref.x_min + dx, ref.y_min + dy, ref.x_max + dx, ref.y_max + dy};
  return {box_mask(box, side), box, best};
}

Dataset make_dataset(const SceneConfig& cfg) {
  cfg.validate();
  // Each split draws from its own seed stream; sample i uses a seed derived
  // from (split, i) only.
  auto seed_for = [&cfg](std::uint64_t split, std::uint64_t i) {
    return Rng::mix(Rng::mix(cfg.seed * 0x100000001b3ULL + split) + i);
  };
  Dataset d;
  for (int i = 0; i < cfg.train_labelled; ++i) d.train_labelled.push_back(make_labelled(cfg, seed_for(1, i)));
  for (int i = 0; i < cfg.train_clean; ++i) d.train_clean.push_back(make_clean(cfg, seed_for(2, i)));
  for (int i = 0; i < cfg.val_labelled; ++i) d.val.push_back(make_labelled(cfg, seed_for(3, i)));
  for (int i = 0; i < cfg.test_labelled; ++i) d.test.push_back(make_labelled(cfg, seed_for(4, i)));
  return d;
}

std::string encode_samples(const std::vector<SceneSample>& samples) {
  ByteWriter w;
  w.raw("DGN1");
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    const std::size_t side = s.image.dim(2);
    if (s.image.shape() != Shape{1, side, side} || s.mask.shape() != s.image.shape()) {
      throw DimensionError("dataset samples must be 1 x side x side with a matching mask");
    }
    w.u8(static_cast<std::uint8_t>(s.domain));
    w.u16(static_cast<std::uint16_t>(side));
    for (double v : s.image.data()) w.f64(v);
    w.u16(static_cast<std::uint16_t>(s.boxes.size()));
    for (const auto& b : s.boxes) {
      w.f64(b.x_min);
      w.f64(b.y_min);
      w.f64(b.x_max);
      w.f64(b.y_max);
    }
    for (double v : s.mask.data()) w.f64(v);
  }
  return w.take();
}

std::vector<SceneSample> decode_samples(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != "DGN1") r.fail_at("bad dataset magic (expected DGN1)", 0);
  const auto count = r.u32();
  std::vector<SceneSample> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    SceneSample s;
    const auto domain = r.u8();
    if (domain > 1) r.fail("unknown domain tag " + std::to_string(domain));
    s.domain = static_cast<Domain>(domain);
    const std::size_t side = r.u16();
    if (side == 0) r.fail("zero image side");
    std::vector<double> px(side * side);
    for (auto& v : px) v = r.f64();
    const auto n_boxes = r.u16();
    for (std::uint16_t b = 0; b < n_boxes; ++b) {
      Box box;
      box.x_min = r.f64();
      box.y_min = r.f64();
      box.x_max = r.f64();
      box.y_max = r.f64();
      s.boxes.push_back(box);
    }
    if ((s.domain == Domain::Clean) != s.boxes.empty()) r.fail("domain tag disagrees with box count");
    std::vector<double> mask(side * side);
    for (auto& v : mask) v = r.f64();
    try {
      s.image = Tensor::from_data({1, side, side}, std::move(px));
      s.mask = Tensor::from_data({1, side, side}, std::move(mask));
    } catch (const NumericError&) {
      r.fail("non-finite pixel value");
    }
    out.push_back(std::move(s));
  }
  if (!r.at_end()) r.fail("trailing bytes after last sample");
  return out;
}

void write_samples(const std::string& path, const std::vector<SceneSample>& samples) {
  write_file_bytes(path, encode_samples(samples));
}

std::vector<SceneSample> read_samples(const std::string& path) {
  return decode_samples(read_file_bytes(path));
}

}  // namespace detgan
