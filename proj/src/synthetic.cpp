#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <set>

#include "lrdg/dataset.hpp"
#include "lrdg/random.hpp"

namespace lrdg {
namespace {

struct Point {
  double x;
  double y;
};

constexpr std::array<const char*, kNumGlyphs> kGlyphNames = {"circle", "triangle", "square",
                                                             "cross", "star"};

// Background offsets for the tint cue, one RGB direction per parameter.
constexpr std::array<std::array<double, 3>, kNumGlyphs> kTintPalette = {{
    {1.0, -0.5, -0.5},
    {-0.5, 1.0, -0.5},
    {-0.5, -0.5, 1.0},
    {0.7, 0.7, -1.0},
    {-1.0, 0.7, 0.7},
}};

// Stripe frequencies in cycles per image width.
constexpr std::array<double, kNumGlyphs> kStripeCycles = {2.0, 3.5, 5.5, 8.0, 11.0};

// Frame dash half-periods in pixels (at 32 px).
constexpr std::array<int, kNumGlyphs> kFramePeriods = {1, 2, 3, 4, 6};

constexpr std::array<std::array<const char*, 5>, kNumGlyphs> kWatermarks = {{
    {"10001", "01010", "00100", "01010", "10001"},
    {"00100", "00100", "11111", "00100", "00100"},
    {"11111", "10001", "10001", "10001", "11111"},
    {"10000", "10000", "10000", "10000", "11111"},
    {"10101", "01010", "10101", "01010", "10101"},
}};

bool inside_polygon(std::span<const Point> poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) {
      inside = !inside;
    }
  }
  return inside;
}

std::vector<Point> regular_star(int points, double outer, double inner) {
  std::vector<Point> poly;
  for (int k = 0; k < 2 * points; ++k) {
    const double r = (k % 2 == 0) ? outer : inner;
    const double a = -std::numbers::pi / 2.0 + k * std::numbers::pi / points;
    poly.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return poly;
}

/// Unit-circumradius glyph membership in glyph-local coordinates.
bool inside_glyph(int shape_class, double u, double v) {
  static const std::vector<Point> triangle = {
      {0.0, -1.0}, {0.866, 0.5}, {-0.866, 0.5}};
  static const std::vector<Point> square = {
      {-0.72, -0.72}, {0.72, -0.72}, {0.72, 0.72}, {-0.72, 0.72}};
  static const std::vector<Point> star = regular_star(5, 1.0, 0.42);
  switch (shape_class) {
    case 0: return u * u + v * v <= 0.85 * 0.85;
    case 1: return inside_polygon(triangle, u, v);
    case 2: return inside_polygon(square, u, v);
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) ||
             (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 4: return inside_polygon(star, u, v);
    default: throw ConfigError("glyph class out of range");
  }
}

}  // namespace

std::string glyph_name(int shape_class) {
  if (shape_class < 0 || shape_class >= kNumGlyphs) throw ConfigError("glyph class out of range");
  return kGlyphNames[static_cast<std::size_t>(shape_class)];
}

void SyntheticDomainSpec::validate() const {
  if (num_classes < 2 || num_classes > kNumGlyphs) {
    throw ConfigError("num_classes must be in [2, 5] (one glyph per class)");
  }
  if (num_domains() < 2) throw ConfigError("at least two domains are required");
  if (samples_per_class_per_domain < 1) throw ConfigError("samples_per_class_per_domain must be >= 1");
  if (image_size < 16 || image_size % 8 != 0) {
    throw ConfigError("image_size must be a multiple of 8 and at least 16");
  }
  if (cue_strength < 0.0 || cue_strength > 1.0) throw ConfigError("cue_strength must be in [0,1]");
  if (noise_level < 0.0) throw ConfigError("noise_level must be >= 0");
  std::set<CueKind> seen;
  for (CueKind k : cue_kinds) {
    if (!seen.insert(k).second) {
      throw ConfigError("cue kind '" + to_string(k) +
                        "' assigned to more than one domain; cue kinds must be pairwise distinct");
    }
  }
  if (!domain_names.empty()) {
    if (static_cast<int>(domain_names.size()) != num_domains()) {
      throw ConfigError("domain_names must match the number of cue kinds");
    }
    std::set<std::string> names(domain_names.begin(), domain_names.end());
    if (static_cast<int>(names.size()) != num_domains()) throw ConfigError("duplicate domain names");
  }
}

Image render_synthetic(const RenderRequest& req, Rng& rng) {
  const int size = req.image_size;
  const double scale = size / 32.0;
  const double strength = req.cue_strength;

  // Geometry is drawn before any cue randomness so that the glyph stream is
  // independent of the cue configuration.
  const double radius = rng.uniform(7.0, 9.5) * scale;
  const double cx = size / 2.0 - 0.5 + rng.uniform(-2.5, 2.5) * scale;
  const double cy = size / 2.0 - 0.5 + rng.uniform(-2.5, 2.5) * scale;
  const double angle = rng.uniform(-0.35, 0.35);
  const double glyph_gray = rng.uniform(0.05, 0.3);
  const double stripe_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::array<double, 3> bg_base = {0.5, 0.5, 0.5};
  double stripe_cycles = 0.0;
  int watermark = -1;
  int frame_period = 0;
  for (const CueDescriptor& cue : req.cues) {
    const auto p = static_cast<std::size_t>(cue.parameter);
    switch (cue.kind) {
      case CueKind::tint:
        for (std::size_t c = 0; c < 3; ++c) bg_base[c] += strength * 0.3 * kTintPalette[p][c];
        break;
      case CueKind::stripe: stripe_cycles = kStripeCycles[p]; break;
      case CueKind::watermark: watermark = cue.parameter; break;
      case CueKind::frame:
        frame_period = std::max(1, static_cast<int>(std::lround(kFramePeriods[p] * scale)));
        break;
      case CueKind::none: break;
    }
  }

  Image img(3, size * size);
  const double cos_a = std::cos(angle);
  const double sin_a = std::sin(angle);
  constexpr int kSuper = 3;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double stripe = 0.0;
      if (stripe_cycles > 0.0) {
        stripe = strength * 0.25 *
                 std::sin(2.0 * std::numbers::pi * stripe_cycles * x / size + stripe_phase);
      }
      double coverage = 0.0;
      if (req.draw_shape) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper - 0.5 - cx;
            const double py = y + (sy + 0.5) / kSuper - 0.5 - cy;
            const double u = (cos_a * px + sin_a * py) / radius;
            const double v = (-sin_a * px + cos_a * py) / radius;
            if (inside_glyph(req.shape_class, u, v)) ++hits;
          }
        }
        coverage = static_cast<double>(hits) / (kSuper * kSuper);
      }
      const int p = y * size + x;
      for (int c = 0; c < 3; ++c) {
        const double bg = bg_base[static_cast<std::size_t>(c)] + stripe;
        img(c, p) = static_cast<Real>((1.0 - coverage) * bg + coverage * glyph_gray);
      }
    }
  }

  if (watermark >= 0) {
    const int block = std::max(1, static_cast<int>(std::lround(scale)));
    const int offset = 2 * block;
    const auto& bitmap = kWatermarks[static_cast<std::size_t>(watermark)];
    for (int r = 0; r < 5; ++r) {
      for (int col = 0; col < 5; ++col) {
        if (bitmap[static_cast<std::size_t>(r)][col] != '1') continue;
        for (int by = 0; by < block; ++by) {
          for (int bx = 0; bx < block; ++bx) {
            const int p = (offset + r * block + by) * size + offset + col * block + bx;
            img.col(p) = (1.0 - strength) * img.col(p).array() + strength * 1.0;
          }
        }
      }
    }
  }

  if (frame_period > 0) {
    const int width = std::max(2, static_cast<int>(std::lround(2 * scale)));
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const bool top_bottom = y < width || y >= size - width;
        const bool left_right = x < width || x >= size - width;
        if (!top_bottom && !left_right) continue;
        const int t = top_bottom ? x : y;
        const double level = ((t / frame_period) % 2 == 0) ? 0.95 : 0.05;
        const int p = y * size + x;
        img.col(p) = (1.0 - strength) * img.col(p).array() + strength * level;
      }
    }
  }

  if (req.noise_level > 0.0) {
    for (Eigen::Index i = 0; i < img.size(); ++i) {
      img.data()[i] += static_cast<Real>(req.noise_level * rng.normal());
    }
  }
  img = img.cwiseMax(0.0f).cwiseMin(1.0f);
  return img;
}

MultiDomainDataset generate_synthetic(const SyntheticDomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  MultiDomainDataset ds;
  ds.synthetic = true;
  ds.shape = {spec.image_size, spec.image_size, 3};
  for (int c = 0; c < spec.num_classes; ++c) ds.class_names.push_back(glyph_name(c));

  for (int d = 0; d < spec.num_domains(); ++d) {
    Domain domain;
    domain.cue_kind = spec.cue_kinds[static_cast<std::size_t>(d)];
    domain.name = spec.domain_names.empty() ? to_string(domain.cue_kind)
                                            : spec.domain_names[static_cast<std::size_t>(d)];
    Rng rng = Rng::derived(seed, static_cast<std::uint64_t>(d));
    for (int c = 0; c < spec.num_classes; ++c) {
      for (int j = 0; j < spec.samples_per_class_per_domain; ++j) {
        RenderRequest req;
        req.shape_class = c;
        req.image_size = spec.image_size;
        req.cue_strength = spec.cue_strength;
        req.noise_level = spec.noise_level;
        if (domain.cue_kind != CueKind::none) req.cues.push_back({domain.cue_kind, c, true});
        if (spec.foreign_cues == ForeignCueMode::random) {
          for (CueKind other : spec.cue_kinds) {
            if (other == domain.cue_kind || other == CueKind::none) continue;
            req.cues.push_back(
                {other, static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes))),
                 false});
          }
        }
        Sample s;
        s.image = render_synthetic(req, rng);
        s.label = c;
        s.domain_id = d;
        s.cues = req.cues;
        domain.samples.push_back(std::move(s));
      }
    }
    Rng split_rng = Rng::derived(seed, 1000 + static_cast<std::uint64_t>(d));
    assign_splits(domain.samples, spec.num_classes, spec.split, split_rng);
    ds.domains.push_back(std::move(domain));
  }
  ds.validate();
  return ds;
}

CueProbeSet render_cue_probe_set(const SyntheticDomainSpec& spec, CueKind kind, int count,
                                 std::uint64_t seed) {
  spec.validate();
  if (kind == CueKind::none) throw ConfigError("cannot probe the 'none' cue kind");
  CueProbeSet set;
  Rng rng = Rng::derived(seed, 0x70726f6265ULL);
  const auto classes = static_cast<std::uint64_t>(spec.num_classes);
  for (int i = 0; i < count; ++i) {
    RenderRequest req;
    req.shape_class = static_cast<int>(rng.below(classes));
    const int param = static_cast<int>(rng.below(classes));
    req.cues.push_back({kind, param, false});
    req.image_size = spec.image_size;
    req.cue_strength = spec.cue_strength;
    req.noise_level = spec.noise_level;
    set.images.push_back(render_synthetic(req, rng));
    set.labels.push_back(param);
    set.shape_classes.push_back(req.shape_class);
  }
  return set;
}

}  // namespace lrdg
