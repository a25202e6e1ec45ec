#include "defectforge/rulegen.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

#include "defectforge/encoding.hpp"

namespace defectforge {

namespace {

std::string short_hash(const std::string& canonical) { return sha256_hex(canonical).substr(0, 8); }

void require_same_dims(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_shape(b)) throw Error(ErrorCode::DimensionMismatch, what);
}

void require_mask_fits(const ImageBuffer& img, const DefectMask& mask) {
  if (!mask.matches(img)) throw Error(ErrorCode::DimensionMismatch, "mask does not match image dimensions");
}

}  // namespace

void PerlinParams::validate() const {
  if (cell_size < 2) throw Error(ErrorCode::InvalidArgument, "perlin cell_size must be >= 2");
  if (octaves < 1) throw Error(ErrorCode::InvalidArgument, "perlin octaves must be >= 1");
  if (!(persistence > 0.0 && persistence <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "perlin persistence must lie in (0, 1]");
  }
  if (!(threshold > -1.0 && threshold < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "perlin threshold must lie in (-1, 1)");
  }
  if (!(beta_min >= 0.0 && beta_max <= 1.0 && beta_min <= beta_max)) {
    throw Error(ErrorCode::InvalidArgument, "perlin beta range must lie in [0, 1]");
  }
}

std::string PerlinParams::hash() const {
  std::ostringstream s;
  s << "perlin:" << cell_size << ':' << octaves << ':' << persistence << ':' << threshold << ':' << beta_min
    << ':' << beta_max;
  return short_hash(s.str());
}

double ScalarField::max_abs() const {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

Provenance Provenance::parse(const std::string& s) {
  const auto hashpos = s.find('#');
  if (hashpos == std::string::npos) return {s, {}};
  return {s.substr(0, hashpos), s.substr(hashpos + 1)};
}

// ---- Perlin ---------------------------------------------------------------

GradientLattice::GradientLattice(int cells_x, int cells_y, Rng& rng) : cells_x_(cells_x), cells_y_(cells_y) {
  grads_.reserve(static_cast<std::size_t>(cells_x + 1) * (cells_y + 1));
  for (int i = 0; i < (cells_x + 1) * (cells_y + 1); ++i) {
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    grads_.push_back({std::cos(angle), std::sin(angle)});
  }
}

GradientLattice::GradientLattice(int cells_x, int cells_y, std::vector<std::array<double, 2>> gradients)
    : cells_x_(cells_x), cells_y_(cells_y), grads_(std::move(gradients)) {
  if (grads_.size() != static_cast<std::size_t>(cells_x + 1) * (cells_y + 1)) {
    throw Error(ErrorCode::DimensionMismatch, "gradient table size does not match lattice");
  }
}

double perlin_fade(double t) {
  assert(t >= 0.0 && t <= 1.0);
  return t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
}

double perlin_noise_2d(double x, double y, const GradientLattice& lattice) {
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  // Points on the far lattice edge belong to the last cell.
  x0 = std::clamp(x0, 0, lattice.cells_x() - 1);
  y0 = std::clamp(y0, 0, lattice.cells_y() - 1);
  const double fx = x - x0;
  const double fy = y - y0;

  auto dot = [&](int ix, int iy, double dx, double dy) {
    const auto& g = lattice.at(ix, iy);
    return g[0] * dx + g[1] * dy;
  };
  const double n00 = dot(x0, y0, fx, fy);
  const double n10 = dot(x0 + 1, y0, fx - 1.0, fy);
  const double n01 = dot(x0, y0 + 1, fx, fy - 1.0);
  const double n11 = dot(x0 + 1, y0 + 1, fx - 1.0, fy - 1.0);

  const double u = perlin_fade(fx);
  const double v = perlin_fade(fy);
  const double nx0 = n00 + u * (n10 - n00);
  const double nx1 = n01 + u * (n11 - n01);
  return nx0 + v * (nx1 - nx0);
}

ScalarField fractal_perlin(int width, int height, const PerlinParams& p, const Rng& rng) {
  p.validate();
  if (width < p.cell_size || height < p.cell_size) {
    throw Error(ErrorCode::DimensionTooSmall, "field smaller than one perlin cell");
  }
  ScalarField field{width, height, std::vector<double>(static_cast<std::size_t>(width) * height, 0.0)};
  double amplitude = 1.0;
  double norm = 0.0;
  for (int k = 0; k < p.octaves; ++k) {
    const double freq = std::ldexp(1.0, k) / p.cell_size;
    const int cells_x = static_cast<int>(std::floor((width - 1) * freq)) + 1;
    const int cells_y = static_cast<int>(std::floor((height - 1) * freq)) + 1;
    Rng octave_rng = rng.split(static_cast<std::uint64_t>(k));
    const GradientLattice lattice(cells_x, cells_y, octave_rng);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        field.values[static_cast<std::size_t>(y) * width + x] += amplitude * perlin_noise_2d(x * freq, y * freq, lattice);
      }
    }
    norm += amplitude;
    amplitude *= p.persistence;
  }
  for (double& v : field.values) v /= norm;
  return field;
}

DefectMask threshold_mask(const ScalarField& field, double threshold) {
  std::vector<std::uint8_t> bits(field.values.size());
  std::transform(field.values.begin(), field.values.end(), bits.begin(),
                 [threshold](double v) { return v > threshold ? std::uint8_t{1} : std::uint8_t{0}; });
  return DefectMask(field.width, field.height, std::move(bits));
}

ImageBuffer procedural_texture(TextureKind kind, int width, int height, int channels, Rng& rng) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height * channels);
  std::vector<double> tint(channels);
  for (auto& t : tint) t = rng.uniform(0.7, 1.0);
  const double lo = rng.uniform(0.0, 90.0);
  const double hi = rng.uniform(160.0, 255.0);

  switch (kind) {
    case TextureKind::Stripes: {
      const double period = rng.uniform(3.0, 9.0);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double c = std::cos(angle), s = std::sin(angle);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double phase = (x * c + y * s) / period;
          const double w = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * phase);
          for (int ch = 0; ch < channels; ++ch)
            px[(static_cast<std::size_t>(y) * width + x) * channels + ch] = clamp_to_u8(tint[ch] * (lo + w * (hi - lo)));
        }
      break;
    }
    case TextureKind::Checker: {
      const int cell = rng.between(2, 6);
      const int ox = rng.between(0, cell - 1), oy = rng.between(0, cell - 1);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const bool on = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 0;
          for (int ch = 0; ch < channels; ++ch)
            px[(static_cast<std::size_t>(y) * width + x) * channels + ch] = clamp_to_u8(tint[ch] * (on ? hi : lo));
        }
      break;
    }
    case TextureKind::Clouds: {
      PerlinParams cp;
      cp.cell_size = std::min({32, width, height});
      cp.octaves = 2;
      const ScalarField f = fractal_perlin(width, height, cp, rng.split(hash_label("clouds")));
      const double peak = std::max(f.max_abs(), 1e-12);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double w = 0.5 + 0.5 * f.at(x, y) / peak;
          for (int ch = 0; ch < channels; ++ch)
            px[(static_cast<std::size_t>(y) * width + x) * channels + ch] = clamp_to_u8(tint[ch] * (lo + w * (hi - lo)));
        }
      break;
    }
    case TextureKind::Speckle: {
      const double density = rng.uniform(0.1, 0.4);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double base = rng.uniform() < density ? hi : lo + rng.uniform(0.0, 30.0);
          for (int ch = 0; ch < channels; ++ch)
            px[(static_cast<std::size_t>(y) * width + x) * channels + ch] = clamp_to_u8(tint[ch] * base);
        }
      break;
    }
  }
  return ImageBuffer(width, height, channels, std::move(px));
}

SyntheticSample perlin_texture_blend(const ImageBuffer& normal, const ImageBuffer& texture,
                                     const DefectMask& mask, double beta) {
  require_same_dims(normal, texture, "texture does not match normal image dimensions");
  require_mask_fits(normal, mask);
  if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "beta must lie in [0, 1]");

  std::vector<std::uint8_t> out = normal.data();
  const int c = normal.channels();
  for (int y = 0; y < normal.height(); ++y)
    for (int x = 0; x < normal.width(); ++x) {
      if (!mask.at(x, y)) continue;
      for (int ch = 0; ch < c; ++ch) {
        const auto i = (static_cast<std::size_t>(y) * normal.width() + x) * c + ch;
        out[i] = clamp_to_u8(beta * texture.data()[i] + (1.0 - beta) * normal.data()[i]);
      }
    }
  std::ostringstream params;
  params << "blend:" << beta;
  return {ImageBuffer(normal.width(), normal.height(), c, std::move(out)), mask,
          Provenance{"rule:perlin", short_hash(params.str())}, 0};
}

namespace {

// Field rescaled to unit peak magnitude, thresholded, redrawn on a fresh
// substream while empty. Returns the attempt substream that succeeded.
std::pair<DefectMask, Rng> draw_perlin_mask(int width, int height, const PerlinParams& p, const Rng& rng) {
  constexpr int kAttempts = 8;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const Rng attempt_rng = rng.split(static_cast<std::uint64_t>(attempt));
    ScalarField field = fractal_perlin(width, height, p, attempt_rng.split(0));
    const double peak = field.max_abs();
    if (peak > 0.0)
      for (double& v : field.values) v /= peak;
    DefectMask mask = threshold_mask(field, p.threshold);
    if (!mask.empty()) return {std::move(mask), attempt_rng};
  }
  throw Error(ErrorCode::EmptyMask, "perlin mask stayed empty after 8 redraws");
}

}  // namespace

DefectMask perlin_mask(int width, int height, const PerlinParams& p, const Rng& rng) {
  return draw_perlin_mask(width, height, p, rng).first;
}

SyntheticSample perlin_synthesize(const ImageBuffer& normal, const ImageBuffer& texture,
                                  const PerlinParams& p, const Rng& rng) {
  auto [mask, attempt_rng] = draw_perlin_mask(normal.width(), normal.height(), p, rng);
  Rng beta_rng = attempt_rng.split(1);
  const double beta = beta_rng.uniform(p.beta_min, p.beta_max);
  SyntheticSample s = perlin_texture_blend(normal, texture, mask, beta);
  s.provenance.params_hash = p.hash();
  s.seed = rng.key();
  return s;
}

// ---- Cut-Paste ------------------------------------------------------------

SyntheticSample cut_paste(const ImageBuffer& normal, Rng& rng, double patch_frac, const ImageBuffer* donor) {
  if (!(patch_frac > 0.0 && patch_frac <= 0.5)) {
    throw Error(ErrorCode::InvalidArgument, "patch_frac must lie in (0, 0.5]");
  }
  const ImageBuffer& src = donor ? *donor : normal;
  require_same_dims(normal, src, "donor does not match normal image dimensions");

  const std::uint64_t seed = rng.key();
  const int w = normal.width(), h = normal.height();
  const int max_pw = static_cast<int>(std::floor(patch_frac * w));
  const int max_ph = static_cast<int>(std::floor(patch_frac * h));
  if (max_pw < 1 || max_ph < 1) throw Error(ErrorCode::PatchDoesNotFit, "patch_frac yields an empty patch");
  const int pw = rng.between(std::max(1, max_pw / 2), max_pw);
  const int ph = rng.between(std::max(1, max_ph / 2), max_ph);
  const int sx = rng.between(0, w - pw), sy = rng.between(0, h - ph);
  const int dx = rng.between(0, w - pw), dy = rng.between(0, h - ph);

  std::vector<std::uint8_t> out = normal.data();
  DefectMask mask(w, h);
  const int c = normal.channels();
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<std::size_t>(dy + y) * w + dx + x) * c + ch] = src.at(sx + x, sy + y, ch);
      mask.set(dx + x, dy + y, true);
    }
  std::ostringstream params;
  params << "cutpaste:" << patch_frac << ':' << (donor ? "donor" : "self");
  return {ImageBuffer(w, h, c, std::move(out)), std::move(mask), Provenance{"rule:cutpaste", short_hash(params.str())},
          seed};
}

// ---- Gaussian -------------------------------------------------------------

SyntheticSample gaussian_corrupt(const ImageBuffer& normal, const DefectMask& mask, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "sigma must be >= 0");
  require_mask_fits(normal, mask);
  const std::uint64_t seed = rng.key();
  std::vector<std::uint8_t> out = normal.data();
  const int c = normal.channels();
  for (int y = 0; y < normal.height(); ++y)
    for (int x = 0; x < normal.width(); ++x) {
      if (!mask.at(x, y)) continue;
      for (int ch = 0; ch < c; ++ch) {
        const auto i = (static_cast<std::size_t>(y) * normal.width() + x) * c + ch;
        out[i] = clamp_to_u8(normal.data()[i] + sigma * rng.normal());
      }
    }
  std::ostringstream params;
  params << "gaussian:" << sigma;
  return {ImageBuffer(normal.width(), normal.height(), c, std::move(out)), mask,
          Provenance{"rule:gaussian", short_hash(params.str())}, seed};
}

// ---- Poisson --------------------------------------------------------------

PoissonOutcome poisson_solve(const ImageBuffer& target, const ImageBuffer& source, const DefectMask& mask,
                             double tol, int max_iters, bool record_history) {
  require_same_dims(target, source, "source does not match target dimensions");
  require_mask_fits(target, mask);
  const int w = target.width(), h = target.height(), c = target.channels();

  std::vector<std::size_t> interior;  // pixel indices, raster order
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      if (x == 0 || y == 0 || x == w - 1 || y == h - 1) {
        throw Error(ErrorCode::MaskTouchesBorder, "poisson mask touches the image border");
      }
      interior.push_back(static_cast<std::size_t>(y) * w + x);
    }
  if (interior.empty()) throw Error(ErrorCode::EmptyMask, "poisson mask has no interior pixels");
  if (max_iters <= 0) max_iters = 10 * static_cast<int>(interior.size());

  PoissonOutcome outcome;
  outcome.field.assign(target.data().begin(), target.data().end());
  std::vector<double>& f = outcome.field;
  const auto& s = source.data();
  const std::ptrdiff_t stride = static_cast<std::ptrdiff_t>(w) * c;

  // Guidance term 4 s_p - sum s_q, fixed for the whole solve.
  std::vector<double> guidance(interior.size() * c);
  for (std::size_t k = 0; k < interior.size(); ++k)
    for (int ch = 0; ch < c; ++ch) {
      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(interior[k]) * c + ch;
      guidance[k * c + ch] = 4.0 * s[i] - (static_cast<double>(s[i - c]) + s[i + c] + s[i - stride] + s[i + stride]);
    }

  auto max_residual = [&]() {
    double r = 0.0;
    for (std::size_t k = 0; k < interior.size(); ++k)
      for (int ch = 0; ch < c; ++ch) {
        const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(interior[k]) * c + ch;
        const double lap = 4.0 * f[i] - (f[i - c] + f[i + c] + f[i - stride] + f[i + stride]);
        r = std::max(r, std::abs(guidance[k * c + ch] - lap));
      }
    return r;
  };

  double residual = max_residual();
  int it = 0;
  while (residual > tol && it < max_iters) {
    for (std::size_t k = 0; k < interior.size(); ++k)
      for (int ch = 0; ch < c; ++ch) {
        const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(interior[k]) * c + ch;
        f[i] = (guidance[k * c + ch] + f[i - c] + f[i + c] + f[i - stride] + f[i + stride]) / 4.0;
      }
    ++it;
    residual = max_residual();
    if (record_history) outcome.residual_history.push_back(residual);
  }

  std::vector<std::uint8_t> out = target.data();
  for (std::size_t p : interior)
    for (int ch = 0; ch < c; ++ch) out[p * c + ch] = clamp_to_u8(f[p * c + ch]);

  std::ostringstream params;
  params << "poisson:" << tol << ':' << max_iters;
  outcome.sample = {ImageBuffer(w, h, c, std::move(out)), mask, Provenance{"rule:poisson", short_hash(params.str())}, 0};
  outcome.residual = residual;
  outcome.iterations = it;
  outcome.converged = residual <= tol;
  return outcome;
}

PoissonNotConverged::PoissonNotConverged(PoissonOutcome best)
    : Error(ErrorCode::DidNotConverge,
            "poisson solve did not reach tolerance (residual " + std::to_string(best.residual) + ")"),
      best_(std::move(best)) {}

SyntheticSample poisson_blend(const ImageBuffer& target, const ImageBuffer& source, const DefectMask& mask,
                              double tol, int max_iters) {
  PoissonOutcome outcome = poisson_solve(target, source, mask, tol, max_iters);
  if (!outcome.converged) throw PoissonNotConverged(std::move(outcome));
  return std::move(outcome.sample);
}

DefectMask ellipse_mask(int width, int height, double cx, double cy, double rx, double ry) {
  DefectMask m(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) m.set(x, y, true);
    }
  return m;
}

}  // namespace defectforge
