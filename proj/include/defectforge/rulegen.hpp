#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "defectforge/error.hpp"
#include "defectforge/image.hpp"
#include "defectforge/rng.hpp"

namespace defectforge {

struct PerlinParams {
  int cell_size = 16;
  int octaves = 3;
  double persistence = 0.5;
  double threshold = 0.4;
  // Blend opacity is drawn per sample from [beta_min, beta_max].
  double beta_min = 0.2;
  double beta_max = 0.8;

  // Throws InvalidArgument when a field is out of its documented range.
  void validate() const;
  std::string hash() const;
};

struct ScalarField {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double max_abs() const;
};

// Producing engine plus a short hash of the parameters it ran with.
struct Provenance {
  std::string tag;  // rule:perlin | rule:cutpaste | rule:gaussian | rule:poisson | gen:<prompt-id>
  std::string params_hash;

  std::string str() const { return params_hash.empty() ? tag : tag + "#" + params_hash; }
  static Provenance parse(const std::string& s);
  bool is_rule() const { return tag.rfind("rule:", 0) == 0; }
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct SyntheticSample {
  ImageBuffer image;
  DefectMask mask;
  Provenance provenance;
  std::uint64_t seed = 0;
};

// Unit gradients on an integer lattice of (nx+1) x (ny+1) points.
class GradientLattice {
 public:
  GradientLattice(int cells_x, int cells_y, Rng& rng);
  GradientLattice(int cells_x, int cells_y, std::vector<std::array<double, 2>> gradients);

  int cells_x() const noexcept { return cells_x_; }
  int cells_y() const noexcept { return cells_y_; }
  const std::array<double, 2>& at(int ix, int iy) const {
    return grads_[static_cast<std::size_t>(iy) * (cells_x_ + 1) + ix];
  }

 private:
  int cells_x_;
  int cells_y_;
  std::vector<std::array<double, 2>> grads_;
};

// 6t^5 - 15t^4 + 10t^3 on [0, 1].
double perlin_fade(double t);

// Gradient noise at (x, y); (x, y) must lie inside the lattice.
double perlin_noise_2d(double x, double y, const GradientLattice& lattice);

// Sum over octaves k of persistence^k * noise(x 2^k / cell, y 2^k / cell),
// divided by sum persistence^k.
ScalarField fractal_perlin(int width, int height, const PerlinParams& p, const Rng& rng);

DefectMask threshold_mask(const ScalarField& field, double threshold);

enum class TextureKind { Stripes, Checker, Speckle, Clouds };
ImageBuffer procedural_texture(TextureKind kind, int width, int height, int channels, Rng& rng);

// Inside mask: round(beta * texture + (1 - beta) * normal). Outside untouched.
SyntheticSample perlin_texture_blend(const ImageBuffer& normal, const ImageBuffer& texture,
                                     const DefectMask& mask, double beta);

// Perlin defect mask: the field is rescaled to unit peak magnitude before the
// threshold is applied, and redrawn on a fresh substream while the mask is
// empty (8 attempts, then EmptyMask).
DefectMask perlin_mask(int width, int height, const PerlinParams& p, const Rng& rng);

// Full Perlin engine: perlin_mask, then beta drawn per sample, then the blend.
SyntheticSample perlin_synthesize(const ImageBuffer& normal, const ImageBuffer& texture,
                                  const PerlinParams& p, const Rng& rng);

// Copies a rectangle of `donor` (or `normal` itself) to a second location.
// Side lengths are drawn in [max(1, frac*dim/2), frac*dim].
SyntheticSample cut_paste(const ImageBuffer& normal, Rng& rng, double patch_frac,
                          const ImageBuffer* donor = nullptr);

// Inside mask: clamp(pixel + N(0, sigma^2)) per channel.
SyntheticSample gaussian_corrupt(const ImageBuffer& normal, const DefectMask& mask, double sigma, Rng& rng);

struct PoissonOutcome {
  SyntheticSample sample;
  // Real-valued composite before rounding (width*height*channels, interleaved).
  std::vector<double> field;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
  // Max residual after each sweep, when requested.
  std::vector<double> residual_history;
};

// Solves lap(f) = lap(source) on the mask with f = target on its boundary,
// per channel, by Gauss-Seidel. Never throws DidNotConverge; inspect
// `converged`.
PoissonOutcome poisson_solve(const ImageBuffer& target, const ImageBuffer& source, const DefectMask& mask,
                             double tol = 1e-3, int max_iters = 0, bool record_history = false);

class PoissonNotConverged : public Error {
 public:
  explicit PoissonNotConverged(PoissonOutcome best);
  const PoissonOutcome& best() const noexcept { return best_; }

 private:
  PoissonOutcome best_;
};

// As poisson_solve, but throws PoissonNotConverged (code DidNotConverge)
// carrying the best iterate when max_iters is exhausted. max_iters <= 0 means
// 10 * (masked pixel count).
SyntheticSample poisson_blend(const ImageBuffer& target, const ImageBuffer& source, const DefectMask& mask,
                              double tol = 1e-3, int max_iters = 0);

// Elliptical mask, used by engines that need a compact defect region.
DefectMask ellipse_mask(int width, int height, double cx, double cy, double rx, double ry);

}  // namespace defectforge
