#include "defectforge/toybench.hpp"

#include <cmath>
#include <functional>
#include <numbers>

#include "defectforge/error.hpp"

namespace defectforge {

std::string to_string(ProductKind k) {
  switch (k) {
    case ProductKind::DiskRing: return "disk_ring";
    case ProductKind::GridPlate: return "grid_plate";
    case ProductKind::BarPattern: return "bar_pattern";
  }
  return "disk_ring";
}

ProductKind product_from_index(int i) {
  switch (((i % kProductKinds) + kProductKinds) % kProductKinds) {
    case 0: return ProductKind::DiskRing;
    case 1: return ProductKind::GridPlate;
    default: return ProductKind::BarPattern;
  }
}

namespace {

struct Pose {
  double cx, cy, angle, scale;
  // Image point -> product frame.
  void local(double x, double y, double& u, double& v) const {
    const double dx = (x - cx) / scale, dy = (y - cy) / scale;
    const double c = std::cos(angle), s = std::sin(angle);
    u = c * dx + s * dy;
    v = -s * dx + c * dy;
  }
};

bool in_rect(double u, double v, double x0, double y0, double x1, double y1) {
  return u >= x0 && u < x1 && v >= y0 && v < y1;
}

// 4x4 supersampled rasterisation of an intensity function.
ImageBuffer rasterize(int size, const std::function<double(double, double)>& f, Rng& noise, double sigma) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) acc += f(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
      px[static_cast<std::size_t>(y) * size + x] = clamp_to_u8(acc / 16.0 + sigma * noise.normal());
    }
  return ImageBuffer(size, size, 1, std::move(px));
}

}  // namespace

ImageBuffer render_product(ProductKind kind, Rng& rng, int size) {
  if (size < 32) throw Error(ErrorCode::DimensionTooSmall, "products need at least 32x32 pixels");
  const double half = size / 2.0;
  Pose pose{half + rng.uniform(-1.5, 1.5), half + rng.uniform(-1.5, 1.5), 0.0, size / 64.0 * rng.uniform(0.95, 1.05)};
  // Dark and bright features sit symmetrically around the body level.
  const double body = rng.uniform(115.0, 135.0);
  const double contrast = rng.uniform(85.0, 100.0);
  const double background = body - contrast;
  const double accent = body + contrast;
  Rng noise = rng.split(hash_label("noise"));

  switch (kind) {
    case ProductKind::DiskRing: {
      pose.angle = rng.uniform(0.0, std::numbers::pi / 3.0);
      const double r_disk = rng.uniform(25.0, 27.0);
      const double r_ring = rng.uniform(19.5, 20.5);
      const double twist = rng.uniform(-0.1, 0.1);
      return rasterize(size, [&](double x, double y) {
        double u, v;
        pose.local(x, y, u, v);
        const double r = std::hypot(u, v);
        if (r > r_disk) return background;
        if (std::abs(r - r_ring) < 1.5) return accent;
        // Square hub, six inner bolts, twelve outer bolts.
        if (std::abs(u) < 2.0 && std::abs(v) < 2.0) return accent;
        for (int k = 0; k < 6; ++k) {
          const double a = k * std::numbers::pi / 3.0;
          const double bx = 7.0 * std::cos(a), by = 7.0 * std::sin(a);
          if (in_rect(u, v, bx - 1.8, by - 1.8, bx + 1.8, by + 1.8)) return background;
        }
        for (int k = 0; k < 12; ++k) {
          const double a = twist + (k + 0.5) * std::numbers::pi / 6.0;
          const double bx = 13.5 * std::cos(a), by = 13.5 * std::sin(a);
          if (in_rect(u, v, bx - 1.8, by - 1.8, bx + 1.8, by + 1.8)) return k % 2 ? accent : background;
        }
        return body;
      }, noise, 2.0);
    }
    case ProductKind::GridPlate: {
      pose.angle = rng.uniform(-0.2, 0.2);
      const double plate = rng.uniform(22.0, 25.0);
      const double pitch = rng.uniform(7.3, 7.8);
      // 4x4 windows with individual sizes and fills.
      double side[16];
      bool lit[16];
      for (int k = 0; k < 16; ++k) {
        side[k] = rng.uniform(3.0, 4.5);
        lit[k] = rng.uniform() < 0.4;
      }
      return rasterize(size, [&](double x, double y) {
        double u, v;
        pose.local(x, y, u, v);
        if (std::abs(u) > plate || std::abs(v) > plate) return background;
        for (int gy = 0; gy < 4; ++gy)
          for (int gx = 0; gx < 4; ++gx) {
            const int k = gy * 4 + gx;
            const double hx = (gx - 1.5) * pitch, hy = (gy - 1.5) * pitch;
            const double h = side[k] / 2.0;
            if (in_rect(u, v, hx - h, hy - h, hx + h, hy + h)) return lit[k] ? accent : background;
          }
        return body;
      }, noise, 2.0);
    }
    case ProductKind::BarPattern: {
      pose.angle = rng.uniform(-0.25, 0.25);
      // Five rows of two dashes split at a jittered gap.
      double gap[5];
      for (double& g : gap) g = rng.uniform(-3.0, 3.0);
      const double bar_h = rng.uniform(2.8, 3.4);
      return rasterize(size, [&](double x, double y) {
        double u, v;
        pose.local(x, y, u, v);
        if (std::abs(u) > 26.0 || std::abs(v) > 26.0) return background;
        for (int k = 0; k < 5; ++k) {
          const double vc = (k - 2) * 6.5;
          if (std::abs(v - vc) >= bar_h / 2.0) continue;
          if (u < -13.0 || u >= 13.0 || std::abs(u - gap[k]) < 3.0) continue;
          return (k + (u > gap[k])) % 2 ? accent : background;
        }
        return body;
      }, noise, 2.0);
    }
  }
  return ImageBuffer(size, size, 1);
}

}  // namespace defectforge
