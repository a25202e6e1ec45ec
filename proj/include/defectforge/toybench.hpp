#pragma once

#include <string>

#include "defectforge/image.hpp"
#include "defectforge/rng.hpp"

namespace defectforge {

// Procedural grayscale "products" standing in for an industrial dataset.
enum class ProductKind { DiskRing, GridPlate, BarPattern };
inline constexpr int kProductKinds = 3;

std::string to_string(ProductKind k);
ProductKind product_from_index(int i);

// Pose, scale and intensity are jittered from `rng`; mild sensor noise is added.
ImageBuffer render_product(ProductKind kind, Rng& rng, int size = 64);

}  // namespace defectforge
