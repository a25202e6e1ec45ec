#pragma once

// Independent reference computations used to derive and cross-check expected
// values. None of these call into the library code they verify.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "defectforge/detector.hpp"
#include "defectforge/image.hpp"

namespace oracle {

double fade(double t);

// Textbook gradient noise over a (cells_x + 1) x (cells_y + 1) gradient table.
double noise(double x, double y, int cells_x, int cells_y, const std::vector<std::array<double, 2>>& grads);

// Dense direct solve of the masked Poisson system, one channel. Returns the
// real-valued solution at every pixel (target values outside the mask).
std::vector<double> dense_poisson(const defectforge::ImageBuffer& target, const defectforge::ImageBuffer& source,
                                  const defectforge::DefectMask& mask);

// Max |lap(f) - lap(s)| over the mask, computed from scratch.
double poisson_residual(const std::vector<double>& f, const defectforge::ImageBuffer& source,
                        const defectforge::DefectMask& mask);

// O(n^2) pair counting with half credit for ties.
double brute_force_auroc(const std::vector<double>& normal, const std::vector<double>& anomalous);

// Central differences of batch_loss w.r.t. every weight and bias.
struct NumericGradient {
  std::vector<std::vector<double>> weights;  // column-major per layer
  std::vector<std::vector<double>> biases;
};
NumericGradient finite_differences(const defectforge::AutoencoderModel& model, const Eigen::MatrixXd& input,
                                   const Eigen::MatrixXd& target, double eps);

// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

// Relative paths of every regular file below root, sorted.
std::vector<std::string> list_files(const std::filesystem::path& root);
bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b);

}  // namespace oracle
