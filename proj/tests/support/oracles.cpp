#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include <Eigen/Dense>
#include <unistd.h>

namespace fs = std::filesystem;
using defectforge::DefectMask;
using defectforge::ImageBuffer;

namespace oracle {

double fade(double t) { return 6 * std::pow(t, 5) - 15 * std::pow(t, 4) + 10 * std::pow(t, 3); }

double noise(double x, double y, int cells_x, int cells_y, const std::vector<std::array<double, 2>>& grads) {
  int ix = static_cast<int>(x), iy = static_cast<int>(y);
  if (ix >= cells_x) ix = cells_x - 1;
  if (iy >= cells_y) iy = cells_y - 1;
  double corner[2][2];
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const auto& g = grads[static_cast<std::size_t>((iy + j) * (cells_x + 1) + ix + i)];
      corner[j][i] = g[0] * (x - (ix + i)) + g[1] * (y - (iy + j));
    }
  const double u = fade(x - ix), v = fade(y - iy);
  const double top = (1 - u) * corner[0][0] + u * corner[0][1];
  const double bottom = (1 - u) * corner[1][0] + u * corner[1][1];
  return (1 - v) * top + v * bottom;
}

std::vector<double> dense_poisson(const ImageBuffer& target, const ImageBuffer& source, const DefectMask& mask) {
  const int w = target.width(), h = target.height();
  std::map<int, int> index;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(x, y)) index.emplace(y * w + x, static_cast<int>(index.size()));
  const int n = static_cast<int>(index.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
  for (const auto& [p, row] : index) {
    const int x = p % w, y = p / w;
    a(row, row) = 4;
    b(row) = 4.0 * source.at(x, y);
    for (int k = 0; k < 4; ++k) {
      const int qx = x + dx[k], qy = y + dy[k];
      b(row) -= source.at(qx, qy);
      auto it = index.find(qy * w + qx);
      if (it != index.end()) {
        a(row, it->second) = -1;
      } else {
        b(row) += target.at(qx, qy);
      }
    }
  }
  const Eigen::VectorXd f = a.fullPivLu().solve(b);
  std::vector<double> out(target.data().begin(), target.data().end());
  for (const auto& [p, row] : index) out[static_cast<std::size_t>(p)] = f(row);
  return out;
}

double poisson_residual(const std::vector<double>& f, const ImageBuffer& source, const DefectMask& mask) {
  const int w = source.width();
  double worst = 0;
  for (int y = 1; y + 1 < source.height(); ++y)
    for (int x = 1; x + 1 < w; ++x) {
      if (!mask.at(x, y)) continue;
      auto at = [&](int xx, int yy) { return f[static_cast<std::size_t>(yy * w + xx)]; };
      const double lf = at(x + 1, y) + at(x - 1, y) + at(x, y + 1) + at(x, y - 1) - 4 * at(x, y);
      const double ls = double(source.at(x + 1, y)) + source.at(x - 1, y) + source.at(x, y + 1) +
                        source.at(x, y - 1) - 4.0 * source.at(x, y);
      worst = std::max(worst, std::abs(lf - ls));
    }
  return worst;
}

double brute_force_auroc(const std::vector<double>& normal, const std::vector<double>& anomalous) {
  double wins = 0;
  for (double a : anomalous)
    for (double n : normal) wins += a > n ? 1.0 : (a == n ? 0.5 : 0.0);
  return wins / (static_cast<double>(normal.size()) * anomalous.size());
}

NumericGradient finite_differences(const defectforge::AutoencoderModel& model, const Eigen::MatrixXd& input,
                                   const Eigen::MatrixXd& target, double eps) {
  NumericGradient g;
  defectforge::AutoencoderModel m = model;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    std::vector<double> gw;
    for (Eigen::Index k = 0; k < m.weights[l].size(); ++k) {
      double& p = m.weights[l].data()[k];
      const double keep = p;
      p = keep + eps;
      const double up = defectforge::batch_loss(m, input, target);
      p = keep - eps;
      const double down = defectforge::batch_loss(m, input, target);
      p = keep;
      gw.push_back((up - down) / (2 * eps));
    }
    g.weights.push_back(std::move(gw));
    std::vector<double> gb;
    for (Eigen::Index k = 0; k < m.biases[l].size(); ++k) {
      double& p = m.biases[l](k);
      const double keep = p;
      p = keep + eps;
      const double up = defectforge::batch_loss(m, input, target);
      p = keep - eps;
      const double down = defectforge::batch_loss(m, input, target);
      p = keep;
      gb.push_back((up - down) / (2 * eps));
    }
    g.biases.push_back(std::move(gb));
  }
  return g;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("defectforge-test-" + std::to_string(::getpid()) + "-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> list_files(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::equal(std::istreambuf_iterator<char>(fa), std::istreambuf_iterator<char>(),
                    std::istreambuf_iterator<char>(fb), std::istreambuf_iterator<char>());
}

}  // namespace oracle
