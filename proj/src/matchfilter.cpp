#include "defectforge/matchfilter.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "defectforge/error.hpp"
#include "defectforge/rng.hpp"

namespace defectforge {

namespace {

struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
};

int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const int r = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    sum += k[i];
  }
  for (double& x : k) x /= sum;
  return k;
}

// Separable convolution with replicated borders.
Plane blur(const Plane& in, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size()) / 2;
  Plane tmp{in.w, in.h, std::vector<double>(in.v.size())};
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * in.at(clampi(x + i, 0, in.w - 1), y);
      tmp.at(x, y) = s;
    }
  Plane out{in.w, in.h, std::vector<double>(in.v.size())};
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(x, clampi(y + i, 0, in.h - 1));
      out.at(x, y) = s;
    }
  return out;
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const ImageBuffer& gray_in, const HarrisParams& params) {
  const ImageBuffer gray = to_grayscale(gray_in);
  const int w = gray.width(), h = gray.height();
  if (w < params.window || h < params.window) {
    throw Error(ErrorCode::ImageTooSmall, "image smaller than the Harris window");
  }
  auto I = [&](int x, int y) { return gray.at(clampi(x, 0, w - 1), clampi(y, 0, h - 1)) / 255.0; };

  Plane ixx{w, h, std::vector<double>(static_cast<std::size_t>(w) * h)};
  Plane iyy = ixx, ixy = ixx;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (I(x + 1, y - 1) + 2 * I(x + 1, y) + I(x + 1, y + 1)) -
                        (I(x - 1, y - 1) + 2 * I(x - 1, y) + I(x - 1, y + 1));
      const double gy = (I(x - 1, y + 1) + 2 * I(x, y + 1) + I(x + 1, y + 1)) -
                        (I(x - 1, y - 1) + 2 * I(x, y - 1) + I(x + 1, y - 1));
      ixx.at(x, y) = gx * gx;
      iyy.at(x, y) = gy * gy;
      ixy.at(x, y) = gx * gy;
    }
  const auto kernel = gaussian_kernel(params.window, params.sigma);
  const Plane sxx = blur(ixx, kernel), syy = blur(iyy, kernel), sxy = blur(ixy, kernel);

  Plane resp{w, h, std::vector<double>(static_cast<std::size_t>(w) * h)};
  for (std::size_t i = 0; i < resp.v.size(); ++i) {
    const double det = sxx.v[i] * syy.v[i] - sxy.v[i] * sxy.v[i];
    const double tr = sxx.v[i] + syy.v[i];
    resp.v[i] = det - params.k * tr * tr;
  }

  // Replicated borders make responses within one pixel of the edge unreliable.
  const int margin = 2;
  const int r = params.nms_radius;
  std::vector<Keypoint> kps;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      const double v = resp.at(x, y);
      if (!(v > params.threshold)) continue;
      bool is_max = true;
      for (int dy = -r; dy <= r && is_max; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if ((dx == 0 && dy == 0) || dx * dx + dy * dy > r * r) continue;
          const int nx = x + dx, ny = y + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const double u = resp.at(nx, ny);
          // Ties resolve to the earliest pixel in raster order.
          const bool earlier = ny < y || (ny == y && nx < x);
          if (u > v || (u == v && earlier)) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      // Parabolic sub-pixel refinement along each axis.
      auto offset = [](double lm, double c, double rp) {
        const double den = lm - 2.0 * c + rp;
        return den < 0.0 ? std::clamp(0.5 * (lm - rp) / den, -0.5, 0.5) : 0.0;
      };
      const double ox = offset(resp.at(x - 1, y), v, resp.at(x + 1, y));
      const double oy = offset(resp.at(x, y - 1), v, resp.at(x, y + 1));
      kps.push_back({x + ox, y + oy, v});
    }

  std::stable_sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) { return a.response > b.response; });
  if (static_cast<int>(kps.size()) > params.max_kp) kps.resize(static_cast<std::size_t>(params.max_kp));
  return kps;
}

int hamming(const Descriptor& a, const Descriptor& b) noexcept {
  int d = 0;
  for (std::size_t i = 0; i < a.words.size(); ++i) d += std::popcount(a.words[i] ^ b.words[i]);
  return d;
}

SamplingPattern::SamplingPattern(std::uint64_t seed) : seed_(seed) {
  Rng rng(seed);
  const int half = kPatchSize / 2;
  const double sigma = kPatchSize / 5.0;
  auto draw = [&]() { return std::clamp(static_cast<int>(std::lround(sigma * rng.normal())), -half, half); };
  pairs_.reserve(kDescriptorBits);
  while (static_cast<int>(pairs_.size()) < kDescriptorBits) {
    Pair p{draw(), draw(), draw(), draw()};
    if (p.px == p.qx && p.py == p.qy) continue;
    pairs_.push_back(p);
  }
}

DescribedKeypoints compute_descriptors(const ImageBuffer& gray_in, const std::vector<Keypoint>& kps,
                                       const SamplingPattern& pattern) {
  const ImageBuffer gray = to_grayscale(gray_in);
  const int w = gray.width(), h = gray.height();
  // Integer 3x3 box sums; comparing sums is the same as comparing means and
  // stays exact under a global intensity shift.
  std::vector<int> box(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) s += gray.at(clampi(x + dx, 0, w - 1), clampi(y + dy, 0, h - 1));
      box[static_cast<std::size_t>(y) * w + x] = s;
    }

  const int half = kPatchSize / 2;
  DescribedKeypoints out;
  for (const Keypoint& kp : kps) {
    const int cx = static_cast<int>(std::lround(kp.x));
    const int cy = static_cast<int>(std::lround(kp.y));
    if (cx - half < 0 || cy - half < 0 || cx + half >= w || cy + half >= h) {
      ++out.dropped_at_border;
      continue;
    }
    Descriptor d;
    const auto& pairs = pattern.pairs();
    for (int i = 0; i < kDescriptorBits; ++i) {
      const auto& p = pairs[i];
      if (box[static_cast<std::size_t>(cy + p.py) * w + cx + p.px] < box[static_cast<std::size_t>(cy + p.qy) * w + cx + p.qx]) {
        d.set(i);
      }
    }
    out.keypoints.push_back(kp);
    out.descriptors.push_back(d);
  }
  return out;
}

namespace {

struct Nearest {
  int index = -1;
  int best = std::numeric_limits<int>::max();
  int second = std::numeric_limits<int>::max();
};

std::vector<Nearest> nearest_neighbours(const std::vector<Descriptor>& from, const std::vector<Descriptor>& to) {
  std::vector<Nearest> nn(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) {
    Nearest& n = nn[i];
    for (std::size_t j = 0; j < to.size(); ++j) {
      const int d = hamming(from[i], to[j]);
      if (d < n.best) {
        n.second = n.best;
        n.best = d;
        n.index = static_cast<int>(j);
      } else if (d < n.second) {
        n.second = d;
      }
    }
  }
  return nn;
}

bool passes_ratio(const Nearest& n, double ratio) {
  if (n.second == std::numeric_limits<int>::max()) return true;
  return n.best < ratio * n.second;
}

}  // namespace

std::vector<Match> match_descriptors(const std::vector<Descriptor>& a, const std::vector<Descriptor>& b,
                                     const MatchParams& params) {
  const auto ab = nearest_neighbours(a, b);
  const auto ba = nearest_neighbours(b, a);
  std::vector<Match> matches;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Nearest& n = ab[i];
    if (n.index < 0 || ba[n.index].index != static_cast<int>(i)) continue;
    if (n.best > params.max_dist) continue;
    if (!passes_ratio(n, params.ratio) || !passes_ratio(ba[n.index], params.ratio)) continue;
    matches.emplace_back(static_cast<int>(i), n.index);
  }
  return matches;
}

std::string to_string(Decision d) {
  switch (d) {
    case Decision::NoAnomaly: return "NoAnomaly";
    case Decision::Desired: return "Desired";
    case Decision::Irrelevant: return "Irrelevant";
  }
  return "Irrelevant";
}

Decision decision_from_string(const std::string& s) {
  if (s == "NoAnomaly") return Decision::NoAnomaly;
  if (s == "Desired") return Decision::Desired;
  if (s == "Irrelevant") return Decision::Irrelevant;
  throw Error(ErrorCode::InvalidArgument, "unknown filter decision", s);
}

Decision decide(double ratio, const Thresholds& t) {
  if (ratio > t.high) return Decision::NoAnomaly;
  if (ratio <= t.low) return Decision::Irrelevant;
  return Decision::Desired;
}

void to_json(nlohmann::json& j, const FilterReport& r) {
  j = nlohmann::json{{"k_normal", r.k_normal},
                     {"k_candidate", r.k_candidate},
                     {"matches", r.matches},
                     {"ratio", r.ratio},
                     {"decision", to_string(r.decision)},
                     {"tau_low", r.thresholds.low},
                     {"tau_high", r.thresholds.high},
                     {"dropped_normal", r.dropped_normal},
                     {"dropped_candidate", r.dropped_candidate}};
}

void from_json(const nlohmann::json& j, FilterReport& r) {
  r.k_normal = j.at("k_normal").get<int>();
  r.k_candidate = j.at("k_candidate").get<int>();
  r.matches = j.at("matches").get<int>();
  r.ratio = j.at("ratio").get<double>();
  r.decision = decision_from_string(j.at("decision").get<std::string>());
  r.thresholds.low = j.at("tau_low").get<double>();
  r.thresholds.high = j.at("tau_high").get<double>();
  r.dropped_normal = j.value("dropped_normal", 0);
  r.dropped_candidate = j.value("dropped_candidate", 0);
}

MatchFilter::MatchFilter(FilterParams params) : params_(params), pattern_(params.pattern_seed) {}

MatchAnalysis MatchFilter::analyze(const ImageBuffer& normal, const ImageBuffer& candidate) const {
  if (normal.width() != candidate.width() || normal.height() != candidate.height()) {
    throw Error(ErrorCode::DimensionMismatch, "candidate dimensions differ from normal image");
  }
  const ImageBuffer gn = to_grayscale(normal), gc = to_grayscale(candidate);
  MatchAnalysis a;
  a.normal = compute_descriptors(gn, detect_keypoints(gn, params_.harris), pattern_);
  a.candidate = compute_descriptors(gc, detect_keypoints(gc, params_.harris), pattern_);
  a.matches = match_descriptors(a.normal.descriptors, a.candidate.descriptors, params_.match);
  if (params_.max_shift >= 0.0) {
    const double lim2 = params_.max_shift * params_.max_shift;
    std::erase_if(a.matches, [&](const Match& m) {
      const Keypoint& p = a.normal.keypoints[m.first];
      const Keypoint& q = a.candidate.keypoints[m.second];
      const double dx = p.x - q.x, dy = p.y - q.y;
      return dx * dx + dy * dy > lim2;
    });
  }

  FilterReport& r = a.report;
  r.k_normal = static_cast<int>(a.normal.descriptors.size());
  r.k_candidate = static_cast<int>(a.candidate.descriptors.size());
  r.matches = static_cast<int>(a.matches.size());
  r.ratio = static_cast<double>(r.matches) / std::max(1, std::min(r.k_normal, r.k_candidate));
  r.thresholds = params_.thresholds;
  r.decision = decide(r.ratio, r.thresholds);
  r.dropped_normal = static_cast<int>(a.normal.dropped_at_border);
  r.dropped_candidate = static_cast<int>(a.candidate.dropped_at_border);
  return a;
}

FilterReport MatchFilter::evaluate(const ImageBuffer& normal, const ImageBuffer& candidate) const {
  FilterReport r = analyze(normal, candidate).report;
  if (std::min(r.k_normal, r.k_candidate) < params_.min_keypoints) {
    throw Error(ErrorCode::DegenerateImage,
                "too few keypoints to gate (" + std::to_string(r.k_normal) + " normal, " +
                    std::to_string(r.k_candidate) + " candidate)");
  }
  return r;
}

}  // namespace defectforge
