#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "defectforge/image.hpp"

namespace defectforge {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double response = 0.0;
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct HarrisParams {
  double k = 0.04;
  int window = 7;  // Gaussian window side
  double sigma = 1.5;
  // 3 rather than 5: at 64x64 only the central 34x34 keeps a full descriptor
  // patch, and a wider radius starves scrambled candidates of keypoints.
  int nms_radius = 3;
  int max_kp = 512;
  // Response floor; gradients are taken on intensities scaled to [0, 1].
  double threshold = 1e-3;
};

// Harris corners: R = det(M) - k trace(M)^2 over Sobel gradients, Gaussian
// weighted, non-maximum suppressed, strongest max_kp kept. Throws
// ImageTooSmall when the image is smaller than the window.
std::vector<Keypoint> detect_keypoints(const ImageBuffer& gray, const HarrisParams& params = {});

inline constexpr int kDescriptorBits = 256;
inline constexpr int kPatchSize = 31;

struct Descriptor {
  std::array<std::uint64_t, kDescriptorBits / 64> words{};
  bool bit(int i) const { return (words[i / 64] >> (i % 64)) & 1u; }
  void set(int i) { words[i / 64] |= std::uint64_t{1} << (i % 64); }
  friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

int hamming(const Descriptor& a, const Descriptor& b) noexcept;

// 256 point pairs inside the 31x31 patch, drawn once from a seed and shared by
// every descriptor of a run.
class SamplingPattern {
 public:
  struct Pair {
    int px, py, qx, qy;
  };
  explicit SamplingPattern(std::uint64_t seed = 0x5eedULL);
  const std::vector<Pair>& pairs() const noexcept { return pairs_; }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Pair> pairs_;
};

struct DescribedKeypoints {
  std::vector<Keypoint> keypoints;  // only those with a full patch
  std::vector<Descriptor> descriptors;
  std::size_t dropped_at_border = 0;
};

// bit i = smoothed(p_i) < smoothed(q_i) after 3x3 box smoothing.
DescribedKeypoints compute_descriptors(const ImageBuffer& gray, const std::vector<Keypoint>& kps,
                                       const SamplingPattern& pattern);

struct MatchParams {
  double ratio = 0.8;
  int max_dist = 64;
};

using Match = std::pair<int, int>;

// Mutual nearest neighbours under Hamming distance. A pair survives when its
// distance is <= max_dist and below ratio times the second-nearest distance on
// both sides, so ties never match and the result ignores input order.
std::vector<Match> match_descriptors(const std::vector<Descriptor>& a, const std::vector<Descriptor>& b,
                                     const MatchParams& params = {});

enum class Decision { NoAnomaly, Desired, Irrelevant };
std::string to_string(Decision d);
Decision decision_from_string(const std::string& s);

struct Thresholds {
  double low = 0.05;
  double high = 0.90;
};

// NoAnomaly when ratio > high, Irrelevant when ratio <= low, Desired otherwise.
Decision decide(double ratio, const Thresholds& t);

struct FilterParams {
  HarrisParams harris;
  MatchParams match;
  Thresholds thresholds;
  int min_keypoints = 8;
  // Matches whose keypoints lie further apart than this (pixels) are dropped:
  // the editing service keeps the product in place. Negative disables.
  double max_shift = 4.0;
  std::uint64_t pattern_seed = 0x5eedULL;
};

struct FilterReport {
  int k_normal = 0;
  int k_candidate = 0;
  int matches = 0;
  double ratio = 0.0;
  Decision decision = Decision::Irrelevant;
  Thresholds thresholds;
  int dropped_normal = 0;
  int dropped_candidate = 0;
};

void to_json(nlohmann::json& j, const FilterReport& r);
void from_json(const nlohmann::json& j, FilterReport& r);

// Detect, describe and match once; keeps the keypoints and matches for
// visualisation.
struct MatchAnalysis {
  DescribedKeypoints normal;
  DescribedKeypoints candidate;
  std::vector<Match> matches;
  FilterReport report;
};

class MatchFilter {
 public:
  explicit MatchFilter(FilterParams params = {});

  const FilterParams& params() const noexcept { return params_; }

  // No keypoint-count check; always produces a report.
  MatchAnalysis analyze(const ImageBuffer& normal, const ImageBuffer& candidate) const;
  // Throws DimensionMismatch on shape mismatch and DegenerateImage when either
  // side has fewer than min_keypoints described keypoints.
  FilterReport evaluate(const ImageBuffer& normal, const ImageBuffer& candidate) const;

 private:
  FilterParams params_;
  SamplingPattern pattern_;
};

inline FilterReport filter_decision(const ImageBuffer& normal, const ImageBuffer& candidate,
                                    const FilterParams& params = {}) {
  return MatchFilter(params).evaluate(normal, candidate);
}

}  // namespace defectforge
