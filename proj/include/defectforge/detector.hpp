#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "defectforge/image.hpp"
#include "defectforge/rng.hpp"

namespace defectforge {

// Patch-wise fully connected autoencoder. Hidden layers use a leaky rectifier,
// the output layer is affine. Weights are stored out x in.
struct AutoencoderModel {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<int> sizes;  // e.g. {256, 128, 32, 128, 256}
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  double leak = 0.01;
  int patch = 16;
  int stride = 8;

  // Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.
  static AutoencoderModel create(std::vector<int> sizes, Rng& rng, int patch = 16, int stride = 8);
  // Default geometry: patch^2 -> 128 -> 32 -> 128 -> patch^2.
  static AutoencoderModel create_default(Rng& rng, int patch = 16, int stride = 8);

  int input_dim() const { return sizes.front(); }
  int output_dim() const { return sizes.back(); }
  std::size_t parameter_count() const;

  // Throws DimensionMismatch when x.size() != input_dim().
  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  // Columns are samples.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x) const;

  // Versioned little-endian checkpoint.
  void save(const std::filesystem::path& path) const;
  static AutoencoderModel load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static AutoencoderModel deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

  friend bool operator==(const AutoencoderModel& a, const AutoencoderModel& b);
};

// Row-major grid of patches, each flattened row-major and scaled to [0, 1].
// Columns of the result are patches. Throws PatchTooLarge.
Eigen::MatrixXd extract_patches(const ImageBuffer& gray, int patch, int stride);
int patch_count(int width, int height, int patch, int stride);

struct Gradients {
  double loss = 0.0;
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

// Loss = mean over columns of ||forward(input) - target||^2 / d.
double batch_loss(const AutoencoderModel& model, const Eigen::MatrixXd& input, const Eigen::MatrixXd& target);
Gradients compute_gradients(const AutoencoderModel& model, const Eigen::MatrixXd& input, const Eigen::MatrixXd& target);

struct SgdMomentum {
  double momentum = 0.9;
  std::vector<Eigen::MatrixXd> velocity_w;
  std::vector<Eigen::VectorXd> velocity_b;
};

// One momentum-SGD step. Returns the loss before the update; throws
// NonFiniteLoss when it is not finite.
double train_step(AutoencoderModel& model, SgdMomentum& opt, const Eigen::MatrixXd& input,
                  const Eigen::MatrixXd& target, double lr);

struct TrainSchedule {
  std::string stage = "single";  // pretrain | finetune | single
  int epochs = 5;
  int batch_size = 64;
  double learning_rate = 0.01;
  double lr_decay = 1.0;
  std::uint64_t seed = 0;

  // lr / 10 and 20% of the epochs (at least one), labelled finetune.
  TrainSchedule finetune_default() const;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

// A corrupted image and the clean image it should reconstruct to.
struct TrainPair {
  ImageBuffer input;
  ImageBuffer target;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

// Epochs of seeded-shuffled minibatches over every (pair, patch) position.
TrainResult train(AutoencoderModel& model, const std::vector<TrainPair>& data, const TrainSchedule& schedule);

enum class Label { Normal, Anomalous };

struct ScoreRecord {
  std::string id;
  Label label = Label::Normal;
  double score = 0.0;
  std::vector<double> score_map;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

void to_json(nlohmann::json& j, const ScoreRecord& r);
void from_json(const nlohmann::json& j, ScoreRecord& r);

// Per-patch mean squared reconstruction error; score is their mean.
ScoreRecord anomaly_score(const AutoencoderModel& model, const ImageBuffer& img, std::string id = {},
                          Label label = Label::Normal);

// Rank statistic with mid-ranks for ties: P(anom > norm) + P(tie) / 2.
// Throws OneClassOnly unless both labels are present.
double compute_auroc(const std::vector<ScoreRecord>& records);

}  // namespace defectforge
