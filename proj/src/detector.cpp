#include "defectforge/detector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "defectforge/error.hpp"

namespace defectforge {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'A', 'E'};

Eigen::MatrixXd leaky(const Eigen::MatrixXd& z, double leak) {
  return z.unaryExpr([leak](double v) { return v > 0.0 ? v : leak * v; });
}

}  // namespace

AutoencoderModel AutoencoderModel::create(std::vector<int> sizes, Rng& rng, int patch, int stride) {
  if (sizes.size() < 2) throw Error(ErrorCode::InvalidArgument, "model needs at least one layer");
  AutoencoderModel m;
  m.sizes = std::move(sizes);
  m.patch = patch;
  m.stride = stride;
  for (std::size_t l = 0; l + 1 < m.sizes.size(); ++l) {
    const int in = m.sizes[l], out = m.sizes[l + 1];
    const double bound = std::sqrt(6.0 / (in + out));
    Eigen::MatrixXd w(out, in);
    // Filled in row-major order so the stream layout matches the checkpoint.
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = rng.uniform(-bound, bound);
    m.weights.push_back(std::move(w));
    m.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return m;
}

AutoencoderModel AutoencoderModel::create_default(Rng& rng, int patch, int stride) {
  const int d = patch * patch;
  return create({d, 128, 32, 128, d}, rng, patch, stride);
}

std::size_t AutoencoderModel::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

Eigen::MatrixXd AutoencoderModel::forward_batch(const Eigen::MatrixXd& x) const {
  if (x.rows() != input_dim()) throw Error(ErrorCode::DimensionMismatch, "input does not match model dimension");
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Eigen::MatrixXd z = weights[l] * a;
    z.colwise() += biases[l];
    a = (l + 1 < weights.size()) ? leaky(z, leak) : std::move(z);
  }
  return a;
}

Eigen::VectorXd AutoencoderModel::forward(const Eigen::VectorXd& x) const {
  return forward_batch(x);
}

bool operator==(const AutoencoderModel& a, const AutoencoderModel& b) {
  if (a.sizes != b.sizes || a.leak != b.leak || a.patch != b.patch || a.stride != b.stride) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  }
  return true;
}

// ---- Checkpoint -------------------------------------------------------------
// magic "DFAE" | u32 version | u32 layer_count | u32 sizes[layer_count + 1]
// | u32 patch | u32 stride | f64 leak | per layer: weights row-major, biases

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string origin) : b_(b), origin_(std::move(origin)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw Error(ErrorCode::CorruptHeader, "truncated model checkpoint", origin_);
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> AutoencoderModel::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(weights.size()));
  for (int s : sizes) put_u32(out, static_cast<std::uint32_t>(s));
  put_u32(out, static_cast<std::uint32_t>(patch));
  put_u32(out, static_cast<std::uint32_t>(stride));
  put_f64(out, leak);
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (Eigen::Index r = 0; r < weights[l].rows(); ++r)
      for (Eigen::Index c = 0; c < weights[l].cols(); ++c) put_f64(out, weights[l](r, c));
    for (Eigen::Index r = 0; r < biases[l].size(); ++r) put_f64(out, biases[l](r));
  }
  return out;
}

AutoencoderModel AutoencoderModel::deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw Error(ErrorCode::UnsupportedFormat, "not a model checkpoint", origin);
  }
  const std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end());
  Reader rd(body, origin);
  const std::uint32_t version = rd.u32();
  if (version != kVersion) {
    throw Error(ErrorCode::UnsupportedFormat, "unsupported checkpoint version " + std::to_string(version), origin);
  }
  const std::uint32_t layers = rd.u32();
  if (layers == 0 || layers > 64) throw Error(ErrorCode::CorruptHeader, "implausible layer count", origin);
  AutoencoderModel m;
  for (std::uint32_t i = 0; i <= layers; ++i) {
    const std::uint32_t s = rd.u32();
    if (s == 0 || s > (1u << 20)) throw Error(ErrorCode::CorruptHeader, "implausible layer size", origin);
    m.sizes.push_back(static_cast<int>(s));
  }
  m.patch = static_cast<int>(rd.u32());
  m.stride = static_cast<int>(rd.u32());
  m.leak = rd.f64();
  for (std::uint32_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd w(m.sizes[l + 1], m.sizes[l]);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rd.f64();
    Eigen::VectorXd b(m.sizes[l + 1]);
    for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = rd.f64();
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  if (!rd.done()) throw Error(ErrorCode::CorruptHeader, "trailing bytes in model checkpoint", origin);
  return m;
}

void AutoencoderModel::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open checkpoint for writing", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "checkpoint write failed", path.string());
}

AutoencoderModel AutoencoderModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "checkpoint not found", path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

// ---- Patches ----------------------------------------------------------------

int patch_count(int width, int height, int patch, int stride) {
  if (patch > std::min(width, height)) return 0;
  return ((width - patch) / stride + 1) * ((height - patch) / stride + 1);
}

namespace {

void copy_patch(const ImageBuffer& gray, int x0, int y0, int patch, double* dst) {
  const auto px = gray.pixels();
  for (int y = 0; y < patch; ++y) {
    const std::uint8_t* row = px.data() + static_cast<std::size_t>(y0 + y) * gray.width() + x0;
    for (int x = 0; x < patch; ++x) dst[y * patch + x] = row[x] / 255.0;
  }
}

}  // namespace

Eigen::MatrixXd extract_patches(const ImageBuffer& img, int patch, int stride) {
  if (patch < 1 || stride < 1) throw Error(ErrorCode::InvalidArgument, "patch and stride must be positive");
  if (patch > std::min(img.width(), img.height())) {
    throw Error(ErrorCode::PatchTooLarge, "patch larger than image");
  }
  const ImageBuffer gray = to_grayscale(img);
  const int nx = (gray.width() - patch) / stride + 1;
  const int ny = (gray.height() - patch) / stride + 1;
  Eigen::MatrixXd out(patch * patch, nx * ny);
  for (int gy = 0; gy < ny; ++gy)
    for (int gx = 0; gx < nx; ++gx) copy_patch(gray, gx * stride, gy * stride, patch, out.col(gy * nx + gx).data());
  return out;
}

// ---- Gradients --------------------------------------------------------------

double batch_loss(const AutoencoderModel& model, const Eigen::MatrixXd& input, const Eigen::MatrixXd& target) {
  const Eigen::MatrixXd diff = model.forward_batch(input) - target;
  return diff.squaredNorm() / (static_cast<double>(diff.rows()) * diff.cols());
}

Gradients compute_gradients(const AutoencoderModel& model, const Eigen::MatrixXd& input, const Eigen::MatrixXd& target) {
  if (input.cols() == 0) throw Error(ErrorCode::InvalidArgument, "empty batch");
  if (input.rows() != model.input_dim() || target.rows() != model.output_dim() || target.cols() != input.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "batch does not match model dimensions");
  }
  const std::size_t layers = model.weights.size();
  std::vector<Eigen::MatrixXd> acts{input};  // activations per layer input
  std::vector<Eigen::MatrixXd> pre;          // pre-activations
  acts.reserve(layers + 1);
  pre.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd z = model.weights[l] * acts.back();
    z.colwise() += model.biases[l];
    pre.push_back(z);
    acts.push_back(l + 1 < layers ? leaky(z, model.leak) : z);
  }

  const double scale = static_cast<double>(target.rows()) * target.cols();
  const Eigen::MatrixXd diff = acts.back() - target;
  Gradients g;
  g.loss = diff.squaredNorm() / scale;
  g.weights.resize(layers);
  g.biases.resize(layers);

  Eigen::MatrixXd delta = (2.0 / scale) * diff;  // dL/dz of the output layer
  for (std::size_t l = layers; l-- > 0;) {
    g.weights[l].noalias() = delta * acts[l].transpose();
    g.biases[l] = delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd back = model.weights[l].transpose() * delta;
    const double leak = model.leak;
    delta = back.binaryExpr(pre[l - 1], [leak](double d, double z) { return z > 0.0 ? d : leak * d; });
  }
  return g;
}

double train_step(AutoencoderModel& model, SgdMomentum& opt, const Eigen::MatrixXd& input,
                  const Eigen::MatrixXd& target, double lr) {
  Gradients g = compute_gradients(model, input, target);
  if (!std::isfinite(g.loss)) throw Error(ErrorCode::NonFiniteLoss, "training loss is not finite");
  if (opt.velocity_w.size() != model.weights.size()) {
    opt.velocity_w.clear();
    opt.velocity_b.clear();
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
      opt.velocity_w.push_back(Eigen::MatrixXd::Zero(model.weights[l].rows(), model.weights[l].cols()));
      opt.velocity_b.push_back(Eigen::VectorXd::Zero(model.biases[l].size()));
    }
  }
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    opt.velocity_w[l] = opt.momentum * opt.velocity_w[l] + g.weights[l];
    opt.velocity_b[l] = opt.momentum * opt.velocity_b[l] + g.biases[l];
    model.weights[l] -= lr * opt.velocity_w[l];
    model.biases[l] -= lr * opt.velocity_b[l];
  }
  return g.loss;
}

// ---- Training ---------------------------------------------------------------

TrainSchedule TrainSchedule::finetune_default() const {
  TrainSchedule s = *this;
  s.stage = "finetune";
  s.learning_rate = learning_rate / 10.0;
  s.epochs = std::max(1, static_cast<int>(std::lround(epochs * 0.2)));
  return s;
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"stage", s.stage},
                     {"epochs", s.epochs},
                     {"batch_size", s.batch_size},
                     {"learning_rate", s.learning_rate},
                     {"lr_decay", s.lr_decay},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, TrainSchedule& s) {
  TrainSchedule d;
  s.stage = j.value("stage", d.stage);
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.learning_rate = j.value("learning_rate", d.learning_rate);
  s.lr_decay = j.value("lr_decay", d.lr_decay);
  s.seed = j.value("seed", d.seed);
  if (!(s.learning_rate > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be > 0");
  if (s.epochs < 0 || s.batch_size < 1) throw Error(ErrorCode::InvalidArgument, "bad epochs or batch_size");
}

TrainResult train(AutoencoderModel& model, const std::vector<TrainPair>& data, const TrainSchedule& schedule) {
  if (data.empty()) throw Error(ErrorCode::InvalidArgument, "training dataset is empty");
  TrainResult result;
  if (schedule.epochs <= 0) return result;

  const int patch = model.patch, stride = model.stride;
  if (patch * patch != model.input_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "model input does not match its patch geometry");
  }
  std::vector<ImageBuffer> inputs, targets;
  inputs.reserve(data.size());
  targets.reserve(data.size());
  for (const auto& p : data) {
    if (p.input.width() != p.target.width() || p.input.height() != p.target.height()) {
      throw Error(ErrorCode::DimensionMismatch, "training pair images differ in size");
    }
    inputs.push_back(to_grayscale(p.input));
    targets.push_back(to_grayscale(p.target));
  }

  struct Slot {
    std::uint32_t item;
    std::uint16_t x, y;
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const int w = inputs[i].width(), h = inputs[i].height();
    if (patch > std::min(w, h)) throw Error(ErrorCode::PatchTooLarge, "patch larger than training image");
    for (int y = 0; y + patch <= h; y += stride)
      for (int x = 0; x + patch <= w; x += stride)
        slots.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y)});
  }

  const Rng base(schedule.seed);
  SgdMomentum opt;
  const int d = patch * patch;
  double lr = schedule.learning_rate;
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    Rng shuffle = base.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = slots.size(); i > 1; --i) std::swap(slots[i - 1], slots[shuffle.below(i)]);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < slots.size(); start += static_cast<std::size_t>(schedule.batch_size)) {
      const std::size_t n = std::min(slots.size() - start, static_cast<std::size_t>(schedule.batch_size));
      Eigen::MatrixXd in(d, static_cast<Eigen::Index>(n)), tg(d, static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        const Slot& s = slots[start + k];
        copy_patch(inputs[s.item], s.x, s.y, patch, in.col(static_cast<Eigen::Index>(k)).data());
        copy_patch(targets[s.item], s.x, s.y, patch, tg.col(static_cast<Eigen::Index>(k)).data());
      }
      loss_sum += train_step(model, opt, in, tg, lr);
      ++batches;
      ++result.steps;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    lr *= schedule.lr_decay;
  }
  return result;
}

// ---- Scoring ----------------------------------------------------------------

ScoreRecord anomaly_score(const AutoencoderModel& model, const ImageBuffer& img, std::string id, Label label) {
  if (model.patch * model.patch != model.input_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "model input does not match its patch geometry");
  }
  if (model.patch > std::min(img.width(), img.height())) {
    throw Error(ErrorCode::DimensionMismatch, "image smaller than model patch", id);
  }
  const Eigen::MatrixXd x = extract_patches(img, model.patch, model.stride);
  const Eigen::MatrixXd recon = model.forward_batch(x);
  ScoreRecord r;
  r.id = std::move(id);
  r.label = label;
  r.score_map.resize(static_cast<std::size_t>(x.cols()));
  double sum = 0.0;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double e = (recon.col(c) - x.col(c)).squaredNorm() / static_cast<double>(x.rows());
    r.score_map[static_cast<std::size_t>(c)] = e;
    sum += e;
  }
  r.score = sum / static_cast<double>(x.cols());
  return r;
}

void to_json(nlohmann::json& j, const ScoreRecord& r) {
  j = nlohmann::json{{"id", r.id},
                     {"label", r.label == Label::Anomalous ? "anomalous" : "normal"},
                     {"score", r.score},
                     {"score_map", r.score_map}};
}

void from_json(const nlohmann::json& j, ScoreRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.label = j.at("label").get<std::string>() == "anomalous" ? Label::Anomalous : Label::Normal;
  r.score = j.at("score").get<double>();
  r.score_map = j.value("score_map", std::vector<double>{});
}

double compute_auroc(const std::vector<ScoreRecord>& records) {
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return records[a].score < records[b].score; });

  std::uint64_t n_anom = 0, n_norm = 0;
  // Twice the rank sum of anomalies; mid-ranks of tie groups are (lo + hi) / 2
  // with 1-based ranks, so doubling keeps everything integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && records[order[j]].score == records[order[i]].score) ++j;
    const std::uint64_t twice_mid = (i + 1) + j;  // (i+1) + (j) = lo + hi
    for (std::size_t k = i; k < j; ++k) {
      if (records[order[k]].label == Label::Anomalous) {
        ++n_anom;
        twice_rank_sum += twice_mid;
      } else {
        ++n_norm;
      }
    }
    i = j;
  }
  if (n_anom == 0 || n_norm == 0) throw Error(ErrorCode::OneClassOnly, "AUROC needs both normal and anomalous scores");
  // 2U = 2 * rank_sum - n_anom (n_anom + 1)
  const std::uint64_t twice_u = twice_rank_sum - n_anom * (n_anom + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_anom) * static_cast<double>(n_norm));
}

}  // namespace defectforge
