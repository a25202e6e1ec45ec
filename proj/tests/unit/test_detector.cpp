#include <doctest.h>

#include <cmath>
#include <bit>
#include <fstream>

#include "defectforge/detector.hpp"
#include "defectforge/error.hpp"
#include "defectforge/genclient.hpp"
#include "defectforge/rulegen.hpp"
#include "defectforge/toybench.hpp"
#include "oracles.hpp"

using namespace defectforge;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::InvalidArgument;
}

ImageBuffer toy(std::uint64_t seed, int kind = -1) {
  Rng r(seed);
  return render_product(product_from_index(kind < 0 ? static_cast<int>(seed % 3) : kind), r);
}

Eigen::MatrixXd random_matrix(int rows, int cols, Rng& r) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.uniform();
  return m;
}

}  // namespace

TEST_CASE("patch grid sizes") {
  CHECK(extract_patches(ImageBuffer(16, 16, 1), 16, 16).cols() == 1);
  CHECK(extract_patches(ImageBuffer(64, 64, 1), 16, 16).cols() == 16);
  CHECK(extract_patches(ImageBuffer(64, 64, 1), 16, 8).cols() == 49);
  CHECK(patch_count(64, 64, 16, 8) == 49);
  CHECK(code_of([] { extract_patches(ImageBuffer(8, 8, 1), 16, 8); }) == ErrorCode::PatchTooLarge);

  std::vector<std::uint8_t> px(16);
  for (int i = 0; i < 16; ++i) px[i] = static_cast<std::uint8_t>(i * 17);
  const Eigen::MatrixXd p = extract_patches(ImageBuffer(4, 4, 1, px), 2, 2);
  CHECK(p.rows() == 4);
  CHECK(p.cols() == 4);
  // Second patch in row-major order starts at (2, 0).
  CHECK(p(0, 1) == doctest::Approx(2 * 17 / 255.0));
  CHECK(p(2, 1) == doctest::Approx(6 * 17 / 255.0));
}

TEST_CASE("forward: zero model, identity layer, hand-evaluated tiny net") {
  Rng r(1);
  AutoencoderModel z = AutoencoderModel::create({4, 3, 4}, r, 2, 2);
  for (auto& w : z.weights) w.setZero();
  for (auto& b : z.biases) b.setZero();
  CHECK(z.forward(Eigen::VectorXd::Ones(4)).isZero());

  AutoencoderModel id = AutoencoderModel::create({3, 3}, r, 1, 1);
  id.weights[0] = Eigen::MatrixXd::Identity(3, 3);
  id.biases[0].setZero();
  const Eigen::Vector3d x(0.1, -0.4, 0.7);
  CHECK(id.forward(x).isApprox(x));

  // d=2, hidden 2: h = leaky(W1 x + b1), y = W2 h + b2.
  AutoencoderModel t = AutoencoderModel::create({2, 2, 2}, r, 1, 1);
  t.weights[0] << 1.0, -2.0, 0.5, 1.0;
  t.biases[0] << 0.0, 0.1;
  t.weights[1] << 2.0, 0.0, -1.0, 1.0;
  t.biases[1] << 0.5, 0.0;
  // x = (1, 1): pre = (-1, 1.6) -> h = (-0.01, 1.6) -> y = (0.48, 1.61).
  const Eigen::Vector2d y = t.forward(Eigen::Vector2d(1, 1));
  CHECK(y(0) == doctest::Approx(0.48));
  CHECK(y(1) == doctest::Approx(1.61));
  CHECK(code_of([&] { t.forward(Eigen::VectorXd::Ones(3)); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("init bounds and parameter count") {
  Rng r(2);
  const AutoencoderModel m = AutoencoderModel::create_default(r);
  CHECK(m.sizes == std::vector<int>{256, 128, 32, 128, 256});
  CHECK(m.parameter_count() == static_cast<std::size_t>(256 * 128 + 128 + 128 * 32 + 32 + 32 * 128 + 128 + 128 * 256 + 256));
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    const double bound = std::sqrt(6.0 / (m.sizes[l] + m.sizes[l + 1]));
    CHECK(m.weights[l].cwiseAbs().maxCoeff() <= bound);
    CHECK(m.biases[l].isZero());
  }
}

TEST_CASE("backprop matches central differences on a d=9 model") {
  Rng r(3);
  const AutoencoderModel m = AutoencoderModel::create({9, 6, 3, 6, 9}, r, 3, 3);
  const Eigen::MatrixXd in = random_matrix(9, 5, r), tgt = random_matrix(9, 5, r);
  const Gradients g = compute_gradients(m, in, tgt);
  CHECK(g.loss == doctest::Approx(batch_loss(m, in, tgt)));
  const auto num = oracle::finite_differences(m, in, tgt, 1e-4);
  double worst = 0;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    for (Eigen::Index k = 0; k < g.weights[l].size(); ++k) {
      const double a = g.weights[l].data()[k], n = num.weights[l][static_cast<std::size_t>(k)];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}));
    }
    for (Eigen::Index k = 0; k < g.biases[l].size(); ++k) {
      const double a = g.biases[l](k), n = num.biases[l][static_cast<std::size_t>(k)];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("train_step: null update, descent, non-finite loss") {
  Rng r(4);
  AutoencoderModel m = AutoencoderModel::create({9, 6, 9}, r, 3, 3);
  const Eigen::MatrixXd in = random_matrix(9, 8, r), tgt = random_matrix(9, 8, r);
  const AutoencoderModel before = m;
  SgdMomentum opt;
  const double l0 = train_step(m, opt, in, tgt, 0.0);
  CHECK(m == before);
  CHECK(l0 == doctest::Approx(batch_loss(before, in, tgt)));

  SgdMomentum opt2;
  double last = 0;
  for (int i = 0; i < 200; ++i) last = train_step(m, opt2, in, tgt, 0.01);
  CHECK(last < l0);

  Eigen::MatrixXd bad = in;
  bad(0, 0) = std::nan("");
  SgdMomentum opt3;
  CHECK(code_of([&] { train_step(m, opt3, bad, tgt, 0.01); }) == ErrorCode::NonFiniteLoss);
}

TEST_CASE("schedules") {
  TrainSchedule s;
  s.epochs = 10;
  s.learning_rate = 0.3;
  const TrainSchedule f = s.finetune_default();
  CHECK(f.stage == "finetune");
  CHECK(f.learning_rate == doctest::Approx(0.03));
  CHECK(f.epochs == 2);
  s.epochs = 1;
  CHECK(s.finetune_default().epochs == 1);
  const nlohmann::json j = s;
  CHECK(j.get<TrainSchedule>().learning_rate == s.learning_rate);
  CHECK(code_of([] { nlohmann::json{{"learning_rate", 0.0}}.get<TrainSchedule>(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("train: zero epochs, determinism, loss decreases, errors") {
  std::vector<TrainPair> data;
  for (std::uint64_t s = 0; s < 12; ++s) {
    const ImageBuffer n = toy(s);
    Rng r(s + 50);
    data.push_back({gaussian_corrupt(n, perlin_mask(64, 64, PerlinParams{}, Rng(s)), 40, r).image, n});
  }
  Rng r(5);
  const AutoencoderModel init = AutoencoderModel::create_default(r);
  TrainSchedule s{"single", 0, 32, 0.3, 1.0, 9};
  AutoencoderModel m0 = init;
  CHECK(train(m0, data, s).steps == 0);
  CHECK(m0 == init);

  s.epochs = 4;
  AutoencoderModel a = init, b = init;
  const TrainResult ra = train(a, data, s);
  const TrainResult rb = train(b, data, s);
  CHECK(a == b);
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(ra.epoch_loss.size() == 4);
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
  CHECK(ra.steps == static_cast<std::size_t>(4 * ((12 * 49 + 31) / 32)));

  CHECK(code_of([&] { train(a, {}, s); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { train(a, {{ImageBuffer(64, 64, 1), ImageBuffer(32, 32, 1)}}, s); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("scores: identity model scores zero, repeatable, corrupted above normal") {
  Rng r(6);
  AutoencoderModel id = AutoencoderModel::create({4, 4}, r, 2, 2);
  id.weights[0] = Eigen::MatrixXd::Identity(4, 4);
  id.biases[0].setZero();
  const ScoreRecord z = anomaly_score(id, toy(1), "x");
  CHECK(z.score == doctest::Approx(0.0));
  CHECK(z.score_map.size() == 32 * 32);

  Rng r2(7);
  AutoencoderModel m = AutoencoderModel::create_default(r2);
  std::vector<TrainPair> data;
  for (std::uint64_t s = 0; s < 30; ++s) data.push_back({toy(s), toy(s)});
  train(m, data, TrainSchedule{"single", 6, 32, 0.3, 1.0, 1});
  const ScoreRecord a = anomaly_score(m, toy(100), "n"), b = anomaly_score(m, toy(100), "n");
  CHECK(a == b);
  double mean_n = 0, sum_mean = 0;
  for (const double v : a.score_map) sum_mean += v;
  CHECK(a.score == doctest::Approx(sum_mean / a.score_map.size()));
  double mean_a = 0;
  MockConfig mc;
  for (std::uint64_t s = 200; s < 220; ++s) {
    mean_n += anomaly_score(m, toy(s)).score;
    GenerationRequest req{"held-" + std::to_string(s), toy(s), "", {}};
    mean_a += anomaly_score(m, mock_transform(mc, req)).score;
  }
  CHECK(mean_a > mean_n);
  CHECK(code_of([&] { anomaly_score(m, ImageBuffer(8, 8, 1)); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("auroc: hand case, extremes, oracle agreement, monotone invariance") {
  auto recs = [](std::vector<double> n, std::vector<double> a) {
    std::vector<ScoreRecord> out;
    for (double v : n) out.push_back({"", Label::Normal, v, {}});
    for (double v : a) out.push_back({"", Label::Anomalous, v, {}});
    return out;
  };
  CHECK(compute_auroc(recs({0.1, 0.2, 0.3}, {0.25, 0.4})) == doctest::Approx(5.0 / 6.0));
  CHECK(compute_auroc(recs({0.1, 0.2}, {0.3, 0.4})) == 1.0);
  CHECK(compute_auroc(recs({1, 1, 1}, {1, 1})) == 0.5);
  CHECK(code_of([&] { compute_auroc(recs({1, 2}, {})); }) == ErrorCode::OneClassOnly);

  Rng r(8);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> n, a;
    const int nn = 1 + static_cast<int>(r.below(60)), na = 1 + static_cast<int>(r.below(60));
    for (int i = 0; i < nn; ++i) n.push_back(static_cast<double>(r.below(20)));
    for (int i = 0; i < na; ++i) a.push_back(static_cast<double>(r.below(20)) + 3);
    const double auc = compute_auroc(recs(n, a));
    CHECK(auc == oracle::brute_force_auroc(n, a));
    for (auto& v : n) v = std::exp(v / 3.0);
    for (auto& v : a) v = std::exp(v / 3.0);
    CHECK(compute_auroc(recs(n, a)) == auc);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  Rng r(9);
  const AutoencoderModel m = AutoencoderModel::create({16, 8, 16}, r, 4, 4);
  const auto dir = oracle::scratch_dir("ckpt");
  m.save(dir / "m.dfae");
  const AutoencoderModel back = AutoencoderModel::load(dir / "m.dfae");
  CHECK(back == m);
  CHECK(back.serialize() == m.serialize());
  const ImageBuffer img = toy(3);
  CHECK(anomaly_score(back, img) == anomaly_score(m, img));

  // magic, u32 version, u32 layer count, u32 sizes, u32 patch, u32 stride,
  // f64 leak, then f64 parameters, all little-endian.
  const auto bytes = m.serialize();
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DFAE");
  CHECK(bytes[4] == AutoencoderModel::kVersion);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 16);
  CHECK(bytes[16] == 8);
  const std::size_t header = 4 + 4 + 4 + 3 * 4 + 4 + 4 + 8;
  CHECK(bytes.size() == header + 8 * m.parameter_count());
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes[header + i]} << (8 * i);
  CHECK(std::bit_cast<double>(bits) == m.weights[0](0, 0));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK(code_of([&] { AutoencoderModel::deserialize(bad); }) == ErrorCode::UnsupportedFormat);
  auto ver = bytes;
  ver[4] = 99;
  CHECK(code_of([&] { AutoencoderModel::deserialize(ver); }) == ErrorCode::UnsupportedFormat);
  auto extra = bytes;
  extra.push_back(0);
  CHECK(code_of([&] { AutoencoderModel::deserialize(extra); }) == ErrorCode::CorruptHeader);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK(code_of([&] { AutoencoderModel::deserialize(cut); }) == ErrorCode::CorruptHeader);
  CHECK(code_of([&] { AutoencoderModel::load(dir / "none.dfae"); }) == ErrorCode::NotFound);
}

TEST_CASE("score records serialise") {
  const ScoreRecord r{"a", Label::Anomalous, 0.25, {0.5, 0.0}};
  const nlohmann::json j = r;
  CHECK(j["label"] == "anomalous");
  CHECK(j.get<ScoreRecord>() == r);
}
