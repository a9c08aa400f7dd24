#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ttgp/data.hpp"
#include "ttgp/errors.hpp"
#include "ttgp/model.hpp"
#include "ttgp/training.hpp"

using namespace ttgp;

namespace {

// A file in the system temp directory that removes itself.
struct TempFile {
  std::string path;
  explicit TempFile(const std::string& stem) {
    static int counter = 0;
    path = (std::filesystem::temp_directory_path() /
            (stem + "." + std::to_string(::getpid()) + "." + std::to_string(counter++)))
               .string();
  }
  ~TempFile() {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
};

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  REQUIRE(f.good());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// y = sin(x) + N(0, 0.1²) on [-3, 3].
TrainData sine_data(int n_train, int n_heldout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-3.0, 3.0);
  std::normal_distribution<double> noise(0.0, 0.1);
  const int n = n_train + n_heldout;
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = ux(rng);
    y[i] = std::sin(X(i, 0)) + noise(rng);
  }
  TrainData d;
  d.X_train = X.topRows(n_train);
  d.y_train = y.head(n_train);
  d.X_heldout = X.bottomRows(n_heldout);
  d.y_heldout = y.tail(n_heldout);
  return d;
}

/// Three unit-variance Gaussian blobs with centers 6 standard deviations apart.
TrainData blob_data(int per_class, int heldout_per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const double cx[3] = {0.0, 6.0, 0.0};
  const double cy[3] = {0.0, 0.0, 6.0};
  TrainData d;
  const int tr = 3 * per_class;
  const int ho = 3 * heldout_per_class;
  d.X_train.resize(tr, 2);
  d.X_heldout.resize(ho, 2);
  int it = 0, ih = 0;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < per_class + heldout_per_class; ++i) {
      const double x = cx[c] + g(rng);
      const double y = cy[c] + g(rng);
      if (i < per_class) {
        d.X_train.row(it) << x, y;
        d.labels_train.push_back(c);
        ++it;
      } else {
        d.X_heldout.row(ih) << x, y;
        d.labels_heldout.push_back(c);
        ++ih;
      }
    }
  }
  return d;
}

/// Small regression set used by the determinism and checkpoint cases.
TrainData tiny_regression(int n_train, int n_heldout, int dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const int n = n_train + n_heldout;
  Eigen::MatrixXd X(n, dims);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int d = 0; d < dims; ++d) {
      X(i, d) = g(rng);
      s += X(i, d);
    }
    y[i] = std::sin(s) + 0.05 * g(rng);
  }
  TrainData d;
  d.X_train = X.topRows(n_train);
  d.y_train = y.head(n_train);
  d.X_heldout = X.bottomRows(n_heldout);
  d.y_heldout = y.tail(n_heldout);
  return d;
}

}  // namespace

TEST_CASE("config validation rejects bad fields before any work", "[training]") {
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());

  auto expect_bad = [](auto&& mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.epochs = -1; });
  expect_bad([](TrainConfig& c) { c.batch_size = 0; });
  expect_bad([](TrainConfig& c) { c.learning_rate = 0.0; });
  expect_bad([](TrainConfig& c) { c.beta1 = 1.0; });
  expect_bad([](TrainConfig& c) { c.beta2 = 0.0; });
  expect_bad([](TrainConfig& c) { c.epsilon = 0.0; });
  expect_bad([](TrainConfig& c) { c.m0 = 3; });
  expect_bad([](TrainConfig& c) { c.tt_rank = 0; });
  expect_bad([](TrainConfig& c) { c.embedding_dim = -1; });
  expect_bad([](TrainConfig& c) { c.init_noise_variance = 0.0; });
  expect_bad([](TrainConfig& c) { c.eval_every = 0; });
  expect_bad([](TrainConfig& c) { c.hyper_lr_scale = 0.0; });
  expect_bad([](TrainConfig& c) { c.hyper_lr_scale = 1.5; });
  expect_bad([](TrainConfig& c) { c.workers = 0; });

  // an invalid config fails before touching the data
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(TrainData{}, bad), ConfigError);
}

TEST_CASE("adam step matches the reference recurrence", "[training]") {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  SECTION("zero gradient leaves parameters unchanged and advances the step") {
    Eigen::VectorXd theta(3);
    theta << 1.0, -2.0, 0.5;
    const Eigen::VectorXd before = theta;
    AdamState st = AdamState::zero(3);
    adam_update(theta, Eigen::VectorXd::Zero(3), st, lr, b1, b2, eps);
    CHECK((theta - before).cwiseAbs().maxCoeff() == 0.0);
    CHECK(st.step == 1);
  }

  SECTION("first step moves each coordinate by about lr in the gradient direction") {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(3);
    Eigen::VectorXd g(3);
    g << 0.3, -2.0, 1e-3;
    AdamState st = AdamState::zero(3);
    adam_update(theta, g, st, lr, b1, b2, eps);
    for (int i = 0; i < 3; ++i)
      CHECK(theta[i] == Catch::Approx(lr * (g[i] > 0 ? 1.0 : -1.0)).epsilon(1e-4));
  }

  SECTION("two steps reproduce the hand-evaluated scalar recurrence") {
    const double g1 = 0.7, g2 = -0.2;
    double m = (1 - b1) * g1;
    double v = (1 - b2) * g1 * g1;
    double ref = 0.0;
    ref += lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
    m = b1 * m + (1 - b1) * g2;
    v = b2 * v + (1 - b2) * g2 * g2;
    ref += lr * (m / (1 - b1 * b1)) / (std::sqrt(v / (1 - b2 * b2)) + eps);

    Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
    AdamState st = AdamState::zero(1);
    Eigen::VectorXd grad(1);
    grad << g1;
    adam_update(theta, grad, st, lr, b1, b2, eps);
    grad << g2;
    adam_update(theta, grad, st, lr, b1, b2, eps);
    CHECK(theta[0] == Catch::Approx(ref).epsilon(1e-12));
    CHECK(st.step == 2);
  }

  SECTION("per-coordinate step scaling slows exactly the scaled entries") {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd g(2);
    g << 1.0, 1.0;
    Eigen::VectorXd scale(2);
    scale << 1.0, 0.1;
    AdamState st = AdamState::zero(2);
    adam_update(theta, g, st, lr, b1, b2, eps, &scale);
    CHECK(theta[1] == Catch::Approx(0.1 * theta[0]).epsilon(1e-12));
  }

  SECTION("shape mismatches are rejected") {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
    AdamState st = AdamState::zero(3);
    CHECK_THROWS_AS(adam_update(theta, Eigen::VectorXd::Zero(2), st, lr), ShapeError);
    AdamState st2 = AdamState::zero(2);
    CHECK_THROWS_AS(adam_update(theta, Eigen::VectorXd::Zero(3), st2, lr), ShapeError);
  }
}

TEST_CASE("parameter packing round-trips every block", "[training]") {
  const Grid grid = grid_build({{-1.0, 1.0}, {0.0, 2.0}}, 5);
  const RBFParams kernel = RBFParams::make(2, 0.8, 1.3, 0.2, false);
  LinearEmbedding emb = LinearEmbedding::random(2, 4, 11);
  TTGPModel m = init_model(Task::kClassification, grid, kernel, 2, 3, 21, emb);

  const PackLayout lay = pack_layout(m);
  Eigen::Index expect = 0;
  for (int c = 0; c < 3; ++c)
    for (int d = 0; d < 2; ++d) expect += m.mu[c].core(d).size();
  expect += 3 * 2 * 5 * 5;  // covariance factor parameters
  const Eigen::Index hyper_start = expect;
  expect += 2 + 2;          // two lengthscales, variance, noise
  expect += 2 * 4;          // projection
  CHECK(lay.total == expect);
  CHECK(lay.hyper_start == hyper_start);
  CHECK(lay.hyper_size == 4);

  Eigen::VectorXd theta = pack_params(m);
  CHECK(theta.size() == lay.total);
  CHECK(theta[lay.hyper_start + 2] == m.kernel.log_variance);
  CHECK(theta[lay.hyper_start + 3] == m.kernel.log_noise);

  // shifting the packed vector shifts every parameter, and packing again
  // reproduces the vector bit for bit
  TTGPModel m2 = m;
  Eigen::VectorXd shifted = theta.array() + 1.0;
  unpack_params(m2, shifted);
  CHECK(m2.kernel.log_variance == m.kernel.log_variance + 1.0);
  CHECK(m2.mu[0].core(0)(0, 0) == m.mu[0].core(0)(0, 0) + 1.0);
  CHECK(m2.embedding->projection(0, 0) == m.embedding->projection(0, 0) + 1.0);
  CHECK((pack_params(m2) - shifted).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(unpack_params(m2, Eigen::VectorXd::Zero(lay.total - 1)), ShapeError);

  // gradient packing uses the same layout
  const ModelWorkspace ws = build_workspace(m);
  Eigen::MatrixXd X(3, 4);
  X.setRandom();
  const std::vector<int> labels = {0, 2, 1};
  const ElboGrad g = elbo_grad_classification(m, ws, X, labels, 3);
  const Eigen::VectorXd gv = pack_grad(m, g);
  CHECK(gv.size() == lay.total);
  CHECK(gv[lay.hyper_start + 2] == g.d_log_variance);
  CHECK(gv[lay.hyper_start + 3] == g.d_log_noise);
}

TEST_CASE("block-reduced batch gradients agree with the direct evaluation", "[training]") {
  TrainData d = tiny_regression(70, 0, 2, 31);
  TrainConfig cfg;
  cfg.m0 = 5;
  cfg.tt_rank = 2;
  cfg.epochs = 0;
  const TrainResult init = train(d, cfg);
  const TTGPModel& m = init.model;
  const ModelWorkspace ws = build_workspace(m);

  const ElboGrad direct = elbo_grad_regression(m, ws, d.X_train, d.y_train, 70);
  const ElboGrad blocked = detail::batch_grad(m, ws, d.X_train, &d.y_train, nullptr, 1.0, 1);
  CHECK(blocked.value == Catch::Approx(direct.value).epsilon(1e-12));
  CHECK((pack_grad(m, blocked) - pack_grad(m, direct)).cwiseAbs().maxCoeff() <
        1e-10 * (1.0 + pack_grad(m, direct).cwiseAbs().maxCoeff()));

  // worker count must not change a single bit of the reduction
  const ElboGrad threaded = detail::batch_grad(m, ws, d.X_train, &d.y_train, nullptr, 1.0, 3);
  CHECK((pack_grad(m, threaded) - pack_grad(m, blocked)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(threaded.value == blocked.value);
}

TEST_CASE("equal seeds give bitwise-equal trajectories for any worker count", "[training]") {
  TrainData d = tiny_regression(60, 12, 2, 17);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 64;  // one 60-row batch → two reduction blocks
  cfg.m0 = 5;
  cfg.tt_rank = 2;
  cfg.seed = 5;

  const TrainResult a = train(d, cfg);
  const TrainResult b = train(d, cfg);
  cfg.workers = 3;
  const TrainResult c = train(d, cfg);

  REQUIRE(a.history.size() == 3);
  REQUIRE(b.history.size() == 3);
  REQUIRE(c.history.size() == 3);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].elbo == b.history[i].elbo);
    CHECK(a.history[i].metric == b.history[i].metric);
    CHECK(a.history[i].elbo == c.history[i].elbo);
    CHECK(a.history[i].metric == c.history[i].metric);
  }
  CHECK((pack_params(a.model) - pack_params(b.model)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((pack_params(a.model) - pack_params(c.model)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.adam.first - c.adam.first).cwiseAbs().maxCoeff() == 0.0);

  // different seed, different trajectory
  cfg.workers = 1;
  cfg.seed = 6;
  const TrainResult e = train(d, cfg);
  CHECK((pack_params(a.model) - pack_params(e.model)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("zero epochs returns the initialized model and empty history", "[training]") {
  TrainData d = tiny_regression(20, 5, 2, 3);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.m0 = 5;
  cfg.tt_rank = 2;
  const TrainResult r = train(d, cfg);
  CHECK(r.history.empty());
  CHECK(r.adam.step == 0);
  CHECK_NOTHROW(r.model.validate());
  // the model is usable straight away
  const ModelWorkspace ws = build_workspace(r.model);
  CHECK(std::isfinite(elbo_regression(r.model, ws, d.X_train, d.y_train, 20)));
}

TEST_CASE("one-dimensional sine regression reaches held-out r-squared 0.95", "[training]") {
  TrainData d = sine_data(400, 100, 123);
  TrainConfig cfg;
  cfg.task = Task::kRegression;
  cfg.epochs = 100;
  cfg.batch_size = 64;
  cfg.learning_rate = 0.05;
  cfg.m0 = 16;
  cfg.tt_rank = 4;
  cfg.seed = 5;
  cfg.eval_every = 10;

  const TrainResult r = train(d, cfg);
  REQUIRE_FALSE(r.history.empty());
  const ModelWorkspace ws = build_workspace(r.model);
  const double r2 = r_squared(d.y_heldout, predict_regression(r.model, ws, d.X_heldout).mean);
  INFO("held-out r2 = " << r2);
  CHECK(r2 >= 0.95);
  // the returned model is the best evaluated one
  double best = -1e300;
  for (const EpochMetrics& em : r.history) best = std::max(best, em.metric);
  CHECK(r2 == Catch::Approx(best).margin(1e-12));
}

TEST_CASE("well-separated three-class blobs reach held-out accuracy 0.95", "[training]") {
  TrainData d = blob_data(80, 20, 321);
  TrainConfig cfg;
  cfg.task = Task::kClassification;
  cfg.epochs = 50;
  cfg.batch_size = 64;
  cfg.learning_rate = 0.02;
  cfg.m0 = 10;
  cfg.tt_rank = 3;
  cfg.seed = 7;
  cfg.eval_every = 5;

  const TrainResult r = train(d, cfg);
  const ModelWorkspace ws = build_workspace(r.model);
  const double acc =
      accuracy(d.labels_heldout, predict_classification(r.model, ws, d.X_heldout).class_index);
  INFO("held-out accuracy = " << acc);
  CHECK(acc >= 0.95);
}

TEST_CASE("metric helpers", "[training]") {
  Eigen::VectorXd t(4), p(4);
  t << 1.0, 2.0, 3.0, 4.0;
  CHECK(r_squared(t, t) == 1.0);
  p.setConstant(t.mean());
  CHECK(r_squared(t, p) == Catch::Approx(0.0).margin(1e-15));
  CHECK_THROWS_AS(r_squared(t, Eigen::VectorXd::Zero(3)), ShapeError);

  CHECK(accuracy({1, 0, 2, 1}, {1, 0, 1, 1}) == Catch::Approx(0.75));
  CHECK_THROWS_AS(accuracy({1}, {1, 2}), ShapeError);

  std::vector<EpochMetrics> hist = {{1, -5.5, 0.25, 0.125}, {2, -4.0, 0.5, 0.25}};
  std::ostringstream os;
  write_metrics_csv(hist, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,elbo,metric,seconds");
  std::getline(is, line);
  CHECK(line == "1,-5.5,0.25,0.125");
}

TEST_CASE("checkpoints round-trip every parameter bit", "[training][checkpoint]") {
  TrainData d = tiny_regression(50, 10, 3, 77);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.m0 = 6;
  cfg.tt_rank = 4;
  cfg.embedding_dim = 2;
  cfg.seed = 13;
  const TrainResult r = train(d, cfg);

  Checkpoint ck;
  ck.model = r.model;
  ck.adam = r.adam;
  ck.stats = standardize_fit(d.X_train, d.y_train);

  TempFile f("ttgp_ckpt");
  save_checkpoint(ck, f.path);
  const Checkpoint back = load_checkpoint(f.path);

  CHECK((pack_params(back.model) - pack_params(ck.model)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(back.model.grid.dims() == ck.model.grid.dims());
  for (int dd = 0; dd < ck.model.grid.dims(); ++dd) {
    CHECK((back.model.grid.per_dim_points[dd] - ck.model.grid.per_dim_points[dd])
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK(back.model.grid.spacing[dd] == ck.model.grid.spacing[dd]);
  }
  CHECK(back.model.task == ck.model.task);
  CHECK(back.model.kernel.tied == ck.model.kernel.tied);
  REQUIRE(back.model.embedding.has_value());
  CHECK((back.model.embedding->run_std - ck.model.embedding->run_std).cwiseAbs().maxCoeff() ==
        0.0);

  // rank header: an r=4 model comes back with interior ranks 4
  CHECK(back.model.mu[0].ranks() == ck.model.mu[0].ranks());
  CHECK(back.model.mu[0].ranks()[1] == 4);

  // bitwise-identical bound on a fixed batch
  const ModelWorkspace ws1 = build_workspace(ck.model);
  const ModelWorkspace ws2 = build_workspace(back.model);
  const double e1 = elbo_regression(ck.model, ws1, d.X_train, d.y_train, 50);
  const double e2 = elbo_regression(back.model, ws2, d.X_train, d.y_train, 50);
  CHECK(e1 == e2);

  // optimizer state and standardization survive
  CHECK(back.adam.step == ck.adam.step);
  CHECK((back.adam.first - ck.adam.first).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.adam.second - ck.adam.second).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.stats.mean - ck.stats.mean).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.stats.std - ck.stats.std).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.stats.y_mean == ck.stats.y_mean);
  CHECK(back.stats.y_std == ck.stats.y_std);
}

TEST_CASE("classification checkpoints keep the label mapping", "[training][checkpoint]") {
  const Grid grid = grid_build({{-1.0, 1.0}, {0.0, 2.0}}, 5);
  const RBFParams kernel = RBFParams::make(2, 0.8, 1.0, 0.1, true);
  Checkpoint ck;
  ck.model = init_model(Task::kClassification, grid, kernel, 2, 3, 99);
  ck.label_map.values = {-1.0, 5.0, 7.0};

  TempFile f("ttgp_ckpt_cls");
  save_checkpoint(ck, f.path);
  const Checkpoint back = load_checkpoint(f.path);
  CHECK(back.model.task == Task::kClassification);
  CHECK(back.model.num_classes() == 3);
  CHECK(back.model.kernel.tied);
  CHECK(back.label_map.values == std::vector<double>{-1.0, 5.0, 7.0});
  CHECK(back.adam.step == 0);
  CHECK(back.adam.first.size() == 0);
}

TEST_CASE("corrupted or foreign checkpoint files fail loudly", "[training][checkpoint]") {
  const Grid grid = grid_build({{-1.0, 1.0}}, 5);
  Checkpoint ck;
  ck.model = init_model(Task::kRegression, grid, RBFParams::make(1, 1.0, 1.0, 0.1, false), 2, 1, 1);

  TempFile f("ttgp_ckpt_bad");
  save_checkpoint(ck, f.path);
  const std::string original = read_bytes(f.path);

  SECTION("a flipped payload byte trips the checksum, leaving no partial model") {
    std::string bytes = original;
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x5A);
    write_bytes(f.path, bytes);
    CHECK_THROWS_AS(load_checkpoint(f.path), CheckpointChecksumError);
  }

  SECTION("an unsupported format version is reported as such") {
    std::string bytes = original;
    bytes[8] = 99;  // version field follows the 8-byte magic
    const std::uint32_t crc = detail::crc32_ieee(
        reinterpret_cast<const unsigned char*>(bytes.data()) + 8, bytes.size() - 12);
    std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
    write_bytes(f.path, bytes);
    CHECK_THROWS_AS(load_checkpoint(f.path), CheckpointVersionError);
  }

  SECTION("a truncated file is reported as truncated") {
    write_bytes(f.path, original.substr(0, 10));
    CHECK_THROWS_AS(load_checkpoint(f.path), CheckpointTruncatedError);
  }

  SECTION("an unrelated file is not a checkpoint") {
    write_bytes(f.path, "definitely,not,a,checkpoint\n1,2,3,4\n");
    CHECK_THROWS_AS(load_checkpoint(f.path), CheckpointError);
  }

  SECTION("a missing file is a data error naming the path") {
    CHECK_THROWS_WITH(load_checkpoint("/nonexistent/nowhere.ckpt"),
                      Catch::Matchers::ContainsSubstring("nowhere.ckpt"));
  }
}

TEST_CASE("training rejects inconsistent data", "[training]") {
  TrainConfig cfg;
  cfg.m0 = 5;
  cfg.tt_rank = 2;
  cfg.epochs = 1;

  TrainData empty;
  CHECK_THROWS_AS(train(empty, cfg), InvalidInputError);

  TrainData bad = tiny_regression(20, 5, 2, 3);
  bad.y_train = bad.y_train.head(10).eval();
  CHECK_THROWS_AS(train(bad, cfg), ShapeError);

  TrainData cls = blob_data(10, 2, 5);
  cls.labels_train[0] = -1;
  TrainConfig ccfg = cfg;
  ccfg.task = Task::kClassification;
  CHECK_THROWS_AS(train(cls, ccfg), InvalidInputError);
}
