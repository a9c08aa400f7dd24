#pragma once
// Command-line driver: training, evaluation, prediction, and the TT-SVD
// rank/accuracy demo. Header-only so the binary and the tests share one code
// path; run_cli takes explicit streams for the same reason.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Dense>

#include "ttgp/data.hpp"
#include "ttgp/errors.hpp"
#include "ttgp/model.hpp"
#include "ttgp/training.hpp"
#include "ttgp/tt_vector.hpp"

namespace ttgp {

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitFailure = 1;  ///< unexpected failures
inline constexpr int kExitConfig = 2;   ///< bad flags or invalid configuration
inline constexpr int kExitData = 3;     ///< unreadable or inconsistent data / checkpoints
inline constexpr int kExitNumeric = 4;  ///< numerical breakdown during computation

/// Every resolved setting a run can use; one struct shared by all subcommands.
struct CliConfig {
  std::string data_path;
  std::string format = "csv";  ///< csv | libsvm
  int label_col = -1;          ///< CSV target column; negative = last
  int libsvm_dim = 0;          ///< declared sparse width; 0 = infer
  std::string task = "regression";
  int m0 = 20;
  int tt_rank = 10;
  int embed_dim = 0;
  int epochs = 50;
  int batch_size = 128;
  double lr = 0.01;
  std::uint64_t seed = 0;
  double test_fraction = 0.1;
  int workers = 1;
  int eval_every = 1;
  double init_lengthscale = 1.0;
  double init_variance = 1.0;
  double init_noise = 0.1;
  std::string checkpoint;
  std::string metrics_out;
  std::string out_path;  ///< predictions / demo CSV; empty = standard output
  // ttsvd-demo
  std::vector<int> shape = {5, 5, 5, 5};
  int r_max = 25;
  std::string tensor_file;
  double demo_noise = 0.1;
};

namespace cli_detail {

inline TrainConfig to_train_config(const CliConfig& c) {
  TrainConfig tc;
  tc.task = c.task == "classification" ? Task::kClassification : Task::kRegression;
  tc.epochs = c.epochs;
  tc.batch_size = c.batch_size;
  tc.learning_rate = c.lr;
  tc.seed = c.seed;
  tc.m0 = c.m0;
  tc.tt_rank = c.tt_rank;
  tc.embedding_dim = c.embed_dim;
  tc.eval_every = c.eval_every;
  tc.workers = c.workers;
  tc.init_lengthscale = c.init_lengthscale;
  tc.init_variance = c.init_variance;
  tc.init_noise_variance = c.init_noise;
  return tc;
}

inline Dataset load_dataset(const CliConfig& c) {
  if (c.format == "libsvm") return load_libsvm(c.data_path, c.libsvm_dim);
  return load_csv(c.data_path, c.label_col);
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

/// Standardize with stored statistics; an empty checkpoint passes through.
inline Eigen::MatrixXd apply_stats(const StandardizeStats& s, const Eigen::MatrixXd& X) {
  if (s.mean.size() == 0) return X;
  if (s.mean.size() != X.cols())
    throw DataError("standardization statistics do not match the feature count");
  return standardize_apply(s, X);
}

/// A writable sink that is either an owned file or a borrowed stream.
struct OutputSink {
  std::ofstream file;
  std::ostream* os;
  OutputSink(const std::string& path, std::ostream& fallback) {
    if (path.empty()) {
      os = &fallback;
    } else {
      file.open(path, std::ios::trunc);
      if (!file) throw DataError(path + ": cannot write output file");
      os = &file;
    }
  }
};

inline void write_manifest(const CliConfig& c, const char* subcommand, Eigen::Index n_train,
                           Eigen::Index n_heldout, int num_classes, double metric,
                           const std::string& path) {
  nlohmann::json j;
  j["subcommand"] = subcommand;
  j["data"] = c.data_path;
  j["format"] = c.format;
  j["label_col"] = c.label_col;
  j["task"] = c.task;
  j["m0"] = c.m0;
  j["tt_rank"] = c.tt_rank;
  j["embed_dim"] = c.embed_dim;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.lr;
  j["seed"] = c.seed;
  j["test_fraction"] = c.test_fraction;
  j["workers"] = c.workers;
  j["eval_every"] = c.eval_every;
  j["init_lengthscale"] = c.init_lengthscale;
  j["init_variance"] = c.init_variance;
  j["init_noise"] = c.init_noise;
  j["n_train"] = n_train;
  j["n_heldout"] = n_heldout;
  j["num_classes"] = num_classes;
  j["metric"] = metric;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(path + ": cannot write run manifest");
  f << j.dump(2) << "\n";
}

/// Metric of a fitted model on one split (held out when present, otherwise
/// the training split), in the same units the history uses.
inline double model_metric(const TTGPModel& m, const TrainData& td) {
  const ModelWorkspace ws = build_workspace(m);
  const bool have_heldout = td.X_heldout.rows() > 0;
  if (m.task == Task::kClassification) {
    const Eigen::MatrixXd& Xe = have_heldout ? td.X_heldout : td.X_train;
    const std::vector<int>& le = have_heldout ? td.labels_heldout : td.labels_train;
    return accuracy(le, predict_classification(m, ws, Xe).class_index);
  }
  const Eigen::MatrixXd& Xe = have_heldout ? td.X_heldout : td.X_train;
  const Eigen::VectorXd& ye = have_heldout ? td.y_heldout : td.y_train;
  return r_squared(ye, predict_regression(m, ws, Xe).mean);
}

inline int cmd_train(const CliConfig& c, std::ostream& out) {
  const TrainConfig tc = to_train_config(c);
  tc.validate();
  if (c.test_fraction < 0.0 || c.test_fraction >= 1.0)
    throw ConfigError("test-fraction must lie in [0, 1)");

  const Dataset ds = load_dataset(c);
  const bool classify = tc.task == Task::kClassification;
  const Eigen::Index n = ds.rows();

  LabelMapping mapping;
  if (classify) mapping = remap_labels(ds.y);

  std::vector<Eigen::Index> train_idx(static_cast<std::size_t>(n));
  std::iota(train_idx.begin(), train_idx.end(), Eigen::Index{0});
  std::vector<Eigen::Index> test_idx;
  if (c.test_fraction > 0.0 && n >= 2) {
    if (classify)
      std::tie(train_idx, test_idx) =
          split_rows_stratified(mapping.indices, c.test_fraction, c.seed);
    else
      std::tie(train_idx, test_idx) = split_rows(n, c.test_fraction, c.seed);
  }

  TrainData td;
  td.X_train = select_rows(ds.X, train_idx);
  td.X_heldout = select_rows(ds.X, test_idx);
  StandardizeStats stats;
  if (classify) {
    stats = standardize_fit(td.X_train);
    td.labels_train = select_rows(mapping.indices, train_idx);
    td.labels_heldout = select_rows(mapping.indices, test_idx);
  } else {
    const Eigen::VectorXd y_train = select_rows(ds.y, train_idx);
    stats = standardize_fit(td.X_train, y_train);
    td.y_train = standardize_targets(stats, y_train);
    td.y_heldout = standardize_targets(stats, select_rows(ds.y, test_idx));
  }
  td.X_train = standardize_apply(stats, td.X_train);
  td.X_heldout = standardize_apply(stats, td.X_heldout);

  TrainResult res = train(td, tc);
  // wall time per epoch is recorded in the metrics CSV; keeping it off the
  // console makes identical invocations print identical output
  for (const EpochMetrics& em : res.history)
    out << "epoch " << em.epoch << " elbo " << fmt(em.elbo) << " metric " << fmt(em.metric)
        << "\n";

  // recomputed from the returned model so an epochs=0 run also reports one
  const double metric = model_metric(res.model, td);

  if (!c.metrics_out.empty()) {
    std::ofstream mf(c.metrics_out, std::ios::trunc);
    if (!mf) throw DataError(c.metrics_out + ": cannot write metrics file");
    write_metrics_csv(res.history, mf);
  }
  if (!c.checkpoint.empty()) {
    Checkpoint ck;
    ck.model = std::move(res.model);
    ck.stats = stats;
    ck.label_map = mapping;
    ck.adam = std::move(res.adam);
    save_checkpoint(ck, c.checkpoint);
    write_manifest(c, "train", td.X_train.rows(), td.X_heldout.rows(),
                   classify ? mapping.num_classes() : 1, metric,
                   c.checkpoint + ".manifest.json");
  }
  out << "metric=" << fmt(metric) << "\n";
  return kExitSuccess;
}

inline int cmd_evaluate(const CliConfig& c, std::ostream& out) {
  if (c.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint");
  const Checkpoint ck = load_checkpoint(c.checkpoint);
  const Dataset ds = load_dataset(c);
  if (ds.cols() != ck.model.input_dims())
    throw DataError(c.data_path + ": model expects " + std::to_string(ck.model.input_dims()) +
                    " features, file has " + std::to_string(ds.cols()));
  const Eigen::MatrixXd X = apply_stats(ck.stats, ds.X);
  const ModelWorkspace ws = build_workspace(ck.model);

  double metric;
  if (ck.model.task == Task::kClassification) {
    std::vector<int> truth(static_cast<std::size_t>(ds.rows()));
    for (Eigen::Index i = 0; i < ds.rows(); ++i)
      truth[static_cast<std::size_t>(i)] = ck.label_map.index_of(ds.y[i]);
    metric = accuracy(truth, predict_classification(ck.model, ws, X).class_index);
  } else {
    const RegressionPrediction pred =
        predict_regression(ck.model, ws, X, ck.stats.y_mean, ck.stats.y_std);
    metric = r_squared(ds.y, pred.mean);
  }
  out << "metric=" << fmt(metric) << "\n";
  return kExitSuccess;
}

inline int cmd_predict(const CliConfig& c, std::ostream& out) {
  if (c.checkpoint.empty()) throw ConfigError("predict needs --checkpoint");
  const Checkpoint ck = load_checkpoint(c.checkpoint);
  const Eigen::Index raw_dim = ck.model.input_dims();

  Eigen::MatrixXd X;
  if (c.format == "libsvm") {
    const Dataset ds = load_libsvm(c.data_path, c.libsvm_dim > 0 ? c.libsvm_dim
                                                                 : static_cast<int>(raw_dim));
    X = ds.X;
  } else {
    const Eigen::MatrixXd M = load_csv_matrix(c.data_path);
    if (M.rows() == 0) {
      X.resize(0, raw_dim);
    } else if (M.cols() == raw_dim) {
      X = M;
    } else if (M.cols() == raw_dim + 1) {
      // a labeled file: drop the target column and score the features
      const Eigen::Index lc = c.label_col < 0 ? M.cols() - 1 : c.label_col;
      if (lc >= M.cols())
        throw DataError(c.data_path + ": label column out of range");
      X.resize(M.rows(), raw_dim);
      Eigen::Index k = 0;
      for (Eigen::Index j = 0; j < M.cols(); ++j)
        if (j != lc) X.col(k++) = M.col(j);
    } else {
      throw DataError(c.data_path + ": model expects " + std::to_string(raw_dim) +
                      " features, file has " + std::to_string(M.cols()) + " columns");
    }
  }
  if (X.cols() != raw_dim)
    throw DataError(c.data_path + ": model expects " + std::to_string(raw_dim) +
                    " features, file has " + std::to_string(X.cols()));

  OutputSink sink(c.out_path, out);
  std::ostream& os = *sink.os;
  os.precision(10);

  if (ck.model.task == Task::kClassification) {
    const int C = ck.model.num_classes();
    const bool mapped = static_cast<int>(ck.label_map.values.size()) == C;
    os << "label";
    for (int k = 0; k < C; ++k) {
      os << ",score_";
      if (mapped)
        os << ck.label_map.values[static_cast<std::size_t>(k)];
      else
        os << k;
    }
    os << "\n";
    if (X.rows() == 0) return kExitSuccess;
    const Eigen::MatrixXd Xs = apply_stats(ck.stats, X);
    const ModelWorkspace ws = build_workspace(ck.model);
    const ClassificationPrediction pred = predict_classification(ck.model, ws, Xs);
    for (Eigen::Index i = 0; i < Xs.rows(); ++i) {
      const int cls = pred.class_index[static_cast<std::size_t>(i)];
      if (mapped)
        os << ck.label_map.values[static_cast<std::size_t>(cls)];
      else
        os << cls;
      for (int k = 0; k < C; ++k) os << ',' << pred.probabilities(i, k);
      os << "\n";
    }
    return kExitSuccess;
  }

  os << "mean,variance\n";
  if (X.rows() == 0) return kExitSuccess;
  const Eigen::MatrixXd Xs = apply_stats(ck.stats, X);
  const ModelWorkspace ws = build_workspace(ck.model);
  const RegressionPrediction pred =
      predict_regression(ck.model, ws, Xs, ck.stats.y_mean, ck.stats.y_std);
  for (Eigen::Index i = 0; i < Xs.rows(); ++i)
    os << pred.mean[i] << ',' << pred.variance[i] << "\n";
  return kExitSuccess;
}

/// Synthetic demo tensor: a separable product of sines over the grid indices
/// plus seeded Gaussian noise, flattened with the last index fastest.
inline std::vector<double> demo_tensor(const std::vector<int>& shape, double noise,
                                       std::uint64_t seed) {
  std::size_t total = 1;
  for (int m : shape) total *= static_cast<std::size_t>(m);
  std::vector<double> values(total);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, noise);
  const int D = static_cast<int>(shape.size());
  std::vector<int> idx(static_cast<std::size_t>(D), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rest = flat;
    double v = 1.0;
    for (int d = D - 1; d >= 0; --d) {
      const int m = shape[static_cast<std::size_t>(d)];
      const int i = static_cast<int>(rest % static_cast<std::size_t>(m));
      rest /= static_cast<std::size_t>(m);
      v *= std::sin(M_PI * static_cast<double>(i + 1) / static_cast<double>(m));
    }
    values[flat] = v + (noise > 0.0 ? g(rng) : 0.0);
  }
  return values;
}

/// Dense tensor file: first non-empty line is the shape (whitespace-separated
/// mode sizes), the remaining tokens are the values, last index fastest.
inline std::pair<std::vector<int>, std::vector<double>> read_tensor_file(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError(path + ": cannot open file");
  std::string line;
  std::vector<int> shape;
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    int m;
    while (ls >> m) shape.push_back(m);
    if (!ls.eof()) throw DataError(path + ": malformed shape header");
    if (!shape.empty()) break;
  }
  if (shape.empty()) throw DataError(path + ": missing shape header");
  std::size_t total = 1;
  for (int m : shape) {
    if (m < 1) throw DataError(path + ": mode sizes must be positive");
    total *= static_cast<std::size_t>(m);
  }
  std::vector<double> values;
  values.reserve(total);
  double v;
  while (f >> v) {
    if (!std::isfinite(v)) throw DataError(path + ": non-finite tensor value");
    values.push_back(v);
  }
  if (!f.eof()) throw DataError(path + ": malformed tensor value");
  if (values.size() != total)
    throw DataError(path + ": expected " + std::to_string(total) + " values, found " +
                    std::to_string(values.size()));
  return {std::move(shape), std::move(values)};
}

inline int cmd_ttsvd_demo(const CliConfig& c, std::ostream& out) {
  if (c.r_max < 1) throw ConfigError("r-max must be at least 1");
  std::vector<int> shape;
  std::vector<double> values;
  if (!c.tensor_file.empty()) {
    std::tie(shape, values) = read_tensor_file(c.tensor_file);
  } else {
    if (c.shape.empty()) throw ConfigError("shape must have at least one mode");
    std::size_t total = 1;
    for (int m : c.shape) {
      if (m < 1) throw ConfigError("shape entries must be positive");
      total *= static_cast<std::size_t>(m);
      if (total > (1u << 22)) throw ConfigError("demo tensor is too large");
    }
    shape = c.shape;
    values = demo_tensor(shape, c.demo_noise, c.seed);
  }
  if (values.size() > (1u << 22)) throw ConfigError("demo tensor is too large");

  const Eigen::Map<const Eigen::VectorXd> dense(values.data(),
                                                static_cast<Eigen::Index>(values.size()));
  const double dense_norm = dense.norm();

  OutputSink sink(c.out_path, out);
  std::ostream& os = *sink.os;
  os << "r,mse,cosine\n";
  os.precision(17);
  const int D = static_cast<int>(shape.size());
  for (int r = 1; r <= c.r_max; ++r) {
    const std::vector<int> caps(static_cast<std::size_t>(std::max(0, D - 1)), r);
    const TTVector tt = tt_from_dense(values, shape, caps);
    const std::vector<double> back = tt_to_dense(tt);
    const Eigen::Map<const Eigen::VectorXd> approx(back.data(),
                                                   static_cast<Eigen::Index>(back.size()));
    const double mse = (dense - approx).squaredNorm() / static_cast<double>(values.size());
    const double denom = dense_norm * approx.norm();
    const double cosine = denom > 0.0 ? dense.dot(approx) / denom
                                      : (dense_norm == 0.0 && approx.norm() == 0.0 ? 1.0 : 0.0);
    os << r << ',' << mse << ',' << cosine << "\n";
  }
  return kExitSuccess;
}

}  // namespace cli_detail

/// Parse flags, dispatch, and map failures to exit codes. Diagnostics go to
/// `err` as a single line; command output goes to `out` or --out files.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CliConfig c;
  CLI::App app{"Grid-based Gaussian-process regression and classification with "
               "tensor-train variational means"};
  app.require_subcommand(1);

  auto add_data_flags = [&](CLI::App* cmd) {
    cmd->add_option("--data", c.data_path, "dataset file")->required();
    cmd->add_option("--format", c.format, "dataset format")
        ->check(CLI::IsMember({"csv", "libsvm"}));
    cmd->add_option("--label-col", c.label_col, "CSV target column (negative = last)");
    cmd->add_option("--libsvm-dim", c.libsvm_dim, "declared sparse feature count (0 = infer)");
  };

  CLI::App* t = app.add_subcommand("train", "fit a model, optionally writing a checkpoint");
  add_data_flags(t);
  t->add_option("--task", c.task, "prediction task")
      ->check(CLI::IsMember({"regression", "classification"}));
  t->add_option("--m0", c.m0, "grid nodes per latent dimension");
  t->add_option("--tt-rank", c.tt_rank, "tensor-train rank of the variational mean");
  t->add_option("--embed-dim", c.embed_dim, "linear embedding dimensions (0 = none)");
  t->add_option("--epochs", c.epochs, "training epochs");
  t->add_option("--batch-size", c.batch_size, "minibatch size");
  t->add_option("--lr", c.lr, "Adam learning rate");
  t->add_option("--seed", c.seed, "random seed");
  t->add_option("--test-fraction", c.test_fraction, "held-out fraction of the data");
  t->add_option("--workers", c.workers, "gradient worker threads");
  t->add_option("--eval-every", c.eval_every, "epochs between held-out evaluations");
  t->add_option("--init-lengthscale", c.init_lengthscale, "initial kernel lengthscale");
  t->add_option("--init-variance", c.init_variance, "initial kernel variance");
  t->add_option("--init-noise", c.init_noise, "initial observation noise variance");
  t->add_option("--checkpoint", c.checkpoint, "checkpoint file to write");
  t->add_option("--metrics-out", c.metrics_out, "per-epoch metrics CSV to write");

  CLI::App* e = app.add_subcommand("evaluate", "score a checkpoint on a labeled dataset");
  add_data_flags(e);
  e->add_option("--checkpoint", c.checkpoint, "checkpoint file to read")->required();

  CLI::App* p = app.add_subcommand("predict", "write predictions for a feature file");
  add_data_flags(p);
  p->add_option("--checkpoint", c.checkpoint, "checkpoint file to read")->required();
  p->add_option("--out", c.out_path, "predictions CSV (default: standard output)");

  CLI::App* d = app.add_subcommand(
      "ttsvd-demo", "rank/accuracy sweep of tensor-train truncations of a dense tensor");
  d->add_option("--shape", c.shape, "synthetic tensor mode sizes")->delimiter(',');
  d->add_option("--r-max", c.r_max, "largest rank to sweep");
  d->add_option("--tensor-file", c.tensor_file, "dense tensor file (shape header, then values)");
  d->add_option("--seed", c.seed, "noise seed for the synthetic tensor");
  d->add_option("--noise", c.demo_noise, "noise level for the synthetic tensor");
  d->add_option("--out", c.out_path, "output CSV (default: standard output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int rc = app.exit(pe, out, err);
    return rc == 0 ? kExitSuccess : kExitConfig;
  }

  try {
    if (app.got_subcommand(t)) return cli_detail::cmd_train(c, out);
    if (app.got_subcommand(e)) return cli_detail::cmd_evaluate(c, out);
    if (app.got_subcommand(p)) return cli_detail::cmd_predict(c, out);
    return cli_detail::cmd_ttsvd_demo(c, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const DataError& ex) {  // includes every checkpoint failure
    err << "error: " << ex.what() << "\n";
    return kExitData;
  } catch (const DecompositionError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const ResourceLimitError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const Error& ex) {  // shape/consistency problems surfaced by the model
    err << "error: " << ex.what() << "\n";
    return kExitData;
  } catch (const std::exception& ex) {
    err << "unexpected error: " << ex.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace ttgp
