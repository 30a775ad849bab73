#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sncn/core/checkpoint.hpp"
#include "sncn/core/error.hpp"
#include "sncn/core/ops.hpp"
#include "sncn/core/optim.hpp"
#include "sncn/data/cifar.hpp"
#include "sncn/data/shapes.hpp"
#include "sncn/data/style.hpp"
#include "sncn/eval/metrics.hpp"
#include "sncn/nn/model.hpp"

namespace sncn {

struct TrainConfig {
  ModelSpec model;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  SgdOptions sgd;
  std::vector<double> decay_at{0.5, 0.75}; // fractions of `epochs`
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  bool augment = true;
  // Dataset selection.
  std::string dataset = "shapes"; // shapes | cifar10
  std::string data_dir;           // cifar10 only
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (batch_size < 2 && model.cn_enabled && model.cn.mode == CnMode::two_instance)
      throw ConfigError("train.batch_size must be at least 2 with 2-instance CrossNorm");
    if (!(sgd.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (sgd.momentum < 0.0 || sgd.momentum >= 1.0) throw ConfigError("train.momentum must be in [0, 1)");
    if (sgd.weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    for (double f : decay_at)
      if (!(f > 0.0 && f < 1.0)) throw ConfigError("train.decay_at fractions must lie in (0, 1)");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("train.decay_factor must be in (0, 1]");
    if (dataset != "shapes" && dataset != "cifar10")
      throw ConfigError("data.dataset must be 'shapes' or 'cifar10', got '" + dataset + "'");
    if (dataset == "cifar10" && data_dir.empty()) throw ConfigError("data.dir is required for cifar10");
    if (dataset == "shapes" && (train_per_class < 1 || test_per_class < 1))
      throw ConfigError("data.train_per_class and data.test_per_class must be at least 1");
    try {
      model.validate();
    } catch (const std::invalid_argument &e) {
      throw ConfigError(e.what());
    }
  }

  /// Learning rate in effect during `epoch` (0-based).
  double lr_at(std::size_t epoch) const {
    double lr = sgd.lr;
    for (double f : decay_at)
      if (epoch >= static_cast<std::size_t>(std::floor(f * static_cast<double>(epochs)))) lr *= decay_factor;
    return lr;
  }
};

struct DataSplits {
  Dataset train;
  Dataset test;         // in-distribution
  Dataset shifted_test; // palette-shifted (shapes only; empty for cifar10)
};

/// Training and test data selected by the config. Shapes test splits use
/// seeds disjoint from the training split.
inline DataSplits load_data(const TrainConfig &cfg) {
  DataSplits d;
  if (cfg.dataset == "cifar10") {
    auto c = load_cifar10(cfg.data_dir);
    d.train = std::move(c.train);
    d.test = std::move(c.test);
    return d;
  }
  d.train = gen_shapes(cfg.train_per_class, cfg.seed, train_palette(), Split::train);
  d.test = gen_shapes(cfg.test_per_class, cfg.seed ^ 0x7e57ULL, train_palette(), Split::test);
  d.shifted_test = gen_shapes(cfg.test_per_class, cfg.seed ^ 0x7e57ULL, shifted_palette(), Split::test);
  return d;
}

struct EpochLog {
  std::size_t epoch = 0; // 1-based
  double train_loss = 0.0;
  double test_error = 0.0;
};

inline std::string format_log(const std::vector<EpochLog> &log) {
  std::ostringstream out;
  out << "epoch,train_loss,test_error\n" << std::fixed << std::setprecision(6);
  for (const auto &r : log) out << r.epoch << ',' << r.train_loss << ',' << r.test_error << '\n';
  return out.str();
}

/// Argmax of eval-mode logits.
template <typename T> std::vector<int> predict(Model<T> &model, const Tensor<float> &batch) {
  Rng unused(0);
  const Tensor<T> logits = model_forward(model, batch.template cast<T>(), Mode::eval, unused);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T> double clean_error(Model<T> &model, const Dataset &data, std::size_t batch_size = 100) {
  return classification_error([&](const Tensor<float> &b) { return predict(model, b); }, data, batch_size);
}

struct TrainResult {
  Model<float> model;       // final parameters
  std::vector<EpochLog> log;
  double best_test_error = 1.0;
  std::size_t best_epoch = 0;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> dir; // log.csv, final.ckpt, best.ckpt
};

/// SGD training with per-forward CrossNorm sampling. Every random choice is
/// drawn from a stream derived from cfg.seed, so (config, seed) fixes the run.
/// A non-finite loss aborts; the checkpoints of the last finished epoch stay.
inline TrainResult train(const TrainConfig &cfg, const Dataset &train_set, const Dataset &test_set,
                         const TrainOutputs &outputs = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (test_set.empty()) throw std::invalid_argument("train: empty test set");
  if (train_set.num_classes() != cfg.model.num_classes)
    throw ConfigError("model.num_classes is " + std::to_string(cfg.model.num_classes) + " but the dataset has " +
                      std::to_string(train_set.num_classes()) + " classes");
  if (outputs.dir) std::filesystem::create_directories(*outputs.dir);

  const Rng master(cfg.seed);
  Rng init = master.derive("init");
  TrainResult result{build_model<float>(cfg.model, init), {}, 1.0, 0};
  Model<float> &model = result.model;
  OptimState<float> opt{cfg.sgd, {}};

  auto save = [&](const std::string &name) {
    if (outputs.dir) save_checkpoint(*outputs.dir / name, model.to_checkpoint());
  };
  auto write_log = [&] {
    if (!outputs.dir) return;
    std::ofstream out(*outputs.dir / "log.csv", std::ios::binary);
    out << format_log(result.log);
  };

  const std::size_t n = train_set.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.options.lr = cfg.lr_at(epoch);
    Rng epoch_rng = master.derive("epoch").derive(epoch);
    Rng order_rng = epoch_rng.derive("order");
    const std::vector<std::size_t> order = order_rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      if (end - start < 2 && start > 0) break; // a trailing singleton would break batch statistics
      Dataset chunk;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledImage &img = train_set.images[order[i]];
        if (cfg.augment) {
          Rng aug = epoch_rng.derive("augment").derive(i);
          chunk.images.push_back(weak_augment(img, aug));
        } else {
          chunk.images.push_back(img);
        }
      }
      std::vector<std::size_t> idx(chunk.size());
      std::iota(idx.begin(), idx.end(), 0);
      auto [batch, labels] = make_batch(chunk, idx);

      Rng unit_rng = epoch_rng.derive("units").derive(steps);
      Tape<float> tape;
      double loss_value = 0.0;
      try {
        auto pass = model_forward(model, tape, tape.leaf(batch), Mode::train, unit_rng, {}, true);
        Var<float> loss = ops::softmax_cross_entropy(pass.output, std::span<const int>(labels));
        loss_value = loss.value().item();
        if (!std::isfinite(loss_value)) throw NumericError("loss is " + std::to_string(loss_value));
        tape.backward(loss);
        std::vector<Tensor<float>> grads;
        grads.reserve(pass.trainable_leaves.size());
        for (const auto &leaf : pass.trainable_leaves) grads.push_back(tape.grad(leaf));
        sgd_step(pass.trainable, grads, opt);
      } catch (const NumericError &e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(steps) + ": " + e.what() +
                           (outputs.dir ? "; checkpoints from the last finished epoch are kept" : ""));
      }
      loss_sum += loss_value;
      ++steps;
    }
    const double test_error = clean_error(model, test_set);
    result.log.push_back({epoch + 1, loss_sum / static_cast<double>(steps), test_error});
    if (test_error < result.best_test_error || result.best_epoch == 0) {
      result.best_test_error = test_error;
      result.best_epoch = epoch + 1;
      save("best.ckpt");
    }
    save("final.ckpt");
    write_log();
  }
  return result;
}

struct EvalResult {
  ErrorTable table;
  double mce = 0.0;
  std::optional<double> mce_normalized;
};

/// Eval-mode corruption grid plus both mCE variants (normalized only when a
/// reference table is given).
template <typename T>
EvalResult evaluate(Model<T> &model, const Dataset &data, const std::vector<CorruptionKind> &kinds,
                    std::uint64_t seed, const std::optional<ErrorTable> &reference = std::nullopt,
                    std::size_t batch_size = 100) {
  EvalResult r;
  r.table = evaluate_suite([&](const Tensor<float> &b) { return predict(model, b); }, data, kinds, seed, batch_size);
  r.mce = mce_unnormalized(r.table);
  if (reference) r.mce_normalized = mce_normalized(r.table, *reference);
  return r;
}

/// Loads a checkpoint into a freshly built model of `spec`.
inline Model<float> load_model(const ModelSpec &spec, const std::filesystem::path &checkpoint) {
  Rng init(0);
  Model<float> m = build_model<float>(spec, init);
  m.load(load_checkpoint(checkpoint));
  return m;
}

} // namespace sncn
