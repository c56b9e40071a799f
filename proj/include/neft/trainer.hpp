#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "neft/channel.hpp"
#include "neft/model.hpp"

namespace neft {

// --- schedule and optimizer ----------------------------------------------

/// lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double cosine_lr(double t, double total, double lr_max, double lr_min = 0.0);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Decay shrinks the parameter before the
/// moment update; tensors without a gradient are skipped entirely.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(std::vector<NamedTensor<Scalar>*> params, AdamWOptions options = {});
  explicit AdamW(Model<Scalar>& model, AdamWOptions options = {});

  /// Throws NumericError naming the first parameter with a non-finite gradient.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<NamedTensor<Scalar>*> params_;
  std::vector<Vector<Scalar>> m_, v_;
  AdamWOptions options_;
  std::int64_t t_ = 0;
};

// --- early stopping -------------------------------------------------------

/// Tracks validation NMSE (dB, lower is better). A new best must beat the
/// previous best by at least min_delta; training stops once `patience`
/// epochs pass without one.
class EarlyStopping {
 public:
  EarlyStopping(double min_delta_db = 0.1, int patience = 20);

  /// Returns true when training should stop after this epoch.
  bool update(int epoch, double value_db);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_; }

 private:
  double min_delta_;
  int patience_;
  double best_;
  int best_epoch_ = -1;
  bool improved_ = false;
};

// --- metrics --------------------------------------------------------------

/// 10 log10(sum |H - Hhat|^2 / sum |H|^2). Returns -inf for a perfect match;
/// throws DomainError for an all-zero reference.
double nmse_db(std::span<const double> truth, std::span<const double> estimate);
double nmse_db(const std::vector<ComplexMatrix>& truth, const std::vector<ComplexMatrix>& estimate);
template <typename Scalar>
double nmse_db(const Tensor<Scalar>& truth, const Tensor<Scalar>& estimate);

/// Mean over the leading (batch) axis of <H, Hhat> / (|H| |Hhat|).
template <typename Scalar>
double cosine_similarity(const Tensor<Scalar>& truth, const Tensor<Scalar>& estimate);
/// Complex form: Re<H, Hhat> / (|H| |Hhat|) averaged over samples.
double cosine_similarity(const std::vector<ComplexMatrix>& truth,
                         const std::vector<ComplexMatrix>& estimate);

struct Metrics {
  double nmse_db = 0.0;
  double rho = 0.0;
  Index samples = 0;
};

/// Streams samples into the NMSE and rho aggregates. An all-zero estimate
/// contributes rho = 0 rather than failing the whole evaluation.
class MetricAccumulator {
 public:
  void add(std::span<const double> truth, std::span<const double> estimate);
  void add(const ComplexMatrix& truth, const ComplexMatrix& estimate);
  Metrics result() const;

 private:
  double error_ = 0.0;
  double energy_ = 0.0;
  double rho_sum_ = 0.0;
  Index samples_ = 0;
};

enum class MetricDomain { Normalized, Denormalized };

/// Serializes dB values; -inf becomes the string "-inf".
nlohmann::json db_to_json(double db);
double db_from_json(const nlohmann::json& j);

// --- training -------------------------------------------------------------

struct TrainConfig {
  int epochs = 200;
  double lr_max = 1e-4;
  double lr_min = 0.0;
  Index batch_size = 200;
  std::uint64_t seed = 0;
  bool early_stop = true;
  double min_delta_db = 0.1;
  int patience = 20;
  AdamWOptions adamw;
  std::string precision = "float32";
  bool shuffle = true;
  /// Stop after this many optimizer steps (0 = no limit).
  std::int64_t max_steps = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  std::int64_t steps = 0;
  double train_loss = 0.0;
  std::vector<std::pair<std::string, double>> components;  // sample-weighted means
  double val_nmse_db = 0.0;
  double val_rho = 0.0;
};

/// Deterministic record of one run. Wall-clock time is kept out of it so that
/// identical runs serialize identically.
struct ExperimentReport {
  std::string kind = "train";
  nlohmann::json config;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_nmse_db = 0.0;
  bool stopped_early = false;
  bool diverged = false;
  std::string failure;
  Index parameters = 0;
  Index total_flops = 0;
  Index encoder_flops = 0;
  bool has_test = false;
  Metrics test;

  nlohmann::json to_json() const;
  /// One row per epoch: epoch, lr, steps, train_loss, components..., val_nmse_db, val_rho.
  std::string to_csv() const;
  /// JSON lines, one object per epoch.
  std::string to_jsonl() const;
};

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> total;
  std::vector<std::pair<std::string, Tensor<Scalar>>> components;
};

/// Builds the loss of one batch; the model is the one being trained.
template <typename Scalar>
using Objective = std::function<LossTerms<Scalar>(Model<Scalar>& model, const Tensor<Scalar>& x)>;

template <typename Scalar>
LossTerms<Scalar> reconstruction_objective(Model<Scalar>& model, const Tensor<Scalar>& x);

/// Epoch loop with per-epoch cosine learning rate, validation NMSE, early
/// stopping and best-on-validation restoration. On a non-finite loss or
/// gradient the best (or initial) parameters are restored and the report is
/// marked diverged.
template <typename Scalar>
ExperimentReport fit(Model<Scalar>& model, const ChannelDataset& train_set,
                     const ChannelDataset& val_set, const TrainConfig& config,
                     const Objective<Scalar>& objective);

/// fit() with the plain reconstruction MSE.
template <typename Scalar>
ExperimentReport train(Model<Scalar>& model, const ChannelDataset& train_set,
                       const ChannelDataset& val_set, const TrainConfig& config);

template <typename Scalar>
using Reconstructor = std::function<Tensor<Scalar>(const Tensor<Scalar>& x)>;

/// Aggregated NMSE and rho of `reconstruct` over the dataset.
template <typename Scalar>
Metrics evaluate(const Reconstructor<Scalar>& reconstruct, const ChannelDataset& data,
                 Index batch_size = 200, MetricDomain domain = MetricDomain::Normalized);

/// Evaluates the model in inference mode (restoring its mode afterwards).
template <typename Scalar>
Metrics evaluate(Model<Scalar>& model, const ChannelDataset& data, Index batch_size = 200,
                 MetricDomain domain = MetricDomain::Normalized);

}  // namespace neft
