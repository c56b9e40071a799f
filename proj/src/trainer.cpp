#include "neft/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "neft/complexity.hpp"
#include "neft/errors.hpp"

namespace neft {

double cosine_lr(double t, double total, double lr_max, double lr_min) {
  if (!(total > 0.0)) throw DomainError("cosine_lr: T must be positive");
  if (t < 0.0 || t > total) {
    throw DomainError("cosine_lr: epoch " + std::to_string(t) + " outside [0, " + std::to_string(total) + "]");
  }
  if (t == total) return lr_min;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

// --- AdamW ----------------------------------------------------------------

template <typename Scalar>
AdamW<Scalar>::AdamW(std::vector<NamedTensor<Scalar>*> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (auto* p : params_) {
    m_.push_back(Vector<Scalar>::Zero(p->tensor.size()));
    v_.push_back(Vector<Scalar>::Zero(p->tensor.size()));
  }
}

template <typename Scalar>
AdamW<Scalar>::AdamW(Model<Scalar>& model, AdamWOptions options)
    : AdamW(
          [&] {
            std::vector<NamedTensor<Scalar>*> ps;
            for (auto& t : model.tensors()) {
              if (t.trainable) ps.push_back(&t);
            }
            return ps;
          }(),
          options) {}

template <typename Scalar>
void AdamW<Scalar>::step(double lr) {
  for (auto* p : params_) {
    if (p->tensor.has_grad() && !p->tensor.grad().allFinite()) {
      throw NumericError("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  const Scalar decay = static_cast<Scalar>(1.0 - lr * options_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<Scalar>& p = params_[i]->tensor;
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    m = Scalar(b1) * m + Scalar(1 - b1) * g;
    v = Scalar(b2) * v + Scalar(1 - b2) * g.cwiseProduct(g);
    auto& w = p.values();
    w *= decay;
    const Scalar step = static_cast<Scalar>(lr / c1);
    const Scalar inv_c2 = static_cast<Scalar>(1.0 / std::sqrt(c2));
    w.array() -= step * m.array() / (v.array().sqrt() * inv_c2 + Scalar(options_.eps));
  }
}

// --- early stopping -------------------------------------------------------

EarlyStopping::EarlyStopping(double min_delta_db, int patience)
    : min_delta_(min_delta_db), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("early stopping patience must be >= 1");
  if (!(min_delta_db >= 0.0)) throw ConfigError("early stopping min_delta must be >= 0");
}

bool EarlyStopping::update(int epoch, double value) {
  improved_ = best_epoch_ < 0 || value <= best_ - min_delta_;
  if (improved_) {
    best_ = value;
    best_epoch_ = epoch;
  }
  return epoch - best_epoch_ >= patience_;
}

// --- metrics --------------------------------------------------------------

namespace {

double ratio_db(double error, double energy) {
  if (!(energy > 0.0)) throw DomainError("nmse: reference has zero energy");
  if (error == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(error / energy);
}

double cosine(double dot, double na, double nb) {
  if (!(na > 0.0) || !(nb > 0.0)) throw DomainError("cosine_similarity: zero-norm operand");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <typename Scalar>
std::vector<double> as_doubles(const Tensor<Scalar>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

double nmse_db(std::span<const double> truth, std::span<const double> estimate) {
  if (truth.size() != estimate.size()) throw DimensionError("nmse: operands differ in size");
  double error = 0.0, energy = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth[i] - estimate[i];
    error += d * d;
    energy += truth[i] * truth[i];
  }
  return ratio_db(error, energy);
}

double nmse_db(const std::vector<ComplexMatrix>& truth, const std::vector<ComplexMatrix>& estimate) {
  if (truth.size() != estimate.size()) throw DimensionError("nmse: sample counts differ");
  double error = 0.0, energy = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i].rows() != estimate[i].rows() || truth[i].cols() != estimate[i].cols()) {
      throw DimensionError("nmse: matrix shapes differ");
    }
    error += (truth[i] - estimate[i]).squaredNorm();
    energy += truth[i].squaredNorm();
  }
  return ratio_db(error, energy);
}

template <typename Scalar>
double nmse_db(const Tensor<Scalar>& truth, const Tensor<Scalar>& estimate) {
  if (truth.shape() != estimate.shape()) {
    throw DimensionError("nmse: shapes " + shape_string(truth.shape()) + " and " +
                         shape_string(estimate.shape()) + " differ");
  }
  return nmse_db(as_doubles(truth), as_doubles(estimate));
}

template <typename Scalar>
double cosine_similarity(const Tensor<Scalar>& truth, const Tensor<Scalar>& estimate) {
  if (truth.shape() != estimate.shape()) throw DimensionError("cosine_similarity: shapes differ");
  const Index batch = truth.rank() >= 2 ? truth.dim(0) : 1;
  const Index per = truth.size() / batch;
  double sum = 0.0;
  for (Index i = 0; i < batch; ++i) {
    const auto a = truth.values().segment(i * per, per).template cast<double>();
    const auto b = estimate.values().segment(i * per, per).template cast<double>();
    sum += cosine(a.dot(b), a.squaredNorm(), b.squaredNorm());
  }
  return sum / double(batch);
}

double cosine_similarity(const std::vector<ComplexMatrix>& truth,
                         const std::vector<ComplexMatrix>& estimate) {
  if (truth.size() != estimate.size() || truth.empty()) {
    throw DimensionError("cosine_similarity: need equal, non-zero sample counts");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const std::complex<double> dot = (truth[i].conjugate().cwiseProduct(estimate[i])).sum();
    sum += cosine(dot.real(), truth[i].squaredNorm(), estimate[i].squaredNorm());
  }
  return sum / double(truth.size());
}

void MetricAccumulator::add(std::span<const double> truth, std::span<const double> estimate) {
  if (truth.size() != estimate.size()) throw DimensionError("metrics: operands differ in size");
  double error = 0.0, energy = 0.0, dot = 0.0, est = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth[i] - estimate[i];
    error += d * d;
    energy += truth[i] * truth[i];
    dot += truth[i] * estimate[i];
    est += estimate[i] * estimate[i];
  }
  error_ += error;
  energy_ += energy;
  rho_sum_ += est > 0.0 ? cosine(dot, energy, est) : 0.0;
  ++samples_;
}

void MetricAccumulator::add(const ComplexMatrix& truth, const ComplexMatrix& estimate) {
  error_ += (truth - estimate).squaredNorm();
  energy_ += truth.squaredNorm();
  const std::complex<double> dot = (truth.conjugate().cwiseProduct(estimate)).sum();
  const double est = estimate.squaredNorm();
  rho_sum_ += est > 0.0 ? cosine(dot.real(), truth.squaredNorm(), est) : 0.0;
  ++samples_;
}

Metrics MetricAccumulator::result() const {
  if (samples_ == 0) throw DomainError("metrics: no samples");
  return {ratio_db(error_, energy_), rho_sum_ / double(samples_), samples_};
}

nlohmann::json db_to_json(double db) {
  if (std::isinf(db)) return db < 0 ? "-inf" : "inf";
  if (std::isnan(db)) return "nan";
  return db;
}

double db_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
  }
  return j.get<double>();
}

// --- configuration and reports ---------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(lr_max > lr_min) || lr_min < 0.0) throw ConfigError("need lr_max > lr_min >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(min_delta_db >= 0.0)) throw ConfigError("min_delta_db must be >= 0");
  if (precision != "float32" && precision != "float64") {
    throw ConfigError("precision must be float32 or float64");
  }
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (!(adamw.eps > 0.0) || !(adamw.weight_decay >= 0.0)) {
    throw ConfigError("AdamW needs eps > 0 and weight_decay >= 0");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr_max", lr_max},
          {"lr_min", lr_min},
          {"batch_size", batch_size},
          {"seed", seed},
          {"early_stop", early_stop},
          {"min_delta_db", min_delta_db},
          {"patience", patience},
          {"beta1", adamw.beta1},
          {"beta2", adamw.beta2},
          {"eps", adamw.eps},
          {"weight_decay", adamw.weight_decay},
          {"precision", precision},
          {"shuffle", shuffle},
          {"max_steps", max_steps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "lr_max") c.lr_max = value.get<double>();
      else if (key == "lr_min") c.lr_min = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<Index>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "early_stop") c.early_stop = value.get<bool>();
      else if (key == "min_delta_db") c.min_delta_db = value.get<double>();
      else if (key == "patience") c.patience = value.get<int>();
      else if (key == "beta1") c.adamw.beta1 = value.get<double>();
      else if (key == "beta2") c.adamw.beta2 = value.get<double>();
      else if (key == "eps") c.adamw.eps = value.get<double>();
      else if (key == "weight_decay") c.adamw.weight_decay = value.get<double>();
      else if (key == "precision") c.precision = value.get<std::string>();
      else if (key == "shuffle") c.shuffle = value.get<bool>();
      else if (key == "max_steps") c.max_steps = value.get<std::int64_t>();
      else throw ConfigError("unknown training config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
  return c;
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json comps = nlohmann::json::object();
    for (const auto& [name, v] : e.components) comps[name] = v;
    rows.push_back({{"epoch", e.epoch},
                    {"lr", e.lr},
                    {"steps", e.steps},
                    {"train_loss", e.train_loss},
                    {"components", comps},
                    {"val_nmse_db", db_to_json(e.val_nmse_db)},
                    {"val_rho", e.val_rho}});
  }
  nlohmann::json j = {{"kind", kind},
                      {"config", config},
                      {"epochs", rows},
                      {"best_epoch", best_epoch},
                      {"best_val_nmse_db", db_to_json(best_val_nmse_db)},
                      {"stopped_early", stopped_early},
                      {"diverged", diverged},
                      {"parameters", parameters},
                      {"total_flops", total_flops},
                      {"encoder_flops", encoder_flops}};
  if (!failure.empty()) j["failure"] = failure;
  if (has_test) {
    j["test"] = {{"nmse_db", db_to_json(test.nmse_db)}, {"rho", test.rho}, {"samples", test.samples}};
  }
  return j;
}

std::string ExperimentReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,lr,steps,train_loss";
  if (!epochs.empty()) {
    for (const auto& [name, v] : epochs.front().components) os << ',' << name;
  }
  os << ",val_nmse_db,val_rho\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.lr << ',' << e.steps << ',' << e.train_loss;
    for (const auto& [name, v] : e.components) os << ',' << v;
    os << ',' << e.val_nmse_db << ',' << e.val_rho << '\n';
  }
  return os.str();
}

std::string ExperimentReport::to_jsonl() const {
  std::string out;
  const nlohmann::json j = to_json();
  for (const auto& row : j["epochs"]) {
    nlohmann::json line = {{"epoch", row["epoch"]}, {"total", row["train_loss"]}, {"val_nmse_db", row["val_nmse_db"]}};
    for (const auto& [name, v] : row["components"].items()) line[name] = v;
    out += line.dump() + "\n";
  }
  return out;
}

// --- training loop ----------------------------------------------------------

template <typename Scalar>
LossTerms<Scalar> reconstruction_objective(Model<Scalar>& model, const Tensor<Scalar>& x) {
  Tensor<Scalar> rec = mse(model.forward(x).reconstruction, x);
  return {rec, {{"rec", rec}}};
}

namespace {

template <typename Scalar>
bool finite_model(const Model<Scalar>& m) {
  for (const auto& t : m.tensors()) {
    if (!t.tensor.values().allFinite()) return false;
  }
  return true;
}

template <typename Scalar>
void copy_values(Model<Scalar>& dst, const Model<Scalar>& src) {
  for (std::size_t i = 0; i < dst.tensors().size(); ++i) {
    dst.tensors()[i].tensor.values() = src.tensors()[i].tensor.values();
  }
}

}  // namespace

template <typename Scalar>
ExperimentReport fit(Model<Scalar>& model, const ChannelDataset& train_set, const ChannelDataset& val_set,
                     const TrainConfig& config, const Objective<Scalar>& objective) {
  config.validate();
  const NeftConfig& mc = model.config();
  for (const ChannelDataset* ds : {&train_set, &val_set}) {
    if (ds->sample_shape() != Shape{mc.in_channels, mc.height, mc.width}) {
      throw DimensionError("dataset samples " + shape_string(ds->sample_shape()) +
                           " do not match the model input [" + std::to_string(mc.in_channels) + ", " +
                           std::to_string(mc.height) + ", " + std::to_string(mc.width) + "]");
    }
    if (ds->count < 1) throw ConfigError("empty dataset");
  }

  ExperimentReport report;
  report.config = {{"model", mc.to_json()}, {"train", config.to_json()}};
  report.parameters = model.parameter_count();
  const ComplexityReport cx = model_flops(model);
  report.total_flops = cx.total_flops;
  report.encoder_flops = cx.encoder_flops;

  AdamW<Scalar> optimizer(model, config.adamw);
  EarlyStopping stopper(config.min_delta_db, config.patience);
  Model<Scalar> best = model;
  std::mt19937_64 rng(config.seed);
  std::vector<Index> order(static_cast<std::size_t>(train_set.count));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t steps = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min);
    if (config.shuffle) std::shuffle(order.begin(), order.end(), rng);
    model.set_training(true);
    double loss_sum = 0.0;
    std::vector<double> comp_sum;
    Index seen = 0;
    for (Index begin = 0; begin < train_set.count; begin += config.batch_size) {
      if (config.max_steps > 0 && steps >= config.max_steps) break;
      const Index end = std::min(train_set.count, begin + config.batch_size);
      const std::span<const Index> idx(order.data() + begin, static_cast<std::size_t>(end - begin));
      const Tensor<Scalar> x = train_set.batch<Scalar>(idx);
      model.zero_grad();
      LossTerms<Scalar> terms = objective(model, x);
      const double loss = static_cast<double>(terms.total.item());
      if (!std::isfinite(loss)) {
        report.diverged = true;
        report.failure = "non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(steps);
        break;
      }
      backward(terms.total);
      try {
        optimizer.step(rec.lr);
      } catch (const NumericError& e) {
        report.diverged = true;
        report.failure = e.what();
        break;
      }
      ++steps;
      const double n = double(end - begin);
      loss_sum += loss * n;
      comp_sum.resize(terms.components.size(), 0.0);
      for (std::size_t c = 0; c < terms.components.size(); ++c) {
        comp_sum[c] += static_cast<double>(terms.components[c].second.item()) * n;
        if (rec.components.size() < terms.components.size()) {
          rec.components.push_back({terms.components[c].first, 0.0});
        }
      }
      seen += end - begin;
    }
    Tape<Scalar>::active().clear();
    if (!report.diverged && !finite_model(model)) {
      report.diverged = true;
      report.failure = "non-finite parameters after epoch " + std::to_string(epoch);
    }
    if (report.diverged) break;
    if (seen == 0) break;  // step budget exhausted
    rec.steps = steps;
    rec.train_loss = loss_sum / double(seen);
    for (std::size_t c = 0; c < rec.components.size(); ++c) rec.components[c].second = comp_sum[c] / double(seen);

    const Metrics val = evaluate(model, val_set, config.batch_size);
    rec.val_nmse_db = val.nmse_db;
    rec.val_rho = val.rho;
    report.epochs.push_back(rec);

    const bool stop = stopper.update(epoch, val.nmse_db);
    if (stopper.improved()) copy_values(best, model);
    if (config.early_stop && stop) {
      report.stopped_early = true;
      break;
    }
  }
  copy_values(model, best);
  model.set_training(false);
  report.best_epoch = stopper.best_epoch();
  report.best_val_nmse_db = report.best_epoch >= 0 ? stopper.best_value() : 0.0;
  return report;
}

template <typename Scalar>
ExperimentReport train(Model<Scalar>& model, const ChannelDataset& train_set, const ChannelDataset& val_set,
                       const TrainConfig& config) {
  return fit<Scalar>(model, train_set, val_set, config, reconstruction_objective<Scalar>);
}

template <typename Scalar>
Metrics evaluate(const Reconstructor<Scalar>& reconstruct, const ChannelDataset& data, Index batch_size,
                 MetricDomain domain) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  NoGradGuard guard;
  MetricAccumulator acc;
  const Index per = data.sample_size();
  for (Index begin = 0; begin < data.count; begin += batch_size) {
    const Index end = std::min(data.count, begin + batch_size);
    const Tensor<Scalar> x = data.range<Scalar>(begin, end);
    const Tensor<Scalar> y = reconstruct(x);
    if (y.shape() != x.shape()) {
      throw DimensionError("reconstruction " + shape_string(y.shape()) + " does not match input " +
                           shape_string(x.shape()));
    }
    const auto xs = as_doubles(x), ys = as_doubles(y);
    for (Index i = 0; i < end - begin; ++i) {
      const auto off = static_cast<std::size_t>(i * per);
      const std::span<const double> a(xs.data() + off, static_cast<std::size_t>(per));
      const std::span<const double> b(ys.data() + off, static_cast<std::size_t>(per));
      if (domain == MetricDomain::Normalized) {
        acc.add(a, b);
      } else {
        const Index n2 = data.geometry.n2, n1 = data.geometry.n1;
        auto to_matrix = [&](std::span<const double> s) {
          return from_network_output(TensorD::from_values({2, data.height, data.width}, s), data.norm, n2, n1);
        };
        acc.add(to_matrix(a), to_matrix(b));
      }
    }
  }
  return acc.result();
}

template <typename Scalar>
Metrics evaluate(Model<Scalar>& model, const ChannelDataset& data, Index batch_size, MetricDomain domain) {
  const bool was_training = model.training();
  model.set_training(false);
  try {
    const Metrics m = evaluate<Scalar>([&](const Tensor<Scalar>& x) { return model.forward(x).reconstruction; },
                                       data, batch_size, domain);
    model.set_training(was_training);
    return m;
  } catch (...) {
    model.set_training(was_training);
    throw;
  }
}

#define NEFT_INSTANTIATE(S)                                                                                 \
  template class AdamW<S>;                                                                                  \
  template double nmse_db<S>(const Tensor<S>&, const Tensor<S>&);                                           \
  template double cosine_similarity<S>(const Tensor<S>&, const Tensor<S>&);                                 \
  template LossTerms<S> reconstruction_objective<S>(Model<S>&, const Tensor<S>&);                           \
  template ExperimentReport fit<S>(Model<S>&, const ChannelDataset&, const ChannelDataset&, const TrainConfig&, \
                                   const Objective<S>&);                                                    \
  template ExperimentReport train<S>(Model<S>&, const ChannelDataset&, const ChannelDataset&, const TrainConfig&); \
  template Metrics evaluate<S>(const Reconstructor<S>&, const ChannelDataset&, Index, MetricDomain);        \
  template Metrics evaluate<S>(Model<S>&, const ChannelDataset&, Index, MetricDomain);
NEFT_INSTANTIATE(float)
NEFT_INSTANTIATE(double)
#undef NEFT_INSTANTIATE

}  // namespace neft
