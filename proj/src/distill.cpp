#include "neft/distill.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "neft/errors.hpp"

namespace neft {

template <typename Scalar>
Tensor<Scalar> loss_ra(const Tensor<Scalar>& teacher, const Tensor<Scalar>& student) {
  if (teacher.shape() != student.shape()) {
    throw DimensionError("loss_ra: reconstructions " + shape_string(teacher.shape()) + " and " +
                         shape_string(student.shape()) + " differ");
  }
  return mse(student, teacher);
}

template <typename Scalar>
Tensor<Scalar> loss_ca(const Tensor<Scalar>& teacher, const Tensor<Scalar>& student) {
  if (teacher.shape() != student.shape()) {
    throw DistillCompatibilityError("codewords " + shape_string(teacher.shape()) + " and " +
                                    shape_string(student.shape()) + " cannot be aligned");
  }
  return mse(student, teacher);
}

template <typename Scalar>
Tensor<Scalar> loss_aa(const AttentionTrace<Scalar>& teacher, const AttentionTrace<Scalar>& student) {
  if (teacher.size() != student.size() || teacher.empty()) {
    throw DistillCompatibilityError("teacher has " + std::to_string(teacher.size()) +
                                    " attention layers, student " + std::to_string(student.size()));
  }
  Tensor<Scalar> total;
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    const Tensor<Scalar>& t = teacher[l].maps;
    const Tensor<Scalar>& s = student[l].maps;
    if (t.rank() != 4 || t.shape() != s.shape()) {
      throw DistillCompatibilityError("attention layer " + std::to_string(l) + " (" + teacher[l].stage +
                                      "): maps " + shape_string(t.shape()) + " vs " +
                                      shape_string(s.shape()));
    }
    const Tensor<Scalar> d = s - t;
    const Scalar w = Scalar(1) / Scalar(t.dim(0) * t.dim(1));
    const Tensor<Scalar> layer = scale(sum(d * d), w);
    total = l == 0 ? layer : total + layer;
  }
  return scale(total, Scalar(1) / Scalar(teacher.size()));
}

// --- configuration ----------------------------------------------------------

DistillConfig DistillConfig::full() { return {}; }

DistillConfig DistillConfig::only_recon() {
  DistillConfig c;
  c.lambda2 = 0.0;
  c.lambda3 = 0.0;
  return c;
}

DistillConfig DistillConfig::without_kd() {
  DistillConfig c;
  c.lambda1 = c.lambda2 = c.lambda3 = 0.0;
  return c;
}

DistillConfig DistillConfig::preset(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char ch) { return std::tolower(ch); });
  std::replace(n.begin(), n.end(), '_', '-');
  if (n == "full") return full();
  if (n == "only-recon" || n == "onlyrecon") return only_recon();
  if (n == "without-kd" || n == "w/o-kd" || n == "none") return without_kd();
  throw ConfigError("unknown distillation preset '" + name + "' (full, only-recon, without-kd)");
}

void DistillConfig::validate() const {
  for (double l : {lambda1, lambda2, lambda3}) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigError("distillation weights must be finite and >= 0");
  }
  train.validate();
}

nlohmann::json DistillConfig::to_json() const {
  return {{"lambda1", lambda1},
          {"lambda2", lambda2},
          {"lambda3", lambda3},
          {"train", train.to_json()},
          {"teacher_checkpoint", teacher_checkpoint}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) { return from_json(j, DistillConfig{}); }

DistillConfig DistillConfig::from_json(const nlohmann::json& j, DistillConfig c) {
  if (!j.is_object()) throw ConfigError("distillation config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lambda1") c.lambda1 = value.get<double>();
      else if (key == "lambda2") c.lambda2 = value.get<double>();
      else if (key == "lambda3") c.lambda3 = value.get<double>();
      else if (key == "train") c.train = TrainConfig::from_json(value, c.train);
      else if (key == "teacher_checkpoint") c.teacher_checkpoint = value.get<std::string>();
      else throw ConfigError("unknown distillation config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad distillation config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- training ---------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> total_loss(const Tensor<Scalar>& rec, const Tensor<Scalar>& ra, const Tensor<Scalar>& aa,
                          const Tensor<Scalar>& ca, const DistillConfig& config) {
  Tensor<Scalar> total = rec;
  if (config.lambda1 != 0.0) total = total + scale(ra, Scalar(config.lambda1));
  if (config.lambda2 != 0.0) total = total + scale(aa, Scalar(config.lambda2));
  if (config.lambda3 != 0.0) total = total + scale(ca, Scalar(config.lambda3));
  return total;
}

template <typename Scalar>
void check_compatible(const Model<Scalar>& teacher, const Model<Scalar>& student) {
  const NeftConfig& tc = teacher.config();
  const NeftConfig& sc = student.config();
  if (tc.in_channels != sc.in_channels || tc.height != sc.height || tc.width != sc.width) {
    throw DistillCompatibilityError("teacher and student expect different inputs");
  }
  if (tc.codeword_length() != sc.codeword_length()) {
    throw DistillCompatibilityError("codeword lengths differ: teacher " + std::to_string(tc.codeword_length()) +
                                    ", student " + std::to_string(sc.codeword_length()));
  }
  NoGradGuard guard;
  const Tensor<Scalar> probe(Shape{1, tc.in_channels, tc.height, tc.width});
  Model<Scalar> t = teacher, s = student;
  t.set_training(false);
  s.set_training(false);
  const AttentionTrace<Scalar> ta = t.forward(probe).attention;
  const AttentionTrace<Scalar> sa = s.forward(probe).attention;
  if (ta.size() != sa.size()) {
    throw DistillCompatibilityError("teacher has " + std::to_string(ta.size()) + " attention layers, student " +
                                    std::to_string(sa.size()));
  }
  for (std::size_t l = 0; l < ta.size(); ++l) {
    if (ta[l].stage != sa[l].stage || ta[l].maps.shape() != sa[l].maps.shape()) {
      throw DistillCompatibilityError("attention layer " + std::to_string(l) + ": teacher " + ta[l].stage + " " +
                                      shape_string(ta[l].maps.shape()) + ", student " + sa[l].stage + " " +
                                      shape_string(sa[l].maps.shape()));
    }
  }
}

template <typename Scalar>
ExperimentReport distill_train(const Model<Scalar>& teacher, Model<Scalar>& student,
                               const ChannelDataset& train_set, const ChannelDataset& val_set,
                               const DistillConfig& config) {
  config.validate();
  check_compatible(teacher, student);
  Model<Scalar> frozen = teacher;
  frozen.set_training(false);

  const Objective<Scalar> objective = [&](Model<Scalar>& model, const Tensor<Scalar>& x) {
    AlignmentBundle<Scalar> target;
    {
      NoGradGuard guard;
      target = frozen.forward(x);
    }
    const AlignmentBundle<Scalar> out = model.forward(x);
    const Tensor<Scalar> rec = mse(out.reconstruction, x);
    // Terms with zero weight are computed outside the tape: logged, never differentiated.
    auto term = [&](double weight, auto&& fn) {
      if (weight != 0.0) return fn();
      NoGradGuard guard;
      return fn();
    };
    const Tensor<Scalar> ra = term(config.lambda1, [&] { return loss_ra(target.reconstruction, out.reconstruction); });
    const Tensor<Scalar> aa = term(config.lambda2, [&] { return loss_aa(target.attention, out.attention); });
    const Tensor<Scalar> ca = term(config.lambda3, [&] { return loss_ca(target.codeword, out.codeword); });
    return LossTerms<Scalar>{total_loss(rec, ra, aa, ca, config), {{"rec", rec}, {"ra", ra}, {"aa", aa}, {"ca", ca}}};
  };

  ExperimentReport report = fit<Scalar>(student, train_set, val_set, config.train, objective);
  report.kind = "distill";
  report.config["distill"] = config.to_json();
  report.config["teacher"] = teacher.config().to_json();
  return report;
}

#define NEFT_INSTANTIATE(S)                                                                              \
  template Tensor<S> loss_ra<S>(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> loss_ca<S>(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> loss_aa<S>(const AttentionTrace<S>&, const AttentionTrace<S>&);                     \
  template Tensor<S> total_loss<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                   const DistillConfig&);                                                \
  template void check_compatible<S>(const Model<S>&, const Model<S>&);                                   \
  template ExperimentReport distill_train<S>(const Model<S>&, Model<S>&, const ChannelDataset&,          \
                                             const ChannelDataset&, const DistillConfig&);
NEFT_INSTANTIATE(float)
NEFT_INSTANTIATE(double)
#undef NEFT_INSTANTIATE

}  // namespace neft
