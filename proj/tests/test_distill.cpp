#include <cmath>

#include "doctest.h"
#include "neft/distill.hpp"
#include "neft/errors.hpp"
#include "test_util.hpp"

using namespace neft;
using neft::testing::bitwise_equal;
using neft::testing::random_tensor;

namespace {

ChannelDataset small_set(Index count, std::uint64_t seed, const NormalizationParams* norm = nullptr) {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(256);
  return norm ? sample_dataset(g, 0.05, 0.5, count, seed, *norm) : sample_dataset(g, 0.05, 0.5, count, seed);
}

NeftConfig small_student() {
  NeftConfig c = NeftConfig::tiny();
  c.variant = Variant::Compact;
  c.c1 = 4;
  c.seed = 9;
  return c;
}

AttentionTrace<double> random_trace(const std::vector<Shape>& shapes, std::uint64_t seed) {
  AttentionTrace<double> t;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    t.push_back({"layer" + std::to_string(l), 0, random_tensor(shapes[l], seed + l, 0.0, 1.0)});
  }
  return t;
}

}  // namespace

TEST_CASE("reconstruction alignment") {
  const auto a = random_tensor({3, 2, 4, 4}, 1);
  CHECK(loss_ra(a, a).item() == 0.0);
  CHECK(loss_ra(TensorD::from_values({2, 2, 2}, std::vector<double>(8, 1.0)), TensorD({2, 2, 2})).item() == 1.0);

  const auto b = random_tensor({3, 2, 4, 4}, 2);
  double oracle = 0.0;
  for (Index i = 0; i < a.size(); ++i) oracle += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  oracle /= double(a.size());
  CHECK(loss_ra(a, b).item() == doctest::Approx(oracle).epsilon(1e-12));
  CHECK_THROWS_AS(loss_ra(a, random_tensor({3, 2, 4, 3}, 2)), DimensionError);
}

TEST_CASE("codeword alignment") {
  CHECK(loss_ca(TensorD::from_values({1, 2}, {1.0, 1.0}), TensorD({1, 2})).item() == 1.0);
  const auto zt = random_tensor({1, 128}, 3), zs = random_tensor({1, 128}, 4);
  double oracle = 0.0;
  for (Index i = 0; i < 128; ++i) oracle += (zt(0, i) - zs(0, i)) * (zt(0, i) - zs(0, i));
  CHECK(loss_ca(zt, zs).item() == doctest::Approx(oracle / 128.0).epsilon(1e-12));
  CHECK(loss_ca(zt, zt).item() == 0.0);
  CHECK_THROWS_AS(loss_ca(zt, random_tensor({1, 64}, 4)), DistillCompatibilityError);
}

TEST_CASE("attention alignment") {
  // One layer, two heads with per-head squared norms a = 0.5 and b = 9.
  TensorD t({1, 2, 3, 3}), s({1, 2, 3, 3});
  for (Index j = 0; j < 2; ++j) s(0, 0, 0, j) = 0.5;
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 3; ++j) s(0, 1, i, j) = 1.0;
  }
  const AttentionTrace<double> tt = {{"x", 0, t}}, st = {{"x", 0, s}};
  CHECK(loss_aa(tt, st).item() == doctest::Approx((0.5 + 9.0) / 2.0).epsilon(1e-15));
  CHECK(loss_aa(tt, tt).item() == 0.0);

  // Two layers with batch 2: quadruple loop over (layer, batch, head, entry).
  const std::vector<Shape> shapes = {{2, 3, 4, 4}, {2, 2, 2, 2}};
  const auto ta = random_trace(shapes, 10), sa = random_trace(shapes, 20);
  double oracle = 0.0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const Index batch = shapes[l][0], heads = shapes[l][1], n = shapes[l][2];
    double layer = 0.0;
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads; ++h) {
        for (Index i = 0; i < n; ++i) {
          for (Index j = 0; j < n; ++j) {
            const double d = ta[l].maps(b, h, i, j) - sa[l].maps(b, h, i, j);
            layer += d * d;
          }
        }
      }
    }
    oracle += layer / double(batch * heads);
  }
  oracle /= 2.0;
  CHECK(loss_aa(ta, sa).item() == doctest::Approx(oracle).epsilon(1e-12));

  CHECK_THROWS_AS(loss_aa(ta, random_trace({{2, 3, 4, 4}}, 5)), DistillCompatibilityError);
  CHECK_THROWS_AS(loss_aa(ta, random_trace({{2, 2, 4, 4}, {2, 2, 2, 2}}, 5)), DistillCompatibilityError);
}

TEST_CASE("weighted total") {
  const TensorD one = TensorD::scalar(1.0);
  CHECK(total_loss(one, one, one, one, DistillConfig{}).item() == doctest::Approx(5.3).epsilon(1e-15));
  const TensorD rec = TensorD::scalar(0.75), nan = TensorD::scalar(std::nan(""));
  CHECK(total_loss(rec, nan, nan, nan, DistillConfig::without_kd()).item() == 0.75);
  CHECK(total_loss(rec, one, nan, nan, DistillConfig::only_recon()).item() == doctest::Approx(1.05));
}

TEST_CASE("self-distillation starts with zero alignment losses") {
  ModelD teacher(NeftConfig::tiny());
  ModelD student = teacher;
  teacher.set_training(false);
  student.set_training(false);
  const auto x = random_tensor({3, 2, 16, 16}, 7, 0.0, 1.0);
  const auto t = teacher.forward(x), s = student.forward(x);
  CHECK(loss_ra(t.reconstruction, s.reconstruction).item() == 0.0);
  CHECK(loss_ca(t.codeword, s.codeword).item() == 0.0);
  CHECK(loss_aa(t.attention, s.attention).item() == 0.0);
}

TEST_CASE("compatibility checks") {
  const ModelD teacher(NeftConfig::tiny());
  CHECK_NOTHROW(check_compatible(teacher, ModelD(small_student())));

  NeftConfig heads = small_student();
  heads.heads_per_stage = {1, 2};
  CHECK_THROWS_AS(check_compatible(teacher, ModelD(heads)), DistillCompatibilityError);

  NeftConfig rate = small_student();
  rate.gamma = 64;
  CHECK_THROWS_AS(check_compatible(teacher, ModelD(rate)), DistillCompatibilityError);

  NeftConfig hybrid = NeftConfig::tiny();
  hybrid.variant = Variant::Hybrid;
  hybrid.c0 = 8;
  CHECK_THROWS_AS(check_compatible(teacher, ModelD(hybrid)), DistillCompatibilityError);
  NeftConfig edge = hybrid;
  edge.variant = Variant::Edge;
  edge.c0 = 4;
  edge.c1 = 4;
  CHECK_NOTHROW(check_compatible(ModelD(hybrid), ModelD(edge)));
}

TEST_CASE("distillation leaves the teacher untouched") {
  const ChannelDataset tr = small_set(24, 1);
  const ChannelDataset va = small_set(8, 2, &tr.norm);
  NeftConfig hc = NeftConfig::tiny();
  hc.variant = Variant::Hybrid;
  hc.c0 = 8;
  NeftConfig ec = hc;
  ec.variant = Variant::Edge;
  ec.c0 = 4;
  ec.c1 = 4;
  const ModelD teacher(hc);  // batch-norm statistics must stay frozen as well
  const ModelD before = teacher;
  ModelD student(ec);
  DistillConfig c;
  c.train.epochs = 3;
  c.train.batch_size = 8;
  c.train.lr_max = 1e-3;
  const ExperimentReport r = distill_train(teacher, student, tr, va, c);
  REQUIRE(r.epochs.size() == 3);
  for (std::size_t i = 0; i < teacher.tensors().size(); ++i) {
    CHECK(bitwise_equal(teacher.tensors()[i].tensor, before.tensors()[i].tensor));
    CHECK_FALSE(teacher.tensors()[i].tensor.has_grad());
  }
  CHECK(r.kind == "distill");
  CHECK(r.config.contains("distill"));
  CHECK(r.config.contains("teacher"));
}

TEST_CASE("logged components add up to the total") {
  const ChannelDataset tr = small_set(24, 3);
  const ChannelDataset va = small_set(8, 4, &tr.norm);
  ModelD teacher(NeftConfig::tiny());
  ModelD student(small_student());
  DistillConfig c;
  c.train.epochs = 2;
  c.train.batch_size = 8;
  const ExperimentReport r = distill_train(teacher, student, tr, va, c);
  for (const auto& e : r.epochs) {
    REQUIRE(e.components.size() == 4);
    double sum = e.components[0].second + c.lambda1 * e.components[1].second +
                 c.lambda2 * e.components[2].second + c.lambda3 * e.components[3].second;
    for (const auto& [name, v] : e.components) CHECK(std::isfinite(v));
    CHECK(e.train_loss == doctest::Approx(sum).epsilon(1e-9));
    CHECK(e.components[1].second > 0.0);
  }
  const std::string jsonl = r.to_jsonl();
  const std::string line = jsonl.substr(0, jsonl.find('\n'));
  for (const char* key : {"\"rec\"", "\"ra\"", "\"aa\"", "\"ca\"", "\"total\"", "\"val_nmse_db\""}) {
    CHECK(line.find(key) != std::string::npos);
  }
}

TEST_CASE("zero weights reproduce plain training exactly") {
  const ChannelDataset tr = small_set(24, 5);
  const ChannelDataset va = small_set(8, 6, &tr.norm);
  const ModelD teacher(NeftConfig::tiny());
  DistillConfig c = DistillConfig::without_kd();
  c.train.epochs = 3;
  c.train.batch_size = 8;
  c.train.seed = 4;
  ModelD a(small_student()), b(small_student());
  const ExperimentReport ra = train(a, tr, va, c.train);
  const ExperimentReport rb = distill_train(teacher, b, tr, va, c);
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    CHECK(bitwise_equal(a.tensors()[i].tensor, b.tensors()[i].tensor));
  }
  REQUIRE(ra.epochs.size() == rb.epochs.size());
  for (std::size_t e = 0; e < ra.epochs.size(); ++e) {
    CHECK(ra.epochs[e].train_loss == rb.epochs[e].train_loss);
    CHECK(ra.epochs[e].val_nmse_db == rb.epochs[e].val_nmse_db);
  }
}

TEST_CASE("distillation config") {
  const DistillConfig d;
  CHECK(d.lambda1 == 0.3);
  CHECK(d.lambda2 == 2.0);
  CHECK(d.lambda3 == 2.0);
  CHECK(d.train.lr_max == 3e-4);
  const DistillConfig o = DistillConfig::preset("only-recon");
  CHECK(o.lambda1 == 0.3);
  CHECK(o.lambda2 == 0.0);
  CHECK(o.lambda3 == 0.0);
  CHECK(DistillConfig::preset("without_kd").lambda1 == 0.0);
  CHECK_THROWS_AS(DistillConfig::preset("half"), ConfigError);

  DistillConfig c = DistillConfig::only_recon();
  c.train.epochs = 7;
  c.teacher_checkpoint = "teacher.ckpt";
  const DistillConfig back = DistillConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(DistillConfig::from_json({{"lambda4", 1.0}}), ConfigError);
  CHECK_THROWS_AS(DistillConfig::from_json({{"lambda1", -1.0}}), ConfigError);
}
