// Acceptance suite: one PASS/FAIL line per criterion. `--only N` runs one.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "neft/channel.hpp"
#include "neft/complexity.hpp"
#include "neft/distill.hpp"
#include "neft/gradcheck.hpp"
#include "neft/model.hpp"
#include "neft/ops.hpp"
#include "neft/trainer.hpp"

namespace fs = std::filesystem;
using namespace neft;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

TensorD uniform(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  TensorD t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

void perturb(ModelD& m, std::uint64_t seed, double amplitude) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (auto& t : m.tensors()) {
    if (!t.trainable) continue;
    for (auto& v : t.tensor.data()) v += dist(rng);
  }
}

// --- 1 ----------------------------------------------------------------------

Outcome gradients() {
  const Clock clock;
  double worst = 0.0;
  std::string worst_name;
  auto check = [&](const std::string& name, const std::function<TensorD(const std::vector<TensorD>&)>& op,
                   std::vector<TensorD> in) {
    GradCheckOptions opts;
    const GradCheckReport r = grad_check(
        [&] {
          const TensorD y = op(in);
          return sum(mul(y, uniform(y.shape(), 77, 0.5, 1.5)));
        },
        in, opts);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  };
  std::uint64_t seed = 1;
  for (const Shape& s : std::vector<Shape>{{5}, {3, 4}, {2, 3, 4}}) {
    const TensorD a = uniform(s, seed++), b = uniform(s, seed++), tail = uniform({s.back()}, seed++);
    TensorD away = uniform(s, seed++, 0.1, 1.0);
    for (auto& v : away.data()) v *= (seed++ % 2 ? 1.0 : -1.0);
    check("add", [](const auto& x) { return add(x[0], x[1]); }, {a, b});
    check("sub", [](const auto& x) { return sub(x[0], x[1]); }, {a, tail});
    check("mul", [](const auto& x) { return mul(x[0], x[1]); }, {a, tail});
    check("scale", [](const auto& x) { return scale(x[0], -1.7); }, {a});
    check("relu", [](const auto& x) { return relu(x[0]); }, {away});
    check("gelu", [](const auto& x) { return gelu(x[0]); }, {a});
    check("softmax", [](const auto& x) { return softmax(x[0]); }, {a});
    check("mse", [](const auto& x) { return mse(x[0], x[1]); }, {a, b});
    check("mean", [](const auto& x) { return mean(x[0]); }, {a});
    check("layer_norm", [](const auto& x) { return layer_norm(x[0], x[1], x[2]); },
          {a, uniform({s.back()}, seed++, 0.5, 1.5), tail});
    check("flatten", [](const auto& x) { return flatten(x[0], 0); }, {a});
    std::vector<Index> order(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(order.size() - 1 - i);
    check("permute", [order](const auto& x) { return permute(x[0], order); }, {a});
    check("index_select", [](const auto& x) { return index_select(x[0], {0, 0, 1}); }, {a});
  }
  check("matmul", [](const auto& x) { return matmul(x[0], x[1]); }, {uniform({3, 4}, seed++), uniform({4, 5}, seed++)});
  check("batched matmul", [](const auto& x) { return matmul(x[0], x[1]); },
        {uniform({2, 3, 4}, seed++), uniform({2, 4, 2}, seed++)});
  check("matmul_transposed", [](const auto& x) { return matmul_transposed(x[0], x[1]); },
        {uniform({2, 3, 4}, seed++), uniform({2, 5, 4}, seed++)});
  for (bool training : {true, false}) {
    BatchNormStats<double> stats{TensorD({3}, 0.0), TensorD({3}, 1.0), 0.1, 1e-5};
    check("batch_norm", [&](const auto& x) { return batch_norm(x[0], x[1], x[2], stats, training); },
          {uniform({3, 3, 2, 2}, seed++), uniform({3}, seed++, 0.5, 1.5), uniform({3}, seed++)});
  }
  const TensorD img = uniform({2, 2, 6, 6}, seed++);
  check("conv2d", [](const auto& x) { return conv2d(x[0], x[1], x[2], 2, 0); },
        {img, uniform({3, 2, 2, 2}, seed++), uniform({3}, seed++)});
  check("conv_transpose2d", [](const auto& x) { return conv_transpose2d(x[0], x[1], x[2], 2); },
        {img, uniform({2, 3, 2, 2}, seed++), uniform({3}, seed++)});
  const double op_worst = worst;

  // Whole models: the C1 = 8 preset and a C1 = 6, gamma = 64 model under 5k parameters.
  std::ostringstream models;
  bool models_ok = true;
  NeftConfig small = NeftConfig::tiny();
  small.c1 = 6;
  small.gamma = 64;
  for (const NeftConfig& c : {NeftConfig::tiny(), small}) {
    ModelD m(c);
    perturb(m, 12, 0.2);
    const TensorD x = uniform({2, 2, c.height, c.width}, 13, 0.0, 1.0);
    const GradCheckReport r = grad_check([&] { return mse(m.forward(x).reconstruction, x); }, m.parameters());
    models_ok = models_ok && r.max_rel_error < 1e-4 && r.checked == m.parameter_count();
    models << "; C1=" << c.c1 << " heads=" << c.heads_per_stage[0] << " (" << m.parameter_count()
           << " params) max rel err " << sci(r.max_rel_error);
  }
  const double t = clock.seconds();
  return {op_worst < 1e-4 && models_ok && t < 120.0,
          "ops max rel err " + sci(op_worst) + " (" + worst_name + ")" + models.str() + "; " + fmt(t, 1) + " s"};
}

// --- 2 ----------------------------------------------------------------------

Outcome flops() {
  const ModelF m(NeftConfig::preset(Variant::Neft));
  const ComplexityReport r = model_flops(m);
  // Independent arithmetic: global attention over N tokens costs 2 N^2 C + 4 N C^2,
  // windowed attention sums that over (H W / M^2) windows of M^2 tokens, and a
  // convolution is the walked count of its multiply-accumulates.
  auto msa = [](Index n, Index c) { return 2 * n * n * c + 4 * n * c * c; };
  auto walked_conv = [](Index ho, Index wo, Index co, Index k, Index ci) {
    Index count = 0;
    for (Index y = 0; y < ho; ++y)
      for (Index x = 0; x < wo; ++x)
        for (Index o = 0; o < co; ++o)
          for (Index i = 0; i < ci * k * k; ++i) ++count;
    return count;
  };
  const Index w_oracle = (16 * 16 / 16) * msa(16, 40);
  const bool reference = r.encoder_msa_reference == 860160 && msa(64, 40) + msa(16, 40) == 860160;
  const bool units = msa_flops(8, 8, 40) == msa(64, 40) && msa(64, 40) == 737280 &&
                     msa_flops(4, 4, 40) == msa(16, 40) && msa(16, 40) == 122880 &&
                     wmsa_flops(16, 16, 40, 4) == w_oracle && w_oracle == 1966080 &&
                     conv_flops(16, 16, 8, 3, 3, 2) == walked_conv(16, 16, 8, 3, 2) &&
                     walked_conv(16, 16, 8, 3, 2) == 36864;
  return {reference && units, "encoder reference " + with_separators(r.encoder_msa_reference) + ", MSA(8x8) " +
                                  with_separators(msa_flops(8, 8, 40)) + ", MSA(4x4) " +
                                  with_separators(msa_flops(4, 4, 40)) + ", W-MSA(16x16, M=4) " +
                                  with_separators(wmsa_flops(16, 16, 40, 4)) + ", conv 3x3 " +
                                  with_separators(conv_flops(16, 16, 8, 3, 3, 2))};
}

// --- 3 ----------------------------------------------------------------------

// BS antenna n1 at (0, n1 d); UE antenna n2 offset from the first UE antenna
// along (-sin phi, cos phi).
double coordinate_distance(double d, double r, double theta, double phi, Index n1, Index n2) {
  const double ux = r * std::cos(theta) - double(n2) * d * std::sin(phi);
  const double uy = r * std::sin(theta) + double(n2) * d * std::cos(phi);
  return std::hypot(ux, uy - double(n1) * d);
}

Outcome geometry() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0, origin = 0.0, magnitude = 0.0;
  for (int t = 0; t < 1000; ++t) {
    ArrayGeometry g;
    g.n1 = 1 + static_cast<Index>(unit(rng) * 256);
    g.n2 = 1 + static_cast<Index>(unit(rng) * 4);
    g.wavelength = 0.001 + unit(rng) * 0.1;
    g.spacing = g.wavelength * (0.25 + unit(rng));
    const UePlacement p{1.0 + unit(rng) * 2000.0, unit(rng) * 2.0 * kPi, unit(rng) * 2.0 * kPi};
    const ChannelSample s = channel_matrix(g, p);
    for (Index b = 0; b < g.n2; ++b) {
      for (Index a = 0; a < g.n1; ++a) {
        const double brute = coordinate_distance(g.spacing, p.r, p.theta, p.phi, a, b);
        const double got = element_distance(g, p, a, b);
        worst = std::max(worst, std::abs(got - brute) / brute);
        magnitude = std::max(magnitude, std::abs(std::abs(s.h(b, a)) * got - 1.0));
      }
    }
    origin = std::max(origin, std::abs(element_distance(g, p, 0, 0) - p.r));
  }
  // Every entry of a generated desk-scale dataset as well.
  const ArrayGeometry g = ArrayGeometry::half_wavelength(1024);
  const double d_r = rayleigh_distance(g.aperture(), g.wavelength);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const UePlacement p = sample_placement(5, i, 0.05 * d_r, 0.5 * d_r);
    const ChannelSample s = channel_matrix(g, p);
    for (Index a = 0; a < g.n1; ++a) {
      magnitude = std::max(magnitude, std::abs(std::abs(s.h(0, a)) * element_distance(g, p, a, 0) - 1.0));
    }
  }
  return {worst < 1e-12 && origin == 0.0 && magnitude < 1e-12,
          "max rel err " + sci(worst) + ", d(0,0) - r = " + sci(origin) + ", max ||h| r - 1| " + sci(magnitude)};
}

// --- 4 ----------------------------------------------------------------------

Outcome shapes() {
  const std::pair<Index, Index> cases[] = {{16, 128}, {32, 64}, {64, 32}};
  bool ok = true;
  std::ostringstream os;
  for (auto [gamma, k] : cases) {
    ModelF m(NeftConfig::preset(Variant::Neft, gamma));
    m.set_training(false);
    const auto r = m.forward(uniform({1, 2, 32, 32}, 3, 0.0, 1.0).cast<float>());
    ok = ok && r.codeword.shape() == Shape{1, k} && r.reconstruction.shape() == Shape{1, 2, 32, 32};
    os << "gamma " << gamma << " -> K " << r.codeword.dim(1) << ", ";
    if (gamma == 16) {
      ok = ok && r.attention.size() == 4 && r.attention[0].maps.dim(2) == 64 && r.attention[1].maps.dim(2) == 16;
      os << "tokens " << r.attention[0].maps.dim(2) << "/" << r.attention[1].maps.dim(2) << ", ";
    }
  }
  os << "reconstruction 2x32x32";
  return {ok, os.str()};
}

// --- 5 ----------------------------------------------------------------------

Outcome attention_rows() {
  double worst = 0.0;
  Index rows = 0;
  for (Variant v : {Variant::Neft, Variant::Hybrid}) {
    ModelF m(NeftConfig::preset(v));
    m.set_training(false);
    for (std::uint64_t s = 0; s < 100; s += 10) {
      TensorF x(Shape{10, 2, 32, 32});
      std::mt19937_64 rng(100 + s);
      std::uniform_real_distribution<float> dist(0.0f, 1.0f);
      for (auto& e : x.data()) e = dist(rng);
      const auto r = m.forward(x);
      for (const auto& rec : r.attention) {
        const Index n = rec.maps.dim(-1);
        for (Index i = 0; i < rec.maps.size() / n; ++i) {
          worst = std::max(worst, std::abs(double(rec.maps.values().segment(i * n, n).sum()) - 1.0));
          ++rows;
        }
      }
    }
  }
  return {worst < 1e-6, std::to_string(rows) + " rows over 100 inputs (NEFT and Hybrid), max |sum - 1| " + sci(worst)};
}

// --- 6 ----------------------------------------------------------------------

Outcome overfit() {
  const Clock clock;
  const ChannelDataset data = sample_dataset(ArrayGeometry::half_wavelength(1024), 0.05, 0.5, 32, 1);
  ModelF m(NeftConfig::preset(Variant::Neft));
  TrainConfig c;
  c.epochs = 500;
  c.batch_size = 32;  // one step per epoch
  c.lr_max = 2e-3;
  c.adamw.beta2 = 0.9;
  c.early_stop = false;
  const ExperimentReport r = train(m, data, data, c);
  const double nmse = evaluate(m, data, 32).nmse_db;
  const double t = clock.seconds();
  const std::int64_t steps = r.epochs.empty() ? 0 : r.epochs.back().steps;
  return {nmse <= -30.0 && steps <= 500 && t < 600.0,
          "train NMSE " + fmt(nmse, 2) + " dB after " + std::to_string(steps) + " steps, " + fmt(t, 1) + " s"};
}

// --- 7 ----------------------------------------------------------------------

Outcome desk_scale() {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(1024);
  const ChannelDataset tr = sample_dataset(g, 0.05, 0.5, 2000, 11);
  const ChannelDataset va = sample_dataset(g, 0.05, 0.5, 500, 12, tr.norm);
  // Predicting the training mean, for reference.
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(tr.sample_size());
  for (Index i = 0; i < tr.count; ++i) {
    const auto x = tr.sample(i);
    mean += Eigen::Map<const Eigen::VectorXd>(x.data(), Index(x.size()));
  }
  mean /= double(tr.count);
  const Metrics floor = evaluate<double>(
      [&](const TensorD& x) {
        TensorD y(x.shape());
        for (Index b = 0; b < x.dim(0); ++b) y.values().segment(b * mean.size(), mean.size()) = mean;
        return y;
      },
      va);

  std::ostringstream os;
  bool ok = true;
  for (auto [v, bound] : {std::pair{Variant::Neft, -10.0}, std::pair{Variant::Hybrid, -8.0}}) {
    const Clock clock;
    ModelF m(NeftConfig::preset(v));
    TrainConfig c;
    c.epochs = 30;
    const ExperimentReport r = train(m, tr, va, c);
    const double nmse = evaluate(m, va).nmse_db;
    const double t = clock.seconds();
    ok = ok && nmse <= bound && t < 1800.0;
    os << variant_name(v) << " " << fmt(nmse, 2) << " dB (<= " << bound << ", " << r.epochs.size() << " epochs, "
       << fmt(t, 0) << " s); ";
  }
  os << "mean predictor " << fmt(floor.nmse_db, 2) << " dB";
  return {ok, os.str()};
}

// --- 8 ----------------------------------------------------------------------

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

double min_val(const ExperimentReport& r) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.epochs) best = std::min(best, e.val_nmse_db);
  return best;
}

Outcome kd_ordering() {
  const Clock clock;
  const ArrayGeometry g = ArrayGeometry::half_wavelength(1024);
  const ChannelDataset teacher_set = sample_dataset(g, 0.05, 0.5, 1000, 1);
  const ChannelDataset va = sample_dataset(g, 0.05, 0.5, 500, 2, teacher_set.norm);
  const ChannelDataset student_set = teacher_set.head(200);

  ModelF teacher(NeftConfig::preset(Variant::Neft));
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 32;
  tc.lr_max = 1e-3;
  tc.adamw.beta2 = 0.9;
  tc.early_stop = false;
  train(teacher, teacher_set, va, tc);
  const double teacher_nmse = evaluate(teacher, va).nmse_db;

  std::map<std::string, std::vector<double>> results;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (const char* preset : {"full", "only-recon", "without-kd"}) {
      NeftConfig sc = NeftConfig::preset(Variant::Compact);
      sc.seed = seed;
      ModelF student(sc);
      DistillConfig d = DistillConfig::preset(preset);
      d.train.epochs = 20;
      d.train.batch_size = 32;
      d.train.adamw.beta2 = 0.9;
      d.train.seed = seed;
      d.train.early_stop = false;
      results[preset].push_back(min_val(distill_train(teacher, student, student_set, va, d)));
    }
  }
  const double full = median3(results["full"]), recon = median3(results["only-recon"]),
               none = median3(results["without-kd"]);
  return {full <= recon && recon <= none && full <= none - 0.3,
          "median val NMSE full " + fmt(full, 2) + " / only-recon " + fmt(recon, 2) + " / w/o-KD " + fmt(none, 2) +
              " dB (teacher " + fmt(teacher_nmse, 2) + " dB, " + fmt(clock.seconds(), 0) + " s)"};
}

// --- 9 ----------------------------------------------------------------------

Outcome efficiency() {
  const Index neft = count_parameters(NeftConfig::preset(Variant::Neft));
  const Index compact = count_parameters(NeftConfig::preset(Variant::Compact));
  const double reduction = 1.0 - double(compact) / double(neft);
  const auto ne = model_flops(ModelF(NeftConfig::preset(Variant::Neft)));
  const auto hy = model_flops(ModelF(NeftConfig::preset(Variant::Hybrid)));
  const double ratio = double(hy.encoder_flops) / double(ne.encoder_flops);
  return {reduction >= 0.15 && reduction <= 0.35 && ratio < 0.5,
          "Compact params " + with_separators(compact) + " vs " + with_separators(neft) + " (" +
              fmt(100.0 * reduction, 2) + "% fewer), hybrid/NEFT encoder FLOPs " + fmt(ratio, 3)};
}

// --- 10 ---------------------------------------------------------------------

Outcome metrics_and_schedule() {
  const TensorD h = uniform({3, 2, 4, 4}, 4);
  const TensorD zero(h.shape());
  const double at_zero = nmse_db(h, zero);
  const TensorD e = add(h, scale(uniform(h.shape(), 5), 0.1));
  const double base = nmse_db(h, e);
  const double scaled = nmse_db(scale(h, 7.5), scale(e, 7.5));
  const double rho = cosine_similarity(h, scale(h, 2.0));
  const double lr0 = cosine_lr(0, 100, 1e-3, 1e-5), lr1 = cosine_lr(100, 100, 1e-3, 1e-5),
               mid = cosine_lr(50, 100, 1e-3, 1e-5);
  const bool ok = std::abs(at_zero) < 1e-12 && std::abs(base - scaled) < 1e-9 && std::abs(rho - 1.0) < 1e-12 &&
                  lr0 == 1e-3 && lr1 == 1e-5 && std::abs(mid - 0.5 * (1e-3 + 1e-5)) <= 1e-18;
  return {ok, "nmse(h,0) " + fmt(at_zero, 12) + " dB, |scale drift| " + sci(std::abs(base - scaled)) +
                  " dB, rho(h,2h) " + fmt(rho, 12) + ", lr " + sci(lr0) + " / " + sci(mid) + " / " + sci(lr1)};
}

// --- 11 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Outcome determinism(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "neft executable not found (set NEFT_CLI_PATH)"};
  const fs::path dir = fs::temp_directory_path() / "neft_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli + "\" " + args + " > \"" + (dir / "log.txt").string() + "\" 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  auto p = [&](const std::string& name) { return "\"" + (dir / name).string() + "\""; };
  std::ofstream(dir / "tiny.json") << R"({"model": {"c1": 8, "heads_per_stage": [2, 2], "mlp_ratio": 1}})";
  std::ofstream(dir / "student.json") << R"({"model": {"c1": 4, "heads_per_stage": [2, 2], "mlp_ratio": 1}})";
  if (!run("gen-data --n1 256 --count 64 --seed 1 --out " + p("tr.bin")) ||
      !run("gen-data --n1 256 --count 16 --seed 2 --norm-from " + p("tr.bin") + " --out " + p("va.bin"))) {
    return {false, "gen-data failed"};
  }
  const std::string data = " --data " + p("tr.bin") + " --val " + p("va.bin") + " --batch-size 16 --epochs 3 --seed 7";
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"train --config " + p("tiny.json") + data + " --force --out " + p("train"),
       {"train/report.json", "train/report.csv", "train/report.jsonl", "train/model.ckpt"}},
      {"eval --checkpoint " + p("train/model.ckpt") + " --data " + p("va.bin") + " --force --out " + p("eval"),
       {"eval/eval.json"}},
      {"distill --config " + p("student.json") + " --student-variant Compact --teacher " + p("train/model.ckpt") +
           data + " --force --out " + p("distill"),
       {"distill/report.json", "distill/report.csv", "distill/report.jsonl", "distill/model.ckpt"}},
  };
  Index compared = 0;
  for (const auto& [args, files] : commands) {
    if (!run(args)) return {false, "command failed: neft " + args.substr(0, args.find(' '))};
    std::vector<std::string> first;
    for (const auto& f : files) first.push_back(slurp(dir / f));
    if (!run(args)) return {false, "re-run failed: neft " + args.substr(0, args.find(' '))};
    for (std::size_t i = 0; i < files.size(); ++i) {
      if (slurp(dir / files[i]) != first[i] || first[i].empty()) return {false, files[i] + " differs between runs"};
      ++compared;
    }
  }
  return {true, std::to_string(compared) + " artifacts of train, eval and distill byte-identical across re-runs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NEFT acceptance suite"};
  int only = 0;
  std::string cli = std::getenv("NEFT_CLI_PATH") ? std::getenv("NEFT_CLI_PATH") : NEFT_CLI_DEFAULT;
  app.add_option("--only", only, "run a single criterion (1-11)")->check(CLI::Range(1, 11));
  app.add_option("--cli", cli, "path of the neft executable");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"FLOPs exactness", flops},
      {"geometry oracle", geometry},
      {"shape pipeline", shapes},
      {"attention normalization", attention_rows},
      {"overfit sanity", overfit},
      {"desk-scale learning", desk_scale},
      {"KD ordering", kd_ordering},
      {"efficiency ratios", efficiency},
      {"metric and scheduler exactness", metrics_and_schedule},
      {"determinism", [&] { return determinism(cli); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
