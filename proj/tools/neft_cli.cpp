// neft: dataset generation, training, distillation, evaluation and reporting.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "neft/checkpoint.hpp"
#include "neft/complexity.hpp"
#include "neft/distill.hpp"
#include "neft/errors.hpp"
#include "neft/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace neft;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

class UsageError : public Error {
 public:
  using Error::Error;
};

// Everything a command needs, resolved from defaults, an optional JSON config
// file, then command-line flags (in that order of precedence).
struct RunConfig {
  std::string command;
  // gen-data
  Index n1 = 1024;
  Index n2 = 1;
  double frequency_hz = 30e9;
  double spacing_wavelengths = 0.5;
  Index count = 100;
  double r_lo = 0.05;
  double r_hi = 0.5;
  std::uint64_t data_seed = 0;
  std::string norm_from;
  std::string element_type = "float32";
  // inputs
  std::string data, val, test, checkpoint, teacher;
  std::vector<std::string> reports;
  Index sample_index = 0;
  std::string metric_domain = "normalized";
  Index eval_batch = 200;
  // model
  std::string variant = "NEFT";
  Index gamma = 16;
  std::uint64_t model_seed = 0;
  json model = json::object();  // overrides applied on top of the variant preset
  TrainConfig train;
  double lambda1 = 0.3, lambda2 = 2.0, lambda3 = 2.0;
  bool distill_lr_default = true;
  std::string out;

  json to_json() const {
    return {{"command", command},
            {"geometry", {{"n1", n1}, {"n2", n2}, {"frequency_hz", frequency_hz}, {"spacing_wavelengths", spacing_wavelengths}}},
            {"generate", {{"count", count}, {"r_lo", r_lo}, {"r_hi", r_hi}, {"seed", data_seed}, {"norm_from", norm_from}, {"element_type", element_type}}},
            {"data", data},
            {"val", val},
            {"test", test},
            {"checkpoint", checkpoint},
            {"teacher", teacher},
            {"reports", reports},
            {"sample_index", sample_index},
            {"metric_domain", metric_domain},
            {"eval_batch", eval_batch},
            {"variant", variant},
            {"gamma", gamma},
            {"seed", model_seed},
            {"model", model},
            {"train", train.to_json()},
            {"lambdas", {lambda1, lambda2, lambda3}},
            {"out", out}};
  }

  void merge(const json& j) {
    if (!j.is_object()) throw UsageError("config file must hold a JSON object");
    try {
      for (const auto& [key, v] : j.items()) {
        if (key == "command") continue;
        if (key == "geometry") {
          for (const auto& [k, g] : v.items()) {
            if (k == "n1") n1 = g.get<Index>();
            else if (k == "n2") n2 = g.get<Index>();
            else if (k == "frequency_hz") frequency_hz = g.get<double>();
            else if (k == "spacing_wavelengths") spacing_wavelengths = g.get<double>();
            else throw UsageError("unknown config key 'geometry." + k + "'");
          }
        } else if (key == "generate") {
          for (const auto& [k, g] : v.items()) {
            if (k == "count") count = g.get<Index>();
            else if (k == "r_lo") r_lo = g.get<double>();
            else if (k == "r_hi") r_hi = g.get<double>();
            else if (k == "seed") data_seed = g.get<std::uint64_t>();
            else if (k == "norm_from") norm_from = g.get<std::string>();
            else if (k == "element_type") element_type = g.get<std::string>();
            else throw UsageError("unknown config key 'generate." + k + "'");
          }
        } else if (key == "data") data = v.get<std::string>();
        else if (key == "val") val = v.get<std::string>();
        else if (key == "test") test = v.get<std::string>();
        else if (key == "checkpoint") checkpoint = v.get<std::string>();
        else if (key == "teacher") teacher = v.get<std::string>();
        else if (key == "reports") reports = v.get<std::vector<std::string>>();
        else if (key == "sample_index") sample_index = v.get<Index>();
        else if (key == "metric_domain") metric_domain = v.get<std::string>();
        else if (key == "eval_batch") eval_batch = v.get<Index>();
        else if (key == "variant") variant = v.get<std::string>();
        else if (key == "gamma") gamma = v.get<Index>();
        else if (key == "seed") model_seed = v.get<std::uint64_t>();
        else if (key == "model") {
          NeftConfig::from_json(v);  // reject unknown keys early
          model = v;
        } else if (key == "train") {
          train = TrainConfig::from_json(v, train);
          if (v.contains("lr_max")) distill_lr_default = false;
        } else if (key == "lambdas") {
          const auto l = v.get<std::vector<double>>();
          if (l.size() != 3) throw UsageError("lambdas needs three values");
          lambda1 = l[0];
          lambda2 = l[1];
          lambda3 = l[2];
        } else if (key == "out") out = v.get<std::string>();
        else throw UsageError("unknown config key '" + key + "'");
      }
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad config file: ") + e.what());
    }
  }

  ArrayGeometry geometry() const {
    ArrayGeometry g;
    g.n1 = n1;
    g.n2 = n2;
    g.wavelength = wavelength_from_frequency(frequency_hz);
    g.spacing = spacing_wavelengths * g.wavelength;
    g.validate();
    return g;
  }

  /// Variant preset, then the JSON overrides, then seed and input layout.
  NeftConfig model_config(const std::string& variant_name, Index height, Index width) const {
    NeftConfig c = NeftConfig::preset(parse_variant(variant_name), gamma);
    c.height = height;
    c.width = width;
    c = NeftConfig::from_json(model, c);
    c.variant = parse_variant(variant_name);
    c.seed = model_seed;
    c.validate();
    return c;
  }

  DistillConfig distill_config() const {
    DistillConfig d;
    d.lambda1 = lambda1;
    d.lambda2 = lambda2;
    d.lambda3 = lambda3;
    d.train = train;
    if (distill_lr_default) d.train.lr_max = DistillConfig{}.train.lr_max;
    d.teacher_checkpoint = teacher;
    d.validate();
    return d;
  }
};

// Options whose values override the resolved config only when given.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, const std::string& desc, std::function<void(RunConfig&, const T&)> set) {
    auto value = std::make_shared<T>();
    CLI::Option* o = app_->add_option(name, *value, desc);
    apply_.push_back([o, value, set](RunConfig& rc) {
      if (o->count() > 0) set(rc, *value);
    });
    return o;
  }

  CLI::Option* flag(const std::string& name, const std::string& desc, std::function<void(RunConfig&)> set) {
    CLI::Option* o = app_->add_flag(name, desc);
    apply_.push_back([o, set](RunConfig& rc) {
      if (o->count() > 0) set(rc);
    });
    return o;
  }

  void apply(RunConfig& rc) const {
    for (const auto& f : apply_) f(rc);
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(RunConfig&)>> apply_;
};

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<Flags> flags;
  std::string config_file;
  bool force = false;
};

fs::path default_out(const std::string& command) {
  const char* env = std::getenv("NEFT_OUTPUT_DIR");
  return fs::path(env && *env ? env : "neft_out") / command;
}

void refuse_existing(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths) {
    if (fs::exists(p)) throw UsageError(p.string() + " exists; pass --force to overwrite");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("failed writing " + path.string());
}

json stamp(const RunConfig& rc) { return {{"tool_version", NEFT_VERSION}, {"run_config", rc.to_json()}}; }

ChannelDataset load_data(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw UsageError(std::string(what) + " file " + path + " does not exist");
  return read_dataset(path);
}

void check_layout(const ChannelDataset& a, const ChannelDataset& b, const std::string& what) {
  if (a.sample_shape() != b.sample_shape()) {
    throw UsageError(what + " samples " + shape_string(b.sample_shape()) + " differ from training samples " +
                     shape_string(a.sample_shape()));
  }
}

MetricDomain parse_domain(const std::string& s) {
  if (s == "normalized") return MetricDomain::Normalized;
  if (s == "denormalized") return MetricDomain::Denormalized;
  throw UsageError("metric domain must be 'normalized' or 'denormalized'");
}

// --- gen-data -----------------------------------------------------------------

int run_gen_data(const RunConfig& rc, bool force) {
  if (!(rc.r_hi > rc.r_lo) || rc.r_lo <= 0.0) throw UsageError("need 0 < --r-lo < --r-hi");
  if (rc.count < 1) throw UsageError("--count must be positive");
  if (rc.element_type != "float32" && rc.element_type != "float64") {
    throw UsageError("--element-type must be float32 or float64");
  }
  const ArrayGeometry g = rc.geometry();
  const fs::path out = rc.out.empty() ? default_out("gen-data") / "dataset.bin" : fs::path(rc.out);
  refuse_existing({out}, force);
  ChannelDataset ds = rc.norm_from.empty()
                          ? sample_dataset(g, rc.r_lo, rc.r_hi, rc.count, rc.data_seed)
                          : sample_dataset(g, rc.r_lo, rc.r_hi, rc.count, rc.data_seed,
                                           load_data(rc.norm_from, "norm-from").norm);
  write_dataset(out, ds, rc.element_type == "float64" ? ElementType::Float64 : ElementType::Float32, stamp(rc));
  std::cout << std::setprecision(10) << "rayleigh distance (m): " << rayleigh_distance(g.aperture(), g.wavelength)
            << "\nsamples: " << ds.count << " (" << ds.height << " x " << ds.width << " layout, seed " << ds.seed
            << ")\nnorm: real [" << ds.norm.min_real << ", " << ds.norm.max_real << "], imag [" << ds.norm.min_imag
            << ", " << ds.norm.max_imag << "]\nwrote " << out.string() << "\n";
  return kExitOk;
}

// --- train / distill ----------------------------------------------------------

struct RunOutputs {
  fs::path dir, checkpoint, report, csv, jsonl;
  explicit RunOutputs(fs::path d)
      : dir(d), checkpoint(d / "model.ckpt"), report(d / "report.json"), csv(d / "report.csv"), jsonl(d / "report.jsonl") {}
  std::vector<fs::path> all() const { return {checkpoint, report, csv, jsonl}; }
};

template <typename Scalar>
int finish_run(const RunConfig& rc, const RunOutputs& out, const Model<Scalar>& model, ExperimentReport report,
               const ChannelDataset* test) {
  if (test && !report.diverged) {
    Model<Scalar> m = model;
    report.has_test = true;
    report.test = evaluate(m, *test, rc.eval_batch, parse_domain(rc.metric_domain));
  }
  json j = report.to_json();
  j.update(stamp(rc));
  save_checkpoint(out.checkpoint, model, stamp(rc));
  write_text(out.report, j.dump(2) + "\n");
  write_text(out.csv, report.to_csv());
  write_text(out.jsonl, report.to_jsonl());
  std::cout << report.kind << ": " << report.epochs.size() << " epochs, best val NMSE "
            << std::setprecision(6) << report.best_val_nmse_db << " dB at epoch " << report.best_epoch << "\n";
  if (report.has_test) std::cout << "test NMSE " << report.test.nmse_db << " dB, rho " << report.test.rho << "\n";
  std::cout << "wrote " << out.dir.string() << "\n";
  if (report.diverged) {
    std::cerr << "error: training diverged: " << report.failure << " (last good parameters saved)\n";
    return kExitNumeric;
  }
  return kExitOk;
}

template <typename Scalar>
int train_as(const RunConfig& rc, const NeftConfig& mc, const ChannelDataset& tr, const ChannelDataset& va,
             const ChannelDataset* te, const RunOutputs& out) {
  Model<Scalar> model(mc);
  ExperimentReport report = train(model, tr, va, rc.train);
  return finish_run(rc, out, model, std::move(report), te);
}

int run_train(const RunConfig& rc, bool force) {
  const RunOutputs out(rc.out.empty() ? default_out("train") : fs::path(rc.out));
  refuse_existing(out.all(), force);
  rc.train.validate();
  const ChannelDataset tr = load_data(rc.data, "data");
  const ChannelDataset va = load_data(rc.val, "val");
  check_layout(tr, va, "validation");
  std::unique_ptr<ChannelDataset> te;
  if (!rc.test.empty()) {
    te = std::make_unique<ChannelDataset>(load_data(rc.test, "test"));
    check_layout(tr, *te, "test");
  }
  parse_domain(rc.metric_domain);
  const NeftConfig mc = rc.model_config(rc.variant, tr.height, tr.width);
  if (rc.train.precision == "float64") return train_as<double>(rc, mc, tr, va, te.get(), out);
  return train_as<float>(rc, mc, tr, va, te.get(), out);
}

template <typename Scalar>
int distill_as(const RunConfig& rc, const NeftConfig& sc, const ChannelDataset& tr, const ChannelDataset& va,
               const ChannelDataset* te, const RunOutputs& out) {
  const Model<Scalar> teacher = load_checkpoint<Scalar>(rc.teacher);
  Model<Scalar> student(sc);
  check_compatible(teacher, student);
  ExperimentReport report = distill_train(teacher, student, tr, va, rc.distill_config());
  return finish_run(rc, out, student, std::move(report), te);
}

int run_distill(const RunConfig& rc, bool force) {
  const RunOutputs out(rc.out.empty() ? default_out("distill") : fs::path(rc.out));
  refuse_existing(out.all(), force);
  if (rc.teacher.empty()) throw UsageError("missing --teacher");
  if (!fs::exists(rc.teacher)) throw UsageError("teacher checkpoint " + rc.teacher + " does not exist");
  rc.distill_config();
  const CheckpointHeader th = read_checkpoint_header(rc.teacher);
  const ChannelDataset tr = load_data(rc.data, "data");
  const ChannelDataset va = load_data(rc.val, "val");
  check_layout(tr, va, "validation");
  std::unique_ptr<ChannelDataset> te;
  if (!rc.test.empty()) {
    te = std::make_unique<ChannelDataset>(load_data(rc.test, "test"));
    check_layout(tr, *te, "test");
  }
  if (th.config.height != tr.height || th.config.width != tr.width) {
    throw UsageError("teacher expects " + std::to_string(th.config.height) + " x " + std::to_string(th.config.width) +
                     " inputs, the data is " + std::to_string(tr.height) + " x " + std::to_string(tr.width));
  }
  const NeftConfig sc = rc.model_config(rc.variant, tr.height, tr.width);
  if (rc.train.precision == "float64") return distill_as<double>(rc, sc, tr, va, te.get(), out);
  return distill_as<float>(rc, sc, tr, va, te.get(), out);
}

// --- eval -----------------------------------------------------------------------

template <typename Scalar>
Metrics eval_as(const RunConfig& rc, const ChannelDataset& ds) {
  Model<Scalar> m = load_checkpoint<Scalar>(rc.checkpoint);
  return evaluate(m, ds, rc.eval_batch, parse_domain(rc.metric_domain));
}

int run_eval(const RunConfig& rc, bool force) {
  if (rc.checkpoint.empty()) throw UsageError("missing --checkpoint");
  if (!fs::exists(rc.checkpoint)) throw UsageError("checkpoint " + rc.checkpoint + " does not exist");
  const fs::path out = (rc.out.empty() ? default_out("eval") : fs::path(rc.out)) / "eval.json";
  refuse_existing({out}, force);
  parse_domain(rc.metric_domain);
  if (rc.eval_batch < 1) throw UsageError("--batch-size must be positive");
  const CheckpointHeader h = read_checkpoint_header(rc.checkpoint);
  const ChannelDataset ds = load_data(rc.data, "data");
  if (h.config.height != ds.height || h.config.width != ds.width) {
    throw UsageError("checkpoint expects " + std::to_string(h.config.height) + " x " +
                     std::to_string(h.config.width) + " inputs, the data is " + std::to_string(ds.height) + " x " +
                     std::to_string(ds.width));
  }
  const Metrics m = h.scalar == "float64" ? eval_as<double>(rc, ds) : eval_as<float>(rc, ds);
  json j = {{"kind", "eval"},
            {"model", h.config.to_json()},
            {"metric_domain", rc.metric_domain},
            {"nmse_db", db_to_json(m.nmse_db)},
            {"rho", m.rho},
            {"samples", m.samples}};
  j.update(stamp(rc));
  write_text(out, j.dump(2) + "\n");
  std::cout << std::setprecision(6) << "NMSE " << m.nmse_db << " dB, rho " << m.rho << " over " << m.samples
            << " samples\nwrote " << out.string() << "\n";
  return kExitOk;
}

// --- flops ----------------------------------------------------------------------

int run_flops(const RunConfig& rc, bool force, bool as_json) {
  NeftConfig config;
  if (!rc.checkpoint.empty()) {
    if (!fs::exists(rc.checkpoint)) throw UsageError("checkpoint " + rc.checkpoint + " does not exist");
    config = read_checkpoint_header(rc.checkpoint).config;
  } else {
    config = rc.model_config(rc.variant, 32, 32);
  }
  const ModelD model(config);
  const ComplexityReport report = complexity_report(model.config(), model.topology());
  json j = report.to_json();
  j.update(stamp(rc));
  if (!rc.out.empty()) {
    const fs::path dir(rc.out);
    refuse_existing({dir / "flops.json", dir / "flops.txt"}, force);
    write_text(dir / "flops.json", j.dump(2) + "\n");
    write_text(dir / "flops.txt", report.to_text());
  }
  std::cout << (as_json ? j.dump(2) + "\n" : report.to_text());
  return kExitOk;
}

// --- export-attn ----------------------------------------------------------------

std::string stage_tag(const std::string& stage) {
  std::string s = stage;
  s.erase(std::remove(s.begin(), s.end(), '.'), s.end());
  return s;
}

int run_export_attn(const RunConfig& rc, bool force) {
  if (rc.checkpoint.empty()) throw UsageError("missing --checkpoint");
  if (!fs::exists(rc.checkpoint)) throw UsageError("checkpoint " + rc.checkpoint + " does not exist");
  const fs::path dir = rc.out.empty() ? default_out("export-attn") : fs::path(rc.out);
  refuse_existing({dir / "attention.json"}, force);
  const CheckpointHeader h = read_checkpoint_header(rc.checkpoint);
  const ChannelDataset ds = load_data(rc.data, "data");
  if (rc.sample_index < 0 || rc.sample_index >= ds.count) {
    throw UsageError("--sample-index " + std::to_string(rc.sample_index) + " outside [0, " +
                     std::to_string(ds.count) + ")");
  }
  if (h.config.height != ds.height || h.config.width != ds.width) {
    throw UsageError("checkpoint and data layouts differ");
  }
  const ModelD model = load_checkpoint<double>(rc.checkpoint);
  const std::vector<Index> idx = {rc.sample_index};
  const ForwardResult<double> r = [&] {
    NoGradGuard guard;
    return model.forward(ds.batch<double>(idx));
  }();
  json files = json::array();
  for (const auto& rec : r.attention) {
    const Index heads = rec.maps.dim(1), n = rec.maps.dim(2);
    for (Index hd = 0; hd < heads; ++hd) {
      std::ostringstream os;
      os << std::setprecision(17);
      for (Index i = 0; i < n; ++i) {
        for (Index k = 0; k < n; ++k) os << (k ? "," : "") << rec.maps(0, hd, i, k);
        os << "\n";
      }
      const std::string name =
          "attn_" + stage_tag(rec.stage) + "_block" + std::to_string(rec.block) + "_head" + std::to_string(hd) + ".csv";
      write_text(dir / name, os.str());
      files.push_back({{"stage", rec.stage}, {"block", rec.block}, {"head", hd}, {"tokens", n}, {"file", name}});
    }
  }
  json j = {{"kind", "attention"}, {"model", h.config.to_json()}, {"sample_index", rc.sample_index}, {"maps", files}};
  j.update(stamp(rc));
  write_text(dir / "attention.json", j.dump(2) + "\n");
  std::cout << "wrote " << files.size() << " attention maps to " << dir.string() << "\n";
  return kExitOk;
}

// --- compare --------------------------------------------------------------------

int run_compare(const RunConfig& rc, bool force) {
  if (rc.reports.empty()) throw UsageError("missing --reports");
  const fs::path dir = rc.out.empty() ? default_out("compare") : fs::path(rc.out);
  refuse_existing({dir / "compare.csv", dir / "compare.txt", dir / "compare.json"}, force);
  struct Row {
    std::string label, variant;
    Index gamma = 0, params = 0, flops = 0, encoder_flops = 0;
    double nmse = 0.0, rho = 0.0;
    std::string source;
  };
  std::vector<Row> rows;
  for (const auto& path : rc.reports) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read report " + path);
    json j;
    try {
      j = json::parse(is);
      Row r;
      r.label = fs::path(path).parent_path().filename().string();
      if (r.label.empty()) r.label = fs::path(path).stem().string();
      const json& m = j.at("config").at("model");
      r.variant = m.at("variant").get<std::string>();
      r.gamma = m.at("gamma").get<Index>();
      r.params = j.at("parameters").get<Index>();
      r.flops = j.at("total_flops").get<Index>();
      r.encoder_flops = j.at("encoder_flops").get<Index>();
      if (j.contains("test")) {
        r.nmse = db_from_json(j["test"].at("nmse_db"));
        r.rho = j["test"].at("rho").get<double>();
        r.source = "test";
      } else {
        const int best = j.at("best_epoch").get<int>();
        r.nmse = db_from_json(j.at("best_val_nmse_db"));
        r.rho = best >= 0 ? j.at("epochs").at(static_cast<std::size_t>(best)).at("val_rho").get<double>() : 0.0;
        r.source = "val";
      }
      rows.push_back(r);
    } catch (const json::exception& e) {
      throw UsageError("report " + path + " is malformed: " + e.what());
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.gamma < b.gamma; });

  std::ostringstream csv, txt;
  csv << "run,variant,gamma,nmse_db,rho,params,total_flops,encoder_flops,source\n";
  txt << std::left << std::setw(20) << "run" << std::setw(14) << "variant" << std::right << std::setw(6) << "gamma"
      << std::setw(12) << "NMSE (dB)" << std::setw(10) << "rho" << std::setw(12) << "params" << std::setw(16)
      << "FLOPs" << std::setw(16) << "encoder FLOPs" << "  source\n";
  json arr = json::array();
  for (const auto& r : rows) {
    csv << std::setprecision(10) << r.label << ',' << r.variant << ',' << r.gamma << ',' << r.nmse << ',' << r.rho
        << ',' << r.params << ',' << r.flops << ',' << r.encoder_flops << ',' << r.source << '\n';
    txt << std::left << std::setw(20) << r.label << std::setw(14) << r.variant << std::right << std::setw(6) << r.gamma
        << std::setw(12) << std::fixed << std::setprecision(2) << r.nmse << std::setw(10) << std::setprecision(4)
        << r.rho << std::defaultfloat << std::setw(12) << with_separators(r.params) << std::setw(16)
        << with_separators(r.flops) << std::setw(16) << with_separators(r.encoder_flops) << "  " << r.source << "\n";
    arr.push_back({{"run", r.label}, {"variant", r.variant}, {"gamma", r.gamma}, {"nmse_db", db_to_json(r.nmse)},
                   {"rho", r.rho}, {"params", r.params}, {"total_flops", r.flops},
                   {"encoder_flops", r.encoder_flops}, {"source", r.source}});
  }
  json j = {{"kind", "compare"}, {"rows", arr}};
  j.update(stamp(rc));
  write_text(dir / "compare.csv", csv.str());
  write_text(dir / "compare.txt", txt.str());
  write_text(dir / "compare.json", j.dump(2) + "\n");
  std::cout << txt.str();
  return kExitOk;
}

// --- option wiring --------------------------------------------------------------

void add_common(Command& c) {
  c.app->add_option("--config", c.config_file, "JSON run config; flags override its values");
  c.app->add_flag("--force", c.force, "overwrite existing outputs");
  c.flags->add<std::string>("--out", "output directory (default $NEFT_OUTPUT_DIR/<command>)",
                            [](RunConfig& r, const std::string& v) { r.out = v; });
}

void add_model(Flags& f, const std::string& variant_flag = "--variant") {
  f.add<std::string>(variant_flag, "NEFT, Compact, Hybrid or Edge", [](RunConfig& r, const std::string& v) {
    parse_variant(v);
    r.variant = v;
  });
  f.add<Index>("--gamma", "compression ratio L/K", [](RunConfig& r, const Index& v) { r.gamma = v; });
  f.add<std::uint64_t>("--seed", "seed for initialization and shuffling", [](RunConfig& r, const std::uint64_t& v) {
    r.model_seed = v;
    r.train.seed = v;
  });
}

void add_training(Flags& f) {
  f.add<std::string>("--data", "training dataset", [](RunConfig& r, const std::string& v) { r.data = v; });
  f.add<std::string>("--val", "validation dataset", [](RunConfig& r, const std::string& v) { r.val = v; });
  f.add<std::string>("--test", "optional test dataset", [](RunConfig& r, const std::string& v) { r.test = v; });
  f.add<int>("--epochs", "epoch budget", [](RunConfig& r, const int& v) { r.train.epochs = v; });
  f.add<double>("--lr", "initial learning rate", [](RunConfig& r, const double& v) {
    r.train.lr_max = v;
    r.distill_lr_default = false;
  });
  f.add<Index>("--batch-size", "samples per step", [](RunConfig& r, const Index& v) {
    r.train.batch_size = v;
    r.eval_batch = v;
  });
  f.add<std::string>("--precision", "float32 or float64", [](RunConfig& r, const std::string& v) { r.train.precision = v; });
  f.add<std::int64_t>("--max-steps", "optimizer step budget (0 = none)",
                      [](RunConfig& r, const std::int64_t& v) { r.train.max_steps = v; });
  f.flag("--no-early-stop", "run every epoch", [](RunConfig& r) { r.train.early_stop = false; });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NEFT near-field CSI feedback toolkit"};
  app.set_version_flag("--version", std::string("neft ") + NEFT_VERSION);
  app.require_subcommand(1);

  std::map<std::string, Command> commands;
  auto make = [&](const std::string& name, const std::string& desc) -> Command& {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, desc);
    c.flags = std::make_unique<Flags>(c.app);
    add_common(c);
    return c;
  };

  Command& gen = make("gen-data", "sample a near-field channel dataset");
  gen.flags->add<Index>("--n1", "base-station antennas", [](RunConfig& r, const Index& v) { r.n1 = v; });
  gen.flags->add<Index>("--n2", "user antennas", [](RunConfig& r, const Index& v) { r.n2 = v; });
  gen.flags->add<double>("--freq", "carrier frequency (Hz)", [](RunConfig& r, const double& v) { r.frequency_hz = v; });
  gen.flags->add<double>("--spacing", "antenna spacing in wavelengths",
                         [](RunConfig& r, const double& v) { r.spacing_wavelengths = v; });
  gen.flags->add<Index>("--count", "number of samples", [](RunConfig& r, const Index& v) { r.count = v; });
  gen.flags->add<double>("--r-lo", "lower distance bound, fraction of the Rayleigh distance",
                         [](RunConfig& r, const double& v) { r.r_lo = v; });
  gen.flags->add<double>("--r-hi", "upper distance bound, fraction of the Rayleigh distance",
                         [](RunConfig& r, const double& v) { r.r_hi = v; });
  gen.flags->add<std::uint64_t>("--seed", "sampling seed", [](RunConfig& r, const std::uint64_t& v) { r.data_seed = v; });
  gen.flags->add<std::string>("--norm-from", "reuse the normalization of an existing dataset",
                              [](RunConfig& r, const std::string& v) { r.norm_from = v; });
  gen.flags->add<std::string>("--element-type", "float32 or float64",
                              [](RunConfig& r, const std::string& v) { r.element_type = v; });

  Command& tr = make("train", "train a model");
  add_model(*tr.flags);
  add_training(*tr.flags);

  Command& dist = make("distill", "distill a student from a trained teacher");
  add_model(*dist.flags, "--student-variant");
  add_training(*dist.flags);
  dist.flags->add<std::string>("--teacher", "teacher checkpoint", [](RunConfig& r, const std::string& v) { r.teacher = v; });
  dist.flags->add<std::vector<double>>("--lambdas", "lambda1,lambda2,lambda3", [](RunConfig& r, const std::vector<double>& v) {
    if (v.size() != 3) throw UsageError("--lambdas needs three values");
    r.lambda1 = v[0];
    r.lambda2 = v[1];
    r.lambda3 = v[2];
  })->delimiter(',');
  dist.flags->add<std::string>("--preset", "full, only-recon or without-kd", [](RunConfig& r, const std::string& v) {
    const DistillConfig d = DistillConfig::preset(v);
    r.lambda1 = d.lambda1;
    r.lambda2 = d.lambda2;
    r.lambda3 = d.lambda3;
  });

  Command& ev = make("eval", "evaluate a checkpoint");
  ev.flags->add<std::string>("--checkpoint", "model checkpoint", [](RunConfig& r, const std::string& v) { r.checkpoint = v; });
  ev.flags->add<std::string>("--data", "dataset", [](RunConfig& r, const std::string& v) { r.data = v; });
  ev.flags->add<Index>("--batch-size", "samples per forward pass", [](RunConfig& r, const Index& v) { r.eval_batch = v; });
  ev.flags->flag("--denormalized", "score in the physical channel domain",
                 [](RunConfig& r) { r.metric_domain = "denormalized"; });

  bool flops_json = false;
  Command& fl = make("flops", "per-layer FLOPs and parameter report");
  add_model(*fl.flags);
  fl.flags->add<std::string>("--checkpoint", "read the architecture from a checkpoint",
                             [](RunConfig& r, const std::string& v) { r.checkpoint = v; });
  fl.app->add_flag("--json", flops_json, "print JSON instead of the table");

  Command& ex = make("export-attn", "write attention maps of one sample as CSV");
  ex.flags->add<std::string>("--checkpoint", "model checkpoint", [](RunConfig& r, const std::string& v) { r.checkpoint = v; });
  ex.flags->add<std::string>("--data", "dataset", [](RunConfig& r, const std::string& v) { r.data = v; });
  ex.flags->add<Index>("--sample-index", "sample to trace", [](RunConfig& r, const Index& v) { r.sample_index = v; });

  Command& cmp = make("compare", "tabulate several run reports");
  cmp.flags->add<std::vector<std::string>>("--reports", "report.json files",
                                           [](RunConfig& r, const std::vector<std::string>& v) { r.reports = v; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (auto& [name, c] : commands) {
    if (!c.app->parsed()) continue;
    try {
      RunConfig rc;
      if (!c.config_file.empty()) {
        std::ifstream is(c.config_file);
        if (!is) throw UsageError("cannot read config file " + c.config_file);
        json j;
        try {
          j = json::parse(is);
        } catch (const json::exception& e) {
          throw UsageError("config file " + c.config_file + " is not valid JSON: " + e.what());
        }
        rc.merge(j);
      }
      c.flags->apply(rc);
      rc.command = name;
      if (name == "gen-data") return run_gen_data(rc, c.force);
      if (name == "train") return run_train(rc, c.force);
      if (name == "distill") return run_distill(rc, c.force);
      if (name == "eval") return run_eval(rc, c.force);
      if (name == "flops") return run_flops(rc, c.force, flops_json);
      if (name == "export-attn") return run_export_attn(rc, c.force);
      if (name == "compare") return run_compare(rc, c.force);
    } catch (const NumericError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitNumeric;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitUsage;
    }
  }
  return kExitUsage;
}
