#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "neft/checkpoint.hpp"
#include "neft/errors.hpp"
#include "neft/io.hpp"
#include "test_util.hpp"

using namespace neft;
using neft::testing::bitwise_equal;
using neft::testing::random_tensor;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "neft_checkpoint_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  NeftConfig c = NeftConfig::tiny();
  c.seed = 11;
  ModelF m(c);
  m.tensor("decoder.stage1.block0.attn.rel_pos_bias").values().setConstant(0.25f);
  const auto path = temp_path("tiny.ckpt");
  save_checkpoint(path, m, {{"note", "unit"}});

  const ModelF back = load_checkpoint<float>(path);
  CHECK(back.config() == m.config());
  REQUIRE(back.tensors().size() == m.tensors().size());
  for (std::size_t i = 0; i < m.tensors().size(); ++i) {
    CHECK(bitwise_equal(back.tensors()[i].tensor, m.tensors()[i].tensor));
  }
  CHECK_FALSE(back.training());
  const CheckpointHeader h = read_checkpoint_header(path);
  CHECK(h.scalar == "float32");
  CHECK(h.metadata.at("note") == "unit");

  // Widening to double preserves every value.
  const ModelD wide = load_checkpoint<double>(path);
  const auto x = random_tensor<float>({2, 2, 16, 16}, 3, 0.0, 1.0);
  TensorD xd(x.shape());
  xd.values() = x.values().cast<double>();
  ModelF mf = m;
  mf.set_training(false);
  const auto yf = mf.forward(x).reconstruction;
  const auto yd = wide.forward(xd).reconstruction;
  CHECK((yd.values() - yf.values().cast<double>()).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("hybrid checkpoints keep batch-norm statistics") {
  NeftConfig c = NeftConfig::tiny();
  c.variant = Variant::Hybrid;
  c.c0 = 8;
  ModelD m(c);
  m.tensor("encoder.cnn1.bn.running_mean").values().setConstant(0.5);
  const auto path = temp_path("hybrid.ckpt");
  save_checkpoint(path, m);
  const ModelD back = load_checkpoint<double>(path);
  CHECK(back.tensor("encoder.cnn1.bn.running_mean")(0) == 0.5);
  CHECK(back.parameter_count() == m.parameter_count());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const ModelD m(NeftConfig::tiny());
  const auto path = temp_path("good.ckpt");
  save_checkpoint(path, m);
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const auto truncated = temp_path("truncated.ckpt");
  std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  CHECK_THROWS_AS(load_checkpoint<double>(truncated), FormatError);

  const auto trailing = temp_path("trailing.ckpt");
  std::ofstream(trailing, std::ios::binary) << bytes << "x";
  CHECK_THROWS_AS(load_checkpoint<double>(trailing), FormatError);

  // A manifest that disagrees with the config-derived topology.
  std::ifstream hs(path, std::ios::binary);
  nlohmann::json header = io::read_header(hs);
  const std::string payload((std::istreambuf_iterator<char>(hs)), std::istreambuf_iterator<char>());
  header["tensors"][3]["shape"] = {1, 2, 3};
  const auto mismatch = temp_path("mismatch.ckpt");
  {
    std::ofstream os(mismatch, std::ios::binary);
    io::write_header(os, header);
    os << payload;
  }
  CHECK_THROWS_AS(load_checkpoint<double>(mismatch), FormatError);

  header = io::read_header(*std::make_unique<std::ifstream>(path, std::ios::binary));
  header["config"]["gamma"] = 7;
  const auto bad_config = temp_path("config.ckpt");
  {
    std::ofstream os(bad_config, std::ios::binary);
    io::write_header(os, header);
    os << payload;
  }
  CHECK_THROWS_AS(load_checkpoint<double>(bad_config), FormatError);

  const auto other = temp_path("other.ckpt");
  std::ofstream(other, std::ios::binary) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint<double>(other), FormatError);
}
