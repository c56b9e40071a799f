#include "neft/checkpoint.hpp"

#include "neft/errors.hpp"
#include "neft/io.hpp"

namespace neft {

namespace {

constexpr int kCheckpointVersion = 1;

template <typename Scalar>
constexpr const char* scalar_name() {
  return sizeof(Scalar) == 4 ? "float32" : "float64";
}

template <typename Stored, typename Scalar>
void read_into(std::istream& is, Tensor<Scalar>& t) {
  std::vector<Stored> buffer(static_cast<std::size_t>(t.size()));
  io::read_values_le<Stored>(is, buffer);
  for (Index i = 0; i < t.size(); ++i) t.values()(i) = static_cast<Scalar>(buffer[static_cast<std::size_t>(i)]);
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Model<Scalar>& model,
                     const nlohmann::json& metadata) {
  nlohmann::json manifest = nlohmann::json::array();
  Index offset = 0;
  for (const auto& t : model.tensors()) {
    manifest.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"trainable", t.trainable}});
    offset += t.tensor.size();
  }
  const nlohmann::json header = {{"format", "neft-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"tool_version", NEFT_VERSION},
                                 {"scalar", scalar_name<Scalar>()},
                                 {"config", model.config().to_json()},
                                 {"elements", offset},
                                 {"tensors", manifest},
                                 {"metadata", metadata}};
  auto os = io::open_for_write(path);
  io::write_header(os, header);
  for (const auto& t : model.tensors()) io::write_values_le<Scalar>(os, t.tensor.data());
  if (!os) throw Error("failed writing " + path.string());
}

namespace {

CheckpointHeader parse_header(const nlohmann::json& h, const std::filesystem::path& path) {
  try {
    if (h.at("format") != "neft-checkpoint") throw FormatError(path.string() + " is not a checkpoint");
    if (h.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version in " + path.string());
    }
    CheckpointHeader c;
    c.config = NeftConfig::from_json(h.at("config"));
    c.config.validate();
    c.scalar = h.at("scalar").get<std::string>();
    if (c.scalar != "float32" && c.scalar != "float64") throw FormatError("unknown scalar type '" + c.scalar + "'");
    c.metadata = h.value("metadata", nlohmann::json::object());
    c.raw = h;
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint header in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("invalid model config in " + path.string() + ": " + e.what());
  }
}

}  // namespace

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  auto is = io::open_for_read(path);
  return parse_header(io::read_header(is), path);
}

template <typename Scalar>
Model<Scalar> load_checkpoint(const std::filesystem::path& path) {
  auto is = io::open_for_read(path);
  const CheckpointHeader h = parse_header(io::read_header(is), path);
  Model<Scalar> model(h.config);
  try {
    const auto& manifest = h.raw.at("tensors");
    if (!manifest.is_array() || manifest.size() != model.tensors().size()) {
      throw FormatError("checkpoint lists " + std::to_string(manifest.size()) + " tensors, the config implies " +
                        std::to_string(model.tensors().size()));
    }
    Index offset = 0;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const auto& entry = manifest[i];
      const auto& t = model.tensors()[i];
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      if (name != t.name || shape != t.tensor.shape() || entry.at("offset").get<Index>() != offset) {
        throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" + name + "' " + shape_string(shape) +
                          ", expected '" + t.name + "' " + shape_string(t.tensor.shape()));
      }
      offset += t.tensor.size();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  }
  for (auto& t : model.tensors()) {
    if (h.scalar == "float32") {
      read_into<float>(is, t.tensor);
    } else {
      read_into<double>(is, t.tensor);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after payload in " + path.string());
  }
  model.set_training(false);
  return model;
}

#define NEFT_INSTANTIATE(S)                                                                       \
  template void save_checkpoint<S>(const std::filesystem::path&, const Model<S>&, const nlohmann::json&); \
  template Model<S> load_checkpoint<S>(const std::filesystem::path&);
NEFT_INSTANTIATE(float)
NEFT_INSTANTIATE(double)
#undef NEFT_INSTANTIATE

}  // namespace neft
