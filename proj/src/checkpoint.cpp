#include "lrdg/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace lrdg::nn {
namespace {

constexpr char kMagic[8] = {'L', 'R', 'D', 'G', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace

std::string to_string(StageTag tag) {
  switch (tag) {
    case StageTag::specific: return "specific";
    case StageTag::invariant: return "invariant";
    case StageTag::baseline: return "baseline";
  }
  return "specific";
}

StageTag parse_stage_tag(const std::string& name) {
  if (name == "specific") return StageTag::specific;
  if (name == "invariant") return StageTag::invariant;
  if (name == "baseline") return StageTag::baseline;
  throw Error("unknown stage tag '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["network"] = ckpt.network;
  header["stage"] = to_string(ckpt.stage);
  header["seed"] = ckpt.seed;
  header["spec"] = ckpt.spec;
  header["metadata"] = ckpt.metadata;
  header["dtype"] = "float32";
  header["checksum"] = to_hex(ckpt.params.checksum());
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (int i = 0; i < ckpt.params.count(); ++i) {
    const auto& t = ckpt.params[i];
    tensors.push_back({{"name", ckpt.params.name(i)},
                       {"rows", t.rows()},
                       {"cols", t.cols()},
                       {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(Real);
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kCheckpointVersion);
    write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (int i = 0; i < ckpt.params.count(); ++i) {
      const auto& t = ckpt.params[i];
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Real)));
    }
    if (!os) throw Error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error("not an LRDG checkpoint: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_len = read_pod<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw Error("truncated checkpoint header: " + path.string());
  const nlohmann::json header = nlohmann::json::parse(text);
  if (header.at("dtype") != "float32") throw Error("unsupported checkpoint dtype in " + path.string());

  Checkpoint ckpt;
  ckpt.network = header.at("network").get<std::string>();
  ckpt.stage = parse_stage_tag(header.at("stage").get<std::string>());
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.spec = header.at("spec");
  ckpt.metadata = header.at("metadata");
  const auto data_start = is.tellg();
  for (const auto& t : header.at("tensors")) {
    Matrix<Real> m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    is.seekg(data_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(Real)));
    if (!is) throw Error("truncated checkpoint data: " + path.string());
    ckpt.params.add(t.at("name").get<std::string>(), std::move(m));
  }
  if (to_hex(ckpt.params.checksum()) != header.at("checksum").get<std::string>()) {
    throw Error("checkpoint checksum mismatch: " + path.string());
  }
  return ckpt;
}

nlohmann::json to_json(const ClassifierSpec& spec) {
  return {{"backbone", "desk-cnn"},
          {"num_classes", spec.num_classes},
          {"in_channels", spec.in_channels},
          {"image_size", spec.image_size},
          {"widths", spec.widths},
          {"feature_dim", spec.feature_dim()}};
}

nlohmann::json to_json(const MapperSpec& spec) {
  return {{"depth", spec.depth},
          {"base_channels", spec.base_channels},
          {"in_channels", spec.in_channels},
          {"image_size", spec.image_size},
          {"identity_init", spec.identity_init},
          {"output_activation", "sigmoid"}};
}

ClassifierSpec classifier_spec_from_json(const nlohmann::json& j) {
  ClassifierSpec s;
  s.num_classes = j.at("num_classes").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.image_size = j.at("image_size").get<int>();
  s.widths = j.at("widths").get<std::vector<int>>();
  return s;
}

MapperSpec mapper_spec_from_json(const nlohmann::json& j) {
  MapperSpec s;
  s.depth = j.at("depth").get<int>();
  s.base_channels = j.at("base_channels").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.image_size = j.at("image_size").get<int>();
  s.identity_init = j.at("identity_init").get<bool>();
  return s;
}

Checkpoint make_checkpoint(const Classifier<Real>& model, StageTag stage, std::uint64_t seed,
                           nlohmann::json metadata) {
  Checkpoint c;
  c.network = "classifier";
  c.stage = stage;
  c.seed = seed;
  c.spec = to_json(model.spec());
  c.metadata = std::move(metadata);
  c.params = model.params();
  return c;
}

Checkpoint make_checkpoint(const Mapper<Real>& model, std::uint64_t seed, nlohmann::json metadata) {
  Checkpoint c;
  c.network = "mapper";
  c.stage = StageTag::invariant;
  c.seed = seed;
  c.spec = to_json(model.spec());
  c.metadata = std::move(metadata);
  c.params = model.params();
  return c;
}

Classifier<Real> classifier_from(const Checkpoint& ckpt) {
  if (ckpt.network != "classifier") throw Error("checkpoint holds a " + ckpt.network + ", expected a classifier");
  return Classifier<Real>(classifier_spec_from_json(ckpt.spec), ckpt.params);
}

Mapper<Real> mapper_from(const Checkpoint& ckpt) {
  if (ckpt.network != "mapper") throw Error("checkpoint holds a " + ckpt.network + ", expected a mapper");
  return Mapper<Real>(mapper_spec_from_json(ckpt.spec), ckpt.params);
}

}  // namespace lrdg::nn
