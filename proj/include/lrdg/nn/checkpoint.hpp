#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "lrdg/nn/classifier.hpp"
#include "lrdg/nn/mapper.hpp"
#include "lrdg/nn/parameters.hpp"

namespace lrdg::nn {

/// Which training stage produced a checkpoint.
enum class StageTag { specific, invariant, baseline };

std::string to_string(StageTag tag);
StageTag parse_stage_tag(const std::string& name);

/// Self-describing parameter container; see docs/checkpoint-format.md.
struct Checkpoint {
  std::string network;  // "classifier", "mapper" or "train-state"
  StageTag stage = StageTag::specific;
  std::uint64_t seed = 0;
  nlohmann::json spec = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();
  ParameterSet<Real> params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const ClassifierSpec& spec);
nlohmann::json to_json(const MapperSpec& spec);
ClassifierSpec classifier_spec_from_json(const nlohmann::json& j);
MapperSpec mapper_spec_from_json(const nlohmann::json& j);

Checkpoint make_checkpoint(const Classifier<Real>& model, StageTag stage, std::uint64_t seed,
                           nlohmann::json metadata = nlohmann::json::object());
Checkpoint make_checkpoint(const Mapper<Real>& model, std::uint64_t seed,
                           nlohmann::json metadata = nlohmann::json::object());

/// Rebuild networks; throw if the container holds a different network kind.
Classifier<Real> classifier_from(const Checkpoint& checkpoint);
Mapper<Real> mapper_from(const Checkpoint& checkpoint);

}  // namespace lrdg::nn
