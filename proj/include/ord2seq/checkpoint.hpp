#pragma once

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "ord2seq/training.hpp"

namespace ord2seq {

inline constexpr const char* kCheckpointFormat = "ord2seq-ckpt-v1";

// Versioned JSON map: parameter name -> shape + row-major values, plus the
// config needed to rebuild the model around them.
nlohmann::json checkpoint_to_json(const TrainedModel& model, const TrainConfig& config);
std::shared_ptr<TrainedModel> checkpoint_from_json(const nlohmann::json& doc,
                                                   TrainConfig* config_out = nullptr);

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& model,
                     const TrainConfig& config);
std::shared_ptr<TrainedModel> load_checkpoint(const std::filesystem::path& path,
                                              TrainConfig* config_out = nullptr);

}  // namespace ord2seq
