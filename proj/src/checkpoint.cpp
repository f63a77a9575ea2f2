#include "ord2seq/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace ord2seq {

nlohmann::json checkpoint_to_json(const TrainedModel& model, const TrainConfig& config) {
    nlohmann::json params;
    for (const Tensor& p : model.parameters()) {
        params[p.name()] = {
            {"shape", p.shape()},
            {"data", std::vector<double>(p.values().begin(), p.values().end())},
        };
    }
    return nlohmann::json{{"format", kCheckpointFormat},
                          {"config", config.to_json()},
                          {"params", std::move(params)}};
}

std::shared_ptr<TrainedModel> checkpoint_from_json(const nlohmann::json& doc,
                                                   TrainConfig* config_out) {
    if (doc.at("format").get<std::string>() != kCheckpointFormat)
        throw std::runtime_error("checkpoint: unsupported format '" +
                                 doc.at("format").get<std::string>() + "'");
    const TrainConfig config = TrainConfig::from_json(doc.at("config"));
    if (config_out) *config_out = config;

    // Build a fresh model, then overwrite every parameter by name.
    std::shared_ptr<TrainedModel> model;
    if (config.variant == Variant::softmax_baseline)
        model = std::make_shared<TrainedModel>(config.variant, BaselineModel(config.model, Rng(0)));
    else
        model = std::make_shared<TrainedModel>(config.variant, Ord2SeqModel(config.model, Rng(0)),
                                               config.effective_alpha());

    const auto& stored = doc.at("params");
    for (Tensor p : model->parameters()) {
        if (!stored.contains(p.name()))
            throw std::runtime_error("checkpoint: missing parameter '" + p.name() + "'");
        const auto& entry = stored.at(p.name());
        const auto shape = entry.at("shape").get<Shape>();
        if (shape != p.shape())
            throw std::runtime_error("checkpoint: parameter '" + p.name() + "' has shape " +
                                     shape_str(shape) + ", expected " + shape_str(p.shape()));
        const auto data = entry.at("data").get<std::vector<double>>();
        std::copy(data.begin(), data.end(), p.values_mut().begin());
    }
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& model,
                     const TrainConfig& config) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out << checkpoint_to_json(model, config).dump() << "\n";
}

std::shared_ptr<TrainedModel> load_checkpoint(const std::filesystem::path& path,
                                              TrainConfig* config_out) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
    return checkpoint_from_json(nlohmann::json::parse(in), config_out);
}

}  // namespace ord2seq
