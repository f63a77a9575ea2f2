#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ord2seq/adam.hpp"
#include "ord2seq/codec.hpp"
#include "ord2seq/databench.hpp"
#include "ord2seq/decoder.hpp"
#include "ord2seq/rng.hpp"

namespace ord2seq {

// Ablation variants: `full` is the masked sequence model, `no_mask` forces
// alpha to 1, `one_shot` keeps the decoder but predicts the category in a
// single n-way softmax step, `softmax_baseline` drops the decoder entirely.
enum class Variant { full, no_mask, one_shot, softmax_baseline };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct TrainConfig {
    ModelConfig model;
    double alpha = 0.3;
    int epochs = 50;
    int batch_size = 32;
    double lr = 1e-4;
    std::uint64_t seed = 1;
    Variant variant = Variant::full;
    double clamp_eps = 1e-7;

    // Mask actually used: no_mask pins it to 1.
    double effective_alpha() const { return variant == Variant::no_mask ? 1.0 : alpha; }
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& doc);
};

struct LossReport {
    double total = 0.0;
    std::vector<double> per_step;
};

// Sum over steps of the per-step BCE between masked probabilities and
// multi-hot labels, averaged over categories only. Probabilities are clamped
// to [eps, 1-eps] before the logs.
LossReport sequence_bce(const std::vector<std::vector<double>>& probs,
                        const MultiHotSequence& multihot, double eps = 1e-7);

struct AdjacencyRow {
    std::size_t total = 0;
    double correct = 0.0;
    double adjacent = 0.0;  // |predicted - true| == 1
    double other = 0.0;     // |predicted - true| >= 2
};

struct EvalReport {
    double accuracy = 0.0;
    double mae = 0.0;
    std::size_t sample_count = 0;
    std::vector<AdjacencyRow> adjacency;  // one row per true category

    nlohmann::json to_json() const;
};

EvalReport eval_from_predictions(std::span<const int> predictions, std::span<const Sample> samples,
                                 int categories);

// Encoder MLP with a flat n-way softmax head on the flattened feature tokens.
struct BaselineModel {
    ModelConfig config;
    Tensor enc_w1, enc_b1, enc_w2, enc_b2;
    Tensor cls_w, cls_b;

    BaselineModel(ModelConfig cfg, Rng rng);
    BaselineModel(ModelConfig cfg, Tensor w1, Tensor b1, Tensor w2, Tensor b2, Tensor cw,
                  Tensor cb);
    std::vector<Tensor> parameters() const;
    Tensor logits(const Tensor& features) const;
};

// A trained predictor of any variant.
class TrainedModel {
public:
    TrainedModel(Variant variant, Ord2SeqModel model, double alpha);
    TrainedModel(Variant variant, BaselineModel model);

    Variant variant() const { return variant_; }
    double alpha() const { return alpha_; }
    const Ord2SeqModel& sequence_model() const;
    Ord2SeqModel& sequence_model();
    const BaselineModel& baseline_model() const;
    BaselineModel& baseline_model();
    const ModelConfig& config() const;
    std::vector<Tensor> parameters() const;

    std::vector<int> predict(std::span<const Sample> samples) const;

private:
    Variant variant_;
    double alpha_ = 0.3;
    std::optional<Ord2SeqModel> seq_;
    std::optional<BaselineModel> baseline_;
};

// Thrown when a training loss goes non-finite; carries a diagnostics dump.
struct NanAbort : std::runtime_error {
    explicit NanAbort(nlohmann::json diag)
        : std::runtime_error("training aborted: non-finite loss"), diagnostics(std::move(diag)) {}
    nlohmann::json diagnostics;
};

// Teacher-forced loss graph over one batch: queries are the embedded shifted
// ground-truth paths, masks come from the ground-truth multi-hots of the
// previous step, and the per-step BCE terms are summed and averaged over the
// batch. The graph stays differentiable end to end.
Tensor sequence_batch_loss(const Ord2SeqModel& model, const Tensor& features,
                           const std::vector<int>& labels, double alpha, double clamp_eps);

// One teacher-forced pass over the training split; returns the mean loss.
double train_epoch(TrainedModel& model, Adam& optimizer, const TrainConfig& config,
                   std::span<const Sample> samples, Rng& shuffle_rng, int epoch_label = 0);

EvalReport evaluate(const TrainedModel& model, std::span<const Sample> samples);

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double val_accuracy = 0.0;
    double val_mae = 0.0;
};

struct TrainOutcome {
    std::vector<EpochLog> log;
    int best_epoch = 0;  // 1-based epoch whose validation MAE was best
    EvalReport test;
    std::shared_ptr<TrainedModel> model;  // parameters restored to best epoch
};

// Fixed epoch budget with best-by-validation-MAE checkpoint selection.
TrainOutcome run_training(const TrainConfig& config, const Dataset& data);

}  // namespace ord2seq
