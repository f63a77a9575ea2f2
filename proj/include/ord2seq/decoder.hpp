#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ord2seq/codec.hpp"
#include "ord2seq/rng.hpp"
#include "ord2seq/tensor.hpp"

namespace ord2seq {

// Desk-scale architecture defaults; everything is configurable.
struct ModelConfig {
    int categories = 8;
    int feature_dim = 8;
    int width = 64;
    int heads = 4;
    int layers = 2;
    int ffn_width = 128;
    int enc_hidden = 128;
    int enc_tokens = 4;
    bool shared_head = false;

    void validate() const;
};

struct AttentionParams {
    Tensor wq, wk, wv, wo;
};

struct DecoderLayerParams {
    AttentionParams self_attn;
    AttentionParams cross_attn;
    Tensor ln1_gain, ln1_offset;
    Tensor ln2_gain, ln2_offset;
    Tensor ln3_gain, ln3_offset;
    Tensor ffn1_w, ffn1_b;
    Tensor ffn2_w, ffn2_b;
};

struct ModelParams {
    Tensor embedding;  // (2d+1) x width: start marker row plus (position, bit) rows
    Tensor enc_w1, enc_b1, enc_w2, enc_b2;
    std::vector<DecoderLayerParams> layers;
    std::vector<Tensor> head_w;  // one per step, or a single shared head
    std::vector<Tensor> head_b;

    std::vector<Tensor> all() const;
};

// Row layout of the label embedding table: the start marker gets the reserved
// row 0, a bit b at sequence position i gets row 1 + 2*i + b.
std::size_t embedding_row(int depth, int position, int bit);
std::size_t embedding_row_count(int depth);
inline constexpr std::size_t kStartMarkerRow = 0;

// Length-n mask: 1 where the previous step's node kept the category, alpha
// elsewhere. No previous step (t=1) means an all-ones mask.
std::vector<double> decision_mask(const std::vector<int>* prev_multihot, double alpha,
                                  std::size_t categories);

// y_prob = mask (.) sigmoid(y_out). Throws for alpha outside (0, 1].
std::vector<double> apply_mask(std::span<const double> logits,
                               const std::vector<int>* prev_multihot, double alpha);

// Subtree-average decision: 0 when mean(y_prob[left]) >= mean(y_prob[right]).
// Ties go left; padded singleton nodes always yield 0.
int decide(std::span<const double> probs, CategoryRange left, CategoryRange right);

struct StepTrace {
    int step = 0;  // 1-based
    std::vector<double> logits;
    std::vector<double> mask;
    std::vector<double> probs;
    double p_left = 0.0;
    double p_right = 0.0;
    int bit = 0;
};

struct GreedyResult {
    PathCode path;
    CategoryId category = 0;
    std::vector<StepTrace> steps;
};

// The Ord2Seq head: feature-token encoder stand-in, label embedding,
// autoregressive transformer decoder over encoder tokens, and per-step
// output heads.
class Ord2SeqModel {
public:
    Ord2SeqModel(ModelConfig config, Rng init_rng);
    Ord2SeqModel(ModelConfig config, ModelParams params);

    const ModelConfig& config() const { return config_; }
    const DichotomicTree& tree() const { return tree_; }
    int depth() const { return tree_.depth(); }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }
    std::vector<Tensor> parameters() const { return params_.all(); }

    // features (batch x feature_dim) -> encoder tokens (batch*enc_tokens x width).
    Tensor encode(const Tensor& features) const;

    // Embedded query sequence for one shifted target.
    Tensor embed_target(const ShiftedTarget& target) const;

    // Decoder stack over embedded queries. tokens is (batch*steps x width);
    // output at a position depends only on that block's earlier positions and
    // on the encoder tokens.
    Tensor run_stack(const Tensor& tokens, const Tensor& enc_tokens, std::size_t batch) const;

    // Step-t logits (t = queries.rows()) from encoder tokens and the query
    // prefix y_in^{1..t}. Single sequence.
    std::vector<double> decode_step(const Tensor& enc_tokens, const Tensor& queries) const;

    // Step-t logits for a whole batch given the final decoder stream.
    Tensor step_logits(const Tensor& stream, std::size_t batch, std::size_t steps,
                       std::size_t step_index) const;

    const Tensor& head_weight(std::size_t step_index) const;
    const Tensor& head_bias(std::size_t step_index) const;

private:
    ModelConfig config_;
    DichotomicTree tree_;
    ModelParams params_;
};

// Feeds each predicted bit back as the next query; masks at step t come from
// the node actually selected at step t-1. Decodes all samples in lockstep.
std::vector<GreedyResult> greedy_decode_batch(const Ord2SeqModel& model, const Tensor& features,
                                              double alpha, bool want_trace = false);

GreedyResult greedy_decode(const Ord2SeqModel& model, std::span<const double> features,
                           double alpha, bool want_trace = true);

// Same decision loop with the per-step logits supplied externally (the
// callback sees the bits emitted so far). Used to drive the machinery from
// hand-built heads.
using StepLogitsFn = std::function<std::vector<double>(const std::vector<int>& bits_so_far)>;
GreedyResult greedy_decode_with(const StepLogitsFn& step_logits, const DichotomicTree& tree,
                                double alpha, bool want_trace = false);

}  // namespace ord2seq
