#include "ord2seq/decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace ord2seq {

namespace {

std::vector<double> xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(fan_in * fan_out);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return v;
}

Tensor linear_param(Rng& rng, std::size_t in, std::size_t out, const std::string& name) {
    return Tensor::param({in, out}, xavier(rng, in, out), name);
}

Tensor zero_param(std::size_t n, const std::string& name) {
    return Tensor::param({n}, std::vector<double>(n, 0.0), name);
}

Tensor one_param(std::size_t n, const std::string& name) {
    return Tensor::param({n}, std::vector<double>(n, 1.0), name);
}

}  // namespace

void ModelConfig::validate() const {
    if (categories < 2)
        throw std::invalid_argument("model: invalid category count " + std::to_string(categories));
    if (feature_dim < 1) throw std::invalid_argument("model: feature_dim must be positive");
    if (width < 1 || heads < 1 || width % heads != 0)
        throw std::invalid_argument("model: width " + std::to_string(width) +
                                    " must be divisible by heads " + std::to_string(heads));
    if (layers < 1) throw std::invalid_argument("model: need at least one decoder layer");
    if (ffn_width < 1 || enc_hidden < 1 || enc_tokens < 1)
        throw std::invalid_argument("model: widths must be positive");
}

std::vector<Tensor> ModelParams::all() const {
    std::vector<Tensor> out;
    out.push_back(embedding);
    out.push_back(enc_w1);
    out.push_back(enc_b1);
    out.push_back(enc_w2);
    out.push_back(enc_b2);
    for (const auto& layer : layers) {
        out.push_back(layer.self_attn.wq);
        out.push_back(layer.self_attn.wk);
        out.push_back(layer.self_attn.wv);
        out.push_back(layer.self_attn.wo);
        out.push_back(layer.ln1_gain);
        out.push_back(layer.ln1_offset);
        out.push_back(layer.cross_attn.wq);
        out.push_back(layer.cross_attn.wk);
        out.push_back(layer.cross_attn.wv);
        out.push_back(layer.cross_attn.wo);
        out.push_back(layer.ln2_gain);
        out.push_back(layer.ln2_offset);
        out.push_back(layer.ffn1_w);
        out.push_back(layer.ffn1_b);
        out.push_back(layer.ffn2_w);
        out.push_back(layer.ffn2_b);
        out.push_back(layer.ln3_gain);
        out.push_back(layer.ln3_offset);
    }
    for (const auto& h : head_w) out.push_back(h);
    for (const auto& h : head_b) out.push_back(h);
    return out;
}

std::size_t embedding_row_count(int depth) { return static_cast<std::size_t>(2 * depth + 1); }

std::size_t embedding_row(int depth, int position, int bit) {
    if (position < 0 || position >= depth)
        throw std::invalid_argument("embedding: position " + std::to_string(position) +
                                    " out of range for depth " + std::to_string(depth));
    if (bit != 0 && bit != 1)
        throw std::invalid_argument("embedding: bit must be 0 or 1, got " + std::to_string(bit));
    return static_cast<std::size_t>(1 + 2 * position + bit);
}

Ord2SeqModel::Ord2SeqModel(ModelConfig config, Rng init_rng)
    : config_(config), tree_(config.categories) {
    config_.validate();
    const auto w = static_cast<std::size_t>(config_.width);
    const auto d = tree_.depth();
    const auto n = static_cast<std::size_t>(config_.categories);
    Rng rng = init_rng;

    params_.embedding = Tensor::param({embedding_row_count(d), w},
                                      xavier(rng, embedding_row_count(d), w), "embed.table");
    params_.enc_w1 = linear_param(rng, static_cast<std::size_t>(config_.feature_dim),
                                  static_cast<std::size_t>(config_.enc_hidden), "enc.w1");
    params_.enc_b1 = zero_param(static_cast<std::size_t>(config_.enc_hidden), "enc.b1");
    params_.enc_w2 = linear_param(rng, static_cast<std::size_t>(config_.enc_hidden),
                                  static_cast<std::size_t>(config_.enc_tokens) * w, "enc.w2");
    params_.enc_b2 = zero_param(static_cast<std::size_t>(config_.enc_tokens) * w, "enc.b2");

    for (int li = 0; li < config_.layers; ++li) {
        const std::string prefix = "layer" + std::to_string(li) + ".";
        DecoderLayerParams layer;
        layer.self_attn.wq = linear_param(rng, w, w, prefix + "self.wq");
        layer.self_attn.wk = linear_param(rng, w, w, prefix + "self.wk");
        layer.self_attn.wv = linear_param(rng, w, w, prefix + "self.wv");
        layer.self_attn.wo = linear_param(rng, w, w, prefix + "self.wo");
        layer.ln1_gain = one_param(w, prefix + "ln1.gain");
        layer.ln1_offset = zero_param(w, prefix + "ln1.offset");
        layer.cross_attn.wq = linear_param(rng, w, w, prefix + "cross.wq");
        layer.cross_attn.wk = linear_param(rng, w, w, prefix + "cross.wk");
        layer.cross_attn.wv = linear_param(rng, w, w, prefix + "cross.wv");
        layer.cross_attn.wo = linear_param(rng, w, w, prefix + "cross.wo");
        layer.ln2_gain = one_param(w, prefix + "ln2.gain");
        layer.ln2_offset = zero_param(w, prefix + "ln2.offset");
        layer.ffn1_w = linear_param(rng, w, static_cast<std::size_t>(config_.ffn_width),
                                    prefix + "ffn1.w");
        layer.ffn1_b = zero_param(static_cast<std::size_t>(config_.ffn_width), prefix + "ffn1.b");
        layer.ffn2_w = linear_param(rng, static_cast<std::size_t>(config_.ffn_width), w,
                                    prefix + "ffn2.w");
        layer.ffn2_b = zero_param(w, prefix + "ffn2.b");
        layer.ln3_gain = one_param(w, prefix + "ln3.gain");
        layer.ln3_offset = zero_param(w, prefix + "ln3.offset");
        params_.layers.push_back(std::move(layer));
    }

    const int head_count = config_.shared_head ? 1 : d;
    for (int t = 0; t < head_count; ++t) {
        const std::string name = "head" + std::to_string(t) + ".";
        params_.head_w.push_back(linear_param(rng, w, n, name + "w"));
        params_.head_b.push_back(zero_param(n, name + "b"));
    }
}

Ord2SeqModel::Ord2SeqModel(ModelConfig config, ModelParams params)
    : config_(config), tree_(config.categories), params_(std::move(params)) {
    config_.validate();
}

Tensor Ord2SeqModel::encode(const Tensor& features) const {
    if (features.shape().size() != 2 ||
        features.cols() != static_cast<std::size_t>(config_.feature_dim))
        throw std::invalid_argument("encode: expected (batch x " +
                                    std::to_string(config_.feature_dim) + ") features, got " +
                                    shape_str(features.shape()));
    const std::size_t batch = features.rows();
    Tensor h = gelu(add_rows(matmul(features, params_.enc_w1), params_.enc_b1));
    Tensor tokens = add_rows(matmul(h, params_.enc_w2), params_.enc_b2);
    return reshape(tokens, {batch * static_cast<std::size_t>(config_.enc_tokens),
                            static_cast<std::size_t>(config_.width)});
}

Tensor Ord2SeqModel::embed_target(const ShiftedTarget& target) const {
    const int d = tree_.depth();
    if (static_cast<int>(target.tokens.size()) > d)
        throw std::invalid_argument("embed_target: " + std::to_string(target.tokens.size()) +
                                    " tokens exceed tree depth " + std::to_string(d));
    std::vector<std::size_t> rows;
    rows.reserve(target.tokens.size());
    for (std::size_t i = 0; i < target.tokens.size(); ++i) {
        const int tok = target.tokens[i];
        if (tok == ShiftedTarget::kStartMarker) {
            rows.push_back(kStartMarkerRow);
        } else {
            if (i == 0)
                throw std::invalid_argument("embed_target: first token must be the start marker");
            rows.push_back(embedding_row(d, static_cast<int>(i), tok));
        }
    }
    return gather_rows(params_.embedding, std::move(rows));
}

Tensor Ord2SeqModel::run_stack(const Tensor& tokens, const Tensor& enc_tokens,
                               std::size_t batch) const {
    const auto heads = static_cast<std::size_t>(config_.heads);
    Tensor x = tokens;
    for (const auto& layer : params_.layers) {
        Tensor q = matmul(x, layer.self_attn.wq);
        Tensor k = matmul(x, layer.self_attn.wk);
        Tensor v = matmul(x, layer.self_attn.wv);
        Tensor sa = matmul(multihead_attention(q, k, v, heads, batch, /*causal=*/true),
                           layer.self_attn.wo);
        x = layer_norm(add(x, sa), layer.ln1_gain, layer.ln1_offset);

        Tensor cq = matmul(x, layer.cross_attn.wq);
        Tensor ck = matmul(enc_tokens, layer.cross_attn.wk);
        Tensor cv = matmul(enc_tokens, layer.cross_attn.wv);
        Tensor ca = matmul(multihead_attention(cq, ck, cv, heads, batch, /*causal=*/false),
                           layer.cross_attn.wo);
        x = layer_norm(add(x, ca), layer.ln2_gain, layer.ln2_offset);

        Tensor h = gelu(add_rows(matmul(x, layer.ffn1_w), layer.ffn1_b));
        Tensor ff = add_rows(matmul(h, layer.ffn2_w), layer.ffn2_b);
        x = layer_norm(add(x, ff), layer.ln3_gain, layer.ln3_offset);
    }
    return x;
}

const Tensor& Ord2SeqModel::head_weight(std::size_t step_index) const {
    if (static_cast<int>(step_index) >= tree_.depth())
        throw std::invalid_argument("head: step " + std::to_string(step_index + 1) +
                                    " exceeds tree depth " + std::to_string(tree_.depth()));
    return params_.head_w[config_.shared_head ? 0 : step_index];
}

const Tensor& Ord2SeqModel::head_bias(std::size_t step_index) const {
    if (static_cast<int>(step_index) >= tree_.depth())
        throw std::invalid_argument("head: step " + std::to_string(step_index + 1) +
                                    " exceeds tree depth " + std::to_string(tree_.depth()));
    return params_.head_b[config_.shared_head ? 0 : step_index];
}

Tensor Ord2SeqModel::step_logits(const Tensor& stream, std::size_t batch, std::size_t steps,
                                 std::size_t step_index) const {
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * steps + step_index;
    Tensor last = gather_rows(stream, std::move(rows));
    return add_rows(matmul(last, head_weight(step_index)), head_bias(step_index));
}

std::vector<double> Ord2SeqModel::decode_step(const Tensor& enc_tokens,
                                              const Tensor& queries) const {
    const std::size_t t = queries.rows();
    if (t == 0 || static_cast<int>(t) > tree_.depth())
        throw std::invalid_argument("decode_step: " + std::to_string(t) +
                                    " queries for tree depth " + std::to_string(tree_.depth()));
    Tensor stream = run_stack(queries, enc_tokens, 1);
    Tensor logits = step_logits(stream, 1, t, t - 1);
    return {logits.values().begin(), logits.values().end()};
}

std::vector<double> decision_mask(const std::vector<int>* prev_multihot, double alpha,
                                  std::size_t categories) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("mask: alpha " + std::to_string(alpha) +
                                    " outside (0, 1]");
    if (!prev_multihot) return std::vector<double>(categories, 1.0);
    if (prev_multihot->size() != categories)
        throw std::invalid_argument("mask: multi-hot length " +
                                    std::to_string(prev_multihot->size()) + " for " +
                                    std::to_string(categories) + " categories");
    std::vector<double> mask(categories);
    for (std::size_t i = 0; i < categories; ++i) mask[i] = (*prev_multihot)[i] ? 1.0 : alpha;
    return mask;
}

std::vector<double> apply_mask(std::span<const double> logits,
                               const std::vector<int>* prev_multihot, double alpha) {
    const std::vector<double> mask = decision_mask(prev_multihot, alpha, logits.size());
    std::vector<double> probs(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double t = logits[i];
        const double sig = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
        probs[i] = mask[i] * sig;
    }
    return probs;
}

int decide(std::span<const double> probs, CategoryRange left, CategoryRange right) {
    if (left.count() < 1 || right.count() < 1)
        throw std::logic_error("decide: empty subtree range");
    double lsum = 0.0, rsum = 0.0;
    for (int i = left.lo; i <= left.hi; ++i) lsum += probs[static_cast<std::size_t>(i)];
    for (int i = right.lo; i <= right.hi; ++i) rsum += probs[static_cast<std::size_t>(i)];
    const double lmean = lsum / left.count();
    const double rmean = rsum / right.count();
    return lmean >= rmean ? 0 : 1;
}

namespace {

// Shared tail of every greedy step: mask, decide, record, advance.
int greedy_step(const DichotomicTree& tree, const std::vector<int>& bits,
                const std::vector<double>& logits, double alpha, int step,
                std::vector<StepTrace>* trace) {
    const auto n = static_cast<std::size_t>(tree.categories());
    std::vector<double> mask;
    std::vector<double> probs;
    if (step == 1) {
        mask = decision_mask(nullptr, alpha, n);
        probs = apply_mask(logits, nullptr, alpha);
    } else {
        const CategoryRange node = tree.range_at(bits);
        std::vector<int> hot(n, 0);
        for (int i = node.lo; i <= node.hi; ++i) hot[static_cast<std::size_t>(i)] = 1;
        mask = decision_mask(&hot, alpha, n);
        probs = apply_mask(logits, &hot, alpha);
    }
    const auto [left, right] = tree.node_ranges_at(bits);
    const int bit = decide(probs, left, right);
    if (trace) {
        StepTrace st;
        st.step = step;
        st.logits = logits;
        st.mask = std::move(mask);
        st.probs = probs;
        double lsum = 0.0, rsum = 0.0;
        for (int i = left.lo; i <= left.hi; ++i) lsum += probs[static_cast<std::size_t>(i)];
        for (int i = right.lo; i <= right.hi; ++i) rsum += probs[static_cast<std::size_t>(i)];
        st.p_left = lsum / left.count();
        st.p_right = rsum / right.count();
        st.bit = bit;
        trace->push_back(std::move(st));
    }
    return bit;
}

}  // namespace

std::vector<GreedyResult> greedy_decode_batch(const Ord2SeqModel& model, const Tensor& features,
                                              double alpha, bool want_trace) {
    const DichotomicTree& tree = model.tree();
    const int d = tree.depth();
    const std::size_t batch = features.rows();
    Tensor enc = model.encode(features);

    std::vector<GreedyResult> results(batch);
    std::vector<std::vector<std::size_t>> token_rows(batch, {kStartMarkerRow});

    for (int step = 1; step <= d; ++step) {
        const auto t = static_cast<std::size_t>(step);
        std::vector<std::size_t> flat;
        flat.reserve(batch * t);
        for (const auto& rows : token_rows) flat.insert(flat.end(), rows.begin(), rows.end());
        Tensor tokens = gather_rows(model.params().embedding, std::move(flat));
        Tensor stream = model.run_stack(tokens, enc, batch);
        Tensor logits = model.step_logits(stream, batch, t, t - 1);

        const auto n = static_cast<std::size_t>(tree.categories());
        for (std::size_t b = 0; b < batch; ++b) {
            std::vector<double> row(logits.values().begin() + static_cast<std::ptrdiff_t>(b * n),
                                    logits.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
            auto& result = results[b];
            const int bit = greedy_step(tree, result.path.bits, row, alpha, step,
                                        want_trace ? &result.steps : nullptr);
            result.path.bits.push_back(bit);
            if (step < d)
                token_rows[b].push_back(embedding_row(d, step, bit));
        }
    }
    for (auto& result : results) result.category = tree.decode_path(result.path);
    return results;
}

GreedyResult greedy_decode(const Ord2SeqModel& model, std::span<const double> features,
                           double alpha, bool want_trace) {
    Tensor f = Tensor::from({1, features.size()}, {features.begin(), features.end()});
    return greedy_decode_batch(model, f, alpha, want_trace).front();
}

GreedyResult greedy_decode_with(const StepLogitsFn& step_logits, const DichotomicTree& tree,
                                double alpha, bool want_trace) {
    GreedyResult result;
    const int d = tree.depth();
    for (int step = 1; step <= d; ++step) {
        const std::vector<double> logits = step_logits(result.path.bits);
        const int bit = greedy_step(tree, result.path.bits, logits, alpha, step,
                                    want_trace ? &result.steps : nullptr);
        result.path.bits.push_back(bit);
    }
    result.category = tree.decode_path(result.path);
    return result;
}

}  // namespace ord2seq
