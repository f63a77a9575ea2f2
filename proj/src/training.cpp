#include "ord2seq/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ord2seq {

namespace {

Tensor features_tensor(std::span<const Sample> samples, std::span<const std::size_t> indices,
                       int feature_dim) {
    std::vector<double> flat;
    flat.reserve(indices.size() * static_cast<std::size_t>(feature_dim));
    for (const std::size_t i : indices)
        flat.insert(flat.end(), samples[i].features.begin(), samples[i].features.end());
    return Tensor::from({indices.size(), static_cast<std::size_t>(feature_dim)}, std::move(flat));
}

std::vector<int> batch_labels(std::span<const Sample> samples,
                              std::span<const std::size_t> indices) {
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (const std::size_t i : indices) labels.push_back(samples[i].label);
    return labels;
}

nlohmann::json param_stats(const std::vector<Tensor>& params) {
    nlohmann::json stats = nlohmann::json::array();
    for (const auto& p : params) {
        double lo = 0.0, hi = 0.0, norm = 0.0;
        bool finite = true;
        for (const double v : p.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            norm += v * v;
            finite = finite && std::isfinite(v);
        }
        stats.push_back({{"name", p.name()},
                         {"min", lo},
                         {"max", hi},
                         {"l2", std::sqrt(norm)},
                         {"finite", finite}});
    }
    return stats;
}

// Per-category multi-hot rows and the masks they induce, cached once per run.
struct StepLabels {
    // o[t][c] = multi-hot of category c at step t (length n each)
    std::vector<std::vector<std::vector<double>>> hot;
    std::vector<std::vector<std::vector<double>>> mask;  // mask[t][c], t=0 all ones
};

StepLabels make_step_labels(const DichotomicTree& tree, double alpha) {
    const int d = tree.depth();
    const auto n = static_cast<std::size_t>(tree.categories());
    StepLabels out;
    out.hot.assign(static_cast<std::size_t>(d), {});
    out.mask.assign(static_cast<std::size_t>(d), {});
    for (int c = 0; c < tree.categories(); ++c) {
        const MultiHotSequence seq = tree.encode_multihot(c);
        for (int t = 0; t < d; ++t) {
            std::vector<double> hot(n);
            for (std::size_t i = 0; i < n; ++i) hot[i] = seq.steps[static_cast<std::size_t>(t)][i];
            out.hot[static_cast<std::size_t>(t)].push_back(std::move(hot));

            std::vector<double> mask(n, 1.0);
            if (t > 0)
                for (std::size_t i = 0; i < n; ++i)
                    mask[i] = seq.steps[static_cast<std::size_t>(t - 1)][i] ? 1.0 : alpha;
            out.mask[static_cast<std::size_t>(t)].push_back(std::move(mask));
        }
    }
    return out;
}

Tensor rows_for(const std::vector<std::vector<double>>& per_category, std::span<const int> labels) {
    const std::size_t n = per_category.front().size();
    std::vector<double> flat;
    flat.reserve(labels.size() * n);
    for (const int c : labels) {
        const auto& row = per_category[static_cast<std::size_t>(c)];
        flat.insert(flat.end(), row.begin(), row.end());
    }
    return Tensor::from({labels.size(), n}, std::move(flat));
}

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_mask: return "no-mask";
        case Variant::one_shot: return "one-shot";
        case Variant::softmax_baseline: return "softmax-baseline";
    }
    throw std::logic_error("variant_name: bad variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "full") return Variant::full;
    if (name == "no-mask") return Variant::no_mask;
    if (name == "one-shot") return Variant::one_shot;
    if (name == "softmax-baseline") return Variant::softmax_baseline;
    throw std::invalid_argument("training: unknown variant '" + name + "'");
}

void TrainConfig::validate() const {
    model.validate();
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("training: alpha " + std::to_string(alpha) +
                                    " outside (0, 1]");
    if (epochs < 1) throw std::invalid_argument("training: epochs must be positive");
    if (batch_size < 1) throw std::invalid_argument("training: batch size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("training: learning rate must be positive");
    if (!(clamp_eps > 0.0 && clamp_eps < 0.5))
        throw std::invalid_argument("training: clamp epsilon out of range");
}

nlohmann::json TrainConfig::to_json() const {
    return nlohmann::json{
        {"categories", model.categories},
        {"feature_dim", model.feature_dim},
        {"width", model.width},
        {"heads", model.heads},
        {"layers", model.layers},
        {"ffn_width", model.ffn_width},
        {"enc_hidden", model.enc_hidden},
        {"enc_tokens", model.enc_tokens},
        {"shared_head", model.shared_head},
        {"alpha", alpha},
        {"epochs", epochs},
        {"batch_size", batch_size},
        {"lr", lr},
        {"seed", seed},
        {"variant", variant_name(variant)},
        {"clamp_eps", clamp_eps},
    };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
    TrainConfig cfg;
    cfg.model.categories = doc.at("categories").get<int>();
    cfg.model.feature_dim = doc.at("feature_dim").get<int>();
    cfg.model.width = doc.at("width").get<int>();
    cfg.model.heads = doc.at("heads").get<int>();
    cfg.model.layers = doc.at("layers").get<int>();
    cfg.model.ffn_width = doc.at("ffn_width").get<int>();
    cfg.model.enc_hidden = doc.at("enc_hidden").get<int>();
    cfg.model.enc_tokens = doc.at("enc_tokens").get<int>();
    cfg.model.shared_head = doc.at("shared_head").get<bool>();
    cfg.alpha = doc.at("alpha").get<double>();
    cfg.epochs = doc.at("epochs").get<int>();
    cfg.batch_size = doc.at("batch_size").get<int>();
    cfg.lr = doc.at("lr").get<double>();
    cfg.seed = doc.at("seed").get<std::uint64_t>();
    cfg.variant = variant_from_name(doc.at("variant").get<std::string>());
    cfg.clamp_eps = doc.at("clamp_eps").get<double>();
    cfg.validate();
    return cfg;
}

LossReport sequence_bce(const std::vector<std::vector<double>>& probs,
                        const MultiHotSequence& multihot, double eps) {
    if (probs.size() != multihot.steps.size())
        throw std::invalid_argument("sequence_bce: " + std::to_string(probs.size()) +
                                    " probability steps vs " +
                                    std::to_string(multihot.steps.size()) + " label steps");
    LossReport report;
    for (std::size_t t = 0; t < probs.size(); ++t) {
        const auto& p = probs[t];
        const auto& o = multihot.steps[t];
        if (p.size() != o.size())
            throw std::invalid_argument("sequence_bce: step " + std::to_string(t + 1) + " has " +
                                        std::to_string(p.size()) + " probabilities vs " +
                                        std::to_string(o.size()) + " labels");
        double step_loss = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double pc = std::min(1.0 - eps, std::max(eps, p[i]));
            step_loss += o[i] ? std::log(pc) : std::log(1.0 - pc);
        }
        step_loss = -step_loss / static_cast<double>(p.size());
        report.per_step.push_back(step_loss);
        report.total += step_loss;
    }
    return report;
}

EvalReport eval_from_predictions(std::span<const int> predictions, std::span<const Sample> samples,
                                 int categories) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
    if (predictions.size() != samples.size())
        throw std::invalid_argument("evaluate: prediction/sample count mismatch");
    EvalReport report;
    report.sample_count = samples.size();
    report.adjacency.assign(static_cast<std::size_t>(categories), {});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int truth = samples[i].label;
        const int delta = std::abs(predictions[i] - truth);
        report.accuracy += delta == 0 ? 1.0 : 0.0;
        report.mae += delta;
        auto& row = report.adjacency[static_cast<std::size_t>(truth)];
        row.total += 1;
        (delta == 0 ? row.correct : delta == 1 ? row.adjacent : row.other) += 1.0;
    }
    report.accuracy /= static_cast<double>(samples.size());
    report.mae /= static_cast<double>(samples.size());
    for (auto& row : report.adjacency) {
        if (row.total == 0) continue;
        row.correct /= static_cast<double>(row.total);
        row.adjacent /= static_cast<double>(row.total);
        row.other /= static_cast<double>(row.total);
    }
    return report;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json adj = nlohmann::json::array();
    for (const auto& row : adjacency)
        adj.push_back({{"samples", row.total},
                       {"correct", row.correct},
                       {"adjacent", row.adjacent},
                       {"other", row.other}});
    return nlohmann::json{{"accuracy", accuracy},
                          {"mae", mae},
                          {"samples", sample_count},
                          {"adjacency", std::move(adj)}};
}

BaselineModel::BaselineModel(ModelConfig cfg, Rng rng) : config(cfg) {
    config.validate();
    const auto f = static_cast<std::size_t>(config.feature_dim);
    const auto h = static_cast<std::size_t>(config.enc_hidden);
    const auto tok = static_cast<std::size_t>(config.enc_tokens) *
                     static_cast<std::size_t>(config.width);
    const auto n = static_cast<std::size_t>(config.categories);
    const auto xavier = [&rng](std::size_t in, std::size_t out, const std::string& name) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        std::vector<double> v(in * out);
        for (auto& x : v) x = rng.uniform(-bound, bound);
        return Tensor::param({in, out}, std::move(v), name);
    };
    enc_w1 = xavier(f, h, "enc.w1");
    enc_b1 = Tensor::param({h}, std::vector<double>(h, 0.0), "enc.b1");
    enc_w2 = xavier(h, tok, "enc.w2");
    enc_b2 = Tensor::param({tok}, std::vector<double>(tok, 0.0), "enc.b2");
    cls_w = xavier(tok, n, "cls.w");
    cls_b = Tensor::param({n}, std::vector<double>(n, 0.0), "cls.b");
}

BaselineModel::BaselineModel(ModelConfig cfg, Tensor w1, Tensor b1, Tensor w2, Tensor b2,
                             Tensor cw, Tensor cb)
    : config(cfg),
      enc_w1(std::move(w1)),
      enc_b1(std::move(b1)),
      enc_w2(std::move(w2)),
      enc_b2(std::move(b2)),
      cls_w(std::move(cw)),
      cls_b(std::move(cb)) {}

std::vector<Tensor> BaselineModel::parameters() const {
    return {enc_w1, enc_b1, enc_w2, enc_b2, cls_w, cls_b};
}

Tensor BaselineModel::logits(const Tensor& features) const {
    Tensor h = gelu(add_rows(matmul(features, enc_w1), enc_b1));
    Tensor tokens = add_rows(matmul(h, enc_w2), enc_b2);
    return add_rows(matmul(tokens, cls_w), cls_b);
}

TrainedModel::TrainedModel(Variant variant, Ord2SeqModel model, double alpha)
    : variant_(variant), alpha_(alpha), seq_(std::move(model)) {
    if (variant == Variant::softmax_baseline)
        throw std::invalid_argument("trained model: baseline variant needs a baseline model");
}

TrainedModel::TrainedModel(Variant variant, BaselineModel model)
    : variant_(variant), baseline_(std::move(model)) {
    if (variant != Variant::softmax_baseline)
        throw std::invalid_argument("trained model: sequence variant needs a sequence model");
}

const Ord2SeqModel& TrainedModel::sequence_model() const {
    if (!seq_) throw std::logic_error("trained model: no sequence model");
    return *seq_;
}

Ord2SeqModel& TrainedModel::sequence_model() {
    if (!seq_) throw std::logic_error("trained model: no sequence model");
    return *seq_;
}

const BaselineModel& TrainedModel::baseline_model() const {
    if (!baseline_) throw std::logic_error("trained model: no baseline model");
    return *baseline_;
}

BaselineModel& TrainedModel::baseline_model() {
    if (!baseline_) throw std::logic_error("trained model: no baseline model");
    return *baseline_;
}

const ModelConfig& TrainedModel::config() const {
    return seq_ ? seq_->config() : baseline_->config;
}

std::vector<Tensor> TrainedModel::parameters() const {
    return seq_ ? seq_->parameters() : baseline_->parameters();
}

std::vector<int> TrainedModel::predict(std::span<const Sample> samples) const {
    if (samples.empty()) return {};
    std::vector<std::size_t> all(samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Tensor features = features_tensor(samples, all, config().feature_dim);

    std::vector<int> out(samples.size());
    if (variant_ == Variant::full || variant_ == Variant::no_mask) {
        const auto results = greedy_decode_batch(*seq_, features, alpha_);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = results[i].category;
        return out;
    }

    Tensor logits;
    if (variant_ == Variant::one_shot) {
        Tensor enc = seq_->encode(features);
        const std::vector<std::size_t> start(samples.size(), kStartMarkerRow);
        Tensor tokens = gather_rows(seq_->params().embedding, start);
        Tensor stream = seq_->run_stack(tokens, enc, samples.size());
        logits = seq_->step_logits(stream, samples.size(), 1, 0);
    } else {
        logits = baseline_->logits(features);
    }
    const auto n = static_cast<std::size_t>(config().categories);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double* row = logits.values().data() + i * n;
        out[i] = static_cast<int>(std::max_element(row, row + n) - row);
    }
    return out;
}

Tensor sequence_batch_loss(const Ord2SeqModel& model, const Tensor& features,
                           const std::vector<int>& labels, double alpha, double clamp_eps) {
    const DichotomicTree& tree = model.tree();
    const int depth = tree.depth();
    const auto d = static_cast<std::size_t>(depth);
    const auto n = static_cast<std::size_t>(tree.categories());
    const std::size_t bsz = labels.size();
    const StepLabels cache = make_step_labels(tree, alpha);

    // Teacher forcing: queries are the embedded shifted ground-truth paths.
    std::vector<std::size_t> token_rows;
    token_rows.reserve(bsz * d);
    for (const int c : labels) {
        const ShiftedTarget target = shift_right(tree.encode_path(c));
        token_rows.push_back(kStartMarkerRow);
        for (std::size_t i = 1; i < target.tokens.size(); ++i)
            token_rows.push_back(embedding_row(depth, static_cast<int>(i), target.tokens[i]));
    }
    Tensor enc = model.encode(features);
    Tensor tokens = gather_rows(model.params().embedding, std::move(token_rows));
    Tensor stream = model.run_stack(tokens, enc, bsz);

    const Tensor ones = Tensor::full({bsz, n}, 1.0);
    Tensor step_total;
    for (std::size_t t = 0; t < d; ++t) {
        Tensor logits = model.step_logits(stream, bsz, d, t);
        const Tensor mask = rows_for(cache.mask[t], labels);
        const Tensor hot = rows_for(cache.hot[t], labels);
        Tensor p = clamp(mul(mask, sigmoid(logits)), clamp_eps, 1.0 - clamp_eps);
        Tensor term = add(mul(hot, log(p)), mul(sub(ones, hot), log(sub(ones, p))));
        Tensor step_sum = sum(term);
        step_total = t == 0 ? step_sum : add(step_total, step_sum);
    }
    return scale(step_total, -1.0 / (static_cast<double>(n) * static_cast<double>(bsz)));
}

double train_epoch(TrainedModel& model, Adam& optimizer, const TrainConfig& config,
                   std::span<const Sample> samples, Rng& shuffle_rng, int epoch_label) {
    if (samples.empty()) throw std::invalid_argument("training: empty dataset");
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    const bool sequence = config.variant == Variant::full || config.variant == Variant::no_mask;

    double total_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end =
            std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        const std::span<const std::size_t> batch(order.data() + start, end - start);
        const std::size_t bsz = batch.size();
        const Tensor features = features_tensor(samples, batch, config.model.feature_dim);
        const std::vector<int> labels = batch_labels(samples, batch);

        Tensor loss;
        if (sequence) {
            loss = sequence_batch_loss(model.sequence_model(), features, labels,
                                       config.effective_alpha(), config.clamp_eps);
        } else if (config.variant == Variant::one_shot) {
            Ord2SeqModel& seq = model.sequence_model();
            Tensor enc = seq.encode(features);
            const std::vector<std::size_t> start_rows(bsz, kStartMarkerRow);
            Tensor tokens = gather_rows(seq.params().embedding, start_rows);
            Tensor stream = seq.run_stack(tokens, enc, bsz);
            loss = cross_entropy_logits(seq.step_logits(stream, bsz, 1, 0), labels);
        } else {
            loss = cross_entropy_logits(model.baseline_model().logits(features), labels);
        }

        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            nlohmann::json diag;
            diag["error"] = "non-finite training loss";
            diag["epoch"] = epoch_label;
            diag["batch_start"] = start;
            diag["loss"] = loss_value;
            diag["variant"] = variant_name(config.variant);
            diag["params"] = param_stats(model.parameters());
            throw NanAbort(std::move(diag));
        }

        optimizer.zero_grad();
        loss.backward();
        optimizer.step();

        total_loss += loss_value * static_cast<double>(bsz);
        seen += bsz;
    }
    return total_loss / static_cast<double>(seen);
}

EvalReport evaluate(const TrainedModel& model, std::span<const Sample> samples) {
    const std::vector<int> predictions = model.predict(samples);
    return eval_from_predictions(predictions, samples, model.config().categories);
}

TrainOutcome run_training(const TrainConfig& config, const Dataset& data) {
    config.validate();
    if (config.model.categories != data.spec.categories)
        throw std::invalid_argument("training: config has " +
                                    std::to_string(config.model.categories) +
                                    " categories but dataset has " +
                                    std::to_string(data.spec.categories));
    if (config.model.feature_dim != data.spec.feature_dim)
        throw std::invalid_argument("training: config feature_dim " +
                                    std::to_string(config.model.feature_dim) +
                                    " does not match dataset " +
                                    std::to_string(data.spec.feature_dim));

    const Rng root(config.seed);
    auto model = [&]() -> std::shared_ptr<TrainedModel> {
        if (config.variant == Variant::softmax_baseline)
            return std::make_shared<TrainedModel>(config.variant,
                                                  BaselineModel(config.model, root.fork(0)));
        return std::make_shared<TrainedModel>(config.variant,
                                              Ord2SeqModel(config.model, root.fork(0)),
                                              config.effective_alpha());
    }();

    Adam optimizer(model->parameters(), AdamConfig{.lr = config.lr});
    Rng shuffle_rng = root.fork(1);

    TrainOutcome outcome;
    double best_mae = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_snapshot;
    std::vector<Tensor> params = model->parameters();

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const double loss = train_epoch(*model, optimizer, config, data.train, shuffle_rng, epoch);
        const EvalReport val = evaluate(*model, data.val);
        outcome.log.push_back({epoch, loss, val.accuracy, val.mae});
        if (val.mae < best_mae) {
            best_mae = val.mae;
            outcome.best_epoch = epoch;
            best_snapshot.clear();
            for (const auto& p : params)
                best_snapshot.emplace_back(p.values().begin(), p.values().end());
        }
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].values_mut();
        std::copy(best_snapshot[i].begin(), best_snapshot[i].end(), dst.begin());
    }

    outcome.test = evaluate(*model, data.test);
    outcome.model = std::move(model);
    return outcome;
}

}  // namespace ord2seq
