#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "ord2seq/checkpoint.hpp"
#include "ord2seq/databench.hpp"
#include "ord2seq/training.hpp"
#include "support/test_util.hpp"

using namespace ord2seq;

namespace {

// Naive reimplementation of the summed BCE objective, kept independent of the
// library path on purpose.
double scalar_loop_bce(const std::vector<std::vector<double>>& probs,
                       const MultiHotSequence& multihot, double eps) {
    double total = 0.0;
    for (std::size_t t = 0; t < probs.size(); ++t) {
        double step = 0.0;
        for (std::size_t i = 0; i < probs[t].size(); ++i) {
            double p = probs[t][i];
            if (p < eps) p = eps;
            if (p > 1.0 - eps) p = 1.0 - eps;
            if (multihot.steps[t][i])
                step += std::log(p);
            else
                step += std::log(1.0 - p);
        }
        total += -step / static_cast<double>(probs[t].size());
    }
    return total;
}

TrainConfig tiny_train_config(int categories, Variant variant = Variant::full) {
    TrainConfig cfg;
    cfg.model.categories = categories;
    cfg.model.feature_dim = 4;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.model.ffn_width = 24;
    cfg.model.enc_hidden = 16;
    cfg.model.enc_tokens = 2;
    cfg.alpha = 0.3;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.lr = 3e-3;
    cfg.seed = 7;
    cfg.variant = variant;
    return cfg;
}

SyntheticSpec tiny_data_spec(int categories) {
    SyntheticSpec spec;
    spec.categories = categories;
    spec.feature_dim = 4;
    spec.sigma = 0.0;
    spec.train_samples = 160;
    spec.val_samples = 60;
    spec.test_samples = 60;
    spec.seed = 13;
    return spec;
}

}  // namespace

TEST_CASE("sequence_bce analytic examples") {
    SUBCASE("perfect prediction is (near) zero loss") {
        const DichotomicTree tree(8);
        const MultiHotSequence truth = tree.encode_multihot(5);
        std::vector<std::vector<double>> probs;
        for (const auto& step : truth.steps) probs.emplace_back(step.begin(), step.end());
        const LossReport report = sequence_bce(probs, truth);
        CHECK(report.total >= 0.0);
        CHECK(report.total <= 3 * 1e-6);
        CHECK(report.per_step.size() == 3);
    }
    SUBCASE("n=2, d=1 coin flip") {
        const MultiHotSequence truth{{{1, 0}}};
        const LossReport report = sequence_bce({{0.5, 0.5}}, truth);
        CHECK(report.total == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("total is the sum of the per-step terms") {
        const DichotomicTree tree(5);
        const MultiHotSequence truth = tree.encode_multihot(2);
        Rng rng(3);
        std::vector<std::vector<double>> probs(3, std::vector<double>(5));
        for (auto& step : probs)
            for (auto& p : step) p = rng.uniform(0.01, 0.99);
        const LossReport report = sequence_bce(probs, truth);
        double total = 0.0;
        for (const double l : report.per_step) {
            CHECK(l >= 0.0);
            total += l;
        }
        CHECK(report.total == doctest::Approx(total).epsilon(1e-12));
    }
    SUBCASE("shape mismatch") {
        const MultiHotSequence truth{{{1, 0}}};
        CHECK_THROWS_AS(sequence_bce({{0.5, 0.5}, {0.5, 0.5}}, truth), std::invalid_argument);
        CHECK_THROWS_AS(sequence_bce({{0.5, 0.5, 0.5}}, truth), std::invalid_argument);
    }
}

TEST_CASE("sequence_bce matches the scalar-loop oracle on random instances") {
    Rng rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(15));
        const DichotomicTree tree(n);
        const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        const MultiHotSequence truth = tree.encode_multihot(c);
        std::vector<std::vector<double>> probs(truth.steps.size(),
                                               std::vector<double>(static_cast<std::size_t>(n)));
        for (auto& step : probs)
            for (auto& p : step) p = rng.uniform(0.0, 1.0);
        const LossReport report = sequence_bce(probs, truth);
        const double oracle = scalar_loop_bce(probs, truth, 1e-7);
        CHECK(std::fabs(report.total - oracle) < 1e-12);
    }
}

TEST_CASE("sequence_bce is permutation-equivariant in the category axis") {
    Rng rng(19);
    const std::size_t n = 6;
    const DichotomicTree tree(static_cast<int>(n));
    for (int trial = 0; trial < 100; ++trial) {
        const int c = static_cast<int>(rng.below(n));
        const MultiHotSequence truth = tree.encode_multihot(c);
        std::vector<std::vector<double>> probs(truth.steps.size(), std::vector<double>(n));
        for (auto& step : probs)
            for (auto& p : step) p = rng.uniform(0.0, 1.0);

        const std::vector<std::size_t> perm{3, 1, 5, 0, 4, 2};
        std::vector<std::vector<double>> probs_p(probs.size(), std::vector<double>(n));
        MultiHotSequence truth_p = truth;
        for (std::size_t t = 0; t < probs.size(); ++t)
            for (std::size_t i = 0; i < n; ++i) {
                probs_p[t][perm[i]] = probs[t][i];
                truth_p.steps[t][perm[i]] = truth.steps[t][i];
            }
        CHECK(sequence_bce(probs, truth).total ==
              doctest::Approx(sequence_bce(probs_p, truth_p).total).epsilon(1e-12));
    }
}

TEST_CASE("evaluate from predictions") {
    const auto make_samples = [](std::vector<int> labels) {
        std::vector<Sample> out;
        for (const int l : labels) out.push_back({{0.0}, l, 0.0});
        return out;
    };

    SUBCASE("exact predictions") {
        const auto samples = make_samples({0, 1, 2, 3, 2, 1});
        const std::vector<int> preds{0, 1, 2, 3, 2, 1};
        const EvalReport r = eval_from_predictions(preds, samples, 4);
        CHECK(r.accuracy == 1.0);
        CHECK(r.mae == 0.0);
        for (const auto& row : r.adjacency)
            if (row.total > 0) {
                CHECK(row.correct == 1.0);
                CHECK(row.adjacent == 0.0);
                CHECK(row.other == 0.0);
            }
    }
    SUBCASE("all off by one") {
        const auto samples = make_samples({0, 1, 2, 2, 1, 0});
        const std::vector<int> preds{1, 2, 3, 3, 2, 1};
        const EvalReport r = eval_from_predictions(preds, samples, 4);
        CHECK(r.accuracy == 0.0);
        CHECK(r.mae == 1.0);
    }
    SUBCASE("hand-computed 10-sample oracle") {
        const auto samples = make_samples({0, 0, 1, 1, 2, 2, 3, 3, 4, 4});
        const std::vector<int> preds{0, 1, 1, 3, 2, 2, 0, 3, 4, 2};
        const EvalReport r = eval_from_predictions(preds, samples, 5);
        CHECK(r.accuracy == doctest::Approx(0.6));
        CHECK(r.mae == doctest::Approx((0 + 1 + 0 + 2 + 0 + 0 + 3 + 0 + 0 + 2) / 10.0));
        CHECK(r.adjacency[0].correct == doctest::Approx(0.5));
        CHECK(r.adjacency[0].adjacent == doctest::Approx(0.5));
        CHECK(r.adjacency[1].correct == doctest::Approx(0.5));
        CHECK(r.adjacency[1].other == doctest::Approx(0.5));
        CHECK(r.adjacency[3].other == doctest::Approx(0.5));
        CHECK(r.adjacency[4].other == doctest::Approx(0.5));
        for (const auto& row : r.adjacency)
            CHECK(row.correct + row.adjacent + row.other == doctest::Approx(1.0));
    }
    SUBCASE("empty dataset is an error") {
        const std::vector<Sample> none;
        const std::vector<int> preds;
        CHECK_THROWS_AS(eval_from_predictions(preds, none, 4), std::invalid_argument);
    }
}

TEST_CASE("first-epoch loss equals the sequence_bce oracle under teacher forcing") {
    const TrainConfig cfg = [] {
        TrainConfig c = tiny_train_config(5);
        c.batch_size = 1000;  // single batch per epoch
        c.epochs = 1;
        return c;
    }();
    SyntheticSpec spec = tiny_data_spec(5);
    spec.train_samples = 24;
    const Dataset data = generate(spec);
    const TrainOutcome outcome = run_training(cfg, data);

    // Rebuild the initial model the way run_training does and evaluate the
    // loss formula sample by sample via the public decoder surface, with
    // masks taken from the ground-truth multi-hots.
    const Ord2SeqModel model(cfg.model, Rng(cfg.seed).fork(0));
    const DichotomicTree& tree = model.tree();
    double expected = 0.0;
    for (const Sample& s : data.train) {
        const Tensor f = Tensor::from({1, 4}, {s.features.begin(), s.features.end()});
        const Tensor enc = model.encode(f);
        const PathCode path = tree.encode_path(s.label);
        const Tensor queries = model.embed_target(shift_right(path));
        const Tensor stream = model.run_stack(queries, enc, 1);
        const MultiHotSequence truth = tree.encode_multihot(s.label);

        std::vector<std::vector<double>> probs;
        for (int t = 0; t < tree.depth(); ++t) {
            const Tensor logits =
                model.step_logits(stream, 1, static_cast<std::size_t>(tree.depth()),
                                  static_cast<std::size_t>(t));
            const std::vector<double> row(logits.values().begin(), logits.values().end());
            if (t == 0)
                probs.push_back(apply_mask(row, nullptr, cfg.alpha));
            else
                probs.push_back(
                    apply_mask(row, &truth.steps[static_cast<std::size_t>(t - 1)], cfg.alpha));
        }
        expected += sequence_bce(probs, truth, cfg.clamp_eps).total;
    }
    expected /= static_cast<double>(data.train.size());
    CHECK(outcome.log[0].loss == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("full variant at alpha=1 matches no-mask bitwise") {
    TrainConfig full_cfg = tiny_train_config(5, Variant::full);
    full_cfg.alpha = 1.0;
    TrainConfig nomask_cfg = tiny_train_config(5, Variant::no_mask);
    nomask_cfg.alpha = 0.3;  // ignored: the variant pins the mask to 1

    const Dataset data = generate(tiny_data_spec(5));
    const TrainOutcome a = run_training(full_cfg, data);
    const TrainOutcome b = run_training(nomask_cfg, data);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss == b.log[i].loss);
        CHECK(a.log[i].val_accuracy == b.log[i].val_accuracy);
        CHECK(a.log[i].val_mae == b.log[i].val_mae);
    }
    CHECK(a.test.accuracy == b.test.accuracy);
    CHECK(a.test.mae == b.test.mae);
}

TEST_CASE("training loss decreases on separable data") {
    TrainConfig cfg = tiny_train_config(4);
    cfg.epochs = 10;
    const Dataset data = generate(tiny_data_spec(4));
    const TrainOutcome outcome = run_training(cfg, data);
    REQUIRE(outcome.log.size() == 10);
    for (std::size_t i = 1; i < outcome.log.size(); ++i)
        CHECK(outcome.log[i].loss < outcome.log[i - 1].loss);
}

TEST_CASE("loss gradients match finite differences on a tiny model") {
    // n=4 and width 8 with one decoder layer, per the stated gradient suite.
    ModelConfig mc;
    mc.categories = 4;
    mc.feature_dim = 3;
    mc.width = 8;
    mc.heads = 2;
    mc.layers = 1;
    mc.ffn_width = 12;
    mc.enc_hidden = 8;
    mc.enc_tokens = 2;

    Rng rng(71);
    for (int instance = 0; instance < 3; ++instance) {
        const Ord2SeqModel model(mc, rng.fork(static_cast<std::uint64_t>(instance)));
        std::vector<double> feat(6);
        for (auto& x : feat) x = rng.uniform(-1.0, 1.0);
        const Tensor features = Tensor::from({2, 3}, feat);
        const std::vector<int> labels{static_cast<int>(rng.below(4)),
                                      static_cast<int>(rng.below(4))};

        const auto forward = [&]() {
            return sequence_batch_loss(model, features, labels, 0.3, 1e-7);
        };
        Tensor loss = forward();
        for (auto p : model.parameters()) p.zero_grad();
        loss.backward();

        for (auto p : model.parameters()) {
            const auto numeric =
                testutil::numeric_grad(p, [&forward]() { return forward().item(); });
            const double err = testutil::max_grad_error(p.grad(), numeric);
            CAPTURE(p.name());
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("nan loss aborts with diagnostics") {
    TrainConfig cfg = tiny_train_config(4);
    const Dataset data = generate(tiny_data_spec(4));
    TrainedModel model(cfg.variant, Ord2SeqModel(cfg.model, Rng(1)), cfg.alpha);

    // Poison one parameter so the forward pass goes non-finite.
    auto params = model.parameters();
    params.front().values_mut()[0] = std::numeric_limits<double>::quiet_NaN();

    Adam adam(model.parameters(), AdamConfig{.lr = cfg.lr});
    Rng shuffle(1);
    try {
        train_epoch(model, adam, cfg, data.train, shuffle, 1);
        FAIL("expected NanAbort");
    } catch (const NanAbort& abort) {
        CHECK(abort.diagnostics.at("error") == "non-finite training loss");
        CHECK(abort.diagnostics.contains("params"));
        bool saw_nonfinite = false;
        for (const auto& stat : abort.diagnostics.at("params"))
            if (stat.at("finite") == false) saw_nonfinite = true;
        CHECK(saw_nonfinite);
    }
}

TEST_CASE("one-shot and baseline variants train and predict in range") {
    const Dataset data = generate(tiny_data_spec(4));
    for (const Variant variant : {Variant::one_shot, Variant::softmax_baseline}) {
        CAPTURE(variant_name(variant));
        TrainConfig cfg = tiny_train_config(4, variant);
        cfg.epochs = 4;
        const TrainOutcome outcome =
            variant == Variant::softmax_baseline ? softmax_baseline(cfg, data)
                                                 : run_training(cfg, data);
        CHECK(outcome.test.accuracy >= 0.0);
        CHECK(outcome.test.accuracy <= 1.0);
        CHECK(outcome.test.mae >= 0.0);
        CHECK(outcome.test.mae <= 3.0);
        CHECK(outcome.log.size() == 4);
        for (const auto& row : outcome.test.adjacency)
            if (row.total > 0)
                CHECK(row.correct + row.adjacent + row.other == doctest::Approx(1.0));
    }
}

TEST_CASE("identical seeds give identical training trajectories") {
    const Dataset data = generate(tiny_data_spec(4));
    TrainConfig cfg = tiny_train_config(4);
    cfg.epochs = 2;
    const TrainOutcome a = run_training(cfg, data);
    const TrainOutcome b = run_training(cfg, data);
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.test.accuracy == b.test.accuracy);
    CHECK(a.test.mae == b.test.mae);

    const auto pa = a.model->parameters();
    const auto pb = b.model->parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(std::equal(pa[i].values().begin(), pa[i].values().end(), pb[i].values().begin()));
}

TEST_CASE("config and dataset disagreement is rejected") {
    const Dataset data = generate(tiny_data_spec(4));
    TrainConfig cfg = tiny_train_config(5);
    CHECK_THROWS_AS(run_training(cfg, data), std::invalid_argument);
    cfg = tiny_train_config(4);
    cfg.model.feature_dim = 9;
    CHECK_THROWS_AS(run_training(cfg, data), std::invalid_argument);
    cfg = tiny_train_config(4);
    cfg.alpha = 0.0;
    CHECK_THROWS_AS(run_training(cfg, data), std::invalid_argument);
}
