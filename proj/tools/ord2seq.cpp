#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "ord2seq/checkpoint.hpp"
#include "ord2seq/codec.hpp"
#include "ord2seq/databench.hpp"
#include "ord2seq/manifest.hpp"
#include "ord2seq/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ord2seq;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNanAbort = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    std::uint64_t elapsed_ms() const {
        return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                              std::chrono::steady_clock::now() - start_)
                                              .count());
    }

private:
    std::chrono::steady_clock::time_point start_;
};

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::size_t worker_count(std::size_t jobs) {
    std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("ORD2SEQ_THREADS")) {
        const long parsed = std::strtol(env, nullptr, 10);
        if (parsed >= 1) cap = static_cast<std::size_t>(parsed);
    }
    return std::min(cap, std::max<std::size_t>(1, jobs));
}

// Runs the callables over a worker pool; each job owns its slot, aggregation
// happens after the join. Exceptions are rethrown in job order.
void run_jobs(const std::vector<std::function<void()>>& jobs) {
    const std::size_t workers = worker_count(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct ArchFlags {
    int width = 64;
    int heads = 4;
    int layers = 2;
    int ffn_width = 128;
    int enc_hidden = 128;
    int enc_tokens = 4;
    bool shared_head = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--width", width, "Decoder model width");
        cmd->add_option("--heads", heads, "Attention heads");
        cmd->add_option("--layers", layers, "Decoder layers");
        cmd->add_option("--ffn-width", ffn_width, "Feed-forward width");
        cmd->add_option("--enc-hidden", enc_hidden, "Encoder MLP hidden width");
        cmd->add_option("--enc-tokens", enc_tokens, "Encoder feature tokens");
        cmd->add_flag("--shared-head", shared_head, "Share one output head across steps");
    }

    json to_json() const {
        return json{{"width", width},           {"heads", heads},
                    {"layers", layers},         {"ffn_width", ffn_width},
                    {"enc_hidden", enc_hidden}, {"enc_tokens", enc_tokens},
                    {"shared_head", shared_head}};
    }

    static ArchFlags from_json(const json& doc) {
        ArchFlags arch;
        arch.width = doc.at("width").get<int>();
        arch.heads = doc.at("heads").get<int>();
        arch.layers = doc.at("layers").get<int>();
        arch.ffn_width = doc.at("ffn_width").get<int>();
        arch.enc_hidden = doc.at("enc_hidden").get<int>();
        arch.enc_tokens = doc.at("enc_tokens").get<int>();
        arch.shared_head = doc.at("shared_head").get<bool>();
        return arch;
    }
};

TrainConfig make_train_config(const Dataset& data, const ArchFlags& arch, double alpha,
                              const std::string& variant, int epochs, int batch_size, double lr,
                              std::uint64_t seed, std::optional<int> categories_flag) {
    if (categories_flag && *categories_flag != data.spec.categories)
        throw UsageError("--categories " + std::to_string(*categories_flag) +
                         " does not match dataset with " + std::to_string(data.spec.categories) +
                         " categories");
    TrainConfig cfg;
    cfg.model.categories = data.spec.categories;
    cfg.model.feature_dim = data.spec.feature_dim;
    cfg.model.width = arch.width;
    cfg.model.heads = arch.heads;
    cfg.model.layers = arch.layers;
    cfg.model.ffn_width = arch.ffn_width;
    cfg.model.enc_hidden = arch.enc_hidden;
    cfg.model.enc_tokens = arch.enc_tokens;
    cfg.model.shared_head = arch.shared_head;
    cfg.alpha = alpha;
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.lr = lr;
    cfg.seed = seed;
    try {
        cfg.variant = variant_from_name(variant);
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

json metrics_json(const TrainConfig& cfg, const TrainOutcome& outcome) {
    return json{{"variant", variant_name(cfg.variant)},
                {"seed", cfg.seed},
                {"alpha", cfg.effective_alpha()},
                {"epochs", cfg.epochs},
                {"best_epoch", outcome.best_epoch},
                {"test", outcome.test.to_json()}};
}

void write_epoch_log(const fs::path& path, const TrainOutcome& outcome) {
    std::ostringstream lines;
    for (const auto& e : outcome.log) {
        lines << json{{"epoch", e.epoch},
                      {"loss", e.loss},
                      {"val_accuracy", e.val_accuracy},
                      {"val_mae", e.val_mae}}
                     .dump()
              << "\n";
    }
    write_text_atomic(path, lines.str());
}

// Trains one configuration and writes the standard artifact set.
TrainOutcome run_train_command(const TrainConfig& cfg, const fs::path& data_path,
                               const fs::path& out_dir, const Stopwatch& watch) {
    const Dataset data = load_dataset(data_path);
    fs::create_directories(out_dir);

    TrainOutcome outcome;
    try {
        outcome = run_training(cfg, data);
    } catch (const NanAbort& abort) {
        const fs::path diag_path = out_dir / "nan_diagnostics.json";
        write_json_atomic(diag_path, abort.diagnostics);
        std::cerr << "ord2seq: training aborted on non-finite loss; diagnostics at "
                  << diag_path.string() << "\n";
        std::exit(kExitNanAbort);
    }

    save_checkpoint(out_dir / "checkpoint.json", *outcome.model, cfg);
    write_json_atomic(out_dir / "metrics.json", metrics_json(cfg, outcome));
    write_epoch_log(out_dir / "log.jsonl", outcome);

    RunManifest manifest;
    manifest.command = "train";
    manifest.config = {{"data", fs::absolute(data_path).string()},
                       {"out", fs::absolute(out_dir).string()},
                       {"train", cfg.to_json()}};
    manifest.artifacts = {"checkpoint.json", "metrics.json", "log.jsonl"};
    manifest.duration_ms = watch.elapsed_ms();
    write_manifest(out_dir / "manifest.json", manifest);
    return outcome;
}

int cmd_gen_data(const SyntheticSpec& spec, const std::string& name, int index_base,
                 const fs::path& out_dir) {
    const Stopwatch watch;
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const Dataset data = generate(spec);
    const fs::path sidecar = save_dataset(data, out_dir, name, index_base);

    RunManifest manifest;
    manifest.command = "gen-data";
    manifest.config = {{"spec", spec.to_json()},
                       {"name", name},
                       {"index_base", index_base},
                       {"out", fs::absolute(out_dir).string()}};
    manifest.artifacts = {sidecar.filename().string(), name + ".train.csv", name + ".val.csv",
                          name + ".test.csv"};
    manifest.duration_ms = watch.elapsed_ms();
    write_manifest(out_dir / (name + ".manifest.json"), manifest);
    std::cout << sidecar.string() << "\n";
    return 0;
}

int cmd_decode(const fs::path& ckpt_path, const fs::path& data_path, const std::string& split,
               const fs::path& out_dir, const std::string& trace_name) {
    const Stopwatch watch;
    TrainConfig cfg;
    const auto model = load_checkpoint(ckpt_path, &cfg);
    const Dataset data = load_dataset(data_path);
    if (data.spec.categories != cfg.model.categories)
        throw UsageError("checkpoint expects " + std::to_string(cfg.model.categories) +
                         " categories, dataset has " + std::to_string(data.spec.categories));

    const std::vector<Sample>* samples = nullptr;
    if (split == "train")
        samples = &data.train;
    else if (split == "val")
        samples = &data.val;
    else if (split == "test")
        samples = &data.test;
    else
        throw UsageError("unknown split '" + split + "'");

    fs::create_directories(out_dir);
    std::vector<std::string> artifacts = {"metrics.json"};

    if (!trace_name.empty()) {
        if (model->variant() != Variant::full && model->variant() != Variant::no_mask)
            throw UsageError("--trace needs a sequence-variant checkpoint");
        const Ord2SeqModel& seq = model->sequence_model();
        std::vector<double> flat;
        for (const Sample& s : *samples)
            flat.insert(flat.end(), s.features.begin(), s.features.end());
        const Tensor features = Tensor::from(
            {samples->size(), static_cast<std::size_t>(cfg.model.feature_dim)}, std::move(flat));
        const auto results = greedy_decode_batch(seq, features, model->alpha(), true);

        std::ostringstream lines;
        for (std::size_t i = 0; i < results.size(); ++i) {
            for (const StepTrace& st : results[i].steps) {
                lines << json{{"sample", i},
                              {"t", st.step},
                              {"y_out", st.logits},
                              {"mask", st.mask},
                              {"y_prob", st.probs},
                              {"p_left", st.p_left},
                              {"p_right", st.p_right},
                              {"bit", st.bit}}
                             .dump()
                      << "\n";
            }
        }
        write_text_atomic(out_dir / trace_name, lines.str());
        artifacts.push_back(trace_name);
    }

    const EvalReport report = evaluate(*model, *samples);
    write_json_atomic(out_dir / "metrics.json", json{{"variant", variant_name(model->variant())},
                                                     {"split", split},
                                                     {"metrics", report.to_json()}});

    RunManifest manifest;
    manifest.command = "decode";
    manifest.config = {{"checkpoint", fs::absolute(ckpt_path).string()},
                       {"data", fs::absolute(data_path).string()},
                       {"split", split},
                       {"trace", trace_name},
                       {"out", fs::absolute(out_dir).string()}};
    manifest.artifacts = artifacts;
    manifest.duration_ms = watch.elapsed_ms();
    write_manifest(out_dir / "manifest.json", manifest);

    std::cout << "accuracy " << fmt_short(report.accuracy) << " mae " << fmt_short(report.mae)
              << "\n";
    return 0;
}

int cmd_sweep_alpha(std::vector<double> grid, const std::vector<std::uint64_t>& seeds,
                    const fs::path& data_path, const ArchFlags& arch, int epochs, int batch_size,
                    double lr, const std::string& variant, const fs::path& out_dir) {
    const Stopwatch watch;
    if (grid.empty()) throw UsageError("empty alpha grid");
    if (seeds.empty()) throw UsageError("no seeds given");
    json substitutions = json::array();
    for (double& a : grid) {
        if (a < 0.0 || a > 1.0) throw UsageError("alpha " + fmt_short(a) + " outside [0, 1]");
        if (a == 0.0) {
            // The literal loss is ill-defined at alpha=0; run clamped instead.
            substitutions.push_back({{"requested", 0.0}, {"used", 1e-6}});
            a = 1e-6;
        }
    }

    const Dataset data = load_dataset(data_path);
    struct Row {
        double alpha;
        std::uint64_t seed;
        double accuracy;
        double mae;
    };
    std::vector<Row> rows(grid.size() * seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            jobs.push_back([&, gi, si]() {
                const TrainConfig cfg = make_train_config(data, arch, grid[gi], variant, epochs,
                                                          batch_size, lr, seeds[si], std::nullopt);
                const TrainOutcome outcome = run_training(cfg, data);
                rows[gi * seeds.size() + si] =
                    Row{grid[gi], seeds[si], outcome.test.accuracy, outcome.test.mae};
            });
        }
    }
    run_jobs(jobs);

    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return a.alpha != b.alpha ? a.alpha < b.alpha : a.seed < b.seed;
    });
    std::ostringstream csv;
    csv << "alpha,seed,accuracy,mae\n";
    for (const Row& r : rows)
        csv << fmt_short(r.alpha) << "," << r.seed << "," << fmt_double(r.accuracy) << ","
            << fmt_double(r.mae) << "\n";
    fs::create_directories(out_dir);
    write_text_atomic(out_dir / "sweep.csv", csv.str());

    RunManifest manifest;
    manifest.command = "sweep-alpha";
    manifest.config = {{"data", fs::absolute(data_path).string()},
                       {"out", fs::absolute(out_dir).string()},
                       {"alphas", grid},
                       {"seeds", seeds},
                       {"variant", variant},
                       {"epochs", epochs},
                       {"batch_size", batch_size},
                       {"lr", lr},
                       {"arch", arch.to_json()}};
    manifest.artifacts = {"sweep.csv"};
    manifest.duration_ms = watch.elapsed_ms();
    manifest.notes = {{"alpha_substitutions", substitutions}};
    write_manifest(out_dir / "manifest.json", manifest);
    return 0;
}

int cmd_ablation(const std::vector<std::uint64_t>& seeds, const fs::path& data_path,
                 const ArchFlags& arch, double alpha, int epochs, int batch_size, double lr,
                 const fs::path& out_dir) {
    const Stopwatch watch;
    if (seeds.size() < 3) throw UsageError("ablation needs at least 3 seeds");
    const Dataset data = load_dataset(data_path);
    const std::vector<std::string> variants = {"softmax-baseline", "one-shot", "no-mask", "full"};

    struct RunResult {
        bool ok = false;
        std::string error;
        double accuracy = 0.0;
        double mae = 0.0;
        json adjacency;
    };
    std::vector<RunResult> results(variants.size() * seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            jobs.push_back([&, vi, si]() {
                RunResult& slot = results[vi * seeds.size() + si];
                try {
                    const TrainConfig cfg = make_train_config(
                        data, arch, alpha, variants[vi], epochs, batch_size, lr, seeds[si],
                        std::nullopt);
                    const TrainOutcome outcome = run_training(cfg, data);
                    slot.ok = true;
                    slot.accuracy = outcome.test.accuracy;
                    slot.mae = outcome.test.mae;
                    slot.adjacency = outcome.test.to_json().at("adjacency");
                } catch (const NanAbort&) {
                    slot.error = "non-finite loss";
                } catch (const std::exception& e) {
                    slot.error = e.what();
                }
            });
        }
    }
    run_jobs(jobs);

    json out_variants = json::array();
    std::vector<std::string> completed, failed;
    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
        json runs = json::array();
        std::vector<double> accs, maes;
        bool variant_ok = true;
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            const RunResult& r = results[vi * seeds.size() + si];
            if (!r.ok) {
                variant_ok = false;
                runs.push_back({{"seed", seeds[si]}, {"error", r.error}});
                continue;
            }
            accs.push_back(r.accuracy);
            maes.push_back(r.mae);
            runs.push_back({{"seed", seeds[si]},
                            {"accuracy", r.accuracy},
                            {"mae", r.mae},
                            {"adjacency", r.adjacency}});
        }
        json entry = {{"name", variants[vi]}, {"runs", runs}};
        if (variant_ok) {
            const auto mean = [](const std::vector<double>& v) {
                double s = 0.0;
                for (const double x : v) s += x;
                return s / static_cast<double>(v.size());
            };
            const auto stddev = [&mean](const std::vector<double>& v) {
                const double m = mean(v);
                double s = 0.0;
                for (const double x : v) s += (x - m) * (x - m);
                return std::sqrt(s / static_cast<double>(v.size() - 1));
            };
            entry["mean_accuracy"] = mean(accs);
            entry["stddev_accuracy"] = stddev(accs);
            entry["mean_mae"] = mean(maes);
            entry["stddev_mae"] = stddev(maes);
            completed.push_back(variants[vi]);
        } else {
            failed.push_back(variants[vi]);
        }
        out_variants.push_back(std::move(entry));
    }

    json doc = {
        {"alpha", alpha}, {"epochs", epochs}, {"seeds", seeds}, {"variants", out_variants}};
    if (!failed.empty())
        doc["error"] = {{"message", "some variant runs failed"},
                        {"completed", completed},
                        {"failed", failed}};
    fs::create_directories(out_dir);
    write_json_atomic(out_dir / "ablation.json", doc);

    RunManifest manifest;
    manifest.command = "ablation";
    manifest.config = {{"data", fs::absolute(data_path).string()},
                       {"out", fs::absolute(out_dir).string()},
                       {"alpha", alpha},
                       {"seeds", seeds},
                       {"epochs", epochs},
                       {"batch_size", batch_size},
                       {"lr", lr},
                       {"arch", arch.to_json()}};
    manifest.artifacts = {"ablation.json"};
    manifest.duration_ms = watch.elapsed_ms();
    write_manifest(out_dir / "manifest.json", manifest);

    if (!failed.empty()) {
        std::string list;
        for (const auto& name : completed) list += (list.empty() ? "" : ", ") + name;
        std::cerr << "ord2seq: partial ablation result; completed variants: "
                  << (list.empty() ? "(none)" : list) << "\n";
        return 1;
    }
    return 0;
}

int cmd_tree(int categories, const std::string& out_file) {
    json doc;
    try {
        doc = DichotomicTree(categories).to_json();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (out_file.empty())
        std::cout << doc.dump(2) << "\n";
    else
        write_json_atomic(out_file, doc);
    return 0;
}

int replay_dispatch(const RunManifest& manifest, const fs::path& out_dir) {
    const json& cfg = manifest.config;
    if (manifest.command == "train") {
        const Stopwatch watch;
        const TrainConfig tc = TrainConfig::from_json(cfg.at("train"));
        run_train_command(tc, cfg.at("data").get<std::string>(), out_dir, watch);
        return 0;
    }
    if (manifest.command == "gen-data") {
        return cmd_gen_data(SyntheticSpec::from_json(cfg.at("spec")),
                            cfg.at("name").get<std::string>(), cfg.at("index_base").get<int>(),
                            out_dir);
    }
    if (manifest.command == "decode") {
        return cmd_decode(cfg.at("checkpoint").get<std::string>(),
                          cfg.at("data").get<std::string>(), cfg.at("split").get<std::string>(),
                          out_dir, cfg.at("trace").get<std::string>());
    }
    if (manifest.command == "sweep-alpha") {
        return cmd_sweep_alpha(cfg.at("alphas").get<std::vector<double>>(),
                               cfg.at("seeds").get<std::vector<std::uint64_t>>(),
                               cfg.at("data").get<std::string>(),
                               ArchFlags::from_json(cfg.at("arch")), cfg.at("epochs").get<int>(),
                               cfg.at("batch_size").get<int>(), cfg.at("lr").get<double>(),
                               cfg.at("variant").get<std::string>(), out_dir);
    }
    if (manifest.command == "ablation") {
        return cmd_ablation(cfg.at("seeds").get<std::vector<std::uint64_t>>(),
                            cfg.at("data").get<std::string>(),
                            ArchFlags::from_json(cfg.at("arch")), cfg.at("alpha").get<double>(),
                            cfg.at("epochs").get<int>(), cfg.at("batch_size").get<int>(),
                            cfg.at("lr").get<double>(), out_dir);
    }
    throw UsageError("cannot replay command '" + manifest.command + "'");
}

int cmd_replay(const fs::path& manifest_path, const fs::path& out_dir, bool verify) {
    const RunManifest manifest = read_manifest(manifest_path);
    const int rc = replay_dispatch(manifest, out_dir);
    if (rc != 0 || !verify) return rc;

    const fs::path original_dir = manifest_path.parent_path();
    const auto read_all = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw std::runtime_error("replay: cannot read " + p.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    for (const std::string& artifact : manifest.artifacts) {
        if (read_all(original_dir / artifact) != read_all(out_dir / artifact)) {
            std::cerr << "ord2seq: replay mismatch on " << artifact << "\n";
            return 1;
        }
    }
    std::cout << "replay verified: " << manifest.artifacts.size() << " artifacts identical\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ordinal regression as binary label sequence prediction"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic ordinal dataset");
    SyntheticSpec spec;
    std::string gen_name = "data";
    std::string gen_imbalance = "uniform";
    int gen_index_base = 0;
    std::string gen_out = ".";
    gen->add_option("--categories", spec.categories, "Number of ordinal categories");
    gen->add_option("--features", spec.feature_dim, "Feature dimension");
    gen->add_option("--sigma", spec.sigma, "Latent noise level");
    gen->add_option("--train", spec.train_samples, "Training samples");
    gen->add_option("--val", spec.val_samples, "Validation samples");
    gen->add_option("--test", spec.test_samples, "Test samples");
    gen->add_option("--imbalance", gen_imbalance, "Class prior profile: uniform|geometric");
    gen->add_option("--rho", spec.rho, "Geometric prior ratio");
    gen->add_option("--seed", spec.seed, "Generator seed");
    gen->add_option("--name", gen_name, "Dataset base name");
    gen->add_option("--index-base", gen_index_base, "Label index base in the CSV files")
        ->check(CLI::IsMember({0, 1}));
    gen->add_option("--out", gen_out, "Output directory");

    auto* train = app.add_subcommand("train", "Train one model variant");
    ArchFlags train_arch;
    std::optional<int> train_categories;
    double train_alpha = 0.3;
    std::string train_variant = "full";
    int train_epochs = 50;
    int train_batch = 32;
    double train_lr = 1e-4;
    std::uint64_t train_seed = 1;
    std::string train_data, train_out;
    train->add_option("--categories", train_categories,
                      "Expected category count (checked against the dataset)");
    train->add_option("--alpha", train_alpha, "Mask value for eliminated categories");
    train->add_option("--variant", train_variant, "full|no-mask|one-shot|softmax-baseline");
    train->add_option("--epochs", train_epochs, "Epoch budget");
    train->add_option("--batch-size", train_batch, "Mini-batch size");
    train->add_option("--lr", train_lr, "Adam learning rate");
    train->add_option("--seed", train_seed, "Run seed");
    train->add_option("--data", train_data, "Dataset spec sidecar (.spec.json)")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train_arch.attach(train);

    auto* decode = app.add_subcommand("decode", "Run inference from a checkpoint");
    std::string decode_ckpt, decode_data, decode_out;
    std::string decode_split = "test";
    std::string decode_trace;
    decode->add_option("--ckpt", decode_ckpt, "Checkpoint file")->required();
    decode->add_option("--data", decode_data, "Dataset spec sidecar")->required();
    decode->add_option("--split", decode_split, "train|val|test");
    decode->add_option("--trace", decode_trace, "Write per-step JSONL records to this file");
    decode->add_option("--out", decode_out, "Output directory")->required();

    auto* sweep = app.add_subcommand("sweep-alpha", "Accuracy/MAE across a mask-value grid");
    ArchFlags sweep_arch;
    std::vector<double> sweep_alphas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<std::uint64_t> sweep_seeds{1, 2, 3};
    std::string sweep_data, sweep_out;
    std::string sweep_variant = "full";
    int sweep_epochs = 30;
    int sweep_batch = 32;
    double sweep_lr = 1e-4;
    sweep->add_option("--alphas", sweep_alphas, "Alpha grid")->delimiter(',');
    sweep->add_option("--seeds", sweep_seeds, "Seeds, one run per (alpha, seed)")->delimiter(',');
    sweep->add_option("--epochs", sweep_epochs, "Epoch budget per run");
    sweep->add_option("--batch-size", sweep_batch, "Mini-batch size");
    sweep->add_option("--lr", sweep_lr, "Adam learning rate");
    sweep->add_option("--variant", sweep_variant, "Variant to sweep");
    sweep->add_option("--data", sweep_data, "Dataset spec sidecar")->required();
    sweep->add_option("--out", sweep_out, "Output directory")->required();
    sweep_arch.attach(sweep);

    auto* ablation = app.add_subcommand("ablation", "Compare all four variants over seeds");
    ArchFlags ablation_arch;
    std::vector<std::uint64_t> ablation_seeds{1, 2, 3};
    std::string ablation_data, ablation_out;
    double ablation_alpha = 0.3;
    int ablation_epochs = 30;
    int ablation_batch = 32;
    double ablation_lr = 1e-4;
    ablation->add_option("--seeds", ablation_seeds, "Seeds (need at least 3)")->delimiter(',');
    ablation->add_option("--alpha", ablation_alpha, "Mask value for the full variant");
    ablation->add_option("--epochs", ablation_epochs, "Epoch budget per run");
    ablation->add_option("--batch-size", ablation_batch, "Mini-batch size");
    ablation->add_option("--lr", ablation_lr, "Adam learning rate");
    ablation->add_option("--data", ablation_data, "Dataset spec sidecar")->required();
    ablation->add_option("--out", ablation_out, "Output directory")->required();
    ablation_arch.attach(ablation);

    auto* tree = app.add_subcommand("tree", "Print the dichotomic tree as JSON");
    int tree_categories = 8;
    std::string tree_out;
    tree->add_option("--categories", tree_categories, "Number of ordinal categories");
    tree->add_option("--out", tree_out, "Write to file instead of stdout");

    auto* replay = app.add_subcommand("replay", "Re-run a recorded manifest");
    std::string replay_manifest, replay_out;
    bool replay_verify = false;
    replay->add_option("--manifest", replay_manifest, "Manifest file")->required();
    replay->add_option("--out", replay_out, "Output directory for the re-run")->required();
    replay->add_flag("--verify", replay_verify, "Compare artifacts byte-for-byte");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            spec.profile = imbalance_from_name(gen_imbalance);
            return cmd_gen_data(spec, gen_name, gen_index_base, gen_out);
        }
        if (train->parsed()) {
            const Stopwatch watch;
            const Dataset data = load_dataset(train_data);
            const TrainConfig cfg =
                make_train_config(data, train_arch, train_alpha, train_variant, train_epochs,
                                  train_batch, train_lr, train_seed, train_categories);
            const TrainOutcome outcome = run_train_command(cfg, train_data, train_out, watch);
            std::cout << "test accuracy " << fmt_short(outcome.test.accuracy) << " mae "
                      << fmt_short(outcome.test.mae) << " (best epoch " << outcome.best_epoch
                      << ")\n";
            return 0;
        }
        if (decode->parsed())
            return cmd_decode(decode_ckpt, decode_data, decode_split, decode_out, decode_trace);
        if (sweep->parsed())
            return cmd_sweep_alpha(sweep_alphas, sweep_seeds, sweep_data, sweep_arch, sweep_epochs,
                                   sweep_batch, sweep_lr, sweep_variant, sweep_out);
        if (ablation->parsed())
            return cmd_ablation(ablation_seeds, ablation_data, ablation_arch, ablation_alpha,
                                ablation_epochs, ablation_batch, ablation_lr, ablation_out);
        if (tree->parsed()) return cmd_tree(tree_categories, tree_out);
        if (replay->parsed()) return cmd_replay(replay_manifest, replay_out, replay_verify);
    } catch (const UsageError& e) {
        std::cerr << "ord2seq: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "ord2seq: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "ord2seq: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
