#include "ord2seq/databench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ord2seq/rng.hpp"
#include "ord2seq/training.hpp"

namespace ord2seq {

namespace {

constexpr std::size_t kCalibrationDraws = 200000;

double normal_cdf(double u) { return 0.5 * std::erfc(-u * 0.70710678118654752440); }

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<double> draw_features(Rng& rng, int feature_dim) {
    std::vector<double> x(static_cast<std::size_t>(feature_dim));
    for (auto& xi : x) xi = rng.uniform(-1.0, 1.0);
    return x;
}

double project(const std::vector<double>& weights, const std::vector<double>& features) {
    double z = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) z += weights[i] * features[i];
    return z;
}

std::vector<Sample> draw_split(Rng rng, const SyntheticSpec& spec,
                               const std::vector<double>& weights,
                               const std::vector<double>& thresholds, std::size_t count) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Sample s;
        s.features = draw_features(rng, spec.feature_dim);
        s.latent = project(weights, s.features);
        const double noisy = s.latent + spec.sigma * rng.normal();
        s.label = bucket_of(noisy, thresholds);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

std::string imbalance_name(ImbalanceProfile profile) {
    return profile == ImbalanceProfile::uniform ? "uniform" : "geometric";
}

ImbalanceProfile imbalance_from_name(const std::string& name) {
    if (name == "uniform") return ImbalanceProfile::uniform;
    if (name == "geometric") return ImbalanceProfile::geometric;
    throw std::invalid_argument("databench: unknown imbalance profile '" + name + "'");
}

void SyntheticSpec::validate() const {
    if (categories < 2)
        throw std::invalid_argument("databench: invalid category count " +
                                    std::to_string(categories));
    if (feature_dim < 1) throw std::invalid_argument("databench: feature_dim must be positive");
    if (sigma < 0.0) throw std::invalid_argument("databench: sigma must be non-negative");
    if (!(rho > 0.0 && rho <= 1.0))
        throw std::invalid_argument("databench: rho " + std::to_string(rho) + " outside (0, 1]");
    if (train_samples == 0 || val_samples == 0 || test_samples == 0)
        throw std::invalid_argument("databench: all splits need at least one sample");
}

nlohmann::json SyntheticSpec::to_json() const {
    return nlohmann::json{
        {"categories", categories},
        {"feature_dim", feature_dim},
        {"sigma", sigma},
        {"train_samples", train_samples},
        {"val_samples", val_samples},
        {"test_samples", test_samples},
        {"imbalance", imbalance_name(profile)},
        {"rho", rho},
        {"seed", seed},
    };
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& doc) {
    SyntheticSpec spec;
    spec.categories = doc.at("categories").get<int>();
    spec.feature_dim = doc.at("feature_dim").get<int>();
    spec.sigma = doc.at("sigma").get<double>();
    spec.train_samples = doc.at("train_samples").get<std::size_t>();
    spec.val_samples = doc.at("val_samples").get<std::size_t>();
    spec.test_samples = doc.at("test_samples").get<std::size_t>();
    spec.profile = imbalance_from_name(doc.at("imbalance").get<std::string>());
    spec.rho = doc.at("rho").get<double>();
    spec.seed = doc.at("seed").get<std::uint64_t>();
    spec.validate();
    return spec;
}

std::vector<double> target_priors(const SyntheticSpec& spec) {
    const auto n = static_cast<std::size_t>(spec.categories);
    std::vector<double> priors(n);
    if (spec.profile == ImbalanceProfile::uniform) {
        std::fill(priors.begin(), priors.end(), 1.0 / static_cast<double>(n));
        return priors;
    }
    double mass = 1.0, total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        priors[k] = mass;
        total += mass;
        mass *= spec.rho;
    }
    for (auto& p : priors) p /= total;
    return priors;
}

int bucket_of(double value, const std::vector<double>& thresholds) {
    const auto it = std::upper_bound(thresholds.begin(), thresholds.end(), value);
    return static_cast<int>(it - thresholds.begin());
}

Dataset generate(const SyntheticSpec& spec) {
    spec.validate();
    Dataset data;
    data.spec = spec;

    const Rng root(spec.seed);
    Rng wrng = root.fork(0);
    data.weights.resize(static_cast<std::size_t>(spec.feature_dim));
    double norm = 0.0;
    for (auto& w : data.weights) {
        w = wrng.normal();
        norm += w * w;
    }
    norm = std::sqrt(norm);
    for (auto& w : data.weights) w /= norm;

    // Thresholds at empirical quantiles of the noisy latent so the class
    // priors hit the imbalance profile.
    Rng crng = root.fork(1);
    std::vector<double> calib(kCalibrationDraws);
    for (auto& v : calib) {
        const auto x = draw_features(crng, spec.feature_dim);
        v = project(data.weights, x) + spec.sigma * crng.normal();
    }
    std::sort(calib.begin(), calib.end());
    const std::vector<double> priors = target_priors(spec);
    double cumulative = 0.0;
    for (std::size_t k = 0; k + 1 < priors.size(); ++k) {
        cumulative += priors[k];
        auto idx = static_cast<std::size_t>(cumulative * static_cast<double>(kCalibrationDraws));
        idx = std::min(idx, kCalibrationDraws - 1);
        data.thresholds.push_back(calib[idx]);
    }
    for (std::size_t k = 0; k + 1 < data.thresholds.size(); ++k)
        if (!(data.thresholds[k] < data.thresholds[k + 1]))
            throw std::invalid_argument("databench: class " + std::to_string(k + 1) +
                                        " would be empty under the requested priors");

    data.train = draw_split(root.fork(2), spec, data.weights, data.thresholds, spec.train_samples);
    data.val = draw_split(root.fork(3), spec, data.weights, data.thresholds, spec.val_samples);
    data.test = draw_split(root.fork(4), spec, data.weights, data.thresholds, spec.test_samples);
    return data;
}

int bayes_predict(double latent, double sigma, const std::vector<double>& thresholds) {
    if (sigma == 0.0) return bucket_of(latent, thresholds);
    const auto n = thresholds.size() + 1;
    int best = 0;
    double best_p = -1.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double upper = k == n - 1 ? 1.0 : normal_cdf((thresholds[k] - latent) / sigma);
        const double lower = k == 0 ? 0.0 : normal_cdf((thresholds[k - 1] - latent) / sigma);
        const double p = upper - lower;
        if (p > best_p) {
            best_p = p;
            best = static_cast<int>(k);
        }
    }
    return best;
}

OracleReport bayes_oracle(const Dataset& data, std::span<const Sample> samples) {
    if (samples.empty()) throw std::invalid_argument("databench: empty split");
    OracleReport report;
    for (const Sample& s : samples) {
        const int pred = bayes_predict(s.latent, data.spec.sigma, data.thresholds);
        report.accuracy += pred == s.label ? 1.0 : 0.0;
        report.mae += std::abs(pred - s.label);
    }
    report.accuracy /= static_cast<double>(samples.size());
    report.mae /= static_cast<double>(samples.size());
    return report;
}

double calibrate_sigma(SyntheticSpec probe, double target_accuracy, double tolerance) {
    probe.train_samples = 20000;
    probe.val_samples = 1;
    probe.test_samples = 1;
    const auto oracle_at = [&probe](double sigma) {
        probe.sigma = sigma;
        const Dataset d = generate(probe);
        return bayes_oracle(d, d.train).accuracy;
    };
    double lo = 1e-4, hi = 1e-2;
    while (oracle_at(hi) > target_accuracy) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e4)
            throw std::runtime_error("databench: cannot reach target oracle accuracy");
    }
    for (int iter = 0; iter < 60; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double acc = oracle_at(mid);
        if (std::abs(acc - target_accuracy) <= tolerance) return mid;
        (acc > target_accuracy ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

std::filesystem::path save_dataset(const Dataset& data, const std::filesystem::path& dir,
                                   const std::string& name, int index_base) {
    std::filesystem::create_directories(dir);
    const auto write_csv = [&](const std::string& split, std::span<const Sample> samples) {
        const std::filesystem::path path = dir / (name + "." + split + ".csv");
        std::ofstream out(path);
        if (!out) throw std::runtime_error("databench: cannot write " + path.string());
        for (int j = 0; j < data.spec.feature_dim; ++j) out << "f" << j << ",";
        out << "label\n";
        for (const Sample& s : samples) {
            for (const double f : s.features) out << format_double(f) << ",";
            out << (s.label + index_base) << "\n";
        }
        return path.filename().string();
    };

    nlohmann::json sidecar;
    sidecar["format"] = "ord2seq-dataset-v1";
    sidecar["spec"] = data.spec.to_json();
    sidecar["weights"] = data.weights;
    sidecar["thresholds"] = data.thresholds;
    sidecar["index_base"] = index_base;
    sidecar["files"] = nlohmann::json{{"train", write_csv("train", data.train)},
                                      {"val", write_csv("val", data.val)},
                                      {"test", write_csv("test", data.test)}};

    const std::filesystem::path spec_path = dir / (name + ".spec.json");
    std::ofstream out(spec_path);
    out << sidecar.dump(2) << "\n";
    return spec_path;
}

namespace {

std::vector<Sample> read_csv(const std::filesystem::path& path, const Dataset& data,
                             int index_base) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("databench: cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("databench: empty csv " + path.string());
    std::vector<Sample> samples;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Sample s;
        std::stringstream ss(line);
        std::string cell;
        for (int j = 0; j < data.spec.feature_dim; ++j) {
            if (!std::getline(ss, cell, ','))
                throw std::runtime_error("databench: short row in " + path.string());
            s.features.push_back(std::stod(cell));
        }
        if (!std::getline(ss, cell, ','))
            throw std::runtime_error("databench: missing label in " + path.string());
        s.label = std::stoi(cell) - index_base;
        if (s.label < 0 || s.label >= data.spec.categories)
            throw std::runtime_error("databench: label out of range in " + path.string());
        s.latent = project(data.weights, s.features);
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& spec_path) {
    std::ifstream in(spec_path);
    if (!in) throw std::runtime_error("databench: cannot read " + spec_path.string());
    nlohmann::json sidecar = nlohmann::json::parse(in);
    if (sidecar.at("format").get<std::string>() != "ord2seq-dataset-v1")
        throw std::runtime_error("databench: unsupported dataset format in " + spec_path.string());

    Dataset data;
    data.spec = SyntheticSpec::from_json(sidecar.at("spec"));
    data.weights = sidecar.at("weights").get<std::vector<double>>();
    data.thresholds = sidecar.at("thresholds").get<std::vector<double>>();
    const int index_base = sidecar.value("index_base", 0);

    const auto dir = spec_path.parent_path();
    bool csv_ok = sidecar.contains("files");
    if (csv_ok)
        for (const auto& [key, file] : sidecar.at("files").items())
            csv_ok = csv_ok && std::filesystem::exists(dir / file.get<std::string>());

    if (csv_ok) {
        const auto& files = sidecar.at("files");
        data.train = read_csv(dir / files.at("train").get<std::string>(), data, index_base);
        data.val = read_csv(dir / files.at("val").get<std::string>(), data, index_base);
        data.test = read_csv(dir / files.at("test").get<std::string>(), data, index_base);
        return data;
    }
    return generate(data.spec);
}

TrainOutcome softmax_baseline(const TrainConfig& config, const Dataset& data) {
    TrainConfig cfg = config;
    cfg.variant = Variant::softmax_baseline;
    return run_training(cfg, data);
}

}  // namespace ord2seq
