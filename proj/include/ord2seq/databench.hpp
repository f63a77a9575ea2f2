#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ord2seq/codec.hpp"

namespace ord2seq {

struct TrainConfig;
struct TrainOutcome;

enum class ImbalanceProfile { uniform, geometric };

std::string imbalance_name(ImbalanceProfile profile);
ImbalanceProfile imbalance_from_name(const std::string& name);

// Synthetic ordinal task: features drawn from a uniform cube, a fixed random
// unit direction projects them to a latent score, Gaussian noise is added and
// the result is bucketed by thresholds calibrated to the target class priors.
// The closed-form Bayes classifier of this generator is the acceptance
// yardstick the real image benchmarks cannot provide.
struct SyntheticSpec {
    int categories = 8;
    int feature_dim = 8;
    double sigma = 0.0;
    std::size_t train_samples = 2000;
    std::size_t val_samples = 500;
    std::size_t test_samples = 2000;
    ImbalanceProfile profile = ImbalanceProfile::uniform;
    double rho = 1.0;  // geometric prior ratio, class k prior ~ rho^k
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static SyntheticSpec from_json(const nlohmann::json& doc);
};

struct Sample {
    std::vector<double> features;
    CategoryId label = 0;
    double latent = 0.0;  // pre-noise score, kept for the oracle
};

struct Dataset {
    SyntheticSpec spec;
    std::vector<double> weights;     // unit latent direction
    std::vector<double> thresholds;  // n-1 ascending cut points
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::vector<Sample> test;
};

// Class priors implied by the imbalance profile; always sums to 1.
std::vector<double> target_priors(const SyntheticSpec& spec);

// Index of the threshold bucket containing `value`.
int bucket_of(double value, const std::vector<double>& thresholds);

// Deterministic in the spec seed; each split draws from its own stream.
Dataset generate(const SyntheticSpec& spec);

struct OracleReport {
    double accuracy = 0.0;
    double mae = 0.0;
};

// Argmax of the true label posterior given the latent score.
int bayes_predict(double latent, double sigma, const std::vector<double>& thresholds);

// Oracle metrics over a split; the best any classifier can do on this data.
OracleReport bayes_oracle(const Dataset& data, std::span<const Sample> samples);

// Smallest noise level at which the Bayes oracle scores `target_accuracy`
// (within `tolerance`) on a large probe drawn from `probe`'s seed.
double calibrate_sigma(SyntheticSpec probe, double target_accuracy, double tolerance);

// CSV splits (feature columns then a label column) plus a JSON spec sidecar.
// Returns the sidecar path.
std::filesystem::path save_dataset(const Dataset& data, const std::filesystem::path& dir,
                                   const std::string& name, int index_base = 0);

// Loads from a sidecar; reads the CSV files when present, otherwise
// regenerates from the embedded spec.
Dataset load_dataset(const std::filesystem::path& spec_path);

// Flat n-way classifier over the same encoder MLP; the no-ordinal-structure
// baseline of the ablation table.
TrainOutcome softmax_baseline(const TrainConfig& config, const Dataset& data);

}  // namespace ord2seq
