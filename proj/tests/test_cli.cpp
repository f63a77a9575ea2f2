#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "support/schema_check.hpp"
#include "support/test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_cli;
fs::path g_schemas;

int run_cli(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string run_cli_stdout(const std::string& args) {
    const fs::path tmp = testutil::scratch_dir("cli_stdout") / "out.txt";
    const std::string cmd = g_cli + " " + args + " > " + tmp.string() + " 2>/dev/null";
    std::system(cmd.c_str());
    std::ifstream in(tmp);
    std::stringstream ss;
    ss << in.rdbuf();
    fs::remove_all(tmp.parent_path());
    return ss.str();
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json load_schema(const std::string& name) {
    return json::parse(read_file(g_schemas / name));
}

void check_schema(const std::string& schema_name, const json& doc) {
    std::string error;
    const bool ok = testutil::schema_check(load_schema(schema_name), doc, &error);
    CAPTURE(schema_name);
    CAPTURE(error);
    CHECK(ok);
}

// Small dataset + fast architecture shared by most cases.
const char* kTinyArch =
    " --width 16 --heads 2 --layers 1 --ffn-width 24 --enc-hidden 12 --enc-tokens 2";

std::string make_dataset(const fs::path& dir, const std::string& extra = "") {
    const int rc = run_cli("gen-data --categories 5 --features 6 --sigma 0.15 --train 120"
                           " --val 50 --test 60 --seed 11 --name toy --out " +
                           dir.string() + extra);
    REQUIRE(rc == 0);
    return (dir / "toy.spec.json").string();
}

}  // namespace

TEST_CASE("tree command prints a valid document") {
    const std::string out = run_cli_stdout("tree --categories 5");
    const json doc = json::parse(out);
    check_schema("tree.schema.json", doc);
    CHECK(doc.at("n") == 5);
    CHECK(doc.at("depth") == 3);
    CHECK(doc.at("nodes")[0].at("lo") == 0);
    CHECK(doc.at("nodes")[0].at("hi") == 4);

    CHECK(run_cli("tree --categories 1") == 2);
}

TEST_CASE("gen-data writes csvs, sidecar and manifest") {
    const auto dir = testutil::scratch_dir("cli_gen");
    const std::string spec = make_dataset(dir, " --index-base 1");

    for (const char* split : {"train", "val", "test"})
        CHECK(fs::exists(dir / ("toy." + std::string(split) + ".csv")));

    const json sidecar = json::parse(read_file(spec));
    check_schema("dataset_spec.schema.json", sidecar);
    CHECK(sidecar.at("index_base") == 1);
    CHECK(sidecar.at("spec").at("categories") == 5);

    const json manifest = json::parse(read_file(dir / "toy.manifest.json"));
    check_schema("manifest.schema.json", manifest);

    std::ifstream csv(dir / "toy.train.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "f0,f1,f2,f3,f4,f5,label");
    fs::remove_all(dir);
}

TEST_CASE("train writes validated artifacts and respects exit codes") {
    const auto dir = testutil::scratch_dir("cli_train");
    const std::string spec = make_dataset(dir);

    const int rc = run_cli("train --data " + spec + " --out " + (dir / "run").string() +
                           " --epochs 2 --seed 3" + kTinyArch);
    CHECK(rc == 0);

    const json metrics = json::parse(read_file(dir / "run" / "metrics.json"));
    check_schema("metrics.schema.json", metrics);
    CHECK(metrics.at("variant") == "full");
    CHECK(metrics.at("test").at("accuracy").get<double>() >= 0.0);
    CHECK(metrics.at("test").at("accuracy").get<double>() <= 1.0);
    CHECK(metrics.at("test").at("mae").get<double>() <= 4.0);

    const json manifest = json::parse(read_file(dir / "run" / "manifest.json"));
    check_schema("manifest.schema.json", manifest);
    CHECK(manifest.at("command") == "train");

    const json ckpt = json::parse(read_file(dir / "run" / "checkpoint.json"));
    check_schema("checkpoint.schema.json", ckpt);

    std::ifstream log(dir / "run" / "log.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        check_schema("epoch_log_record.schema.json", json::parse(line));
        ++lines;
    }
    CHECK(lines == 2);

    SUBCASE("usage errors exit 2") {
        CHECK(run_cli("train --data " + spec + " --out " + (dir / "x").string() +
                      " --categories 9 --epochs 1" + kTinyArch) == 2);
        CHECK(run_cli("train --data " + spec + " --out " + (dir / "x").string() +
                      " --alpha 0.0 --epochs 1" + kTinyArch) == 2);
        CHECK(run_cli("train --data " + spec + " --out " + (dir / "x").string() +
                      " --alpha 1.5 --epochs 1" + kTinyArch) == 2);
        CHECK(run_cli("train --no-such-flag") == 2);
        CHECK(run_cli("train --data /nonexistent/spec.json --out " + (dir / "x").string()) != 0);
    }
    fs::remove_all(dir);
}

TEST_CASE("alpha=1 full run equals a no-mask run byte for byte") {
    const auto dir = testutil::scratch_dir("cli_nomask");
    const std::string spec = make_dataset(dir);
    REQUIRE(run_cli("train --data " + spec + " --out " + (dir / "a").string() +
                    " --epochs 2 --seed 5 --alpha 1.0 --variant full" + kTinyArch) == 0);
    REQUIRE(run_cli("train --data " + spec + " --out " + (dir / "b").string() +
                    " --epochs 2 --seed 5 --alpha 0.3 --variant no-mask" + kTinyArch) == 0);
    CHECK(read_file(dir / "a" / "log.jsonl") == read_file(dir / "b" / "log.jsonl"));

    // metrics differ only in the recorded variant name
    json ma = json::parse(read_file(dir / "a" / "metrics.json"));
    json mb = json::parse(read_file(dir / "b" / "metrics.json"));
    CHECK(ma.at("test") == mb.at("test"));
    fs::remove_all(dir);
}

TEST_CASE("decode emits metrics and a schema-valid trace") {
    const auto dir = testutil::scratch_dir("cli_decode");
    const std::string spec = make_dataset(dir);
    REQUIRE(run_cli("train --data " + spec + " --out " + (dir / "run").string() +
                    " --epochs 2 --seed 3" + kTinyArch) == 0);

    const int rc = run_cli("decode --ckpt " + (dir / "run" / "checkpoint.json").string() +
                           " --data " + spec + " --split val --trace trace.jsonl --out " +
                           (dir / "dec").string());
    CHECK(rc == 0);

    const json metrics = json::parse(read_file(dir / "dec" / "metrics.json"));
    CHECK(metrics.at("split") == "val");

    std::ifstream trace(dir / "dec" / "trace.jsonl");
    std::string line;
    int records = 0;
    while (std::getline(trace, line)) {
        const json rec = json::parse(line);
        check_schema("trace_record.schema.json", rec);
        // y_prob must be the masked sigmoid of y_out
        for (std::size_t i = 0; i < rec.at("y_out").size(); ++i) {
            const double logit = rec.at("y_out")[i].get<double>();
            const double sig = 1.0 / (1.0 + std::exp(-logit));
            const double want = rec.at("mask")[i].get<double>() * sig;
            CHECK(rec.at("y_prob")[i].get<double>() == doctest::Approx(want).epsilon(1e-9));
        }
        ++records;
    }
    CHECK(records == 50 * 3);  // 50 val samples, depth-3 tree

    CHECK(run_cli("decode --ckpt " + (dir / "run" / "checkpoint.json").string() + " --data " +
                  spec + " --split nope --out " + (dir / "x").string()) == 2);
    fs::remove_all(dir);
}

TEST_CASE("sweep-alpha produces a sorted csv and honors worker caps") {
    const auto dir = testutil::scratch_dir("cli_sweep");
    const std::string spec = make_dataset(dir);
    REQUIRE(run_cli("sweep-alpha --data " + spec + " --out " + (dir / "s1").string() +
                    " --alphas 0.7,0.3 --seeds 2,1 --epochs 1" + kTinyArch) == 0);

    const std::string csv = read_file(dir / "s1" / "sweep.csv");
    std::stringstream ss(csv);
    std::string line;
    std::getline(ss, line);
    CHECK(line == "alpha,seed,accuracy,mae");
    std::vector<std::string> rows;
    while (std::getline(ss, line)) rows.push_back(line);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].rfind("0.3,1,", 0) == 0);
    CHECK(rows[1].rfind("0.3,2,", 0) == 0);
    CHECK(rows[2].rfind("0.7,1,", 0) == 0);
    CHECK(rows[3].rfind("0.7,2,", 0) == 0);

    // a single worker must produce identical bytes
    ::setenv("ORD2SEQ_THREADS", "1", 1);
    REQUIRE(run_cli("sweep-alpha --data " + spec + " --out " + (dir / "s2").string() +
                    " --alphas 0.7,0.3 --seeds 2,1 --epochs 1" + kTinyArch) == 0);
    ::unsetenv("ORD2SEQ_THREADS");
    CHECK(read_file(dir / "s2" / "sweep.csv") == csv);

    // alpha=0 is clamped and the substitution recorded
    REQUIRE(run_cli("sweep-alpha --data " + spec + " --out " + (dir / "s3").string() +
                    " --alphas 0 --seeds 1 --epochs 1" + kTinyArch) == 0);
    const json manifest = json::parse(read_file(dir / "s3" / "manifest.json"));
    CHECK(manifest.at("notes").at("alpha_substitutions").size() == 1);
    CHECK(manifest.at("notes").at("alpha_substitutions")[0].at("used").get<double>() == 1e-6);

    CHECK(run_cli("sweep-alpha --data " + spec + " --out " + (dir / "s4").string() +
                  " --alphas 1.5 --seeds 1 --epochs 1" + kTinyArch) == 2);
    fs::remove_all(dir);
}

TEST_CASE("ablation compares the four variants") {
    const auto dir = testutil::scratch_dir("cli_ablation");
    const std::string spec = make_dataset(dir);

    CHECK(run_cli("ablation --data " + spec + " --out " + (dir / "x").string() +
                  " --seeds 1,2 --epochs 1" + kTinyArch) == 2);

    REQUIRE(run_cli("ablation --data " + spec + " --out " + (dir / "abl").string() +
                    " --seeds 1,2,3 --epochs 1 --alpha 1.0" + kTinyArch) == 0);
    const json doc = json::parse(read_file(dir / "abl" / "ablation.json"));
    check_schema("ablation.schema.json", doc);
    REQUIRE(doc.at("variants").size() == 4);
    for (const auto& entry : doc.at("variants")) {
        CHECK(entry.at("runs").size() == 3);
        CHECK(entry.contains("mean_accuracy"));
        CHECK(entry.contains("stddev_mae"));
    }
    // at alpha=1 the no-mask rows equal the full rows seed by seed
    const auto& variants = doc.at("variants");
    const json* full = nullptr;
    const json* nomask = nullptr;
    for (const auto& entry : variants) {
        if (entry.at("name") == "full") full = &entry;
        if (entry.at("name") == "no-mask") nomask = &entry;
    }
    REQUIRE(full != nullptr);
    REQUIRE(nomask != nullptr);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(full->at("runs")[i].at("accuracy") == nomask->at("runs")[i].at("accuracy"));
        CHECK(full->at("runs")[i].at("mae") == nomask->at("runs")[i].at("mae"));
    }
    fs::remove_all(dir);
}

TEST_CASE("non-finite training data aborts with exit code 3 and diagnostics") {
    const auto dir = testutil::scratch_dir("cli_nan");
    const std::string spec = make_dataset(dir);

    // Poison one training feature so the forward pass overflows.
    const fs::path csv_path = dir / "toy.train.csv";
    std::stringstream rewritten;
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);
    rewritten << line << "\n";
    std::getline(in, line);
    rewritten << "1e308," << line.substr(line.find(',') + 1) << "\n";
    while (std::getline(in, line)) rewritten << line << "\n";
    in.close();
    std::ofstream(csv_path) << rewritten.str();

    CHECK(run_cli("train --data " + spec + " --out " + (dir / "run").string() +
                  " --epochs 1 --seed 3 --batch-size 200" + kTinyArch) == 3);
    CHECK(fs::exists(dir / "run" / "nan_diagnostics.json"));
    const json diag = json::parse(read_file(dir / "run" / "nan_diagnostics.json"));
    CHECK(diag.at("error") == "non-finite training loss");
    fs::remove_all(dir);
}

int run_all(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        if (fs::exists(argv[i]) && !fs::is_directory(argv[i])) g_cli = argv[i];
    }
    if (g_cli.empty()) {
        std::fprintf(stderr, "usage: test_cli <path-to-ord2seq-binary>\n");
        return 1;
    }
    // locate the shipped schemas next to the sources
    fs::path here = fs::path(__FILE__).parent_path();
    g_schemas = here.parent_path() / "schemas";
    if (!fs::exists(g_schemas)) g_schemas = fs::current_path() / "schemas";

    doctest::Context context;
    return context.run();
}

}  // namespace

int main(int argc, char** argv) { return run_all(argc, argv); }
