#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli_app.hpp"
#include "support.hpp"

using namespace smarteff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    Run r;
    r.code = cli::run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("smarteff_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string write_data(const SmartDataset& ds, const std::string& name = "data.csv") {
        const auto path = (dir_ / name).string();
        std::ofstream f(path);
        write_dataset(f, ds);
        return path;
    }
    std::string write_text(const std::string& text, const std::string& name) {
        const auto path = (dir_ / name).string();
        std::ofstream f(path);
        f << text;
        return path;
    }
    SmartDataset trial(int T = 2, std::uint64_t seed = 1) {
        std::mt19937_64 rng(seed);
        testsupport::RandomSpec s;
        s.T = T;
        s.baseline = T >= 2;
        s.covariates = 1;
        s.aux = 1;
        return testsupport::random_dataset(rng, s);
    }
    fs::path dir_;
};

void expect_clean_failure(const Run& r, int code) {
    EXPECT_EQ(r.code, code);
    EXPECT_TRUE(r.out.empty()) << r.out;
    EXPECT_FALSE(r.err.empty());
}

}  // namespace

TEST_F(CliTest, AnalyzeJson) {
    const auto path = write_data(trial());
    const auto r = run({"analyze", "--data", path, "--technique", "t0", "--contrast", "(1,1)-(-1,-1)"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(r.err.empty());
    const auto j = json::parse(r.out);
    ASSERT_EQ(j["contrasts"].size(), 1u);
    const auto& c = j["contrasts"][0];
    for (const char* key : {"estimate", "se", "ci", "ci_length"}) EXPECT_TRUE(c.contains(key)) << key;
    EXPECT_NEAR(c["ci_length"].get<double>(), c["ci"][1].get<double>() - c["ci"][0].get<double>(), 1e-12);
    EXPECT_EQ(j["technique"], "t0");
    EXPECT_EQ(j["n"].get<std::size_t>(), trial().n());
    EXPECT_TRUE(j["validation"]["passed"].get<bool>());
    // resolved configuration is recorded
    for (const char* key : {"data", "technique", "weights", "covariance", "variance", "T", "t_star", "p11", "p21", "seed"})
        EXPECT_TRUE(j["config"].contains(key)) << key;
}

TEST_F(CliTest, AnalyzeMatchesLibrary) {
    const auto ds = trial();
    const auto path = write_data(ds);
    const auto r = run({"analyze", "--data", path, "--technique", "ensemble_m", "--covariates", "c1", "--k1", "c1",
                        "--k2", "c1,aux1", "--contrast", "first-stage", "--contrast", "second-stage|nonresponders"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    TechniqueOptions o;
    o.covariates = {"c1"};
    o.k1 = {"c1"};
    o.k2 = {"c1", "aux1"};
    const auto tf = run_technique(Technique::ensemble_m, ds, o);
    EXPECT_NEAR(j["contrasts"][0]["estimate"].get<double>(), tf.contrast(ContrastSpec::first_stage()).estimate, 1e-12);
    EXPECT_NEAR(j["contrasts"][0]["se"].get<double>(), tf.contrast(ContrastSpec::first_stage()).se, 1e-12);
    EXPECT_EQ(j["contrasts"][0]["variance"], "weight_adjusted");
    EXPECT_NEAR(j["contrasts"][1]["estimate"].get<double>(), nonresponder_second_stage(ds).estimate, 1e-12);
}

TEST_F(CliTest, AnalyzeTableAndCsv) {
    const auto path = write_data(trial());
    const auto t = run({"--format", "table", "analyze", "--data", path});
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_NE(t.out.find("(1,1)-(-1,-1)"), std::string::npos);
    const auto c = run({"--format", "csv", "analyze", "--data", path});
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_EQ(c.out.substr(0, c.out.find('\n')).find("technique"), 0u);
}

TEST_F(CliTest, MissingModelOptions) {
    const auto path = write_data(trial());
    const auto r = run({"analyze", "--data", path, "--technique", "t2m"});
    expect_clean_failure(r, 2);
    EXPECT_NE(r.err.find("--k1"), std::string::npos);
}

TEST_F(CliTest, LongitudinalOnSingleOccasion) {
    const auto path = write_data(trial(1));
    const auto r = run({"analyze", "--data", path, "--technique", "t3"});
    expect_clean_failure(r, 2);
    EXPECT_NE(r.err.find("longitudinal technique requires T ≥ 2"), std::string::npos);
}

TEST_F(CliTest, InvalidTechnique) {
    const auto path = write_data(trial());
    const auto r = run({"pairwise", "--data", path, "--technique", "t5"});
    expect_clean_failure(r, 2);
    for (auto t : kAllTechniques) EXPECT_NE(r.err.find(technique_id(t)), std::string::npos);
}

TEST_F(CliTest, PairwiseSixRowsMatchCellMeans) {
    const auto ds = trial();
    const auto path = write_data(ds);
    const auto r = run({"pairwise", "--data", path});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    ASSERT_EQ(j["pairwise"].size(), 6u);
    const auto cm = ipw_cell_means(final_occasion_only(ds), known_weights(ds));
    for (std::size_t k = 0; k < 6; ++k) {
        const auto [a, b] = kPairwiseOrder[k];
        EXPECT_EQ(j["pairwise"][k]["contrast"], a.str() + "-" + b.str());
        EXPECT_NEAR(j["pairwise"][k]["estimate"].get<double>(), cm.mu_hat[a.index()] - cm.mu_hat[b.index()], 1e-10);
    }
    const auto table = run({"--format", "table", "pairwise", "--data", path});
    ASSERT_EQ(table.code, 0);
    EXPECT_NE(table.out.find("ci_length"), std::string::npos);
}

TEST_F(CliTest, NumericalFailureExitCode) {
    auto ds = trial();
    for (auto& rec : ds.records) rec.x[0] = rec.a1;  // covariate separates stage-1 assignment
    const auto path = write_data(ds);
    const auto r = run({"analyze", "--data", path, "--technique", "t2m", "--k1", "c1", "--k2", "aux1"});
    expect_clean_failure(r, 3);
}

TEST_F(CliTest, InputErrors) {
    expect_clean_failure(run({"analyze", "--data", (dir_ / "nope.csv").string()}), 2);
    expect_clean_failure(run({"analyze"}), 2);
    expect_clean_failure(run({"frobnicate"}), 2);
    expect_clean_failure(run({"--format", "xml", "analyze", "--data", "x"}), 2);
    const auto bad = write_text("id,a1,r,a2,y_1\nu1,1,0,,2\n", "bad.csv");
    const auto r = run({"analyze", "--data", bad});
    expect_clean_failure(r, 2);
    EXPECT_NE(r.err.find("non-responder missing second-stage assignment"), std::string::npos);
}

TEST_F(CliTest, ValidationFailureBlocksAnalysis) {
    auto ds = trial();
    std::erase_if(ds.records, [](const TrialRecord& r) { return r.design_cell() == 5; });
    const auto path = write_data(ds);
    expect_clean_failure(run({"analyze", "--data", path}), 2);
    const auto v = run({"validate", "--data", path});
    ASSERT_EQ(v.code, 0);
    const auto j = json::parse(v.out);
    EXPECT_FALSE(j["passed"].get<bool>());
    EXPECT_EQ(j["cell_counts"][4].get<int>(), 0);
}

TEST_F(CliTest, OutputFile) {
    const auto path = write_data(trial());
    const auto out = (dir_ / "result.json").string();
    const auto r = run({"--output", out, "analyze", "--data", path});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(r.out.empty());
    std::ifstream f(out);
    std::stringstream buf;
    buf << f.rdbuf();
    EXPECT_NO_THROW(json::parse(buf.str()));
}

TEST_F(CliTest, ConfigFileAndOverrides) {
    const auto path = write_data(trial());
    const auto cfg = write_text("technique = t4\ncontrast = first-stage\n", "a.cfg");
    const auto a = run({"analyze", "--data", path, "--config", cfg});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(json::parse(a.out)["technique"], "t4");
    const auto b = run({"analyze", "--data", path, "--config", cfg, "--technique", "t3"});
    ASSERT_EQ(b.code, 0) << b.err;
    const auto j = json::parse(b.out);
    EXPECT_EQ(j["technique"], "t3");
    EXPECT_EQ(j["contrasts"][0]["contrast"], "first-stage");
    expect_clean_failure(run({"analyze", "--data", path, "--config", write_text("colour = red\n", "b.cfg")}), 2);
}

TEST_F(CliTest, SimulateTableOneRow) {
    const auto r = run({"--format", "table", "--seed", "7", "simulate", "--preset", "proto", "--rho", "0.8", "--nu",
                        "0.3", "--reps", "12"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(r.out);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) lines.push_back(line);
    // header, rule, one data row
    ASSERT_EQ(lines.size(), 3u) << r.out;
    for (auto t : kAllTechniques)
        if (t != Technique::t0) EXPECT_NE(lines[0].find(std::string("RE ") + technique_id(t)), std::string::npos);
    EXPECT_EQ(lines[2].find("0.80"), lines[2].find_first_not_of(' '));
}

TEST_F(CliTest, SimulateDeterministicAcrossRunsAndJobs) {
    const std::vector<std::string> base{"--seed", "7", "simulate", "--rho", "0.8", "--nu", "0.3", "--reps", "16"};
    auto with_jobs = [&](const char* jobs) {
        auto args = base;
        args.insert(args.begin(), {"--jobs", jobs});
        return run(args);
    };
    const auto a = with_jobs("1");
    const auto b = with_jobs("1");
    const auto c = with_jobs("8");
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    const auto ja = json::parse(a.out), jc = json::parse(c.out);
    EXPECT_EQ(ja["cells"], jc["cells"]);
    EXPECT_EQ(ja["config"]["seed"], 7);
    EXPECT_EQ(jc["config"]["jobs"], 8);
}

TEST_F(CliTest, SimulateGridAndPerRep) {
    const auto per = (dir_ / "reps.csv").string();
    const auto r = run({"simulate", "--reps", "5", "--techniques", "t0,t3", "--per-rep", per});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream f(per);
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "rep,technique,estimate,se,covered");
    int rows = 0;
    for (std::string line; std::getline(f, line);) ++rows;
    EXPECT_EQ(rows, 10);

    const auto grid = run({"simulate", "--reps", "3", "--techniques", "t0", "--rho", "0.1,0.5", "--nu", "0.1,0.3"});
    ASSERT_EQ(grid.code, 0) << grid.err;
    EXPECT_EQ(json::parse(grid.out)["cells"].size(), 4u);
    expect_clean_failure(run({"simulate", "--reps", "3", "--rho", "0.1,0.5", "--per-rep", per}), 2);
    expect_clean_failure(run({"simulate", "--reps", "3", "--techniques", "t8"}), 2);
    expect_clean_failure(run({"simulate", "--n", "5"}), 2);
}

TEST_F(CliTest, SimulateConfigFile) {
    const auto cfg = write_text("n = 60\nreps = 4\nseed = 3\nrho = 0.3\nnu = 0.1\ntechniques = [t0, t2e]\n", "s.cfg");
    const auto r = run({"simulate", "--config", cfg});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["config"]["n"], 60);
    EXPECT_EQ(j["config"]["seed"], 3);
    const auto o = run({"--seed", "9", "simulate", "--config", cfg, "--reps", "2"});
    ASSERT_EQ(o.code, 0) << o.err;
    const auto jo = json::parse(o.out);
    EXPECT_EQ(jo["config"]["seed"], 9);
    EXPECT_EQ(jo["config"]["reps"], 2);
    expect_clean_failure(run({"simulate", "--config", write_text("reps = many\n", "bad.cfg")}), 2);
}

TEST_F(CliTest, DocsSampleAnalyzes) {
    const std::string docs = SMARTEFF_DOCS_DIR;
    const auto r = run({"analyze", "--data", docs + "/sample.csv", "--config", docs + "/analysis.cfg"});
    ASSERT_EQ(r.code, 0) << r.err;
}
