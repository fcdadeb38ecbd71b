#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace smarteff;

TEST(ConfigMap, ParsesScalarsListsAndComments) {
    const auto c = ConfigMap::parse(
        "# a comment\n"
        "n = 250   # trailing comment\n"
        "rho = [0.1, 0.8]\n"
        "techniques = [\"t0\", 't3', t4]\n"
        "\n"
        "flag = true\n");
    EXPECT_EQ(c.get_int("n"), 250);
    EXPECT_EQ(c.get_double_list("rho"), (std::vector<double>{0.1, 0.8}));
    EXPECT_EQ(c.get_list("techniques"), (std::vector<std::string>{"t0", "t3", "t4"}));
    EXPECT_TRUE(c.get_bool("flag"));
    EXPECT_FALSE(c.has("missing"));
}

TEST(ConfigMap, Errors) {
    EXPECT_THROW(ConfigMap::parse("novalue\n"), InputError);
    EXPECT_THROW(ConfigMap::parse("= 3\n"), InputError);
    EXPECT_THROW(ConfigMap::parse("a = 1\na = 2\n"), InputError);
    const auto c = ConfigMap::parse("n = 2.5\nx = abc\nl = [1, 2\n");
    EXPECT_THROW(c.get_int("n"), InputError);
    EXPECT_THROW(c.get_double("x"), InputError);
    EXPECT_THROW(c.get_list("l"), InputError);
    EXPECT_THROW(c.get_bool("x"), InputError);
}

TEST(SimStudyConfig, AllKeys) {
    const auto s = sim_study_from_config(ConfigMap::parse(
        "design = asic_like\nn = 120\nreps = 30\nseed = 99\nrho = [0.1, 0.5]\nnu = 0.2\ndelta = 0.5\n"
        "sigma = 2\nlambda1 = 0.1\nlambda2 = 0.05\nresponse_rate = 0.3\neta1 = 0.5\n"
        "covariate_correlation = 0.1\ntechniques = [t1, t3]\ncontrast = first-stage\njobs = 3\n"));
    EXPECT_EQ(s.base.design, Design::asic_like);
    EXPECT_EQ(s.base.n, 120);
    EXPECT_EQ(s.base.reps, 30);
    EXPECT_EQ(s.base.seed, 99u);
    EXPECT_EQ(s.rho, (std::vector<double>{0.1, 0.5}));
    EXPECT_EQ(s.nu, (std::vector<double>{0.2}));
    EXPECT_EQ(s.base.delta, 0.5);
    EXPECT_EQ(s.base.sigma, 2.0);
    EXPECT_EQ(s.base.lambda1, 0.1);
    EXPECT_EQ(s.base.lambda2, 0.05);
    EXPECT_EQ(s.base.response_rate, 0.3);
    EXPECT_EQ(s.base.eta1, 0.5);
    EXPECT_EQ(s.base.covariate_correlation, 0.1);
    EXPECT_EQ(s.base.techniques, (std::vector<Technique>{Technique::t1, Technique::t3}));
    EXPECT_EQ(s.base.target.kind, ContrastKind::first_stage_main);
    EXPECT_EQ(s.jobs, 3u);
}

TEST(SimStudyConfig, Rejections) {
    EXPECT_THROW(sim_study_from_config(ConfigMap::parse("bogus = 1\n")), InputError);
    EXPECT_THROW(sim_study_from_config(ConfigMap::parse("techniques = [t0, t7]\n")), InputError);
    EXPECT_THROW(sim_study_from_config(ConfigMap::parse("design = crossover\n")), InputError);
    EXPECT_THROW(sim_study_from_config(ConfigMap::parse("seed = -4\n")), InputError);
    EXPECT_THROW(sim_study_from_config(ConfigMap::parse("rho = []\n")), InputError);
}

TEST(AnalysisConfig, Keys) {
    const auto a = analysis_from_config(ConfigMap::parse(
        "technique = ensemble_m\nweights = modeled\nk1 = [age]\nk2 = [age, a1, l_flag]\ncovariates = [age]\n"
        "t_star = 1\ncontrast = (1,1)-(-1,-1)\nT = 2\np11 = 0.5\np21 = 0.4\nsmall_sample_correction = true\n"));
    EXPECT_EQ(a.technique, Technique::ensemble_m);
    EXPECT_EQ(a.weights, WeightKind::modeled);
    EXPECT_EQ(a.options.k1, std::vector<std::string>{"age"});
    EXPECT_EQ(a.options.k2, (std::vector<std::string>{"age", "a1", "l_flag"}));
    EXPECT_EQ(a.options.covariates, std::vector<std::string>{"age"});
    EXPECT_EQ(a.options.t_star, 1);
    EXPECT_EQ(a.contrasts, std::vector<std::string>{"(1,1)-(-1,-1)"});
    EXPECT_EQ(a.T, 2);
    ASSERT_TRUE(a.probs.has_value());
    EXPECT_EQ(a.probs->p21, 0.4);
    EXPECT_TRUE(a.options.small_sample_correction);

    const auto b = analysis_from_config(ConfigMap::parse("contrast = [\"(1,1)-(-1,-1)\", first-stage]\n"));
    EXPECT_EQ(b.contrasts, (std::vector<std::string>{"(1,1)-(-1,-1)", "first-stage"}));
    EXPECT_THROW(analysis_from_config(ConfigMap::parse("weights = stabilized\n")), InputError);
    EXPECT_THROW(analysis_from_config(ConfigMap::parse("technique = t9\n")), InputError);
}

TEST(DocsExamples, ConfigsParse) {
    std::ifstream sim(std::string(SMARTEFF_DOCS_DIR) + "/simulation.cfg");
    ASSERT_TRUE(sim) << "missing docs/simulation.cfg";
    const auto s = sim_study_from_config(ConfigMap::parse(sim));
    EXPECT_NO_THROW(derive_params(s.base));

    std::ifstream an(std::string(SMARTEFF_DOCS_DIR) + "/analysis.cfg");
    ASSERT_TRUE(an) << "missing docs/analysis.cfg";
    const auto a = analysis_from_config(ConfigMap::parse(an));
    EXPECT_TRUE(a.technique.has_value());

    std::ifstream csv(std::string(SMARTEFF_DOCS_DIR) + "/sample.csv");
    ASSERT_TRUE(csv) << "missing docs/sample.csv";
    const auto ds = load_dataset(csv);
    EXPECT_TRUE(validate(ds).passed());
    EXPECT_NO_THROW(run_technique(*a.technique, ds, a.options));
}
