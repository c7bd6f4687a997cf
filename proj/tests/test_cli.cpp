#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rmsflow/commands.hpp"

using namespace rmsflow;

namespace {

std::filesystem::path fresh_dir(const std::string& name)
{
    const auto d = std::filesystem::temp_directory_path() / "rmsflow_cli_test" / name;
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

RunConfig small_run(const std::filesystem::path& dir)
{
    RunConfig c;
    c.data_dir = (dir / "data").string();
    c.out_dir = (dir / "out").string();
    c.n_scenes = 6;
    c.split = {0.5, 0.25};
    c.synth.objects = 2;
    c.synth.points_per_object = 80;
    c.net.levels = {32, 16, 8};
    c.net.dense_levels = {64, 32, 16};
    c.net.c0 = 4;
    c.net.channels = {4, 6, 8};
    c.net.kp = 4;
    c.net.ko = 5;
    c.eval_points = 128;
    return c;
}

int run_cli(const std::string& args)
{
    const std::string cmd = std::string(RMSFLOW_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, FileAndOverridesApplyInOrder)
{
    const auto d = fresh_dir("cfg");
    std::ofstream(d / "a.conf") << "# comment\nseed = 7\npyramid.levels = 64, 32,16 \nknn.kp = 9  # trailing\n";
    RunConfig c;
    ConfigBinder b(c);
    b.load_file(d / "a.conf");
    b.set_assignment("knn.kp=11");
    b.set_assignment("pyramid.l2=20");
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.net.levels, (std::vector<std::size_t>{64, 20, 16}));
    EXPECT_EQ(c.net.kp, 11u);
}

TEST(Config, UnknownKeysAndBadValuesAreConfigErrors)
{
    RunConfig c;
    ConfigBinder b(c);
    EXPECT_THROW(b.set("no.such", "1"), ConfigError);
    EXPECT_THROW(b.set("pyramid.l9", "3"), ConfigError);
    EXPECT_THROW(b.set("knn.kp", "abc"), ConfigError);
    EXPECT_THROW(b.set("fe.stage2", "maybe"), ConfigError);
    EXPECT_THROW(b.set_assignment("seed"), ConfigError);
    EXPECT_THROW(b.set("synth.shapes", "plane,torus"), ConfigError);

    const auto d = fresh_dir("cfgbad");
    std::ofstream(d / "b.conf") << "seed 3\n";
    EXPECT_THROW(b.load_file(d / "b.conf"), ConfigError);
    EXPECT_THROW(b.load_file(d / "missing.conf"), ConfigError);
}

TEST(Config, DumpRoundTrips)
{
    RunConfig c;
    ConfigBinder b(c);
    b.set("synth.sigma", "0.0125");
    b.set("synth.shapes", "sphere,blob");
    b.set("loss.alpha", "0.1,0.2,0.3,0.4");
    const std::string text = b.dump();

    const auto d = fresh_dir("dump");
    std::ofstream(d / "echo.conf") << text;
    RunConfig c2;
    ConfigBinder b2(c2);
    b2.load_file(d / "echo.conf");
    EXPECT_EQ(b2.dump(), text);
    EXPECT_EQ(c2.synth.sigma, 0.0125);
    EXPECT_EQ(c2.synth.shapes.size(), 2u);
}

TEST(Config, ValidateRejectsInconsistentSettings)
{
    RunConfig c;
    c.split = {0.8, 0.3};
    EXPECT_THROW(validate(c), ConfigError);
    c = RunConfig{};
    c.threads = 0;
    EXPECT_THROW(validate(c), ConfigError);
    c = RunConfig{};
    c.net.levels = {64, 128, 32};
    EXPECT_THROW(validate(c), ConfigError);
    EXPECT_NO_THROW(validate(RunConfig{}));
}

TEST(Commands, DeskConfigLoadsAndValidates)
{
    RunConfig c;
    ConfigBinder(c).load_file(std::filesystem::path(RMSFLOW_SOURCE_DIR) / "configs" / "desk.conf");
    EXPECT_NO_THROW(validate(c));
    EXPECT_EQ(c.train.points, 512u);
}

TEST(Commands, GenIsDeterministicAndEchoesConfig)
{
    const auto d1 = fresh_dir("gen1");
    const auto d2 = fresh_dir("gen2");
    RunConfig a = small_run(d1), b = small_run(d2);
    const auto ea = cmd_gen(a);
    const auto eb = cmd_gen(b);
    ASSERT_EQ(ea.size(), 6u);
    ASSERT_EQ(ea.size(), eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) {
        EXPECT_EQ(ea[i].split, eb[i].split);
        EXPECT_EQ(slurp(d1 / "data" / ea[i].file), slurp(d2 / "data" / eb[i].file));
    }
    EXPECT_EQ(slurp(d1 / "data" / "manifest.csv"), slurp(d2 / "data" / "manifest.csv"));
    EXPECT_TRUE(std::filesystem::exists(d1 / "data" / "config.resolved"));
    EXPECT_EQ(load_split(a.data_dir, "train").size(), 3u);
}

TEST(Commands, OracleEvalIsPerfect)
{
    const auto d = fresh_dir("oracle");
    RunConfig c = small_run(d);
    cmd_gen(c);
    const auto scenes = load_split(c.data_dir, "train");
    const auto runs = cmd_eval(c, ParamStore<float>{}, scenes, {128, 64}, true);
    ASSERT_EQ(runs.size(), 2u);
    for (const auto& r : runs) {
        ASSERT_EQ(r.results.size(), scenes.size());
        for (const auto& s : r.results) {
            EXPECT_EQ(s.report.epe3d_m, 0.0);
            EXPECT_EQ(s.report.acc3ds, 1.0);
            EXPECT_EQ(s.report.acc3dr, 1.0);
            EXPECT_EQ(s.report.out3d, 0.0);
        }
    }
    std::ostringstream csv;
    write_eval_csv(csv, runs, false);
    EXPECT_EQ(csv.str().rfind(std::string(kEvalCsvHeader) + "\n", 0), 0u);
    EXPECT_NE(csv.str().find("ALL,128,"), std::string::npos);
}

TEST(Commands, TrainEvalRoundTripIsDeterministic)
{
    const auto d = fresh_dir("train");
    RunConfig c = small_run(d);
    c.train.points = 128;
    c.train.val_points = 128;
    c.train.phase1_epochs = 1;
    c.train.phase2_epochs = 1;
    c.train.wall_time = false;
    cmd_gen(c);
    const TrainResult r = cmd_train(c, false);
    EXPECT_TRUE(std::isfinite(r.best_val_epe3d));
    const std::string log1 = slurp(d / "out" / "log.csv");
    const std::string best1 = slurp(d / "out" / "best.rmsw");

    c.out_dir = (d / "out2").string();
    cmd_train(c, false);
    EXPECT_EQ(slurp(d / "out2" / "log.csv"), log1);
    EXPECT_EQ(slurp(d / "out2" / "best.rmsw"), best1);

    const auto params = load_model(c.net, d / "out" / "best.rmsw");
    const auto scenes = load_split(c.data_dir, "val");
    std::ostringstream e1, e2;
    write_eval_csv(e1, cmd_eval(c, params, scenes, {128}, false), false);
    write_eval_csv(e2, cmd_eval(c, params, scenes, {128}, false), false);
    EXPECT_EQ(e1.str(), e2.str());

    RunConfig dense = c;
    dense.net.dense = true;
    const auto dr = cmd_eval(dense, params, scenes, {128}, false);
    EXPECT_EQ(dr.front().results.size(), scenes.size());
}

TEST(Commands, TrainWithoutDatasetIsDataError)
{
    const auto d = fresh_dir("nodata");
    RunConfig c = small_run(d);
    EXPECT_THROW(cmd_train(c, false), FormatError);
}

TEST(Cli, ExitCodes)
{
    const auto d = fresh_dir("exit");
    EXPECT_EQ(run_cli("gen --set data.dir=" + (d / "data").string() +
                      " --set data.n_scenes=2 --set synth.objects=1 --set synth.points_per_object=64"),
              0);
    EXPECT_EQ(run_cli("gen --set bogus.key=1"), 2);
    EXPECT_EQ(run_cli("train --set data.dir=" + (d / "none").string()), 3);
    EXPECT_NE(run_cli("frobnicate"), 0);
}
