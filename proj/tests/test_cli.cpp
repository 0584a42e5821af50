#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "instxai/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "instxai");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = instxai::cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("instxai_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "small.cfg") << "phantom.extents = 40 40 40\n"
                                        "phantom.brain_semi_axes = 12 14 13\n"
                                        "unet.base_channels = 2\n"
                                        "unet.patch_extent = 16\n"
                                        "train.epochs = 1\n"
                                        "train.patches_per_volume = 2\n"
                                        "run.noise_n = 1\n"
                                        "run.threshold = 0.99\n"
                                        "run.omega_cap = 4\n"
                                        "run.tn_count = 2\n"
                                        "run.bootstrap_resamples = 20\n";
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }
  fs::path dir;
};

}  // namespace

TEST_F(Cli, HelpListsExitCodes) {
  const Result r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("Exit codes"), std::string::npos);
  const Result s = cli({"saliency", "smoothgrad", "--help"});
  EXPECT_EQ(s.code, 0);
  EXPECT_NE(s.out.find("7  lesion"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"phantom", "gen", "--bogus"}).code, 2);
  EXPECT_EQ(cli({"phantom", "gen"}).code, 2);
  EXPECT_EQ(cli({"phantom", "gen", "--out", p("x"), "--count", "0"}).code, 2);
}

TEST_F(Cli, MissingInput) {
  EXPECT_EQ(cli({"infer", "--model", p("nomodel"), "--image", p("none.mvh"), "--out", p("o.mvh")}).code, 3);
  EXPECT_EQ(cli({"report", "--in", p("none.csv"), "--out", p("o.svg")}).code, 3);
  EXPECT_EQ(cli({"phantom", "gen", "--out", p("g"), "--config", p("none.cfg")}).code, 3);
}

TEST_F(Cli, MalformedInput) {
  std::ofstream(dir / "bad.csv") << "not,a,table\n";
  EXPECT_EQ(cli({"report", "--in", p("bad.csv"), "--out", p("o.svg")}).code, 4);
  std::ofstream(dir / "bad.mvh") << "garbage\n";
  std::ofstream(dir / "probs.txt") << "";
  EXPECT_EQ(cli({"instances", "extract", "--prob", p("bad.mvh"), "--out", p("i.txt")}).code, 4);
}

TEST_F(Cli, BadConfig) {
  std::ofstream(dir / "a.cfg") << "extents = 3 3 3\n";
  EXPECT_EQ(cli({"phantom", "gen", "--out", p("g"), "--config", p("a.cfg")}).code, 5);
  std::ofstream(dir / "b.cfg") << "phantom.lesion_count_min = many\n";
  EXPECT_EQ(cli({"phantom", "gen", "--out", p("g"), "--config", p("b.cfg")}).code, 5);
  std::ofstream(dir / "c.cfg") << "this line has no equals sign\n";
  EXPECT_EQ(cli({"phantom", "gen", "--out", p("g"), "--config", p("c.cfg")}).code, 5);
}

TEST_F(Cli, EndToEndSmallPipeline) {
  const std::string cfg = p("small.cfg");
  Result r = cli({"phantom", "gen", "--out", p("data"), "--count", "2", "--config", cfg, "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(dir / "data" / "phantom_001" / "image.mvh"));
  r = cli({"train", "--data", p("data"), "--out", p("model"), "--config", cfg, "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_TRUE(fs::exists(dir / "model" / "loss.csv"));
  const std::string ph = p("data/phantom_000");
  r = cli({"infer", "--model", p("model"), "--image", ph + "/image.mvh", "--out", p("prob.mvh")});
  ASSERT_EQ(r.code, 0) << r.err;
  // a threshold of 0 turns every voxel into one instance
  r = cli({"instances", "extract", "--prob", p("prob.mvh"), "--out", p("inst.txt"), "--threshold", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"instances", "categorize", "--prob", p("prob.mvh"), "--gt", ph + "/gt.mvh", "--out",
           p("cat.txt"), "--threshold", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(dir / "cat.txt").find("TP"), std::string::npos);
  r = cli({"saliency", "smoothgrad", "--model", p("model"), "--image", ph + "/image.mvh", "--out",
           p("sg.mvh"), "--instances", p("inst.txt"), "--instance", "1", "--N", "1", "--cap", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"saliency", "smoothgrad", "--model", p("model"), "--image", ph + "/image.mvh", "--out", p("sg.mvh")});
  EXPECT_EQ(r.code, 2);
  r = cli({"saliency", "gradcampp", "--model", p("model"), "--image", ph + "/image.mvh", "--out",
           p("gc.mvh"), "--gate", "logits"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"experiment", "stats", "--model", p("model"), "--data", p("data"), "--out", p("st.csv"),
           "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "st_summary.csv"));
  EXPECT_TRUE(fs::exists(dir / "st_tests.csv"));
  r = cli({"experiment", "sanity", "--model", p("model"), "--phantom", ph, "--out", p("san.csv"),
           "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(dir / "san.csv").find("empty_region.peak"), std::string::npos);
  r = cli({"experiment", "context", "--model", p("model"), "--phantom", ph, "--out", p("ctx.csv"),
           "--iterations", "2", "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"report", "--in", p("ctx.csv"), "--out", p("ctx.svg")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "ctx.svg").rfind("<svg", 0), 0u);
  r = cli({"report", "--in", p("model/loss.csv"), "--out", p("loss.svg")});
  ASSERT_EQ(r.code, 0) << r.err;
}

TEST_F(Cli, PhantomGenerationReproducible) {
  ASSERT_EQ(cli({"phantom", "gen", "--out", p("a"), "--config", p("small.cfg"), "--seed", "8"}).code, 0);
  ASSERT_EQ(cli({"phantom", "gen", "--out", p("b"), "--config", p("small.cfg"), "--seed", "8"}).code, 0);
  for (const char* f : {"image.raw", "gt.raw"}) {
    ASSERT_TRUE(fs::exists(dir / "a/phantom_000" / f));
    EXPECT_EQ(slurp(dir / "a/phantom_000" / f), slurp(dir / "b/phantom_000" / f)) << f;
  }
}
