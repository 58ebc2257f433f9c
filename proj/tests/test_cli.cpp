#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "drmel/cli.hpp"
#include "test_support.hpp"

using namespace drmel;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path tmp_dir() {
  const fs::path p = fs::path(DRMEL_TEST_TMP) / "cli";
  fs::create_directories(p);
  return p;
}

std::string write_file(const std::string& name, const std::string& body) {
  const fs::path p = tmp_dir() / name;
  std::ofstream(p) << body;
  return p.string();
}

std::string write_data(const std::string& name, const MultiSample& ms) {
  std::ostringstream s;
  s.precision(17);
  write_samples(s, ms);
  return write_file(name, s.str());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Value following "key=" in a summary line.
double field(const std::string& text, const std::string& key) {
  const auto pos = text.find(key + "=");
  if (pos == std::string::npos) throw std::runtime_error("missing " + key + " in: " + text);
  return std::stod(text.substr(pos + key.size() + 1));
}

std::string one_to_ten() {
  std::string s;
  for (int i = 1; i <= 10; ++i) s += "0," + std::to_string(i) + "\n";
  return write_file("one_to_ten.csv", s);
}

}  // namespace

TEST(CliFit, TwoPopulationToy) {
  const auto data = write_data("toy2.csv", fixtures::normal_samples({30, 30}, {0, 0.5}, {1, 1}, 3));
  const auto r = run({"fit", "--data", data, "--basis", "1,x"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("populations=2 n=60 basis=1,x"), std::string::npos) << r.out;
  const auto pos = r.out.find("theta[1]=");
  ASSERT_NE(pos, std::string::npos);
  std::istringstream line(r.out.substr(pos + 9, r.out.find('\n', pos) - pos - 9));
  std::vector<double> theta;
  for (double v; line >> v;) theta.push_back(v);
  EXPECT_EQ(theta.size(), 2u);
  EXPECT_TRUE(std::isfinite(field(r.out, "log_el")));
}

TEST(CliFit, JsonOutputAndMele) {
  const auto data = write_data("toy3.csv", fixtures::six_normal(40, 5));
  const auto out = (tmp_dir() / "fit.json").string();
  const auto r = run({"fit", "--data", data, "--spec", "0:0.5", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mele[0:0.5]="), std::string::npos);
  const auto j = nlohmann::json::parse(slurp(out));
  EXPECT_EQ(j["theta"].size(), 5u);
  EXPECT_EQ(j["theta"][0].size(), 3u);
  EXPECT_NEAR(j["mele"][0]["value"].get<double>(), field(r.out, "mele[0:0.5]"), 1e-8);
}

TEST(CliFit, LogBasisRejectsNegativeObservation) {
  const auto data = write_file("neg.csv", "0,1.5\n0,2.5\n0,-0.5\n1,3\n1,4\n1,2\n");
  const auto r = run({"fit", "--data", data, "--basis", "1,x,logx"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("log"), std::string::npos) << r.err;
}

TEST(CliFit, SinglePopulationIsEmpirical) {
  const auto r = run({"fit", "--data", one_to_ten()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(field(r.out, "log_el"), -10 * std::log(10.0), 1e-7);
}

TEST(CliFit, ValidationErrors) {
  EXPECT_EQ(run({"fit"}).code, 2);
  EXPECT_EQ(run({"fit", "--data", (tmp_dir() / "missing.csv").string()}).code, 2);
  EXPECT_EQ(run({"fit", "--data", one_to_ten(), "--basis", "1,x,x7"}).code, 2);
  EXPECT_EQ(run({"fit", "--data", one_to_ten(), "--spec", "0:1.5"}).code, 2);
  EXPECT_EQ(run({"fit", "--data", one_to_ten(), "--spec", "3:0.5"}).code, 2);
  EXPECT_EQ(run({"nonsense"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(CliTest, ClosedFormCase) {
  // k = 7 of n = 10 at or below 7.5, tau = 0.5
  const auto r = run({"test", "--data", one_to_ten(), "--spec", "0:0.5:7.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "Rn=1.64566 df=1 p=0.199551\n");
}

TEST(CliTest, MeleHypothesisHasLargePValue) {
  const auto data = write_data("six.csv", fixtures::six_normal(60, 7));
  const auto fit = run({"fit", "--data", data, "--spec", "0:0.5", "--spec", "5:0.5"});
  ASSERT_EQ(fit.code, 0) << fit.err;
  std::ostringstream a, b;
  a.precision(17);
  b.precision(17);
  a << "0:0.5:" << field(fit.out, "mele[0:0.5]");
  b << "5:0.5:" << field(fit.out, "mele[5:0.5]");
  const auto r = run({"test", "--data", data, "--spec", a.str(), "--spec", b.str()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(field(r.out, "df"), 2.0);
  EXPECT_LT(field(r.out, "Rn"), 0.1);
  EXPECT_GT(field(r.out, "p"), 0.95);
}

TEST(CliTest, OutOfRangeAndMissingValue) {
  EXPECT_EQ(run({"test", "--data", one_to_ten(), "--spec", "0:0.5:100"}).code, 2);
  EXPECT_EQ(run({"test", "--data", one_to_ten(), "--spec", "0:0.5"}).code, 2);
  EXPECT_EQ(run({"test", "--data", one_to_ten()}).code, 2);
}

TEST(CliRegion, ThresholdAndGridFile) {
  const auto data = write_data("region_data.csv", fixtures::six_normal(100, 11));
  const auto out = (tmp_dir() / "region.csv").string();
  const auto wald = (tmp_dir() / "wald.csv").string();
  const auto np = (tmp_dir() / "np.csv").string();
  const auto r = run({"region", "--data", data, "--spec", "0:0.5", "--spec", "5:0.5", "--alpha", "0.05", "--grid",
                      "25", "--bootstrap", "50", "--out", out, "--wald-out", wald, "--np-out", np});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(field(r.out, "threshold"), 5.99146, 1e-5);
  EXPECT_GT(field(r.out, "area"), 0.0);
  EXPECT_NE(r.out.find("grid=25x25"), std::string::npos) << r.out;
  const auto body = slurp(out);
  EXPECT_EQ(body.rfind("# threshold=5.99146", 0), 0u) << body.substr(0, 80);
  EXPECT_NE(body.find("area="), std::string::npos);
  EXPECT_GT(field(r.out, "wald_area"), 0.0);
  EXPECT_EQ(slurp(np).rfind("method,l,", 0), 0u);
}

TEST(CliRegion, IntervalForOneSpec) {
  const auto data = write_data("interval_data.csv", fixtures::six_normal(80, 13));
  const auto out = (tmp_dir() / "interval.csv").string();
  const auto r = run({"region", "--data", data, "--spec", "2:0.5", "--grid", "61", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(field(r.out, "threshold"), 3.84146, 1e-5);
  EXPECT_GT(field(r.out, "length"), 0.0);
  EXPECT_NE(slurp(out).find("xi,r_n,included"), std::string::npos);
}

namespace {

std::vector<std::string> small_sim(const std::string& cmd, const std::string& out, const std::string& reps) {
  return {cmd,      "--family", "normal", "--mean",  "0,0,1",  "--sd",        "1,1.2,1.3", "--sizes",
          "50",     "--spec",   "0:0.5",  "--spec",  "2:0.5",  "--reps",      reps,        "--seed",
          "7",      "--grid",   "15",     "--bootstrap", "50", "--out",       out};
}

}  // namespace

TEST(CliSimulate, FixedSeedIsByteIdentical) {
  const auto a = (tmp_dir() / "cov_a.csv").string(), b = (tmp_dir() / "cov_b.csv").string();
  const auto ra = run(small_sim("simulate", a, "10"));
  ASSERT_EQ(ra.code, 0) << ra.err;
  auto args = small_sim("simulate", b, "10");
  args.push_back("--workers");
  args.push_back("2");
  const auto rb = run(args);
  ASSERT_EQ(rb.code, 0) << rb.err;
  const auto ta = slurp(a), tb = slurp(b);
  EXPECT_FALSE(ta.empty());
  EXPECT_EQ(ta, tb);
  EXPECT_NE(ra.out.find("out=" + a), std::string::npos);
}

TEST(CliSimulate, DesignFileWithOverrides) {
  const auto design = write_file("design.txt",
                                 "family = normal\nmean = 0,0,1\nsd = 1,1.2,1.3\nsizes = 50\nspec = 0:0.5\n"
                                 "spec = 2:0.5\nreps = 3\nseed = 2\ngrid = 11\nbootstrap = 50\nmethods = np\n");
  const auto out = (tmp_dir() / "cov_design.csv").string();
  const auto r = run({"simulate", "--design", design, "--reps", "2", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto body = slurp(out);
  EXPECT_NE(body.find("np,"), std::string::npos);
  EXPECT_EQ(body.find("elrt,"), std::string::npos);
  EXPECT_EQ(run({"simulate", "--design", design, "--family", "weird"}).code, 2);
}

TEST(CliQq, CountsPairs) {
  const auto out = (tmp_dir() / "qq.csv").string();
  const auto r = run(small_sim("qq", out, "50"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(field(r.out, "pairs"), 50.0);
  EXPECT_EQ(field(r.out, "df"), 2.0);
  std::ifstream in(out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "rank,r_n,chisq_quantile");
  std::vector<double> rn;
  while (std::getline(in, line)) rn.push_back(std::stod(line.substr(line.find(',') + 1)));
  ASSERT_EQ(rn.size(), 50u);
  EXPECT_TRUE(std::is_sorted(rn.begin(), rn.end()));
}

TEST(CliOutput, OutputDirectoryPrefixesRelativePaths) {
  const fs::path dir = tmp_dir() / "outdir";
  fs::create_directories(dir);
  fs::remove(dir / "fit_rel.json");
  ::setenv("DRMEL_OUTPUT_DIR", dir.c_str(), 1);
  const auto r = run({"fit", "--data", one_to_ten(), "--out", "fit_rel.json"});
  ::unsetenv("DRMEL_OUTPUT_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "fit_rel.json"));
  EXPECT_EQ(resolve_output("/abs/x.csv"), fs::path("/abs/x.csv"));
}
