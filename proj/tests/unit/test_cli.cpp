#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "gplsim/gplsim.hpp"

using namespace gplsim;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

struct CliRun {
  int code;
  std::string err;
};

CliRun run_cli(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(GPLSIM_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::map<std::string, double> read_theta(const fs::path& p) {
  const io::Table t = io::read_table(p.string());
  std::map<std::string, double> out;
  for (const auto& r : t.rows) out[r[0]] = std::stod(r[1]);
  return out;
}

std::string sim_csv(const fs::path& dir, int n = 100, std::uint64_t rep = 0) {
  SimDesign d;
  d.n = n;
  d.allow_override = true;
  d.rho_latent = 0.3;
  const std::string path = (dir / "sim.csv").string();
  io::write_dataset_csv(path, generate_replication(d, rep).data);
  return path;
}

}  // namespace

TEST(Ingest, GroupsSubjectsAndSortsVisits) {
  const auto dir = fixtures::scratch("ingest");
  spit(dir / "a.csv",
       "subject_id,visit,y,x1,z1,z2\n"
       "b,2,4.0,0.5,1,2\n"
       "a,1,1.0,0.1,3,4\n"
       "b,1,3.0,0.4,5,6\n"
       "a,2,2.0,0.2,7,8\n");
  const auto data = io::ingest_csv((dir / "a.csv").string());
  ASSERT_EQ(data.n(), 2u);
  EXPECT_EQ(data.p(), 1);
  EXPECT_EQ(data.q(), 2);
  EXPECT_EQ(data[0].id, "b");
  EXPECT_EQ(data[0].y, (VectorXd(2) << 3.0, 4.0).finished());
  EXPECT_EQ(data[0].Z(0, 1), 6.0);
  EXPECT_EQ(data[1].id, "a");
  EXPECT_EQ(data[1].X(1, 0), 0.2);
}

TEST(Ingest, SchemaAndParseErrors) {
  const auto dir = fixtures::scratch("ingest_err");
  spit(dir / "noy.csv", "subject_id,visit,x1,z1\na,1,1,1\n");
  try {
    io::ingest_csv((dir / "noy.csv").string());
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find(" y"), std::string::npos);
  }
  spit(dir / "bad.csv", "subject_id,visit,y,x1,z1\na,1,1,1,1\na,2,oops,1,1\n");
  try {
    io::ingest_csv((dir / "bad.csv").string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  spit(dir / "dup.csv", "subject_id,visit,y,x1,z1\na,1,1,1,1\na,1,2,1,1\n");
  EXPECT_THROW(io::ingest_csv((dir / "dup.csv").string()), DuplicateVisit);
  spit(dir / "gap.csv", "subject_id,visit,y,x1,x3,z1\na,1,1,1,1,1\n");
  EXPECT_THROW(io::ingest_csv((dir / "gap.csv").string()), SchemaError);
  EXPECT_THROW(io::ingest_csv((dir / "absent.csv").string()), ConfigError);
}

TEST(Ingest, StandardizeLeavesBinaryColumns) {
  const auto dir = fixtures::scratch("ingest_std");
  spit(dir / "s.csv",
       "subject_id,visit,y,x1,x2,z1\n"
       "a,1,1,0,1,2\n"
       "a,2,1,1,2,4\n"
       "b,1,1,0,3,6\n"
       "b,2,1,1,6,9\n");
  io::IngestOptions opt;
  opt.standardize = true;
  const auto data = io::ingest_csv((dir / "s.csv").string(), opt);
  double s = 0.0, s2 = 0.0;
  for (const auto& b : data.subjects()) {
    EXPECT_TRUE(b.X(0, 0) == 0.0 && b.X(1, 0) == 1.0);
    s += b.X.col(1).sum();
    s2 += b.X.col(1).squaredNorm();
  }
  EXPECT_NEAR(s, 0.0, 1e-12);
  EXPECT_NEAR(s2 / 3.0, 1.0, 1e-12);
}

TEST(Ingest, RoundTripIsExact) {
  const auto dir = fixtures::scratch("roundtrip");
  const auto data = fixtures::epil_like();
  io::write_dataset_csv((dir / "e.csv").string(), data);
  const auto back = io::ingest_csv((dir / "e.csv").string());
  ASSERT_EQ(back.n(), data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].y, data[i].y);
    EXPECT_EQ(back[i].X, data[i].X);
    EXPECT_EQ(back[i].Z, data[i].Z);
  }
}

TEST(Config, MergeRejectsUnknownKeysAndWrongTypes) {
  cli::RunConfig c;
  EXPECT_THROW(c.merge(nlohmann::json{{"bogus", 1}}, "t"), ConfigError);
  EXPECT_THROW(c.merge(nlohmann::json{{"level", "high"}}, "t"), ConfigError);
  c.merge(nlohmann::json{{"level", 0.9}, {"K", {6, 8}}}, "t");
  EXPECT_EQ(c.num("level"), 0.9);
  EXPECT_EQ(c.ints("K"), (std::vector<int>{6, 8}));
  EXPECT_EQ(cli::RunConfig::from_text("K", "4,5"), nlohmann::json({4, 5}));
  EXPECT_THROW(cli::RunConfig::from_text("level", "x"), ConfigError);
  EXPECT_THROW(cli::RunConfig::from_text("nope", "1"), ConfigError);
}

TEST(CrossValidation, FoldsPartitionSubjects) {
  const auto f = cli::cv_folds(23, 5, 3);
  std::vector<int> seen(23, 0);
  for (const auto& fold : f) {
    EXPECT_GE(fold.size(), 4u);
    for (auto i : fold) ++seen[i];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(f, cli::cv_folds(23, 5, 3));
  EXPECT_NE(f, cli::cv_folds(23, 5, 4));
  EXPECT_THROW(cli::cv_folds(4, 5, 1), ConfigError);
  EXPECT_THROW(cli::cv_folds(10, 1, 1), ConfigError);
}

TEST(Curves, NormalizedToMeanZeroAndIncreasingMiddle) {
  const VectorXd y = (VectorXd(5) << 5.0, 4.0, 3.0, 2.0, 1.0).finished();
  const auto n = cli::normalize_curve(y);
  EXPECT_EQ(n, (std::vector<double>{-2.0, -1.0, 0.0, 1.0, 2.0}));
}

TEST(Binary, FitRecoversNoiselessTruth) {
  const auto dir = fixtures::scratch("cli_fit");
  io::write_dataset_csv((dir / "z.csv").string(), fixtures::zero_noise());
  const CliRun r = run_cli("fit --data " + (dir / "z.csv").string() + " --out " + (dir / "o").string() + " --K 12", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto th = read_theta(dir / "o" / "theta_hat.csv");
  EXPECT_NEAR(th.at("beta1"), 1.0, 1e-3);
  EXPECT_NEAR(th.at("beta2"), -1.0, 1e-3);
  EXPECT_NEAR(th.at("beta3"), 0.5, 1e-3);
  for (const char* a : {"alpha1", "alpha2", "alpha3"}) EXPECT_NEAR(th.at(a), 1.0 / std::sqrt(3.0), 1e-3);
  const auto meta = nlohmann::json::parse(slurp(dir / "o" / "fit_meta.json"));
  EXPECT_TRUE(meta["converged"].get<bool>());
  EXPECT_EQ(meta["K"].get<int>(), 12);
  const auto resolved = nlohmann::json::parse(slurp(dir / "o" / "resolved_config.json"));
  EXPECT_EQ(resolved["K"], nlohmann::json({12}));
  EXPECT_EQ(io::read_table((dir / "o" / "eta_hat.csv").string()).rows.size(), 200u);
}

TEST(Binary, InferReportsEveryMethodPerComponent) {
  const auto dir = fixtures::scratch("cli_infer");
  const auto csv = sim_csv(dir);
  const CliRun r = run_cli("infer --data " + csv + " --out " + (dir / "o").string() + " --K 6 --method all", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const io::Table t = io::read_table((dir / "o" / "ci.csv").string());
  std::map<std::string, int> per;
  for (const auto& row : t.rows) {
    ++per[row[t.column("component")]];
    const double lo = std::stod(row[t.column("lo")]), hi = std::stod(row[t.column("hi")]);
    EXPECT_LT(lo, hi);
  }
  EXPECT_EQ(per.size(), 5u);
  for (const auto& [c, k] : per) EXPECT_EQ(k, 4) << c;
  EXPECT_TRUE(fs::exists(dir / "o" / "curves.svg"));
  const CliRun bad = run_cli("infer --data " + csv + " --out " + (dir / "p").string() + " --components alpha1", dir);
  EXPECT_EQ(bad.code, 2);
}

TEST(Binary, StabilityArithmetic) {
  const auto dir = fixtures::scratch("cli_stab");
  const char* h = "component,method,lo,hi,length\n";
  spit(dir / "i.csv", std::string(h) + "beta1,gee_wald,0,0.30,0.30\nbeta2,naive_el,0,0.2,0.2\n");
  spit(dir / "a.csv", std::string(h) + "beta1,gee_wald,0,0.32,0.32\nbeta2,naive_el,0,0.2,0.2\n");
  spit(dir / "e.csv", std::string(h) + "beta1,gee_wald,0,0.41,0.41\nbeta2,naive_el,0,0.2,0.2\n");
  const std::string common = "stability --out " + (dir / "o").string() + " --ci-ind " + (dir / "i.csv").string() +
                             " --ci-ar1 " + (dir / "a.csv").string();
  const CliRun r = run_cli(common + " --ci-exc " + (dir / "e.csv").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const io::Table t = io::read_table((dir / "o" / "stability.csv").string());
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_NEAR(std::stod(t.rows[0][2]), 1.03 / 3.0, 1e-12);
  EXPECT_NEAR(std::stod(t.rows[0][3]), 0.11, 1e-12);
  EXPECT_EQ(std::stod(t.rows[1][3]), 0.0);

  const CliRun missing = run_cli(common, dir);
  EXPECT_EQ(missing.code, 2);
  const auto j = nlohmann::json::parse(missing.err);
  EXPECT_EQ(j["error"]["kind"], "ConfigError");
  EXPECT_NE(j["error"]["message"].get<std::string>().find("exchangeable"), std::string::npos);
}

TEST(Binary, CrossValidatedDeviance) {
  const auto dir = fixtures::scratch("cli_cv");
  io::write_dataset_csv((dir / "z.csv").string(), fixtures::zero_noise_full_range());
  const CliRun r = run_cli("cv --data " + (dir / "z.csv").string() + " --out " + (dir / "o").string() +
                        " --K 12 --method profile_bel,naive_el",
                    dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const io::Table t = io::read_table((dir / "o" / "cv.csv").string());
  ASSERT_EQ(t.rows.size(), 6u);
  std::vector<std::string> naive;
  for (const auto& row : t.rows) {
    if (row[0] == "profile_bel") {
      EXPECT_LE(std::stod(row[2]), 1e-4) << row[1];
    } else if (row[0] == "naive_el") {
      naive.push_back(row[2]);
    }
  }
  ASSERT_EQ(naive.size(), 3u);
  EXPECT_EQ(naive[0], naive[1]);
  EXPECT_EQ(naive[0], naive[2]);

  const CliRun folds = run_cli("cv --data " + (dir / "z.csv").string() + " --out " + (dir / "p").string() +
                            " --cv-folds 51",
                        dir);
  EXPECT_EQ(folds.code, 2);
  EXPECT_EQ(nlohmann::json::parse(folds.err)["error"]["kind"], "ConfigError");
}

TEST(Binary, ErrorsAndExitCodes) {
  const auto dir = fixtures::scratch("cli_err");
  const auto csv = sim_csv(dir, 60);
  const CliRun flag = run_cli("fit --data " + csv + " --no-such-flag", dir);
  EXPECT_EQ(flag.code, 2);
  EXPECT_EQ(nlohmann::json::parse(flag.err)["error"]["kind"], "ConfigError");

  spit(dir / "c.json", "{\"K\": [6], \"colour\": \"blue\"}");
  const CliRun conf = run_cli("fit --config " + (dir / "c.json").string() + " --data " + csv, dir);
  EXPECT_EQ(conf.code, 2);
  EXPECT_NE(conf.err.find("colour"), std::string::npos);

  const CliRun schema = run_cli("fit --data " + (dir / "stderr.txt").string() + " --out " + (dir / "s").string(), dir);
  EXPECT_EQ(schema.code, 2);

  const std::string base = "fit --data " + csv + " --K 6 --max-outer 1 --tol-theta 1e-14 --out ";
  const CliRun nc = run_cli(base + (dir / "n1").string(), dir);
  EXPECT_EQ(nc.code, 3);
  EXPECT_EQ(nlohmann::json::parse(nc.err)["error"]["kind"], "NonConvergence");
  EXPECT_TRUE(fs::exists(dir / "n1" / "theta_hat.csv"));
  EXPECT_EQ(run_cli(base + (dir / "n2").string() + " --allow-nonconverged", dir).code, 0);
}

TEST(Binary, ConfigFileThenFlags) {
  const auto dir = fixtures::scratch("cli_conf");
  const auto csv = sim_csv(dir, 60);
  spit(dir / "c.json", "{\"K\": [6], \"corr\": \"exchangeable\", \"level\": 0.9}");
  const CliRun r = run_cli("fit --config " + (dir / "c.json").string() + " --data " + csv + " --corr independence --out " +
                        (dir / "o").string(),
                    dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto resolved = nlohmann::json::parse(slurp(dir / "o" / "resolved_config.json"));
  EXPECT_EQ(resolved["corr"], "independence");
  EXPECT_EQ(resolved["level"], 0.9);
  EXPECT_EQ(resolved["K"], nlohmann::json({6}));
}

TEST(Binary, RerunsAreByteIdentical) {
  const auto dir = fixtures::scratch("cli_rerun");
  const auto csv = sim_csv(dir, 60);
  for (const char* o : {"a", "b"}) {
    const CliRun r = run_cli("band --data " + csv + " --K 6 --B-star 8 --L 30 --seed 5 --out " + (dir / "run").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    fs::rename(dir / "run", dir / o);
  }
  for (const char* f : {"band.csv", "band.svg", "resolved_config.json"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  const io::Table t = io::read_table((dir / "a" / "band.csv").string());
  EXPECT_EQ(t.rows.size(), 30u);
  for (const auto& row : t.rows) {
    EXPECT_LE(std::stod(row[t.column("lo")]), std::stod(row[t.column("hi")]));
    EXPECT_LE(std::stod(row[t.column("sim_lo")]), std::stod(row[t.column("lo")]) + 1e-12);
  }
}

TEST(Binary, SimulateWritesMetrics) {
  const auto dir = fixtures::scratch("cli_sim");
  const CliRun r = run_cli("simulate --B 2 --K 6 --method gee_wald --no-with-ci --out " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const io::Table t = io::read_table((dir / "o" / "metrics.csv").string());
  bool rmse = false;
  for (const auto& row : t.rows) {
    EXPECT_EQ(row[t.column("method")], "gee_wald");
    rmse = rmse || row[t.column("metric")] == "rmse_beta2";
  }
  EXPECT_TRUE(rmse);
  EXPECT_EQ(run_cli("simulate --n 150 --B 1 --out " + (dir / "p").string(), dir).code, 2);
}

TEST(Binary, CountPanelFitAndCrossValidation) {
  const auto dir = fixtures::scratch("cli_epil");
  io::write_dataset_csv((dir / "e.csv").string(), fixtures::epil_like());
  const std::string common = " --data " + (dir / "e.csv").string() + " --family poisson --standardize";
  const CliRun f = run_cli("fit" + common + " --out " + (dir / "f").string(), dir);
  ASSERT_EQ(f.code, 0) << f.err;
  const auto meta = nlohmann::json::parse(slurp(dir / "f" / "fit_meta.json"));
  EXPECT_EQ(meta["n_subjects"].get<int>(), 59);
  EXPECT_EQ(meta["family"], "poisson");
  const CliRun c = run_cli("cv" + common + " --K 6 --out " + (dir / "c").string(), dir);
  ASSERT_EQ(c.code, 0) << c.err;
  for (const auto& row : io::read_table((dir / "c" / "cv.csv").string()).rows)
    EXPECT_TRUE(std::isfinite(std::stod(row[2])));
}
