#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "xmodal/cli.hpp"

using namespace xmodal;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "xmodal");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Relative path -> contents for every regular file under root.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) m[fs::relative(e.path(), root).string()] = slurp(e.path());
  return m;
}

const std::vector<std::string> kTiny{"--epochs",           "1",  "--batch_size",         "2", "--feature_dim", "8",
                                     "--embed_dim",        "8",  "--stem_channels",      "4", "--stage_channels_0", "4",
                                     "--stage_channels_1", "8",  "--stage_channels_2",   "8", "--bins",        "8",
                                     "--heads",            "2",  "--decoder_channels_0", "4", "--decoder_channels_1", "4",
                                     "--decoder_channels_2", "4", "--decoder_channels_3", "4", "--decoder_channels_4", "4"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  const auto a = xmodal::testing::scratch_dir("cli_gen_a"), b = xmodal::testing::scratch_dir("cli_gen_b");
  ASSERT_EQ(run({"gen-data", "--out", a.string(), "--seed", "7", "--count", "3"}).code, 0);
  ASSERT_EQ(run({"gen-data", "--out", b.string(), "--seed", "7", "--count", "3"}).code, 0);
  const auto ta = tree(a);
  EXPECT_EQ(ta.size(), 1u + 3 * 4);
  EXPECT_EQ(ta, tree(b));
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"gen-data", "--out", "/tmp/x", "--bogus"}).code, 2);
  const auto r = run({"eval", "--checkpoint", "/nonexistent/ck.bin", "--dataset", "/tmp", "--out", "/tmp/o"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ck.bin"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", "/tmp/x", "--tile-size", "40"}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--module", "nope"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, RuntimeFailuresExitWithOne) {
  const auto dir = xmodal::testing::scratch_dir("cli_runtime");
  std::ofstream(dir / "ck.bin") << "not a checkpoint\n";
  EXPECT_EQ(run({"eval", "--checkpoint", (dir / "ck.bin").string(), "--dataset", dir.string(), "--out",
                 (dir / "o").string()})
                .code,
            1);
  // Existing directory without a manifest.
  EXPECT_EQ(run({"train", "--dataset", dir.string(), "--out", (dir / "t").string()}).code, 1);
}

TEST(Cli, TrainEvalLocalizeAndOracleHook) {
  const auto root = xmodal::testing::scratch_dir("cli_pipeline");
  const auto data = root / "data", run_dir = root / "run", ev = root / "eval", ora = root / "oracle";
  ASSERT_EQ(run({"gen-data", "--out", data.string(), "--seed", "3", "--count", "4"}).code, 0);
  const auto t = run(with_tiny({"train", "--dataset", data.string(), "--val-dataset", data.string(), "--out",
                                run_dir.string(), "--seed", "1", "--deterministic"}));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"config.txt", "train_log.csv", "val_log.csv", "checkpoint.bin"})
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  const auto ck = (run_dir / "checkpoint.bin").string();

  const auto e = run({"eval", "--checkpoint", ck, "--dataset", data.string(), "--out", ev.string()});
  ASSERT_EQ(e.code, 0) << e.err;
  std::ifstream s1(ev / "report_summary.csv"), s2(ev / "report_samples.csv");
  const auto report = parse_report_csv(s1, s2);
  EXPECT_EQ(report.samples.size(), 4u);

  ASSERT_EQ(run({"eval", "--checkpoint", ck, "--dataset", data.string(), "--out", ora.string(),
                 "--oracle-predictions"})
                .code,
            0);
  std::ifstream o1(ora / "report_summary.csv"), o2(ora / "report_samples.csv");
  const auto perfect = parse_report_csv(o1, o2);
  for (const auto* m : {&perfect.recall_loc, &perfect.recall_ori})
    for (const auto& [thr, v] : *m) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(perfect.mean_loc_error, 0.0);

  const auto l = run({"localize", "--checkpoint", ck, "--sample", (data / sample_id(0)).string(), "--out",
                      (root / "loc").string()});
  ASSERT_EQ(l.code, 0) << l.err;
  EXPECT_TRUE(fs::exists(root / "loc" / "pose.csv"));
  EXPECT_TRUE(fs::exists(root / "loc" / (sample_id(0) + "_loc.pgm")));
  EXPECT_TRUE(fs::exists(root / "loc" / (sample_id(0) + "_overlay.ppm")));
}

TEST(Cli, GradcheckWritesReport) {
  const auto dir = xmodal::testing::scratch_dir("cli_gradcheck");
  const auto r = run({"gradcheck", "--module", "loss_loc", "--out", dir.string()});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(slurp(dir / "gradcheck.csv").find("loss_loc,"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--module", "corrupted"}).code, 1);
}

TEST(Cli, AblateEnumeratesEveryRow) {
  const auto dir = xmodal::testing::scratch_dir("cli_ablate");
  const auto r = run(with_tiny({"ablate", "--out", dir.string(), "--train-count", "2", "--val-count", "2",
                                "--deterministic"}));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream is(dir / "ablation.csv");
  std::string header, line;
  std::getline(is, header);
  EXPECT_EQ(header.rfind("config,group,", 0), 0u);
  EXPECT_NE(header.find("recall_loc_1m"), std::string::npos);
  std::vector<std::string> names;
  while (std::getline(is, line)) names.push_back(line.substr(0, line.find(',')));
  const std::vector<std::string> want{"full",        "concat_fusion",  "single_scale", "regression_decoder",
                                      "no_reg_loss", "no_contrastive", "no_fourier"};
  EXPECT_EQ(names, want);
  EXPECT_TRUE(fs::exists(dir / "ablation_direction.csv"));
  EXPECT_EQ(run(with_tiny({"ablate", "--out", dir.string(), "--only", "nope"})).code, 2);
}
