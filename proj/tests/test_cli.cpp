#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "findrec_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome run(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt";
  const fs::path err = work_dir() / "stderr.txt";
  const std::string cmd = std::string(FINDREC_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

const std::string kTiny =
    "--set model.d_id=8 --set model.d_hidden=8 --set model.d_align=8 --set model.heads=2 --set model.experts=2 "
    "--set model.n_layers=1 --set model.d_state=4 --set model.max_len=10 --set train.batch_size=32 "
    "--set train.warmup_steps=2";

const std::regex kErrorLine(R"(^error\[[a-z_]+\]: [^\n]+\n$)");

}  // namespace

TEST(Cli, SynthTrainEvalHappyPath) {
  const fs::path data = work_dir() / "data";
  const fs::path out = work_dir() / "run";
  Outcome s = run("synth --users 20 --items 15 --style-dim 4 --text-dim 6 --image-dim 5 --max-len 10 --seed 3 --out " +
              data.string());
  ASSERT_EQ(s.code, 0) << s.err;
  for (const char* f : {"interactions.tsv", "text.frf", "image.frf", "truth.json"}) EXPECT_TRUE(fs::exists(data / f));

  Outcome t = run("train --data " + data.string() + " " + kTiny + " --set train.epochs=2 --seed 1 --out " +
              out.string() + " --metrics-out " + (out / "summary.json").string());
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"checkpoint.frck", "last.frck", "run_log.jsonl", "config.json", "epochs.jsonl"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto cfg = nlohmann::json::parse(slurp(out / "config.json"));
  EXPECT_EQ(cfg["seed"], 1);
  EXPECT_EQ(cfg["model"]["heads"], 2);
  const auto summary = nlohmann::json::parse(slurp(out / "summary.json"));

  Outcome e = run("eval --checkpoint " + (out / "checkpoint.frck").string());
  ASSERT_EQ(e.code, 0) << e.err;
  const auto metrics = nlohmann::json::parse(e.out);
  EXPECT_EQ(metrics, summary["test"]);
  EXPECT_EQ(metrics["overall"]["n_users"], 20);
  EXPECT_TRUE(metrics["buckets"].contains("5-10"));
}

TEST(Cli, MissingSubcommandIsUsageError) {
  const Outcome r = run("");
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(std::regex_match(r.err, kErrorLine)) << r.err;
  EXPECT_EQ(run("frobnicate").code, 1);
}

TEST(Cli, ErrorsMapToExitCodes) {
  const Outcome unknown = run("train --data " + work_dir().string() + " --set foo=1");
  EXPECT_EQ(unknown.code, 1);
  EXPECT_TRUE(std::regex_match(unknown.err, kErrorLine)) << unknown.err;
  EXPECT_NE(unknown.err.find("error[unknown_key]"), std::string::npos);

  const Outcome badtype = run("train --data x --set model.d_id=wide");
  EXPECT_EQ(badtype.code, 1);
  EXPECT_NE(badtype.err.find("error[type]"), std::string::npos);

  const Outcome nodata =
      run("train --data " + (work_dir() / "nowhere").string() + " --out " + (work_dir() / "nowhere_run").string());
  EXPECT_EQ(nodata.code, 2);
  EXPECT_TRUE(std::regex_match(nodata.err, kErrorLine)) << nodata.err;

  std::ofstream(work_dir() / "junk.frck") << "JUNKJUNK";
  const Outcome magic = run("eval --checkpoint " + (work_dir() / "junk.frck").string() + " --data x");
  EXPECT_EQ(magic.code, 2);
  EXPECT_NE(magic.err.find("error[bad_magic]"), std::string::npos);
}

TEST(Cli, MissingFeatureRowExitsWithDataCode) {
  const fs::path data = work_dir() / "gap";
  ASSERT_EQ(run("synth --users 6 --items 8 --style-dim 2 --text-dim 3 --image-dim 3 --max-len 8 --out " +
                data.string()).code,
            0);
  // keep only the header and the first record of the image table
  const std::string image = slurp(data / "image.frf");
  std::string cut = image.substr(0, 12 + 4 + 3 * 4);
  cut[4] = 1;
  cut[5] = cut[6] = cut[7] = 0;
  std::ofstream(data / "image.frf", std::ios::binary) << cut;
  const Outcome r = run("train --data " + data.string() + " " + kTiny + " --set train.epochs=1 --out " +
                    (work_dir() / "gap_run").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error[missing_item]"), std::string::npos) << r.err;
}

TEST(Cli, BenchPrintsOneRowPerLength) {
  const Outcome r = run("bench --lengths 8,16,32 --d-model 8 --repeats 1");
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "L,wall_ms,ratio");
  const std::regex row(R"(^(8|16|32),[0-9]+\.[0-9]{3},([0-9]+\.[0-9]{3})?$)");
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_TRUE(std::regex_match(line, row)) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  EXPECT_EQ(run("bench --lengths 8,x").code, 1);
}
