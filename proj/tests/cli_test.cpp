#include "spinepose/cli.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using spinepose::dispatch;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

json read(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  socklen_t len = sizeof addr;
  int port = 0;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0 &&
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0) {
    port = ntohs(addr.sin_port);
  }
  ::close(fd);
  return port;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("spinepose_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string at(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

TEST_F(CliTest, GradcheckHundredSeedsPasses) {
  const auto r = run({"gradcheck", "--seeds", "100", "--out-dir", dir_.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
  const json m = read(dir_ / "gradcheck.manifest.json");
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["subcommand"], "gradcheck");
  EXPECT_TRUE(m["versions"].contains("eigen"));
}

TEST_F(CliTest, GradcheckJsonOutput) {
  const auto r = run({"--json", "gradcheck", "--seeds", "3", "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  EXPECT_EQ(j["seeds"], 3);
  EXPECT_LT(j["max_rel_error"].get<double>(), 1e-4);
}

TEST_F(CliTest, ImpossibleToleranceIsDomainError) {
  const auto r = run({"gradcheck", "--seeds", "2", "--tolerance", "0", "--out-dir", dir_.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err)["code"], "GradientMismatch");
  EXPECT_EQ(read(dir_ / "gradcheck.manifest.json")["status"], "failed");
}

TEST_F(CliTest, UnknownSubcommandIsUsageError) {
  const auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"eval", "--gt"}).code, 2);
}

TEST_F(CliTest, HelpAndVersionExitZero) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("triangulate-validate"), std::string::npos);
  r = run({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, std::string(spinepose::kVersion) + "\n");
}

TEST_F(CliTest, ConfigFileWithFlagOverride) {
  {
    std::ofstream cfg(at("run.toml"));
    cfg << "seed = 11\n[gradcheck]\nseeds = 4\n";
  }
  auto r = run({"--config", at("run.toml"), "--json", "gradcheck", "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["seeds"], 4);
  EXPECT_EQ(read(dir_ / "gradcheck.manifest.json")["seed"], 11);

  r = run({"--config", at("run.toml"), "--json", "--seed", "2", "gradcheck", "--seeds", "6",
           "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["seeds"], 6);
  const json m = read(dir_ / "gradcheck.manifest.json");
  EXPECT_EQ(m["seed"], 2);
  EXPECT_NE(m["config"].get<std::string>().find("gradcheck.seeds=6"), std::string::npos);
}

TEST_F(CliTest, CorpusGenThenEval) {
  ASSERT_EQ(run({"corpus-gen", "--count", "16", "--out-dir", dir_.string()}).code, 0);
  for (const char* f : {"gt.json", "predictions.json", "detections.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  }
  // Ground truth scored against itself.
  json gt = read(dir_ / "gt.json");
  json self = json::array();
  for (auto a : gt["annotations"]) {
    a["score"] = 1.0;
    self.push_back(a);
  }
  std::ofstream(at("self.json")) << self.dump();
  const auto r = run({"--json", "eval", "--gt", at("gt.json"), "--predictions", at("self.json"),
                      "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& s : json::parse(r.out)["subsets"]) {
    EXPECT_DOUBLE_EQ(s["ap"].get<double>(), 1.0) << s["name"];
  }
  const auto spine = run({"eval", "--gt", at("gt.json"), "--predictions", at("predictions.json"),
                          "--subset", "spine", "--out-dir", dir_.string()});
  EXPECT_EQ(spine.code, 0);
  EXPECT_EQ(spine.out.find("feet"), std::string::npos);
  EXPECT_EQ(run({"eval", "--gt", at("gt.json"), "--predictions", at("predictions.json"),
                 "--subset", "tail", "--out-dir", dir_.string()})
                .code,
            1);
}

TEST_F(CliTest, EvalUnknownImageIdIsDomainError) {
  ASSERT_EQ(run({"corpus-gen", "--count", "4", "--out-dir", dir_.string()}).code, 0);
  json preds = read(dir_ / "predictions.json");
  preds[2]["image_id"] = 999;
  std::ofstream(at("bad.json")) << preds.dump();
  const auto r = run({"eval", "--gt", at("gt.json"), "--predictions", at("bad.json"),
                      "--out-dir", dir_.string()});
  EXPECT_EQ(r.code, 1);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["code"], "UnknownImageId");
  EXPECT_NE(e["message"].get<std::string>().find("999"), std::string::npos);
  const json m = read(dir_ / "eval.manifest.json");
  EXPECT_EQ(m["status"], "error");
  EXPECT_EQ(m["error"]["code"], "UnknownImageId");
}

TEST_F(CliTest, MalformedInputIsParseError) {
  std::ofstream(at("broken.json")) << "{\"images\": [";
  const auto r = run({"pseudo-label", "--input", at("broken.json"), "--out-dir", dir_.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err)["code"], "ParseError");
}

TEST_F(CliTest, PseudoLabelWritesSpine) {
  ASSERT_EQ(run({"corpus-gen", "--count", "5", "--out-dir", dir_.string()}).code, 0);
  const auto r = run({"pseudo-label", "--input", at("detections.json"), "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json doc = read(dir_ / "pseudo_labels.json");
  ASSERT_EQ(doc["annotations"].size(), 5u);
  EXPECT_EQ(doc["annotations"][0]["keypoints"].size(), 3u * 37u);
}

TEST_F(CliTest, TriangulateRoundTripsThroughFiles) {
  auto r = run({"--json", "triangulate-validate", "--frames", "20", "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json synth = json::parse(r.out);
  EXPECT_TRUE(synth["report"]["flagged"].empty());
  fs::create_directories(dir_ / "again");
  r = run({"--json", "triangulate-validate", "--cameras", at("cameras.json"), "--views",
           at("views.json"), "--reference", at("reference.json"), "--out-dir", at("again")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(json::parse(r.out)["body_mean_rmse_m"].get<double>(),
              synth["body_mean_rmse_m"].get<double>(), 1e-9);
  r = run({"triangulate-validate", "--cameras", at("cameras.json"), "--out-dir", dir_.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err)["code"], "InvalidArgument");
}

TEST_F(CliTest, ServeAnswersAndStopsOnSigterm) {
  ASSERT_EQ(run({"corpus-gen", "--count", "6", "--out-dir", dir_.string()}).code, 0);
  ASSERT_EQ(run({"pseudo-label", "--input", at("detections.json"), "--out-dir", dir_.string()}).code, 0);
  const int port = free_port();
  ASSERT_GT(port, 0);
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    std::ostringstream out, err;
    const int code = dispatch({"serve", "--port", std::to_string(port), "--data-dir", at("data"),
                               "--import", at("pseudo_labels.json"), "--batch-size", "4",
                               "--out-dir", dir_.string()},
                              out, err);
    ::_exit(code);
  }
  httplib::Client client("127.0.0.1", port);
  httplib::Result res;
  for (int i = 0; i < 200 && !res; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
    res = client.Get("/api/metrics");
  }
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const json m = json::parse(res->body);
  EXPECT_EQ(m["records"], 6);
  EXPECT_EQ(m["batches"]["pending"], 2);
  ::kill(pid, SIGTERM);
  int status = 0;
  ASSERT_EQ(::waitpid(pid, &status, 0), pid);
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_EQ(read(dir_ / "serve.manifest.json")["status"], "ok");
}

TEST_F(CliTest, RefineSmallRun) {
  const auto r = run({"--json", "refine", "--count", "120", "--teacher-steps", "400", "--steps",
                      "200", "--warmup", "20", "--batches", "2", "--refine-batch-size", "32",
                      "--fine-tune-steps", "40", "--out-dir", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  const auto& t = j["timeline"];
  ASSERT_EQ(t.size(), 3u);
  for (std::size_t i = 1; i < t.size(); ++i) {
    EXPECT_LE(t[i]["label_error_px"].get<double>(), t[i - 1]["label_error_px"].get<double>() + 1e-12);
  }
}

}  // namespace
