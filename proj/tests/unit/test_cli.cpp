#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../../tools/cli.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"

using namespace ieegclip;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "ieegclip_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Silences stdout/stderr and warnings for the duration of a CLI call.
int quiet_run(const std::vector<std::string>& args) {
  set_warning_sink([](std::string_view) {});
  std::stringstream sink;
  auto* out = std::cout.rdbuf(sink.rdbuf());
  auto* err = std::cerr.rdbuf(sink.rdbuf());
  const int code = cli::run(args);
  std::cout.rdbuf(out);
  std::cerr.rdbuf(err);
  set_warning_sink(nullptr);
  return code;
}

fs::path small_config() {
  const auto path = root() / "config.json";
  if (fs::exists(path)) return path;
  json cfg = {
      {"synth",
       {{"n_channels", 4},
        {"feature_dim", 4},
        {"n_days", 2},
        {"hours_per_day", 10},
        {"file_duration_s", 600.0},
        {"neural_rate_hz", 256.0},
        {"task", {{"enabled", false}}}}},
      {"encoder", {{"hidden_dim", 8}, {"n_blocks", 1}, {"attention_dim", 4}}},
      {"train", {{"max_epochs", 2}, {"batch_size", 32}}},
      {"dtype", "f64"},
      {"seeds", {{"synth_seed", 3}, {"split_seed", 1}, {"init_seed", 2}, {"shuffle_seed", 4}}},
  };
  std::ofstream(path) << cfg.dump(2);
  return path;
}

// synth and pretrain once; later cases reuse the outputs.
const fs::path& pretrained() {
  static const fs::path dir = [] {
    const auto cfg = small_config().string();
    REQUIRE(quiet_run({"synth", "-c", cfg, "-o", (root() / "syn").string()}) == cli::kExitOk);
    REQUIRE(quiet_run({"pretrain", "-c", cfg, "-o", (root() / "pre").string(), "-s",
                       "manifest=" + (root() / "syn" / "weeklong.json").string()}) == cli::kExitOk);
    return root() / "pre";
  }();
  return dir;
}

}  // namespace

TEST_CASE("overrides parse JSON values and keep strings as strings") {
  json cfg = cli::default_config();
  cli::apply_override(cfg, "train.max_epochs=7");
  CHECK(cfg["train"]["max_epochs"] == 7);
  cli::apply_override(cfg, "scaling.fractions=[0.5,1.0]");
  CHECK(cfg["scaling"]["fractions"] == json::array({0.5, 1.0}));
  cli::apply_override(cfg, "pairs.feature_variant=true");
  CHECK(cfg["pairs"]["feature_variant"] == "true");
  cli::apply_override(cfg, "output_dir=/tmp/x y");
  CHECK(cfg["output_dir"] == "/tmp/x y");
  cli::apply_override(cfg, "hour_range=[6,23]");
  CHECK(cfg["hour_range"][1] == 23);
  cli::apply_override(cfg, "new.nested.key=1.5");
  CHECK(cfg["new"]["nested"]["key"] == 1.5);
  CHECK_THROWS_AS(cli::apply_override(cfg, "novalue"), Error);
  CHECK_THROWS_AS(cli::apply_override(cfg, "a..b=1"), Error);
  CHECK_THROWS_AS(cli::apply_override(cfg, "output_dir.x=1"), Error);
}

TEST_CASE("config hashes are stable and content sensitive") {
  const json a = cli::default_config();
  json b = a;
  CHECK(cli::config_hash(a) == cli::config_hash(b));
  CHECK(cli::config_hash(a).size() == 16);
  b["train"]["max_epochs"] = 3;
  CHECK(cli::config_hash(a) != cli::config_hash(b));
}

TEST_CASE("usage errors exit with 2, help with 0") {
  CHECK(quiet_run({}) == cli::kExitUsage);
  CHECK(quiet_run({"frobnicate"}) == cli::kExitUsage);
  CHECK(quiet_run({"pretrain", "--bogus"}) == cli::kExitUsage);
  CHECK(quiet_run({"--help"}) == cli::kExitOk);
}

TEST_CASE("runtime errors exit with 1 and leave a machine-readable error") {
  const auto out = root() / "err";
  CHECK(quiet_run({"pretrain", "-o", out.string(), "-s", "manifest=" + (root() / "missing.json").string()}) ==
        cli::kExitRuntime);
  const auto err = read_json(out / "error.json");
  CHECK(err["error"]["verb"] == "pretrain");
  CHECK(err["error"]["kind"].get<std::string>() == "io");
  CHECK_FALSE(err["error"]["message"].get<std::string>().empty());

  CHECK(quiet_run({"split", "-o", out.string(), "-s", "manifest=" + (pretrained().parent_path() / "syn" / "weeklong.json").string(),
                   "-s", "split.kind=sideways"}) == cli::kExitRuntime);
  CHECK(read_json(out / "error.json")["error"]["kind"] == "config");

  // A later successful run clears the stale error.
  CHECK(quiet_run({"split", "-c", small_config().string(), "-o", out.string(), "-s",
                   "manifest=" + (root() / "syn" / "weeklong.json").string()}) == cli::kExitOk);
  CHECK_FALSE(fs::exists(out / "error.json"));
}

TEST_CASE("synth and pretrain write artifacts with provenance") {
  const auto& pre = pretrained();
  const auto syn = root() / "syn";
  CHECK(fs::exists(syn / "weeklong.json"));
  CHECK(fs::exists(syn / "coupling.json"));
  const auto synth_run = read_json(syn / "run.json");
  CHECK(synth_run["verb"] == "synth");
  CHECK(synth_run["seeds"]["synth_seed"] == 3);

  for (const char* f : {"model.ckpt", "history.json", "split.json", "test_report.json", "test_ranks.csv", "run.json"}) {
    CHECK_MESSAGE(fs::exists(pre / f), f);
  }
  const auto run = read_json(pre / "run.json");
  CHECK(run["config_hash"] == cli::config_hash(run["config"]));
  CHECK(run["config"]["train"]["max_epochs"] == 2);
  CHECK(run["artifacts"].size() >= 5);
  const auto split = read_json(pre / "split.json");
  CHECK(split["assignments"].size() == 20);
}

TEST_CASE("evaluate is deterministic") {
  const auto& pre = pretrained();
  const auto manifest = "manifest=" + (root() / "syn" / "weeklong.json").string();
  const auto ckpt = "checkpoint=" + (pre / "model.ckpt").string();
  const auto cfg = small_config().string();
  REQUIRE(quiet_run({"evaluate", "-c", cfg, "-o", (root() / "ev1").string(), "-s", manifest, "-s", ckpt}) == cli::kExitOk);
  REQUIRE(quiet_run({"evaluate", "-c", cfg, "-o", (root() / "ev2").string(), "-s", manifest, "-s", ckpt}) == cli::kExitOk);
  const auto a = read_json(root() / "ev1" / "report.json");
  const auto b = read_json(root() / "ev2" / "report.json");
  CHECK(a == b);
  CHECK(a["ranks"].size() > 0);
  CHECK(read_text(root() / "ev1" / "ranks.csv") == read_text(root() / "ev2" / "ranks.csv"));
  // Zero-shot evaluation on the pretraining test split reproduces the report
  // written at the end of pretraining.
  CHECK(a["ranks"] == read_json(pre / "test_report.json")["ranks"]);
}

TEST_CASE("compare runs the rank test on two reports") {
  const auto& pre = pretrained();
  const auto out = root() / "cmp";
  REQUIRE(quiet_run({"compare", "-o", out.string(), "-s", "compare.a=" + (pre / "test_report.json").string(), "-s",
                     "compare.b=" + (pre / "test_report.json").string()}) == cli::kExitOk);
  const auto c = read_json(out / "compare.json");
  CHECK(c["p"] == 1.0);
}

TEST_CASE("output directory precedence") {
  const auto env_dir = root() / "from_env";
  setenv("IEEGCLIP_OUTPUT_DIR", env_dir.c_str(), 1);
  const auto manifest = "manifest=" + (root() / "syn" / "weeklong.json").string();
  pretrained();
  CHECK(quiet_run({"split", "-c", small_config().string(), "-s", manifest, "-s", "output_dir=/nonexistent/ignored"}) == cli::kExitOk);
  CHECK(fs::exists(env_dir / "split.json"));
  const auto flag_dir = root() / "from_flag";
  CHECK(quiet_run({"split", "-c", small_config().string(), "-s", manifest, "-o", flag_dir.string()}) == cli::kExitOk);
  CHECK(fs::exists(flag_dir / "split.json"));
  unsetenv("IEEGCLIP_OUTPUT_DIR");
}
