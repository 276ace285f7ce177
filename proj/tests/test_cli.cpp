#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dcount/cli.hpp"
#include "support.hpp"

using namespace dcount;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "dcount");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) { return json::parse(std::ifstream(p)); }

// Small, fast experiment shared by the pipeline tests.
std::vector<std::string> small_overrides(const fs::path& root) {
  return {"-s", "synth.num_images=20",
          "-s", "synth.image_size=[32,32]",
          "-s", "synth.count_mean=8",
          "-s", "synth.count_std=3",
          "-s", "synth_output=" + (root / "data").string(),
          "-s", "data.root=" + (root / "data").string(),
          "-s", "output_dir=" + (root / "runs").string(),
          "-s", "counter.tiny_channels=[4,8,8,8]",
          "-s", "counter.gmp_heads=2",
          "-s", "localizer.depth=2",
          "-s", "localizer.base_channels=4",
          "-s", "train_counter.epochs=1",
          "-s", "train_counter.batch_size=4",
          "-s", "train_localizer.epochs=1",
          "-s", "train_localizer.batch_size=4",
          "-s", "ablate.seeds=[1]",
          "-s", "viz.max_images=2"};
}

std::vector<std::string> cmd(const std::string& sub, const fs::path& root,
                             std::vector<std::string> extra = {}) {
  std::vector<std::string> v = {sub};
  for (auto& s : small_overrides(root)) v.push_back(s);
  for (auto& s : extra) v.push_back(s);
  return v;
}

fs::path only_run_dir(const fs::path& runs) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(runs)) dirs.push_back(e.path());
  REQUIRE(dirs.size() == 1);
  return dirs[0];
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
  CHECK(invoke({"synth", "--bogus"}).code == cli::kExitUsage);
  const Outcome help = invoke({"--help"});
  CHECK(help.code == cli::kExitOk);
  for (const auto& s : cli::kSubcommands) CHECK(help.out.find(s) != std::string::npos);
}

TEST_CASE("config errors exit 3 with a one-line error class") {
  const auto root = testsupport::temp_dir("cli_config");
  Outcome o = invoke({"synth", "-s", "counter.nope=1"});
  CHECK(o.code == cli::kExitConfig);
  CHECK(o.err.rfind("error: config: ", 0) == 0);
  CHECK(std::count(o.err.begin(), o.err.end(), '\n') == 1);

  o = invoke({"synth", "-c", (root / "missing.json").string()});
  CHECK(o.code == cli::kExitConfig);

  o = invoke({"eval", "-s", "data.root=" + root.string()});
  CHECK(o.code == cli::kExitConfig);
  CHECK(o.err.find("eval.counter_checkpoint") != std::string::npos);
}

TEST_CASE("device selection: only cpu is accepted") {
  const auto root = testsupport::temp_dir("cli_device");
  ::setenv("DCOUNT_DEVICE", "cuda:0", 1);
  const Outcome o = invoke(cmd("synth", root));
  ::unsetenv("DCOUNT_DEVICE");
  CHECK(o.code == cli::kExitConfig);
  CHECK(o.err.find("DCOUNT_DEVICE") != std::string::npos);
}

TEST_CASE("synth is idempotent across clean directories") {
  const auto a = testsupport::temp_dir("cli_synth_a"), b = testsupport::temp_dir("cli_synth_b");
  REQUIRE(invoke(cmd("synth", a)).code == 0);
  REQUIRE(invoke(cmd("synth", b)).code == 0);
  const json ma = read_json(a / "data" / "manifest.json"), mb = read_json(b / "data" / "manifest.json");
  CHECK(ma["dataset_hash"] == mb["dataset_hash"]);
  CHECK(ma["files"] == mb["files"]);
  CHECK(ma["num_images"] == 20);
  CHECK(fs::exists(a / "data" / "images"));
  CHECK(fs::exists(a / "data" / "annotations"));
}

TEST_CASE("full command sequence: train, eval, viz, ablate") {
  const auto root = testsupport::temp_dir("cli_pipeline");
  REQUIRE(invoke(cmd("synth", root)).code == 0);

  Outcome o = invoke(cmd("train-counter", root, {"-s", "train_counter.checkpoint_dir=" + (root / "ckpt").string()}));
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const fs::path counter_run = only_run_dir(root / "runs");
  const json m = read_json(counter_run / "manifest.json");
  CHECK(m["kind"] == "counter_run");
  // The manifest echoes the resolved configuration.
  CHECK(m["config"] == read_json(counter_run / "config.json"));
  CHECK(m["config"]["synth"]["num_images"] == 20);
  CHECK(fs::exists(root / "ckpt" / "counter.ckpt"));

  const std::string counter_ckpt = (root / "ckpt" / "counter.ckpt").string();
  o = invoke(cmd("train-localizer", root));
  CHECK(o.code == cli::kExitConfig);
  CHECK(o.err.find("train_localizer.counter_checkpoint") != std::string::npos);
  o = invoke(cmd("train-localizer", root,
                 {"-s", "train_localizer.counter_checkpoint=" + counter_ckpt,
                  "-s", "train_localizer.checkpoint_dir=" + (root / "ckpt").string()}));
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(fs::exists(root / "ckpt" / "localizer.ckpt"));

  o = invoke(cmd("eval", root, {"-s", "eval.counter_checkpoint=" + (root / "nope.ckpt").string()}));
  CHECK(o.code == cli::kExitConfig);
  o = invoke(cmd("eval", root,
                 {"-s", "eval.counter_checkpoint=" + counter_ckpt,
                  "-s", "eval.localizer_checkpoint=" + (root / "ckpt" / "localizer.ckpt").string()}));
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(o.out.find("MAE") != std::string::npos);

  o = invoke(cmd("viz", root, {"-s", "eval.counter_checkpoint=" + counter_ckpt}));
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(o.out.find(".png") != std::string::npos);

  o = invoke(cmd("ablate", root));
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(o.out.find("w/o GMP,") != std::string::npos);
  CHECK(o.out.find("Full model,") != std::string::npos);
  CHECK(o.out.find("improvement,") != std::string::npos);
}

TEST_CASE("missing dataset root is a config error") {
  const auto root = testsupport::temp_dir("cli_noroot");
  const Outcome o = invoke(cmd("train-counter", root));
  CHECK(o.code == cli::kExitConfig);
  CHECK(o.err.find("data.root") != std::string::npos);
}

TEST_CASE("make_run_dir: timestamp plus hash, never reused") {
  const auto root = testsupport::temp_dir("cli_rundir");
  const fs::path a = cli::make_run_dir(root, "abc123"), b = cli::make_run_dir(root, "abc123");
  CHECK(a != b);
  CHECK(a.filename().string().find("-abc123") == 15);
  CHECK(fs::is_directory(a));
  CHECK(fs::is_directory(b));
}
