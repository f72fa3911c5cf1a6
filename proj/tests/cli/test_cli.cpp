#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <doctest.h>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

const fs::path kTmp = fs::temp_directory_path() / ("drmkit_cli_" + std::to_string(::getpid()));

Result cli(const std::string& args) {
  fs::create_directories(kTmp);
  const fs::path log = kTmp / "out.log";
  const std::string cmd = std::string("'") + DRMKIT_CLI_PATH + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string write_config(const std::string& name, const std::string& text) {
  fs::create_directories(kTmp);
  const fs::path p = kTmp / name;
  std::ofstream(p) << text;
  return p.string();
}

const std::string kFm =
    "experiment = fm-train\nseed = 2\ndata.task = vector2d\ndata.means = 2,0; -2,0\n"
    "model.hidden = 8\nmodel.blocks = 4\nfm.steps = 4\nfm.batch = 8\n";

}  // namespace

TEST_CASE("usage and argument errors exit 1") {
  Result r = cli("");
  CHECK(r.code == 1);
  CHECK(r.output.find("Usage") != std::string::npos);
  CHECK(r.output.find("drm-train") != std::string::npos);

  r = cli("--help");
  CHECK(r.code == 0);
  CHECK(cli("--version").output.find("0.1.0") != std::string::npos);

  CHECK(cli("launch --config x").code == 1);
  CHECK(cli("fm-train").code == 1);
  CHECK(cli("fm-train --config /nonexistent/file.conf").code == 1);
  CHECK(cli("fm-train --config x --seed abc").code == 1);
}

TEST_CASE("config errors exit 1, divergence exits 2, success exits 0") {
  const std::string out = (kTmp / "run").string();
  const std::string good = write_config("good.conf", kFm + "output.dir = " + out + "\n");
  Result r = cli("fm-train --config '" + good + "'");
  CHECK(r.code == 0);
  CHECK(r.output.find("fm-train: wrote 3 files under " + out) != std::string::npos);
  CHECK(fs::exists(fs::path(out) / "manifest.json"));

  r = cli("fm-train --seed 5 --out '" + out + "5' --config '" + good + "'");
  CHECK(r.code == 0);
  CHECK(fs::exists(fs::path(out + "5") / "metrics/fm_train_s5.csv"));

  const std::string typo = write_config("typo.conf", kFm + "output.dir = " + out + "\nfm.stpes = 3\n");
  r = cli("fm-train --config '" + typo + "'");
  CHECK(r.code == 1);
  CHECK(r.output.find("'fm.stpes' is not a recognised key") != std::string::npos);

  CHECK(cli("eval --config '" + good + "'").code == 1);

  const std::string dup = write_config("dup.conf", kFm + "output.dir = " + out + "\nfm.steps = 50\n");
  r = cli("fm-train --config '" + dup + "'");
  CHECK(r.code == 1);
  CHECK(r.output.find("duplicate key 'fm.steps'") != std::string::npos);

  std::string text = kFm;
  text.replace(text.find("fm.steps = 4"), 12, "fm.steps = 50");
  const std::string nan = write_config("nan.conf", text + "output.dir = " + out + "\nfm.lr = 1e200\n");
  r = cli("fm-train --config '" + nan + "'");
  CHECK(r.code == 2);
  CHECK(r.output.find("error:") != std::string::npos);

  fs::remove_all(kTmp);
}
