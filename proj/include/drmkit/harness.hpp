#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace drmkit::harness {

// Flat `key = value` configuration with dotted section names. `#` starts a
// comment; blank lines are ignored; duplicate keys are an error.
//
// Every get() marks its key as used. After a runner has read its settings,
// reject_unused() turns any key it did not ask for into a ConfigError, so
// misspelled keys never pass silently.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "<config>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value);

  std::string str(const std::string& key) const;
  std::string str(const std::string& key, const std::string& fallback) const;
  double real(const std::string& key) const;
  double real(const std::string& key, double fallback) const;
  std::int64_t integer(const std::string& key) const;
  std::int64_t integer(const std::string& key, std::int64_t fallback) const;
  std::size_t count(const std::string& key, std::size_t fallback) const;  // integer >= 0
  bool flag(const std::string& key, bool fallback) const;
  std::vector<double> reals(const std::string& key, const std::vector<double>& fallback) const;
  std::string choice(const std::string& key, const std::vector<std::string>& options, const std::string& fallback) const;

  void reject_unused() const;

  const std::string& origin() const { return origin_; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const std::string& raw(const std::string& key) const;
  [[noreturn]] void bad(const std::string& key, const std::string& what) const;

  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  mutable std::set<std::string> used_;
};

// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

// Writes via a sibling temporary file and rename, so readers never see a
// partial file.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// Locale-independent shortest round-trip formatting.
std::string format_number(double v);

// CSV with a fixed header. Numeric cells must be finite.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  CsvWriter& cell(double v);
  CsvWriter& cell(std::int64_t v);
  CsvWriter& cell(std::size_t v) { return cell(static_cast<std::int64_t>(v)); }
  CsvWriter& cell(int v) { return cell(static_cast<std::int64_t>(v)); }
  CsvWriter& cell(const std::string& v);
  void end_row();

  std::size_t rows() const { return rows_; }
  const std::string& text() const { return text_; }

 private:
  void sep();

  std::size_t columns_;
  std::size_t filled_ = 0;
  std::size_t rows_ = 0;
  std::string text_;
};

inline constexpr const char* kOutRootEnv = "DRMKIT_OUT_ROOT";

// Relative paths resolve against $DRMKIT_OUT_ROOT when set, else the working directory.
std::filesystem::path resolve_path(const std::filesystem::path& p);

struct RunOptions {
  std::string command;  // fm-train | drm-train | align | sample | eval | report
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

struct RunResult {
  std::string experiment;
  std::filesystem::path out_dir;
  std::vector<std::string> files;  // relative to out_dir
};

// Parses the config, runs the experiment and writes config.txt, metrics/,
// checkpoints/ and manifest.json under the output directory.
// Throws ConfigError for bad configs or missing inputs.
RunResult run(const RunOptions& options);

// Checks that manifest.json in `run_dir` names its stored config's hash and
// that every listed output exists. Returns a description of the first
// problem, or an empty string.
std::string verify_manifest(const std::filesystem::path& run_dir);

const char* version();

}  // namespace drmkit::harness
