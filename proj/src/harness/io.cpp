#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include <json.hpp>

#include "drmkit/error.hpp"
#include "drmkit/harness.hpp"

namespace drmkit::harness {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool valid_key(const std::string& key) {
  if (key.empty() || key.front() == '.' || key.back() == '.') return false;
  for (char c : key) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '-' || c == '.';
    if (!ok) return false;
  }
  return key.find("..") == std::string::npos;
}

template <class T>
bool parse_exact(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& origin) {
  Config cfg;
  cfg.origin_ = origin;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected `key = value`");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + "invalid key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "empty value for '" + key + "'");
    if (cfg.values_.count(key)) {
      throw ConfigError(where + "duplicate key '" + key + "' (first set on line " +
                        std::to_string(cfg.lines_[key]) + ")");
    }
    cfg.values_.emplace(key, value);
    cfg.lines_.emplace(key, line_no);
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

void Config::set(const std::string& key, std::string value) {
  if (!valid_key(key)) throw ConfigError("invalid key '" + key + "'");
  values_[key] = std::move(value);
}

const std::string& Config::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
  used_.insert(key);
  return it->second;
}

void Config::bad(const std::string& key, const std::string& what) const {
  std::string where = origin_;
  if (auto it = lines_.find(key); it != lines_.end()) where += ":" + std::to_string(it->second);
  throw ConfigError(where + ": '" + key + "' " + what);
}

std::string Config::str(const std::string& key) const { return raw(key); }

std::string Config::str(const std::string& key, const std::string& fallback) const {
  return has(key) ? raw(key) : fallback;
}

double Config::real(const std::string& key) const {
  const std::string& s = raw(key);
  double v = 0.0;
  if (!parse_exact(s, v) || !std::isfinite(v)) bad(key, "must be a finite number, got '" + s + "'");
  return v;
}

double Config::real(const std::string& key, double fallback) const { return has(key) ? real(key) : fallback; }

std::int64_t Config::integer(const std::string& key) const {
  const std::string& s = raw(key);
  std::int64_t v = 0;
  if (!parse_exact(s, v)) bad(key, "must be an integer, got '" + s + "'");
  return v;
}

std::int64_t Config::integer(const std::string& key, std::int64_t fallback) const {
  return has(key) ? integer(key) : fallback;
}

std::size_t Config::count(const std::string& key, std::size_t fallback) const {
  if (!has(key)) return fallback;
  const std::int64_t v = integer(key);
  if (v < 0) bad(key, "must be non-negative");
  return static_cast<std::size_t>(v);
}

bool Config::flag(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& s = raw(key);
  if (s == "true") return true;
  if (s == "false") return false;
  bad(key, "must be true or false, got '" + s + "'");
}

std::vector<double> Config::reals(const std::string& key, const std::vector<double>& fallback) const {
  if (!has(key)) return fallback;
  const std::string& s = raw(key);
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    double v = 0.0;
    if (!parse_exact(item, v) || !std::isfinite(v)) bad(key, "must be a comma-separated list of numbers");
    out.push_back(v);
  }
  if (out.empty()) bad(key, "must not be empty");
  return out;
}

std::string Config::choice(const std::string& key, const std::vector<std::string>& options,
                           const std::string& fallback) const {
  const std::string v = str(key, fallback);
  for (const auto& o : options) {
    if (v == o) return v;
  }
  std::string list;
  for (const auto& o : options) list += (list.empty() ? "" : ", ") + o;
  bad(key, "must be one of {" + list + "}, got '" + v + "'");
}

void Config::reject_unused() const {
  for (const auto& [key, _] : values_) {
    if (!used_.count(key)) bad(key, "is not a recognised key for this experiment");
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

void write_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_number(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, p);
}

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) {
  for (std::size_t i = 0; i < header.size(); ++i) text_ += (i ? "," : "") + header[i];
  text_ += '\n';
}

void CsvWriter::sep() {
  if (filled_ == columns_) throw std::logic_error("CSV row has more cells than the header");
  if (filled_++) text_ += ',';
}

CsvWriter& CsvWriter::cell(double v) {
  if (!std::isfinite(v)) throw NumericError("non-finite value in CSV column " + std::to_string(filled_));
  sep();
  text_ += format_number(v);
  return *this;
}

CsvWriter& CsvWriter::cell(std::int64_t v) {
  sep();
  text_ += std::to_string(v);
  return *this;
}

CsvWriter& CsvWriter::cell(const std::string& v) {
  if (v.find_first_of(",\"\n") != std::string::npos) throw std::logic_error("CSV text cell needs quoting: " + v);
  sep();
  text_ += v;
  return *this;
}

void CsvWriter::end_row() {
  if (filled_ != columns_) throw std::logic_error("CSV row has fewer cells than the header");
  text_ += '\n';
  filled_ = 0;
  ++rows_;
}

std::filesystem::path resolve_path(const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutRootEnv); root && *root) return std::filesystem::path(root) / p;
  return p;
}

std::string verify_manifest(const std::filesystem::path& run_dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(run_dir / "manifest.json"));
  } catch (const std::exception& e) {
    return std::string("unreadable manifest: ") + e.what();
  }
  try {
    const std::string cfg_file = m.at("config_file").get<std::string>();
    const std::string stored = read_file(run_dir / cfg_file);
    if (sha256_hex(stored) != m.at("config_hash").get<std::string>()) return "config hash does not match " + cfg_file;
    for (const auto& f : m.at("outputs")) {
      if (!std::filesystem::exists(run_dir / f.get<std::string>())) return "missing output " + f.get<std::string>();
    }
  } catch (const std::exception& e) {
    return std::string("malformed manifest: ") + e.what();
  }
  return {};
}

}  // namespace drmkit::harness
