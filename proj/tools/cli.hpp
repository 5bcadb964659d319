#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>

namespace gz::cli {

/// Exit codes of every subcommand.
enum ExitCode : int { kOk = 0, kRuntime = 1, kConfig = 2 };

// Line-oriented key=value file with [section] headers; '#' and ';' start
// comments. Keys are stored as "section.key" ("key" before any header).
class ConfigFile {
 public:
  static ConfigFile parse(std::istream& in, const std::string& origin);
  static ConfigFile load(const std::filesystem::path& path);

  std::optional<std::string> get(const std::string& key) const;
  bool contains(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

 private:
  std::map<std::string, std::string> values_;
};

/// Runs the `gz` command line; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gz::cli
