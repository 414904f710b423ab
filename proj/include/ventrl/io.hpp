#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ventrl {

/// Round-trip formatting: 17 significant digits reproduce the exact double.
inline std::string format_full(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Compensated (Kahan) accumulator for long sums of small terms.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - c_;
    const double t = s_ + y;
    c_ = (t - s_) - y;
    s_ = t;
  }
  double value() const { return s_; }

 private:
  double s_ = 0.0;
  double c_ = 0.0;
};

/// Minimal CSV writer. Numeric cells are written with full precision so
/// reruns with identical config and seeds produce byte-identical files.
class CsvFile {
 public:
  explicit CsvFile(const std::filesystem::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path.string());
  }

  void raw_line(const std::string& line) { out_ << line << '\n'; }

  void row(std::initializer_list<std::string> cells) {
    bool first = true;
    for (const auto& c : cells) {
      if (!first) out_ << ',';
      out_ << c;
      first = false;
    }
    out_ << '\n';
  }

  /// Close explicitly and fail loudly; artifacts must be flushed before the
  /// process reports success.
  void close() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failure on CSV output");
    out_.close();
  }

 private:
  std::ofstream out_;
};

inline std::string cell(double x) { return format_full(x); }
inline std::string cell(int x) { return std::to_string(x); }
inline std::string cell(long x) { return std::to_string(x); }
inline std::string cell(std::uint64_t x) { return std::to_string(x); }
inline std::string cell(const std::string& s) { return s; }

struct ManifestInfo {
  std::string command;
  std::uint64_t config_hash = 0;
  std::vector<std::uint64_t> seeds;
  double wall_clock_s = 0.0;
  std::vector<std::string> artifacts;
};

/// Plain-text run manifest: enough to reproduce and to detect config drift.
inline void write_manifest(const std::filesystem::path& path,
                           const ManifestInfo& info,
                           const std::string& generator_id) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "command: " << info.command << '\n';
  out << "config_hash: " << info.config_hash << '\n';
  out << "generator: " << generator_id << '\n';
  out << "seeds:";
  for (auto s : info.seeds) out << ' ' << s;
  out << '\n';
  out << "wall_clock_s: " << format_full(info.wall_clock_s) << '\n';
  for (const auto& a : info.artifacts) out << "artifact: " << a << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failure on manifest");
}

}  // namespace ventrl
