#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "vlmopt/core.hpp"

namespace vlmopt {

// One JSON object per line; field names match LedgerEntry members.
std::string ledger_line(const LedgerEntry& entry);
LedgerEntry parse_ledger_line(const std::string& line);

/// Append-only run ledger, optionally mirrored to a JSONL file.
///
/// Appends are serialized by an internal mutex, so restarts running on
/// different threads may share one ledger. Each append_batch() call is
/// written with a single flush.
class Ledger {
 public:
  Ledger() = default;
  // Opens `path` for appending; existing entries are loaded first.
  explicit Ledger(std::filesystem::path path);

  Ledger(const Ledger&) = delete;
  Ledger& operator=(const Ledger&) = delete;

  void append(LedgerEntry entry);
  void append_batch(std::vector<LedgerEntry> batch);

  std::vector<LedgerEntry> snapshot() const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

  // Keeps only the first n entries, in memory and on disk.
  void truncate(std::size_t n);

  /// Reads a ledger file. A final line without its newline, or one that
  /// fails to parse, is treated as a torn write and dropped; a bad line
  /// anywhere else throws Error. A missing file yields no entries.
  static std::vector<LedgerEntry> load(const std::filesystem::path& path);

 private:
  void rewrite_locked();

  mutable std::mutex mu_;
  std::filesystem::path path_;
  std::ofstream out_;
  std::vector<LedgerEntry> entries_;
};

// Copies with timestamps cleared, for determinism comparisons.
std::vector<LedgerEntry> without_timestamps(std::vector<LedgerEntry> entries);

}  // namespace vlmopt
