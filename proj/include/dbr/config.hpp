#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dbr {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Flat `key=value` lines. Blank lines and lines starting with '#' are
// skipped; whitespace around keys and values is trimmed.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& file);
std::string format_key_values(const KeyValues& kv);

// Every setting of the command-line tool. Keys match the long flag names.
struct RunConfig {
  std::string subcommand = "train";
  std::uint64_t seed = 0;

  std::string dataset = "synthetic";
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t dim = 2;

  std::size_t hidden = 16;
  std::size_t batchsize = 32;
  std::size_t epochs = 20;
  bool no_shuffle = false;

  std::string optimizer = "sgd";
  double lr = 0.1;
  double momentum = 0.9;

  int workers = 1;
  std::string transport = "inprocess";
  int rank = -1;
  std::string endpoints;
  std::int64_t timeout_ms = 30000;

  std::string snapshot;
  std::string log;

  std::string sizes = "1k,64k,1m";
  std::string bench_workers = "1,2,4";
  std::size_t iters = 100;

  KeyValues to_key_values() const;
  // Throws Error for unknown keys or unparsable values.
  void apply(const KeyValues& kv);

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// "1k" -> 1024, "1m" -> 1048576, plain integers as bytes.
std::size_t parse_size(const std::string& text);

}  // namespace dbr
