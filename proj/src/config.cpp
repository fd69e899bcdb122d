#include "dbr/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "dbr/error.hpp"

namespace dbr {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw Error("invalid value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error("invalid boolean '" + v + "' for " + key);
}

std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error("config line " + std::to_string(lineno) + " is not key=value: " + t);
    }
    kv.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot read config file " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv{
      {"seed", std::to_string(seed)},
  };
  if (subcommand == "train") {
    kv.insert(kv.end(), {
                            {"dataset", dataset},
                            {"train-size", std::to_string(train_size)},
                            {"val-size", std::to_string(val_size)},
                            {"dim", std::to_string(dim)},
                            {"hidden", std::to_string(hidden)},
                            {"batchsize", std::to_string(batchsize)},
                            {"epochs", std::to_string(epochs)},
                            {"no-shuffle", no_shuffle ? "true" : "false"},
                            {"optimizer", optimizer},
                            {"lr", format_double(lr)},
                            {"momentum", format_double(momentum)},
                            {"workers", std::to_string(workers)},
                            {"transport", transport},
                            {"rank", std::to_string(rank)},
                            {"endpoints", endpoints},
                            {"timeout-ms", std::to_string(timeout_ms)},
                            {"snapshot", snapshot},
                            {"log", log},
                        });
  } else if (subcommand == "bench-allreduce") {
    kv.insert(kv.end(), {
                            {"sizes", sizes},
                            {"workers", bench_workers},
                            {"iters", std::to_string(iters)},
                            {"timeout-ms", std::to_string(timeout_ms)},
                        });
  }
  return kv;
}

void RunConfig::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "seed") seed = parse_number<std::uint64_t>(k, v);
    else if (k == "dataset") dataset = v;
    else if (k == "train-size") train_size = parse_number<std::size_t>(k, v);
    else if (k == "val-size") val_size = parse_number<std::size_t>(k, v);
    else if (k == "dim") dim = parse_number<std::size_t>(k, v);
    else if (k == "hidden") hidden = parse_number<std::size_t>(k, v);
    else if (k == "batchsize") batchsize = parse_number<std::size_t>(k, v);
    else if (k == "epochs") epochs = parse_number<std::size_t>(k, v);
    else if (k == "no-shuffle") no_shuffle = parse_bool(k, v);
    else if (k == "optimizer") optimizer = v;
    else if (k == "lr") lr = std::stod(v);
    else if (k == "momentum") momentum = std::stod(v);
    else if (k == "workers" && subcommand == "bench-allreduce") bench_workers = v;
    else if (k == "workers") workers = parse_number<int>(k, v);
    else if (k == "transport") transport = v;
    else if (k == "rank") rank = parse_number<int>(k, v);
    else if (k == "endpoints") endpoints = v;
    else if (k == "timeout-ms") timeout_ms = parse_number<std::int64_t>(k, v);
    else if (k == "snapshot") snapshot = v;
    else if (k == "log") log = v;
    else if (k == "sizes") sizes = v;
    else if (k == "iters") iters = parse_number<std::size_t>(k, v);
    else throw Error("unknown config key '" + k + "'");
  }
}

std::size_t parse_size(const std::string& text) {
  if (text.empty()) throw Error("empty size");
  std::size_t mult = 1;
  std::string digits = text;
  const char last = static_cast<char>(std::tolower(static_cast<unsigned char>(text.back())));
  if (last == 'k') mult = 1024;
  if (last == 'm') mult = 1024 * 1024;
  if (last == 'g') mult = 1024ULL * 1024 * 1024;
  if (mult != 1) digits.pop_back();
  return parse_number<std::size_t>("size '" + text + "'", digits) * mult;
}

}  // namespace dbr
