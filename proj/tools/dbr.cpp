// Command-line front end: train, gradcheck, kernel eval, bench-allreduce.
//
// Exit codes: 0 success, 1 a check or run failed, 2 usage error.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dbr/communicator.hpp"
#include "dbr/config.hpp"
#include "dbr/data_parallel.hpp"
#include "dbr/gradcheck.hpp"
#include "dbr/kernel.hpp"
#include "dbr/link.hpp"
#include "dbr/ops.hpp"
#include "dbr/training.hpp"

extern char** environ;

namespace {

using namespace dbr;
using json = nlohmann::json;

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic") {
    return {make_synthetic(cfg.train_size, cfg.dim, cfg.seed), make_synthetic(cfg.val_size, cfg.dim, cfg.seed + 1)};
  }
  if (cfg.dataset.rfind("idx:", 0) == 0) {
    const auto files = split(cfg.dataset.substr(4), ',');
    if (files.size() != 2) throw UsageError("--dataset idx: expects idx:<images>,<labels>");
    Dataset all = load_idx(files[0], files[1]);
    // The last val-size examples are held out for validation.
    const std::size_t hold = std::min(cfg.val_size, all.size() / 2);
    Dataset val(all.end() - static_cast<long>(hold), all.end());
    all.resize(all.size() - hold);
    return {std::move(all), std::move(val)};
  }
  throw UsageError("--dataset must be 'synthetic' or 'idx:<images>,<labels>'");
}

ClassifierConfig classifier_config(const RunConfig& cfg, const Dataset& train) {
  ClassifierConfig c;
  c.n_hid = cfg.hidden;
  c.batchsize = cfg.batchsize;
  c.epochs = cfg.epochs;
  c.seed = cfg.seed;
  c.shuffle = !cfg.no_shuffle;
  c.dtype = train.empty() ? DType::f64 : train[0].x.dtype();
  c.optimizer.name = cfg.optimizer;
  c.optimizer.lr = cfg.lr;
  c.optimizer.momentum = cfg.momentum;
  return c;
}

// Runs training on this process (single worker, one TCP rank, or all
// in-process ranks). Rank 0 reports.
int run_training(const RunConfig& cfg) {
  if (cfg.optimizer != "sgd" && cfg.optimizer != "momentum" && cfg.optimizer != "adam") {
    throw UsageError("--optimizer must be sgd, momentum or adam");
  }
  auto [train, val] = load_datasets(cfg);
  const ClassifierConfig cc = classifier_config(cfg, train);
  const std::chrono::milliseconds timeout(cfg.timeout_ms);

  std::ofstream log_file;
  if (!cfg.log.empty()) {
    log_file.open(cfg.log);
    if (!log_file) throw Error("cannot write " + cfg.log);
  }
  std::ostream& log = cfg.log.empty() ? std::cout : log_file;

  auto body = [&](Communicator* comm) {
    const bool reporter = comm == nullptr || comm->rank() == 0;
    std::shared_ptr<MLP> model;
    auto on_epoch = [&](const EpochRecord& rec) {
      if (!reporter) return;
      log << to_json_line(rec) << std::endl;
      std::cerr << "epoch " << rec.epoch << "  loss " << rec.mean_loss << "  val_acc "
                << rec.val_accuracy.value_or(0.0) << "  " << rec.wall_ms << " ms\n";
    };
    train_classifier(cc, train, val, comm, on_epoch, &model);
    if (reporter && !cfg.snapshot.empty()) {
      save(*model, std::filesystem::path(cfg.snapshot));
      std::cerr << "saved snapshot to " << cfg.snapshot << "\n";
    }
  };

  if (cfg.workers <= 1 && cfg.rank < 0) {
    body(nullptr);
  } else if (cfg.transport == "inprocess") {
    launch_inprocess(cfg.workers, [&](Communicator& comm) { body(&comm); }, timeout);
  } else {
    const auto endpoints = parse_endpoints(cfg.endpoints);
    if (static_cast<int>(endpoints.size()) != cfg.workers) {
      throw UsageError("--endpoints lists " + std::to_string(endpoints.size()) + " endpoints for " +
                       std::to_string(cfg.workers) + " workers");
    }
    auto comm = create_tcp_communicator(cfg.rank, endpoints, timeout);
    body(comm.get());
  }
  return kOk;
}

// Re-executes this binary once per rank with --rank/--endpoints appended and
// waits for all of them.
int spawn_tcp_workers(const RunConfig& cfg, const std::vector<std::string>& args) {
  std::string endpoints = cfg.endpoints;
  if (endpoints.empty()) {
    for (auto port : free_local_ports(cfg.workers)) {
      endpoints += (endpoints.empty() ? "" : ",") + std::string("127.0.0.1:") + std::to_string(port);
    }
  }
  std::vector<std::string> base;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--endpoints") {
      ++i;
      continue;
    }
    if (args[i].rfind("--endpoints=", 0) == 0) continue;
    base.push_back(args[i]);
  }
  std::vector<pid_t> pids;
  for (int r = 0; r < cfg.workers; ++r) {
    std::vector<std::string> argv_s{"/proc/self/exe"};
    argv_s.insert(argv_s.end(), base.begin(), base.end());
    argv_s.insert(argv_s.end(), {"--rank", std::to_string(r), "--endpoints", endpoints});
    std::vector<char*> argv;
    for (auto& s : argv_s) argv.push_back(s.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), environ) != 0) {
      throw Error("failed to start worker " + std::to_string(r));
    }
    pids.push_back(pid);
  }
  int result = kOk;
  for (std::size_t done = 0; done < pids.size(); ++done) {
    int status = 0;
    const pid_t pid = ::wait(&status);
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    if (!ok && result == kOk) {
      result = WIFEXITED(status) ? WEXITSTATUS(status) : kFailed;
      // One failed rank dooms the job; stop the others instead of letting
      // them wait out their timeouts.
      for (auto p : pids) {
        if (p != pid) ::kill(p, SIGTERM);
      }
    }
  }
  return result;
}

int run_gradcheck(const RunConfig& cfg) {
  bool all = true;
  for (const auto& c : op_catalog()) {
    const GradcheckReport r = gradcheck(c, cfg.seed);
    all = all && r.passed;
    char second[32] = "n/a";
    if (r.second_order_error) std::snprintf(second, sizeof second, "%.3e", *r.second_order_error);
    std::printf("%-24s first %.3e  second %s  tol %.0e  %s\n", r.name.c_str(), r.first_order_error, second,
                r.tolerance, r.passed ? "PASS" : "FAIL");
  }
  return all ? kOk : kFailed;
}

Tensor tensor_from_json(const json& j, DType dtype) {
  std::vector<std::size_t> dims;
  const json* cur = &j;
  while (cur->is_array()) {
    dims.push_back(cur->size());
    if (cur->empty()) break;
    cur = &(*cur)[0];
  }
  std::vector<double> values;
  std::function<void(const json&, std::size_t)> walk = [&](const json& node, std::size_t depth) {
    if (depth == dims.size()) {
      if (!node.is_number()) throw UsageError("kernel arguments must be numbers or nested arrays of numbers");
      values.push_back(node.get<double>());
      return;
    }
    if (!node.is_array() || node.size() != dims[depth]) throw UsageError("ragged array in kernel argument");
    for (const auto& child : node) walk(child, depth + 1);
  };
  walk(j, 0);
  return Tensor::from_values(Shape(dims), std::move(values), dtype);
}

json tensor_to_json(const Tensor& t) {
  json j;
  j["dtype"] = dtype_name(t.dtype());
  j["shape"] = t.shape().dims();
  j["data"] = std::vector<double>(t.values().begin(), t.values().end());
  return j;
}

struct KernelArgs {
  std::string in_sig, out_sig, body, name = "kernel", reduce, axes, dtype = "float64";
  std::vector<std::string> args;
  bool keepdims = false;
};

int run_kernel_eval(const KernelArgs& k) {
  DType default_dtype;
  if (k.dtype == "float64") default_dtype = DType::f64;
  else if (k.dtype == "float32") default_dtype = DType::f32;
  else throw UsageError("--dtype must be float32 or float64");

  const auto params = kernel::parse_signature(k.in_sig);
  std::map<std::string, std::string> given;
  for (const auto& a : k.args) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw UsageError("--arg expects name=<json>, got '" + a + "'");
    given[a.substr(0, eq)] = a.substr(eq + 1);
  }
  std::vector<Tensor> inputs;
  for (const auto& p : params) {
    auto it = given.find(p.name);
    if (it == given.end()) throw UsageError("missing --arg for input '" + p.name + "'");
    json j;
    try {
      j = json::parse(it->second);
    } catch (const json::exception& e) {
      throw UsageError("--arg " + p.name + " is not valid JSON: " + e.what());
    }
    inputs.push_back(tensor_from_json(j, p.type.concrete.value_or(default_dtype)));
    given.erase(it);
  }
  if (!given.empty()) throw UsageError("--arg '" + given.begin()->first + "' is not a kernel input");

  json out;
  if (k.reduce.empty()) {
    auto kern = kernel::compile_elementwise(k.in_sig, k.out_sig, k.body, k.name);
    const auto results = (*kern)(inputs);
    for (std::size_t i = 0; i < results.size(); ++i) out[kern->outputs()[i].name] = tensor_to_json(results[i]);
  } else {
    kernel::FoldOp op;
    double identity;
    if (k.reduce == "add") {
      op = kernel::FoldOp::add;
      identity = 0.0;
    } else if (k.reduce == "max") {
      op = kernel::FoldOp::max;
      identity = -std::numeric_limits<double>::infinity();
    } else {
      throw UsageError("--reduce must be add or max");
    }
    std::optional<std::vector<std::size_t>> axes;
    if (!k.axes.empty()) {
      axes.emplace();
      for (const auto& a : split(k.axes, ',')) axes->push_back(std::stoul(a));
    }
    auto kern = kernel::compile_reduction(k.in_sig, k.out_sig, k.body, op, identity, k.name);
    out[kern->outputs()[0].name] = tensor_to_json(kern->reduce(inputs, axes, k.keepdims));
  }
  std::cout << out.dump() << "\n";
  return kOk;
}

int run_bench(const RunConfig& cfg) {
  std::vector<std::size_t> sizes;
  for (const auto& s : split(cfg.sizes, ',')) sizes.push_back(parse_size(s));
  std::vector<int> workers;
  for (const auto& w : split(cfg.bench_workers, ',')) {
    const int n = std::stoi(w);
    if (n < 1) throw UsageError("--workers entries must be positive");
    workers.push_back(n);
  }
  if (sizes.empty() || workers.empty()) throw UsageError("--sizes and --workers must not be empty");
  std::ostream& out = std::cout;
  out << "n,bytes,comm_ms_mean,iter_ms_mean\n";
  for (int n : workers) {
    std::vector<BenchRow> rows;
    auto fn = [&](Communicator& comm) {
      auto r = bench_allreduce(comm, sizes, cfg.iters);
      if (comm.rank() == 0) rows = std::move(r);
    };
    if (cfg.transport == "tcp") {
      launch_tcp_local(n, fn, std::chrono::milliseconds(cfg.timeout_ms));
    } else {
      launch_inprocess(n, fn, std::chrono::milliseconds(cfg.timeout_ms));
    }
    for (const auto& r : rows) {
      out << r.n << "," << r.bytes << "," << r.comm_ms_mean << "," << r.iter_ms_mean << "\n";
      std::cerr << "n=" << r.n << " bytes=" << r.bytes << " compute " << r.compute_ms_mean << " ms, comm "
                << r.comm_ms_mean << " ms, iteration " << r.iter_ms_mean << " ms\n";
    }
  }
  return kOk;
}

// Values from a config file fill in every option not given on the command
// line.
void apply_config_file(CLI::App& sub, const std::string& path) {
  for (const auto& [key, value] : read_key_values(path)) {
    if (key == "config") continue;
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("config file " + path + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Define-by-run neural network toolkit"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_file;
  std::string dump_config;

  auto* train = app.add_subcommand("train", "Train an MLP classifier; prints one JSON line per epoch");
  train->add_option("--config", config_file, "key=value file; flags override its values");
  train->add_option("--dump-config", dump_config, "Write the effective settings as key=value and exit");
  train->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  train->add_option("--dataset", cfg.dataset, "synthetic or idx:<images>,<labels>")->capture_default_str();
  train->add_option("--train-size", cfg.train_size, "Synthetic training examples")->capture_default_str();
  train->add_option("--val-size", cfg.val_size, "Validation examples")->capture_default_str();
  train->add_option("--dim", cfg.dim, "Synthetic input dimension")->capture_default_str();
  train->add_option("--hidden", cfg.hidden, "Hidden units")->capture_default_str();
  train->add_option("--batchsize", cfg.batchsize, "Per-worker minibatch size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train->add_option("--epochs", cfg.epochs, "Epochs")->capture_default_str();
  train->add_flag("--no-shuffle", cfg.no_shuffle, "Visit examples in dataset order");
  train->add_option("--optimizer", cfg.optimizer, "sgd, momentum or adam")->capture_default_str();
  train->add_option("--lr", cfg.lr, "Learning rate (alpha for adam)")->capture_default_str();
  train->add_option("--momentum", cfg.momentum, "Momentum coefficient")->capture_default_str();
  train->add_option("--workers", cfg.workers, "Number of data-parallel workers")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  train->add_option("--transport", cfg.transport, "inprocess or tcp")
      ->check(CLI::IsMember({"inprocess", "tcp"}))
      ->capture_default_str();
  train->add_option("--rank", cfg.rank, "This process's rank (tcp); omit to spawn all workers");
  train->add_option("--endpoints", cfg.endpoints, "host:port per rank, comma separated (tcp)");
  train->add_option("--timeout-ms", cfg.timeout_ms, "Communication timeout")->capture_default_str();
  train->add_option("--snapshot", cfg.snapshot, "Save final parameters here");
  train->add_option("--log", cfg.log, "Write JSON lines here instead of stdout");

  auto* gc = app.add_subcommand("gradcheck", "Check every differentiable op against finite differences");
  gc->add_option("--seed", cfg.seed, "Input seed")->capture_default_str();

  KernelArgs kargs;
  auto* kernel_cmd = app.add_subcommand("kernel", "User-defined kernels");
  kernel_cmd->require_subcommand(1);
  auto* keval = kernel_cmd->add_subcommand("eval", "Compile a kernel and apply it; prints JSON");
  keval->add_option("--in", kargs.in_sig, "Input signature, e.g. 'float32 x, float32 y'")->required();
  keval->add_option("--out", kargs.out_sig, "Output signature, e.g. 'float32 w'")->required();
  keval->add_option("--body", kargs.body, "Body, e.g. 'w = x * y'")->required();
  keval->add_option("--name", kargs.name, "Kernel name")->capture_default_str();
  keval->add_option("--arg", kargs.args, "name=<JSON number or nested array>, one per input");
  keval->add_option("--dtype", kargs.dtype, "dtype for generic inputs")->capture_default_str();
  keval->add_option("--reduce", kargs.reduce, "add or max: build a reduction kernel");
  keval->add_option("--axes", kargs.axes, "Comma-separated reduction axes (default all)");
  keval->add_flag("--keepdims", kargs.keepdims, "Keep reduced axes with extent 1");

  auto* bench = app.add_subcommand("bench-allreduce", "Time all-reduce against a fixed compute step; prints CSV");
  bench->add_option("--config", config_file, "key=value file; flags override its values");
  bench->add_option("--sizes", cfg.sizes, "Payload sizes, e.g. 1k,1m")->capture_default_str();
  bench->add_option("--workers", cfg.bench_workers, "Worker counts, e.g. 1,2,4")->capture_default_str();
  bench->add_option("--iters", cfg.iters, "Iterations per size")->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--transport", cfg.transport, "inprocess or tcp")
      ->check(CLI::IsMember({"inprocess", "tcp"}))
      ->capture_default_str();
  bench->add_option("--timeout-ms", cfg.timeout_ms, "Communication timeout")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train) {
      cfg.subcommand = "train";
      if (!config_file.empty()) apply_config_file(*train, config_file);
      if (!dump_config.empty()) {
        std::ofstream(dump_config) << format_key_values(cfg.to_key_values());
        return kOk;
      }
      if (cfg.transport == "tcp" && cfg.rank < 0) {
        return spawn_tcp_workers(cfg, std::vector<std::string>(argv + 1, argv + argc));
      }
      return run_training(cfg);
    }
    if (*gc) return run_gradcheck(cfg);
    if (*keval) return run_kernel_eval(kargs);
    if (*bench) {
      cfg.subcommand = "bench-allreduce";
      if (!config_file.empty()) apply_config_file(*bench, config_file);
      return run_bench(cfg);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error in config file: " << e.what() << "\n";
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "kernel parse error " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kOk;
}
