// findrec: train, eval, ablate, synth, bench.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "findrec/findrec.hpp"

namespace fs = std::filesystem;
using namespace findrec;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int report(const std::string& code, const std::string& msg, int exit_code) {
  std::cerr << "error[" << code << "]: " << one_line(msg) << '\n';
  return exit_code;
}

int exit_code_for(const std::string& code) {
  if (code == "config" || code == "unknown_key" || code == "type") return kUsage;
  if (code == "numerical" || code == "solve" || code == "degenerate_samples" || code == "graph") return kNumerical;
  return kData;
}

std::size_t env_threads() {
  const char* v = std::getenv("FINDREC_THREADS");
  if (!v || !*v) return 1;
  try {
    const long n = std::stol(v);
    return n >= 1 ? static_cast<std::size_t>(n) : 1;
  } catch (const std::exception&) {
    throw ConfigError(std::string("FINDREC_THREADS is not an integer: ") + v);
  }
}

template <class T>
std::vector<T> parse_csv(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + tok + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + " is empty");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_text(path, j.dump(2) + "\n");
  }
}

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::string data;
  std::string out;
  std::string metrics_out;
  std::string variant;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

RunConfig resolve(const CommonOpts& o) {
  RunConfig cfg = parse_config(fs::path(o.config), o.sets);
  if (!o.data.empty()) set_config_value(cfg, "data.dir", o.data);
  if (o.seed_given) set_config_value(cfg, "seed", o.seed);
  if (!o.variant.empty()) set_config_value(cfg, "model.variant", o.variant);
  cfg.validate();
  if (cfg.data_dir.empty()) throw ConfigError("no data directory (use --data or data.dir)");
  return cfg;
}

int cmd_synth(const SynthConfig& sc, const std::string& out) {
  if (out.empty()) throw ConfigError("synth needs --out");
  const SyntheticData s = generate_synthetic(sc);
  write_synthetic(s, out);
  std::cout << "wrote " << s.interactions.size() << " interactions for " << sc.n_users << " users and "
            << sc.n_items << " items to " << out << '\n';
  return kOk;
}

int cmd_train(const CommonOpts& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out = o.out.empty() ? fs::path("run") : fs::path(o.out);
  fs::create_directories(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  const PreparedData data = load_data_dir(cfg.data_dir);

  TrainOptions opts;
  opts.eval_threads = env_threads();
  std::ofstream epochs(out / "epochs.jsonl", std::ios::binary);
  opts.on_epoch = [&](const EpochLog& e) {
    nlohmann::json j{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"valid", to_json(e.valid)}};
    epochs << j.dump() << '\n';
    std::cerr << "epoch " << e.epoch << " loss " << e.mean_loss << " valid ndcg@10 " << e.valid.overall.ndcg10
              << '\n';
  };
  const TrainResult res = train(cfg, data, opts);

  std::ostringstream log;
  for (const auto& line : res.run_log) log << line << '\n';
  write_text(out / "run_log.jsonl", log.str());
  save_checkpoint(res.best, out / "checkpoint.frck");
  save_checkpoint(res.last, out / "last.frck");
  const EvalResult test = evaluate(res.best, data.splits.test, data, opts.eval_threads);
  nlohmann::json summary{{"best_epoch", res.best_epoch}, {"test", to_json(test.report)}};
  if (!o.metrics_out.empty()) emit_json(summary, o.metrics_out);
  std::cout << "checkpoint " << (out / "checkpoint.frck").string() << " (epoch " << res.best_epoch
            << "), test ndcg@10 " << test.report.overall.ndcg10 << '\n';
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
             const std::string& metrics_out) {
  if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(fs::path(checkpoint));
  const std::string dir = data_dir.empty() ? run_config_of(ck).data_dir : data_dir;
  if (dir.empty()) throw ConfigError("no data directory (use --data)");
  if (split != "test" && split != "valid") throw ConfigError("--split must be test or valid");
  const PreparedData data = load_data_dir(dir);
  const auto& examples = split == "test" ? data.splits.test : data.splits.valid;
  emit_json(to_json(evaluate(ck, examples, data, env_threads()).report), metrics_out);
  return kOk;
}

int cmd_ablate(const CommonOpts& o, const std::string& seeds_csv) {
  CommonOpts base = o;
  base.variant.clear();
  const RunConfig cfg = resolve(base);
  const auto seeds = parse_csv<std::uint64_t>(seeds_csv, "--seeds");
  std::vector<Variant> variants = all_variants();
  if (!o.variant.empty()) {
    variants.clear();
    std::stringstream ss(o.variant);
    std::string tok;
    while (std::getline(ss, tok, ',')) variants.push_back(parse_variant(tok));
  }
  const PreparedData data = load_data_dir(cfg.data_dir);
  TrainOptions opts;
  opts.eval_threads = env_threads();
  const AblationReport rep = ablate(cfg, data, seeds, variants, opts);
  emit_json(to_json(rep), o.metrics_out);
  return kOk;
}

// Wall time of one inference pass of a Mamba stack over (batch, L, d_model).
double time_stack(const MambaStack& stack, std::size_t batch, std::size_t L, std::size_t d_model, std::size_t repeats,
                  Rng& rng) {
  const ad::Var x = ad::constant(rng.normal_tensor({batch, L, d_model}, 1.0));
  const std::vector<std::size_t> valid(batch, L);
  ad::NoGradGuard no_grad;
  double best = 1e300;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const StackOutput out = stack(x, valid, ForwardContext{});
    const auto t1 = std::chrono::steady_clock::now();
    if (!out.last.value().all_finite()) throw NumericalError("bench produced non-finite output");
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

int cmd_bench(const std::string& lengths_csv, std::size_t d_model, std::size_t batch, std::size_t repeats,
              std::uint64_t seed) {
  const auto lengths = parse_csv<std::size_t>(lengths_csv, "--lengths");
  if (repeats == 0 || batch == 0) throw ConfigError("--repeats and --batch must be >= 1");
  ParamStore store;
  Rng rng(seed);
  MambaConfig mc;
  mc.d_model = d_model;
  const MambaStack stack(store, "bench", mc, rng);
  time_stack(stack, batch, lengths.front(), d_model, 1, rng);  // warm-up
  std::cout << "L,wall_ms,ratio\n";
  double prev = 0.0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const double ms = time_stack(stack, batch, lengths[i], d_model, repeats, rng);
    std::cout << lengths[i] << ',' << std::fixed << std::setprecision(3) << ms << ',';
    if (i > 0) std::cout << std::setprecision(3) << ms / prev;
    std::cout << '\n' << std::defaultfloat;
    prev = ms;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"findrec: multimodal sequential recommender"};
  app.require_subcommand(1);

  CommonOpts common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--set", common.sets, "key=value override (repeatable)");
    sub->add_option("--data", common.data, "dataset directory");
    sub->add_option("--metrics-out", common.metrics_out, "write metrics JSON here");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t s) { common.seed = s, common.seed_given = true; }, "run seed");
  };

  auto* train = app.add_subcommand("train", "train a model and write its checkpoint and run log");
  add_common(train);
  train->add_option("--out", common.out, "output directory (default ./run)");
  train->add_option("--variant", common.variant, "full, no_cross_attn, no_iicm or no_moe");

  std::string checkpoint, split = "test";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", common.data, "dataset directory (default: the one recorded in the checkpoint)");
  eval->add_option("--split", split, "test or valid");
  eval->add_option("--metrics-out", common.metrics_out, "write metrics JSON here");

  std::string seeds = "0";
  auto* abl = app.add_subcommand("ablate", "train and evaluate every ablation variant over seeds");
  add_common(abl);
  abl->add_option("--seeds", seeds, "comma-separated seeds");
  abl->add_option("--variant", common.variant, "comma-separated subset of variants");

  SynthConfig sc;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--users", sc.n_users);
  synth->add_option("--items", sc.n_items);
  synth->add_option("--noise", sc.noise_sigma);
  synth->add_option("--seed", sc.seed);
  synth->add_option("--style-dim", sc.style_dim);
  synth->add_option("--min-len", sc.min_len);
  synth->add_option("--max-len", sc.max_len);
  synth->add_option("--text-dim", sc.text_dim);
  synth->add_option("--image-dim", sc.image_dim);
  synth->add_option("--out", common.out, "output directory")->required();

  std::string lengths = "256,512,1024";
  std::size_t d_model = 64, batch = 1, repeats = 3;
  std::uint64_t bench_seed = 0;
  auto* bench = app.add_subcommand("bench", "time a Mamba stack over sequence lengths");
  bench->add_option("--lengths", lengths, "comma-separated sequence lengths");
  bench->add_option("--d-model", d_model);
  bench->add_option("--batch", batch);
  bench->add_option("--repeats", repeats);
  bench->add_option("--seed", bench_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cout << app.help();
    return report("usage", e.what(), kUsage);
  }

  try {
    if (*synth) return cmd_synth(sc, common.out);
    if (*train) return cmd_train(common);
    if (*eval) return cmd_eval(checkpoint, common.data, split, common.metrics_out);
    if (*abl) return cmd_ablate(common, seeds);
    if (*bench) return cmd_bench(lengths, d_model, batch, repeats, bench_seed);
  } catch (const MissingItem& e) {
    return report(e.code(), e.what(), kData);
  } catch (const Error& e) {
    return report(e.code(), e.what(), exit_code_for(e.code()));
  } catch (const nlohmann::json::exception& e) {
    return report("parse", e.what(), kData);
  } catch (const std::filesystem::filesystem_error& e) {
    return report("io", e.what(), kData);
  } catch (const std::exception& e) {
    return report("internal", e.what(), kData);
  }
  return kUsage;
}
