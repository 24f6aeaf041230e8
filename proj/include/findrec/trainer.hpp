#pragma once

// Training loop, leave-one-out evaluation and the ablation driver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "findrec/checkpoint.hpp"
#include "findrec/config.hpp"
#include "findrec/metrics.hpp"
#include "findrec/model.hpp"
#include "findrec/optim.hpp"

namespace findrec {

// ---------------------------------------------------------------------------
// Checkpoint glue.

inline nlohmann::json to_json(const ModelShape& s) {
  return {{"n_items", s.n_items}, {"text_dim", s.text_dim}, {"image_dim", s.image_dim}};
}

inline Checkpoint make_checkpoint(const FindRecModel& model, const OptimState& optim, const RunConfig& cfg,
                                  std::uint64_t epoch) {
  Checkpoint ck;
  ck.config = {{"run", to_json(cfg)}, {"shape", to_json(model.shape())}};
  for (const auto& p : model.params().params()) ck.params.emplace_back(p.name, p.var.value());
  for (const auto& [name, t] : optim.m) ck.optimizer.emplace_back("m/" + name, t);
  for (const auto& [name, t] : optim.v) ck.optimizer.emplace_back("v/" + name, t);
  ck.rng_state = {cfg.seed, optim.step, epoch, 0};
  return ck;
}

inline RunConfig run_config_of(const Checkpoint& ck) {
  if (!ck.config.contains("run")) throw CorruptRecord("checkpoint config lacks the run block");
  RunConfig cfg;
  apply_config_json(cfg, ck.config.at("run"));
  return cfg;
}

inline FindRecModel restore_model(const Checkpoint& ck) {
  const RunConfig cfg = run_config_of(ck);
  const auto& s = ck.config.at("shape");
  ModelShape shape{s.at("n_items"), s.at("text_dim"), s.at("image_dim")};
  FindRecModel model(cfg.model, shape, cfg.seed);
  std::map<std::string, Tensor> values;
  for (const auto& [name, t] : ck.params) {
    if (!values.emplace(name, t).second) throw CorruptRecord("duplicate parameter '" + name + "'");
  }
  if (values.size() != model.params().size()) throw CorruptRecord("checkpoint parameter count differs from model");
  model.params().restore(values);
  return model;
}

inline OptimState restore_optimizer(const Checkpoint& ck) {
  OptimState st;
  st.step = ck.step();
  for (const auto& [name, t] : ck.optimizer) {
    if (name.rfind("m/", 0) == 0) {
      st.m.emplace(name.substr(2), t);
    } else if (name.rfind("v/", 0) == 0) {
      st.v.emplace(name.substr(2), t);
    } else {
      throw CorruptRecord("unknown optimizer record '" + name + "'");
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalOptions {
  bool exclude_seen = true;
  std::size_t batch_size = 256;
  std::size_t threads = 1;
};

struct EvalResult {
  MetricsReport report;
  std::vector<RankResult> ranks;  // ascending user id
};

// Earlier items of the user, minus the target itself.
inline std::unordered_set<std::int64_t> seen_items(const Example& ex) {
  std::unordered_set<std::int64_t> s(ex.context.begin(), ex.context.end());
  s.erase(ex.target);
  return s;
}

inline std::vector<RankResult> rank_batch(const FindRecModel& model, const Batch& batch,
                                          std::span<const Example* const> rows, bool exclude_seen) {
  ad::NoGradGuard no_grad;
  const ModelOutput out = model.forward(batch, ForwardContext{});
  const Tensor& logits = out.logits.value();
  const std::size_t V = logits.dim(1);
  std::vector<RankResult> ranks;
  for (std::size_t r = 0; r < batch.size; ++r) {
    const Example& ex = *rows[r];
    std::unordered_set<std::int64_t> excl;
    if (exclude_seen) excl = seen_items(ex);
    std::span<const double> row(logits.data().data() + r * V, V);
    ranks.push_back({ex.user, rank_of_target(row, ex.target, excl), excl.size(), ex.seq_len});
  }
  return ranks;
}

inline EvalResult evaluate(const FindRecModel& model, const std::vector<Example>& examples, const PreparedData& data,
                           const EvalOptions& opts = {}) {
  if (examples.empty()) throw EmptyDataset("nothing to evaluate");
  std::vector<const Example*> rows;
  for (const auto& e : examples) rows.push_back(&e);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  const std::size_t n_batches = (rows.size() + bs - 1) / bs;
  std::vector<std::vector<RankResult>> per_batch(n_batches);
  const BatchFeatures feats = data.features();
  const std::size_t max_len = model.config().max_len;

  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t b = first; b < n_batches; b += stride) {
      const std::size_t lo = b * bs, n = std::min(bs, rows.size() - lo);
      std::span<const Example* const> chunk(rows.data() + lo, n);
      per_batch[b] = rank_batch(model, make_batch(chunk, max_len, feats), chunk, opts.exclude_seen);
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, n_batches);
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EvalResult res;
  for (auto& v : per_batch) res.ranks.insert(res.ranks.end(), v.begin(), v.end());
  std::stable_sort(res.ranks.begin(), res.ranks.end(),
                   [](const RankResult& a, const RankResult& b) { return a.user < b.user; });
  res.report = build_report(res.ranks);
  return res;
}

inline EvalOptions eval_options(const RunConfig& cfg, std::size_t threads = 1) {
  return {cfg.train.exclude_seen, cfg.train.eval_batch_size, threads};
}

inline EvalResult evaluate(const Checkpoint& ck, const std::vector<Example>& examples, const PreparedData& data,
                           std::size_t threads = 1) {
  const FindRecModel model = restore_model(ck);
  return evaluate(model, examples, data, eval_options(run_config_of(ck), threads));
}

// Batch-mean kernel similarity between the image and text summary vectors,
// in inference mode, averaged over batches of `examples`.
inline double mean_alignment(const FindRecModel& model, const std::vector<Example>& examples,
                             const PreparedData& data, std::size_t batch_size) {
  ad::NoGradGuard no_grad;
  const auto batches = make_batches(examples, batch_size, model.config().max_len, 0, data.features(), false);
  double acc = 0.0;
  for (const auto& b : batches) {
    const ModelOutput out = model.forward(b, ForwardContext{});
    acc += alignment_loss(out.z_img_last, out.z_txt_last).raw_ek;
  }
  return acc / static_cast<double>(batches.size());
}

// ---------------------------------------------------------------------------
// Training.

struct StepLog {
  std::uint64_t step = 0;
  double lr = 0.0;
  double l_rec = 0.0;
  double raw_ek = 0.0;
  std::optional<double> l_ent;
  double grad_norm = 0.0;
};

inline std::string to_json_line(const StepLog& s) {
  nlohmann::json j;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["l_rec"] = s.l_rec;
  j["l_align_rawEK"] = s.raw_ek;
  j["l_ent"] = s.l_ent ? nlohmann::json(*s.l_ent) : nlohmann::json(nullptr);
  j["grad_norm"] = s.grad_norm;
  return j.dump();
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;  // mean total objective over the epoch's steps
  MetricsReport valid;
};

struct TrainResult {
  Checkpoint best;   // best validation NDCG@10
  Checkpoint last;
  std::size_t best_epoch = 0;
  std::vector<std::string> run_log;
  std::vector<EpochLog> epochs;
  double final_raw_ek = 0.0;  // mean_alignment on the validation contexts after the last epoch
};

inline double effective_lambda(const RunConfig& cfg) {
  return cfg.model.variant == Variant::NoIicm ? 0.0 : cfg.stein.lambda;
}

struct TrainOptions {
  std::size_t eval_threads = 1;
  // Called after every epoch; useful for progress output.
  std::function<void(const EpochLog&)> on_epoch;
};

inline TrainResult train(const RunConfig& cfg, const PreparedData& data, const TrainOptions& opts = {}) {
  cfg.validate();
  FindRecModel model(cfg.model, shape_of(data), cfg.seed);
  const std::vector<Example> examples = training_examples(data.splits);
  if (examples.empty()) throw EmptyDataset("no training examples");
  const TrainConfig& tc = cfg.train;
  const std::size_t steps_per_epoch = (examples.size() + tc.batch_size - 1) / tc.batch_size;
  const std::uint64_t total_steps = tc.epochs * steps_per_epoch;
  const double lambda = effective_lambda(cfg);
  const AdamWConfig adam{0.9, 0.999, 1e-8, tc.weight_decay};
  const EvalOptions eval_opts = eval_options(cfg, opts.eval_threads);

  OptimState optim;
  TrainResult res;
  double best_ndcg = -1.0;
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto batches =
        make_batches(examples, tc.batch_size, cfg.model.max_len, hash_key(cfg.seed, epoch), data.features());
    double loss_sum = 0.0;
    for (const Batch& batch : batches) {
      ++step;
      StepLog log;
      log.step = step;
      try {
        const ForwardContext ctx{true, cfg.seed, step, 0.0};
        const ModelOutput out = model.forward(batch, ctx);
        ad::Var l_rec;
        if (tc.loss == LossKind::CrossEntropy) {
          l_rec = rec_loss_ce(out.logits, batch.target);
        } else {
          const auto neg = sample_negatives(batch.target, model.shape().n_items, tc.n_neg,
                                            hash_key(cfg.seed, step, 0x6e6567ULL));
          l_rec = rec_loss_bpr(out.logits, batch.target, neg);
        }
        ad::Var loss = l_rec;
        if (lambda > 0.0) {
          const IicmTerms iicm = iicm_loss(out.z_img_last, out.z_txt_last, cfg.stein);
          log.raw_ek = iicm.raw_ek;
          if (cfg.stein.gamma > 0.0 && !iicm.entropy_skipped) log.l_ent = iicm.l_ent;
          loss = total_loss(l_rec, iicm.loss, lambda);
        } else {
          log.raw_ek = alignment_loss(ad::detach(out.z_img_last), ad::detach(out.z_txt_last)).raw_ek;
        }
        log.l_rec = l_rec.item();
        loss_sum += loss.item();
        ad::backward(loss);
        log.grad_norm = clip_gradients(model.params(), tc.clip_norm);
        log.lr = lr_schedule(step, tc.warmup_steps, total_steps, tc.lr_peak);
        adamw_step(model.params(), optim, log.lr, adam);
        model.params().zero_grad();
      } catch (const NumericalError& e) {
        throw NumericalError("diverged at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                             "): " + e.what());
      }
      res.run_log.push_back(to_json_line(log));
    }
    EpochLog el;
    el.epoch = epoch;
    el.mean_loss = loss_sum / static_cast<double>(batches.size());
    el.valid = evaluate(model, data.splits.valid, data, eval_opts).report;
    if (el.valid.overall.ndcg10 > best_ndcg) {
      best_ndcg = el.valid.overall.ndcg10;
      res.best = make_checkpoint(model, optim, cfg, epoch);
      res.best_epoch = epoch;
    }
    res.epochs.push_back(el);
    if (opts.on_epoch) opts.on_epoch(el);
  }
  res.last = make_checkpoint(model, optim, cfg, tc.epochs);
  res.final_raw_ek = mean_alignment(model, data.splits.valid, data, tc.eval_batch_size);
  return res;
}

// ---------------------------------------------------------------------------
// Ablation.

struct SeedResult {
  std::uint64_t seed = 0;
  MetricsReport test;
  double final_raw_ek = 0.0;
};

struct AblationRow {
  Variant variant = Variant::Full;
  MetricSet mean;
  std::vector<SeedResult> per_seed;
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::Full, Variant::NoCrossAttn, Variant::NoIicm, Variant::NoMoe};
  return v;
}

inline MetricSet mean_metrics(std::span<const SeedResult> runs) {
  MetricSet m;
  if (runs.empty()) return m;
  for (const auto& r : runs) {
    m.n_users += r.test.overall.n_users;
    m.ndcg5 += r.test.overall.ndcg5;
    m.ndcg10 += r.test.overall.ndcg10;
    m.mrr5 += r.test.overall.mrr5;
    m.mrr10 += r.test.overall.mrr10;
  }
  const double n = static_cast<double>(runs.size());
  m.n_users /= runs.size();
  m.ndcg5 /= n;
  m.ndcg10 /= n;
  m.mrr5 /= n;
  m.mrr10 /= n;
  return m;
}

// Trains every variant once per seed and evaluates its best checkpoint on the
// test split.
inline AblationReport ablate(const RunConfig& base, const PreparedData& data, std::span<const std::uint64_t> seeds,
                             std::span<const Variant> variants, const TrainOptions& opts = {}) {
  if (seeds.empty()) throw ConfigError("ablate needs at least one seed");
  AblationReport rep;
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    for (std::uint64_t s : seeds) {
      RunConfig cfg = base;
      cfg.model.variant = v;
      cfg.seed = s;
      if (v == Variant::NoIicm) cfg.stein.lambda = 0.0;
      const TrainResult tr = train(cfg, data, opts);
      row.per_seed.push_back({s, evaluate(tr.best, data.splits.test, data, opts.eval_threads).report, tr.final_raw_ek});
    }
    row.mean = mean_metrics(row.per_seed);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

inline nlohmann::json to_json(const AblationReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& s : r.per_seed) {
      per.push_back({{"seed", s.seed}, {"test", to_json(s.test)}, {"final_raw_ek", s.final_raw_ek}});
    }
    rows.push_back({{"label", variant_label(r.variant)},
                    {"variant", variant_name(r.variant)},
                    {"mean", to_json(r.mean)},
                    {"per_seed", std::move(per)}});
  }
  return {{"rows", std::move(rows)}};
}

}  // namespace findrec
