#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "meda/common.hpp"
#include "meda/data.hpp"
#include "meda/metrics.hpp"
#include "meda/model.hpp"
#include "meda/optim.hpp"
#include "meda/rng.hpp"

namespace meda {

struct SchedulePair {
  int t = 1;  // dataset index, 1-based
  int r = 1;  // bank index, 1-based
  bool operator==(const SchedulePair&) const = default;
};

// Which (dataset, bank) pairs train, in order. Default: every dataset in
// ascending order trains every bank once, bank order ascending.
struct Schedule {
  int T = 1;
  int k = 1;
  std::vector<SchedulePair> selection;

  static Schedule full(int T, int k) {
    Schedule s;
    s.T = T;
    s.k = k;
    for (int t = 1; t <= T; ++t) {
      for (int r = 1; r <= k; ++r) s.selection.push_back({t, r});
    }
    return s;
  }

  void validate() const {
    if (T < 1) throw ConfigError("schedule.T must be >= 1");
    if (k < 1) throw ConfigError("schedule.k must be >= 1");
    std::vector<SchedulePair> seen;
    for (const auto& p : selection) {
      if (p.t < 1 || p.t > T) {
        throw ConfigError("schedule references dataset t=" + std::to_string(p.t) +
                          " outside [1, " + std::to_string(T) + "]");
      }
      if (p.r < 1 || p.r > k) {
        throw ConfigError("schedule references bank r=" + std::to_string(p.r) +
                          " outside [1, " + std::to_string(k) + "]");
      }
      for (const auto& q : seen) {
        if (q == p) {
          throw ConfigError("schedule pair (t=" + std::to_string(p.t) +
                            ", r=" + std::to_string(p.r) + ") appears more than once");
        }
      }
      seen.push_back(p);
    }
  }
};

struct RunResult {
  std::string run_id;
  std::string label;
  std::vector<MetricRecord> records;
  std::vector<double> pass_wall_ms;  // measured, reporting only
};

// One training pass: which dataset, which bank, what resets happen first,
// and which parameter groups actually move.
struct PassPlan {
  int t = 1;
  int epoch = 1;  // position within dataset t (drives the shuffle seed)
  int bank_id = 1;
  bool reset_bank = false;   // drop rows + sparse slots, same seed (same-init reruns)
  bool reinit_mlp = false;
  u64 mlp_seed = 0;
  bool train_mlp = true;
  bool train_emb = true;
};

struct EngineConfig {
  ModelConfig model;
  OptimConfig optim;
  int batch_size = 256;
  u64 base_seed = 1;
  std::string run_id;
  std::string label;
  bool emit_timings = false;      // keep wall_ms out of records for byte-stable CSVs
  bool collect_snapshots = false; // per-pass MLP/bank snapshots (convergence diagnostics)

  void validate() const {
    model.validate();
    optim.validate();
    if (batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
  }
};

inline u64 mlp_seed_for(u64 base_seed) { return derive_key(base_seed, 101, 0); }
inline u64 bank_seed_for(u64 base_seed, int r) { return base_seed ^ static_cast<u64>(r); }
inline u64 epoch_seed_for(u64 base_seed, int t, int epoch) {
  return derive_key(base_seed, 102, static_cast<u64>(t), static_cast<u64>(epoch));
}

// Full engine state for one run: the shared MLP, every bank, optimizer.
template <class S>
struct ModelState {
  MlpParams<S> mlp;
  std::map<int, EmbeddingBank<S>> banks;
  OptimState<S> optim;
};

template <class S>
ModelState<S> init_state(const EngineConfig& cfg, int num_banks) {
  ModelState<S> st;
  st.mlp = init_mlp<S>(cfg.model, mlp_seed_for(cfg.base_seed));
  st.optim = OptimState<S>(cfg.optim);
  for (int r = 1; r <= num_banks; ++r) {
    st.banks.emplace(r, EmbeddingBank<S>(r, bank_seed_for(cfg.base_seed, r),
                                         cfg.model.init_kind, cfg.model.init_range,
                                         cfg.model.embed_dim));
  }
  return st;
}

// One full pass over train: shuffle by epoch_seed, minibatch, forward /
// backward / step. Returns the mean per-sample loss seen during the pass.
template <class S>
double train_one_epoch(MlpParams<S>& mlp, EmbeddingBank<S>& bank, OptimState<S>& optim,
                       const Dataset& train, const ModelConfig& mcfg, u64 epoch_seed,
                       int batch_size, bool train_mlp = true, bool train_emb = true) {
  if (train.samples.empty()) throw DataError("train_one_epoch: empty training dataset");
  if (batch_size < 1) throw ConfigError("train_one_epoch: batch_size must be >= 1");

  std::vector<size_t> order(train.samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  SplitMix64 rng(epoch_seed);
  rng.shuffle(order);

  ForwardTrace<S> trace;
  GradAccum<S> acc;
  double loss_sum = 0.0;
  const size_t n = order.size();
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(n, start + static_cast<size_t>(batch_size));
    acc.reset_like(mlp);
    for (size_t i = start; i < end; ++i) {
      const SparseSample& s = train.samples[order[i]];
      forward_sample(mlp, bank, s, mcfg, trace);
      const S loss = backward_into(mlp, trace, s.label, mcfg, acc);
      if (!std::isfinite(static_cast<double>(loss))) {
        throw NumericError("non-finite loss at batch starting sample " +
                           std::to_string(start) + " (sample index " +
                           std::to_string(order[i]) + ")");
      }
    }
    const S inv = S(1) / static_cast<S>(end - start);
    acc.scale(inv);

    for (const auto& l : acc.mlp.layers) {
      for (const S g : l.W.data) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("non-finite MLP gradient at batch starting sample " +
                             std::to_string(start));
        }
      }
    }

    if (train_mlp) optim.step_dense(mlp, acc.mlp);
    if (train_emb) optim.step_sparse(bank, std::span<const RowGrad<S>>(acc.rows));
    loss_sum += acc.loss_sum;
  }
  return loss_sum / static_cast<double>(n);
}

// Scores the test set with (mlp, bank); pure, never mutates the bank.
template <class S>
std::pair<double, double> evaluate(const MlpParams<S>& mlp, const EmbeddingBank<S>& bank,
                                   const Dataset& test, const ModelConfig& mcfg) {
  std::vector<double> probs(test.samples.size());
  std::vector<int> labels(test.samples.size());
  for (size_t i = 0; i < test.samples.size(); ++i) {
    const S z = score_sample(mlp, bank, test.samples[i], mcfg);
    probs[i] = static_cast<double>(sigmoid(z));
    labels[i] = test.samples[i].label;
  }
  double a;
  try {
    a = auc(probs, labels);
  } catch (const MetricError&) {
    a = std::nan("");  // single-class test block; flagged downstream
  }
  return {a, logloss(probs, labels)};
}

template <class S>
struct RunOutput {
  RunResult result;
  ModelState<S> state;
  int last_trained_bank = 1;
  std::vector<ParamSnapshot> mlp_snapshots;   // one per pass when collected
  std::vector<ParamSnapshot> bank_snapshots;  // snapshot of the pass's bank
  std::map<std::pair<int, int>, int> pass_counts;  // (t, bank) -> trained passes
};

// Executes a pass plan over [first_pass, end_pass) (supports checkpoint
// resume and early stop). All run_* entry points funnel through here so the
// degenerate equivalences hold structurally.
template <class S>
void execute_plan(RunOutput<S>& out, const std::vector<PassPlan>& plan,
                  const std::vector<Dataset>& train_parts, const Dataset& test,
                  const EngineConfig& cfg, size_t first_pass = 0,
                  size_t end_pass = static_cast<size_t>(-1),
                  const std::function<void(size_t)>& after_pass = {}) {
  using clock = std::chrono::steady_clock;
  const size_t stop = std::min(end_pass, plan.size());
  for (size_t p = first_pass; p < stop; ++p) {
    const PassPlan& pass = plan[p];
    if (pass.t < 1 || pass.t > static_cast<int>(train_parts.size())) {
      throw ConfigError("pass references dataset t=" + std::to_string(pass.t) +
                        " but only " + std::to_string(train_parts.size()) + " exist");
    }
    auto bank_it = out.state.banks.find(pass.bank_id);
    if (bank_it == out.state.banks.end()) {
      throw ConfigError("pass references unknown bank " + std::to_string(pass.bank_id));
    }
    EmbeddingBank<S>& bank = bank_it->second;

    if (pass.reset_bank) {
      bank.reset();
      if (!cfg.optim.keep_embed_slots) out.state.optim.reset_embedding_slots(pass.bank_id);
    }
    if (pass.reinit_mlp) {
      out.state.mlp = init_mlp<S>(cfg.model, pass.mlp_seed);
      out.state.optim.reset_dense_slots();
    }

    const auto t0 = clock::now();
    const double mean_loss = train_one_epoch(
        out.state.mlp, bank, out.state.optim, train_parts[static_cast<size_t>(pass.t - 1)],
        cfg.model, epoch_seed_for(cfg.base_seed, pass.t, pass.epoch), cfg.batch_size,
        pass.train_mlp, pass.train_emb);
    const auto [test_auc, test_ll] = evaluate(out.state.mlp, bank, test, cfg.model);
    const double wall =
        std::chrono::duration<double, std::milli>(clock::now() - t0).count();

    MetricRecord rec;
    rec.run_id = cfg.run_id;
    rec.variant = cfg.label;
    rec.dataset_index = pass.t;
    rec.epoch = pass.epoch;
    rec.bank_id = pass.bank_id;
    rec.train_mean_loss = mean_loss;
    rec.test_auc = test_auc;
    rec.test_logloss = test_ll;
    rec.wall_ms = cfg.emit_timings ? wall : 0.0;
    out.result.records.push_back(rec);
    out.result.pass_wall_ms.push_back(wall);
    out.last_trained_bank = pass.bank_id;
    out.pass_counts[{pass.t, pass.bank_id}] += 1;

    if (cfg.collect_snapshots) {
      out.mlp_snapshots.push_back(snapshot_mlp(out.state.mlp));
      out.bank_snapshots.push_back(snapshot_bank(bank));
    }
  }
}

inline std::vector<PassPlan> plan_direct(int k) {
  std::vector<PassPlan> plan;
  for (int e = 1; e <= k; ++e) {
    plan.push_back({.t = 1, .epoch = e, .bank_id = 1});
  }
  return plan;
}

inline std::vector<PassPlan> plan_meda_nc(int k) {
  std::vector<PassPlan> plan;
  for (int r = 1; r <= k; ++r) {
    plan.push_back({.t = 1, .epoch = r, .bank_id = r});
  }
  return plan;
}

inline std::vector<PassPlan> plan_meda_c(const Schedule& schedule) {
  schedule.validate();
  std::vector<PassPlan> plan;
  std::map<int, int> epoch_within;  // dataset -> passes so far
  for (const SchedulePair& sel : schedule.selection) {
    PassPlan p;
    p.t = sel.t;
    p.epoch = ++epoch_within[sel.t];
    p.bank_id = sel.r;
    plan.push_back(p);
  }
  return plan;
}

template <class S>
RunOutput<S> run_direct(int k, const Dataset& train, const Dataset& test,
                        const EngineConfig& cfg) {
  if (k < 1) throw ConfigError("run_direct: k must be >= 1");
  RunOutput<S> out;
  out.state = init_state<S>(cfg, 1);
  out.result.run_id = cfg.run_id;
  out.result.label = cfg.label;
  execute_plan(out, plan_direct(k), {train}, test, cfg);
  return out;
}

// Epoch r trains a freshly initialized bank (seed base_seed ^ r) while the
// MLP carries over; embedding optimizer slots start cold with each bank.
template <class S>
RunOutput<S> run_meda_nc(int k, const Dataset& train, const Dataset& test,
                         const EngineConfig& cfg) {
  if (k < 1) throw ConfigError("run_meda_nc: k must be >= 1");
  RunOutput<S> out;
  out.state = init_state<S>(cfg, k);
  out.result.run_id = cfg.run_id;
  out.result.label = cfg.label;
  execute_plan(out, plan_meda_nc(k), {train}, test, cfg);
  return out;
}

// k pre-seeded banks; each selected (t, r) trains bank r on dataset t once,
// the MLP training on every pass. Unselected banks simply carry forward.
template <class S>
RunOutput<S> run_meda_c(const Schedule& schedule, const std::vector<Dataset>& train_parts,
                        const Dataset& test, const EngineConfig& cfg) {
  schedule.validate();
  if (static_cast<int>(train_parts.size()) != schedule.T) {
    throw ConfigError("run_meda_c: schedule.T=" + std::to_string(schedule.T) + " but " +
                      std::to_string(train_parts.size()) + " datasets supplied");
  }
  RunOutput<S> out;
  out.state = init_state<S>(cfg, schedule.k);
  out.result.run_id = cfg.run_id;
  out.result.label = cfg.label;
  execute_plan(out, plan_meda_c(schedule), train_parts, test, cfg);
  return out;
}

inline const std::vector<std::string>& variant_tags() {
  static const std::vector<std::string> tags = {
      "emb_fix",         "mlp_fix",         "emb_fix_after_1",  "mlp_fix_after_1",
      "emb_same_init",   "mlp_same_init",   "emb_reinit",       "mlp_reinit",
      "d1_emb_as_initial", "d1_emb_as_fixed", "medac_emb_reuse", "medac_multi_mlp",
      "medac_reversed_order", "medac_omit_even", "medac_omit_odd"};
  return tags;
}

inline bool variant_needs_two_datasets(const std::string& tag) {
  return tag.starts_with("d1_") || tag.starts_with("medac_");
}

// Builds the pass plan for one ablation variant. Single-dataset variants
// control which parameter group trains or how it reinitializes; two-dataset
// variants reshape the continual schedule.
inline std::vector<PassPlan> plan_variant(const std::string& tag, int k, int T,
                                          u64 base_seed, int* num_banks) {
  *num_banks = 1;
  std::vector<PassPlan> plan;

  auto single = [&](auto&& tweak) {
    for (int e = 1; e <= k; ++e) {
      PassPlan p{.t = 1, .epoch = e, .bank_id = 1};
      tweak(p, e);
      plan.push_back(p);
    }
  };

  if (tag == "emb_fix") {
    single([](PassPlan& p, int) { p.train_emb = false; });
  } else if (tag == "mlp_fix") {
    single([](PassPlan& p, int) { p.train_mlp = false; });
  } else if (tag == "emb_fix_after_1") {
    single([](PassPlan& p, int e) { p.train_emb = (e == 1); });
  } else if (tag == "mlp_fix_after_1") {
    single([](PassPlan& p, int e) { p.train_mlp = (e == 1); });
  } else if (tag == "emb_same_init") {
    single([](PassPlan& p, int e) { p.reset_bank = (e > 1); });
  } else if (tag == "mlp_same_init") {
    single([&](PassPlan& p, int e) {
      p.reinit_mlp = (e > 1);
      p.mlp_seed = mlp_seed_for(base_seed);
    });
  } else if (tag == "emb_reinit") {
    *num_banks = k;
    plan = plan_meda_nc(k);
  } else if (tag == "mlp_reinit") {
    single([&](PassPlan& p, int e) {
      p.reinit_mlp = (e > 1);
      p.mlp_seed = derive_key(base_seed, 103, static_cast<u64>(e));
    });
  } else if (tag == "d1_emb_as_initial" || tag == "medac_emb_reuse") {
    if (T < 2) throw ConfigError("variant '" + tag + "' needs T >= 2 datasets");
    plan.push_back({.t = 1, .epoch = 1, .bank_id = 1});
    for (int e = 1; e <= k; ++e) plan.push_back({.t = 2, .epoch = e, .bank_id = 1});
  } else if (tag == "d1_emb_as_fixed") {
    if (T < 2) throw ConfigError("variant '" + tag + "' needs T >= 2 datasets");
    plan.push_back({.t = 1, .epoch = 1, .bank_id = 1});
    for (int e = 1; e <= k; ++e) {
      plan.push_back({.t = 2, .epoch = e, .bank_id = 1, .train_emb = false});
    }
  } else if (tag == "medac_multi_mlp") {
    if (T < 2) throw ConfigError("variant '" + tag + "' needs T >= 2 datasets");
    *num_banks = k;
    plan = plan_meda_c(Schedule::full(T, k));
    for (PassPlan& p : plan) {
      if (p.t == 1 && p.bank_id >= 2) {
        p.reinit_mlp = true;
        p.mlp_seed = derive_key(base_seed, 103, static_cast<u64>(p.bank_id));
      }
    }
  } else if (tag == "medac_reversed_order" || tag == "medac_omit_even" ||
             tag == "medac_omit_odd") {
    if (T < 2) throw ConfigError("variant '" + tag + "' needs T >= 2 datasets");
    *num_banks = k;
    Schedule s;
    s.T = T;
    s.k = k;
    for (int r = 1; r <= k; ++r) s.selection.push_back({1, r});
    if (tag == "medac_reversed_order") {
      for (int r = k; r >= 1; --r) s.selection.push_back({2, r});
    } else if (tag == "medac_omit_even") {
      for (int r = 1; r <= k; r += 2) s.selection.push_back({2, r});
    } else {
      for (int r = 2; r <= k; r += 2) s.selection.push_back({2, r});
    }
    plan = plan_meda_c(s);
  } else {
    throw ConfigError("unknown variant tag '" + tag + "'");
  }
  return plan;
}

template <class S>
RunOutput<S> run_variant(const std::string& tag, int k, const std::vector<Dataset>& train_parts,
                         const Dataset& test, const EngineConfig& cfg) {
  if (k < 1) throw ConfigError("run_variant: k must be >= 1");
  int num_banks = 1;
  const auto plan =
      plan_variant(tag, k, static_cast<int>(train_parts.size()), cfg.base_seed, &num_banks);
  RunOutput<S> out;
  out.state = init_state<S>(cfg, num_banks);
  out.result.run_id = cfg.run_id;
  out.result.label = cfg.label;
  execute_plan(out, plan, train_parts, test, cfg);
  return out;
}

}  // namespace meda
