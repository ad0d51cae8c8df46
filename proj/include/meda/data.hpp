#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "meda/common.hpp"

namespace meda {

struct BehaviorEvent {
  u64 item_id = 0;
  u64 category_id = 0;
  bool operator==(const BehaviorEvent&) const = default;
};

// One impression: three categorical IDs, an optional behavior sequence and a
// binary label. Timestamps only order samples; they carry no other meaning.
struct SparseSample {
  u64 user_id = 0;
  u64 item_id = 0;
  u64 category_id = 0;
  std::vector<BehaviorEvent> behavior_seq;
  int label = 0;  // 0 or 1
  i64 timestamp = 0;
  bool operator==(const SparseSample&) const = default;
};

enum class FieldKind { scalar_categorical, sequence };

struct FieldSpec {
  std::string name;
  FieldKind kind;
};

struct Dataset {
  std::vector<SparseSample> samples;
  std::vector<FieldSpec> field_schema = default_schema();

  static std::vector<FieldSpec> default_schema();
  size_t size() const { return samples.size(); }
  bool sorted_by_timestamp() const;
};

struct GenConfig {
  i64 n_samples = 100000;
  i64 n_users = 10000;
  i64 n_items = 10000;
  i64 n_categories = 100;
  int latent_dim = 8;
  double zipf_exponent = 1.1;
  double target_positive_rate = 0.5;
  double signal_scale = 2.0;  // multiplier on the latent dot product
  int max_seq_len = 20;
  u64 seed = 1;

  void validate() const;  // throws ConfigError
};

// The fixed config behind every repo fixture and acceptance run.
GenConfig benchmark_gen_config();

// Draws Gaussian user/item latents, Zipf item popularity, and labels
// Bernoulli(sigmoid(scale*<u,v> + b)) with b bisected to hit the target
// positive rate. Behavior sequences replay the user's previous positives,
// most recent first. Fully determined by cfg.seed.
Dataset generate_synthetic(const GenConfig& cfg);

// TSV log format, one sample per line:
//   timestamp<TAB>user_id<TAB>item_id<TAB>category_id<TAB>behavior_seq<TAB>label
// behavior_seq is item:cat pairs joined by '|' (may be empty); rows must be
// sorted by timestamp ascending.
Dataset read_log_tsv(const std::string& path);
void write_log_tsv(const std::string& path, const Dataset& ds);
std::string to_tsv(const Dataset& ds);

std::pair<Dataset, Dataset> split_chronological(const Dataset& ds, double test_fraction);

std::vector<Dataset> split_continual(const Dataset& train, int T,
                                     const std::optional<std::vector<double>>& boundaries = {});

// Keeps each sample independently with probability rho; order preserved.
Dataset subsample(const Dataset& ds, double rho, u64 seed);

// For positives-only logs: emits k label-0 copies per positive with random
// items drawn from the dataset's observed item set.
Dataset add_sampled_negatives(const Dataset& ds, int neg_per_pos, u64 seed);

}  // namespace meda
