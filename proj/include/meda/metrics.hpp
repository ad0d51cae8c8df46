#pragma once

#include <span>
#include <string>
#include <vector>

#include "meda/common.hpp"
#include "meda/model.hpp"

namespace meda {

// Rank-based AUC with midrank tie handling: the probability a random
// positive outranks a random negative, ties counting one half.
double auc(std::span<const double> scores, std::span<const int> labels);

// Mean binary cross-entropy over probabilities clamped to [1e-7, 1-1e-7].
double logloss(std::span<const double> probs, std::span<const int> labels);

struct MetricRecord {
  std::string run_id;
  std::string variant;
  int dataset_index = 1;  // t
  int epoch = 1;          // pass position within dataset t
  int bank_id = 1;        // r
  double train_mean_loss = 0.0;
  double test_auc = 0.0;
  double test_logloss = 0.0;
  double wall_ms = 0.0;
};

// Canonical flat view of one parameter group. MLP snapshots flatten layers
// in definition order, row-major, weights before biases, attention last.
// Bank snapshots order rows by (field, id); comparisons restrict to the
// (field, id) keys present in both snapshots.
struct ParamSnapshot {
  enum class Source { mlp, bank };
  Source source = Source::mlp;
  int bank_id = -1;
  int dim = 0;  // embedding width (bank snapshots)
  std::vector<double> flat;
  std::vector<std::pair<int, u64>> keys;  // per embedding row, sorted

  size_t size() const { return flat.size(); }
};

double param_cosine(const ParamSnapshot& a, const ParamSnapshot& b);
double param_l2(const ParamSnapshot& a, const ParamSnapshot& b);

template <class S>
ParamSnapshot snapshot_mlp(const MlpParams<S>& mlp) {
  ParamSnapshot snap;
  snap.source = ParamSnapshot::Source::mlp;
  auto push = [&](const std::vector<DenseLayer<S>>& layers) {
    for (const auto& l : layers) {
      for (const S w : l.W.data) snap.flat.push_back(static_cast<double>(w));
      for (const S b : l.b) snap.flat.push_back(static_cast<double>(b));
    }
  };
  push(mlp.layers);
  push(mlp.attention);
  return snap;
}

template <class S>
ParamSnapshot snapshot_bank(const EmbeddingBank<S>& bank) {
  ParamSnapshot snap;
  snap.source = ParamSnapshot::Source::bank;
  snap.bank_id = bank.bank_id();
  snap.dim = bank.dim();
  const auto entries = bank.sorted_entries();
  snap.keys.reserve(entries.size());
  snap.flat.reserve(entries.size() * static_cast<size_t>(bank.dim()));
  for (const auto& [key, row] : entries) {
    snap.keys.push_back(key);
    const S* r = bank.row(row);
    for (int c = 0; c < bank.dim(); ++c) snap.flat.push_back(static_cast<double>(r[c]));
  }
  return snap;
}

}  // namespace meda
