#include "meda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace meda {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw MetricError("auc: scores and labels differ in length");
  }
  const size_t n = scores.size();
  size_t positives = 0;
  for (const int y : labels) {
    if (y != 0 && y != 1) throw MetricError("auc: labels must be 0 or 1");
    positives += static_cast<size_t>(y);
  }
  const size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) {
    throw MetricError("auc: need at least one positive and one negative label");
  }

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Midranks over tie groups; sum the positives' ranks.
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum += midrank;
    }
    i = j + 1;
  }

  const double p = static_cast<double>(positives);
  const double q = static_cast<double>(negatives);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double logloss(std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) {
    throw MetricError("logloss: probs and labels differ in length");
  }
  if (probs.empty()) throw MetricError("logloss: empty input");
  double sum = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-7, 1.0 - 1e-7);
    sum += labels[i] == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  return sum / static_cast<double>(probs.size());
}

namespace {

// Common-key pairing: full vectors for MLP snapshots, the (field, id)
// intersection for bank snapshots.
std::pair<std::vector<double>, std::vector<double>> aligned(const ParamSnapshot& a,
                                                            const ParamSnapshot& b) {
  if (a.source != b.source) {
    throw MetricError("param snapshots compare only within the same source kind");
  }
  if (a.source == ParamSnapshot::Source::mlp) {
    if (a.flat.size() != b.flat.size()) {
      throw MetricError("mlp snapshots differ in size (" + std::to_string(a.flat.size()) +
                        " vs " + std::to_string(b.flat.size()) + ")");
    }
    return {a.flat, b.flat};
  }
  if (a.dim != b.dim) throw MetricError("bank snapshots differ in embedding width");

  std::vector<double> va, vb;
  size_t ia = 0, ib = 0;
  const size_t d = static_cast<size_t>(a.dim);
  while (ia < a.keys.size() && ib < b.keys.size()) {
    if (a.keys[ia] < b.keys[ib]) {
      ++ia;
    } else if (b.keys[ib] < a.keys[ia]) {
      ++ib;
    } else {
      va.insert(va.end(), a.flat.begin() + static_cast<i64>(ia * d),
                a.flat.begin() + static_cast<i64>((ia + 1) * d));
      vb.insert(vb.end(), b.flat.begin() + static_cast<i64>(ib * d),
                b.flat.begin() + static_cast<i64>((ib + 1) * d));
      ++ia;
      ++ib;
    }
  }
  if (va.empty()) throw MetricError("bank snapshots share no (field, id) keys");
  return {std::move(va), std::move(vb)};
}

}  // namespace

double param_cosine(const ParamSnapshot& a, const ParamSnapshot& b) {
  const auto [va, vb] = aligned(a, b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < va.size(); ++i) {
    dot += va[i] * vb[i];
    na += va[i] * va[i];
    nb += vb[i] * vb[i];
  }
  if (na == 0.0 || nb == 0.0) throw MetricError("param_cosine: zero-norm snapshot");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double param_l2(const ParamSnapshot& a, const ParamSnapshot& b) {
  const auto [va, vb] = aligned(a, b);
  double sum = 0.0;
  for (size_t i = 0; i < va.size(); ++i) {
    const double diff = va[i] - vb[i];
    sum += diff * diff;
  }
  return std::sqrt(sum);
}

}  // namespace meda
