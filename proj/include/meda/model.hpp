#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <unordered_map>
#include <vector>

#include "meda/common.hpp"
#include "meda/data.hpp"
#include "meda/numerics.hpp"
#include "meda/rng.hpp"

namespace meda {

enum class Field : int { user = 0, item = 1, category = 2 };
inline constexpr int kNumFields = 3;
inline const char* field_name(Field f) {
  switch (f) {
    case Field::user: return "user";
    case Field::item: return "item";
    case Field::category: return "category";
  }
  return "?";
}

enum class InitKind { glorot_uniform, uniform_range };
enum class Pooling { mean, attention };

struct ModelConfig {
  int embed_dim = 16;
  std::vector<int> hidden_dims = {64, 32};
  int attention_hidden = 32;
  Pooling pooling = Pooling::mean;
  InitKind init_kind = InitKind::glorot_uniform;
  double init_range = 0.01;  // half-width for uniform_range

  // [user | item | category | pooled behavior(2d)]
  int input_dim() const { return 3 * embed_dim + 2 * embed_dim; }
  int candidate_dim() const { return 2 * embed_dim; }

  void validate() const {
    if (embed_dim < 1) throw ConfigError("model.embed_dim must be >= 1");
    if (attention_hidden < 1) throw ConfigError("model.attention_hidden must be >= 1");
    for (const int h : hidden_dims) {
      if (h < 1) throw ConfigError("model.hidden_dims entries must be >= 1");
    }
    if (init_kind == InitKind::uniform_range && !(init_range > 0.0)) {
      throw ConfigError("model.init_range must be > 0 for uniform init");
    }
  }
};

// One independently seeded set of per-field ID->vector tables. Rows are
// created lazily on first lookup; a row's values are a pure function of
// (init_seed, field, id), so lookup order never matters.
template <class S>
class EmbeddingBank {
 public:
  EmbeddingBank() = default;
  EmbeddingBank(int bank_id, u64 init_seed, InitKind kind, double init_range, int embed_dim)
      : bank_id_(bank_id),
        init_seed_(init_seed),
        kind_(kind),
        init_range_(init_range),
        table_(0, embed_dim) {}

  int bank_id() const { return bank_id_; }
  u64 init_seed() const { return init_seed_; }
  InitKind init_kind() const { return kind_; }
  double init_range() const { return init_range_; }
  int dim() const { return static_cast<int>(table_.cols); }
  i64 rows() const { return table_.rows; }
  const Mat<S>& table() const { return table_; }
  Mat<S>& table() { return table_; }

  std::vector<S> init_vector(Field f, u64 id) const {
    SplitMix64 rng(derive_key(init_seed_, static_cast<u64>(f) + 1, id));
    const double bound = kind_ == InitKind::glorot_uniform
                             ? std::sqrt(6.0 / (2.0 * static_cast<double>(dim())))
                             : init_range_;
    std::vector<S> v(static_cast<size_t>(dim()));
    for (S& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
    return v;
  }

  i64 lookup_or_init(Field f, u64 id) {
    auto& map = maps_[static_cast<size_t>(f)];
    const auto it = map.find(id);
    if (it != map.end()) return it->second;
    const i64 row = table_.rows;
    const std::vector<S> v = init_vector(f, id);
    table_.data.insert(table_.data.end(), v.begin(), v.end());
    table_.rows += 1;
    map.emplace(id, row);
    return row;
  }

  std::optional<i64> find(Field f, u64 id) const {
    const auto& map = maps_[static_cast<size_t>(f)];
    const auto it = map.find(id);
    if (it == map.end()) return std::nullopt;
    return it->second;
  }

  const S* row(i64 r) const { return table_.row(r); }
  S* row(i64 r) { return table_.row(r); }

  // Drops every row and mapping; the seed is unchanged, so re-touching an ID
  // reproduces its original init vector.
  void reset() {
    table_ = Mat<S>(0, table_.cols);
    for (auto& m : maps_) m.clear();
  }

  void reseed(u64 seed) {
    init_seed_ = seed;
    reset();
  }

  const std::unordered_map<u64, i64>& id_map(Field f) const {
    return maps_[static_cast<size_t>(f)];
  }

  // ((field, id) -> row), sorted by (field, id). Canonical order for
  // snapshots and serialization.
  std::vector<std::pair<std::pair<int, u64>, i64>> sorted_entries() const {
    std::vector<std::pair<std::pair<int, u64>, i64>> out;
    out.reserve(static_cast<size_t>(table_.rows));
    for (int f = 0; f < kNumFields; ++f) {
      for (const auto& [id, row] : maps_[static_cast<size_t>(f)]) {
        out.push_back({{f, id}, row});
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  // Bulk restore used by checkpoint loading.
  void restore(Mat<S> table, std::array<std::vector<std::pair<u64, i64>>, kNumFields> entries) {
    table_ = std::move(table);
    for (int f = 0; f < kNumFields; ++f) {
      auto& m = maps_[static_cast<size_t>(f)];
      m.clear();
      for (const auto& [id, row] : entries[static_cast<size_t>(f)]) m.emplace(id, row);
    }
  }

 private:
  int bank_id_ = 0;
  u64 init_seed_ = 0;
  InitKind kind_ = InitKind::glorot_uniform;
  double init_range_ = 0.01;
  Mat<S> table_;  // shared row store, embed_dim columns
  std::array<std::unordered_map<u64, i64>, kNumFields> maps_;
};

template <class S>
struct DenseLayer {
  Mat<S> W;           // out x in
  std::vector<S> b;   // out
};

// MLP stack plus the attention-unit MLP (empty when pooling is mean).
// Gradients reuse this struct since shapes mirror parameters exactly.
template <class S>
struct MlpParams {
  std::vector<DenseLayer<S>> layers;     // input -> hidden... -> 1
  std::vector<DenseLayer<S>> attention;  // 4*candidate_dim -> attention_hidden -> 1

  size_t param_count() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.W.data.size() + l.b.size();
    for (const auto& l : attention) n += l.W.data.size() + l.b.size();
    return n;
  }

  void set_zero() {
    for (auto& l : layers) {
      l.W.fill(S(0));
      std::fill(l.b.begin(), l.b.end(), S(0));
    }
    for (auto& l : attention) {
      l.W.fill(S(0));
      std::fill(l.b.begin(), l.b.end(), S(0));
    }
  }
};

namespace detail {

template <class S>
DenseLayer<S> glorot_layer(int out, int in, SplitMix64& rng) {
  DenseLayer<S> l;
  l.W = Mat<S>(out, in);
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (S& w : l.W.data) w = static_cast<S>(rng.uniform(-bound, bound));
  l.b.assign(static_cast<size_t>(out), S(0));
  return l;
}

}  // namespace detail

template <class S>
MlpParams<S> init_mlp(const ModelConfig& cfg, u64 seed) {
  cfg.validate();
  MlpParams<S> p;
  SplitMix64 rng(derive_key(seed, 11, 0));
  int in = cfg.input_dim();
  for (const int h : cfg.hidden_dims) {
    p.layers.push_back(detail::glorot_layer<S>(h, in, rng));
    in = h;
  }
  p.layers.push_back(detail::glorot_layer<S>(1, in, rng));
  if (cfg.pooling == Pooling::attention) {
    p.attention.push_back(
        detail::glorot_layer<S>(cfg.attention_hidden, 4 * cfg.candidate_dim(), rng));
    p.attention.push_back(detail::glorot_layer<S>(1, cfg.attention_hidden, rng));
  }
  return p;
}

// Affine layer application: y = W x + b.
template <class S>
void affine(const DenseLayer<S>& l, std::span<const S> x, std::vector<S>& y) {
  if (static_cast<i64>(x.size()) != l.W.cols) {
    throw ShapeError("affine: input size " + std::to_string(x.size()) +
                     " does not match layer fan-in " + std::to_string(l.W.cols));
  }
  y.assign(static_cast<size_t>(l.W.rows), S(0));
  for (i64 r = 0; r < l.W.rows; ++r) {
    const S* w = l.W.row(r);
    S acc = l.b[static_cast<size_t>(r)];
    for (i64 c = 0; c < l.W.cols; ++c) acc += w[c] * x[static_cast<size_t>(c)];
    y[static_cast<size_t>(r)] = acc;
  }
}

// Chained affine->ReLU with a final affine scalar logit. zs[l] holds layer
// l's pre-activation; hs[l] the activation fed into layer l (hs[0] = input).
template <class S>
S mlp_forward(const MlpParams<S>& mlp, std::span<const S> input,
              std::vector<std::vector<S>>* zs = nullptr,
              std::vector<std::vector<S>>* hs = nullptr) {
  const size_t L = mlp.layers.size();
  std::vector<std::vector<S>> local_zs;
  std::vector<std::vector<S>>& z = zs ? *zs : local_zs;
  z.assign(L, {});

  std::vector<S> h(input.begin(), input.end());
  if (hs) {
    hs->assign(L, {});
    (*hs)[0] = h;
  }
  for (size_t l = 0; l < L; ++l) {
    affine(mlp.layers[l], std::span<const S>(h), z[l]);
    if (l + 1 < L) {
      h = z[l];
      relu_inplace(std::span<S>(h));
      if (hs) (*hs)[l + 1] = h;
    }
  }
  if (z[L - 1].size() != 1) {
    throw ShapeError("mlp_forward: final layer must emit a scalar logit");
  }
  return z[L - 1][0];
}

// Numerically stable binary cross-entropy on a logit.
template <class S>
S loss_bce(S logit, int label) {
  const S z = logit;
  const S zy = z * static_cast<S>(label);
  return std::max(z, S(0)) - zy + std::log1p(std::exp(-std::abs(z)));
}

template <class S>
struct AttentionTrace {
  Mat<S> z0;                  // n x attention_hidden, pre-activation
  std::vector<S> scores;      // n
  std::vector<S> weights;     // n, softmax(scores)
};

// DIN-style pooling: score each behavior with a small MLP over
// [cand, beh, cand-beh, cand*beh], softmax the scores, return the weighted
// sum of behaviors. Zero behaviors pool to the zero vector.
template <class S>
std::vector<S> attention_pool(const std::vector<DenseLayer<S>>& att, std::span<const S> cand,
                              const Mat<S>& behaviors, AttentionTrace<S>* trace = nullptr) {
  const i64 n = behaviors.rows;
  const i64 cd = behaviors.cols;
  std::vector<S> pooled(static_cast<size_t>(cd), S(0));
  if (n == 0) {
    if (trace) *trace = {};
    return pooled;
  }
  if (att.size() != 2) throw ShapeError("attention_pool: expected a 2-layer attention MLP");
  const i64 hidden = att[0].W.rows;

  Mat<S> z0(n, hidden);
  std::vector<S> scores(static_cast<size_t>(n));
  std::vector<S> zin(static_cast<size_t>(4 * cd));
  std::vector<S> h(static_cast<size_t>(hidden));
  std::vector<S> out;
  for (i64 i = 0; i < n; ++i) {
    const S* b = behaviors.row(i);
    for (i64 c = 0; c < cd; ++c) {
      const S cv = cand[static_cast<size_t>(c)];
      zin[static_cast<size_t>(c)] = cv;
      zin[static_cast<size_t>(cd + c)] = b[c];
      zin[static_cast<size_t>(2 * cd + c)] = cv - b[c];
      zin[static_cast<size_t>(3 * cd + c)] = cv * b[c];
    }
    affine(att[0], std::span<const S>(zin), h);
    for (i64 j = 0; j < hidden; ++j) z0.at(i, j) = h[static_cast<size_t>(j)];
    relu_inplace(std::span<S>(h));
    affine(att[1], std::span<const S>(h), out);
    scores[static_cast<size_t>(i)] = out[0];
  }

  // Stable softmax.
  S max_s = scores[0];
  for (const S s : scores) max_s = std::max(max_s, s);
  std::vector<S> weights(static_cast<size_t>(n));
  S denom = S(0);
  for (size_t i = 0; i < weights.size(); ++i) {
    weights[i] = std::exp(scores[i] - max_s);
    denom += weights[i];
  }
  for (S& w : weights) w /= denom;

  for (i64 i = 0; i < n; ++i) {
    const S* b = behaviors.row(i);
    const S w = weights[static_cast<size_t>(i)];
    for (i64 c = 0; c < cd; ++c) pooled[static_cast<size_t>(c)] += w * b[c];
  }
  if (trace) {
    trace->z0 = std::move(z0);
    trace->scores = std::move(scores);
    trace->weights = std::move(weights);
  }
  return pooled;
}

template <class S>
struct ForwardTrace {
  struct Touch {
    Field field;
    u64 id;
    i64 row;
  };
  std::vector<Touch> touches;  // user, item, category, then item/cat per behavior
  std::vector<S> input;
  std::vector<std::vector<S>> zs;  // per MLP layer pre-activation
  std::vector<std::vector<S>> hs;  // hs[0] = input
  Mat<S> behaviors;                // n x 2d
  std::vector<S> candidate;        // 2d (attention only)
  AttentionTrace<S> attention;
  S logit = S(0);
};

// Training-path forward: materializes embedding rows lazily and records
// everything backward() needs.
template <class S>
S forward_sample(const MlpParams<S>& mlp, EmbeddingBank<S>& bank, const SparseSample& s,
                 const ModelConfig& cfg, ForwardTrace<S>& trace) {
  const int d = cfg.embed_dim;
  const i64 n_beh = static_cast<i64>(s.behavior_seq.size());

  trace.touches.clear();
  trace.touches.push_back({Field::user, s.user_id, bank.lookup_or_init(Field::user, s.user_id)});
  trace.touches.push_back({Field::item, s.item_id, bank.lookup_or_init(Field::item, s.item_id)});
  trace.touches.push_back(
      {Field::category, s.category_id, bank.lookup_or_init(Field::category, s.category_id)});
  for (const BehaviorEvent& ev : s.behavior_seq) {
    trace.touches.push_back({Field::item, ev.item_id, bank.lookup_or_init(Field::item, ev.item_id)});
    trace.touches.push_back(
        {Field::category, ev.category_id, bank.lookup_or_init(Field::category, ev.category_id)});
  }

  // Behavior matrix: row i = [item_emb | cat_emb] of behavior i.
  std::vector<i64> beh_rows;
  beh_rows.reserve(static_cast<size_t>(2 * n_beh));
  for (i64 i = 0; i < n_beh; ++i) {
    beh_rows.push_back(trace.touches[static_cast<size_t>(3 + 2 * i)].row);
    beh_rows.push_back(trace.touches[static_cast<size_t>(3 + 2 * i + 1)].row);
  }
  const Mat<S> gathered = gather_rows(bank.table(), std::span<const i64>(beh_rows));
  trace.behaviors = Mat<S>(n_beh, 2 * d);
  for (i64 i = 0; i < n_beh; ++i) {
    for (int c = 0; c < d; ++c) {
      trace.behaviors.at(i, c) = gathered.at(2 * i, c);
      trace.behaviors.at(i, d + c) = gathered.at(2 * i + 1, c);
    }
  }

  trace.input.assign(static_cast<size_t>(cfg.input_dim()), S(0));
  const S* user_row = bank.row(trace.touches[0].row);
  const S* item_row = bank.row(trace.touches[1].row);
  const S* cat_row = bank.row(trace.touches[2].row);
  for (int c = 0; c < d; ++c) {
    trace.input[static_cast<size_t>(c)] = user_row[c];
    trace.input[static_cast<size_t>(d + c)] = item_row[c];
    trace.input[static_cast<size_t>(2 * d + c)] = cat_row[c];
  }

  std::vector<S> pooled;
  if (cfg.pooling == Pooling::attention) {
    trace.candidate.assign(static_cast<size_t>(2 * d), S(0));
    for (int c = 0; c < d; ++c) {
      trace.candidate[static_cast<size_t>(c)] = item_row[c];
      trace.candidate[static_cast<size_t>(d + c)] = cat_row[c];
    }
    pooled = attention_pool(mlp.attention, std::span<const S>(trace.candidate), trace.behaviors,
                            &trace.attention);
  } else {
    pooled.assign(static_cast<size_t>(2 * d), S(0));
    if (n_beh > 0) {
      for (i64 i = 0; i < n_beh; ++i) {
        const S* b = trace.behaviors.row(i);
        for (int c = 0; c < 2 * d; ++c) pooled[static_cast<size_t>(c)] += b[c];
      }
      const S inv = S(1) / static_cast<S>(n_beh);
      for (S& x : pooled) x *= inv;
    }
  }
  for (int c = 0; c < 2 * d; ++c) trace.input[static_cast<size_t>(3 * d + c)] = pooled[static_cast<size_t>(c)];

  trace.logit = mlp_forward(mlp, std::span<const S>(trace.input), &trace.zs, &trace.hs);
  return trace.logit;
}

// Evaluation-path forward: const, never mutates the bank. IDs without a
// materialized row score with their deterministic init vector.
template <class S>
S score_sample(const MlpParams<S>& mlp, const EmbeddingBank<S>& bank, const SparseSample& s,
               const ModelConfig& cfg) {
  const int d = cfg.embed_dim;
  const i64 n_beh = static_cast<i64>(s.behavior_seq.size());

  auto fetch = [&](Field f, u64 id, S* dst) {
    if (const auto row = bank.find(f, id)) {
      const S* src = bank.row(*row);
      for (int c = 0; c < d; ++c) dst[c] = src[c];
    } else {
      const std::vector<S> v = bank.init_vector(f, id);
      for (int c = 0; c < d; ++c) dst[c] = v[static_cast<size_t>(c)];
    }
  };

  std::vector<S> input(static_cast<size_t>(cfg.input_dim()), S(0));
  fetch(Field::user, s.user_id, input.data());
  fetch(Field::item, s.item_id, input.data() + d);
  fetch(Field::category, s.category_id, input.data() + 2 * d);

  Mat<S> behaviors(n_beh, 2 * d);
  for (i64 i = 0; i < n_beh; ++i) {
    fetch(Field::item, s.behavior_seq[static_cast<size_t>(i)].item_id, behaviors.row(i));
    fetch(Field::category, s.behavior_seq[static_cast<size_t>(i)].category_id,
          behaviors.row(i) + d);
  }

  std::vector<S> pooled(static_cast<size_t>(2 * d), S(0));
  if (cfg.pooling == Pooling::attention) {
    std::vector<S> cand(input.begin() + d, input.begin() + 3 * d);
    pooled = attention_pool(mlp.attention, std::span<const S>(cand), behaviors);
  } else if (n_beh > 0) {
    for (i64 i = 0; i < n_beh; ++i) {
      const S* b = behaviors.row(i);
      for (int c = 0; c < 2 * d; ++c) pooled[static_cast<size_t>(c)] += b[c];
    }
    const S inv = S(1) / static_cast<S>(n_beh);
    for (S& x : pooled) x *= inv;
  }
  for (int c = 0; c < 2 * d; ++c) input[static_cast<size_t>(3 * d + c)] = pooled[static_cast<size_t>(c)];

  return mlp_forward(mlp, std::span<const S>(input));
}

template <class S>
struct RowGrad {
  Field field;
  u64 id;
  i64 row;
  std::vector<S> grad;
};

// Accumulates sample gradients across a minibatch. Dense gradients live in
// an MlpParams-shaped buffer; row gradients are deduplicated by (field, row)
// in first-touch order so updates stay deterministic.
template <class S>
struct GradAccum {
  MlpParams<S> mlp;
  std::vector<RowGrad<S>> rows;
  double loss_sum = 0.0;
  size_t count = 0;

  void reset_like(const MlpParams<S>& params) {
    mlp = params;
    mlp.set_zero();
    rows.clear();
    slot_.clear();
    loss_sum = 0.0;
    count = 0;
  }

  void add_row_grad(Field f, u64 id, i64 row, std::span<const S> g) {
    const u64 key = (static_cast<u64>(f) << 60) | static_cast<u64>(row);
    const auto [it, inserted] = slot_.try_emplace(key, rows.size());
    if (inserted) {
      rows.push_back({f, id, row, std::vector<S>(g.begin(), g.end())});
    } else {
      std::vector<S>& dst = rows[it->second].grad;
      for (size_t c = 0; c < dst.size(); ++c) dst[c] += g[c];
    }
  }

  // Mean-gradient semantics: divide everything by the batch size.
  void scale(S factor) {
    for (auto& l : mlp.layers) {
      for (S& w : l.W.data) w *= factor;
      for (S& b : l.b) b *= factor;
    }
    for (auto& l : mlp.attention) {
      for (S& w : l.W.data) w *= factor;
      for (S& b : l.b) b *= factor;
    }
    for (auto& r : rows) {
      for (S& g : r.grad) g *= factor;
    }
  }

 private:
  std::unordered_map<u64, size_t> slot_;
};

// Exact analytic gradients of loss_bce(forward_sample(...)) with respect to
// every MLP parameter, attention parameter and touched embedding row.
// Returns the sample loss.
template <class S>
S backward_into(const MlpParams<S>& mlp, const ForwardTrace<S>& trace, int label,
                const ModelConfig& cfg, GradAccum<S>& acc) {
  const int d = cfg.embed_dim;
  const size_t L = mlp.layers.size();
  const S loss = loss_bce(trace.logit, label);

  // dL/dlogit
  std::vector<S> delta(1, sigmoid(trace.logit) - static_cast<S>(label));

  std::vector<S> next;
  for (size_t l = L; l-- > 0;) {
    DenseLayer<S>& g = acc.mlp.layers[l];
    const DenseLayer<S>& w = mlp.layers[l];
    const std::vector<S>& h = trace.hs[l];
    for (i64 r = 0; r < w.W.rows; ++r) {
      const S dr = delta[static_cast<size_t>(r)];
      g.b[static_cast<size_t>(r)] += dr;
      S* grow = g.W.row(r);
      for (i64 c = 0; c < w.W.cols; ++c) grow[c] += dr * h[static_cast<size_t>(c)];
    }
    // delta for the layer below (through the ReLU for l > 0, raw for l == 0).
    next.assign(static_cast<size_t>(w.W.cols), S(0));
    for (i64 r = 0; r < w.W.rows; ++r) {
      const S dr = delta[static_cast<size_t>(r)];
      const S* wrow = w.W.row(r);
      for (i64 c = 0; c < w.W.cols; ++c) next[static_cast<size_t>(c)] += wrow[c] * dr;
    }
    if (l > 0) {
      const std::vector<S>& z = trace.zs[l - 1];
      for (size_t c = 0; c < next.size(); ++c) {
        if (z[c] <= S(0)) next[c] = S(0);
      }
    }
    delta = next;
  }
  // delta now holds dL/dinput.
  const std::vector<S>& dinput = delta;

  std::span<const S> du(dinput.data(), static_cast<size_t>(d));
  std::span<const S> di(dinput.data() + d, static_cast<size_t>(d));
  std::span<const S> dc(dinput.data() + 2 * d, static_cast<size_t>(d));
  std::span<const S> dp(dinput.data() + 3 * d, static_cast<size_t>(2 * d));

  // Slots in touch order: user, item, category, then behaviors. The
  // attention candidate path accumulates into the item/category slots.
  acc.add_row_grad(trace.touches[0].field, trace.touches[0].id, trace.touches[0].row, du);
  acc.add_row_grad(trace.touches[1].field, trace.touches[1].id, trace.touches[1].row, di);
  acc.add_row_grad(trace.touches[2].field, trace.touches[2].id, trace.touches[2].row, dc);

  const i64 n_beh = trace.behaviors.rows;
  if (n_beh > 0) {
    // Per-behavior gradient on the 2d-wide behavior embedding.
    Mat<S> dbeh(n_beh, 2 * d);
    if (cfg.pooling == Pooling::mean) {
      const S inv = S(1) / static_cast<S>(n_beh);
      for (i64 i = 0; i < n_beh; ++i) {
        for (int c = 0; c < 2 * d; ++c) dbeh.at(i, c) = dp[static_cast<size_t>(c)] * inv;
      }
    } else {
      const AttentionTrace<S>& att = trace.attention;
      const std::vector<S>& wgt = att.weights;
      // Score gradients through the softmax.
      std::vector<S> u(static_cast<size_t>(n_beh), S(0));
      S ubar = S(0);
      for (i64 i = 0; i < n_beh; ++i) {
        const S* b = trace.behaviors.row(i);
        S dot = S(0);
        for (int c = 0; c < 2 * d; ++c) dot += dp[static_cast<size_t>(c)] * b[c];
        u[static_cast<size_t>(i)] = dot;
        ubar += wgt[static_cast<size_t>(i)] * dot;
      }
      std::vector<S> dscore(static_cast<size_t>(n_beh));
      for (i64 i = 0; i < n_beh; ++i) {
        dscore[static_cast<size_t>(i)] =
            wgt[static_cast<size_t>(i)] * (u[static_cast<size_t>(i)] - ubar);
      }

      // Direct path: pooled = sum w_i * b_i.
      for (i64 i = 0; i < n_beh; ++i) {
        const S w = wgt[static_cast<size_t>(i)];
        for (int c = 0; c < 2 * d; ++c) dbeh.at(i, c) = w * dp[static_cast<size_t>(c)];
      }

      // Score path through the attention MLP.
      const DenseLayer<S>& a0 = mlp.attention[0];
      const DenseLayer<S>& a1 = mlp.attention[1];
      DenseLayer<S>& ga0 = acc.mlp.attention[0];
      DenseLayer<S>& ga1 = acc.mlp.attention[1];
      const i64 hidden = a0.W.rows;
      const i64 cd = 2 * d;
      std::vector<S> cand_grad(static_cast<size_t>(cd), S(0));
      std::vector<S> h1(static_cast<size_t>(hidden));
      std::vector<S> d0(static_cast<size_t>(hidden));
      std::vector<S> dzin(static_cast<size_t>(4 * cd));
      std::vector<S> zin(static_cast<size_t>(4 * cd));
      for (i64 i = 0; i < n_beh; ++i) {
        const S ds = dscore[static_cast<size_t>(i)];
        const S* b = trace.behaviors.row(i);
        for (i64 c = 0; c < cd; ++c) {
          const S cv = trace.candidate[static_cast<size_t>(c)];
          zin[static_cast<size_t>(c)] = cv;
          zin[static_cast<size_t>(cd + c)] = b[c];
          zin[static_cast<size_t>(2 * cd + c)] = cv - b[c];
          zin[static_cast<size_t>(3 * cd + c)] = cv * b[c];
        }
        for (i64 j = 0; j < hidden; ++j) {
          h1[static_cast<size_t>(j)] = relu(att.z0.at(i, j));
        }
        // layer 1 (scalar score)
        ga1.b[0] += ds;
        {
          S* grow = ga1.W.row(0);
          const S* w1 = a1.W.row(0);
          for (i64 j = 0; j < hidden; ++j) {
            grow[j] += ds * h1[static_cast<size_t>(j)];
            d0[static_cast<size_t>(j)] = att.z0.at(i, j) > S(0) ? w1[j] * ds : S(0);
          }
        }
        // layer 0
        std::fill(dzin.begin(), dzin.end(), S(0));
        for (i64 j = 0; j < hidden; ++j) {
          const S dj = d0[static_cast<size_t>(j)];
          if (dj == S(0)) continue;
          ga0.b[static_cast<size_t>(j)] += dj;
          S* grow = ga0.W.row(j);
          const S* w0 = a0.W.row(j);
          for (i64 c = 0; c < 4 * cd; ++c) {
            grow[c] += dj * zin[static_cast<size_t>(c)];
            dzin[static_cast<size_t>(c)] += w0[c] * dj;
          }
        }
        // Split dzin = [dcand, dbeh, d(cand-beh), d(cand*beh)].
        for (i64 c = 0; c < cd; ++c) {
          const S cv = trace.candidate[static_cast<size_t>(c)];
          const S bv = b[c];
          cand_grad[static_cast<size_t>(c)] += dzin[static_cast<size_t>(c)] +
                                               dzin[static_cast<size_t>(2 * cd + c)] +
                                               dzin[static_cast<size_t>(3 * cd + c)] * bv;
          dbeh.at(i, c) += dzin[static_cast<size_t>(cd + c)] -
                           dzin[static_cast<size_t>(2 * cd + c)] +
                           dzin[static_cast<size_t>(3 * cd + c)] * cv;
        }
      }
      acc.add_row_grad(trace.touches[1].field, trace.touches[1].id, trace.touches[1].row,
                       std::span<const S>(cand_grad.data(), static_cast<size_t>(d)));
      acc.add_row_grad(trace.touches[2].field, trace.touches[2].id, trace.touches[2].row,
                       std::span<const S>(cand_grad.data() + d, static_cast<size_t>(d)));
    }

    // item part = columns [0, d), category part = columns [d, 2d)
    for (i64 i = 0; i < n_beh; ++i) {
      const auto& ti = trace.touches[static_cast<size_t>(3 + 2 * i)];
      const auto& tc = trace.touches[static_cast<size_t>(3 + 2 * i + 1)];
      acc.add_row_grad(ti.field, ti.id, ti.row, std::span<const S>(dbeh.row(i), static_cast<size_t>(d)));
      acc.add_row_grad(tc.field, tc.id, tc.row,
                       std::span<const S>(dbeh.row(i) + d, static_cast<size_t>(d)));
    }
  }

  acc.loss_sum += static_cast<double>(loss);
  acc.count += 1;
  return loss;
}

}  // namespace meda
