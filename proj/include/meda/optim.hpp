#pragma once

#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "meda/common.hpp"
#include "meda/model.hpp"

namespace meda {

enum class OptimKind { sgd, adagrad, adam };

struct OptimConfig {
  OptimKind kind = OptimKind::adam;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double adagrad_eps = 1e-8;
  // Keeps sparse optimizer slots alive across bank reinitialization
  // (exposed to test the alternative; default resets them).
  bool keep_embed_slots = false;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("optim.learning_rate must be >= 0");
  }
};

namespace detail {

// Flat views over every MLP tensor in canonical order: layer W, layer b, ...
// then attention W, attention b. Slot shapes mirror this order.
template <class S>
std::vector<std::span<S>> tensor_views(MlpParams<S>& p) {
  std::vector<std::span<S>> views;
  for (auto& l : p.layers) {
    views.push_back(std::span<S>(l.W.data));
    views.push_back(std::span<S>(l.b));
  }
  for (auto& l : p.attention) {
    views.push_back(std::span<S>(l.W.data));
    views.push_back(std::span<S>(l.b));
  }
  return views;
}

}  // namespace detail

// Optimizer slots: dense per-tensor state for the MLP, sparse per-row state
// per embedding bank. Sparse slots exist only for rows that have been
// touched by a step; per-row step counters drive Adam bias correction.
template <class S>
class OptimState {
 public:
  OptimState() = default;
  explicit OptimState(OptimConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const OptimConfig& config() const { return cfg_; }

  struct DenseSlot {
    std::vector<S> m, v, acc;
    u64 step = 0;
  };

  struct SparseSlots {
    Mat<S> m, v, acc;            // grow alongside the bank's row store
    std::vector<u32> steps;      // per-row step counters
  };

  void step_dense(MlpParams<S>& params, MlpParams<S>& grads) {
    auto pv = detail::tensor_views(params);
    auto gv = detail::tensor_views(grads);
    if (pv.size() != gv.size()) throw ShapeError("step_dense: tensor counts differ");
    if (dense_.empty()) dense_.resize(pv.size());
    if (dense_.size() != pv.size()) throw ShapeError("step_dense: slot count mismatch");

    for (size_t t = 0; t < pv.size(); ++t) {
      if (pv[t].size() != gv[t].size()) {
        throw ShapeError("step_dense: tensor " + std::to_string(t) + " shape mismatch");
      }
      DenseSlot& slot = dense_[t];
      switch (cfg_.kind) {
        case OptimKind::sgd:
          apply_sgd(pv[t], gv[t]);
          break;
        case OptimKind::adagrad:
          if (slot.acc.empty()) slot.acc.assign(pv[t].size(), S(0));
          apply_adagrad(pv[t], gv[t], slot.acc.data());
          break;
        case OptimKind::adam:
          if (slot.m.empty()) {
            slot.m.assign(pv[t].size(), S(0));
            slot.v.assign(pv[t].size(), S(0));
          }
          slot.step += 1;
          apply_adam(pv[t], gv[t], slot.m.data(), slot.v.data(), slot.step);
          break;
      }
    }
  }

  // Lazy sparse step: only rows named in row_grads move; everything else in
  // the bank (and its slots) stays bit-identical.
  void step_sparse(EmbeddingBank<S>& bank, std::span<const RowGrad<S>> row_grads) {
    SparseSlots& slots = sparse_[bank.bank_id()];
    grow_slots(slots, bank);
    const i64 cols = bank.table().cols;

    for (const RowGrad<S>& rg : row_grads) {
      if (rg.row < 0 || rg.row >= bank.rows()) {
        throw IndexError("step_sparse: row " + std::to_string(rg.row) +
                         " unknown to bank " + std::to_string(bank.bank_id()));
      }
      if (static_cast<i64>(rg.grad.size()) != cols) {
        throw ShapeError("step_sparse: gradient width mismatch");
      }
      std::span<S> p(bank.row(rg.row), static_cast<size_t>(cols));
      std::span<const S> g(rg.grad);
      switch (cfg_.kind) {
        case OptimKind::sgd:
          apply_sgd(p, g);
          break;
        case OptimKind::adagrad:
          apply_adagrad(p, g, slots.acc.row(rg.row));
          break;
        case OptimKind::adam: {
          u32& t = slots.steps[static_cast<size_t>(rg.row)];
          t += 1;
          apply_adam(p, g, slots.m.row(rg.row), slots.v.row(rg.row), t);
          break;
        }
      }
    }
  }

  // Drops all sparse slots and per-row counters for one bank; dense MLP
  // slots are untouched. Unknown bank ids are a no-op.
  void reset_embedding_slots(int bank_id) { sparse_.erase(bank_id); }

  void reset_dense_slots() { dense_.clear(); }

  const std::vector<DenseSlot>& dense_slots() const { return dense_; }
  std::vector<DenseSlot>& dense_slots() { return dense_; }
  const std::map<int, SparseSlots>& sparse_slots() const { return sparse_; }
  std::map<int, SparseSlots>& sparse_slots() { return sparse_; }

  bool has_sparse(int bank_id) const { return sparse_.contains(bank_id); }

 private:
  void grow_slots(SparseSlots& slots, const EmbeddingBank<S>& bank) {
    const i64 rows = bank.rows();
    const i64 cols = bank.table().cols;
    auto grow = [&](Mat<S>& m) {
      if (m.cols == 0) m.cols = cols;
      if (m.rows < rows) {
        m.data.resize(static_cast<size_t>(rows * cols), S(0));
        m.rows = rows;
      }
    };
    switch (cfg_.kind) {
      case OptimKind::sgd:
        break;
      case OptimKind::adagrad:
        grow(slots.acc);
        break;
      case OptimKind::adam:
        grow(slots.m);
        grow(slots.v);
        break;
    }
    if (slots.steps.size() < static_cast<size_t>(rows)) {
      slots.steps.resize(static_cast<size_t>(rows), 0);
    }
  }

  void apply_sgd(std::span<S> p, std::span<const S> g) {
    const S lr = static_cast<S>(cfg_.learning_rate);
    for (size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }

  void apply_adagrad(std::span<S> p, std::span<const S> g, S* acc) {
    const S lr = static_cast<S>(cfg_.learning_rate);
    const S eps = static_cast<S>(cfg_.adagrad_eps);
    for (size_t i = 0; i < p.size(); ++i) {
      acc[i] += g[i] * g[i];
      p[i] -= lr * g[i] / (std::sqrt(acc[i]) + eps);
    }
  }

  void apply_adam(std::span<S> p, std::span<const S> g, S* m, S* v, u64 step) {
    const S lr = static_cast<S>(cfg_.learning_rate);
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    const S eps = static_cast<S>(cfg_.adam_eps);
    const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step)));
    const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step)));
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (S(1) - b1) * g[i];
      v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
      const S mhat = m[i] / c1;
      const S vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }

  OptimConfig cfg_;
  std::vector<DenseSlot> dense_;
  std::map<int, SparseSlots> sparse_;
};

}  // namespace meda
