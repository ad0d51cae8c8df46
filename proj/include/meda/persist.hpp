#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "meda/common.hpp"
#include "meda/metrics.hpp"
#include "meda/model.hpp"
#include "meda/optim.hpp"

namespace meda {

using json = nlohmann::ordered_json;

u64 fnv1a64(const void* data, size_t len);
std::string fnv1a64_hex(const void* data, size_t len);

namespace blob {

// Tensor blobs are raw little-endian scalars, row-major.
void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes);
std::vector<unsigned char> read_bytes(const std::filesystem::path& path);

template <class S>
std::vector<unsigned char> pack(std::span<const S> values) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  std::vector<unsigned char> out(values.size() * sizeof(S));
  size_t o = 0;
  for (const S v : values) {
    u64 bits = 0;
    if constexpr (sizeof(S) == 4) {
      u32 b;
      std::memcpy(&b, &v, 4);
      bits = b;
    } else {
      std::memcpy(&bits, &v, 8);
    }
    for (size_t i = 0; i < sizeof(S); ++i) out[o++] = static_cast<unsigned char>(bits >> (8 * i));
  }
  return out;
}

template <class S>
std::vector<S> unpack(std::span<const unsigned char> bytes) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  if (bytes.size() % sizeof(S) != 0) throw DataError("blob size is not a multiple of the scalar width");
  std::vector<S> out(bytes.size() / sizeof(S));
  size_t o = 0;
  for (S& v : out) {
    u64 bits = 0;
    for (size_t i = 0; i < sizeof(S); ++i) bits |= static_cast<u64>(bytes[o++]) << (8 * i);
    if constexpr (sizeof(S) == 4) {
      const u32 b = static_cast<u32>(bits);
      std::memcpy(&v, &b, 4);
    } else {
      std::memcpy(&v, &bits, 8);
    }
  }
  return out;
}

}  // namespace blob

template <class S>
constexpr const char* scalar_dtype() {
  if constexpr (sizeof(S) == 4) {
    return "f32";
  } else {
    return "f64";
  }
}

struct StorageReport {
  struct BankUsage {
    int bank_id = 0;
    i64 rows = 0;
    i64 bytes = 0;  // embedding payload only
  };
  std::vector<BankUsage> banks;
  i64 embedding_bytes = 0;  // sum of per-bank payloads
  i64 total_bytes = 0;      // every file under the checkpoint directory

  json to_json() const;
};

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

struct TensorWriter {
  std::filesystem::path dir;
  json index = json::array();
  i64 total_bytes = 0;

  template <class S>
  void add(const std::string& name, const Mat<S>& m) {
    add_raw<S>(name, std::span<const S>(m.data), m.rows, m.cols);
  }

  template <class S>
  void add(const std::string& name, const std::vector<S>& v) {
    add_raw<S>(name, std::span<const S>(v), 1, static_cast<i64>(v.size()));
  }

  template <class S>
  void add_raw(const std::string& name, std::span<const S> values, i64 rows, i64 cols) {
    const auto bytes = blob::pack(values);
    blob::write_bytes(dir / "tensors" / (name + ".bin"), bytes);
    json t;
    t["name"] = name;
    t["dtype"] = scalar_dtype<S>();
    t["rows"] = rows;
    t["cols"] = cols;
    t["bytes"] = bytes.size();
    t["fnv64"] = fnv1a64_hex(bytes.data(), bytes.size());
    index.push_back(t);
    total_bytes += static_cast<i64>(bytes.size());
  }

  void add_u32(const std::string& name, const std::vector<u32>& v) {
    std::vector<unsigned char> bytes(v.size() * 4);
    size_t o = 0;
    for (const u32 x : v) {
      for (int i = 0; i < 4; ++i) bytes[o++] = static_cast<unsigned char>(x >> (8 * i));
    }
    blob::write_bytes(dir / "tensors" / (name + ".bin"), bytes);
    json t;
    t["name"] = name;
    t["dtype"] = "u32";
    t["rows"] = 1;
    t["cols"] = v.size();
    t["bytes"] = bytes.size();
    t["fnv64"] = fnv1a64_hex(bytes.data(), bytes.size());
    index.push_back(t);
    total_bytes += static_cast<i64>(bytes.size());
  }
};

struct TensorReader {
  std::filesystem::path dir;
  std::map<std::string, json> index;

  explicit TensorReader(std::filesystem::path d, const json& tensors) : dir(std::move(d)) {
    for (const auto& t : tensors) index.emplace(t.at("name").get<std::string>(), t);
  }

  bool has(const std::string& name) const { return index.contains(name); }

  std::vector<unsigned char> raw(const std::string& name) const {
    const auto it = index.find(name);
    if (it == index.end()) throw DataError("checkpoint: tensor '" + name + "' missing from manifest");
    const json& t = it->second;
    const auto bytes = blob::read_bytes(dir / "tensors" / (name + ".bin"));
    if (bytes.size() != t.at("bytes").get<size_t>()) {
      throw DataError("checkpoint: tensor '" + name + "' is truncated (" +
                      std::to_string(bytes.size()) + " of " +
                      std::to_string(t.at("bytes").get<size_t>()) + " bytes)");
    }
    if (fnv1a64_hex(bytes.data(), bytes.size()) != t.at("fnv64").get<std::string>()) {
      throw DataError("checkpoint: tensor '" + name + "' failed its checksum");
    }
    return bytes;
  }

  template <class S>
  Mat<S> mat(const std::string& name) const {
    const json& t = index.at(name);
    if (t.at("dtype").get<std::string>() != scalar_dtype<S>()) {
      throw DataError("checkpoint: tensor '" + name + "' has dtype " +
                      t.at("dtype").get<std::string>() + ", expected " + scalar_dtype<S>());
    }
    const auto bytes = raw(name);
    Mat<S> m;
    m.rows = t.at("rows").get<i64>();
    m.cols = t.at("cols").get<i64>();
    m.data = blob::unpack<S>(bytes);
    if (static_cast<i64>(m.data.size()) != m.rows * m.cols) {
      throw DataError("checkpoint: tensor '" + name + "' shape does not match payload");
    }
    return m;
  }

  template <class S>
  std::vector<S> vec(const std::string& name) const {
    return mat<S>(name).data;
  }

  std::vector<u32> vec_u32(const std::string& name) const {
    const json& t = index.at(name);
    if (t.at("dtype").get<std::string>() != "u32") {
      throw DataError("checkpoint: tensor '" + name + "' expected dtype u32");
    }
    const auto bytes = raw(name);
    std::vector<u32> out(bytes.size() / 4);
    size_t o = 0;
    for (u32& x : out) {
      x = 0;
      for (int i = 0; i < 4; ++i) x |= static_cast<u32>(bytes[o++]) << (8 * i);
    }
    return out;
  }
};

void start_checkpoint_dir(const std::filesystem::path& tmp);
StorageReport finish_checkpoint_dir(const std::filesystem::path& tmp,
                                    const std::filesystem::path& final_dir,
                                    StorageReport report);
std::string vocab_tsv(const std::array<std::vector<std::pair<u64, i64>>, kNumFields>& per_field,
                      int field);
json load_manifest(const std::filesystem::path& dir);
const char* field_file_name(int field);

}  // namespace detail

// Writes manifest.json, tensors/*.bin and vocab/*.tsv under `dir`
// atomically (tmp dir + rename). Returns the storage accounting report.
template <class S>
StorageReport save_checkpoint(const std::string& dir, const MlpParams<S>& mlp,
                              const std::map<int, EmbeddingBank<S>>& banks,
                              const OptimState<S>& optim, const json& meta) {
  namespace fs = std::filesystem;
  const fs::path target(dir);
  const fs::path tmp(dir + ".tmp");
  detail::start_checkpoint_dir(tmp);
  StorageReport report;

  try {
    detail::TensorWriter tw{tmp};
    for (size_t l = 0; l < mlp.layers.size(); ++l) {
      tw.add("mlp.layer" + std::to_string(l) + ".W", mlp.layers[l].W);
      tw.add("mlp.layer" + std::to_string(l) + ".b", mlp.layers[l].b);
    }
    for (size_t l = 0; l < mlp.attention.size(); ++l) {
      tw.add("mlp.att" + std::to_string(l) + ".W", mlp.attention[l].W);
      tw.add("mlp.att" + std::to_string(l) + ".b", mlp.attention[l].b);
    }

    json dense_steps = json::array();
    const auto& dense = optim.dense_slots();
    for (size_t t = 0; t < dense.size(); ++t) {
      dense_steps.push_back(dense[t].step);
      const std::string base = "opt.dense" + std::to_string(t);
      if (!dense[t].m.empty()) tw.add(base + ".m", dense[t].m);
      if (!dense[t].v.empty()) tw.add(base + ".v", dense[t].v);
      if (!dense[t].acc.empty()) tw.add(base + ".acc", dense[t].acc);
    }

    json banks_json = json::array();
    fs::create_directories(tmp / "vocab");
    for (const auto& [bank_id, bank] : banks) {
      const std::string base = "bank" + std::to_string(bank_id);
      tw.add(base + ".emb", bank.table());
      report.banks.push_back({bank_id, bank.rows(),
                              static_cast<i64>(bank.table().data.size() * sizeof(S))});
      report.embedding_bytes += static_cast<i64>(bank.table().data.size() * sizeof(S));

      std::array<std::vector<std::pair<u64, i64>>, kNumFields> per_field;
      for (int f = 0; f < kNumFields; ++f) {
        const auto& m = bank.id_map(static_cast<Field>(f));
        per_field[static_cast<size_t>(f)].assign(m.begin(), m.end());
        std::sort(per_field[static_cast<size_t>(f)].begin(), per_field[static_cast<size_t>(f)].end());
      }
      json vocab_files = json::array();
      for (int f = 0; f < kNumFields; ++f) {
        const std::string body = detail::vocab_tsv(per_field, f);
        const std::string fname =
            base + "_" + detail::field_file_name(f) + ".tsv";
        blob::write_bytes(tmp / "vocab" / fname,
                          std::span<const unsigned char>(
                              reinterpret_cast<const unsigned char*>(body.data()), body.size()));
        json vf;
        vf["file"] = fname;
        vf["bytes"] = body.size();
        vf["fnv64"] = fnv1a64_hex(body.data(), body.size());
        vocab_files.push_back(vf);
        tw.total_bytes += static_cast<i64>(body.size());
      }

      json bj;
      bj["bank_id"] = bank_id;
      bj["init_seed"] = bank.init_seed();
      bj["init_kind"] = bank.init_kind() == InitKind::glorot_uniform ? "glorot_uniform" : "uniform";
      bj["init_range"] = bank.init_range();
      bj["embed_dim"] = bank.dim();
      bj["rows"] = bank.rows();
      bj["vocab"] = vocab_files;
      banks_json.push_back(bj);

      const auto sit = optim.sparse_slots().find(bank_id);
      if (sit != optim.sparse_slots().end()) {
        const auto& slots = sit->second;
        if (!slots.m.data.empty()) tw.add(base + ".opt.m", slots.m);
        if (!slots.v.data.empty()) tw.add(base + ".opt.v", slots.v);
        if (!slots.acc.data.empty()) tw.add(base + ".opt.acc", slots.acc);
        if (!slots.steps.empty()) tw.add_u32(base + ".opt.steps", slots.steps);
      }
    }

    json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["scalar"] = scalar_dtype<S>();
    manifest["mlp_layers"] = mlp.layers.size();
    manifest["mlp_attention_layers"] = mlp.attention.size();
    manifest["optim"] = {{"kind", optim.config().kind == OptimKind::sgd      ? "sgd"
                                  : optim.config().kind == OptimKind::adagrad ? "adagrad"
                                                                              : "adam"},
                         {"learning_rate", optim.config().learning_rate},
                         {"beta1", optim.config().beta1},
                         {"beta2", optim.config().beta2},
                         {"adam_eps", optim.config().adam_eps},
                         {"adagrad_eps", optim.config().adagrad_eps},
                         {"keep_embed_slots", optim.config().keep_embed_slots}};
    manifest["dense_steps"] = dense_steps;
    manifest["banks"] = banks_json;
    manifest["tensors"] = tw.index;
    manifest["meta"] = meta;

    const std::string body = manifest.dump(2) + "\n";
    blob::write_bytes(tmp / "manifest.json",
                      std::span<const unsigned char>(
                          reinterpret_cast<const unsigned char*>(body.data()), body.size()));
    report.total_bytes = tw.total_bytes + static_cast<i64>(body.size());
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
  return detail::finish_checkpoint_dir(tmp, target, std::move(report));
}

template <class S>
struct CheckpointState {
  MlpParams<S> mlp;
  std::map<int, EmbeddingBank<S>> banks;
  OptimState<S> optim;
  json meta;
  json manifest;
};

template <class S>
CheckpointState<S> load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const json manifest = detail::load_manifest(dir);
  if (manifest.at("scalar").get<std::string>() != scalar_dtype<S>()) {
    throw DataError("checkpoint scalar width is " + manifest.at("scalar").get<std::string>() +
                    " but this run uses " + scalar_dtype<S>());
  }
  detail::TensorReader tr{fs::path(dir), manifest.at("tensors")};

  CheckpointState<S> out;
  out.manifest = manifest;
  out.meta = manifest.value("meta", json::object());

  const size_t n_layers = manifest.at("mlp_layers").get<size_t>();
  const size_t n_att = manifest.at("mlp_attention_layers").get<size_t>();
  for (size_t l = 0; l < n_layers; ++l) {
    DenseLayer<S> layer;
    layer.W = tr.mat<S>("mlp.layer" + std::to_string(l) + ".W");
    layer.b = tr.vec<S>("mlp.layer" + std::to_string(l) + ".b");
    out.mlp.layers.push_back(std::move(layer));
  }
  for (size_t l = 0; l < n_att; ++l) {
    DenseLayer<S> layer;
    layer.W = tr.mat<S>("mlp.att" + std::to_string(l) + ".W");
    layer.b = tr.vec<S>("mlp.att" + std::to_string(l) + ".b");
    out.mlp.attention.push_back(std::move(layer));
  }

  const json& oj = manifest.at("optim");
  OptimConfig ocfg;
  const std::string kind = oj.at("kind").get<std::string>();
  ocfg.kind = kind == "sgd" ? OptimKind::sgd : kind == "adagrad" ? OptimKind::adagrad : OptimKind::adam;
  ocfg.learning_rate = oj.at("learning_rate").get<double>();
  ocfg.beta1 = oj.at("beta1").get<double>();
  ocfg.beta2 = oj.at("beta2").get<double>();
  ocfg.adam_eps = oj.at("adam_eps").get<double>();
  ocfg.adagrad_eps = oj.at("adagrad_eps").get<double>();
  ocfg.keep_embed_slots = oj.at("keep_embed_slots").get<bool>();
  out.optim = OptimState<S>(ocfg);

  auto& dense = out.optim.dense_slots();
  const json& dense_steps = manifest.at("dense_steps");
  dense.resize(dense_steps.size());
  for (size_t t = 0; t < dense_steps.size(); ++t) {
    dense[t].step = dense_steps[t].get<u64>();
    const std::string base = "opt.dense" + std::to_string(t);
    if (tr.has(base + ".m")) dense[t].m = tr.vec<S>(base + ".m");
    if (tr.has(base + ".v")) dense[t].v = tr.vec<S>(base + ".v");
    if (tr.has(base + ".acc")) dense[t].acc = tr.vec<S>(base + ".acc");
  }

  for (const json& bj : manifest.at("banks")) {
    const int bank_id = bj.at("bank_id").get<int>();
    const std::string base = "bank" + std::to_string(bank_id);
    EmbeddingBank<S> bank(bank_id, bj.at("init_seed").get<u64>(),
                          bj.at("init_kind").get<std::string>() == "glorot_uniform"
                              ? InitKind::glorot_uniform
                              : InitKind::uniform_range,
                          bj.at("init_range").get<double>(), bj.at("embed_dim").get<int>());
    Mat<S> table = tr.mat<S>(base + ".emb");
    const i64 expect_rows = bj.at("rows").get<i64>();
    if (table.rows != expect_rows) {
      throw DataError("checkpoint: bank " + std::to_string(bank_id) + " row count mismatch");
    }

    std::array<std::vector<std::pair<u64, i64>>, kNumFields> per_field;
    i64 mapped = 0;
    for (const json& vf : bj.at("vocab")) {
      const std::string fname = vf.at("file").get<std::string>();
      const auto bytes = blob::read_bytes(fs::path(dir) / "vocab" / fname);
      if (bytes.size() != vf.at("bytes").get<size_t>() ||
          fnv1a64_hex(bytes.data(), bytes.size()) != vf.at("fnv64").get<std::string>()) {
        throw DataError("checkpoint: vocab file '" + fname + "' failed its checksum");
      }
      const std::string body(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      size_t pos = 0;
      while (pos < body.size()) {
        size_t eol = body.find('\n', pos);
        if (eol == std::string::npos) eol = body.size();
        const std::string line = body.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
          throw DataError("checkpoint: malformed vocab line '" + line + "'");
        }
        const int f = std::stoi(line.substr(0, t1));
        const u64 id = std::stoull(line.substr(t1 + 1, t2 - t1 - 1));
        const i64 row = std::stoll(line.substr(t2 + 1));
        if (f < 0 || f >= kNumFields || row < 0 || row >= expect_rows) {
          throw DataError("checkpoint: vocab entry out of range in '" + fname + "'");
        }
        per_field[static_cast<size_t>(f)].emplace_back(id, row);
        ++mapped;
      }
    }
    if (mapped != expect_rows) {
      throw DataError("checkpoint: bank " + std::to_string(bank_id) + " vocab maps " +
                      std::to_string(mapped) + " rows, expected " + std::to_string(expect_rows));
    }
    bank.restore(std::move(table), std::move(per_field));

    typename OptimState<S>::SparseSlots slots;
    bool any = false;
    if (tr.has(base + ".opt.m")) {
      slots.m = tr.mat<S>(base + ".opt.m");
      any = true;
    }
    if (tr.has(base + ".opt.v")) {
      slots.v = tr.mat<S>(base + ".opt.v");
      any = true;
    }
    if (tr.has(base + ".opt.acc")) {
      slots.acc = tr.mat<S>(base + ".opt.acc");
      any = true;
    }
    if (tr.has(base + ".opt.steps")) {
      slots.steps = tr.vec_u32(base + ".opt.steps");
      any = true;
    }
    if (any) out.optim.sparse_slots().emplace(bank_id, std::move(slots));

    out.banks.emplace(bank_id, std::move(bank));
  }
  return out;
}

// Reads just the manifest (scalar width, meta) without loading tensors.
json read_checkpoint_manifest(const std::string& dir);

// Metrics CSV: fixed column order, floats with 6 decimals, NaN as "nan".
// Appending validates the existing header so mixed schemas never merge.
inline constexpr const char* kMetricsCsvHeader =
    "run_id,variant,dataset_index,epoch,bank_id,train_mean_loss,test_auc,test_logloss,wall_ms";

void write_metrics_csv(const std::string& path, std::span<const MetricRecord> records,
                       bool append = false);
std::vector<MetricRecord> read_metrics_csv(const std::string& path);

}  // namespace meda
