#include "meda/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "meda/numerics.hpp"
#include "meda/rng.hpp"

namespace meda {

std::vector<FieldSpec> Dataset::default_schema() {
  return {{"user", FieldKind::scalar_categorical},
          {"item", FieldKind::scalar_categorical},
          {"category", FieldKind::scalar_categorical},
          {"behavior", FieldKind::sequence}};
}

bool Dataset::sorted_by_timestamp() const {
  for (size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].timestamp < samples[i - 1].timestamp) return false;
  }
  return true;
}

void GenConfig::validate() const {
  if (n_samples < 1) throw ConfigError("gen.n_samples must be >= 1");
  if (n_users < 1) throw ConfigError("gen.n_users must be >= 1");
  if (n_items < 1) throw ConfigError("gen.n_items must be >= 1");
  if (n_categories < 1) throw ConfigError("gen.n_categories must be >= 1");
  if (latent_dim < 1) throw ConfigError("gen.latent_dim must be >= 1");
  if (zipf_exponent < 0.0) throw ConfigError("gen.zipf_exponent must be >= 0");
  if (!(target_positive_rate > 0.0 && target_positive_rate < 1.0)) {
    throw ConfigError("gen.target_positive_rate must lie in (0, 1)");
  }
  if (max_seq_len < 0) throw ConfigError("gen.max_seq_len must be >= 0");
}

GenConfig benchmark_gen_config() {
  GenConfig cfg;
  cfg.n_samples = 400000;
  cfg.n_users = 60000;
  cfg.n_items = 60000;
  cfg.n_categories = 200;
  cfg.latent_dim = 8;
  cfg.zipf_exponent = 1.1;
  cfg.target_positive_rate = 0.5;
  cfg.signal_scale = 2.0;
  cfg.max_seq_len = 20;
  cfg.seed = 2024;
  return cfg;
}

namespace {

// Inverse-CDF sampler over ranks 1..n with p(r) proportional to r^-s.
class ZipfSampler {
 public:
  ZipfSampler(i64 n, double s) : cdf_(static_cast<size_t>(n)) {
    double acc = 0.0;
    for (i64 r = 0; r < n; ++r) {
      acc += std::pow(static_cast<double>(r + 1), -s);
      cdf_[static_cast<size_t>(r)] = acc;
    }
    for (double& c : cdf_) c /= acc;
  }

  i64 draw(SplitMix64& rng) const {
    const double u = rng.uniform01();
    const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    return static_cast<i64>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace

Dataset generate_synthetic(const GenConfig& cfg) {
  cfg.validate();

  const size_t n = static_cast<size_t>(cfg.n_samples);
  const int d = cfg.latent_dim;

  // Latents drawn with per-entity counter keys so vector values do not
  // depend on how many samples are generated.
  auto latent = [&](u64 tag, u64 id) {
    SplitMix64 r(derive_key(cfg.seed, tag, id));
    std::vector<double> v(static_cast<size_t>(d));
    for (double& x : v) x = r.gaussian();
    return v;
  };

  std::vector<std::vector<double>> user_lat(static_cast<size_t>(cfg.n_users));
  std::vector<std::vector<double>> item_lat(static_cast<size_t>(cfg.n_items));
  std::vector<u64> item_cat(static_cast<size_t>(cfg.n_items));
  for (i64 u = 0; u < cfg.n_users; ++u) user_lat[static_cast<size_t>(u)] = latent(1, static_cast<u64>(u));
  for (i64 i = 0; i < cfg.n_items; ++i) {
    item_lat[static_cast<size_t>(i)] = latent(2, static_cast<u64>(i));
    item_cat[static_cast<size_t>(i)] =
        derive_key(cfg.seed, 3, static_cast<u64>(i)) % static_cast<u64>(cfg.n_categories);
  }

  ZipfSampler zipf(cfg.n_items, cfg.zipf_exponent);
  SplitMix64 stream(derive_key(cfg.seed, 4, 0));

  std::vector<u64> users(n), items(n);
  std::vector<double> dots(n);
  for (size_t i = 0; i < n; ++i) {
    const u64 u = stream.below(static_cast<u64>(cfg.n_users));
    const u64 it = static_cast<u64>(zipf.draw(stream));
    users[i] = u;
    items[i] = it;
    double dot = 0.0;
    const auto& ul = user_lat[static_cast<size_t>(u)];
    const auto& il = item_lat[static_cast<size_t>(it)];
    for (int k = 0; k < d; ++k) dot += ul[static_cast<size_t>(k)] * il[static_cast<size_t>(k)];
    dots[i] = cfg.signal_scale * dot;
  }

  // Bisect the bias so the mean label probability hits the target rate.
  double lo = -60.0, hi = 60.0, bias = 0.0;
  bool calibrated = false;
  for (int step = 0; step < 200; ++step) {
    bias = 0.5 * (lo + hi);
    double mean = 0.0;
    for (const double z : dots) mean += sigmoid(z + bias);
    mean /= static_cast<double>(n);
    if (std::abs(mean - cfg.target_positive_rate) < 1e-9) {
      calibrated = true;
      break;
    }
    if (mean < cfg.target_positive_rate) {
      lo = bias;
    } else {
      hi = bias;
    }
  }
  if (!calibrated) {
    throw ConfigError("generate_synthetic: positive-rate calibration did not converge "
                      "within 200 bisection steps");
  }

  Dataset ds;
  ds.samples.resize(n);
  std::unordered_map<u64, std::vector<BehaviorEvent>> history;
  SplitMix64 label_rng(derive_key(cfg.seed, 5, 0));
  for (size_t i = 0; i < n; ++i) {
    SparseSample& s = ds.samples[i];
    s.user_id = users[i];
    s.item_id = items[i];
    s.category_id = item_cat[static_cast<size_t>(items[i])];
    s.timestamp = static_cast<i64>(i);

    const auto& past = history[s.user_id];
    const size_t take = std::min(past.size(), static_cast<size_t>(cfg.max_seq_len));
    s.behavior_seq.reserve(take);
    for (size_t j = 0; j < take; ++j) {
      s.behavior_seq.push_back(past[past.size() - 1 - j]);  // most recent first
    }

    const double p = sigmoid(dots[i] + bias);
    s.label = label_rng.uniform01() < p ? 1 : 0;
    if (s.label == 1) {
      history[s.user_id].push_back({s.item_id, s.category_id});
    }
  }
  return ds;
}

namespace {

u64 parse_u64(std::string_view sv, const std::string& what, size_t line_no) {
  u64 value = 0;
  const auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), value);
  if (ec != std::errc() || ptr != sv.data() + sv.size()) {
    throw DataError("line " + std::to_string(line_no) + ": bad " + what + " '" +
                    std::string(sv) + "'");
  }
  return value;
}

i64 parse_i64(std::string_view sv, const std::string& what, size_t line_no) {
  i64 value = 0;
  const auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), value);
  if (ec != std::errc() || ptr != sv.data() + sv.size()) {
    throw DataError("line " + std::to_string(line_no) + ": bad " + what + " '" +
                    std::string(sv) + "'");
  }
  return value;
}

SparseSample parse_line(std::string_view line, size_t line_no) {
  std::vector<std::string_view> cols;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  if (cols.size() != 6) {
    throw DataError("line " + std::to_string(line_no) + ": expected 6 columns, got " +
                    std::to_string(cols.size()));
  }

  SparseSample s;
  s.timestamp = parse_i64(cols[0], "timestamp", line_no);
  s.user_id = parse_u64(cols[1], "user_id", line_no);
  s.item_id = parse_u64(cols[2], "item_id", line_no);
  s.category_id = parse_u64(cols[3], "category_id", line_no);

  if (!cols[4].empty()) {
    std::string_view seq = cols[4];
    size_t pos = 0;
    while (pos <= seq.size()) {
      const size_t bar = seq.find('|', pos);
      const std::string_view pair =
          seq.substr(pos, bar == std::string_view::npos ? std::string_view::npos : bar - pos);
      const size_t colon = pair.find(':');
      if (colon == std::string_view::npos) {
        throw DataError("line " + std::to_string(line_no) + ": behavior pair '" +
                        std::string(pair) + "' missing ':'");
      }
      BehaviorEvent ev;
      ev.item_id = parse_u64(pair.substr(0, colon), "behavior item", line_no);
      ev.category_id = parse_u64(pair.substr(colon + 1), "behavior category", line_no);
      s.behavior_seq.push_back(ev);
      if (bar == std::string_view::npos) break;
      pos = bar + 1;
    }
  }

  const std::string_view lab = cols[5];
  if (lab == "0") {
    s.label = 0;
  } else if (lab == "1") {
    s.label = 1;
  } else {
    throw DataError("line " + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                    std::string(lab) + "'");
  }
  return s;
}

}  // namespace

Dataset read_log_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");

  Dataset ds;
  std::string line;
  size_t line_no = 0;
  size_t malformed = 0;
  std::string first_error;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      ds.samples.push_back(parse_line(line, line_no));
    } catch (const DataError& e) {
      ++malformed;
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (in.bad()) throw DataError("I/O error while reading '" + path + "'");

  const size_t total = ds.samples.size() + malformed;
  if (total > 0 && static_cast<double>(malformed) > 0.01 * static_cast<double>(total)) {
    throw DataError("'" + path + "': " + std::to_string(malformed) + "/" +
                    std::to_string(total) + " malformed lines (first: " + first_error + ")");
  }
  if (!ds.sorted_by_timestamp()) {
    throw DataError("'" + path + "': rows are not sorted by timestamp ascending");
  }
  return ds;
}

std::string to_tsv(const Dataset& ds) {
  std::string out;
  out.reserve(ds.samples.size() * 48);
  for (const SparseSample& s : ds.samples) {
    out += std::to_string(s.timestamp);
    out += '\t';
    out += std::to_string(s.user_id);
    out += '\t';
    out += std::to_string(s.item_id);
    out += '\t';
    out += std::to_string(s.category_id);
    out += '\t';
    for (size_t j = 0; j < s.behavior_seq.size(); ++j) {
      if (j > 0) out += '|';
      out += std::to_string(s.behavior_seq[j].item_id);
      out += ':';
      out += std::to_string(s.behavior_seq[j].category_id);
    }
    out += '\t';
    out += s.label ? '1' : '0';
    out += '\n';
  }
  return out;
}

void write_log_tsv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  const std::string body = to_tsv(ds);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw DataError("I/O error while writing '" + path + "'");
}

std::pair<Dataset, Dataset> split_chronological(const Dataset& ds, double test_fraction) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
  if (!ds.sorted_by_timestamp()) {
    throw DataError("split_chronological: input is not sorted by timestamp");
  }
  const size_t n = ds.samples.size();
  const size_t n_test =
      static_cast<size_t>(std::ceil(static_cast<double>(n) * test_fraction));
  const size_t n_train = n - n_test;

  Dataset train, test;
  train.field_schema = ds.field_schema;
  test.field_schema = ds.field_schema;
  train.samples.assign(ds.samples.begin(), ds.samples.begin() + static_cast<i64>(n_train));
  test.samples.assign(ds.samples.begin() + static_cast<i64>(n_train), ds.samples.end());
  return {std::move(train), std::move(test)};
}

std::vector<Dataset> split_continual(const Dataset& train, int T,
                                     const std::optional<std::vector<double>>& boundaries) {
  if (T < 1) throw ConfigError("split_continual: T must be >= 1");

  std::vector<double> bounds;
  if (boundaries.has_value()) {
    bounds = *boundaries;
    if (bounds.size() != static_cast<size_t>(T - 1)) {
      throw ConfigError("split_continual: expected " + std::to_string(T - 1) +
                        " boundaries, got " + std::to_string(bounds.size()));
    }
    double prev = 0.0;
    for (const double b : bounds) {
      if (!(b > prev && b < 1.0)) {
        throw ConfigError("split_continual: boundaries must be strictly increasing in (0, 1)");
      }
      prev = b;
    }
  } else {
    for (int t = 1; t < T; ++t) bounds.push_back(static_cast<double>(t) / T);
  }

  const size_t n = train.samples.size();
  std::vector<size_t> cuts;
  cuts.push_back(0);
  for (const double b : bounds) {
    cuts.push_back(static_cast<size_t>(std::llround(b * static_cast<double>(n))));
  }
  cuts.push_back(n);

  std::vector<Dataset> parts;
  parts.reserve(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    Dataset part;
    part.field_schema = train.field_schema;
    part.samples.assign(train.samples.begin() + static_cast<i64>(cuts[static_cast<size_t>(t)]),
                        train.samples.begin() + static_cast<i64>(cuts[static_cast<size_t>(t) + 1]));
    parts.push_back(std::move(part));
  }
  return parts;
}

Dataset subsample(const Dataset& ds, double rho, u64 seed) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("subsample: rho must lie in (0, 1]");
  if (rho == 1.0) return ds;
  Dataset out;
  out.field_schema = ds.field_schema;
  SplitMix64 rng(derive_key(seed, 6, 0));
  for (const SparseSample& s : ds.samples) {
    if (rng.uniform01() < rho) out.samples.push_back(s);
  }
  return out;
}

Dataset add_sampled_negatives(const Dataset& ds, int neg_per_pos, u64 seed) {
  if (neg_per_pos < 0) throw ConfigError("neg_per_pos must be >= 0");
  if (neg_per_pos == 0) return ds;

  std::vector<std::pair<u64, u64>> items;  // (item, category) observed
  {
    std::unordered_set<u64> seen;
    for (const SparseSample& s : ds.samples) {
      if (seen.insert(s.item_id).second) items.emplace_back(s.item_id, s.category_id);
    }
    std::sort(items.begin(), items.end());
  }
  if (items.empty()) return ds;

  Dataset out;
  out.field_schema = ds.field_schema;
  SplitMix64 rng(derive_key(seed, 7, 0));
  for (const SparseSample& s : ds.samples) {
    out.samples.push_back(s);
    if (s.label != 1) continue;
    for (int k = 0; k < neg_per_pos; ++k) {
      SparseSample neg = s;
      const auto& [item, cat] = items[static_cast<size_t>(rng.below(items.size()))];
      neg.item_id = item;
      neg.category_id = cat;
      neg.label = 0;
      out.samples.push_back(std::move(neg));
    }
  }
  return out;
}

}  // namespace meda
