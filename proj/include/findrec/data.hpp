#pragma once

// Interaction loading, modality feature files, leave-one-out splits and
// padded batches.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "findrec/encoders.hpp"
#include "findrec/rng.hpp"

namespace findrec {

inline constexpr std::size_t kMinInteractions = 5;

struct Interaction {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  std::int64_t timestamp = 0;
};

struct DatasetStats {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_interactions = 0;
  double sparsity = 0.0;
  double avg_len = 0.0;
};

// Users and items reindexed contiguously: users from 0 in ascending raw-id
// order, items from 1 in ascending raw-id order. Id 0 is padding.
struct Dataset {
  std::vector<std::int64_t> user_raw;                // user index -> raw id
  std::vector<std::int64_t> item_raw;                // item id -> raw id, [0] unused
  std::vector<std::vector<std::int64_t>> sequences;  // per user, chronological item ids
  DatasetStats stats;

  std::size_t n_users() const { return sequences.size(); }
  std::size_t n_items() const { return item_raw.empty() ? 0 : item_raw.size() - 1; }
};

namespace data_detail {

inline bool parse_int(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

}  // namespace data_detail

inline std::vector<Interaction> parse_interactions(std::istream& in) {
  std::vector<Interaction> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    Interaction r;
    if (fields.size() != 3 || !data_detail::parse_int(fields[0], r.user_id) ||
        !data_detail::parse_int(fields[1], r.item_id) || !data_detail::parse_int(fields[2], r.timestamp)) {
      throw ParseError("line " + std::to_string(line_no) + ": expected user<TAB>item<TAB>timestamp, got '" +
                       line + "'");
    }
    if (r.user_id < 0 || r.item_id < 1 || r.timestamp < 0) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": user and timestamp must be >= 0 and item >= 1");
    }
    rows.push_back(r);
  }
  return rows;
}

// Drops users with fewer than five interactions, sorts each user's history by
// timestamp (stable in file order) and reindexes.
inline Dataset build_dataset(const std::vector<Interaction>& rows) {
  std::map<std::int64_t, std::vector<Interaction>> by_user;
  for (const auto& r : rows) by_user[r.user_id].push_back(r);

  std::map<std::int64_t, std::int64_t> item_index;
  std::vector<std::pair<std::int64_t, std::vector<Interaction>>> kept;
  for (auto& [u, hist] : by_user) {
    if (hist.size() < kMinInteractions) continue;
    std::stable_sort(hist.begin(), hist.end(),
                     [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
    for (const auto& r : hist) item_index[r.item_id] = 0;
    kept.emplace_back(u, std::move(hist));
  }
  if (kept.empty()) {
    throw EmptyDataset("no user has at least " + std::to_string(kMinInteractions) + " interactions");
  }

  Dataset ds;
  ds.item_raw.push_back(0);
  for (auto& [raw, idx] : item_index) {
    idx = static_cast<std::int64_t>(ds.item_raw.size());
    ds.item_raw.push_back(raw);
  }
  std::size_t total = 0;
  for (auto& [u, hist] : kept) {
    ds.user_raw.push_back(u);
    std::vector<std::int64_t> seq;
    seq.reserve(hist.size());
    for (const auto& r : hist) seq.push_back(item_index.at(r.item_id));
    total += seq.size();
    ds.sequences.push_back(std::move(seq));
  }
  auto& st = ds.stats;
  st.n_users = ds.n_users();
  st.n_items = ds.n_items();
  st.n_interactions = total;
  st.sparsity = 1.0 - static_cast<double>(total) / (static_cast<double>(st.n_users) * static_cast<double>(st.n_items));
  st.avg_len = static_cast<double>(total) / static_cast<double>(st.n_users);
  return ds;
}

inline Dataset load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return build_dataset(parse_interactions(in));
}

inline void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : rows) out << r.user_id << '\t' << r.item_id << '\t' << r.timestamp << '\n';
}

// ---------------------------------------------------------------------------
// .frf feature files: "FRF1", u32 item_count, u32 dim, then item_count records
// of [u32 item_id, dim x f32], all little-endian.

struct FeatureTable {
  Modality modality = Modality::Text;
  std::uint32_t dim = 0;
  std::map<std::int64_t, std::vector<float>> vectors;  // raw item id -> vector
};

namespace frf_detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw CorruptRecord(std::string("truncated feature file at ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

inline float get_f32(std::istream& in) {
  const std::uint32_t v = get_u32(in, "vector payload");
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace frf_detail

inline void write_features(std::ostream& out, const FeatureTable& table) {
  out.write("FRF1", 4);
  frf_detail::put_u32(out, static_cast<std::uint32_t>(table.vectors.size()));
  frf_detail::put_u32(out, table.dim);
  for (const auto& [id, vec] : table.vectors) {
    if (vec.size() != table.dim) throw ShapeMismatch("feature vector length differs from table dim");
    frf_detail::put_u32(out, static_cast<std::uint32_t>(id));
    for (float f : vec) frf_detail::put_f32(out, f);
  }
}

inline void write_features(const std::filesystem::path& path, const FeatureTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_features(out, table);
}

inline FeatureTable read_features(std::istream& in, Modality modality) {
  char magic[4];
  if (!in.read(magic, 4)) throw BadMagic("feature file shorter than its magic");
  if (std::memcmp(magic, "FRF", 3) != 0) throw BadMagic("feature file magic is not FRF1");
  if (magic[3] != '1') throw VersionMismatch(std::string("unsupported feature file version '") + magic[3] + "'");
  FeatureTable t;
  t.modality = modality;
  const std::uint32_t count = frf_detail::get_u32(in, "item count");
  t.dim = frf_detail::get_u32(in, "dim");
  if (t.dim == 0) throw CorruptRecord("feature dim is zero");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::int64_t id = frf_detail::get_u32(in, "item id");
    std::vector<float> v(t.dim);
    for (auto& f : v) {
      f = frf_detail::get_f32(in);
      if (!std::isfinite(f)) throw CorruptRecord("non-finite feature for item " + std::to_string(id));
    }
    if (!t.vectors.emplace(id, std::move(v)).second) {
      throw CorruptRecord("duplicate item " + std::to_string(id) + " in feature file");
    }
  }
  return t;
}

inline FeatureTable load_features(const std::filesystem::path& path, Modality modality) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_features(in, modality);
}

// Dense (n_items + 1, dim) matrix indexed by internal item id; row 0 is zero.
struct ItemFeatures {
  Tensor matrix;
  std::size_t dim() const { return matrix.dim(1); }
};

inline ItemFeatures align_features(const FeatureTable& table, const Dataset& ds) {
  ItemFeatures out{Tensor({ds.n_items() + 1, table.dim}, 0.0)};
  for (std::size_t i = 1; i <= ds.n_items(); ++i) {
    auto it = table.vectors.find(ds.item_raw[i]);
    if (it == table.vectors.end()) throw MissingItem(ds.item_raw[i]);
    for (std::size_t j = 0; j < table.dim; ++j) out.matrix.at(i, j) = static_cast<double>(it->second[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Leave-one-out protocol.

struct Example {
  std::size_t user = 0;
  std::vector<std::int64_t> context;
  std::int64_t target = 0;
  std::size_t seq_len = 0;  // full length of the user's sequence
};

struct Splits {
  std::vector<std::vector<std::int64_t>> train;  // per user: sequence minus its last two items
  std::vector<Example> valid;                    // context = train prefix, target = second-to-last
  std::vector<Example> test;                     // context = all but last, target = last
};

inline Splits leave_one_out_split(const Dataset& ds) {
  Splits s;
  for (std::size_t u = 0; u < ds.n_users(); ++u) {
    const auto& seq = ds.sequences[u];
    if (seq.size() < 3) throw EmptyDataset("user sequence too short for leave-one-out");
    const std::size_t n = seq.size();
    std::vector<std::int64_t> prefix(seq.begin(), seq.end() - 2);
    s.valid.push_back({u, prefix, seq[n - 2], n});
    s.test.push_back({u, std::vector<std::int64_t>(seq.begin(), seq.end() - 1), seq[n - 1], n});
    s.train.push_back(std::move(prefix));
  }
  return s;
}

// Next-item examples from every strict prefix of each training sequence.
inline std::vector<Example> training_examples(const Splits& s) {
  std::vector<Example> out;
  for (std::size_t u = 0; u < s.train.size(); ++u) {
    const auto& p = s.train[u];
    for (std::size_t t = 1; t < p.size(); ++t) {
      out.push_back({u, std::vector<std::int64_t>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(t)), p[t],
                     s.valid[u].seq_len});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches.

struct Batch {
  std::size_t size = 0;  // B
  std::size_t len = 0;   // L
  std::vector<std::int64_t> item_ids;  // (B, L), right-padded with 0
  Tensor text_feats;                   // (B, L, d_text), zero rows at padding
  Tensor img_feats;                    // (B, L, d_img)
  std::vector<std::size_t> valid_len;
  std::vector<std::int64_t> target;
  std::vector<std::size_t> users;
  std::vector<std::size_t> seq_len;
};

struct BatchFeatures {
  const ItemFeatures* text = nullptr;
  const ItemFeatures* image = nullptr;
};

namespace data_detail {

inline Tensor gather_features(const ItemFeatures& f, const std::vector<std::int64_t>& ids, std::size_t B,
                              std::size_t L) {
  const std::size_t d = f.dim();
  Tensor out({B, L, d}, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == 0) continue;
    const auto id = static_cast<std::size_t>(ids[i]);
    if (id >= f.matrix.dim(0)) throw IndexError("no features for item " + std::to_string(id));
    std::copy_n(f.matrix.data().data() + id * d, d, out.data().data() + i * d);
  }
  return out;
}

}  // namespace data_detail

inline Batch make_batch(std::span<const Example* const> examples, std::size_t max_len, const BatchFeatures& feats) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  Batch b;
  b.size = examples.size();
  b.len = max_len;
  b.item_ids.assign(b.size * max_len, 0);
  for (std::size_t r = 0; r < examples.size(); ++r) {
    const Example& ex = *examples[r];
    if (ex.context.empty()) throw ConfigError("example with empty context");
    if (ex.target < 1) throw IndexError("example target must be >= 1");
    const std::size_t keep = std::min(max_len, ex.context.size());
    const std::size_t from = ex.context.size() - keep;
    std::copy(ex.context.begin() + static_cast<std::ptrdiff_t>(from), ex.context.end(),
              b.item_ids.begin() + static_cast<std::ptrdiff_t>(r * max_len));
    b.valid_len.push_back(keep);
    b.target.push_back(ex.target);
    b.users.push_back(ex.user);
    b.seq_len.push_back(ex.seq_len);
  }
  if (feats.text) b.text_feats = data_detail::gather_features(*feats.text, b.item_ids, b.size, max_len);
  if (feats.image) b.img_feats = data_detail::gather_features(*feats.image, b.item_ids, b.size, max_len);
  return b;
}

// Shuffles example order with `seed` when `shuffle` is set, then chunks into
// batches of at most batch_size rows.
inline std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size,
                                       std::size_t max_len, std::uint64_t seed, const BatchFeatures& feats = {},
                                       bool shuffle = true) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<const Example*> order;
  order.reserve(examples.size());
  for (const auto& e : examples) order.push_back(&e);
  if (shuffle) {
    std::mt19937_64 eng(mix64(seed));
    std::shuffle(order.begin(), order.end(), eng);
  }
  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - i);
    out.push_back(make_batch(std::span<const Example* const>(order.data() + i, n), max_len, feats));
  }
  return out;
}

// Inverse of the padding: each row's item ids up to valid_len.
inline std::vector<std::vector<std::int64_t>> unpad(const Batch& b) {
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t r = 0; r < b.size; ++r) {
    auto begin = b.item_ids.begin() + static_cast<std::ptrdiff_t>(r * b.len);
    out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(b.valid_len[r]));
  }
  return out;
}

// Everything a training or evaluation run consumes.
struct PreparedData {
  Dataset dataset;
  ItemFeatures text;
  ItemFeatures image;
  Splits splits;

  BatchFeatures features() const { return {&text, &image}; }
};

inline PreparedData prepare_data(Dataset ds, const FeatureTable& text, const FeatureTable& image) {
  PreparedData p;
  p.text = align_features(text, ds);
  p.image = align_features(image, ds);
  p.splits = leave_one_out_split(ds);
  p.dataset = std::move(ds);
  return p;
}

// Reads interactions.tsv, text.frf and image.frf from a directory.
inline PreparedData load_data_dir(const std::filesystem::path& dir) {
  Dataset ds = load_interactions(dir / "interactions.tsv");
  FeatureTable text = load_features(dir / "text.frf", Modality::Text);
  FeatureTable image = load_features(dir / "image.frf", Modality::Image);
  return prepare_data(std::move(ds), text, image);
}

}  // namespace findrec
