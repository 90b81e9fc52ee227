#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "repprobe/binary_io.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/matrix.hpp"

namespace repprobe {

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// N x d utterance representations plus one id per row. Values live in
/// float64 in memory; the on-disk format is float32.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(Matrix<double> values, std::vector<std::string> row_ids)
      : values_(std::move(values)), row_ids_(std::move(row_ids)) {
    if (values_.rows() == 0 || values_.cols() == 0)
      throw EmptyError("embedding matrix must have at least one row and one column");
    if (row_ids_.size() != values_.rows())
      throw ShapeError("row id count " + std::to_string(row_ids_.size()) +
                       " does not match row count " + std::to_string(values_.rows()));
    if (!all_finite(values_.flat())) throw ValueError("embedding matrix contains non-finite values");
    std::unordered_set<std::string_view> seen;
    for (const auto& id : row_ids_)
      if (!seen.insert(id).second) throw DuplicateIdError("duplicate embedding row id '" + id + "'");
  }

  std::size_t n_rows() const noexcept { return values_.rows(); }
  std::size_t dim() const noexcept { return values_.cols(); }
  const Matrix<double>& values() const noexcept { return values_; }
  const std::vector<std::string>& row_ids() const noexcept { return row_ids_; }
  std::span<const double> row(std::size_t i) const { return values_.row(i); }

  /// Rows at `indices`, in that order.
  EmbeddingMatrix select(std::span<const std::size_t> indices) const {
    Matrix<double> v(indices.size(), dim());
    std::vector<std::string> ids;
    ids.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      std::ranges::copy(values_.row(indices[r]), v.row(r).begin());
      ids.push_back(row_ids_[indices[r]]);
    }
    return EmbeddingMatrix(std::move(v), std::move(ids));
  }

 private:
  Matrix<double> values_;
  std::vector<std::string> row_ids_;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

/// Writes through a sibling temp file and renames, so a failed run never
/// leaves a partial artifact at `path`.
template <typename WriteFn>
void write_file_atomic(const std::filesystem::path& path, WriteFn&& write, bool binary = true) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    write(out);
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed for '" + path.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into '" + path.string() + "': " + ec.message());
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Splits text into lines on '\n'; a trailing newline does not produce an
/// extra empty line and a trailing '\r' is dropped.
inline std::vector<std::string_view> lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    auto line = text.substr(start, pos - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

inline constexpr char kEmbeddingMagic[4] = {'E', 'M', 'B', '1'};

/// Parses the EMB1 container: magic, u32 N, u32 d, N*d float32 (all
/// little-endian, row-major), then N newline-terminated UTF-8 ids.
inline EmbeddingMatrix parse_embeddings(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, kEmbeddingMagic))
    throw FormatError("bad magic: expected \"EMB1\"");
  if (bytes.size() < 12) throw TruncatedError("header shorter than 12 bytes");
  const std::uint64_t n = binary::decode_u32(p + 4);
  const std::uint64_t d = binary::decode_u32(p + 8);
  if (n == 0 || d == 0)
    throw EmptyError("header declares N=" + std::to_string(n) + ", d=" + std::to_string(d));
  const std::uint64_t payload = n * d * 4;
  if (bytes.size() - 12 < payload)
    throw TruncatedError("payload holds " + std::to_string((bytes.size() - 12) / 4) +
                         " floats, header declares " + std::to_string(n * d));
  std::vector<double> values(n * d);
  for (std::uint64_t i = 0; i < n * d; ++i) {
    const float v = binary::decode_f32(p + 12 + 4 * i);
    if (!std::isfinite(v))
      throw ValueError("non-finite value at row " + std::to_string(i / d) + ", column " +
                       std::to_string(i % d));
    values[i] = v;
  }
  std::string_view tail = bytes.substr(12 + payload);
  std::vector<std::string> ids;
  ids.reserve(n);
  while (ids.size() < n) {
    const auto nl = tail.find('\n');
    if (nl == std::string_view::npos)
      throw TruncatedError("expected " + std::to_string(n) + " ids, found " + std::to_string(ids.size()));
    if (nl == 0) throw FormatError("empty id for row " + std::to_string(ids.size()));
    ids.emplace_back(tail.substr(0, nl));
    tail.remove_prefix(nl + 1);
  }
  if (!tail.empty()) throw FormatError(std::to_string(tail.size()) + " trailing bytes after ids");
  return EmbeddingMatrix(Matrix<double>(n, d, std::move(values)), std::move(ids));
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  try {
    return parse_embeddings(detail::read_file(path));
  } catch (const Error& e) {
    rethrow_with_context(e, path.string());
  }
}

inline void write_embeddings(std::ostream& out, const EmbeddingMatrix& emb) {
  out.write(kEmbeddingMagic, 4);
  binary::put_u32(out, static_cast<std::uint32_t>(emb.n_rows()));
  binary::put_u32(out, static_cast<std::uint32_t>(emb.dim()));
  for (double v : emb.values().flat()) binary::put_f32(out, static_cast<float>(v));
  for (const auto& id : emb.row_ids()) out << id << '\n';
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& emb) {
  detail::write_file_atomic(path, [&](std::ostream& out) { write_embeddings(out, emb); });
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

enum class Speaker { user, system };
enum class SpeakerFilter { all, user, system };

inline const char* to_string(Speaker s) { return s == Speaker::user ? "user" : "system"; }
inline const char* to_string(SpeakerFilter s) {
  switch (s) {
    case SpeakerFilter::user: return "user";
    case SpeakerFilter::system: return "system";
    default: return "all";
  }
}

inline SpeakerFilter parse_speaker_filter(std::string_view s) {
  if (s == "all") return SpeakerFilter::all;
  if (s == "user") return SpeakerFilter::user;
  if (s == "system") return SpeakerFilter::system;
  throw ConfigError("unknown speaker '" + std::string(s) + "' (expected user, system or all)");
}

enum class FieldKind { single, multi };
using LabelSchema = std::map<std::string, FieldKind, std::less<>>;

struct LabelRow {
  std::string id;
  Speaker speaker = Speaker::user;
  /// Single-label fields hold exactly one token; multi-label fields hold a
  /// sorted, deduplicated, possibly empty token set.
  std::map<std::string, std::vector<std::string>, std::less<>> fields;
};

class LabelTable {
 public:
  LabelTable() = default;
  LabelTable(LabelSchema schema, std::vector<LabelRow> rows) : schema_(std::move(schema)), rows_(std::move(rows)) {
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      if (!index_.emplace(rows_[i].id, i).second)
        throw DuplicateIdError("duplicate label id '" + rows_[i].id + "'");
      for (const auto& [name, kind] : schema_) {
        auto it = rows_[i].fields.find(name);
        if (it == rows_[i].fields.end())
          throw SchemaError("row '" + rows_[i].id + "' lacks field '" + name + "'");
        if (kind == FieldKind::single && it->second.size() != 1)
          throw SchemaError("single-label field '" + name + "' must hold one token in row '" + rows_[i].id + "'");
      }
    }
  }

  const LabelSchema& schema() const noexcept { return schema_; }
  const std::vector<LabelRow>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }

  const LabelRow* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &rows_[it->second];
  }

  FieldKind kind(std::string_view field) const {
    auto it = schema_.find(field);
    if (it == schema_.end()) throw SchemaError("unknown field '" + std::string(field) + "'");
    return it->second;
  }

 private:
  LabelSchema schema_;
  std::vector<LabelRow> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Sorted, deduplicated tokens of a multi-label cell; empty tokens dropped.
inline std::vector<std::string> split_label_set(std::string_view cell) {
  std::vector<std::string> tokens;
  if (cell.empty()) return tokens;
  for (auto tok : detail::split(cell, '|'))
    if (!tok.empty()) tokens.emplace_back(tok);
  std::ranges::sort(tokens);
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  return tokens;
}

inline LabelTable parse_labels(std::string_view text, const LabelSchema& schema, const std::string& origin = "labels") {
  const auto all_lines = detail::lines(text);
  if (all_lines.empty()) throw EmptyError(origin + ": missing header row");
  const auto header = detail::split(all_lines[0], '\t');
  std::map<std::string, std::size_t, std::less<>> column;
  for (std::size_t c = 0; c < header.size(); ++c) column.emplace(std::string(header[c]), c);
  auto require = [&](std::string_view name) {
    auto it = column.find(name);
    if (it == column.end()) throw SchemaError(origin + ": missing column '" + std::string(name) + "'");
    return it->second;
  };
  const std::size_t id_col = require("id");
  const std::size_t speaker_col = require("speaker");
  std::vector<std::pair<std::string, std::size_t>> field_cols;
  for (const auto& [name, kind] : schema) field_cols.emplace_back(name, require(name));

  std::vector<LabelRow> rows;
  rows.reserve(all_lines.size() - 1);
  for (std::size_t ln = 1; ln < all_lines.size(); ++ln) {
    const auto cells = detail::split(all_lines[ln], '\t');
    const std::string where = origin + ":" + std::to_string(ln + 1);
    if (cells.size() != header.size())
      throw FormatError(where + ": expected " + std::to_string(header.size()) + " columns, found " +
                        std::to_string(cells.size()));
    LabelRow row;
    row.id = std::string(cells[id_col]);
    if (row.id.empty()) throw MissingError(where + ": empty id");
    if (cells[speaker_col] == "user") {
      row.speaker = Speaker::user;
    } else if (cells[speaker_col] == "system") {
      row.speaker = Speaker::system;
    } else {
      throw FormatError(where + ": speaker must be 'user' or 'system', got '" + std::string(cells[speaker_col]) + "'");
    }
    for (const auto& [name, col] : field_cols) {
      const auto cell = cells[col];
      if (schema.at(name) == FieldKind::single) {
        if (cell.empty()) throw MissingError(where + ": empty cell in single-label field '" + name + "'");
        row.fields.emplace(name, std::vector<std::string>{std::string(cell)});
      } else {
        row.fields.emplace(name, split_label_set(cell));
      }
    }
    rows.push_back(std::move(row));
  }
  return LabelTable(schema, std::move(rows));
}

inline LabelTable load_labels(const std::filesystem::path& path, const LabelSchema& schema) {
  return parse_labels(detail::read_file(path), schema, path.string());
}

inline void write_labels(std::ostream& out, const LabelTable& table) {
  out << "id\tspeaker";
  for (const auto& [name, kind] : table.schema()) out << '\t' << name;
  out << '\n';
  for (const auto& row : table.rows()) {
    out << row.id << '\t' << to_string(row.speaker);
    for (const auto& [name, kind] : table.schema()) {
      out << '\t';
      const auto& toks = row.fields.at(name);
      for (std::size_t i = 0; i < toks.size(); ++i) out << (i ? "|" : "") << toks[i];
    }
    out << '\n';
  }
}

/// Restricts embeddings and labels to the rows passing `filter`, in
/// embedding-file order. Every embedding id must have a label row.
inline std::pair<EmbeddingMatrix, LabelTable> align(const EmbeddingMatrix& emb, const LabelTable& labels,
                                                    SpeakerFilter filter = SpeakerFilter::all) {
  std::vector<std::string> missing;
  std::vector<std::size_t> keep;
  std::vector<LabelRow> rows;
  for (std::size_t i = 0; i < emb.n_rows(); ++i) {
    const LabelRow* row = labels.find(emb.row_ids()[i]);
    if (!row) {
      missing.push_back(emb.row_ids()[i]);
      continue;
    }
    const bool pass = filter == SpeakerFilter::all || (filter == SpeakerFilter::user && row->speaker == Speaker::user) ||
                      (filter == SpeakerFilter::system && row->speaker == Speaker::system);
    if (pass) {
      keep.push_back(i);
      rows.push_back(*row);
    }
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " embedding id(s) without labels:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " '" + missing[i] + "'";
    if (missing.size() > 20) msg += " ...";
    throw JoinError(msg);
  }
  if (keep.empty())
    throw EmptyError(std::string("no rows left after speaker filter '") + to_string(filter) + "'");
  return {emb.select(keep), LabelTable(labels.schema(), std::move(rows))};
}

// ---------------------------------------------------------------------------
// Partitions
// ---------------------------------------------------------------------------

/// Assignment of N items to C classes, every class non-empty.
struct Partition {
  std::vector<std::size_t> assignments;
  std::vector<std::string> class_names;

  std::size_t n_items() const noexcept { return assignments.size(); }
  std::size_t n_classes() const noexcept { return class_names.size(); }

  std::vector<std::size_t> class_sizes() const {
    std::vector<std::size_t> sizes(n_classes(), 0);
    for (auto a : assignments) ++sizes[a];
    return sizes;
  }

  /// Builds a partition from arbitrary keys; class ids follow first occurrence.
  template <typename Key>
  static Partition from_keys(std::span<const Key> keys) {
    Partition p;
    p.assignments.reserve(keys.size());
    std::map<Key, std::size_t> ids;
    for (const auto& k : keys) {
      auto [it, inserted] = ids.emplace(k, p.class_names.size());
      if (inserted) {
        if constexpr (std::is_convertible_v<Key, std::string>) {
          p.class_names.emplace_back(k);
        } else {
          p.class_names.push_back(std::to_string(k));
        }
      }
      p.assignments.push_back(it->second);
    }
    return p;
  }

  /// Compacts raw labels (any integers) into a valid partition; class names
  /// keep the raw label so the mapping back is recoverable.
  static Partition from_labels(std::span<const std::size_t> labels) { return from_keys(labels); }
};

inline std::string join_label_set(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += '|';
    out += tokens[i];
  }
  return out;
}

/// One class per distinct value of `field`: a token for single-label
/// fields, a token set for multi-label fields (the empty set is a class).
inline Partition label_partition(const LabelTable& labels, std::string_view field) {
  labels.kind(field);
  std::vector<std::string> keys;
  keys.reserve(labels.size());
  for (const auto& row : labels.rows()) keys.push_back(join_label_set(row.fields.find(field)->second));
  return Partition::from_keys<std::string>(keys);
}

/// Reads a two-column assignment TSV (header with `id` and `column`), as
/// used for predicted or reference partitions outside the label schema.
inline std::vector<std::pair<std::string, std::string>> load_assignments(const std::filesystem::path& path,
                                                                         std::string_view column = "label") {
  const auto text = detail::read_file(path);
  const auto all_lines = detail::lines(text);
  if (all_lines.empty()) throw EmptyError(path.string() + ": missing header row");
  const auto header = detail::split(all_lines[0], '\t');
  auto id_it = std::ranges::find(header, std::string_view("id"));
  auto col_it = std::ranges::find(header, column);
  if (id_it == header.end()) throw SchemaError(path.string() + ": missing column 'id'");
  if (col_it == header.end()) throw SchemaError(path.string() + ": missing column '" + std::string(column) + "'");
  const auto id_col = static_cast<std::size_t>(id_it - header.begin());
  const auto val_col = static_cast<std::size_t>(col_it - header.begin());
  std::vector<std::pair<std::string, std::string>> out;
  std::unordered_set<std::string> seen;
  for (std::size_t ln = 1; ln < all_lines.size(); ++ln) {
    const auto cells = detail::split(all_lines[ln], '\t');
    if (cells.size() != header.size())
      throw FormatError(path.string() + ":" + std::to_string(ln + 1) + ": column count mismatch");
    std::string id(cells[id_col]);
    if (!seen.insert(id).second) throw DuplicateIdError(path.string() + ": duplicate id '" + id + "'");
    out.emplace_back(std::move(id), std::string(cells[val_col]));
  }
  if (out.empty()) throw EmptyError(path.string() + ": no rows");
  return out;
}

/// id -> text map from a TSV with `id` and `text` columns.
inline std::unordered_map<std::string, std::string> load_texts(const std::filesystem::path& path) {
  std::unordered_map<std::string, std::string> out;
  for (auto& [id, text] : load_assignments(path, "text")) out.emplace(std::move(id), std::move(text));
  return out;
}

}  // namespace repprobe
