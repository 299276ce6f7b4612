#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ldet/detector.hpp"
#include "ldet/matrix.hpp"

namespace ldet {

// CRC32, IEEE 802.3 reflected polynomial 0xEDB88320.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len,
                           std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = ~seed;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return ~crc;
}

inline std::uint32_t crc32(const std::vector<std::uint8_t>& data) {
  return crc32(data.data(), data.size());
}

enum class TensorRole : std::uint8_t {
  kBase = 0,
  kLoraA = 1,
  kLoraB = 2,
  kFullReplace = 3,
};

struct TensorEntry {
  std::string name;
  TensorRole role;
  std::vector<std::uint32_t> dims;
  std::vector<float> payload;  // length = product(dims)

  std::size_t element_count() const {
    std::size_t n = 1;
    for (std::uint32_t d : dims) n *= d;
    return n;
  }
};

struct TensorArchive {
  std::vector<TensorEntry> entries;

  const TensorEntry* find(const std::string& name, TensorRole role) const {
    for (const auto& e : entries)
      if (e.name == name && e.role == role) return &e;
    return nullptr;
  }
  TensorEntry* find(const std::string& name, TensorRole role) {
    for (auto& e : entries)
      if (e.name == name && e.role == role) return &e;
    return nullptr;
  }
};

// ---- wire format -----------------------------------------------------------
// magic "LDET" | version u16 LE (=1) | entry count u32 LE |
// entries { name_len u16 | name | role u8 | dtype u8 (0 = f32 LE) | ndim u8 |
//           dims u32 LE each | payload | entry CRC32 u32 LE } |
// whole-file CRC32 u32 LE over all preceding bytes.

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::uint8_t* p;
  std::size_t n;
  std::size_t pos = 0;

  bool need(std::size_t k) const { return pos + k <= n; }
  std::uint8_t u8() { return p[pos++]; }
  std::uint16_t u16() {
    const std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> write_archive(const TensorArchive& archive) {
  {
    std::map<std::string, int> seen;
    for (const auto& e : archive.entries)
      if (++seen[e.name + "#" + std::to_string(static_cast<int>(e.role))] > 1)
        throw StateError("write_archive: duplicate entry " + e.name);
  }
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'L', 'D', 'E', 'T'});
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(archive.entries.size()));
  for (const auto& e : archive.entries) {
    if (e.payload.size() != e.element_count())
      throw ShapeError("write_archive: payload length mismatch for " + e.name);
    const std::size_t start = out.size();
    detail::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.role));
    out.push_back(0);  // dtype f32 LE
    out.push_back(static_cast<std::uint8_t>(e.dims.size()));
    for (std::uint32_t d : e.dims) detail::put_u32(out, d);
    for (float v : e.payload) detail::put_f32(out, v);
    detail::put_u32(out, crc32(out.data() + start, out.size() - start));
  }
  detail::put_u32(out, crc32(out.data(), out.size()));
  return out;
}

struct VerifyReport {
  bool ok = true;
  std::string failure;  // first failing entry name or structural description

  explicit operator bool() const { return ok; }
};

namespace detail {

// Shared walk used by both verify and read. Returns a report; fills `out`
// when provided and the file is intact.
inline VerifyReport walk_archive(const std::uint8_t* data, std::size_t len,
                                 TensorArchive* out) {
  VerifyReport rep;
  auto fail = [&](const std::string& why) {
    rep.ok = false;
    rep.failure = why;
    return rep;
  };
  Reader r{data, len};
  if (!r.need(10)) return fail("file too short for header");
  if (std::memcmp(data, "LDET", 4) != 0) return fail("bad magic");
  r.pos = 4;
  if (r.u16() != 1) return fail("unsupported version");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos;
    if (!r.need(2)) return fail("truncated entry header");
    const std::uint16_t name_len = r.u16();
    if (!r.need(name_len + std::size_t{3})) return fail("truncated entry header");
    std::string name(reinterpret_cast<const char*>(data + r.pos), name_len);
    r.pos += name_len;
    const std::uint8_t role = r.u8();
    const std::uint8_t dtype = r.u8();
    const std::uint8_t ndim = r.u8();
    if (role > 3) return fail("entry '" + name + "': bad role");
    if (dtype != 0) return fail("entry '" + name + "': unsupported dtype");
    if (!r.need(4u * ndim)) return fail("entry '" + name + "': truncated dims");
    std::vector<std::uint32_t> dims(ndim);
    std::size_t elems = 1;
    for (auto& d : dims) {
      d = r.u32();
      elems *= d;
    }
    if (!r.need(4 * elems + 4)) return fail("entry '" + name + "': truncated payload");
    const std::size_t payload_pos = r.pos;
    r.pos += 4 * elems;
    const std::uint32_t want = crc32(data + start, r.pos - start);
    const std::uint32_t got = r.u32();
    if (want != got) return fail("entry '" + name + "': CRC mismatch");
    if (out) {
      TensorEntry e;
      e.name = std::move(name);
      e.role = static_cast<TensorRole>(role);
      e.dims = std::move(dims);
      e.payload.resize(elems);
      for (std::size_t j = 0; j < elems; ++j) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
          bits |= static_cast<std::uint32_t>(data[payload_pos + 4 * j + b]) << (8 * b);
        float v;
        std::memcpy(&v, &bits, 4);
        e.payload[j] = v;
      }
      out->entries.push_back(std::move(e));
    }
  }
  if (!r.need(4)) return fail("missing file CRC");
  const std::uint32_t want = crc32(data, r.pos);
  if (want != r.u32()) return fail("whole-file CRC mismatch");
  if (r.pos != len) return fail("trailing bytes after file CRC");
  return rep;
}

}  // namespace detail

inline VerifyReport verify_archive(const std::vector<std::uint8_t>& bytes) {
  return detail::walk_archive(bytes.data(), bytes.size(), nullptr);
}

inline TensorArchive read_archive(const std::vector<std::uint8_t>& bytes) {
  TensorArchive a;
  const VerifyReport rep = detail::walk_archive(bytes.data(), bytes.size(), &a);
  if (!rep.ok) throw IntegrityError("read_archive: " + rep.failure);
  return a;
}

inline void save_archive_file(const TensorArchive& archive, const std::string& path) {
  const auto bytes = write_archive(archive);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_archive_file: cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("save_archive_file: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("save_archive_file: rename to " + path + ": " + ec.message());
}

inline TensorArchive load_archive_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_archive_file: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return read_archive(bytes);
}

// ---- tensors <-> matrices --------------------------------------------------

inline TensorEntry matrix_to_entry(const std::string& name, TensorRole role,
                                   const Matrix& m) {
  TensorEntry e;
  e.name = name;
  e.role = role;
  e.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  e.payload.reserve(m.size());
  for (double v : m.vec()) e.payload.push_back(static_cast<float>(v));
  return e;
}

inline Matrix entry_to_matrix(const TensorEntry& e) {
  if (e.dims.size() != 2)
    throw ShapeError("entry_to_matrix: entry '" + e.name + "' is not 2-D");
  Matrix m(e.dims[0], e.dims[1]);
  for (std::size_t i = 0; i < e.payload.size(); ++i)
    m.vec()[i] = static_cast<double>(e.payload[i]);
  return m;
}

// ---- model checkpoints -----------------------------------------------------

// Full checkpoint: every named tensor (adapters included) with role `base`.
inline TensorArchive model_to_archive(DetectorModel& model) {
  TensorArchive a;
  for_each_param(model, [&](const std::string& name, Matrix* m, ParamKind) {
    a.entries.push_back(matrix_to_entry(name, TensorRole::kBase, *m));
  });
  return a;
}

inline void archive_to_model(DetectorModel& model, const TensorArchive& archive) {
  for_each_param(model, [&](const std::string& name, Matrix* m, ParamKind) {
    const TensorEntry* e = archive.find(name, TensorRole::kBase);
    if (!e) throw StateError("archive_to_model: missing tensor " + name);
    if (e->dims.size() != 2 || e->dims[0] != m->rows() || e->dims[1] != m->cols())
      throw ShapeError("archive_to_model: dim mismatch for " + name);
    for (std::size_t i = 0; i < m->size(); ++i)
      m->vec()[i] = static_cast<double>(e->payload[i]);
  });
}

// ---- delta packages --------------------------------------------------------

namespace detail {

inline std::string lora_base_name(const std::string& tensor) {
  // "...X.lora_A" -> "...X.weight"
  const std::size_t dot = tensor.rfind('.');
  return tensor.substr(0, dot) + ".weight";
}

}  // namespace detail

// Exactly the policy's trainable tensors: LoRA pairs under their base weight
// name with roles lora_A / lora_B, everything else as full_replace.
inline TensorArchive build_package(DetectorModel& model, const FinetunePolicy& policy) {
  bool wants_lora = false;
  for_each_param(model, [&](const std::string& name, Matrix*, ParamKind kind) {
    if ((kind == ParamKind::kLoraA || kind == ParamKind::kLoraB) &&
        policy.trainable(name, kind))
      wants_lora = true;
  });
  if (wants_lora) {
    for_each_lora(model, [&](const std::string& name, LoraLinear& l) {
      if (l.merged())
        throw StateError("build_package: " + name +
                         " is merged; cannot package adapter deltas");
    });
  }
  TensorArchive pkg;
  for_each_param(model, [&](const std::string& name, Matrix* m, ParamKind kind) {
    if (!policy.trainable(name, kind)) return;
    if (kind == ParamKind::kLoraA || kind == ParamKind::kLoraB) {
      // FullFinetune-style policies that also train the dense base ship the
      // adapters as plain replacements instead of additive pairs.
      const std::string base = detail::lora_base_name(name);
      const bool base_trainable = policy.trainable(base, ParamKind::kDense);
      if (base_trainable) {
        pkg.entries.push_back(matrix_to_entry(name, TensorRole::kFullReplace, *m));
      } else {
        pkg.entries.push_back(matrix_to_entry(
            base, kind == ParamKind::kLoraA ? TensorRole::kLoraA : TensorRole::kLoraB,
            *m));
      }
    } else {
      pkg.entries.push_back(matrix_to_entry(name, TensorRole::kFullReplace, *m));
    }
  });
  return pkg;
}

// W <- W + B A in 64-bit accumulation before requantizing to 32-bit storage;
// full_replace overwrites. Returns the merged archive.
inline TensorArchive apply_package(const TensorArchive& base, const TensorArchive& pkg) {
  TensorArchive merged = base;
  // lora pairs first, grouped by base tensor name
  for (const auto& e : pkg.entries) {
    if (e.role != TensorRole::kLoraB) continue;
    const TensorEntry* a_entry = pkg.find(e.name, TensorRole::kLoraA);
    if (!a_entry)
      throw StateError("apply_package: lora_B without lora_A for " + e.name);
    TensorEntry* target = merged.find(e.name, TensorRole::kBase);
    if (!target)
      throw StateError("apply_package: missing base tensor " + e.name);
    const Matrix b = entry_to_matrix(e);
    const Matrix a = entry_to_matrix(*a_entry);
    if (b.cols() != a.rows())
      throw ShapeError("apply_package: rank mismatch in lora pair " + e.name);
    if (target->dims.size() != 2 || target->dims[0] != b.rows() ||
        target->dims[1] != a.cols())
      throw ShapeError("apply_package: delta shape mismatch for " + e.name);
    const Matrix delta = matmul(b, a);
    for (std::size_t i = 0; i < target->payload.size(); ++i)
      target->payload[i] =
          static_cast<float>(static_cast<double>(target->payload[i]) + delta.vec()[i]);
  }
  for (const auto& e : pkg.entries) {
    if (e.role == TensorRole::kLoraA) {
      if (!pkg.find(e.name, TensorRole::kLoraB))
        throw StateError("apply_package: lora_A without lora_B for " + e.name);
      continue;
    }
    if (e.role != TensorRole::kFullReplace) continue;
    TensorEntry* target = merged.find(e.name, TensorRole::kBase);
    if (!target) throw StateError("apply_package: missing base tensor " + e.name);
    if (target->dims != e.dims)
      throw ShapeError("apply_package: dim mismatch for " + e.name);
    target->payload = e.payload;
  }
  return merged;
}

// ---- uplink accounting -----------------------------------------------------

struct UplinkBudget {
  double rate_bps;
  double protocol_overhead = 1.0;  // multiplicative, >= 1

  void validate() const {
    if (!(rate_bps > 0.0)) throw ArgumentError("UplinkBudget: rate must be positive");
    if (!(protocol_overhead >= 1.0))
      throw ArgumentError("UplinkBudget: overhead factor must be >= 1");
  }
};

inline double uplink_time_seconds(std::uint64_t bytes, const UplinkBudget& budget) {
  budget.validate();
  return static_cast<double>(bytes) * 8.0 * budget.protocol_overhead / budget.rate_bps;
}

inline std::uint64_t archive_byte_size(const TensorArchive& archive) {
  return write_archive(archive).size();
}

inline std::uint64_t payload_byte_size(const TensorArchive& archive) {
  std::uint64_t n = 0;
  for (const auto& e : archive.entries) n += 4 * e.element_count();
  return n;
}

// ---- dataset caching (images + box tables) --------------------------------

inline TensorArchive dataset_to_archive(const std::vector<SceneSample>& samples) {
  TensorArchive a;
  char idx[16];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(idx, sizeof(idx), "%05zu", i);
    a.entries.push_back(
        matrix_to_entry(std::string("image_") + idx, TensorRole::kBase, samples[i].image));
    Matrix boxes(std::max<std::size_t>(samples[i].boxes.size(), 1), 6);
    for (std::size_t b = 0; b < samples[i].boxes.size(); ++b) {
      const OrientedBox& ob = samples[i].boxes[b];
      boxes(b, 0) = ob.cx;
      boxes(b, 1) = ob.cy;
      boxes(b, 2) = ob.w;
      boxes(b, 3) = ob.h;
      boxes(b, 4) = ob.theta;
      boxes(b, 5) = static_cast<double>(samples[i].labels[b]);
    }
    if (samples[i].boxes.empty()) boxes(0, 2) = boxes(0, 3) = -1.0;  // sentinel
    a.entries.push_back(
        matrix_to_entry(std::string("boxes_") + idx, TensorRole::kBase, boxes));
  }
  return a;
}

inline std::vector<SceneSample> archive_to_dataset(const TensorArchive& a) {
  std::vector<SceneSample> out;
  char idx[16];
  for (std::size_t i = 0;; ++i) {
    std::snprintf(idx, sizeof(idx), "%05zu", i);
    const TensorEntry* img = a.find(std::string("image_") + idx, TensorRole::kBase);
    const TensorEntry* box = a.find(std::string("boxes_") + idx, TensorRole::kBase);
    if (!img || !box) break;
    SceneSample s;
    s.image = entry_to_matrix(*img);
    const Matrix boxes = entry_to_matrix(*box);
    for (std::size_t b = 0; b < boxes.rows(); ++b) {
      if (boxes(b, 2) <= 0.0 || boxes(b, 3) <= 0.0) continue;  // sentinel row
      s.boxes.push_back(OrientedBox::make(boxes(b, 0), boxes(b, 1), boxes(b, 2),
                                          boxes(b, 3), boxes(b, 4)));
      s.labels.push_back(static_cast<int>(boxes(b, 5)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ldet
