// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "drclf/binary_io.hpp"
#include "drclf/error.hpp"
#include "drclf/seed.hpp"

namespace drclf {

/// One slice embedding. Label 0 = non-COVID, 1 = COVID.
struct SampleRecord {
  std::uint64_t scan_id = 0;
  std::optional<std::uint8_t> label;
  std::vector<float> feature;

  bool operator==(const SampleRecord&) const = default;
};

/// An in-memory embedding bank. A bank is either fully labeled or fully
/// unlabeled; an empty bank satisfies both.
struct FeatureBank {
  std::uint32_t feature_dim = 0;
  std::vector<SampleRecord> records;
  bool labeled = false;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  /// Distinct scan ids in ascending order.
  std::vector<std::uint64_t> scan_ids() const {
    std::set<std::uint64_t> ids;
    for (const auto& r : records) ids.insert(r.scan_id);
    return {ids.begin(), ids.end()};
  }

  void validate() const {
    require(feature_dim > 0, ErrorKind::InvalidArgument, "feature_dim must be positive");
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      require(r.feature.size() == feature_dim, ErrorKind::DimensionMismatch,
              "record " + std::to_string(i) + " has " + std::to_string(r.feature.size()) +
                  " features, bank dim is " + std::to_string(feature_dim));
      require(r.label.has_value() == labeled, ErrorKind::MixedLabels,
              "record " + std::to_string(i) + (labeled ? " lacks a label in a labeled bank"
                                                       : " carries a label in an unlabeled bank"));
      if (r.label) {
        require(*r.label <= 1, ErrorKind::InvalidArgument,
                "record " + std::to_string(i) + " label " + std::to_string(*r.label) + " is not binary");
      }
      for (float v : r.feature) {
        require(std::isfinite(v), ErrorKind::NonFiniteFeature,
                "record " + std::to_string(i) + " has a non-finite feature");
      }
    }
  }

  bool operator==(const FeatureBank&) const = default;
};

struct ManifestEntry {
  std::string name;
  std::optional<std::uint8_t> label;

  bool operator==(const ManifestEntry&) const = default;
};

/// scan_id -> source scan name and scan-level label.
struct ScanManifest {
  std::map<std::uint64_t, ManifestEntry> entries;

  bool operator==(const ScanManifest&) const = default;
};

struct SynthConfig {
  std::uint32_t num_scans_per_class = 10;
  std::uint32_t slices_min = 5;
  std::uint32_t slices_max = 5;
  std::uint32_t feature_dim = 16;
  double class_separation = 4.0;
  double noise_sigma = 1.0;
  double label_noise_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_scans_per_class > 0, ErrorKind::InvalidArgument, "num_scans_per_class must be positive");
    require(slices_min >= 1 && slices_max >= slices_min, ErrorKind::InvalidArgument,
            "slices range must satisfy 1 <= min <= max");
    require(feature_dim > 0, ErrorKind::InvalidArgument, "feature_dim must be positive");
    require(std::isfinite(class_separation) && class_separation >= 0, ErrorKind::InvalidArgument,
            "class_separation must be finite and nonnegative");
    require(std::isfinite(noise_sigma) && noise_sigma > 0, ErrorKind::InvalidArgument,
            "noise_sigma must be finite and positive");
    require(label_noise_rate >= 0 && label_noise_rate < 1, ErrorKind::InvalidArgument,
            "label_noise_rate must lie in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// .fbank encoding
//
//   0..3   "FBNK"
//   4..7   version u32 (1)
//   8..11  feature_dim u32
//   12..19 num_records u64
//   20     has_labels u8
//   then scan ids (u64 each), labels (u8 each, only if has_labels),
//   then features (f32, record-major). All little-endian.

inline constexpr char kBankMagic[4] = {'F', 'B', 'N', 'K'};
inline constexpr std::uint32_t kBankVersion = 1;
inline constexpr std::size_t kBankHeaderBytes = 21;

inline std::vector<unsigned char> encode_bank(const FeatureBank& bank) {
  bank.validate();
  detail::ByteWriter w;
  w.bytes(kBankMagic, 4);
  w.u32(kBankVersion);
  w.u32(bank.feature_dim);
  w.u64(bank.records.size());
  w.u8(bank.labeled ? 1 : 0);
  for (const auto& r : bank.records) w.u64(r.scan_id);
  if (bank.labeled) {
    for (const auto& r : bank.records) w.u8(*r.label);
  }
  for (const auto& r : bank.records) {
    for (float v : r.feature) w.f32(v);
  }
  return w.take();
}

inline FeatureBank decode_bank(std::span<const unsigned char> data) {
  detail::ByteReader in(data);
  auto magic = in.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kBankMagic)) {
    fail(ErrorKind::BadMagic, "expected \"FBNK\" at offset 0");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kBankVersion) {
    fail(ErrorKind::UnsupportedVersion,
         "version " + std::to_string(version) + " at offset 4, only 1 is supported");
  }
  FeatureBank bank;
  bank.feature_dim = in.u32("feature_dim");
  require(bank.feature_dim > 0, ErrorKind::InvalidArgument, "feature_dim is zero at offset 8");
  const std::uint64_t n = in.u64("num_records");
  const std::size_t flag_offset = in.offset();
  const std::uint8_t has_labels = in.u8("has_labels");
  if (has_labels > 1) {
    fail(ErrorKind::InvalidArgument, "has_labels byte " + std::to_string(has_labels) + " at offset " +
                                         std::to_string(flag_offset));
  }
  bank.labeled = has_labels == 1;

  // Size check up front so a huge declared count fails fast instead of allocating.
  const std::uint64_t per_record = 8 + (bank.labeled ? 1 : 0) + 4ULL * bank.feature_dim;
  if (n > 0 && in.remaining() / per_record < n) {
    fail(ErrorKind::Truncated, "header declares " + std::to_string(n) + " records but payload after offset " +
                                   std::to_string(in.offset()) + " holds only " +
                                   std::to_string(in.remaining()) + " bytes (" +
                                   std::to_string(n * per_record) + " needed)");
  }

  bank.records.resize(n);
  for (auto& r : bank.records) r.scan_id = in.u64("scan_id");
  if (bank.labeled) {
    for (auto& r : bank.records) {
      const std::size_t at = in.offset();
      const std::uint8_t label = in.u8("label");
      if (label > 1) {
        fail(ErrorKind::InvalidArgument,
             "label byte " + std::to_string(label) + " at offset " + std::to_string(at) + " is not binary");
      }
      r.label = label;
    }
  }
  for (auto& r : bank.records) {
    r.feature.resize(bank.feature_dim);
    for (auto& v : r.feature) {
      const std::size_t at = in.offset();
      v = in.f32("feature");
      if (!std::isfinite(v)) {
        fail(ErrorKind::NonFiniteFeature, "non-finite feature at offset " + std::to_string(at));
      }
    }
  }
  if (in.remaining() != 0) {
    fail(ErrorKind::InvalidArgument,
         std::to_string(in.remaining()) + " trailing bytes at offset " + std::to_string(in.offset()));
  }
  return bank;
}

inline void write_bank(const FeatureBank& bank, const std::filesystem::path& path) {
  detail::write_file(path, encode_bank(bank));
}

inline FeatureBank read_bank(const std::filesystem::path& path) {
  return decode_bank(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Manifest CSV: header `scan_id,name,label`, label empty when unknown.

namespace detail {

inline std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

}  // namespace detail

inline void write_manifest(const ScanManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "scan_id,name,label\n";
  for (const auto& [id, entry] : manifest.entries) {
    out << id << ',' << detail::csv_quote(entry.name) << ',';
    if (entry.label) out << int(*entry.label);
    out << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

inline ScanManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::InvalidArgument, path.string() + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  require(line == "scan_id,name,label", ErrorKind::InvalidArgument,
          path.string() + ": header must be scan_id,name,label");
  ScanManifest manifest;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::csv_split(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    require(fields.size() == 3, ErrorKind::InvalidArgument, where + ": expected 3 fields");
    ManifestEntry entry{fields[1], std::nullopt};
    std::uint64_t id = 0;
    try {
      std::size_t used = 0;
      id = std::stoull(fields[0], &used);
      require(used == fields[0].size(), ErrorKind::InvalidArgument, where + ": bad scan_id");
    } catch (const std::logic_error&) {
      fail(ErrorKind::InvalidArgument, where + ": bad scan_id '" + fields[0] + "'");
    }
    if (fields[2] == "0" || fields[2] == "1") {
      entry.label = static_cast<std::uint8_t>(fields[2][0] - '0');
    } else {
      require(fields[2].empty(), ErrorKind::InvalidArgument, where + ": label must be 0, 1 or empty");
    }
    require(manifest.entries.emplace(id, std::move(entry)).second, ErrorKind::InvalidArgument,
            where + ": duplicate scan_id " + std::to_string(id));
  }
  return manifest;
}

/// Checks that every scan in `bank` is listed and, for labeled banks, that the
/// manifest label agrees with each slice label.
inline void check_manifest(const FeatureBank& bank, const ScanManifest& manifest) {
  for (const auto& r : bank.records) {
    auto it = manifest.entries.find(r.scan_id);
    require(it != manifest.entries.end(), ErrorKind::MissingManifestEntry,
            "scan_id " + std::to_string(r.scan_id) + " is not in the manifest");
    if (bank.labeled) {
      require(it->second.label == r.label, ErrorKind::InvalidArgument,
              "scan_id " + std::to_string(r.scan_id) + " label disagrees with the manifest");
    }
  }
}

// ---------------------------------------------------------------------------

/// Two isotropic Gaussian clusters whose means sit at +-separation/2 along a
/// seeded random unit direction. Scan i has true class i % 2; a fixed
/// fraction of scans then has its label flipped.
inline std::pair<FeatureBank, ScanManifest> synth_bank(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> direction(config.feature_dim);
  double norm = 0;
  do {
    norm = 0;
    for (auto& v : direction) {
      v = normal(rng);
      norm += v * v;
    }
  } while (norm == 0);
  norm = std::sqrt(norm);
  for (auto& v : direction) v /= norm;

  const std::uint32_t num_scans = 2 * config.num_scans_per_class;
  std::vector<std::uint8_t> truth(num_scans), label(num_scans);
  for (std::uint32_t i = 0; i < num_scans; ++i) truth[i] = label[i] = static_cast<std::uint8_t>(i % 2);

  const auto flips = static_cast<std::uint32_t>(std::llround(config.label_noise_rate * num_scans));
  if (flips > 0) {
    std::vector<std::uint32_t> order(num_scans);
    for (std::uint32_t i = 0; i < num_scans; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::uint32_t k = 0; k < flips; ++k) label[order[k]] ^= 1;
  }

  std::uniform_int_distribution<std::uint32_t> slice_count(config.slices_min, config.slices_max);
  FeatureBank bank;
  bank.feature_dim = config.feature_dim;
  bank.labeled = true;
  ScanManifest manifest;
  for (std::uint32_t scan = 0; scan < num_scans; ++scan) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05u", scan);
    manifest.entries[scan] = ManifestEntry{name, label[scan]};
    const double offset = (truth[scan] == 1 ? 0.5 : -0.5) * config.class_separation;
    const std::uint32_t slices = slice_count(rng);
    for (std::uint32_t s = 0; s < slices; ++s) {
      SampleRecord r;
      r.scan_id = scan;
      r.label = label[scan];
      r.feature.resize(config.feature_dim);
      for (std::uint32_t j = 0; j < config.feature_dim; ++j) {
        r.feature[j] = static_cast<float>(offset * direction[j] + config.noise_sigma * normal(rng));
      }
      bank.records.push_back(std::move(r));
    }
  }
  return {std::move(bank), std::move(manifest)};
}

/// Scan-grouped split: all slices of a scan land on the same side. The first
/// part receives round(fraction * #scans) scans chosen by a seeded shuffle.
inline std::pair<FeatureBank, FeatureBank> split_bank(const FeatureBank& bank, double fraction,
                                                      std::uint64_t seed) {
  require(!bank.empty(), ErrorKind::InvalidArgument, "cannot split an empty bank");
  require(fraction > 0 && fraction < 1, ErrorKind::InvalidArgument, "split fraction must lie in (0,1)");
  auto ids = bank.scan_ids();
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto first_count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  if (first_count == 0 || first_count == ids.size()) {
    fail(ErrorKind::EmptySplit, "fraction " + std::to_string(fraction) + " of " + std::to_string(ids.size()) +
                                    " scans leaves one side empty");
  }
  const std::set<std::uint64_t> first_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(first_count));

  FeatureBank a{bank.feature_dim, {}, bank.labeled};
  FeatureBank b{bank.feature_dim, {}, bank.labeled};
  for (const auto& r : bank.records) (first_ids.count(r.scan_id) ? a : b).records.push_back(r);
  return {std::move(a), std::move(b)};
}

/// Concatenates two labeled banks (pseudo-labels count as labels). Empty
/// banks are accepted regardless of their flag.
inline FeatureBank merge_banks(const FeatureBank& a, const FeatureBank& b) {
  require(a.feature_dim == b.feature_dim, ErrorKind::DimensionMismatch,
          "cannot merge dim " + std::to_string(a.feature_dim) + " with dim " + std::to_string(b.feature_dim));
  require(a.empty() || a.labeled, ErrorKind::UnlabeledInput, "first bank is unlabeled");
  require(b.empty() || b.labeled, ErrorKind::UnlabeledInput, "second bank is unlabeled");
  FeatureBank out{a.feature_dim, {}, true};
  out.records.reserve(a.size() + b.size());
  out.records.insert(out.records.end(), a.records.begin(), a.records.end());
  out.records.insert(out.records.end(), b.records.begin(), b.records.end());
  return out;
}

/// Copy of a labeled bank with labels stripped, e.g. to feed pseudo-labeling.
inline FeatureBank strip_labels(FeatureBank bank) {
  bank.labeled = false;
  for (auto& r : bank.records) r.label.reset();
  return bank;
}

}  // namespace drclf
