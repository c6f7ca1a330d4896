#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "labelseq/rng.hpp"
#include "labelseq/tasks.hpp"

namespace labelseq {

enum class Split { kTrain, kGeneralization };
std::string_view split_name(Split s);

struct SequenceRecord {
  std::int64_t id = 0;
  std::vector<LabeledItem> items;
  Split split = Split::kTrain;
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t n_sequences = 100000;
  int min_len = 5;
  int max_len = 50;
  int label_range = 50;
  // Lengths <= train_max_len form the training split.
  int train_max_len = 25;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<SequenceRecord> records;

  std::vector<const SequenceRecord*> split(Split s) const;
  std::size_t count(Split s) const;
};

// Number of sequences per length, uniform with the remainder given to the
// shortest lengths. Index 0 corresponds to spec.min_len.
std::vector<std::size_t> length_counts(const DatasetSpec& spec);

Dataset generate_dataset(const DatasetSpec& spec);

// k distinct labels drawn uniformly from [0, label_range), ascending.
std::vector<int> sample_labels(Rng& rng, int k, int label_range);
std::vector<LabeledItem> sample_sequence(Rng& rng, int length, int label_range);

std::uint64_t content_hash(std::span<const LabeledItem> items);
std::unordered_set<std::uint64_t> content_index(const Dataset& data);

struct SampleSpec {
  int min_len = 5;
  int max_len = 25;
  int label_range = 50;
};

// Fresh sequences with lengths uniform over [min_len, max_len], drawn from an
// RNG stream separate from dataset generation, skipping any sequence whose
// content hash is in `exclude` (and duplicates within the sample).
std::vector<SequenceRecord> sample_eval_sequences(
    const SampleSpec& spec, std::size_t n, std::uint64_t seed,
    const std::unordered_set<std::uint64_t>* exclude = nullptr);

// JSON-lines serialisation; one record per line.
std::string dataset_jsonl(const Dataset& data);
// Manifest sits next to the data file: d.jsonl -> d.manifest.json.
std::filesystem::path manifest_path_for(const std::filesystem::path& jsonl);
// Writes both files; returns the sha256 of the data file.
std::string write_dataset(const Dataset& data,
                          const std::filesystem::path& jsonl);
// Reads records, and the spec from the manifest when one exists.
Dataset read_dataset(const std::filesystem::path& jsonl);
std::string sha256_hex(std::string_view bytes);

}  // namespace labelseq
