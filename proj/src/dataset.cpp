#include "labelseq/dataset.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace labelseq {

using ojson = nlohmann::ordered_json;

std::string_view split_name(Split s) {
  return s == Split::kTrain ? "train" : "generalization";
}

std::vector<const SequenceRecord*> Dataset::split(Split s) const {
  std::vector<const SequenceRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

std::size_t Dataset::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(),
      [s](const SequenceRecord& r) { return r.split == s; }));
}

namespace {

void validate(const DatasetSpec& spec) {
  if (spec.min_len < 1 || spec.max_len < spec.min_len) {
    throw ConfigError("dataset: invalid length range [" +
                      std::to_string(spec.min_len) + "," +
                      std::to_string(spec.max_len) + "]");
  }
  if (spec.label_range < spec.max_len) {
    throw ConfigError("dataset: label range " + std::to_string(spec.label_range) +
                      " is smaller than the maximum length " +
                      std::to_string(spec.max_len));
  }
}

}  // namespace

std::vector<std::size_t> length_counts(const DatasetSpec& spec) {
  validate(spec);
  const auto n_lengths = static_cast<std::size_t>(spec.max_len - spec.min_len + 1);
  std::vector<std::size_t> counts(n_lengths, spec.n_sequences / n_lengths);
  const std::size_t rem = spec.n_sequences % n_lengths;
  for (std::size_t i = 0; i < rem; ++i) ++counts[i];
  return counts;
}

std::vector<int> sample_labels(Rng& rng, int k, int label_range) {
  if (k > label_range) {
    throw ConfigError("cannot draw " + std::to_string(k) +
                      " distinct labels from " + std::to_string(label_range));
  }
  std::vector<int> pool(static_cast<std::size_t>(label_range));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.below(
                           static_cast<std::uint64_t>(label_range - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<LabeledItem> sample_sequence(Rng& rng, int length,
                                         int label_range) {
  const auto labels = sample_labels(rng, length, label_range);
  std::vector<LabeledItem> items;
  items.reserve(labels.size());
  for (int label : labels) {
    const auto idx = static_cast<int>(rng.below(kPoolSize));
    items.push_back({Item{idx / 25, (idx / 5) % 5, idx % 5}, label});
  }
  return items;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  const auto counts = length_counts(spec);
  std::vector<int> lengths;
  lengths.reserve(spec.n_sequences);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    lengths.insert(lengths.end(), counts[i], spec.min_len + static_cast<int>(i));
  }
  Rng rng(spec.seed, /*stream=*/1);
  for (std::size_t i = lengths.size(); i > 1; --i) {
    std::swap(lengths[i - 1], lengths[rng.below(i)]);
  }
  Dataset data;
  data.spec = spec;
  data.records.reserve(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    SequenceRecord r;
    r.id = static_cast<std::int64_t>(i);
    r.items = sample_sequence(rng, lengths[i], spec.label_range);
    r.split = lengths[i] <= spec.train_max_len ? Split::kTrain
                                               : Split::kGeneralization;
    data.records.push_back(std::move(r));
  }
  return data;
}

std::uint64_t content_hash(std::span<const LabeledItem> items) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  mix(items.size());
  for (const auto& li : items) {
    mix(static_cast<std::uint64_t>(li.item.pool_index()));
    mix(static_cast<std::uint64_t>(li.label) + 1000);
  }
  return h;
}

std::unordered_set<std::uint64_t> content_index(const Dataset& data) {
  std::unordered_set<std::uint64_t> idx;
  idx.reserve(data.records.size());
  for (const auto& r : data.records) idx.insert(content_hash(r.items));
  return idx;
}

std::vector<SequenceRecord> sample_eval_sequences(
    const SampleSpec& spec, std::size_t n, std::uint64_t seed,
    const std::unordered_set<std::uint64_t>* exclude) {
  if (spec.min_len < 1 || spec.max_len < spec.min_len ||
      spec.label_range < spec.max_len) {
    throw ConfigError("sample_eval_sequences: invalid sample spec");
  }
  Rng rng(seed, /*stream=*/2);
  const auto span = static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1);
  std::unordered_set<std::uint64_t> seen;
  std::vector<SequenceRecord> out;
  out.reserve(n);
  while (out.size() < n) {
    const int len = spec.min_len + static_cast<int>(rng.below(span));
    auto items = sample_sequence(rng, len, spec.label_range);
    const auto h = content_hash(items);
    if ((exclude && exclude->contains(h)) || !seen.insert(h).second) continue;
    SequenceRecord r;
    r.id = static_cast<std::int64_t>(out.size());
    r.items = std::move(items);
    r.split = Split::kGeneralization;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation

std::string dataset_jsonl(const Dataset& data) {
  std::string out;
  for (const auto& r : data.records) {
    ojson j;
    j["id"] = r.id;
    j["split"] = split_name(r.split);
    ojson items = ojson::array();
    for (const auto& li : r.items) {
      items.push_back({{"s", li.item.shape},
                       {"c", li.item.color},
                       {"t", li.item.texture},
                       {"label", li.label}});
    }
    j["items"] = std::move(items);
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(),
                 nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0')
       << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::filesystem::path manifest_path_for(const std::filesystem::path& jsonl) {
  auto p = jsonl;
  p.replace_extension(".manifest.json");
  return p;
}

std::string write_dataset(const Dataset& data,
                          const std::filesystem::path& jsonl) {
  const std::string body = dataset_jsonl(data);
  const std::string digest = sha256_hex(body);
  {
    std::ofstream f(jsonl, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + jsonl.string());
    f << body;
    if (!f) throw std::runtime_error("write failed: " + jsonl.string());
  }
  ojson m;
  m["seed"] = data.spec.seed;
  m["n"] = data.spec.n_sequences;
  m["len_range"] = {data.spec.min_len, data.spec.max_len};
  m["label_range"] = data.spec.label_range;
  m["train_max_len"] = data.spec.train_max_len;
  m["train_count"] = data.count(Split::kTrain);
  m["generalization_count"] = data.count(Split::kGeneralization);
  m["sha256"] = digest;
  std::ofstream f(manifest_path_for(jsonl), std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest for " + jsonl.string());
  f << m.dump(2) << '\n';
  return digest;
}

Dataset read_dataset(const std::filesystem::path& jsonl) {
  std::ifstream f(jsonl, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + jsonl.string());
  Dataset data;
  std::string line;
  int max_len = 0, min_len = 1 << 30, max_label = 0, max_train = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = ojson::parse(line);
    SequenceRecord r;
    r.id = j.at("id").get<std::int64_t>();
    const auto split = j.at("split").get<std::string>();
    r.split = split == "train" ? Split::kTrain : Split::kGeneralization;
    for (const auto& it : j.at("items")) {
      r.items.push_back({Item{it.at("s").get<int>(), it.at("c").get<int>(),
                              it.at("t").get<int>()},
                         it.at("label").get<int>()});
      max_label = std::max(max_label, r.items.back().label);
    }
    const int len = static_cast<int>(r.items.size());
    max_len = std::max(max_len, len);
    min_len = std::min(min_len, len);
    if (r.split == Split::kTrain) max_train = std::max(max_train, len);
    data.records.push_back(std::move(r));
  }
  data.spec.n_sequences = data.records.size();
  data.spec.min_len = min_len;
  data.spec.max_len = max_len;
  data.spec.label_range = max_label + 1;
  data.spec.train_max_len = max_train;
  const auto mpath = manifest_path_for(jsonl);
  if (std::filesystem::exists(mpath)) {
    std::ifstream mf(mpath);
    const auto m = ojson::parse(mf);
    data.spec.seed = m.at("seed").get<std::uint64_t>();
    data.spec.min_len = m.at("len_range").at(0).get<int>();
    data.spec.max_len = m.at("len_range").at(1).get<int>();
    data.spec.label_range = m.at("label_range").get<int>();
    data.spec.train_max_len = m.value("train_max_len", data.spec.train_max_len);
  }
  return data;
}

}  // namespace labelseq
