#pragma once

// Synthetic paired corpus. Each class owns an image prototype and a text
// prototype; an item copies both and resamples tokens with probability rho.
// Text position j and image position j (j < text length) share the resample
// event and the uniform draw behind the replacement token, so a pair is more
// alike than two items of the same class. Image positions past the text length
// are corrupted independently.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "duet/model.hpp"

namespace duet {

enum class Split { kPretrain, kTrain, kVal, kTest };

const char* to_string(Split s);
Split split_from_string(const std::string& s);  // throws ConfigError

struct CorpusConfig {
  std::size_t num_classes = 32;
  std::size_t pairs_per_class = 64;
  std::size_t image_vocab = 64;
  std::size_t text_vocab = 64;
  std::size_t image_tokens = 16;  // content tokens, [CLS] excluded
  std::size_t text_tokens = 8;
  double noise = 0.15;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  bool operator==(const CorpusConfig&) const = default;
};

// Desk defaults: 64 pairs/class for pretrain, 16 for train, 8 for val/test.
CorpusConfig desk_corpus_config(Split split, std::uint64_t seed);

struct CorpusItem {
  std::uint32_t pair_id = 0;
  std::uint32_t class_id = 0;
  std::vector<std::int32_t> image;  // content tokens only
  std::vector<std::int32_t> text;
  bool operator==(const CorpusItem&) const = default;
};

struct PairedCorpus {
  CorpusConfig config;
  Split split = Split::kTrain;
  std::vector<CorpusItem> items;

  std::size_t size() const { return items.size(); }
};

// Prototypes depend only on the seed, so every split shares them.
PairedCorpus generate_corpus(const CorpusConfig& config, Split split);

// Epoch-wise shuffle keyed by (seed, epoch); the final short batch is dropped.
std::vector<std::vector<std::size_t>> make_batches(std::size_t corpus_size, std::size_t batch,
                                                   std::uint64_t seed, std::uint64_t epoch);

// [CLS] + content tokens for the selected items, in the given order.
TokenBatch image_batch(const PairedCorpus& corpus, std::span<const std::size_t> items,
                       const ModelConfig& model);
TokenBatch text_batch(const PairedCorpus& corpus, std::span<const std::size_t> items,
                      const ModelConfig& model);

// Model dimensions that fit the corpus vocabularies and lengths.
ModelConfig fit_model_config(ModelConfig base, const CorpusConfig& corpus);

// Tab-separated records: pair_id, class_id, image tokens, text tokens (tokens
// space-separated). Leading '#' lines carry the generating config.
void export_corpus(const PairedCorpus& corpus, const std::string& path);
PairedCorpus import_corpus(const std::string& path);

}  // namespace duet
