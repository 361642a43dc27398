#include "duet/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "duet/errors.hpp"
#include "duet/rng.hpp"

namespace duet {

namespace {

constexpr std::uint64_t kPrototypeStream = 0xC0D0;
constexpr std::uint64_t kItemStream = 0xC0D1;
constexpr std::uint64_t kBatchStream = 0xBA7C;

struct Prototypes {
  std::vector<std::vector<std::int32_t>> image, text;
};

Prototypes make_prototypes(const CorpusConfig& c) {
  Rng rng = make_rng(c.seed, kPrototypeStream);
  Prototypes p;
  auto draw = [&](std::size_t len, std::size_t vocab, std::size_t cls) {
    std::vector<std::int32_t> seq(len);
    seq[0] = static_cast<std::int32_t>(cls);
    for (std::size_t j = 1; j < len; ++j) {
      seq[j] = static_cast<std::int32_t>(uniform_index(rng, vocab));
    }
    return seq;
  };
  for (std::size_t cls = 0; cls < c.num_classes; ++cls) {
    p.image.push_back(draw(c.image_tokens, c.image_vocab, cls));
    p.text.push_back(draw(c.text_tokens, c.text_vocab, cls));
  }
  return p;
}

std::int32_t scaled(double u, std::size_t vocab) {
  return static_cast<std::int32_t>(std::min<std::size_t>(
      static_cast<std::size_t>(u * double(vocab)), vocab - 1));
}

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::kPretrain:
      return "pretrain";
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "pretrain") return Split::kPretrain;
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("split", "unknown split '" + s + "'");
}

void CorpusConfig::validate() const {
  auto need = [](bool ok, const char* field, const std::string& what) {
    if (!ok) throw ConfigError(std::string("corpus.") + field, what);
  };
  need(num_classes >= 2, "num_classes", "must be >= 2");
  need(pairs_per_class >= 1, "pairs_per_class", "must be >= 1");
  need(image_vocab >= num_classes, "image_vocab", "must be >= num_classes");
  need(text_vocab >= num_classes, "text_vocab", "must be >= num_classes");
  need(image_tokens >= 1, "image_tokens", "must be >= 1");
  need(text_tokens >= 1, "text_tokens", "must be >= 1");
  need(noise >= 0.0 && noise < 1.0, "noise", "must lie in [0, 1)");
}

CorpusConfig desk_corpus_config(Split split, std::uint64_t seed) {
  CorpusConfig c;
  c.seed = seed;
  c.pairs_per_class = split == Split::kPretrain ? 64 : split == Split::kTrain ? 16 : 8;
  return c;
}

PairedCorpus generate_corpus(const CorpusConfig& config, Split split) {
  config.validate();
  const Prototypes proto = make_prototypes(config);
  Rng rng = make_rng(config.seed, kItemStream, static_cast<std::uint64_t>(split));
  const std::size_t total = config.num_classes * config.pairs_per_class;
  std::vector<std::uint32_t> classes(total);
  for (std::size_t k = 0; k < total; ++k) {
    classes[k] = static_cast<std::uint32_t>(k % config.num_classes);
  }
  shuffle_in_place(std::span<std::uint32_t>(classes), rng);

  const std::size_t shared = std::min(config.image_tokens, config.text_tokens);
  PairedCorpus corpus{config, split, {}};
  corpus.items.reserve(total);
  for (std::size_t k = 0; k < total; ++k) {
    CorpusItem item;
    item.pair_id = static_cast<std::uint32_t>(k);
    item.class_id = classes[k];
    item.image = proto.image[item.class_id];
    item.text = proto.text[item.class_id];
    for (std::size_t j = 0; j < shared; ++j) {
      const bool resample = uniform01(rng) < config.noise;
      const double u = uniform01(rng);
      if (resample) {
        item.image[j] = scaled(u, config.image_vocab);
        item.text[j] = scaled(u, config.text_vocab);
      }
    }
    auto independent = [&](std::vector<std::int32_t>& seq, std::size_t vocab) {
      for (std::size_t j = shared; j < seq.size(); ++j) {
        const bool resample = uniform01(rng) < config.noise;
        const double u = uniform01(rng);
        if (resample) seq[j] = scaled(u, vocab);
      }
    };
    independent(item.image, config.image_vocab);
    independent(item.text, config.text_vocab);
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t corpus_size, std::size_t batch,
                                                   std::uint64_t seed, std::uint64_t epoch) {
  if (batch == 0 || batch > corpus_size) {
    throw std::invalid_argument("batch size " + std::to_string(batch) +
                                " does not fit a corpus of " + std::to_string(corpus_size));
  }
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, kBatchStream, epoch);
  shuffle_in_place(std::span<std::size_t>(order), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b + batch <= corpus_size; b += batch) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(b + batch));
  }
  return batches;
}

namespace {

TokenBatch to_batch(const PairedCorpus& corpus, std::span<const std::size_t> items,
                    std::size_t len, std::int32_t cls, std::size_t vocab, bool image) {
  TokenBatch b{items.size(), len, std::vector<std::int32_t>(items.size() * len)};
  for (std::size_t r = 0; r < items.size(); ++r) {
    if (items[r] >= corpus.size()) throw std::out_of_range("batch item outside corpus");
    const auto& seq = image ? corpus.items[items[r]].image : corpus.items[items[r]].text;
    if (seq.size() + 1 != len) {
      throw ShapeError("corpus sequence of " + std::to_string(seq.size()) +
                       " tokens does not fit model length " + std::to_string(len));
    }
    b.ids[r * len] = cls;
    for (std::size_t j = 0; j < seq.size(); ++j) {
      if (seq[j] < 0 || static_cast<std::size_t>(seq[j]) >= vocab) {
        throw std::out_of_range("corpus token outside model vocabulary");
      }
      b.ids[r * len + 1 + j] = seq[j];
    }
  }
  return b;
}

}  // namespace

TokenBatch image_batch(const PairedCorpus& corpus, std::span<const std::size_t> items,
                       const ModelConfig& m) {
  return to_batch(corpus, items, m.image_len, m.image_cls(), m.image_vocab, true);
}

TokenBatch text_batch(const PairedCorpus& corpus, std::span<const std::size_t> items,
                      const ModelConfig& m) {
  return to_batch(corpus, items, m.text_len, m.text_cls(), m.text_vocab, false);
}

ModelConfig fit_model_config(ModelConfig base, const CorpusConfig& corpus) {
  base.image_vocab = corpus.image_vocab;
  base.text_vocab = corpus.text_vocab;
  base.image_len = corpus.image_tokens + 1;
  base.text_len = corpus.text_tokens + 1;
  return base;
}

void export_corpus(const PairedCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  const auto& c = corpus.config;
  char noise[32];
  std::snprintf(noise, sizeof noise, "%.17g", c.noise);
  out << "# duet corpus v1\n"
      << "# split=" << to_string(corpus.split) << " num_classes=" << c.num_classes
      << " pairs_per_class=" << c.pairs_per_class << " image_vocab=" << c.image_vocab
      << " text_vocab=" << c.text_vocab << " image_tokens=" << c.image_tokens
      << " text_tokens=" << c.text_tokens << " noise=" << noise << " seed=" << c.seed << "\n";
  auto join = [](const std::vector<std::int32_t>& v) {
    std::string s;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (j) s += ' ';
      s += std::to_string(v[j]);
    }
    return s;
  };
  for (const auto& it : corpus.items) {
    out << it.pair_id << '\t' << it.class_id << '\t' << join(it.image) << '\t' << join(it.text)
        << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

PairedCorpus import_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("corpus", "cannot open " + path);
  PairedCorpus corpus;
  std::map<std::string, std::string> meta;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError("corpus", path + ":" + std::to_string(lineno) + ": " + what);
  };
  auto parse_tokens = [&](const std::string& field) {
    std::vector<std::int32_t> v;
    std::istringstream ss(field);
    long long x;
    while (ss >> x) {
      if (x < 0 || x > INT32_MAX) fail("token out of range");
      v.push_back(static_cast<std::int32_t>(x));
    }
    if (!ss.eof()) fail("malformed token list");
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string kv;
      while (ss >> kv) {
        const auto eq = kv.find('=');
        if (eq != std::string::npos) meta[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1) {
      fields.push_back(line.substr(start, pos - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 4) fail("expected 4 tab-separated fields");
    CorpusItem item;
    try {
      item.pair_id = static_cast<std::uint32_t>(std::stoul(fields[0]));
      item.class_id = static_cast<std::uint32_t>(std::stoul(fields[1]));
    } catch (const std::exception&) {
      fail("malformed id");
    }
    item.image = parse_tokens(fields[2]);
    item.text = parse_tokens(fields[3]);
    corpus.items.push_back(std::move(item));
  }
  if (corpus.items.empty()) throw ConfigError("corpus", path + ": no records");

  CorpusConfig& c = corpus.config;
  auto num = [&](const char* key, std::size_t fallback) -> std::size_t {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : std::stoull(it->second);
  };
  std::uint32_t max_class = 0;
  std::int32_t max_image = 0, max_text = 0;
  for (const auto& it : corpus.items) {
    max_class = std::max(max_class, it.class_id);
    for (auto t : it.image) max_image = std::max(max_image, t);
    for (auto t : it.text) max_text = std::max(max_text, t);
  }
  c.num_classes = num("num_classes", max_class + 1);
  c.image_vocab = num("image_vocab", std::max<std::size_t>(max_image + 1, c.num_classes));
  c.text_vocab = num("text_vocab", std::max<std::size_t>(max_text + 1, c.num_classes));
  c.image_tokens = num("image_tokens", corpus.items[0].image.size());
  c.text_tokens = num("text_tokens", corpus.items[0].text.size());
  c.pairs_per_class = num("pairs_per_class", corpus.items.size() / c.num_classes);
  c.seed = num("seed", 0);
  if (auto it = meta.find("noise"); it != meta.end()) c.noise = std::stod(it->second);
  if (auto it = meta.find("split"); it != meta.end()) corpus.split = split_from_string(it->second);
  c.validate();
  std::unordered_set<std::uint32_t> seen;
  for (const auto& it : corpus.items) {
    if (it.image.size() != c.image_tokens || it.text.size() != c.text_tokens) {
      throw ConfigError("corpus", path + ": inconsistent sequence lengths");
    }
    if (it.class_id >= c.num_classes) throw ConfigError("corpus", path + ": class id out of range");
    for (auto t : it.image) {
      if (static_cast<std::size_t>(t) >= c.image_vocab) {
        throw ConfigError("corpus", path + ": image token outside vocabulary");
      }
    }
    for (auto t : it.text) {
      if (static_cast<std::size_t>(t) >= c.text_vocab) {
        throw ConfigError("corpus", path + ": text token outside vocabulary");
      }
    }
    if (!seen.insert(it.pair_id).second) throw ConfigError("corpus", path + ": duplicate pair id");
  }
  return corpus;
}

}  // namespace duet
