#include "duet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "duet/errors.hpp"

namespace duet {

static_assert(std::endian::native == std::endian::little, "DUET I/O assumes little-endian");

namespace {

constexpr char kMagic[4] = {'D', 'U', 'E', 'T'};
constexpr const char* kConfigName = "meta.model_config";

template <class U>
void put(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::ifstream& in, const std::string& path) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw CheckpointError(path + ": truncated checkpoint");
  return v;
}

std::vector<float> encode_config(const ModelConfig& c) {
  return {float(c.image_vocab), float(c.text_vocab), float(c.width),      float(c.embed_dim),
          float(c.heads),       float(c.image_depth), float(c.text_depth), float(c.cross_depth),
          float(c.image_len),   float(c.text_len),   float(c.mlp_ratio)};
}

ModelConfig decode_config(const ad::Tensor<float>& t, const std::string& path) {
  if (t.size() != 11) throw CheckpointError(path + ": malformed " + kConfigName);
  auto at = [&](std::size_t i) {
    const float v = t.values[i];
    if (!(v >= 0.0f) || v != static_cast<float>(static_cast<std::size_t>(v))) {
      throw CheckpointError(path + ": malformed " + kConfigName);
    }
    return static_cast<std::size_t>(v);
  };
  ModelConfig c;
  c.image_vocab = at(0);
  c.text_vocab = at(1);
  c.width = at(2);
  c.embed_dim = at(3);
  c.heads = at(4);
  c.image_depth = at(5);
  c.text_depth = at(6);
  c.cross_depth = at(7);
  c.image_len = at(8);
  c.text_len = at(9);
  c.mlp_ratio = at(10);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
  return c;
}

}  // namespace

void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!out) throw CheckpointError("write failed: " + path);
}

std::vector<NamedTensor> read_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(path + ": not a DUET file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(in, path);
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, path);
    if (name_len > 4096) throw CheckpointError(path + ": implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw CheckpointError(path + ": implausible rank for " + name);
    ad::Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(in, path);
      if (d > (std::size_t{1} << 32)) throw CheckpointError(path + ": implausible dim for " + name);
      n *= d;
    }
    std::vector<float> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw CheckpointError(path + ": truncated tensor " + name);
    tensors.emplace_back(std::move(name), ad::Tensor<float>(std::move(shape), std::move(values)));
  }
  return tensors;
}

void save_model(const std::string& path, const Model<float>& model) {
  std::vector<NamedTensor> tensors;
  tensors.emplace_back(kConfigName, ad::Tensor<float>({11}, encode_config(model.config)));
  for_each_parameter(model, std::function<void(const std::string&, const ad::Tensor<float>&)>(
                                [&](const std::string& name, const ad::Tensor<float>& t) {
                                  tensors.emplace_back(name, ad::Tensor<float>(t.shape, t.values));
                                }));
  write_tensors(path, tensors);
}

void load_into(const std::string& path, Model<float>& model) {
  std::map<std::string, ad::Tensor<float>> stored;
  for (auto& [name, t] : read_tensors(path)) stored.emplace(name, std::move(t));
  if (auto it = stored.find(kConfigName); it != stored.end()) {
    if (!(decode_config(it->second, path) == model.config)) {
      throw CheckpointError(path + ": model configuration does not match");
    }
    stored.erase(it);
  }
  std::size_t used = 0;
  for_each_parameter(model, std::function<void(const std::string&, ad::Tensor<float>&)>(
                                [&](const std::string& name, ad::Tensor<float>& t) {
                                  auto it = stored.find(name);
                                  if (it == stored.end()) {
                                    throw CheckpointError(path + ": missing tensor " + name);
                                  }
                                  if (it->second.shape != t.shape) {
                                    throw CheckpointError(path + ": shape mismatch for " + name +
                                                          ": stored " +
                                                          ad::shape_str(it->second.shape) +
                                                          ", expected " + ad::shape_str(t.shape));
                                  }
                                  t.values = it->second.values;
                                  t.zero_grad();
                                  ++used;
                                }));
  if (used != stored.size()) throw CheckpointError(path + ": unexpected extra tensors");
}

Model<float> load_model(const std::string& path) {
  ModelConfig config;
  bool found = false;
  for (const auto& [name, t] : read_tensors(path)) {
    if (name == kConfigName) {
      config = decode_config(t, path);
      found = true;
    }
  }
  if (!found) throw CheckpointError(path + ": missing " + std::string(kConfigName));
  Model<float> model = Model<float>::init(config, 0);
  load_into(path, model);
  return model;
}

}  // namespace duet
