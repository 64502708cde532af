#include "tmx/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace tmx {

namespace {

constexpr uint32_t kMagic = 0x434d5854;  // "TXMC"
constexpr uint32_t kVersion = 1;

template <typename V>
void put(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw ConfigError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams<double>& params, const ExperimentConfig& cfg,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("checkpoint: cannot write '" + path + "'");
  put(out, kMagic);
  put(out, kVersion);
  const std::string json = experiment_to_json(cfg);
  put(out, static_cast<uint64_t>(json.size()));
  out.write(json.data(), static_cast<std::streamsize>(json.size()));

  auto& mutable_params = const_cast<ModelParams<double>&>(params);
  uint64_t count = 0;
  for_each_param(mutable_params,
                 [&](const std::string&, Tensor<double>&, bool) { ++count; });
  put(out, count);
  for_each_param(mutable_params, [&](const std::string& name, Tensor<double>& t, bool) {
    put(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put(out, static_cast<int64_t>(t.dim(i)));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  });
  if (!out) throw ConfigError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open '" + path + "'");
  if (get<uint32_t>(in) != kMagic) throw ConfigError("checkpoint: bad magic");
  if (get<uint32_t>(in) != kVersion) throw ConfigError("checkpoint: bad version");
  const auto json_len = get<uint64_t>(in);
  std::string json(json_len, '\0');
  in.read(json.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw ConfigError("checkpoint: truncated config");

  Checkpoint ck;
  ck.cfg = experiment_from_json(json);
  ck.params = init_model<double>(ck.cfg);

  const auto count = get<uint64_t>(in);
  uint64_t expected = 0;
  for_each_param(ck.params,
                 [&](const std::string&, Tensor<double>&, bool) { ++expected; });
  if (count != expected)
    throw ConfigError("checkpoint: tensor count mismatch");

  for_each_param(ck.params, [&](const std::string& name, Tensor<double>& t, bool) {
    const auto name_len = get<uint32_t>(in);
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    if (stored != name)
      throw ConfigError("checkpoint: unexpected tensor '" + stored + "', wanted '" +
                        name + "'");
    const auto rank = get<uint32_t>(in);
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i)
      shape.push_back(static_cast<int>(get<int64_t>(in)));
    if (shape != t.shape())
      throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw ConfigError("checkpoint: truncated tensor '" + name + "'");
  });
  return ck;
}

}  // namespace tmx
