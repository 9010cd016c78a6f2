#include "vrpo/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include <json.hpp>

namespace vrpo {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

using nlohmann::json;

void save_checkpoint(const std::string& stem, const NamedTensors& params,
                     const std::map<std::string, std::string>& meta) {
  std::ofstream bin(stem + ".bin", std::ios::binary | std::ios::trunc);
  VRPO_CHECK(bin.good(), IoError, "cannot open " << stem << ".bin for writing");

  json manifest;
  manifest["format"] = "vrpo-ckpt-v1";
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    const auto bytes = static_cast<std::uint64_t>(t.size()) * sizeof(float);
    bin.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(bytes));
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += bytes;
  }
  VRPO_CHECK(bin.good(), IoError, "write failed for " << stem << ".bin");
  manifest["params"] = entries;
  manifest["total_bytes"] = offset;
  for (const auto& [k, v] : meta) manifest["meta"][k] = v;

  std::ofstream js(stem + ".json", std::ios::trunc);
  VRPO_CHECK(js.good(), IoError, "cannot open " << stem << ".json for writing");
  js << manifest.dump(2) << "\n";
  VRPO_CHECK(js.good(), IoError, "write failed for " << stem << ".json");
}

void load_checkpoint(const std::string& stem, NamedTensors& params) {
  std::ifstream js(stem + ".json");
  VRPO_CHECK(js.good(), IoError, "missing checkpoint manifest " << stem << ".json");
  json manifest = json::parse(js, nullptr, /*allow_exceptions=*/true);

  std::map<std::string, std::pair<Shape, std::uint64_t>> index;
  for (const auto& e : manifest.at("params")) {
    index[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(),
                                              e.at("offset").get<std::uint64_t>()};
  }

  std::ifstream bin(stem + ".bin", std::ios::binary);
  VRPO_CHECK(bin.good(), IoError, "missing checkpoint blob " << stem << ".bin");

  for (auto& [name, t] : params) {
    auto it = index.find(name);
    VRPO_CHECK(it != index.end(), CompatError, "checkpoint lacks parameter '" << name << "'");
    const auto& [shape, offset] = it->second;
    VRPO_CHECK(shape == t.shape(), CompatError,
               "parameter '" << name << "' shape " << shape_str(shape)
                             << " != expected " << shape_str(t.shape()));
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(t.size() * static_cast<std::int64_t>(sizeof(float))));
    VRPO_CHECK(bin.good(), IoError, "short read for parameter '" << name << "'");
  }
}

std::map<std::string, std::string> read_checkpoint_meta(const std::string& stem) {
  std::ifstream js(stem + ".json");
  VRPO_CHECK(js.good(), IoError, "missing checkpoint manifest " << stem << ".json");
  json manifest = json::parse(js);
  std::map<std::string, std::string> out;
  if (manifest.contains("meta"))
    for (auto& [k, v] : manifest["meta"].items()) out[k] = v.get<std::string>();
  return out;
}

}  // namespace vrpo
