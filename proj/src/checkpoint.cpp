#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "uvtm/model.hpp"

namespace uvtm::model {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw Error("model", msg); }

void put_le32(std::string& out, float v) {
  std::uint32_t u = 0;
  std::memcpy(&u, &v, sizeof u);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFFu));
}

float get_le32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  float v = 0.0f;
  std::memcpy(&v, &u, sizeof v);
  return v;
}

json config_to_json(const ModelConfig& c) {
  const auto& bb = c.normalizer.bbox;
  return json{{"d", c.d},
              {"heads", c.heads},
              {"layers", c.layers},
              {"delta_m", c.delta_m},
              {"num_segments", c.num_segments},
              {"bbox", {bb.min_lng, bb.min_lat, bb.max_lng, bb.max_lat}},
              {"time_scale", c.normalizer.time_scale},
              {"freq_std_coord", c.freq_std_coord},
              {"freq_std_time", c.freq_std_time},
              {"freq_std_fraction", c.freq_std_fraction},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d = j.at("d").get<int>();
  c.heads = j.at("heads").get<int>();
  c.layers = j.at("layers").get<int>();
  c.delta_m = j.at("delta_m").get<double>();
  c.num_segments = j.at("num_segments").get<int>();
  const auto bb = j.at("bbox").get<std::vector<double>>();
  if (bb.size() != 4) fail("manifest bbox must have four numbers");
  c.normalizer.bbox = {bb[0], bb[1], bb[2], bb[3]};
  c.normalizer.time_scale = j.at("time_scale").get<double>();
  c.freq_std_coord = j.at("freq_std_coord").get<double>();
  c.freq_std_time = j.at("freq_std_time").get<double>();
  c.freq_std_fraction = j.at("freq_std_fraction").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  std::string blob;
  for (const auto& p : model.params().all()) {
    tensors.push_back({{"name", p.name},
                       {"shape", {p.value.rows(), p.value.cols()}},
                       {"dtype", "float32"},
                       {"offset", blob.size()}});
    for (Eigen::Index i = 0; i < p.value.size(); ++i) put_le32(blob, p.value.data()[i]);
  }
  json manifest{{"format", "uvtm-checkpoint-1"},
                {"config", config_to_json(model.config())},
                {"tensors", tensors},
                {"bytes", blob.size()}};
  std::ofstream m(dir / "manifest.json");
  if (!m) fail("cannot write " + (dir / "manifest.json").string());
  m << manifest.dump(2) << '\n';
  std::ofstream b(dir / "params.bin", std::ios::binary);
  if (!b) fail("cannot write " + (dir / "params.bin").string());
  b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!b) fail("failed writing " + (dir / "params.bin").string());
}

Model<float> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const auto params_path = dir / "params.bin";
  std::ifstream m(manifest_path);
  if (!m) fail("missing checkpoint manifest " + manifest_path.string());
  json manifest;
  try {
    m >> manifest;
  } catch (const json::exception& e) {
    fail("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  std::ifstream b(params_path, std::ios::binary);
  if (!b) fail("missing checkpoint parameters " + params_path.string());
  const std::string blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());

  Model<float> model;
  try {
    model = Model<float>(config_from_json(manifest.at("config")));
    const auto& tensors = manifest.at("tensors");
    auto& store = model.params();
    if (tensors.size() != store.size())
      fail("manifest lists " + std::to_string(tensors.size()) + " tensors, network has " +
           std::to_string(store.size()));
    if (manifest.at("bytes").get<std::size_t>() != blob.size())
      fail("params.bin has " + std::to_string(blob.size()) + " bytes, manifest expects " +
           std::to_string(manifest.at("bytes").get<std::size_t>()));
    for (const auto& t : tensors) {
      const auto name = t.at("name").get<std::string>();
      if (!store.contains(name)) fail("manifest tensor " + name + " is not part of the network");
      auto& p = store[store.index_of(name)];
      const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols())
        fail("shape mismatch for tensor " + name);
      if (t.at("dtype").get<std::string>() != "float32") fail("unsupported dtype for tensor " + name);
      const auto offset = t.at("offset").get<std::size_t>();
      const std::size_t bytes = static_cast<std::size_t>(p.value.size()) * 4;
      if (offset + bytes > blob.size()) fail("params.bin is truncated at tensor " + name);
      const auto* data = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = get_le32(data + 4 * i);
    }
  } catch (const json::exception& e) {
    fail("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return model;
}

}  // namespace uvtm::model
