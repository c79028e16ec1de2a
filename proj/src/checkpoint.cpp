#include "lidia/harness/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace lidia {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'I', 'D', 'C', 'K', 'P', 'T', '1'};

json model_config_json(const ModelConfig& m) {
  return json{{"grid", m.grid},
              {"channels", m.channels},
              {"query_dim", m.query_dim},
              {"embed_dim", m.embed_dim},
              {"num_queries", m.num_queries},
              {"decoder_layers", m.decoder_layers},
              {"use_ifm", m.use_ifm},
              {"shared_fconv", m.shared_fconv},
              {"in_eps", m.in_eps},
              {"lrelu_slope", m.lrelu_slope},
              {"attn_mask_threshold", m.attn_mask_threshold},
              {"init_seed", m.init_seed}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig m;
  m.grid = j.at("grid").get<int>();
  m.channels = j.at("channels").get<int>();
  m.query_dim = j.at("query_dim").get<int>();
  m.embed_dim = j.at("embed_dim").get<int>();
  m.num_queries = j.at("num_queries").get<int>();
  m.decoder_layers = j.at("decoder_layers").get<int>();
  m.use_ifm = j.at("use_ifm").get<bool>();
  m.shared_fconv = j.at("shared_fconv").get<bool>();
  m.in_eps = j.at("in_eps").get<double>();
  m.lrelu_slope = j.at("lrelu_slope").get<double>();
  m.attn_mask_threshold = j.at("attn_mask_threshold").get<double>();
  m.init_seed = j.at("init_seed").get<uint64_t>();
  return m;
}

void write_u64(std::ofstream& f, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  f.write(b, 8);
}

uint64_t read_u64(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const LidiaModel<float>& model, const std::filesystem::path& path) {
  const auto& ps = model.params();
  json manifest;
  manifest["model"] = model_config_json(model.config());
  json params = json::array();
  uint64_t offset = 0;
  for (const auto& e : ps.entries()) {
    params.push_back({{"name", e.name},
                      {"shape", e.var.val().shape()},
                      {"offset", offset},
                      {"count", e.var.val().numel()}});
    offset += static_cast<uint64_t>(e.var.val().numel());
  }
  manifest["params"] = params;
  manifest["total_floats"] = offset;
  const std::string mtext = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write checkpoint " + path.string());
  f.write(kMagic, 8);
  write_u64(f, mtext.size());
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& e : ps.entries()) {
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(e.var.val().data()),
            static_cast<std::streamsize>(e.var.val().numel()) * 4);
  }
  if (!f) throw io_error("checkpoint write failed: " + path.string());
}

namespace {

void load_params(ParamStore<float>& ps, const json& manifest, std::ifstream& f,
                 std::streamoff blob_start) {
  const json& params = manifest.at("params");
  if (params.size() != ps.entries().size())
    throw format_error("checkpoint parameter count " + std::to_string(params.size()) +
                       " does not match model (" + std::to_string(ps.entries().size()) + ")");
  for (size_t i = 0; i < ps.entries().size(); ++i) {
    const auto& e = ps.entries()[i];
    const json& p = params.at(i);
    if (p.at("name").get<std::string>() != e.name)
      throw format_error("checkpoint parameter name mismatch at index " + std::to_string(i) +
                         ": " + p.at("name").get<std::string>() + " vs " + e.name);
    const std::vector<int> shape = p.at("shape").get<std::vector<int>>();
    if (shape != e.var.val().shape())
      throw dimension_error("checkpoint shape mismatch for " + e.name + ": stored " +
                            shape_str(shape) + ", model expects " +
                            shape_str(e.var.val().shape()));
    f.seekg(blob_start + static_cast<std::streamoff>(p.at("offset").get<uint64_t>()) * 4);
    Var<float> v = e.var;
    f.read(reinterpret_cast<char*>(v.val().data()),
           static_cast<std::streamsize>(v.val().numel()) * 4);
    if (!f) throw corrupt_data_error("checkpoint blob truncated at " + e.name);
  }
}

json open_manifest(std::ifstream& f, const std::filesystem::path& path,
                   std::streamoff& blob_start) {
  if (!f) throw io_error("cannot open checkpoint " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw format_error("not a checkpoint file: " + path.string());
  const uint64_t mlen = read_u64(f);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw corrupt_data_error("checkpoint manifest truncated: " + path.string());
  blob_start = f.tellg();
  try {
    return json::parse(mtext);
  } catch (const json::exception& e) {
    throw format_error(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

}  // namespace

LidiaModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::streamoff blob_start = 0;
  const json manifest = open_manifest(f, path, blob_start);
  LidiaModel<float> model(model_config_from(manifest.at("model")));
  load_params(model.params(), manifest, f, blob_start);
  return model;
}

void load_checkpoint_into(LidiaModel<float>& model, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::streamoff blob_start = 0;
  const json manifest = open_manifest(f, path, blob_start);
  const ModelConfig stored = model_config_from(manifest.at("model"));
  const ModelConfig& mine = model.config();
  auto mismatch = [](const std::string& what, auto a, auto b) {
    return dimension_error("checkpoint/model config mismatch: " + what + " stored " +
                           std::to_string(a) + ", model " + std::to_string(b));
  };
  if (stored.grid != mine.grid) throw mismatch("grid", stored.grid, mine.grid);
  if (stored.channels != mine.channels) throw mismatch("channels", stored.channels, mine.channels);
  if (stored.query_dim != mine.query_dim)
    throw mismatch("query_dim", stored.query_dim, mine.query_dim);
  if (stored.embed_dim != mine.embed_dim)
    throw mismatch("embed_dim", stored.embed_dim, mine.embed_dim);
  if (stored.num_queries != mine.num_queries)
    throw mismatch("num_queries", stored.num_queries, mine.num_queries);
  if (stored.decoder_layers != mine.decoder_layers)
    throw mismatch("decoder_layers", stored.decoder_layers, mine.decoder_layers);
  if (stored.use_ifm != mine.use_ifm) throw mismatch("use_ifm", stored.use_ifm, mine.use_ifm);
  load_params(model.params(), manifest, f, blob_start);
}

}  // namespace lidia
