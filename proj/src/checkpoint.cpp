#include "taylorseg/checkpoint.hpp"

#include <fstream>

#include "taylorseg/errors.hpp"

namespace taylorseg {

using nlohmann::json;

namespace {

ParamGroup group_from_string(const std::string& s) {
  if (s == to_string(ParamGroup::Backbone)) return ParamGroup::Backbone;
  if (s == to_string(ParamGroup::App)) return ParamGroup::App;
  throw DataError("unknown parameter group '" + s + "'");
}

std::string hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace

json to_json(const NetworkConfig& cfg) {
  return json{
      {"variant", cfg.variant == Variant::PN ? "pn" : "nn"},
      {"encoder_layers", cfg.encoder_layers},
      {"downsample_ratio", cfg.downsample_ratio},
      {"k_neighbors", cfg.k_neighbors},
      {"channels", cfg.channels},
      {"embed_channels", cfg.embed_channels},
      {"out_channels", cfg.out_channels},
      {"interp_k", cfg.interp_k},
      {"fps_start", cfg.fps_start},
      {"kernel", {{"s", cfg.kernel.s}, {"p", cfg.kernel.p}, {"learnable_p", cfg.kernel.learnable_p}}},
      {"pe", {{"bands", cfg.pe.bands}, {"base", cfg.pe.base}}},
  };
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig cfg;
  try {
    const std::string variant = j.at("variant");
    if (variant != "pn" && variant != "nn") throw DataError("unknown variant '" + variant + "'");
    cfg.variant = variant == "pn" ? Variant::PN : Variant::NN;
    cfg.encoder_layers = j.at("encoder_layers");
    cfg.downsample_ratio = j.at("downsample_ratio");
    cfg.k_neighbors = j.at("k_neighbors");
    cfg.channels = j.at("channels").get<std::vector<int>>();
    cfg.embed_channels = j.at("embed_channels");
    cfg.out_channels = j.at("out_channels");
    cfg.interp_k = j.at("interp_k");
    cfg.fps_start = j.at("fps_start");
    cfg.kernel.s = j.at("kernel").at("s");
    cfg.kernel.p = j.at("kernel").at("p");
    cfg.kernel.learnable_p = j.at("kernel").at("learnable_p");
    cfg.pe.bands = j.at("pe").at("bands");
    cfg.pe.base = j.at("pe").at("base");
  } catch (const json::exception& e) {
    throw DataError(std::string("bad network config: ") + e.what());
  }
  return cfg;
}

json to_json(const FewShotConfig& cfg) {
  return json{
      {"temperature", cfg.temperature},
      {"similarity", cfg.similarity == Similarity::Cosine ? "cosine" : "neg_sq_euclidean"},
      {"loss_includes_background", cfg.loss_includes_background},
      {"pool_stride", cfg.pool_stride},
  };
}

FewShotConfig fewshot_from_json(const json& j) {
  FewShotConfig cfg;
  try {
    cfg.temperature = j.at("temperature");
    const std::string sim = j.at("similarity");
    if (sim == "cosine") {
      cfg.similarity = Similarity::Cosine;
    } else if (sim == "neg_sq_euclidean") {
      cfg.similarity = Similarity::NegSquaredEuclidean;
    } else {
      throw DataError("unknown similarity '" + sim + "'");
    }
    cfg.loss_includes_background = j.at("loss_includes_background");
    cfg.pool_stride = j.at("pool_stride");
  } catch (const json::exception& e) {
    throw DataError(std::string("bad few-shot config: ") + e.what());
  }
  return cfg;
}

std::uint64_t config_hash(const NetworkConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json(cfg).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  json params = json::array();
  for (const auto& e : ckpt.params.entries()) {
    params.push_back({{"name", e.name},
                      {"group", to_string(e.group)},
                      {"shape", e.value.shape()},
                      {"values", std::vector<double>(e.value.data().begin(), e.value.data().end())}});
  }
  const json doc{
      {"format", kCheckpointFormat},
      {"config_hash", hex(config_hash(ckpt.network))},
      {"network", to_json(ckpt.network)},
      {"fewshot", to_json(ckpt.fewshot)},
      {"iterations", ckpt.iterations},
      {"params", params},
  };
  out << doc.dump() << '\n';
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  save_checkpoint(out, ckpt);
  if (!out) throw DataError("failed writing " + path.string());
}

Checkpoint load_checkpoint(std::istream& in) {
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat) {
    throw DataError(std::string("not a ") + kCheckpointFormat + " file");
  }
  Checkpoint ckpt;
  ckpt.network = network_from_json(doc.at("network"));
  if (doc.value("config_hash", "") != hex(config_hash(ckpt.network))) {
    throw DataError("checkpoint config hash does not match its network config");
  }
  if (doc.contains("fewshot")) ckpt.fewshot = fewshot_from_json(doc.at("fewshot"));
  try {
    ckpt.iterations = doc.value("iterations", std::uint64_t{0});
    for (const auto& p : doc.at("params")) {
      Shape shape = p.at("shape").get<Shape>();
      std::vector<double> values = p.at("values").get<std::vector<double>>();
      ckpt.params.add(p.at("name").get<std::string>(), group_from_string(p.at("group")),
                      Tensor(std::move(shape), std::move(values)));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("bad parameter entry: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bad parameter entry: ") + e.what());
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace taylorseg
