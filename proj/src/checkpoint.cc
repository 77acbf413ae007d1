#include <bit>
#include <cstring>
#include <fstream>

#include "orderlab/model.h"

namespace orderlab {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written little-endian");

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

Json header_json(const Checkpoint& ckpt) {
  Json history = Json::array();
  for (const auto& h : ckpt.history) {
    history.push_back({{"label", h.label}, {"epochs", h.epochs}, {"settings", h.settings}});
  }
  Json manifest = Json::array();
  for (const auto& p : parameter_layout(ckpt.model.config())) {
    manifest.push_back({{"name", p.name}, {"shape", {p.rows, p.cols}}, {"offset", p.offset}});
  }
  return Json{{"config", to_json(ckpt.model.config())}, {"history", history}, {"manifest", manifest}};
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string header = header_json(ckpt).dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kInvalidArgument, "cannot write " + path.string());
  const uint32_t version = kVersion;
  const auto header_len = static_cast<uint32_t>(header.size());
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&header_len), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto& p = ckpt.model.params();
  out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
  if (!out) fail(ErrorCode::kInvalidArgument, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kMissingArtifact, "cannot open checkpoint " + path.string());
  const auto corrupt = [&](const std::string& why) {
    fail(ErrorCode::kCorruptCheckpoint, path.string() + ": " + why);
  };
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<uint64_t>(in.tellg());
  in.seekg(0);
  if (file_size < 12) corrupt("file too short");
  char magic[4];
  uint32_t version = 0, header_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&header_len), 4);
  if (std::memcmp(magic, kMagic, 4) != 0) corrupt("bad magic");
  if (version != kVersion) corrupt("unsupported version " + std::to_string(version));
  if (12 + static_cast<uint64_t>(header_len) > file_size) corrupt("header length exceeds file");
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  Json h;
  ModelConfig config;
  Checkpoint ckpt;
  try {
    h = Json::parse(header);
    config = model_config_from_json(h.at("config"));
    for (const auto& e : h.at("history")) {
      ckpt.history.push_back({e.at("label").get<std::string>(), e.at("epochs").get<int>(), e.at("settings")});
    }
  } catch (const Json::exception& e) {
    corrupt(std::string("bad header: ") + e.what());
  } catch (const Error& e) {
    corrupt(std::string("bad header: ") + e.what());
  }
  const uint64_t n = config.parameter_count();
  if (file_size != 12 + static_cast<uint64_t>(header_len) + n * sizeof(float)) {
    corrupt("payload length does not match config (" + std::to_string(n) + " parameters)");
  }
  ParamVector<float> params(n);
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) corrupt("short read");
  ckpt.model = Model(config, std::move(params));
  return ckpt;
}

std::string fingerprint(const Model& model) {
  const std::string cfg = to_json(model.config()).dump();
  uint64_t h = fnv1a(cfg.data(), cfg.size());
  const auto& p = model.params();
  h = fnv1a(p.data(), p.size() * sizeof(float), h);
  return hex64(h);
}

}  // namespace orderlab
