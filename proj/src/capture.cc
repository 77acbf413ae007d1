#include "orderlab/capture.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace orderlab {

static_assert(std::endian::native == std::endian::little, "tensor payloads are written little-endian");

namespace {

constexpr char kMagic[4] = {'A', 'C', 'T', 'V'};
constexpr uint32_t kVersion = 1;

}  // namespace

Eigen::MatrixXd ActivationTensor::slice(int layer, int token) const {
  Eigen::MatrixXd out(n_samples, d_model);
  for (int s = 0; s < n_samples; ++s) {
    const float* src = data.data() + offset(s, layer, token);
    for (int k = 0; k < d_model; ++k) out(s, k) = src[k];
  }
  return out;
}

Eigen::MatrixXd ActivationTensor::slice(int layer, int token, const std::vector<int>& rows) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), d_model);
  for (size_t r = 0; r < rows.size(); ++r) {
    const float* src = data.data() + offset(rows[r], layer, token);
    for (int k = 0; k < d_model; ++k) out(static_cast<Eigen::Index>(r), k) = src[k];
  }
  return out;
}

ActivationTensor capture_activations(const Model& model, const std::vector<QASample>& prompts, int prompt_id,
                                     int batch_size) {
  if (prompts.empty()) fail(ErrorCode::kInvalidArgument, "no prompts to capture");
  if (batch_size < 1) fail(ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  const size_t len = prompts.front().prompt_tokens.size();
  for (const auto& p : prompts) {
    if (p.prompt_tokens.size() != len) {
      fail(ErrorCode::kMisalignedPrompts, "prompt for entity " + std::to_string(p.entity_id) + " has " +
                                              std::to_string(p.prompt_tokens.size()) + " tokens, expected " +
                                              std::to_string(len));
    }
  }
  const auto& cfg = model.config();
  ActivationTensor acts;
  acts.n_samples = static_cast<int>(prompts.size());
  acts.n_layers = cfg.n_layers;
  acts.n_tokens = static_cast<int>(len);
  acts.d_model = cfg.d_model;
  acts.fingerprint = fingerprint(model);
  acts.data.resize(static_cast<size_t>(acts.n_samples) * acts.n_layers * acts.n_tokens * acts.d_model);
  for (const auto& p : prompts) acts.index.push_back({p.entity_id, p.stage, p.probe_split, prompt_id});

  const size_t n_batches = (prompts.size() + static_cast<size_t>(batch_size) - 1) / static_cast<size_t>(batch_size);
  parallel_for(n_batches, [&](size_t bi) {
    const size_t start = bi * static_cast<size_t>(batch_size);
    const size_t end = std::min(prompts.size(), start + static_cast<size_t>(batch_size));
    std::vector<std::vector<int>> seqs;
    for (size_t i = start; i < end; ++i) seqs.push_back(prompts[i].prompt_tokens);
    const auto fwd = model.forward(make_batch(seqs, 0), false, true);
    for (size_t i = start; i < end; ++i) {
      const int b = static_cast<int>(i - start);
      for (int l = 0; l < acts.n_layers; ++l) {
        const auto& layer = fwd.activations[static_cast<size_t>(l)];
        for (int t = 0; t < acts.n_tokens; ++t) {
          std::memcpy(acts.data.data() + acts.offset(static_cast<int>(i), l, t),
                      layer.data() + static_cast<size_t>(b * acts.n_tokens + t) * acts.d_model,
                      sizeof(float) * static_cast<size_t>(acts.d_model));
        }
      }
    }
  });
  return acts;
}

std::filesystem::path index_path(const std::filesystem::path& actv_path) {
  auto p = actv_path;
  p.replace_extension(".idx.jsonl");
  return p;
}

std::filesystem::path activation_path(const std::filesystem::path& run_dir, const std::string& checkpoint,
                                      int prompt_id) {
  return run_dir / "acts" / checkpoint / (std::to_string(prompt_id) + ".actv");
}

void write_activations(const ActivationTensor& acts, const std::filesystem::path& path) {
  const size_t expected = static_cast<size_t>(acts.n_samples) * acts.n_layers * acts.n_tokens * acts.d_model;
  if (acts.data.size() != expected || acts.index.size() != static_cast<size_t>(acts.n_samples)) {
    fail(ErrorCode::kInvalidArgument, "activation tensor dims do not match its data or index");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::kInvalidArgument, "cannot write " + path.string());
    out.write(kMagic, 4);
    const uint32_t header[5] = {kVersion, static_cast<uint32_t>(acts.n_samples), static_cast<uint32_t>(acts.n_layers),
                                static_cast<uint32_t>(acts.n_tokens), static_cast<uint32_t>(acts.d_model)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(acts.data.data()), static_cast<std::streamsize>(expected * sizeof(float)));
    if (!out) fail(ErrorCode::kInvalidArgument, "short write to " + path.string());
  }
  std::ostringstream idx;
  idx << Json{{"fingerprint", acts.fingerprint},
              {"dims", {acts.n_samples, acts.n_layers, acts.n_tokens, acts.d_model}}}
             .dump()
      << "\n";
  for (const auto& s : acts.index) {
    idx << Json{{"entity_id", s.entity_id},
                {"stage", s.stage},
                {"probe_split", split_name(s.probe_split)},
                {"prompt_id", s.prompt_id}}
               .dump()
        << "\n";
  }
  write_text_file(index_path(path), idx.str());
}

LoadedActivations read_activations(const std::filesystem::path& path, const std::string& expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kMissingArtifact, "cannot open activation file " + path.string());
  const auto corrupt = [&](const std::string& why) {
    fail(ErrorCode::kCorruptTensorFile, path.string() + ": " + why);
  };
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<uint64_t>(in.tellg());
  in.seekg(0);
  if (file_size < 24) corrupt("file too short");
  char magic[4];
  uint32_t header[5];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (std::memcmp(magic, kMagic, 4) != 0) corrupt("bad magic");
  if (header[0] != kVersion) corrupt("unsupported version " + std::to_string(header[0]));
  LoadedActivations out;
  auto& t = out.tensor;
  t.n_samples = static_cast<int>(header[1]);
  t.n_layers = static_cast<int>(header[2]);
  t.n_tokens = static_cast<int>(header[3]);
  t.d_model = static_cast<int>(header[4]);
  const uint64_t count = static_cast<uint64_t>(header[1]) * header[2] * header[3] * header[4];
  if (file_size != 24 + count * sizeof(float)) corrupt("header dims inconsistent with payload length");
  t.data.resize(count);
  in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) corrupt("short read");

  const auto ipath = index_path(path);
  std::ifstream idx(ipath);
  if (!idx) fail(ErrorCode::kMissingArtifact, "missing index sidecar " + ipath.string());
  std::string line;
  bool first = true;
  try {
    while (std::getline(idx, line)) {
      if (line.empty()) continue;
      const Json j = Json::parse(line);
      if (first) {
        first = false;
        t.fingerprint = j.at("fingerprint").get<std::string>();
        const auto dims = j.at("dims").get<std::vector<int>>();
        if (dims != std::vector<int>{t.n_samples, t.n_layers, t.n_tokens, t.d_model}) {
          fail(ErrorCode::kCorruptTensorFile, ipath.string() + ": dims differ from tensor header");
        }
        continue;
      }
      const auto split = j.at("probe_split").get<std::string>();
      t.index.push_back({j.at("entity_id").get<int>(), j.at("stage").get<int>(),
                         split == "probe-test" ? ProbeSplit::kTest : ProbeSplit::kTrain, j.at("prompt_id").get<int>()});
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::kCorruptTensorFile, ipath.string() + ": " + e.what());
  }
  if (first || t.index.size() != static_cast<size_t>(t.n_samples)) {
    fail(ErrorCode::kCorruptTensorFile, ipath.string() + ": index length does not match sample count");
  }
  out.fingerprint_mismatch = !expected_fingerprint.empty() && expected_fingerprint != t.fingerprint;
  return out;
}

}  // namespace orderlab
