// Stage manifests: config hash, seed, and git-style content hashes of every
// input and output, so results can be traced and stale inputs refused.
#pragma once

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <string_view>

#include "bflow/core.hpp"

namespace bflow {

inline constexpr const char* kToolVersion = "bflow 1.0.0";

inline std::string to_hex(const unsigned char* p, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string s(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    s[2 * i] = digits[p[i] >> 4];
    s[2 * i + 1] = digits[p[i] & 15];
  }
  return s;
}

class Sha1 {
 public:
  Sha1() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha1(), nullptr) != 1) throw std::runtime_error("SHA-1 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("SHA-1 update failed");
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw std::runtime_error("SHA-1 final failed");
    return to_hex(md, len);
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

/// Same value as `git hash-object` for these bytes.
inline std::string git_blob_sha1(std::string_view bytes) {
  Sha1 h;
  h.update("blob " + std::to_string(bytes.size()));
  h.update("\0", 1);
  h.update(bytes);
  return h.hex();
}

inline std::string git_blob_sha1_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError("missing artifact: " + path);
  const auto size = std::filesystem::file_size(path);
  Sha1 h;
  h.update("blob " + std::to_string(size));
  h.update("\0", 1);
  std::vector<char> buf(1 << 20);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return h.hex();
}

struct ArtifactRef {
  std::string path;  // relative to the run directory
  std::string sha1;
};

struct Manifest {
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, ArtifactRef> inputs;
  std::map<std::string, ArtifactRef> outputs;
  /// Upstream stage name -> config hash it was produced with.
  std::map<std::string, std::string> upstream;
  nlohmann::json info = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tool"] = kToolVersion;
    j["stage"] = stage;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    auto refs = [](const std::map<std::string, ArtifactRef>& m) {
      nlohmann::json o = nlohmann::json::object();
      for (const auto& [k, v] : m) o[k] = {{"path", v.path}, {"sha1", v.sha1}};
      return o;
    };
    j["inputs"] = refs(inputs);
    j["outputs"] = refs(outputs);
    j["upstream"] = upstream;
    j["info"] = info;
    return j;
  }

  static Manifest from_json(const nlohmann::json& j) {
    Manifest m;
    m.stage = j.at("stage").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("inputs").items()) m.inputs[k] = {v.at("path"), v.at("sha1")};
    for (const auto& [k, v] : j.at("outputs").items()) m.outputs[k] = {v.at("path"), v.at("sha1")};
    m.upstream = j.at("upstream").get<std::map<std::string, std::string>>();
    if (j.contains("info")) m.info = j.at("info");
    return m;
  }
};

inline void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArtifactError("cannot write manifest " + path);
  os << m.to_json().dump(2) << '\n';
  if (!os) throw ArtifactError("write failed: " + path);
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArtifactError("missing manifest: " + path);
  try {
    return Manifest::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("unreadable manifest " + path + ": " + e.what());
  }
}

}  // namespace bflow
