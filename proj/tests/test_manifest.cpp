#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "bflow/manifest.hpp"

using namespace bflow;

TEST(GitBlob, KnownVectors) {
  // `git hash-object` of an empty file and of "hello world\n".
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1("hello world\n"), "3b18e512dba79e4c8300dd08aeb37f8e728b8dad");
}

TEST(GitBlob, FileMatchesBytes) {
  const auto p = std::filesystem::temp_directory_path() / "bflow_manifest_blob.bin";
  std::string bytes(3 << 20, '\0');
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(i * 131 % 251);
  std::ofstream(p, std::ios::binary) << bytes;
  EXPECT_EQ(git_blob_sha1_file(p.string()), git_blob_sha1(bytes));
  std::filesystem::remove(p);
  EXPECT_THROW(git_blob_sha1_file(p.string()), ArtifactError);
}

TEST(Manifest, RoundTrip) {
  Manifest m;
  m.stage = "label";
  m.config_hash = git_blob_sha1("x");
  m.seed = 18446744073709551615ull;
  m.inputs["dataset"] = {"train.bflow", git_blob_sha1("a")};
  m.outputs["labels"] = {"labels.bflow", git_blob_sha1("b")};
  m.upstream["build-dataset"] = git_blob_sha1("c");
  m.info = {{"rows", 12}};
  const auto p = (std::filesystem::temp_directory_path() / "bflow_manifest.json").string();
  save_manifest(m, p);
  const Manifest r = load_manifest(p);
  EXPECT_EQ(r.stage, m.stage);
  EXPECT_EQ(r.config_hash, m.config_hash);
  EXPECT_EQ(r.seed, m.seed);
  EXPECT_EQ(r.inputs.at("dataset").path, "train.bflow");
  EXPECT_EQ(r.outputs.at("labels").sha1, m.outputs.at("labels").sha1);
  EXPECT_EQ(r.upstream, m.upstream);
  EXPECT_EQ(r.info["rows"], 12);
  EXPECT_EQ(r.to_json()["tool"], kToolVersion);
  std::filesystem::remove(p);
}

TEST(Manifest, MissingOrCorruptIsArtifactError) {
  EXPECT_THROW(load_manifest("/nonexistent/m.json"), ArtifactError);
  const auto p = (std::filesystem::temp_directory_path() / "bflow_bad_manifest.json").string();
  std::ofstream(p) << "{ \"stage\": ";
  EXPECT_THROW(load_manifest(p), ArtifactError);
  std::filesystem::remove(p);
}
