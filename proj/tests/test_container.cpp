#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "layerfuse/container.hpp"
#include "layerfuse/model.hpp"
#include "test_util.hpp"

using namespace layerfuse;
using namespace layerfuse::testutil;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("tensor store round trip preserves values and meta") {
  TempDir dir("store");
  TensorStore store;
  store.meta()["purpose"] = "test";
  store.put("b.values", {2, 3}, {1.0f, 2.0f, 3.5f, -1.0f, 0.0f, 9.25f});
  store.put("a.values", {4}, {0.5f, 0.25f, -0.125f, 2.0f});
  store.save(dir.file("t.bin"));

  const TensorStore loaded = TensorStore::load(dir.file("t.bin"));
  CHECK(loaded.meta()["purpose"] == "test");
  CHECK(loaded.get("a.values").shape == std::vector<std::size_t>{4});
  CHECK(loaded.get("b.values").values == store.get("b.values").values);
  CHECK(loaded.names() == std::vector<std::string>{"a.values", "b.values"});
}

TEST_CASE("identical stores produce identical bytes") {
  TempDir dir("store");
  for (int run = 0; run < 2; ++run) {
    TensorStore store;
    store.meta()["seed"] = 7;
    store.put("x", {3}, {1.0f, 2.0f, 3.0f});
    store.save(dir.file("run" + std::to_string(run)));
  }
  CHECK(read_file(dir.file("run0")) == read_file(dir.file("run1")));
}

TEST_CASE("checkpoint save/load round trip is bit exact") {
  TempDir dir("ckpt");
  ModelConfig config;
  config.seed = 7;
  config.n_layers = 3;
  config.d_model = 16;
  config.n_heads = 2;
  config.d_ff = 24;
  const ModelCheckpoint ckpt = init_model(config);
  save_checkpoint(ckpt, dir.file("m.ckpt"));
  const ModelCheckpoint loaded = load_checkpoint(dir.file("m.ckpt"));
  CHECK(checkpoints_identical(ckpt, loaded));

  // second save of the loaded model reproduces the file bytes
  save_checkpoint(loaded, dir.file("m2.ckpt"));
  CHECK(read_file(dir.file("m.ckpt")) == read_file(dir.file("m2.ckpt")));
}

TEST_CASE("empty file reports header length error") {
  TempDir dir("bad");
  write_file(dir.file("empty.bin"), "");
  try {
    TensorStore::load(dir.file("empty.bin"));
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Format);
    CHECK(std::string(e.what()).find("header length exceeds file size") != std::string::npos);
  }
}

TEST_CASE("header length beyond file size is rejected") {
  TempDir dir("bad");
  std::string bytes(8, '\0');
  bytes[0] = 0x40;  // header length 64, but nothing follows
  write_file(dir.file("trunc.bin"), bytes);
  CHECK_THROWS_AS(TensorStore::load(dir.file("trunc.bin")), Error);
}

TEST_CASE("checkpoint with missing layer tensors is rejected") {
  TempDir dir("bad");
  ModelConfig config;
  config.n_layers = 2;
  config.d_model = 8;
  config.n_heads = 2;
  config.d_ff = 8;
  ModelCheckpoint ckpt = init_model(config);
  save_checkpoint(ckpt, dir.file("m.ckpt"));

  // Rewrite the header to claim 3 layers while only 2 are stored.
  TensorStore store = TensorStore::load(dir.file("m.ckpt"));
  store.meta()["n_layers"] = 3;
  store.save(dir.file("claim3.ckpt"));
  try {
    load_checkpoint(dir.file("claim3.ckpt"));
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Format);
    CHECK(std::string(e.what()).find("layers.2") != std::string::npos);
  }
}

TEST_CASE("truncated tensor data is detected with offset") {
  TempDir dir("bad");
  TensorStore store;
  store.put("x", {4}, {1.0f, 2.0f, 3.0f, 4.0f});
  store.save(dir.file("x.bin"));
  std::string bytes = read_file(dir.file("x.bin"));
  bytes.resize(bytes.size() - 8);  // chop half the tensor payload
  write_file(dir.file("cut.bin"), bytes);
  try {
    TensorStore::load(dir.file("cut.bin"));
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Format);
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(e.index() != Error::npos);
  }
}

TEST_CASE("shape mismatch in header is detected") {
  TempDir dir("bad");
  TensorStore store;
  store.put("x", {4}, {1.0f, 2.0f, 3.0f, 4.0f});
  store.save(dir.file("x.bin"));

  // Patch the declared shape without touching offsets.
  std::string bytes = read_file(dir.file("x.bin"));
  const auto pos = bytes.find("\"shape\":[4]");
  REQUIRE(pos != std::string::npos);
  bytes.replace(pos, 11, "\"shape\":[5]");
  // header length changed? no: same byte count
  write_file(dir.file("shape.bin"), bytes);
  try {
    TensorStore::load(dir.file("shape.bin"));
    FAIL("expected format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Format);
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
}
