#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ccfcnet/checkpoint.hpp"

using namespace ccfcnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("ccfcnet_ckpt_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ModelParams demo_params(uint64_t seed) {
  ModelConfig cfg;
  cfg.r = 8;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.hidden_enc = 12;
  return ModelParams::init(cfg, {}, seed);
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact", "[checkpoint]") {
  ModelParams p = demo_params(21);
  fs::path dir1 = temp_dir("a");
  fs::path dir2 = temp_dir("b");
  save_checkpoint(dir1, p, {"control", "patient"}, 21,
                  Json{{"note", "test"}, {"split", Json{{"train", 0.6}, {"val", 0.2},
                                                        {"test", 0.2}, {"seed", 21}}}});
  Checkpoint loaded = load_checkpoint(dir1);
  save_checkpoint(dir2, loaded.params, loaded.class_names, loaded.seed);

  // every tensor file from the re-save matches the first save byte for byte
  for (const auto& t : p.tensors()) {
    CHECK(slurp(dir1 / (t.name + ".bin")) == slurp(dir2 / (t.name + ".bin")));
  }
  CHECK(slurp(dir1 / "tensors.index") == slurp(dir2 / "tensors.index"));

  CHECK(loaded.class_names == std::vector<std::string>{"control", "patient"});
  CHECK(loaded.seed == 21);
  CHECK(loaded.meta.at("note") == "test");

  // loaded values are exactly the float32 casts of the originals
  auto orig = p.tensors();
  auto back = loaded.params.tensors();
  for (size_t i = 0; i < orig.size(); ++i) {
    auto a = orig[i].map();
    auto b = back[i].map();
    for (int r = 0; r < orig[i].rows; ++r)
      for (int c = 0; c < orig[i].cols; ++c)
        CHECK(b(r, c) == static_cast<double>(static_cast<float>(a(r, c))));
  }
}

TEST_CASE("checkpoint config restores the model structure", "[checkpoint]") {
  ModelConfig cfg;
  cfg.r = 10;
  cfg.n_heads = 5;
  cfg.n_blocks = 1;
  cfg.hidden_enc = 24;
  Ablations ab;
  ab.no_reg = true;
  ab.no_step2 = true;
  ModelParams p = ModelParams::init(cfg, ab, 77);
  fs::path dir = temp_dir("cfg");
  save_checkpoint(dir, p, {"control", "patient"}, 77);
  Checkpoint loaded = load_checkpoint(dir);
  CHECK(loaded.params.config.r == 10);
  CHECK(loaded.params.config.n_heads == 5);
  CHECK(loaded.params.config.hidden_enc == 24);
  CHECK(loaded.params.ablations.no_reg);
  CHECK(loaded.params.ablations.no_step2);
  CHECK_FALSE(loaded.params.ablations.no_mask);
  CHECK(loaded.params.blocks.size() == 1);
}

TEST_CASE("corrupted checkpoints are rejected", "[checkpoint]") {
  ModelParams p = demo_params(31);
  fs::path dir = temp_dir("corrupt");
  save_checkpoint(dir, p, {"control", "patient"}, 31);

  SECTION("truncated tensor") {
    fs::resize_file(dir / "decoder.fc2.weight.bin", 8);
    CHECK_THROWS_AS(load_checkpoint(dir), ParseError);
  }
  SECTION("missing tensor file") {
    fs::remove(dir / "z_summary.bin");
    CHECK_THROWS_AS(load_checkpoint(dir), ParseError);
  }
  SECTION("unknown tensor in index") {
    std::ofstream app(dir / "tensors.index", std::ios::app);
    app << "bogus.tensor f32 4\n";
    app.close();
    CHECK_THROWS_AS(load_checkpoint(dir), ParseError);
  }
  SECTION("shape mismatch") {
    std::string idx = slurp(dir / "tensors.index");
    auto pos = idx.find("z_summary f32 8");
    REQUIRE(pos != std::string::npos);
    idx.replace(pos, 15, "z_summary f32 9");
    std::ofstream out(dir / "tensors.index");
    out << idx;
    out.close();
    CHECK_THROWS_AS(load_checkpoint(dir), DimensionMismatch);
  }
  SECTION("missing config") {
    fs::remove(dir / "config.json");
    CHECK_THROWS_AS(load_checkpoint(dir), ParseError);
  }
}
