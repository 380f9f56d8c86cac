#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ccfcnet/common.hpp"
#include "ccfcnet/model.hpp"

namespace ccfcnet {

using Json = nlohmann::json;

// Checkpoint directory layout:
//   config.json            model config, ablations, seed, class names, run info
//   tensors.index          one line per tensor: name dtype shape
//   <tensor name>.bin      flat little-endian float32, row-major
struct Checkpoint {
  ModelParams params;
  std::vector<std::string> class_names;
  uint64_t seed = 0;
  Json meta;
};

namespace detail {

inline std::string shape_string(const TensorRef& t) {
  if (t.cols == 1) return std::to_string(t.rows);
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

}  // namespace detail

inline Json model_config_to_json(const ModelConfig& c) {
  return Json{{"r", c.r},
              {"d", c.d},
              {"hidden_enc", c.hidden_enc},
              {"n_blocks", c.n_blocks},
              {"n_heads", c.n_heads},
              {"tau_gumbel", c.tau_gumbel},
              {"softmax_temp", c.softmax_temp},
              {"dropout", c.dropout},
              {"attn_hidden", c.attn_hidden},
              {"dec_hidden", c.dec_hidden},
              {"n_classes", c.n_classes}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.r = j.at("r");
  c.d = j.at("d");
  c.hidden_enc = j.at("hidden_enc");
  c.n_blocks = j.at("n_blocks");
  c.n_heads = j.at("n_heads");
  c.tau_gumbel = j.at("tau_gumbel");
  c.softmax_temp = j.at("softmax_temp");
  c.dropout = j.at("dropout");
  c.attn_hidden = j.at("attn_hidden");
  c.dec_hidden = j.at("dec_hidden");
  c.n_classes = j.at("n_classes");
  return c;
}

inline Json ablations_to_json(const Ablations& a) {
  return Json{{"no_mask", a.no_mask},
              {"no_intra", a.no_intra},
              {"no_prototype", a.no_prototype},
              {"no_step2", a.no_step2},
              {"no_reg", a.no_reg}};
}

inline Ablations ablations_from_json(const Json& j) {
  Ablations a;
  a.no_mask = j.at("no_mask");
  a.no_intra = j.at("no_intra");
  a.no_prototype = j.at("no_prototype");
  a.no_step2 = j.at("no_step2");
  a.no_reg = j.at("no_reg");
  return a;
}

inline void save_checkpoint(const fs::path& dir, ModelParams& params,
                            const std::vector<std::string>& class_names, uint64_t seed,
                            const Json& extra = Json::object()) {
  fs::create_directories(dir);
  Json cfg;
  cfg["model"] = model_config_to_json(params.config);
  cfg["ablations"] = ablations_to_json(params.ablations);
  cfg["seed"] = seed;
  cfg["class_names"] = class_names;
  cfg["init"] = "uniform-fanin linear, 0.02*normal tokens/prototypes";
  for (auto it = extra.begin(); it != extra.end(); ++it) cfg[it.key()] = it.value();
  {
    std::ofstream out(dir / "config.json");
    out << cfg.dump(2) << '\n';
  }

  std::ofstream index(dir / "tensors.index");
  for (const auto& t : params.tensors()) {
    index << t.name << " f32 " << detail::shape_string(t) << '\n';
    std::ofstream bin(dir / (t.name + ".bin"), std::ios::binary);
    auto m = t.map();
    for (int i = 0; i < t.rows; ++i) {
      for (int j = 0; j < t.cols; ++j) {
        const float v = static_cast<float>(m(i, j));
        bin.write(reinterpret_cast<const char*>(&v), sizeof(float));
      }
    }
  }
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw ParseError("cannot open " + (dir / "config.json").string());
  Json cfg;
  try {
    cfg_in >> cfg;
  } catch (const Json::exception& e) {
    throw ParseError("bad config.json in " + dir.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.meta = cfg;
  ckpt.seed = cfg.at("seed");
  ckpt.class_names = cfg.at("class_names").get<std::vector<std::string>>();
  ModelConfig mc = model_config_from_json(cfg.at("model"));
  Ablations ab = ablations_from_json(cfg.at("ablations"));
  ckpt.params = ModelParams::init(mc, ab, ckpt.seed);

  std::ifstream index(dir / "tensors.index");
  if (!index) throw ParseError("cannot open " + (dir / "tensors.index").string());
  auto refs = ckpt.params.tensors();
  size_t n_loaded = 0;
  std::string name, dtype, shape;
  while (index >> name >> dtype >> shape) {
    auto it = std::find_if(refs.begin(), refs.end(),
                           [&](const TensorRef& t) { return t.name == name; });
    if (it == refs.end()) throw ParseError("unknown tensor '" + name + "' in " + dir.string());
    if (dtype != "f32") throw ParseError("unsupported dtype " + dtype + " for " + name);
    if (shape != detail::shape_string(*it)) {
      throw DimensionMismatch("tensor " + name + " has shape " + shape + ", expected " +
                              detail::shape_string(*it));
    }
    std::ifstream bin(dir / (name + ".bin"), std::ios::binary);
    if (!bin) throw ParseError("missing tensor file for " + name);
    auto m = it->map();
    for (int i = 0; i < it->rows; ++i) {
      for (int j = 0; j < it->cols; ++j) {
        float v;
        if (!bin.read(reinterpret_cast<char*>(&v), sizeof(float))) {
          throw ParseError("tensor file for " + name + " is truncated");
        }
        m(i, j) = static_cast<double>(v);
      }
    }
    ++n_loaded;
  }
  if (n_loaded != refs.size()) {
    throw ParseError("checkpoint lists " + std::to_string(n_loaded) + " tensors, expected " +
                     std::to_string(refs.size()));
  }
  return ckpt;
}

}  // namespace ccfcnet
