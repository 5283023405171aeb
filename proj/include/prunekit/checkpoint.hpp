#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunekit/gates.hpp"
#include "prunekit/transformer.hpp"

namespace prunekit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian fp32");

inline constexpr char kCheckpointMagic[4] = {'P', 'K', 'C', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model<float> model;
  std::optional<GateMask> mask;
  std::optional<HardConcreteGates<float>> gates_attn;
  std::optional<HardConcreteGates<float>> gates_ff;
};

namespace detail {

struct NamedTensor {
  std::string name;
  const Tensor<float>* tensor;
};

inline std::vector<NamedTensor> named_tensors(const Model<float>& m) {
  std::vector<NamedTensor> out{{"token_embedding", &m.token_embedding},
                               {"position_embedding", &m.position_embedding},
                               {"qa_head", &m.qa_head}};
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const auto& lw = m.layers[l];
    std::string p = "layer" + std::to_string(l) + ".";
    const std::pair<const char*, const Tensor<float>*> items[] = {
        {"wq", &lw.wq}, {"bq", &lw.bq}, {"wk", &lw.wk}, {"bk", &lw.bk},
        {"wv", &lw.wv}, {"bv", &lw.bv}, {"wo", &lw.wo}, {"bo", &lw.bo},
        {"w1", &lw.w1}, {"b1", &lw.b1}, {"w2", &lw.w2}, {"b2", &lw.b2},
        {"ln1_gain", &lw.ln1_gain}, {"ln1_bias", &lw.ln1_bias},
        {"ln2_gain", &lw.ln2_gain}, {"ln2_bias", &lw.ln2_bias}};
    for (const auto& [name, t] : items) out.push_back({p + name, t});
  }
  return out;
}

}  // namespace detail

inline int64_t checkpoint_payload_bytes(const Model<float>& m) {
  int64_t bytes = 0;
  for (const auto& nt : detail::named_tensors(m))
    bytes += static_cast<int64_t>(nt.tensor->numel()) * 4;
  return bytes;
}

// Container layout: magic, u32 version, u64 header length, JSON header
// (config, per-layer sizes, tensor directory with payload offsets, optional
// mask and gate sections), then raw little-endian fp32 tensor payloads.
inline void save_checkpoint(const std::string& path, const Model<float>& m,
                            const GateMask* mask = nullptr,
                            const HardConcreteGates<float>* gates_attn = nullptr,
                            const HardConcreteGates<float>* gates_ff = nullptr) {
  auto tensors = detail::named_tensors(m);
  nlohmann::ordered_json header;
  header["config"] = {{"n_layers", m.config.n_layers},   {"n_heads", m.config.n_heads},
                      {"d_model", m.config.d_model},     {"d_ff", m.config.d_ff},
                      {"vocab_size", m.config.vocab_size}, {"max_seq_len", m.config.max_seq_len},
                      {"activation", activation_name(m.config.activation)}};
  header["head_dim"] = m.head_dim;
  header["heads_per_layer"] = m.heads_per_layer();
  header["ff_per_layer"] = m.ff_per_layer();
  uint64_t offset = 0;
  auto dir = nlohmann::ordered_json::array();
  for (const auto& nt : tensors) {
    uint64_t bytes = nt.tensor->numel() * 4;
    dir.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset},
                   {"bytes", bytes}});
    offset += bytes;
  }
  header["tensors"] = std::move(dir);
  if (mask) header["mask"] = {{"attn", mask->attn}, {"ff", mask->ff}};
  if (gates_attn || gates_ff) {
    nlohmann::ordered_json hc;
    const auto& dist = gates_attn ? gates_attn->dist : gates_ff->dist;
    hc["beta"] = dist.beta;
    hc["gamma_low"] = dist.gamma_low;
    hc["zeta"] = dist.zeta;
    auto dump_family = [](const HardConcreteGates<float>& g) {
      auto arr = nlohmann::ordered_json::array();
      for (const auto& la : g.log_alpha)
        arr.push_back(std::vector<float>(la.data().begin(), la.data().end()));
      return arr;
    };
    if (gates_attn) hc["attn_log_alpha"] = dump_family(*gates_attn);
    if (gates_ff) hc["ff_log_alpha"] = dump_family(*gates_ff);
    header["hard_concrete"] = std::move(hc);
  }

  std::string header_str = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, 4);
  uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header_str.data(), static_cast<std::streamsize>(hlen));
  for (const auto& nt : tensors)
    out.write(reinterpret_cast<const char*>(nt.tensor->data().data()),
              static_cast<std::streamsize>(nt.tensor->numel() * 4));
  if (!out) throw IoError("save_checkpoint: write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("load_checkpoint: bad magic, not a checkpoint file");
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || version != kCheckpointVersion)
    throw IoError("load_checkpoint: version " + std::to_string(version) + " unsupported, want " +
                  std::to_string(kCheckpointVersion));
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in) throw IoError("load_checkpoint: truncated header length");
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("load_checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: header parse: ") + e.what());
  }

  Checkpoint ck;
  try {
    const auto& c = header.at("config");
    ck.model.config.n_layers = c.at("n_layers").get<int>();
    ck.model.config.n_heads = c.at("n_heads").get<int>();
    ck.model.config.d_model = c.at("d_model").get<int>();
    ck.model.config.d_ff = c.at("d_ff").get<int>();
    ck.model.config.vocab_size = c.at("vocab_size").get<int>();
    ck.model.config.max_seq_len = c.at("max_seq_len").get<int>();
    ck.model.config.activation = activation_from_name(c.at("activation").get<std::string>());
    ck.model.head_dim = header.at("head_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: config: ") + e.what());
  }
  ck.model.config.validate();
  auto heads = header.at("heads_per_layer").get<std::vector<int>>();
  auto ffs = header.at("ff_per_layer").get<std::vector<int>>();
  if (static_cast<int>(heads.size()) != ck.model.config.n_layers ||
      static_cast<int>(ffs.size()) != ck.model.config.n_layers)
    throw IoError("load_checkpoint: heads_per_layer/ff_per_layer do not match n_layers");

  // read payload into named buffers
  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  std::unordered_map<std::string, Tensor<float>> loaded;
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    auto shape = entry.at("shape").get<std::vector<int>>();
    uint64_t offset = entry.at("offset").get<uint64_t>();
    uint64_t bytes = entry.at("bytes").get<uint64_t>();
    if (bytes != detail::shape_numel(shape) * 4)
      throw IoError("load_checkpoint: tensor '" + name + "': bytes do not match shape");
    if (offset + bytes > payload.size())
      throw IoError("load_checkpoint: tensor '" + name + "': payload truncated");
    std::vector<float> data(detail::shape_numel(shape));
    std::memcpy(data.data(), payload.data() + offset, bytes);
    loaded.emplace(name, Tensor<float>::from_data(std::move(shape), std::move(data), true));
  }

  auto take = [&](const std::string& name) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw IoError("load_checkpoint: tensor '" + name + "' missing from directory");
    return it->second;
  };
  ck.model.token_embedding = take("token_embedding");
  ck.model.position_embedding = take("position_embedding");
  ck.model.qa_head = take("qa_head");
  ck.model.layers.resize(ck.model.config.n_layers);
  for (int l = 0; l < ck.model.config.n_layers; ++l) {
    auto& lw = ck.model.layers[l];
    std::string p = "layer" + std::to_string(l) + ".";
    lw.wq = take(p + "wq"); lw.bq = take(p + "bq");
    lw.wk = take(p + "wk"); lw.bk = take(p + "bk");
    lw.wv = take(p + "wv"); lw.bv = take(p + "bv");
    lw.wo = take(p + "wo"); lw.bo = take(p + "bo");
    lw.w1 = take(p + "w1"); lw.b1 = take(p + "b1");
    lw.w2 = take(p + "w2"); lw.b2 = take(p + "b2");
    lw.ln1_gain = take(p + "ln1_gain"); lw.ln1_bias = take(p + "ln1_bias");
    lw.ln2_gain = take(p + "ln2_gain"); lw.ln2_bias = take(p + "ln2_bias");
    lw.n_heads = heads[l];
    lw.d_ff = ffs[l];
    if (lw.wq.shape() != std::vector<int>{ck.model.config.d_model, heads[l] * ck.model.head_dim})
      throw IoError("load_checkpoint: layer " + std::to_string(l) +
                    ": wq shape inconsistent with heads_per_layer");
    if (lw.w1.shape() != std::vector<int>{ck.model.config.d_model, ffs[l]})
      throw IoError("load_checkpoint: layer " + std::to_string(l) +
                    ": w1 shape inconsistent with ff_per_layer");
  }

  if (header.contains("mask")) {
    GateMask mask;
    mask.attn = header["mask"].at("attn").get<std::vector<std::vector<float>>>();
    mask.ff = header["mask"].at("ff").get<std::vector<std::vector<float>>>();
    ck.mask = std::move(mask);
  }
  if (header.contains("hard_concrete")) {
    const auto& hc = header["hard_concrete"];
    HardConcreteParams dist;
    dist.beta = hc.at("beta").get<double>();
    dist.gamma_low = hc.at("gamma_low").get<double>();
    dist.zeta = hc.at("zeta").get<double>();
    auto load_family = [&](const char* field) {
      HardConcreteGates<float> g;
      g.dist = dist;
      for (const auto& layer : hc.at(field)) {
        auto vals = layer.get<std::vector<float>>();
        int n = static_cast<int>(vals.size());
        g.log_alpha.push_back(Tensor<float>::from_data({n}, std::move(vals), true));
      }
      return g;
    };
    if (hc.contains("attn_log_alpha")) ck.gates_attn = load_family("attn_log_alpha");
    if (hc.contains("ff_log_alpha")) ck.gates_ff = load_family("ff_log_alpha");
  }
  return ck;
}

}  // namespace prunekit
