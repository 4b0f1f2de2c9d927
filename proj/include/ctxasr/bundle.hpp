#pragma once

// Model bundle: parameter store + configs, its on-disk form (one tensor file
// plus a JSON manifest), and the JSON form of the model configs.

#include "ctxasr/decoder.hpp"
#include "ctxasr/encoder.hpp"
#include "ctxasr/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

namespace ctxasr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BundleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::ordered_json;

namespace cfgio {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto& [k, v] : j.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      std::string list;
      for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
      throw ConfigError(where + ": unknown key '" + k + "' (allowed: " + list + ")");
    }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

}  // namespace cfgio

inline std::string variant_name(DecoderVariant v) {
  return v == DecoderVariant::decoder_only ? "decoder-only" : "encoder-decoder";
}

inline DecoderVariant parse_variant(const std::string& s) {
  if (s == "decoder-only" || s == "decoder_only") return DecoderVariant::decoder_only;
  if (s == "encoder-decoder" || s == "encoder_decoder") return DecoderVariant::encoder_decoder;
  throw ConfigError("unknown variant '" + s + "' (expected decoder-only|encoder-decoder)");
}

inline std::string mask_name(MaskKind k) { return k == MaskKind::causal ? "causal" : "prefix"; }

inline MaskKind parse_mask(const std::string& s) {
  if (s == "causal") return MaskKind::causal;
  if (s == "prefix" || s == "prefix_full") return MaskKind::prefix_full;
  throw ConfigError("unknown mask '" + s + "' (expected causal|prefix)");
}

inline Json to_json(const LoraConfig& c) {
  std::vector<std::string> t;
  for (auto p : c.target_projections) t.push_back(std::string(1, "qkvo"[static_cast<int>(p)]));
  return {{"rank", c.rank}, {"dropout_rate", c.dropout_rate}, {"scaling", c.scaling}, {"target_projections", t}};
}

inline LoraConfig lora_from_json(const nlohmann::json& j, const std::string& where = "lora") {
  cfgio::check_keys(j, {"rank", "dropout_rate", "scaling", "target_projections"}, where);
  LoraConfig c;
  cfgio::read(j, "rank", c.rank, where);
  cfgio::read(j, "dropout_rate", c.dropout_rate, where);
  cfgio::read(j, "scaling", c.scaling, where);
  if (j.contains("target_projections")) {
    c.target_projections.clear();
    for (auto& t : j.at("target_projections")) {
      const auto s = t.get<std::string>();
      const auto pos = std::string_view("qkvo").find(s);
      if (s.size() != 1 || pos == std::string_view::npos)
        throw ConfigError(where + ".target_projections: unknown projection '" + s + "'");
      c.target_projections.push_back(static_cast<Projection>(pos));
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline Json to_json(const EncoderConfig& c) {
  return {{"feat_dim", c.feat_dim},       {"hidden_dim", c.hidden_dim},   {"num_conformer_blocks", c.num_conformer_blocks},
          {"conv_kernel", c.conv_kernel}, {"pre_blocks", c.pre_blocks},   {"post_blocks", c.post_blocks},
          {"decoder_dim", c.decoder_dim}, {"num_heads", c.num_heads},     {"ff_mult", c.ff_mult},
          {"rope_base", c.rope_base}};
}

inline EncoderConfig encoder_from_json(const nlohmann::json& j, const std::string& where = "encoder") {
  cfgio::check_keys(j,
                    {"feat_dim", "hidden_dim", "num_conformer_blocks", "conv_kernel", "pre_blocks", "post_blocks",
                     "decoder_dim", "num_heads", "ff_mult", "rope_base"},
                    where);
  EncoderConfig c;
  cfgio::read(j, "feat_dim", c.feat_dim, where);
  cfgio::read(j, "hidden_dim", c.hidden_dim, where);
  cfgio::read(j, "num_conformer_blocks", c.num_conformer_blocks, where);
  cfgio::read(j, "conv_kernel", c.conv_kernel, where);
  cfgio::read(j, "pre_blocks", c.pre_blocks, where);
  cfgio::read(j, "post_blocks", c.post_blocks, where);
  cfgio::read(j, "decoder_dim", c.decoder_dim, where);
  cfgio::read(j, "num_heads", c.num_heads, where);
  cfgio::read(j, "ff_mult", c.ff_mult, where);
  cfgio::read(j, "rope_base", c.rope_base, where);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline Json to_json(const DecoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim}, {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"ff_dim", c.ff_dim},       {"rope_base", c.rope_base},
          {"lora", to_json(c.lora)},    {"variant", variant_name(c.variant)}};
}

inline DecoderConfig decoder_from_json(const nlohmann::json& j, const std::string& where = "decoder") {
  cfgio::check_keys(j, {"vocab_size", "model_dim", "num_layers", "num_heads", "ff_dim", "rope_base", "lora", "variant"},
                    where);
  DecoderConfig c;
  cfgio::read(j, "vocab_size", c.vocab_size, where);
  cfgio::read(j, "model_dim", c.model_dim, where);
  cfgio::read(j, "num_layers", c.num_layers, where);
  cfgio::read(j, "num_heads", c.num_heads, where);
  cfgio::read(j, "ff_dim", c.ff_dim, where);
  cfgio::read(j, "rope_base", c.rope_base, where);
  if (j.contains("lora")) c.lora = lora_from_json(j.at("lora"), where + ".lora");
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

template <typename S>
struct ModelBundle {
  EncoderConfig encoder_cfg;
  DecoderConfig decoder_cfg;
  ParamStore<S> params;
  std::string tokenizer_hash = CharTokenizer{}.hash();
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string phase;

  AudioEncoder<S> encoder() const { return AudioEncoder<S>::bind(params, encoder_cfg); }

  Decoder<S> decoder() const {
    auto d = Decoder<S>::bind(params, decoder_cfg);
    d.bind_adapters(params);
    return d;
  }

  bool has_ctc_head() const { return params.contains("encoder.ctc_head.out.weight"); }
  bool has_decoder() const { return params.contains("decoder.embed.weight"); }
  bool has_adapters() const {
    for (auto& [name, t] : params.entries())
      if (name.find(".lora_") != std::string::npos || name.find(".xattn") != std::string::npos) return true;
    return false;
  }

  std::vector<std::string> decoder_base() const { return decoder_base_names(params); }

  void freeze_decoder_base() {
    for (auto& n : decoder_base()) params.set_trainable(n, false);
  }

  std::size_t adapter_parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : params.entries())
      if (name.find(".lora_") != std::string::npos) n += t.numel();
    return n;
  }
};

inline std::filesystem::path bundle_tensor_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  return p.replace_extension(".ckpt");
}

// Writes <stem>.json (manifest) and <stem>.ckpt (tensors).
template <typename S>
void save_bundle(const std::filesystem::path& manifest_path, const ModelBundle<S>& b, Dtype dtype = dtype_of<S>()) {
  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  const auto tensor_path = bundle_tensor_path(manifest_path);
  save_store(tensor_path, b.params, dtype);
  Json m;
  m["schema_version"] = 1;
  m["kind"] = "ctxasr-bundle";
  m["phase"] = b.phase;
  m["seed"] = b.seed;
  m["step"] = b.step;
  m["tokenizer_hash"] = b.tokenizer_hash;
  m["encoder"] = to_json(b.encoder_cfg);
  m["decoder"] = to_json(b.decoder_cfg);
  m["tensors"] = tensor_path.filename().string();
  m["dtype"] = dtype_name(dtype);
  m["trainable"] = b.params.trainable_names();
  if (dtype == dtype_of<S>()) m["checksum"] = hex64(b.params.checksum(b.params.names()));
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw CheckpointError("cannot write '" + manifest_path.string() + "'");
  out << m.dump(2) << "\n";
}

template <typename S>
ModelBundle<S> load_bundle(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw BundleError("bundle manifest '" + manifest_path.string() + "' not found");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw BundleError("bundle manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  if (m.value("kind", "") != "ctxasr-bundle") throw BundleError("'" + manifest_path.string() + "' is not a bundle manifest");
  if (m.value("schema_version", 0) != 1)
    throw BundleError("bundle schema_version " + m.value("schema_version", nlohmann::json()).dump() + " is not supported (expected 1)");
  ModelBundle<S> b;
  b.tokenizer_hash = m.at("tokenizer_hash").get<std::string>();
  if (b.tokenizer_hash != CharTokenizer{}.hash())
    throw BundleError("tokenizer hash mismatch: bundle has " + b.tokenizer_hash + ", this build uses " +
                      CharTokenizer{}.hash());
  b.encoder_cfg = encoder_from_json(m.at("encoder"));
  b.decoder_cfg = decoder_from_json(m.at("decoder"));
  b.seed = m.at("seed").get<std::uint64_t>();
  b.step = m.at("step").get<std::size_t>();
  b.phase = m.at("phase").get<std::string>();
  const auto tensors = load_tensors(manifest_path.parent_path() / m.at("tensors").get<std::string>());
  const auto trainable = m.at("trainable").get<std::set<std::string>>();
  for (auto& [name, st] : tensors) {
    std::vector<S> v(st.values.begin(), st.values.end());
    b.params.add(name, Tensor<S>::from(st.shape, std::move(v)), trainable.count(name) > 0);
  }
  if (m.contains("checksum") && m.value("dtype", "") == dtype_name(dtype_of<S>()) && m["checksum"] != hex64(b.params.checksum(b.params.names())))
    throw BundleError("bundle '" + manifest_path.string() + "': tensor checksum does not match the manifest");
  return b;
}

}  // namespace ctxasr
