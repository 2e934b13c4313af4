#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dndt/errors.hpp"
#include "dndt/image.hpp"
#include "dndt/rng.hpp"
#include "dndt/tensor.hpp"

namespace dndt::model {

inline constexpr char kCheckpointMagic[6] = {'D', 'N', 'D', 'T', '1', '\0'};
inline constexpr int kCheckpointVersion = 1;

// Fixed 3-level encoder / 2-level decoder topology; only widths vary.
struct ModelConfig {
  std::array<int, 3> enc = {8, 16, 32};
  std::array<int, 2> dec = {16, 8};
  int in_channels = 1;
  double norm_eps = 1e-5;
  std::uint64_t init_seed = 1;

  void validate() const {
    for (int c : enc)
      if (c < 1) throw UsageError("encoder widths must be positive");
    for (int c : dec)
      if (c < 1) throw UsageError("decoder widths must be positive");
    if (in_channels < 1) throw UsageError("in_channels must be positive");
    if (!(norm_eps > 0)) throw UsageError("norm_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct ParamDef {
  std::string name;
  ad::Shape shape;
};

// The fixed parameter order: encoder blocks, DENO decoder, DET decoder, each
// residual block as conv/norm triplets. Checkpoints serialize in this order.
inline std::vector<ParamDef> parameter_table(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamDef> defs;
  auto res_block = [&](const std::string& prefix, int cin, int cout) {
    int in = cin;
    for (int j = 1; j <= 3; ++j) {
      const std::string stem = prefix + ".conv" + std::to_string(j);
      defs.push_back({stem + ".w", {cout, in, 3, 3}});
      defs.push_back({stem + ".b", {cout}});
      const std::string norm = prefix + ".norm" + std::to_string(j);
      defs.push_back({norm + ".g", {cout}});
      defs.push_back({norm + ".b", {cout}});
      in = cout;
    }
  };
  auto up_conv = [&](const std::string& prefix, int cin, int cout) {
    defs.push_back({prefix + ".conv.w", {cout, cin, 3, 3}});
    defs.push_back({prefix + ".conv.b", {cout}});
  };
  auto head = [&](const std::string& prefix, int cin) {
    defs.push_back({prefix + ".w", {1, cin, 1, 1}});
    defs.push_back({prefix + ".b", {1}});
  };

  res_block("enc1", cfg.in_channels, cfg.enc[0]);
  res_block("enc2", cfg.enc[0], cfg.enc[1]);
  res_block("enc3", cfg.enc[1], cfg.enc[2]);

  up_conv("deno.up1", cfg.enc[2], cfg.dec[0]);
  res_block("deno.res1", cfg.dec[0] + cfg.enc[1], cfg.dec[0]);
  up_conv("deno.up2", cfg.dec[0], cfg.dec[1]);
  res_block("deno.res2", cfg.dec[1] + cfg.enc[0], cfg.dec[1]);
  head("deno.head", cfg.dec[1]);

  up_conv("det.up1", cfg.enc[2], cfg.dec[0]);
  res_block("det.res1", cfg.dec[0] + cfg.enc[1] + cfg.dec[0], cfg.dec[0]);
  up_conv("det.up2", cfg.dec[0], cfg.dec[1]);
  res_block("det.res2", cfg.dec[1] + cfg.enc[0] + cfg.dec[1], cfg.dec[1]);
  head("det.head", cfg.dec[1]);
  return defs;
}

inline std::size_t expected_parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& d : parameter_table(cfg)) n += ad::shape_numel(d.shape);
  return n;
}

struct ModelParameters {
  ModelConfig config;
  std::vector<ParamDef> defs;                // parameter_table(config)
  std::vector<std::vector<float>> values;    // same order as defs
  NormRule norm_rule;

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < defs.size(); ++i)
      if (defs[i].name == name) return static_cast<int>(i);
    throw Error("unknown parameter: " + name);
  }
};

// He-style initialization: conv weights ~ N(0, 2/fan_in), biases and norm
// shifts 0, norm scales 1; deterministic in config.init_seed.
inline ModelParameters init_params(const ModelConfig& cfg) {
  ModelParameters mp;
  mp.config = cfg;
  mp.defs = parameter_table(cfg);
  mp.values.reserve(mp.defs.size());
  rng::Stream rs(rng::mix(cfg.init_seed, 0x696e6974ull));
  for (const auto& d : mp.defs) {
    std::vector<float> v(ad::shape_numel(d.shape));
    const bool is_conv_w = d.shape.size() == 4;
    const bool is_norm_scale = d.name.size() > 2 &&
                               d.name.compare(d.name.size() - 2, 2, ".g") == 0;
    if (is_conv_w) {
      const double fan_in = static_cast<double>(d.shape[1]) * d.shape[2] * d.shape[3];
      const double sd = std::sqrt(2.0 / fan_in);
      for (auto& x : v) x = static_cast<float>(rs.normal(0.0, sd));
    } else if (is_norm_scale) {
      std::fill(v.begin(), v.end(), 1.0f);
    }  // biases and norm shifts stay 0
    mp.values.push_back(std::move(v));
  }
  return mp;
}

// Parameters materialized as leaf tensors on a tape, with name lookup.
template <typename T>
struct ParamTensors {
  std::vector<ad::Tensor<T>> ordered;
  std::unordered_map<std::string, ad::Tensor<T>> by_name;

  const ad::Tensor<T>& at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
};

template <typename T>
ParamTensors<T> make_param_tensors(ad::Tape<T>& tape, const ModelParameters& mp,
                                   bool requires_grad) {
  ParamTensors<T> pt;
  pt.ordered.reserve(mp.defs.size());
  for (std::size_t i = 0; i < mp.defs.size(); ++i) {
    std::vector<T> v(mp.values[i].begin(), mp.values[i].end());
    auto t = tape.leaf(mp.defs[i].shape, std::move(v), requires_grad);
    pt.ordered.push_back(t);
    pt.by_name.emplace(mp.defs[i].name, t);
  }
  return pt;
}

// conv-norm-ReLU x3; the first ReLU's output is added to the third norm's
// output, then a final ReLU.
template <typename T>
ad::Tensor<T> residual_block(const ParamTensors<T>& p, const std::string& prefix,
                             ad::Tensor<T> x, double eps) {
  using namespace ad;
  auto layer = [&](ad::Tensor<T> in, int j) {
    const std::string js = std::to_string(j);
    auto c = conv2d(in, p.at(prefix + ".conv" + js + ".w"),
                    p.at(prefix + ".conv" + js + ".b"), 3);
    return instance_norm(c, p.at(prefix + ".norm" + js + ".g"),
                         p.at(prefix + ".norm" + js + ".b"), static_cast<T>(eps));
  };
  auto h1 = relu(layer(x, 1));
  auto h2 = relu(layer(h1, 2));
  auto h3 = layer(h2, 3);
  return relu(add(h1, h3));
}

template <typename T>
struct EncoderFeatures {
  ad::Tensor<T> f1, f2, f3;  // full, half, quarter resolution
};

template <typename T>
EncoderFeatures<T> encoder_forward(const ParamTensors<T>& p,
                                   const ModelConfig& cfg, ad::Tensor<T> image) {
  const auto& s = image.shape();
  check_shape(s.size() == 4 && s[1] == cfg.in_channels,
              "encoder: expected [N," + std::to_string(cfg.in_channels) +
                  ",H,W], got " + ad::shape_str(s));
  check_shape(s[2] % 4 == 0 && s[3] % 4 == 0,
              "encoder: H and W must be divisible by 4");
  EncoderFeatures<T> out;
  out.f1 = residual_block(p, "enc1", image, cfg.norm_eps);
  out.f2 = residual_block(p, "enc2", ad::maxpool2(out.f1), cfg.norm_eps);
  out.f3 = residual_block(p, "enc3", ad::maxpool2(out.f2), cfg.norm_eps);
  return out;
}

template <typename T>
struct DenoOutput {
  ad::Tensor<T> denoised;  // [N,1,H,W], in [0,1]
  ad::Tensor<T> l2, l1;    // post-residual features at half / full resolution
};

// Each level: upsample x2 -> 3x3 conv -> concat with the encoder skip ->
// residual block. The post-residual maps feed the detection decoder.
template <typename T>
DenoOutput<T> deno_decoder_forward(const ParamTensors<T>& p,
                                   const ModelConfig& cfg,
                                   const EncoderFeatures<T>& enc) {
  using namespace ad;
  DenoOutput<T> out;
  auto u1 = conv2d(upsample_bilinear2(enc.f3), p.at("deno.up1.conv.w"),
                   p.at("deno.up1.conv.b"), 3);
  out.l2 = residual_block(p, "deno.res1", concat_channels<T>({u1, enc.f2}),
                          cfg.norm_eps);
  auto u2 = conv2d(upsample_bilinear2(out.l2), p.at("deno.up2.conv.w"),
                   p.at("deno.up2.conv.b"), 3);
  out.l1 = residual_block(p, "deno.res2", concat_channels<T>({u2, enc.f1}),
                          cfg.norm_eps);
  out.denoised =
      sigmoid(conv2d(out.l1, p.at("deno.head.w"), p.at("deno.head.b"), 1));
  return out;
}

// Mirror of the DENO decoder, except each concat also takes the DENO
// decoder's same-level features. Emits raw logits.
template <typename T>
ad::Tensor<T> det_decoder_forward(const ParamTensors<T>& p,
                                  const ModelConfig& cfg,
                                  const EncoderFeatures<T>& enc,
                                  const DenoOutput<T>& deno) {
  using namespace ad;
  auto u1 = conv2d(upsample_bilinear2(enc.f3), p.at("det.up1.conv.w"),
                   p.at("det.up1.conv.b"), 3);
  auto e2 = residual_block(p, "det.res1",
                           concat_channels<T>({u1, enc.f2, deno.l2}), cfg.norm_eps);
  auto u2 = conv2d(upsample_bilinear2(e2), p.at("det.up2.conv.w"),
                   p.at("det.up2.conv.b"), 3);
  auto e1 = residual_block(p, "det.res2",
                           concat_channels<T>({u2, enc.f1, deno.l1}), cfg.norm_eps);
  return conv2d(e1, p.at("det.head.w"), p.at("det.head.b"), 1);
}

template <typename T>
struct ForwardOutput {
  ad::Tensor<T> denoised;      // [N,1,H,W] in [0,1]
  ad::Tensor<T> score_logits;  // [N,1,H,W]
  EncoderFeatures<T> enc;
  DenoOutput<T> deno;
};

template <typename T>
ForwardOutput<T> forward(const ParamTensors<T>& p, const ModelConfig& cfg,
                         ad::Tensor<T> image) {
  ForwardOutput<T> out;
  out.enc = encoder_forward(p, cfg, image);
  out.deno = deno_decoder_forward(p, cfg, out.enc);
  out.score_logits = det_decoder_forward(p, cfg, out.enc, out.deno);
  out.denoised = out.deno.denoised;
  return out;
}

// ---- checkpoint format -------------------------------------------------
//
// magic "DNDT1\0" | uint32 LE header length | JSON header | raw float32 LE
// parameter data concatenated in header order.

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"enc", cfg.enc},
                        {"dec", cfg.dec},
                        {"in_channels", cfg.in_channels},
                        {"norm_eps", cfg.norm_eps},
                        {"init_seed", cfg.init_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    auto enc = j.at("enc").get<std::vector<int>>();
    auto dec = j.at("dec").get<std::vector<int>>();
    if (enc.size() != 3 || dec.size() != 2)
      throw IoError(IoError::Code::bad_format, "config must have 3+2 widths");
    std::copy(enc.begin(), enc.end(), cfg.enc.begin());
    std::copy(dec.begin(), dec.end(), cfg.dec.begin());
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.norm_eps = j.at("norm_eps").get<double>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::bad_format, std::string("bad config: ") + e.what());
  }
  return cfg;
}

inline void save_checkpoint(const std::string& path, const ModelParameters& mp) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& d : mp.defs)
    params.push_back({{"name", d.name}, {"shape", d.shape}});
  nlohmann::json header{{"version", kCheckpointVersion},
                        {"config", config_to_json(mp.config)},
                        {"norm", {{"lo_frac", mp.norm_rule.lo_frac},
                                  {"hi_frac", mp.norm_rule.hi_frac}}},
                        {"params", params}};
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoError::Code::open_failed, "cannot open for write: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(head.size());
  char lenb[4] = {static_cast<char>(len & 0xFF), static_cast<char>((len >> 8) & 0xFF),
                  static_cast<char>((len >> 16) & 0xFF),
                  static_cast<char>((len >> 24) & 0xFF)};
  out.write(lenb, 4);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  static_assert(sizeof(float) == 4);
  for (const auto& v : mp.values)  // x86: native order is already little-endian
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * 4));
  if (!out) throw IoError(IoError::Code::truncated, "short write: " + path);
}

inline ModelParameters load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoError::Code::open_failed, "cannot open: " + path);
  char magic[6];
  in.read(magic, 6);
  if (in.gcount() != 6 || std::memcmp(magic, kCheckpointMagic, 6) != 0)
    throw IoError(IoError::Code::bad_magic, "not a checkpoint: " + path);
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  if (in.gcount() != 4)
    throw IoError(IoError::Code::truncated, "truncated checkpoint header: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(lenb[0]) |
                            (static_cast<std::uint32_t>(lenb[1]) << 8) |
                            (static_cast<std::uint32_t>(lenb[2]) << 16) |
                            (static_cast<std::uint32_t>(lenb[3]) << 24);
  std::string head(len, '\0');
  in.read(head.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len))
    throw IoError(IoError::Code::truncated, "truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::bad_format, std::string("bad checkpoint header: ") + e.what());
  }
  if (!header.contains("version") || header.at("version").get<int>() != kCheckpointVersion)
    throw IoError(IoError::Code::bad_version, "unsupported checkpoint version in " + path);

  ModelParameters mp;
  mp.config = config_from_json(header.at("config"));
  try {
    mp.norm_rule.lo_frac = header.at("norm").at("lo_frac").get<double>();
    mp.norm_rule.hi_frac = header.at("norm").at("hi_frac").get<double>();
    for (const auto& pj : header.at("params"))
      mp.defs.push_back({pj.at("name").get<std::string>(),
                         pj.at("shape").get<ad::Shape>()});
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::bad_format, std::string("bad checkpoint header: ") + e.what());
  }

  // The stored table must agree with the one derived from the config.
  const auto expected = parameter_table(mp.config);
  if (expected.size() != mp.defs.size())
    throw IoError(IoError::Code::count_mismatch, "parameter table size mismatch in " + path);
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (expected[i].name != mp.defs[i].name || expected[i].shape != mp.defs[i].shape)
      throw IoError(IoError::Code::count_mismatch,
                    "parameter table entry mismatch at " + expected[i].name);

  std::size_t total = 0;
  for (const auto& d : mp.defs) {
    const std::size_t n = ad::shape_numel(d.shape);
    std::vector<float> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 4));
    if (in.gcount() != static_cast<std::streamsize>(n * 4))
      throw IoError(IoError::Code::truncated, "truncated checkpoint data: " + path);
    mp.values.push_back(std::move(v));
    total += n;
  }
  if (total != expected_parameter_count(mp.config))
    throw IoError(IoError::Code::count_mismatch, "parameter count mismatch in " + path);
  if (in.peek() != EOF)
    throw IoError(IoError::Code::bad_format, "trailing bytes in checkpoint: " + path);
  return mp;
}

}  // namespace dndt::model
