// SPDX-License-Identifier: Apache-2.0
//
// Parameter containers and forward passes for the segmentation network (a
// small encoder/decoder with skip connections; teacher and student share the
// architecture) and the domain discriminator (conv stack + fully connected
// head over softmax probability maps).
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdda/bytes.hpp"
#include "sdda/rng.hpp"
#include "sdda/tensor.hpp"

namespace sdda::models {

struct SegNetConfig {
  size_t in_channels = 1;
  size_t num_classes = 2;             // K
  std::vector<size_t> widths{8, 16};  // channels per encoder stage
  size_t depth = 2;
  size_t kernel = 3;

  bool operator==(const SegNetConfig&) const = default;
};

inline void validate(const SegNetConfig& c) {
  if (c.num_classes < 2) throw Error("segnet: num_classes must be >= 2");
  if (c.widths.size() != c.depth) {
    throw Error("segnet: widths length must equal depth");
  }
  if (c.depth == 0 || c.in_channels == 0) throw Error("segnet: zero sizes");
  for (size_t w : c.widths) {
    if (w == 0) throw Error("segnet: zero width");
  }
  if (c.kernel % 2 == 0) throw Error("segnet: kernel must be odd");
}

struct DiscriminatorConfig {
  size_t in_channels = 2;  // K of the probability maps it consumes
  size_t input_h = 32;
  size_t input_w = 32;
  std::vector<size_t> conv_widths{8, 16, 32, 64};
  std::vector<size_t> fc_widths{64, 128, 2};

  bool operator==(const DiscriminatorConfig&) const = default;
};

inline void validate(const DiscriminatorConfig& c) {
  if (c.fc_widths.empty() || c.fc_widths.back() != 2) {
    throw Error("discriminator: last fc width must be 2");
  }
  if (c.conv_widths.empty() || c.in_channels == 0) {
    throw Error("discriminator: empty conv stack");
  }
  for (size_t w : c.conv_widths) {
    if (w == 0) throw Error("discriminator: zero width");
  }
  for (size_t w : c.fc_widths) {
    if (w == 0) throw Error("discriminator: zero width");
  }
}

// Spatial extent after the conv/pool stack (stride-2 average pooling after
// each conv; a 1-extent dim passes through).
inline std::pair<size_t, size_t> disc_final_hw(const DiscriminatorConfig& c) {
  size_t h = c.input_h, w = c.input_w;
  for (size_t i = 0; i < c.conv_widths.size(); ++i) {
    if (h > 1) {
      if (h % 2 != 0) throw Error("discriminator: odd spatial extent in pool");
      h /= 2;
    }
    if (w > 1) {
      if (w % 2 != 0) throw Error("discriminator: odd spatial extent in pool");
      w /= 2;
    }
  }
  return {h, w};
}

// Ordered named parameter collection; every tensor requires grad.
struct ModelParams {
  std::vector<std::pair<std::string, Tensor>> entries;
  uint64_t rng_seed = 0;

  void add(std::string name, Tensor t) {
    for (const auto& [n, _] : entries) {
      if (n == name) throw Error("ModelParams: duplicate name '" + name + "'");
    }
    entries.emplace_back(std::move(name), std::move(t));
  }

  const Tensor& at(std::string_view name) const {
    for (const auto& [n, t] : entries) {
      if (n == name) return t;
    }
    throw Error("ModelParams: no parameter named '" + std::string(name) + "'");
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& [_, t] : entries) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [_, t] : entries) t.zero_grad();
  }

  uint64_t value_checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : entries) {
      h = fnv1a(name, h);
      h = fnv1a(t.value().data(), t.size() * sizeof(double), h);
    }
    return h;
  }
};

inline bool same_values(const ModelParams& a, const ModelParams& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    if (a.entries[i].first != b.entries[i].first) return false;
    const auto av = a.entries[i].second.value();
    const auto bv = b.entries[i].second.value();
    if (av.size() != bv.size()) return false;
    for (size_t j = 0; j < av.size(); ++j) {
      if (av[j] != bv[j]) return false;
    }
  }
  return true;
}

namespace detail {

// Zero-mean init scaled by fan-in (sqrt(2/fan_in)); biases zero. Each tensor
// draws from its own derived stream, so the layout of one layer never
// perturbs another.
inline Tensor init_conv(uint64_t seed, std::string_view name, size_t co,
                        size_t ci, size_t k) {
  Rng rng(derive_seed(seed, name));
  const double scale = std::sqrt(2.0 / static_cast<double>(ci * k * k));
  std::vector<double> w(co * ci * k * k);
  for (double& v : w) v = rng.normal() * scale;
  return Tensor::leaf({co, ci, k, k}, std::move(w), true);
}

inline Tensor init_fc(uint64_t seed, std::string_view name, size_t in,
                      size_t out) {
  Rng rng(derive_seed(seed, name));
  const double scale = std::sqrt(2.0 / static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.normal() * scale;
  return Tensor::leaf({in, out}, std::move(w), true);
}

inline Tensor init_bias(size_t n) { return Tensor::zeros({n}, true); }

}  // namespace detail

inline ModelParams init_params(const SegNetConfig& c, uint64_t seed) {
  validate(c);
  ModelParams p;
  p.rng_seed = seed;
  size_t ch = c.in_channels;
  for (size_t d = 0; d < c.depth; ++d) {
    const std::string name = "enc" + std::to_string(d);
    p.add(name + ".w", detail::init_conv(seed, name, c.widths[d], ch, c.kernel));
    p.add(name + ".b", detail::init_bias(c.widths[d]));
    ch = c.widths[d];
  }
  p.add("bott.w", detail::init_conv(seed, "bott", ch, ch, c.kernel));
  p.add("bott.b", detail::init_bias(ch));
  for (size_t d = c.depth; d-- > 0;) {
    const std::string name = "dec" + std::to_string(d);
    const size_t out = d > 0 ? c.widths[d - 1] : c.widths[0];
    p.add(name + ".w",
          detail::init_conv(seed, name, out, ch + c.widths[d], c.kernel));
    p.add(name + ".b", detail::init_bias(out));
    ch = out;
  }
  p.add("head.w", detail::init_conv(seed, "head", c.num_classes, ch, c.kernel));
  p.add("head.b", detail::init_bias(c.num_classes));
  return p;
}

inline ModelParams init_params(const DiscriminatorConfig& c, uint64_t seed) {
  validate(c);
  ModelParams p;
  p.rng_seed = seed;
  size_t ch = c.in_channels;
  for (size_t i = 0; i < c.conv_widths.size(); ++i) {
    const std::string name = "conv" + std::to_string(i);
    p.add(name + ".w", detail::init_conv(seed, name, c.conv_widths[i], ch, 3));
    p.add(name + ".b", detail::init_bias(c.conv_widths[i]));
    ch = c.conv_widths[i];
  }
  const auto [fh, fw] = disc_final_hw(c);
  size_t in = ch * fh * fw;
  for (size_t i = 0; i < c.fc_widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i);
    p.add(name + ".w", detail::init_fc(seed, name, in, c.fc_widths[i]));
    p.add(name + ".b", detail::init_bias(c.fc_widths[i]));
    in = c.fc_widths[i];
  }
  return p;
}

// Segmentation forward pass: batch [B,in,H,W] -> logits [B,K,H,W].
// H and W must be divisible by 2^depth.
inline Tensor forward_seg(Graph& g, const ModelParams& p, const SegNetConfig& c,
                          const Tensor& batch) {
  validate(c);
  if (batch.rank() != 4 || batch.shape()[1] != c.in_channels) {
    throw ShapeError("forward_seg", batch.shape(),
                     Shape{0, c.in_channels, 0, 0});
  }
  const size_t div = size_t{1} << c.depth;
  if (batch.shape()[2] % div != 0 || batch.shape()[3] % div != 0) {
    throw Error("forward_seg: H and W must be divisible by " +
                std::to_string(div) + ", got " + shape_str(batch.shape()));
  }
  Tensor x = batch;
  std::vector<Tensor> skips;
  for (size_t d = 0; d < c.depth; ++d) {
    const std::string name = "enc" + std::to_string(d);
    x = g.relu(g.conv2d(x, p.at(name + ".w"), p.at(name + ".b")));
    skips.push_back(x);
    x = g.maxpool2(x);
  }
  x = g.relu(g.conv2d(x, p.at("bott.w"), p.at("bott.b")));
  for (size_t d = c.depth; d-- > 0;) {
    const std::string name = "dec" + std::to_string(d);
    x = g.upsample2(x);
    x = g.concat_channels(x, skips[d]);
    x = g.relu(g.conv2d(x, p.at(name + ".w"), p.at(name + ".b")));
  }
  return g.conv2d(x, p.at("head.w"), p.at("head.b"));
}

// Discriminator forward pass: probability maps [B,K,H,W] -> domain logits
// [B,2]. The input is expected to be a softmax output (rows sum to 1 over K).
inline Tensor forward_disc(Graph& g, const ModelParams& p,
                           const DiscriminatorConfig& c, const Tensor& probmap) {
  validate(c);
  if (probmap.rank() != 4 || probmap.shape()[1] != c.in_channels ||
      probmap.shape()[2] != c.input_h || probmap.shape()[3] != c.input_w) {
    throw ShapeError("forward_disc", probmap.shape(),
                     Shape{0, c.in_channels, c.input_h, c.input_w});
  }
  Tensor x = probmap;
  for (size_t i = 0; i < c.conv_widths.size(); ++i) {
    const std::string name = "conv" + std::to_string(i);
    x = g.relu(g.conv2d(x, p.at(name + ".w"), p.at(name + ".b")));
    x = g.avgpool2(x);
  }
  const size_t b = probmap.shape()[0];
  x = g.reshape(x, {b, x.size() / b});
  for (size_t i = 0; i < c.fc_widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i);
    x = g.bias_add(g.matmul(x, p.at(name + ".w")), p.at(name + ".b"), 1);
    if (i + 1 < c.fc_widths.size()) x = g.relu(x);
  }
  return x;
}

// ---- checkpoint file -------------------------------------------------------
//
// Layout: magic "SDCK", u16 format version, u32 header length, JSON header
// (kind, config, seed, ordered name->shape table), then each tensor's values
// as raw little-endian f64 in header order. Round trips are bit-exact.

inline constexpr char kCheckpointMagic[4] = {'S', 'D', 'C', 'K'};
inline constexpr uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "segnet" | "discriminator"
  SegNetConfig seg;
  DiscriminatorConfig disc;
  uint64_t seed = 0;
  ModelParams params;
};

namespace detail {

inline nlohmann::ordered_json to_json(const SegNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"widths", c.widths},
          {"depth", c.depth},
          {"kernel", c.kernel}};
}

inline SegNetConfig seg_from_json(const nlohmann::json& j) {
  SegNetConfig c;
  c.in_channels = j.at("in_channels").get<size_t>();
  c.num_classes = j.at("num_classes").get<size_t>();
  c.widths = j.at("widths").get<std::vector<size_t>>();
  c.depth = j.at("depth").get<size_t>();
  c.kernel = j.at("kernel").get<size_t>();
  return c;
}

inline nlohmann::ordered_json to_json(const DiscriminatorConfig& c) {
  return {{"in_channels", c.in_channels},
          {"input_h", c.input_h},
          {"input_w", c.input_w},
          {"conv_widths", c.conv_widths},
          {"fc_widths", c.fc_widths}};
}

inline DiscriminatorConfig disc_from_json(const nlohmann::json& j) {
  DiscriminatorConfig c;
  c.in_channels = j.at("in_channels").get<size_t>();
  c.input_h = j.at("input_h").get<size_t>();
  c.input_w = j.at("input_w").get<size_t>();
  c.conv_widths = j.at("conv_widths").get<std::vector<size_t>>();
  c.fc_widths = j.at("fc_widths").get<std::vector<size_t>>();
  return c;
}

}  // namespace detail

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string());
  nlohmann::ordered_json header;
  header["kind"] = ckpt.kind;
  header["config"] = ckpt.kind == "segnet"
                         ? detail::to_json(ckpt.seg)
                         : detail::to_json(ckpt.disc);
  header["seed"] = ckpt.seed;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& [name, t] : ckpt.params.entries) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
  }
  header["tensors"] = std::move(tensors);
  const std::string hs = header.dump();
  os.write(kCheckpointMagic, 4);
  bytes::put_u16(os, kCheckpointVersion);
  bytes::put_u32(os, static_cast<uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.params.entries) {
    for (double v : t.value()) bytes::put_f64(os, v);
  }
  if (!os) throw CheckpointError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  if (!bytes::get_bytes(is, magic, 4) ||
      std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4)) {
    throw CheckpointError("bad checkpoint magic: " + path.string());
  }
  uint16_t version = 0;
  if (!bytes::get_u16(is, version)) throw CheckpointError("truncated header");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  }
  uint32_t hlen = 0;
  if (!bytes::get_u32(is, hlen)) throw CheckpointError("truncated header");
  std::string hs(hlen, '\0');
  if (!bytes::get_bytes(is, hs.data(), hlen)) {
    throw CheckpointError("truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  if (ckpt.kind == "segnet") {
    ckpt.seg = detail::seg_from_json(header.at("config"));
  } else if (ckpt.kind == "discriminator") {
    ckpt.disc = detail::disc_from_json(header.at("config"));
  } else {
    throw CheckpointError("unknown checkpoint kind '" + ckpt.kind + "'");
  }
  ckpt.seed = header.at("seed").get<uint64_t>();
  ckpt.params.rng_seed = ckpt.seed;
  for (const auto& tj : header.at("tensors")) {
    const auto name = tj.at("name").get<std::string>();
    const auto shape = tj.at("shape").get<Shape>();
    std::vector<double> vals(shape_numel(shape));
    for (double& v : vals) {
      if (!bytes::get_f64(is, v)) {
        throw CheckpointError("truncated tensor data for '" + name + "'");
      }
    }
    ckpt.params.add(name, Tensor::leaf(shape, std::move(vals), true));
  }
  return ckpt;
}

}  // namespace sdda::models
