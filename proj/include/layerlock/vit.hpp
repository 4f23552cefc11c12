#pragma once

// Pre-norm ViT backbone whose trailing blocks double as the decoder.
//
// The encoder is blocks 1..E (E = depth - decoder_blocks). Decoding latents,
// one per grid position, are prepended to the encoder output before the
// trailing blocks run, and the first N output rows are read back as the
// decoded tokens. Patch-wise linear heads map decoded tokens to pixels or to
// the width of a target layer.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "layerlock/data.hpp"
#include "layerlock/rng.hpp"
#include "layerlock/rope.hpp"
#include "layerlock/tensor.hpp"

namespace layerlock {

struct PatchSize {
  std::size_t t = 2, h = 16, w = 16;
  std::size_t volume() const { return t * h * w; }
  friend bool operator==(const PatchSize&, const PatchSize&) = default;
};

struct ModelConfig {
  std::size_t depth = 12;
  std::size_t d_model = 768;
  std::size_t n_heads = 12;
  double mlp_ratio = 4.0;
  PatchSize patch;
  std::size_t decoder_blocks = 4;
  RopeConfig rope;
  VideoDims input;
  /// One learned vector per grid position added after the patch embedding.
  bool learned_pos_embed = false;
  double ln_eps = 1e-6;

  std::size_t encoder_depth() const { return depth - decoder_blocks; }
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(d_model)));
  }
  std::size_t patch_dim() const { return patch.volume() * 3; }
  GridShape grid() const {
    return {input.t / patch.t, input.h / patch.h, input.w / patch.w};
  }
  std::size_t tokens() const { return grid().count(); }

  RopeConfig rope_config() const {
    RopeConfig r = rope;
    r.d_model = d_model;
    return r;
  }

  void validate() const {
    if (depth == 0 || d_model == 0 || n_heads == 0) throw ContractError("model dims must be positive");
    if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
    if (decoder_blocks >= depth) throw ContractError("decoder_blocks must be < depth");
    if (patch.t == 0 || patch.h == 0 || patch.w == 0) throw ContractError("patch dims must be positive");
    if (input.t % patch.t || input.h % patch.h || input.w % patch.w) {
      throw ContractError("input dims must be divisible by the patch size");
    }
    if (mlp_ratio <= 0.0) throw ContractError("mlp_ratio must be positive");
    rope_config().validate();
  }
};

struct LinearParams {
  Tensor weight;  // in x out
  Tensor bias;    // out
};

struct NormParams {
  Tensor gain;
  Tensor bias;
};

struct BlockParams {
  NormParams norm1;
  LinearParams qkv;
  LinearParams proj;
  NormParams norm2;
  LinearParams fc1;
  LinearParams fc2;
};

/// Target of a prediction head: pixels (layer 0) or the output of block k.
struct TargetKind {
  std::size_t layer = 0;
  bool is_pixels() const { return layer == 0; }
  std::string name() const { return layer == 0 ? "pixels" : "layer" + std::to_string(layer); }
  friend bool operator==(const TargetKind&, const TargetKind&) = default;
};

enum class ParamRole { weight, bias, norm };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamRole role = ParamRole::weight;
  /// Which freezable unit owns it: 0 for the stem (embedding, positional
  /// embedding), 1..depth for blocks, -1 for heads and other never-frozen state.
  int block = -1;
};

struct ModelParams {
  LinearParams patch_embed;
  Tensor pos_embed;  // defined only with learned positional embeddings
  std::vector<BlockParams> blocks;
  LinearParams pixel_head;
  std::map<std::size_t, LinearParams> latent_heads;
  std::size_t frozen_prefix = 0;

  /// Deep copy with fresh leaves.
  ModelParams clone() const;
};

namespace detail {

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), true);
}

inline LinearParams init_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  return {init_normal({in, out}, stddev, rng), Tensor::zeros({out}, true)};
}

inline LinearParams zero_linear(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

inline NormParams init_norm(std::size_t d) {
  return {Tensor({d}, std::vector<double>(d, 1.0), true), Tensor::zeros({d}, true)};
}

inline LinearParams clone_linear(const LinearParams& l) { return {l.weight.clone(), l.bias.clone()}; }
inline NormParams clone_norm(const NormParams& n) { return {n.gain.clone(), n.bias.clone()}; }

inline BlockParams init_block(const ModelConfig& cfg, Rng& rng) {
  const auto d = cfg.d_model;
  BlockParams b;
  b.norm1 = init_norm(d);
  b.qkv = init_linear(d, 3 * d, rng);
  b.proj = init_linear(d, d, rng);
  b.norm2 = init_norm(d);
  b.fc1 = init_linear(d, cfg.mlp_hidden(), rng);
  b.fc2 = init_linear(cfg.mlp_hidden(), d, rng);
  return b;
}

inline BlockParams clone_block(const BlockParams& b) {
  return {clone_norm(b.norm1), clone_linear(b.qkv), clone_linear(b.proj),
          clone_norm(b.norm2), clone_linear(b.fc1), clone_linear(b.fc2)};
}

inline void append_linear(std::vector<NamedParam>& out, const std::string& prefix,
                          const LinearParams& l, int block) {
  out.push_back({prefix + ".weight", l.weight, ParamRole::weight, block});
  out.push_back({prefix + ".bias", l.bias, ParamRole::bias, block});
}

inline void append_norm(std::vector<NamedParam>& out, const std::string& prefix,
                        const NormParams& n, int block) {
  out.push_back({prefix + ".gain", n.gain, ParamRole::norm, block});
  out.push_back({prefix + ".bias", n.bias, ParamRole::norm, block});
}

inline void append_block(std::vector<NamedParam>& out, const std::string& prefix,
                         const BlockParams& b, int block) {
  append_norm(out, prefix + ".norm1", b.norm1, block);
  append_linear(out, prefix + ".qkv", b.qkv, block);
  append_linear(out, prefix + ".proj", b.proj, block);
  append_norm(out, prefix + ".norm2", b.norm2, block);
  append_linear(out, prefix + ".fc1", b.fc1, block);
  append_linear(out, prefix + ".fc2", b.fc2, block);
}

}  // namespace detail

inline ModelParams ModelParams::clone() const {
  ModelParams p;
  p.patch_embed = detail::clone_linear(patch_embed);
  if (pos_embed.defined()) p.pos_embed = pos_embed.clone();
  for (const auto& b : blocks) p.blocks.push_back(detail::clone_block(b));
  p.pixel_head = detail::clone_linear(pixel_head);
  for (const auto& [k, h] : latent_heads) p.latent_heads[k] = detail::clone_linear(h);
  p.frozen_prefix = frozen_prefix;
  return p;
}

/// Every parameter tensor with a stable name, in a fixed order.
inline std::vector<NamedParam> named_parameters(const ModelParams& p) {
  std::vector<NamedParam> out;
  detail::append_linear(out, "embed", p.patch_embed, 0);
  if (p.pos_embed.defined()) out.push_back({"pos_embed", p.pos_embed, ParamRole::weight, 0});
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    detail::append_block(out, "blocks." + std::to_string(i + 1), p.blocks[i], static_cast<int>(i + 1));
  detail::append_linear(out, "pixel_head", p.pixel_head, -1);
  for (const auto& [k, h] : p.latent_heads)
    detail::append_linear(out, "latent_head." + std::to_string(k), h, -1);
  return out;
}

inline std::size_t parameter_count(const std::vector<NamedParam>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Raw or embedded tokens for one clip, with their grid coordinates.
struct TokenBatch {
  enum class Kind { raw_patches, embedded };
  Tensor tokens;  // n x width
  std::vector<GridPos> positions;
  Kind kind = Kind::raw_patches;
};

/// Splits a clip into t x h x w patches. Token order is row-major over the
/// patch grid; within a token, values are ordered (dt, dy, dx, channel).
inline TokenBatch patchify(const VideoClip& clip, const PatchSize& ps) {
  const auto& d = clip.dims;
  if (d.t % ps.t || d.h % ps.h || d.w % ps.w) {
    throw DimensionError("patchify: clip dims not divisible by patch size");
  }
  const GridShape grid{d.t / ps.t, d.h / ps.h, d.w / ps.w};
  const std::size_t width = ps.volume() * 3;
  std::vector<double> out(grid.count() * width);
  TokenBatch tb;
  tb.positions.reserve(grid.count());
  for (std::size_t idx = 0; idx < grid.count(); ++idx) {
    const auto g = grid.position(idx);
    tb.positions.push_back(g);
    double* dst = out.data() + idx * width;
    std::size_t o = 0;
    for (std::size_t dt = 0; dt < ps.t; ++dt)
      for (std::size_t dy = 0; dy < ps.h; ++dy)
        for (std::size_t dx = 0; dx < ps.w; ++dx)
          for (std::size_t c = 0; c < 3; ++c)
            dst[o++] = clip.pixel(g.t * ps.t + dt, g.h * ps.h + dy, g.w * ps.w + dx, c);
  }
  tb.tokens = Tensor({grid.count(), width}, std::move(out));
  return tb;
}

/// Inverse of patchify: N x (t*h*w*C) values back to a T x H x W x C array.
inline std::vector<double> unpatchify(std::span<const double> tokens, const VideoDims& dims,
                                      const PatchSize& ps, std::size_t channels = 3) {
  const GridShape grid{dims.t / ps.t, dims.h / ps.h, dims.w / ps.w};
  const std::size_t width = ps.volume() * channels;
  if (tokens.size() != grid.count() * width) throw DimensionError("unpatchify: size mismatch");
  std::vector<double> out(dims.pixels() * channels);
  for (std::size_t idx = 0; idx < grid.count(); ++idx) {
    const auto g = grid.position(idx);
    const double* src = tokens.data() + idx * width;
    std::size_t o = 0;
    for (std::size_t dt = 0; dt < ps.t; ++dt)
      for (std::size_t dy = 0; dy < ps.h; ++dy)
        for (std::size_t dx = 0; dx < ps.w; ++dx)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t t = g.t * ps.t + dt, y = g.h * ps.h + dy, x = g.w * ps.w + dx;
            out[((t * dims.h + y) * dims.w + x) * channels + c] = src[o++];
          }
  }
  return out;
}

struct EncodeResult {
  Tensor embeddings;
  /// Element i is the output of block i + 1 (post second residual add).
  std::vector<Tensor> layer_outputs;
};

/// Architecture plus parameters; owns the shared rotation table.
class VitModel {
 public:
  VitModel() = default;

  VitModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    table_ = std::make_shared<const RotationTable>(cfg_.rope_config(), cfg_.grid());
    Rng rng(derive_seed(init_seed, Stream::init));
    params_.patch_embed = detail::init_linear(cfg_.patch_dim(), cfg_.d_model, rng);
    if (cfg_.learned_pos_embed) {
      params_.pos_embed = detail::init_normal({cfg_.tokens(), cfg_.d_model}, 0.02, rng);
    }
    for (std::size_t i = 0; i < cfg_.depth; ++i) params_.blocks.push_back(detail::init_block(cfg_, rng));
    params_.pixel_head = detail::zero_linear(cfg_.d_model, cfg_.patch_dim());
    build_decoding_tokens();
  }

  // Copies would alias parameter storage; use clone().
  VitModel(const VitModel&) = delete;
  VitModel& operator=(const VitModel&) = delete;
  VitModel(VitModel&&) = default;
  VitModel& operator=(VitModel&&) = default;

  /// Independent deep copy.
  VitModel clone() const {
    VitModel m;
    m.cfg_ = cfg_;
    m.table_ = table_;
    m.params_ = params_.clone();
    m.decoding_tokens_ = decoding_tokens_;
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  const std::shared_ptr<const RotationTable>& rotation_table() const { return table_; }
  const Tensor& decoding_tokens() const { return decoding_tokens_; }
  std::vector<GridPos> grid_positions() const {
    std::vector<GridPos> out;
    const auto g = cfg_.grid();
    for (std::size_t i = 0; i < g.count(); ++i) out.push_back(g.position(i));
    return out;
  }

  /// Head for a target, created zero-initialised on first use.
  LinearParams& head(const TargetKind& target) {
    if (target.is_pixels()) return params_.pixel_head;
    auto it = params_.latent_heads.find(target.layer);
    if (it == params_.latent_heads.end()) {
      it = params_.latent_heads.emplace(target.layer, detail::zero_linear(cfg_.d_model, cfg_.d_model)).first;
    }
    return it->second;
  }
  bool has_head(const TargetKind& target) const {
    return target.is_pixels() || params_.latent_heads.count(target.layer) != 0;
  }

  /// Linear patch embedding (+ learned position embedding when configured).
  Tensor embed(const TokenBatch& raw) const {
    if (raw.kind != TokenBatch::Kind::raw_patches) throw ContractError("embed expects raw patches");
    Tensor x = linear(raw.tokens, params_.patch_embed.weight, params_.patch_embed.bias);
    if (params_.pos_embed.defined()) {
      std::vector<std::size_t> idx;
      for (const auto& p : raw.positions) idx.push_back(cfg_.grid().index(p));
      x = add(x, gather_rows(params_.pos_embed, idx));
    } else if (cfg_.rope.site == RopeSite::none) {
      // Without rotations, position enters as the additive fixed code.
      std::vector<std::size_t> idx;
      for (const auto& p : raw.positions) idx.push_back(cfg_.grid().index(p));
      x = add(x, gather_rows(decoding_tokens_, idx));
    }
    return x;
  }

  /// One pre-norm transformer block over the rows of x.
  Tensor block_forward(const Tensor& x, const BlockParams& b, std::span<const GridPos> positions) const {
    const auto d = cfg_.d_model, hd = cfg_.head_dim();
    Tensor h = layer_norm(x, b.norm1.gain, b.norm1.bias, cfg_.ln_eps);
    const bool rope_post_norm = cfg_.rope.site == RopeSite::post_first_norm && !cfg_.learned_pos_embed;
    const bool rope_qk = cfg_.rope.site == RopeSite::attention_qk && !cfg_.learned_pos_embed;
    if (rope_post_norm) h = apply_rope(h, table_, positions);
    Tensor qkv = linear(h, b.qkv.weight, b.qkv.bias);
    Tensor q = slice_cols(qkv, 0, d), k = slice_cols(qkv, d, d), v = slice_cols(qkv, 2 * d, d);
    if (rope_qk) {
      q = apply_rope(q, table_, positions);
      k = apply_rope(k, table_, positions);
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    heads.reserve(cfg_.n_heads);
    for (std::size_t i = 0; i < cfg_.n_heads; ++i) {
      Tensor qh = slice_cols(q, i * hd, hd), kh = slice_cols(k, i * hd, hd), vh = slice_cols(v, i * hd, hd);
      Tensor att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
      heads.push_back(matmul(att, vh));
    }
    Tensor attn = cfg_.n_heads == 1 ? heads[0] : concat_cols(heads);
    Tensor x1 = add(x, linear(attn, b.proj.weight, b.proj.bias));
    Tensor h2 = layer_norm(x1, b.norm2.gain, b.norm2.bias, cfg_.ln_eps);
    Tensor m = linear(gelu(linear(h2, b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias);
    return add(x1, m);
  }

  /// Runs embed + blocks 1..E. The stem and blocks <= freeze_layer run without
  /// recording a graph.
  EncodeResult encode(const TokenBatch& raw, std::size_t freeze_layer, bool record_layers) const {
    return encode_prefix(raw, cfg_.encoder_depth(), freeze_layer, record_layers);
  }

  /// As encode, but stops after block `last_block`.
  EncodeResult encode_prefix(const TokenBatch& raw, std::size_t last_block, std::size_t freeze_layer,
                             bool record_layers) const {
    if (freeze_layer > cfg_.encoder_depth()) throw ContractError("freeze_layer exceeds encoder depth");
    if (last_block > cfg_.encoder_depth()) throw ContractError("encode past the encoder");
    EncodeResult r;
    Tensor x;
    {
      std::optional<NoGradGuard> guard;
      if (freeze_layer >= 1) guard.emplace();
      x = embed(raw);
    }
    for (std::size_t l = 1; l <= last_block; ++l) {
      std::optional<NoGradGuard> guard;
      if (l <= freeze_layer) guard.emplace();
      x = block_forward(x, params_.blocks[l - 1], raw.positions);
      if (record_layers) r.layer_outputs.push_back(x);
    }
    r.embeddings = x;
    return r;
  }

  /// Prepends the decoding latents to the context, runs the decoder blocks and
  /// returns the latent rows.
  Tensor decode(const Tensor& context, std::span<const GridPos> context_positions,
                const Tensor& latents, std::span<const GridPos> latent_positions) const {
    std::vector<GridPos> pos(latent_positions.begin(), latent_positions.end());
    pos.insert(pos.end(), context_positions.begin(), context_positions.end());
    Tensor x = context.rows() == 0 ? latents : concat_rows({latents, context});
    for (std::size_t l = cfg_.encoder_depth() + 1; l <= cfg_.depth; ++l) {
      x = block_forward(x, params_.blocks[l - 1], pos);
    }
    return slice_rows(x, 0, latents.rows());
  }

  Tensor predict(const Tensor& out_tokens, const TargetKind& target) {
    auto& h = head(target);
    return linear(out_tokens, h.weight, h.bias);
  }

  Tensor predict(const Tensor& out_tokens, const TargetKind& target) const {
    if (!has_head(target)) throw ContractError("no head for target " + target.name());
    const auto& h = target.is_pixels() ? params_.pixel_head : params_.latent_heads.at(target.layer);
    return linear(out_tokens, h.weight, h.bias);
  }

 private:
  void build_decoding_tokens() {
    const auto g = cfg_.grid();
    const double u = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    std::vector<double> base(g.count() * cfg_.d_model, u);
    Tensor ones({g.count(), cfg_.d_model}, std::move(base));
    const auto pos = grid_positions();
    decoding_tokens_ = stop_gradient(apply_rope(ones, table_, pos));
  }

  ModelConfig cfg_;
  std::shared_ptr<const RotationTable> table_;
  ModelParams params_;
  Tensor decoding_tokens_;
};

/// Rotation-coded decoding latents for every grid position.
inline TokenBatch decoding_tokens(const VitModel& model) {
  TokenBatch tb;
  tb.tokens = model.decoding_tokens();
  tb.positions = model.grid_positions();
  tb.kind = TokenBatch::Kind::embedded;
  return tb;
}

}  // namespace layerlock
