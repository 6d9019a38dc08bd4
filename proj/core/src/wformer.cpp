#include "gpw/wformer.hpp"

#include <array>
#include <cmath>

#include "gpw/wavelet.hpp"

namespace gpw::wformer {

namespace {

constexpr std::array<std::size_t, 4> kNhwcToNchw{0, 3, 1, 2};
constexpr std::array<std::size_t, 4> kNchwToNhwc{0, 2, 3, 1};

// [S*h*w, d] -> [S, d, h, w]
Tensor fold(const Tensor& tokens, std::size_t segments, std::size_t h, std::size_t w) {
  const std::size_t d = tokens.extent(1);
  return nd::permute(nd::reshape(tokens, {segments, h, w, d}), kNhwcToNchw);
}

// [S, d, h, w] -> [S*h*w, d]
Tensor unfold(const Tensor& map) {
  const std::size_t s = map.extent(0), d = map.extent(1);
  const std::size_t h = map.extent(2), w = map.extent(3);
  return nd::reshape(nd::permute(map, kNchwToNhwc), {s * h * w, d});
}

Tensor reduce_sequence(const Tensor& x, const TokenSequence& geom, const Tensor& kernel,
                       KvDownsample kv) {
  if (kv == KvDownsample::none) return x;
  if (geom.grid_h % 2 != 0 || geom.grid_w % 2 != 0) {
    throw ContractError("wsa: token grid " + std::to_string(geom.grid_h) + "x" +
                        std::to_string(geom.grid_w) + " must have even extents");
  }
  Tensor map = fold(x, geom.segments, geom.grid_h, geom.grid_w);
  switch (kv) {
    case KvDownsample::wavelet:
      map = wavelet::dwt_concat(nd::conv2d(map, kernel));
      break;
    case KvDownsample::avg_pool:
      map = nd::avg_pool2d(map, 2, 2);
      break;
    case KvDownsample::learned_conv:
      map = nd::conv2d(map, kernel, Tensor{}, nd::Conv2dOptions{2, 0, 1});
      break;
    case KvDownsample::none:
      break;
  }
  return unfold(map);
}

Tensor reduce_kernel(std::size_t head_dim, KvDownsample kv, std::mt19937_64& rng,
                     nd::ParameterSet& store, const std::string& name) {
  switch (kv) {
    case KvDownsample::wavelet:
      return store.normal(name, {head_dim / 4, head_dim, 1, 1}, rng,
                          1.0 / std::sqrt(static_cast<double>(head_dim)));
    case KvDownsample::learned_conv:
      return store.normal(name, {head_dim, head_dim, 2, 2}, rng,
                          1.0 / std::sqrt(4.0 * static_cast<double>(head_dim)));
    case KvDownsample::none:
    case KvDownsample::avg_pool:
      break;
  }
  return {};
}

}  // namespace

std::string_view to_string(KvDownsample mode) {
  switch (mode) {
    case KvDownsample::none: return "none";
    case KvDownsample::wavelet: return "wavelet";
    case KvDownsample::avg_pool: return "avg_pool";
    case KvDownsample::learned_conv: return "learned_conv";
  }
  return "wavelet";
}

KvDownsample parse_kv_downsample(std::string_view text) {
  if (text == "none") return KvDownsample::none;
  if (text == "wavelet") return KvDownsample::wavelet;
  if (text == "avg_pool" || text == "avg-pool") return KvDownsample::avg_pool;
  if (text == "learned_conv" || text == "learned-conv") return KvDownsample::learned_conv;
  throw ConfigError("unknown K/V downsampling '" + std::string(text) + "'");
}

bool perfectly_reconstructs(KvDownsample mode) {
  return mode == KvDownsample::wavelet || mode == KvDownsample::none;
}

void WFormerConfig::validate() const {
  if (layers < 1) throw ContractError("WFormerConfig: layers must be at least 1");
  if (heads == 0 || d_model % heads != 0) {
    throw ContractError("WFormerConfig: d_model " + std::to_string(d_model) +
                        " not divisible by heads " + std::to_string(heads));
  }
  if (d_model % 4 != 0) throw ContractError("WFormerConfig: d_model must be divisible by 4");
  if (kv == KvDownsample::wavelet && head_dim() % 4 != 0) {
    throw ContractError("WFormerConfig: wavelet K/V reduction needs head width divisible by 4");
  }
  if (mlp_ratio == 0) throw ContractError("WFormerConfig: mlp_ratio must be positive");
}

// ---- parameters ------------------------------------------------------------

AttentionParams make_attention(std::size_t d_model, std::size_t head_dim,
                               KvDownsample kv, std::mt19937_64& rng,
                               nd::ParameterSet& store, const std::string& prefix) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
  AttentionParams p;
  p.w_q = store.normal(prefix + ".w_q", {d_model, head_dim}, rng, sd);
  p.w_k = store.normal(prefix + ".w_k", {d_model, head_dim}, rng, sd);
  p.w_v = store.normal(prefix + ".w_v", {d_model, head_dim}, rng, sd);
  p.reduce_k = reduce_kernel(head_dim, kv, rng, store, prefix + ".reduce_k");
  p.reduce_v = reduce_kernel(head_dim, kv, rng, store, prefix + ".reduce_v");
  return p;
}

WmsaParams make_wmsa(const WFormerConfig& cfg, std::mt19937_64& rng,
                     nd::ParameterSet& store, const std::string& prefix) {
  WmsaParams p;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    p.heads.push_back(make_attention(cfg.d_model, cfg.head_dim(), cfg.kv, rng, store,
                                     prefix + ".head" + std::to_string(h)));
  }
  p.w_o = store.normal(prefix + ".w_o", {cfg.d_model, cfg.d_model}, rng,
                       1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  return p;
}

HeadParams make_head(const WFormerConfig& cfg, std::size_t max_tokens,
                     std::mt19937_64& rng, nd::ParameterSet& store,
                     const std::string& prefix) {
  cfg.validate();
  const std::size_t c = cfg.d_model, q = c / 4, hidden = cfg.mlp_ratio * c;
  HeadParams h;
  h.embed_kernel = store.normal(prefix + ".embed.kernel", {q, c, 1, 1}, rng,
                                1.0 / std::sqrt(static_cast<double>(c)));
  h.embed_bias = store.constant(prefix + ".embed.bias", {q}, 0.0);
  h.positional = store.normal(prefix + ".positional", {max_tokens, c}, rng, 0.02);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    EncoderLayerParams layer;
    layer.ln1_gamma = store.constant(lp + ".ln1.gamma", {c}, 1.0);
    layer.ln1_beta = store.constant(lp + ".ln1.beta", {c}, 0.0);
    layer.attention = make_wmsa(cfg, rng, store, lp + ".wmsa");
    layer.ln2_gamma = store.constant(lp + ".ln2.gamma", {c}, 1.0);
    layer.ln2_beta = store.constant(lp + ".ln2.beta", {c}, 0.0);
    layer.mlp_w1 = store.normal(lp + ".mlp.w1", {c, hidden}, rng,
                                1.0 / std::sqrt(static_cast<double>(c)));
    layer.mlp_b1 = store.constant(lp + ".mlp.b1", {hidden}, 0.0);
    layer.mlp_w2 = store.normal(lp + ".mlp.w2", {hidden, c}, rng,
                                1.0 / std::sqrt(static_cast<double>(hidden)));
    layer.mlp_b2 = store.constant(lp + ".mlp.b2", {c}, 0.0);
    h.layers.push_back(std::move(layer));
  }
  h.restore_kernel = store.normal(prefix + ".restore.kernel", {c, q, 1, 1}, rng,
                                  1.0 / std::sqrt(static_cast<double>(q)));
  h.restore_bias = store.constant(prefix + ".restore.bias", {c}, 0.0);
  return h;
}

// ---- forward ---------------------------------------------------------------

TokenSequence embed_group(const std::vector<Tensor>& patches, const HeadParams& head,
                          GroupLayout* layout) {
  if (patches.empty()) throw ContractError("embed_group: empty group");
  const nd::Shape& ref = patches.front().shape();
  if (ref.size() != 4 || ref[0] != 1) {
    throw ContractError("embed_group: patches must be [1,C,h,w], got " + nd::to_string(ref));
  }
  for (const auto& p : patches) {
    if (p.shape() != ref) {
      throw DimensionError("embed_group: patch shapes differ: " + nd::to_string(ref) +
                           " vs " + nd::to_string(p.shape()));
    }
  }
  const std::size_t c = ref[1], h = ref[2], w = ref[3];
  if (c % 4 != 0) {
    throw ContractError("embed_group: channel count " + std::to_string(c) +
                        " not divisible by 4");
  }
  if (h % 2 != 0 || w % 2 != 0) {
    throw ContractError("embed_group: patch extents must be even, got " + nd::to_string(ref));
  }
  if (head.embed_kernel.extent(1) != c) {
    throw DimensionError("embed_group: head expects " +
                         std::to_string(head.embed_kernel.extent(1)) + " channels, patches have " +
                         std::to_string(c));
  }
  Tensor stacked = patches.size() == 1 ? patches.front() : nd::concat(patches, 0);
  Tensor reduced = nd::conv2d(stacked, head.embed_kernel, head.embed_bias);
  Tensor tokens = unfold(wavelet::dwt_concat(reduced));
  const std::size_t length = tokens.extent(0);
  if (length > head.positional.extent(0)) {
    throw ContractError("embed_group: " + std::to_string(length) +
                        " tokens exceed positional table of " +
                        std::to_string(head.positional.extent(0)));
  }
  Tensor pos = length == head.positional.extent(0)
                   ? head.positional
                   : nd::slice(head.positional, 0, 0, length);
  if (layout != nullptr) *layout = GroupLayout{patches.size(), c, h, w};
  return TokenSequence{nd::add(tokens, pos), patches.size(), h / 2, w / 2};
}

Tensor attention_delta(const TokenSequence& y, const AttentionParams& params,
                       KvDownsample kv, Tensor* weights) {
  if (y.tokens.rank() != 2 || y.tokens.extent(0) != y.length()) {
    throw ContractError("attention: token tensor " + nd::to_string(y.tokens.shape()) +
                        " does not match its grid");
  }
  const Tensor q = nd::matmul(y.tokens, params.w_q);
  const Tensor k = reduce_sequence(nd::matmul(y.tokens, params.w_k), y, params.reduce_k, kv);
  const Tensor v = reduce_sequence(nd::matmul(y.tokens, params.w_v), y, params.reduce_v, kv);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.extent(1)));
  const Tensor kt = nd::transpose(k);
  Tensor logits;
  {
    nd::AttentionRegion region;
    logits = nd::matmul(q, kt);
  }
  const Tensor attn = nd::softmax_rows(nd::scale(logits, inv_sqrt_d));
  if (weights != nullptr) *weights = attn;
  nd::AttentionRegion region;
  return nd::matmul(attn, v);
}

TokenSequence wsa(const TokenSequence& y, const AttentionParams& params, KvDownsample kv) {
  if (params.w_v.extent(1) != y.width()) {
    throw ContractError("wsa: head width " + std::to_string(params.w_v.extent(1)) +
                        " differs from token width " + std::to_string(y.width()));
  }
  return y.with_tokens(nd::add(y.tokens, attention_delta(y, params, kv)));
}

Tensor wmsa_delta(const TokenSequence& y, const WmsaParams& params, KvDownsample kv) {
  if (params.heads.empty()) throw ContractError("wmsa: no heads");
  std::vector<Tensor> parts;
  parts.reserve(params.heads.size());
  for (const auto& h : params.heads) parts.push_back(attention_delta(y, h, kv));
  Tensor joined = parts.size() == 1 ? parts.front() : nd::concat(parts, 1);
  if (joined.extent(1) != params.w_o.extent(0)) {
    throw ContractError("wmsa: concatenated head width " + std::to_string(joined.extent(1)) +
                        " does not match W_O " + nd::to_string(params.w_o.shape()));
  }
  return nd::matmul(joined, params.w_o);
}

TokenSequence wmsa(const TokenSequence& y, const WmsaParams& params, KvDownsample kv) {
  return y.with_tokens(nd::add(y.tokens, wmsa_delta(y, params, kv)));
}

TokenSequence encoder(const TokenSequence& y, const WFormerConfig& cfg,
                      const std::vector<EncoderLayerParams>& layers) {
  cfg.validate();
  if (layers.size() != cfg.layers) {
    throw ContractError("encoder: config asks for " + std::to_string(cfg.layers) +
                        " layers, " + std::to_string(layers.size()) + " provided");
  }
  Tensor x = y.tokens;
  for (const auto& layer : layers) {
    const TokenSequence normed =
        y.with_tokens(nd::layernorm_rows(x, layer.ln1_gamma, layer.ln1_beta));
    x = nd::add(x, wmsa_delta(normed, layer.attention, cfg.kv));
    Tensor hidden = nd::layernorm_rows(x, layer.ln2_gamma, layer.ln2_beta);
    hidden = nd::gelu(nd::linear(hidden, layer.mlp_w1, layer.mlp_b1));
    x = nd::add(x, nd::linear(hidden, layer.mlp_w2, layer.mlp_b2));
  }
  return y.with_tokens(x);
}

std::vector<Tensor> restore(const TokenSequence& y, const HeadParams& head,
                            const GroupLayout& layout) {
  if (layout.patches != y.segments || layout.height != 2 * y.grid_h ||
      layout.width != 2 * y.grid_w || layout.channels != y.width()) {
    throw ContractError("restore: sequence of " + std::to_string(y.segments) + " segments " +
                        std::to_string(y.grid_h) + "x" + std::to_string(y.grid_w) +
                        " does not match recorded layout");
  }
  Tensor map = fold(y.tokens, y.segments, y.grid_h, y.grid_w);
  Tensor spatial = nd::conv2d(wavelet::iwt_concat(map), head.restore_kernel, head.restore_bias);
  std::vector<Tensor> out;
  out.reserve(layout.patches);
  if (layout.patches == 1) {
    out.push_back(spatial);
  } else {
    for (std::size_t p = 0; p < layout.patches; ++p) out.push_back(nd::slice(spatial, 0, p, 1));
  }
  return out;
}

std::vector<Tensor> run_head(const std::vector<Tensor>& patches, const HeadParams& head,
                             const WFormerConfig& cfg) {
  GroupLayout layout;
  const TokenSequence tokens = embed_group(patches, head, &layout);
  return restore(encoder(tokens, cfg, head.layers), head, layout);
}

}  // namespace gpw::wformer
