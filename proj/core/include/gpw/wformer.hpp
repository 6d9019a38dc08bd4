#pragma once

// Wavelet Transformer head. Patches of one group are embedded through a
// channel-reducing 1×1 conv and a Haar level, attended with keys/values that
// are themselves wavelet-reduced to a quarter of the sequence length, and
// restored with the inverse transform.

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gpw/ndgrad.hpp"
#include "gpw/parameters.hpp"

namespace gpw::wformer {

using nd::Tensor;

// How K and V are shortened to L/4 tokens.
enum class KvDownsample {
  none,          // plain self-attention
  wavelet,       // 1×1 d→d/4, one Haar level, subband concat
  avg_pool,      // 2×2 mean pooling
  learned_conv,  // learned 2×2 stride-2 conv
};

std::string_view to_string(KvDownsample mode);
KvDownsample parse_kv_downsample(std::string_view text);
// Whether the reduction can be inverted without loss.
bool perfectly_reconstructs(KvDownsample mode);

struct WFormerConfig {
  std::size_t d_model = 32;
  std::size_t heads = 2;
  std::size_t layers = 3;
  std::size_t mlp_ratio = 2;
  KvDownsample kv = KvDownsample::wavelet;

  std::size_t head_dim() const { return d_model / heads; }
  void validate() const;
};

// `segments` blocks of grid_h×grid_w tokens laid out row-major, one block
// per patch.
struct TokenSequence {
  Tensor tokens;  // [L, d]
  std::size_t segments = 1;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t length() const { return segments * grid_h * grid_w; }
  std::size_t width() const { return tokens.extent(1); }
  TokenSequence with_tokens(Tensor t) const { return {std::move(t), segments, grid_h, grid_w}; }
};

struct AttentionParams {
  Tensor w_q, w_k, w_v;  // [d, head_dim]
  Tensor reduce_k, reduce_v;  // conv kernels, undefined for none/avg_pool
};

struct WmsaParams {
  std::vector<AttentionParams> heads;
  Tensor w_o;  // [d, d]
};

struct EncoderLayerParams {
  Tensor ln1_gamma, ln1_beta;
  WmsaParams attention;
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// One WFormer head: embedding, encoder stack and restoration.
struct HeadParams {
  Tensor embed_kernel;    // [C/4, C, 1, 1]
  Tensor embed_bias;      // [C/4]
  Tensor positional;      // [max_tokens, C]
  std::vector<EncoderLayerParams> layers;
  Tensor restore_kernel;  // [C, C/4, 1, 1]
  Tensor restore_bias;    // [C]
};

AttentionParams make_attention(std::size_t d_model, std::size_t head_dim,
                               KvDownsample kv, std::mt19937_64& rng,
                               nd::ParameterSet& store, const std::string& prefix);
WmsaParams make_wmsa(const WFormerConfig& cfg, std::mt19937_64& rng,
                     nd::ParameterSet& store, const std::string& prefix);
HeadParams make_head(const WFormerConfig& cfg, std::size_t max_tokens,
                     std::mt19937_64& rng, nd::ParameterSet& store,
                     const std::string& prefix);

// Shape of the patches a sequence was built from.
struct GroupLayout {
  std::size_t patches = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Patches [1,C,h,w] (same shape, h and w even, C divisible by 4) to tokens
// [P*(h/2)*(w/2), C] with positional embedding added.
TokenSequence embed_group(const std::vector<Tensor>& patches, const HeadParams& head,
                          GroupLayout* layout = nullptr);

// softmax(Q K̆ᵀ/√d_head) V̆ for one head, without the residual. When
// `weights` is given it receives the attention matrix [L, L/4] (or [L, L]).
Tensor attention_delta(const TokenSequence& y, const AttentionParams& params,
                       KvDownsample kv, Tensor* weights = nullptr);

// y + attention_delta(y); the head width must equal the token width.
TokenSequence wsa(const TokenSequence& y, const AttentionParams& params,
                  KvDownsample kv);

// concat_i(attention_delta_i(y)) · W_O, the multi-head update without residual.
Tensor wmsa_delta(const TokenSequence& y, const WmsaParams& params, KvDownsample kv);

// y + wmsa_delta(y).
TokenSequence wmsa(const TokenSequence& y, const WmsaParams& params, KvDownsample kv);

// Pre-layernorm blocks: x += WMSA(LN(x)); x += MLP(LN(x)).
TokenSequence encoder(const TokenSequence& y, const WFormerConfig& cfg,
                      const std::vector<EncoderLayerParams>& layers);

// Tokens back to patches [1,C,h,w] via inverse Haar and a 1×1 conv C/4→C.
std::vector<Tensor> restore(const TokenSequence& y, const HeadParams& head,
                            const GroupLayout& layout);

// embed_group → encoder → restore.
std::vector<Tensor> run_head(const std::vector<Tensor>& patches, const HeadParams& head,
                             const WFormerConfig& cfg);

}  // namespace gpw::wformer
