#include <cmath>
#include <random>

#include "doctest.h"
#include "gpw/wformer.hpp"
#include "gradcheck.hpp"

using namespace gpw;
using namespace gpw::wformer;
using nd::Tensor;

namespace {

using Mat = std::vector<double>;  // row-major

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Mat mm(const Mat& a, const Mat& b, std::size_t m, std::size_t k, std::size_t n) {
  Mat c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

Mat ref_layernorm(const Mat& x, std::size_t rows, std::size_t cols, const Mat& g, const Mat& b) {
  Mat y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x[r * cols + c];
    mu /= static_cast<double>(cols);
    for (std::size_t c = 0; c < cols; ++c) var += std::pow(x[r * cols + c] - mu, 2);
    var /= static_cast<double>(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      y[r * cols + c] = (x[r * cols + c] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
  }
  return y;
}

// Tokens [S*gh*gw, d] of one segment grid → [S*(gh/2)*(gw/2), 4*(d/4)] after a
// 1×1 channel map [d/4, d] and a Haar level. Token t = (s, i, j) row-major.
Mat ref_wavelet_reduce(const Mat& x, std::size_t segs, std::size_t gh, std::size_t gw,
                       std::size_t d, const Mat& kernel) {
  const std::size_t q = d / 4, h2 = gh / 2, w2 = gw / 2;
  Mat reduced(segs * gh * gw * q, 0.0);
  for (std::size_t t = 0; t < segs * gh * gw; ++t)
    for (std::size_t o = 0; o < q; ++o)
      for (std::size_t c = 0; c < d; ++c) reduced[t * q + o] += kernel[o * d + c] * x[t * d + c];
  Mat out(segs * h2 * w2 * 4 * q);
  for (std::size_t s = 0; s < segs; ++s)
    for (std::size_t i = 0; i < h2; ++i)
      for (std::size_t j = 0; j < w2; ++j)
        for (std::size_t c = 0; c < q; ++c) {
          auto at = [&](std::size_t y, std::size_t xx) { return reduced[((s * gh + y) * gw + xx) * q + c]; };
          const double a = at(2 * i, 2 * j), b = at(2 * i, 2 * j + 1), cc = at(2 * i + 1, 2 * j),
                       dd = at(2 * i + 1, 2 * j + 1);
          const std::size_t t = (s * h2 + i) * w2 + j;
          out[t * 4 * q + 0 * q + c] = 0.5 * (a + b + cc + dd);
          out[t * 4 * q + 1 * q + c] = 0.5 * (a + b - cc - dd);
          out[t * 4 * q + 2 * q + c] = 0.5 * (a - b + cc - dd);
          out[t * 4 * q + 3 * q + c] = 0.5 * (a - b - cc + dd);
        }
  return out;
}

Mat ref_attention(const Mat& x, std::size_t segs, std::size_t gh, std::size_t gw, std::size_t d,
                  const AttentionParams& p) {
  const std::size_t len = segs * gh * gw, hd = p.w_q.extent(1), lk = len / 4;
  const Mat q = mm(x, vec(p.w_q), len, d, hd);
  const Mat k = ref_wavelet_reduce(mm(x, vec(p.w_k), len, d, hd), segs, gh, gw, hd, vec(p.reduce_k));
  const Mat v = ref_wavelet_reduce(mm(x, vec(p.w_v), len, d, hd), segs, gh, gw, hd, vec(p.reduce_v));
  Mat out(len * hd, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<double> s(lk);
    double mx = -1e300;
    for (std::size_t j = 0; j < lk; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < hd; ++c) dot += q[i * hd + c] * k[j * hd + c];
      s[j] = dot / std::sqrt(static_cast<double>(hd));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < lk; ++j)
      for (std::size_t c = 0; c < hd; ++c) out[i * hd + c] += s[j] / z * v[j * hd + c];
  }
  return out;
}

Mat ref_layer(const Mat& x, std::size_t segs, std::size_t gh, std::size_t gw, std::size_t d,
              const EncoderLayerParams& l) {
  const std::size_t len = segs * gh * gw;
  const Mat n1 = ref_layernorm(x, len, d, vec(l.ln1_gamma), vec(l.ln1_beta));
  Mat joined(len * d);
  std::size_t off = 0;
  for (const auto& h : l.attention.heads) {
    const Mat part = ref_attention(n1, segs, gh, gw, d, h);
    const std::size_t hd = h.w_q.extent(1);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < hd; ++c) joined[t * d + off + c] = part[t * hd + c];
    off += hd;
  }
  const Mat upd = mm(joined, vec(l.attention.w_o), len, d, d);
  Mat y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + upd[i];
  const Mat n2 = ref_layernorm(y, len, d, vec(l.ln2_gamma), vec(l.ln2_beta));
  const std::size_t hid = l.mlp_w1.extent(1);
  Mat h1 = mm(n2, vec(l.mlp_w1), len, d, hid);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < hid; ++c) {
      double& v = h1[t * hid + c];
      v += l.mlp_b1.values()[c];
      v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    }
  const Mat h2 = mm(h1, vec(l.mlp_w2), len, hid, d);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < d; ++c) y[t * d + c] += h2[t * d + c] + l.mlp_b2.values()[c];
  return y;
}

void fill(Tensor& t, double v) {
  for (double& x : t.mutable_values()) x = v;
}

void zero_encoder(HeadParams& head) {
  for (auto& l : head.layers) {
    for (auto& h : l.attention.heads) {
      for (Tensor* t : {&h.w_q, &h.w_k, &h.w_v, &h.reduce_k, &h.reduce_v}) {
        if (t->defined()) fill(*t, 0.0);
      }
    }
    fill(l.attention.w_o, 0.0);
    fill(l.mlp_w1, 0.0);
    fill(l.mlp_w2, 0.0);
  }
}

}  // namespace

TEST_CASE("config validation") {
  WFormerConfig cfg;
  cfg.layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = WFormerConfig{};
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = WFormerConfig{};
  cfg.d_model = 8;
  cfg.heads = 4;  // head width 2 cannot be wavelet-reduced
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  CHECK(parse_kv_downsample("avg-pool") == KvDownsample::avg_pool);
  CHECK_THROWS_AS(parse_kv_downsample("max"), ConfigError);
}

TEST_CASE("embed_group shapes") {
  std::mt19937_64 rng(31);
  nd::ParameterSet store;
  WFormerConfig cfg{4, 1, 1, 2, KvDownsample::wavelet};
  const HeadParams head = make_head(cfg, 16, rng, store, "h");
  GroupLayout layout;
  const auto one = embed_group({Tensor::randn({1, 4, 4, 4}, rng)}, head, &layout);
  CHECK(one.tokens.shape() == nd::Shape{4, 4});
  CHECK(layout.patches == 1);

  const Tensor a = Tensor::randn({1, 4, 4, 4}, rng), b = Tensor::randn({1, 4, 4, 4}, rng);
  const auto two = embed_group({a, b}, head);
  CHECK(two.tokens.shape() == nd::Shape{8, 4});
  CHECK(two.segments == 2);
  // Patch order preserved: first four tokens equal the single-patch embedding of a.
  const auto first = embed_group({a}, head);
  CHECK(max_abs_diff(vec(nd::slice(two.tokens, 0, 0, 4)), vec(first.tokens)) == 0.0);

  CHECK_THROWS_AS(embed_group({}, head), ContractError);
  CHECK_THROWS_AS(embed_group({Tensor::zeros({1, 4, 3, 4})}, head), ContractError);
  CHECK_THROWS_AS(embed_group({a, Tensor::zeros({1, 4, 2, 2})}, head), DimensionError);
  CHECK_THROWS_AS(embed_group({Tensor::zeros({1, 4, 4, 4}), a, b, a, b}, head), ContractError);
}

TEST_CASE("constant patch has empty detail channels") {
  std::mt19937_64 rng(32);
  nd::ParameterSet store;
  WFormerConfig cfg{8, 1, 1, 2, KvDownsample::wavelet};
  HeadParams head = make_head(cfg, 16, rng, store, "h");
  fill(head.positional, 0.0);
  const auto seq = embed_group({Tensor::full({1, 8, 4, 4}, 1.5)}, head);
  // Token channels: [ll(2), lh(2), hl(2), hh(2)].
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 2; c < 8; ++c) CHECK(seq.tokens.values()[t * 8 + c] == doctest::Approx(0.0).epsilon(1e-14));
  }
}

TEST_CASE("zero value path gives the identity") {
  std::mt19937_64 rng(33);
  nd::ParameterSet store;
  AttentionParams p = make_attention(16, 16, KvDownsample::wavelet, rng, store, "a");
  fill(p.w_v, 0.0);
  const TokenSequence y{Tensor::randn({64, 16}, rng), 1, 8, 8};
  CHECK(vec(wsa(y, p, KvDownsample::wavelet).tokens) == vec(y.tokens));
}

TEST_CASE("attention shapes and operation counts") {
  std::mt19937_64 rng(34);
  nd::ParameterSet store;
  const TokenSequence y{Tensor::randn({64, 16}, rng), 1, 8, 8};
  const AttentionParams reduced = make_attention(16, 16, KvDownsample::wavelet, rng, store, "r");
  const AttentionParams plain = make_attention(16, 16, KvDownsample::none, rng, store, "p");
  Tensor weights;
  const auto cw = nd::counter_scope([&] { (void)attention_delta(y, reduced, KvDownsample::wavelet, &weights); });
  CHECK(weights.shape() == nd::Shape{64, 16});
  for (std::size_t i = 0; i < 64; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) s += weights.values()[i * 16 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  const auto cp = nd::counter_scope([&] { (void)attention_delta(y, plain, KvDownsample::none, &weights); });
  CHECK(weights.shape() == nd::Shape{64, 64});
  CHECK(cw.attention_mul_adds == 2u * 64 * 16 * 16);
  CHECK(cp.attention_mul_adds == 2u * 64 * 64 * 16);
  CHECK(static_cast<double>(cw.attention_mul_adds) / static_cast<double>(cp.attention_mul_adds) == 0.25);
  for (KvDownsample kv : {KvDownsample::avg_pool, KvDownsample::learned_conv}) {
    const AttentionParams other = make_attention(16, 16, kv, rng, store, std::string("o") + std::string(to_string(kv)));
    (void)attention_delta(y, other, kv, &weights);
    CHECK(weights.shape() == nd::Shape{64, 16});
  }
}

TEST_CASE("attention matches the loop reference") {
  std::mt19937_64 rng(35);
  nd::ParameterSet store;
  const AttentionParams p = make_attention(8, 8, KvDownsample::wavelet, rng, store, "a");
  const Tensor x = Tensor::randn({2 * 16, 8}, rng);
  const TokenSequence y{x, 2, 4, 4};
  const auto want = ref_attention(vec(x), 2, 4, 4, 8, p);
  CHECK(max_abs_diff(vec(attention_delta(y, p, KvDownsample::wavelet)), want) < 1e-12);
}

TEST_CASE("single head with identity output projection equals wsa") {
  std::mt19937_64 rng(36);
  nd::ParameterSet store;
  WFormerConfig cfg{8, 1, 1, 2, KvDownsample::wavelet};
  WmsaParams p = make_wmsa(cfg, rng, store, "m");
  fill(p.w_o, 0.0);
  for (std::size_t i = 0; i < 8; ++i) p.w_o.mutable_values()[i * 8 + i] = 1.0;
  const TokenSequence y{Tensor::randn({16, 8}, rng), 1, 4, 4};
  CHECK(max_abs_diff(vec(wmsa(y, p, cfg.kv).tokens), vec(wsa(y, p.heads[0], cfg.kv).tokens)) < 1e-14);
}

TEST_CASE("encoder with zero weights adds only the output bias") {
  std::mt19937_64 rng(37);
  nd::ParameterSet store;
  WFormerConfig cfg{8, 2, 1, 2, KvDownsample::wavelet};
  HeadParams head = make_head(cfg, 16, rng, store, "h");
  zero_encoder(head);
  for (std::size_t c = 0; c < 8; ++c) head.layers[0].mlp_b2.mutable_values()[c] = 0.1 * static_cast<double>(c);
  const Tensor x = Tensor::randn({16, 8}, rng);
  const auto out = encoder({x, 1, 4, 4}, cfg, head.layers);
  std::vector<double> want = vec(x);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t c = 0; c < 8; ++c) want[t * 8 + c] += 0.1 * static_cast<double>(c);
  CHECK(max_abs_diff(vec(out.tokens), want) < 1e-15);
  CHECK(max_abs_diff(vec(out.tokens), ref_layer(vec(x), 1, 4, 4, 8, head.layers[0])) < 1e-12);
}

TEST_CASE("encoder layer matches the loop reference") {
  std::mt19937_64 rng(38);
  nd::ParameterSet store;
  WFormerConfig cfg{8, 2, 2, 2, KvDownsample::wavelet};
  HeadParams head = make_head(cfg, 32, rng, store, "h");
  for (auto& l : head.layers) {
    for (Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.ln2_beta, &l.mlp_b1})
      for (double& v : t->mutable_values()) v += 0.3 * std::normal_distribution<double>()(rng);
  }
  const Tensor x = Tensor::randn({2 * 16, 8}, rng);
  auto want = ref_layer(vec(x), 2, 4, 4, 8, head.layers[0]);
  want = ref_layer(want, 2, 4, 4, 8, head.layers[1]);
  const auto got = encoder({x, 2, 4, 4}, cfg, head.layers);
  CHECK(got.tokens.shape() == x.shape());
  CHECK(max_abs_diff(vec(got.tokens), want) < 1e-11);
  CHECK_THROWS_AS(encoder({x, 2, 4, 4}, WFormerConfig{8, 2, 3, 2, KvDownsample::wavelet}, head.layers),
                  ContractError);
}

TEST_CASE("restore inverts embedding with pinned weights") {
  std::mt19937_64 rng(39);
  nd::ParameterSet store;
  WFormerConfig cfg{8, 2, 2, 2, KvDownsample::wavelet};
  HeadParams head = make_head(cfg, 32, rng, store, "h");
  zero_encoder(head);
  fill(head.positional, 0.0);
  // Embed keeps the first two channels; restore puts them back.
  fill(head.embed_kernel, 0.0);
  fill(head.restore_kernel, 0.0);
  for (std::size_t c = 0; c < 2; ++c) {
    head.embed_kernel.mutable_values()[c * 8 + c] = 1.0;
    head.restore_kernel.mutable_values()[c * 2 + c] = 1.0;
  }
  std::vector<Tensor> patches;
  for (int p = 0; p < 2; ++p) {
    Tensor t = Tensor::zeros({1, 8, 4, 4});
    std::normal_distribution<double> nd01;
    for (std::size_t i = 0; i < 2 * 16; ++i) t.mutable_values()[i] = nd01(rng);
    patches.push_back(t);
  }
  const auto back = run_head(patches, head, cfg);
  REQUIRE(back.size() == 2);
  for (std::size_t p = 0; p < 2; ++p) {
    CHECK(back[p].shape() == patches[p].shape());
    CHECK(max_abs_diff(vec(back[p]), vec(patches[p])) < 1e-8);
  }
}

TEST_CASE("single token path by hand") {
  // h=w=2, C=4: one token. Embed picks channel 0; the token is
  // [sum/2, (top-bottom)/2, (left-right)/2, diag/2] of that channel.
  std::mt19937_64 rng(40);
  nd::ParameterSet store;
  // One token cannot be wavelet-reduced, so K/V stay full length here.
  WFormerConfig cfg{4, 1, 1, 2, KvDownsample::none};
  HeadParams head = make_head(cfg, 1, rng, store, "h");
  fill(head.positional, 0.0);
  fill(head.embed_kernel, 0.0);
  head.embed_kernel.mutable_values()[0] = 1.0;
  const Tensor patch = Tensor::from_vector({1, 4, 2, 2}, {1, 2, 3, 4, 0, 0, 0, 0, 9, 9, 9, 9, 5, 5, 5, 5});
  const auto seq = embed_group({patch}, head);
  CHECK(vec(seq.tokens) == std::vector<double>{5, -2, -1, 0});
  // With a zero encoder and restore kernel [1,0,0,0]^T the channel comes back.
  zero_encoder(head);
  fill(head.restore_kernel, 0.0);
  head.restore_kernel.mutable_values()[0] = 1.0;
  const auto out = run_head({patch}, head, cfg);
  CHECK(vec(out[0]) == std::vector<double>{1, 2, 3, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
}

TEST_CASE("run_head keeps shapes") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 4; ++trial) {
    nd::ParameterSet store;
    const std::size_t d = 8 * static_cast<std::size_t>(1 + trial % 2), h = 4 + 4 * static_cast<std::size_t>(trial % 2);
    WFormerConfig cfg{d, 1 + static_cast<std::size_t>(trial % 2), 1 + static_cast<std::size_t>(trial % 3), 2,
                      trial == 3 ? KvDownsample::avg_pool : KvDownsample::wavelet};
    const std::size_t patches = 1 + static_cast<std::size_t>(trial);
    const HeadParams head = make_head(cfg, patches * (h / 2) * (h / 2), rng, store, "h");
    std::vector<Tensor> in;
    for (std::size_t p = 0; p < patches; ++p) in.push_back(Tensor::randn({1, d, h, h}, rng));
    const auto out = run_head(in, head, cfg);
    REQUIRE(out.size() == patches);
    for (const auto& t : out) CHECK(t.shape() == nd::Shape{1, d, h, h});
  }
}

TEST_CASE("wformer gradients") {
  std::mt19937_64 rng(42);
  nd::ParameterSet store;
  WFormerConfig cfg{8, 2, 2, 2, KvDownsample::wavelet};
  HeadParams head = make_head(cfg, 16, rng, store, "h");
  Tensor x = Tensor::randn({16, 8}, rng);
  const TokenSequence geom{x, 1, 4, 4};
  auto r = testing::gradcheck([&] { return testing::probe(wmsa(geom.with_tokens(x), head.layers[0].attention, cfg.kv).tokens); },
                              {x, head.layers[0].attention.heads[0].w_q, head.layers[0].attention.heads[1].reduce_k,
                               head.layers[0].attention.w_o},
                              12, rng);
  CHECK(r.max_rel_err < 1e-4);

  r = testing::gradcheck([&] { return testing::probe(encoder(geom.with_tokens(x), cfg, head.layers).tokens); },
                         {x, head.layers[1].mlp_w1, head.layers[0].ln1_gamma, head.layers[1].attention.heads[0].w_v},
                         12, rng);
  CHECK(r.max_rel_err < 1e-4);

  std::vector<Tensor> patches{Tensor::randn({1, 8, 4, 4}, rng), Tensor::randn({1, 8, 4, 4}, rng)};
  HeadParams big = make_head(cfg, 8, rng, store, "g");
  r = testing::gradcheck(
      [&] {
        const auto out = run_head(patches, big, cfg);
        return nd::add(testing::probe(out[0], 1), testing::probe(out[1], 2));
      },
      {patches[0], patches[1], big.embed_kernel, big.positional, big.restore_kernel}, 10, rng);
  CHECK(r.max_rel_err < 1e-4);

  for (KvDownsample kv : {KvDownsample::avg_pool, KvDownsample::learned_conv, KvDownsample::none}) {
    AttentionParams p = make_attention(8, 8, kv, rng, store, "k" + std::string(to_string(kv)));
    std::vector<Tensor> inputs{x, p.w_k};
    if (p.reduce_k.defined()) inputs.push_back(p.reduce_k);
    r = testing::gradcheck([&] { return testing::probe(wsa(geom.with_tokens(x), p, kv).tokens); }, inputs, 10, rng);
    CHECK(r.max_rel_err < 1e-4);
  }
}
