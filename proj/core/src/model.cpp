#include "gpw/model.hpp"

#include <cmath>
#include <random>

#include "gpw/cnn.hpp"
#include "gpw/wformer.hpp"

namespace gpw {

namespace {

std::string stage_tag(std::size_t s) { return "stage " + std::to_string(s); }

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.stages.front().wformer.d_model, k = cfg_.classes;
  stem_kernel_ = params_.normal("t.stem.kernel", {d, 3, 3, 3}, rng, std::sqrt(2.0 / 27.0));
  stem_bias_ = params_.constant("t.stem.bias", {d}, 0.0);

  const auto [ph, pw] = padded_extent(cfg_.image_height, cfg_.image_width);
  for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
    const StageConfig& sc = cfg_.stages[s];
    const auto grid = grouping::PatchGrid::fit(ph, pw, sc.grid_m, sc.grid_n, cfg_.overlap);
    const std::size_t max_tokens = grid.count() * (grid.patch_h / 2) * (grid.patch_w / 2);
    Stage st;
    const std::size_t heads = cfg_.share_heads ? 1 : sc.groups;
    for (std::size_t g = 0; g < heads; ++g) {
      const std::string prefix = "t.stage" + std::to_string(s) +
                                 (cfg_.share_heads ? std::string(".shared")
                                                   : ".group" + std::to_string(g));
      st.heads.push_back(wformer::make_head(sc.wformer, max_tokens, rng, params_, prefix));
    }
    stages_.push_back(std::move(st));
  }
  classifier_kernel_ = params_.normal("t.classifier.kernel", {k, d, 1, 1}, rng,
                                      1.0 / std::sqrt(static_cast<double>(d)));
  classifier_bias_ = params_.constant("t.classifier.bias", {k}, 0.0);
  if (cfg_.fusion == Fusion::learned) {
    // Starts as the plain sum of both branches.
    std::vector<double> eye(k * 2 * k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      eye[c * 2 * k + c] = 1.0;
      eye[c * 2 * k + k + c] = 1.0;
    }
    fusion_kernel_ = params_.add("fusion.kernel", Tensor::from_vector({k, 2 * k, 1, 1}, eye));
    fusion_bias_ = params_.constant("fusion.bias", {k}, 0.0);
  }
  cnn_ = cnn::make_params(cfg_.cnn, rng, params_, "cnn");
}

std::pair<std::size_t, std::size_t> Model::padded_extent(std::size_t h, std::size_t w) const {
  // Patches need one Haar level for the tokens and, unless K/V stay full
  // length, a second one over the token grid.
  auto even_patches = [&](std::size_t ext, bool rows) {
    for (const auto& sc : cfg_.stages) {
      const std::size_t mult = sc.wformer.kv == wformer::KvDownsample::none ? 2 : 4;
      const auto g = grouping::PatchGrid::fit(ext, ext, sc.grid_m, sc.grid_n, cfg_.overlap);
      if ((rows ? g.patch_h : g.patch_w) % mult != 0) return false;
    }
    return true;
  };
  while (!even_patches(h, true)) ++h;
  while (!even_patches(w, false)) ++w;
  return {h, w};
}

ForwardResult Model::forward(const Tensor& images, const ForwardOptions& opts) const {
  if (images.rank() != 4 || images.extent(1) != 3 || images.extent(0) == 0) {
    throw DimensionError("forward: expected images [N,3,H,W], got " +
                         nd::to_string(images.shape()));
  }
  const std::size_t batch = images.extent(0), h = images.extent(2), w = images.extent(3);
  const auto [ph, pw] = padded_extent(h, w);

  ForwardResult out;
  // Context branch on the resized image.
  const Tensor small = (h == cfg_.cnn_input && w == cfg_.cnn_input)
                           ? images
                           : nd::resize_bilinear(images, cfg_.cnn_input, cfg_.cnn_input);
  const cnn::StageFeatures ctx = cnn::cnn_forward(small, cfg_.cnn, cnn_);
  out.logits_c = ctx.logits;

  const Tensor padded =
      (ph == h && pw == w) ? images : nd::pad2d(images, 0, ph - h, 0, pw - w, nd::PadMode::replicate);
  const Tensor stem = nd::relu(nd::conv2d(padded, stem_kernel_, stem_bias_, nd::Conv2dOptions{1, 1, 1}));

  for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
    StageRecord rec;
    rec.stage = s;
    rec.grid = grouping::PatchGrid::fit(ph, pw, cfg_.stages[s].grid_m, cfg_.stages[s].grid_n,
                                        cfg_.overlap);
    out.stages.push_back(std::move(rec));
  }

  std::vector<Tensor> logits_t;
  std::vector<Tensor> congruence_terms;
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor x = batch == 1 ? stem : nd::slice(stem, 0, b, 1);
    std::vector<congruence::RelationScalar> t_rel, c_rel;
    std::vector<std::size_t> grid_sizes;
    for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
      const StageConfig& sc = cfg_.stages[s];
      StageRecord& rec = out.stages[s];
      const grouping::PatchGrid& grid = rec.grid;
      if (x.extent(2) != ph || x.extent(3) != pw) {
        throw DimensionError(stage_tag(s) + ": feature " + nd::to_string(x.shape()) +
                             " does not match padded input " + std::to_string(ph) + "x" +
                             std::to_string(pw));
      }

      Tensor guide = cnn::guidance_feature(ctx, s);
      if (batch > 1) guide = nd::slice(guide, 0, b, 1);
      if (opts.zero_guidance) guide = Tensor::zeros(guide.shape());

      grouping::GroupingMask mask;
      if (cfg_.grouping == grouping::Strategy::guided) {
        const Tensor reduced = grouping::pca_reduce(guide, sc.groups);
        mask = grouping::rebalance(
            grouping::build_mask(grouping::patch_pool(reduced, sc.grid_m, sc.grid_n)));
      } else {
        mask = grouping::baseline_mask(cfg_.grouping, sc.grid_m, sc.grid_n, sc.groups);
      }

      const std::vector<Tensor> patches = grouping::partition(x, grid);
      std::vector<Tensor> processed(patches.size());
      for (std::size_t g = 0; g < sc.groups; ++g) {
        const std::vector<std::size_t> members = mask.members(g);
        if (members.empty()) continue;
        std::vector<Tensor> group;
        group.reserve(members.size());
        for (std::size_t i : members) group.push_back(patches[i]);
        const auto& head = stages_[s].heads[cfg_.share_heads ? 0 : g];
        std::vector<Tensor> restored;
        try {
          restored = wformer::run_head(group, head, sc.wformer);
        } catch (const DimensionError& e) {
          throw DimensionError(stage_tag(s) + ", group " + std::to_string(g) + ": " + e.what());
        } catch (const ContractError& e) {
          throw DimensionError(stage_tag(s) + ", group " + std::to_string(g) + ": " + e.what());
        }
        for (std::size_t i = 0; i < members.size(); ++i) processed[members[i]] = restored[i];
      }
      x = nd::add(x, grouping::stitch(processed, grid, ph, pw));

      Tensor c_feat = ctx.per_stage[s].ll;
      if (batch > 1) c_feat = nd::slice(c_feat, 0, b, 1);
      Tensor t_centers = congruence::patch_centers(grouping::partition(x, grid));
      Tensor c_centers = congruence::grid_centers(c_feat, sc.grid_m, sc.grid_n);
      t_rel.push_back(congruence::stage_relation(t_centers, cfg_.congruence));
      c_rel.push_back(congruence::stage_relation(c_centers, cfg_.congruence));
      grid_sizes.push_back(grid.count());

      rec.masks.push_back(std::move(mask));
      rec.t_centers.push_back(t_centers);
      rec.c_centers.push_back(c_centers);
      rec.t_relation.push_back(t_rel.back());
      rec.c_relation.push_back(c_rel.back());
    }
    congruence_terms.push_back(congruence::congruence_loss(t_rel, c_rel, grid_sizes));
    Tensor logits = nd::conv2d(x, classifier_kernel_, classifier_bias_);
    if (ph != h) logits = nd::slice(logits, 2, 0, h);
    if (pw != w) logits = nd::slice(logits, 3, 0, w);
    logits_t.push_back(logits);
  }
  out.logits_t = batch == 1 ? logits_t.front() : nd::concat(logits_t, 0);
  Tensor total = congruence_terms.front();
  for (std::size_t b = 1; b < batch; ++b) total = nd::add(total, congruence_terms[b]);
  out.congruence = batch == 1 ? total : nd::scale(total, 1.0 / static_cast<double>(batch));

  const Tensor up = (out.logits_c.extent(2) == h && out.logits_c.extent(3) == w)
                        ? out.logits_c
                        : nd::resize_bilinear(out.logits_c, h, w);
  if (cfg_.fusion == Fusion::sum) {
    out.fused = nd::add(out.logits_t, up);
  } else {
    out.fused = nd::conv2d(nd::concat({out.logits_t, up}, 1), fusion_kernel_, fusion_bias_);
  }
  return out;
}

}  // namespace gpw
