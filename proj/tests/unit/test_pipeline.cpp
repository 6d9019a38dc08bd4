#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "gpw/ablation.hpp"
#include "gpw/checkpoint.hpp"
#include "gpw/cnn.hpp"
#include "gpw/config.hpp"
#include "gpw/data.hpp"
#include "gpw/model.hpp"
#include "gpw/train.hpp"
#include "gradcheck.hpp"
#include "grouping_oracle.hpp"
#include "oracles.hpp"

using namespace gpw;
using nd::Tensor;
namespace fs = std::filesystem;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

wformer::WFormerConfig small_head(std::size_t layers = 1) { return {8, 1, layers, 2, wformer::KvDownsample::wavelet}; }

// 16×16 input, one stage (2×2 grid) or two stages (4×4 then 2×2).
ModelConfig tiny(std::size_t groups = 2, bool two_stage = false,
                 grouping::Strategy strategy = grouping::Strategy::guided) {
  ModelConfig cfg;
  cfg.image_height = cfg.image_width = 16;
  cfg.classes = 3;
  if (two_stage) {
    cfg.stages = {StageConfig{4, 4, groups, small_head()}, StageConfig{2, 2, std::min<std::size_t>(groups, 2), small_head()}};
  } else {
    cfg.stages = {StageConfig{2, 2, groups, small_head()}};
  }
  cfg.grouping = strategy;
  cfg.cnn_input = 8;
  cfg.cnn.stage_channels = {4, 8};
  cfg.cnn.aspp_rates = {1};
  cfg.cnn.num_classes = 3;
  return cfg;
}

data::Dataset tiny_data(std::size_t count = 4) {
  data::SynthSpec spec;
  spec.count = count;
  spec.size = 16;
  spec.classes = 3;
  spec.seed = 11;
  return data::make_synthetic(spec);
}

TrainConfig tiny_train(std::uint64_t iters = 12) {
  TrainConfig t;
  t.base_lr = 3e-3;
  t.total_iters = iters;
  t.batch_size = 2;
  t.seed = 3;
  return t;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("gpw_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

// Rebuilds the context-branch parameter structs over the model's own values.
cnn::CnnParams context_params(const Model& model) {
  nd::ParameterSet scratch;
  std::mt19937_64 rng(0);
  cnn::CnnParams p = cnn::make_params(model.config().cnn, rng, scratch, "cnn");
  for (const auto& item : scratch.items()) {
    const Tensor src = model.parameters().find(item.name);
    REQUIRE(src.defined());
    Tensor dst = item.tensor;
    std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
  }
  return p;
}

std::vector<std::vector<int>> oracle_stage_masks(const Model& model, const Tensor& image) {
  const ModelConfig& cfg = model.config();
  const auto ctx = cnn::cnn_forward(nd::resize_bilinear(image, cfg.cnn_input, cfg.cnn_input), cfg.cnn,
                                    context_params(model));
  std::vector<std::vector<int>> out;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const Tensor& ll = ctx.per_stage[s].ll;
    const std::size_t c = ll.extent(1), h = ll.extent(2), w = ll.extent(3);
    const auto& sc = cfg.stages[s];
    const auto reduced = testing::oracle_pca(vec(ll), c, h * w, sc.groups);
    const auto pooled = testing::naive_block_mean(reduced, 1, sc.groups, h, w, sc.grid_m, sc.grid_n);
    out.push_back(testing::oracle_rebalance(testing::oracle_build_mask(pooled, sc.groups, sc.grid_m, sc.grid_n)).assign);
  }
  return out;
}

std::vector<std::string> log_lines(const std::vector<LogRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.to_line());
  return out;
}

}  // namespace

TEST_CASE("desk forward shapes") {
  const Model model(ModelConfig::desk(), 7);
  std::mt19937_64 rng(81);
  nd::NoGradGuard ng;
  const auto out = model.forward(Tensor::randn({1, 3, 64, 64}, rng));
  CHECK(out.fused.shape() == nd::Shape{1, 3, 64, 64});
  CHECK(out.logits_t.shape() == nd::Shape{1, 3, 64, 64});
  CHECK(out.logits_c.shape() == nd::Shape{1, 3, 32, 32});
  REQUIRE(out.stages.size() == 2);
  CHECK(out.stages[0].masks[0].groups == 4);
  CHECK(out.stages[1].masks[0].m == 2);
}

TEST_CASE("forward shapes on a batch and odd extents") {
  ModelConfig cfg = tiny(2, true);
  cfg.image_height = 14;
  cfg.image_width = 18;
  const Model model(cfg, 1);
  std::mt19937_64 rng(82);
  const auto out = model.forward(Tensor::randn({2, 3, 14, 18}, rng));
  CHECK(out.fused.shape() == nd::Shape{2, 3, 14, 18});
  CHECK(out.stages[0].masks.size() == 2);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({0, 3, 14, 18})), DimensionError);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 1, 14, 18})), DimensionError);
}

TEST_CASE("one group makes the grouping strategy irrelevant") {
  std::mt19937_64 rng(83);
  const Tensor images = Tensor::randn({2, 3, 16, 16}, rng);
  const Model guided(tiny(1, true, grouping::Strategy::guided), 4);
  const Model row(tiny(1, true, grouping::Strategy::linear_row), 4);
  CHECK(vec(guided.forward(images).fused) == vec(row.forward(images).fused));
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(84);
  const Tensor images = Tensor::randn({1, 3, 16, 16}, rng);
  const Model a(tiny(2, true), 9), b(tiny(2, true), 9);
  const auto ra = a.forward(images), rb = b.forward(images);
  CHECK(vec(ra.fused) == vec(rb.fused));
  CHECK(ra.congruence.item() == rb.congruence.item());
  CHECK(vec(ra.fused) == vec(a.forward(images).fused));
  const Model c(tiny(2, true), 10);
  CHECK(vec(c.forward(images).fused) != vec(ra.fused));
}

TEST_CASE("stage masks follow the reference grouping path") {
  const auto ds = tiny_data(3);
  const Model model(tiny(4, true), 5);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t idx[] = {i};
    const Tensor image = ds.batch(idx).first;
    const auto out = model.forward(image);
    const auto want = oracle_stage_masks(model, image);
    for (std::size_t s = 0; s < 2; ++s) CHECK(out.stages[s].masks[0].assign == want[s]);
  }
  // Frozen trace of sample 0.
  const std::size_t first[] = {0};
  const auto out = model.forward(ds.batch(first).first);
  CHECK(out.stages[0].masks[0].to_text() == "2 1 2 3\n1 2 1 0\n3 3 1 0\n2 0 3 0\n");
  CHECK(out.stages[1].masks[0].to_text() == "0 1\n0 1\n");
}

TEST_CASE("guidance carries no gradient into the context branch") {
  std::mt19937_64 rng(85);
  Model model(tiny(2, true), 6);
  model.parameters().zero_grad();
  nd::backward(testing::probe(model.forward(Tensor::randn({1, 3, 16, 16}, rng)).logits_t));
  for (const auto& item : model.parameters().items()) {
    if (item.name.rfind("cnn.", 0) != 0) continue;
    for (double g : item.tensor.grad()) CHECK(g == 0.0);
  }
  const Tensor stem = model.parameters().find("t.stem.kernel");
  double total = 0.0;
  for (double g : stem.grad()) total += std::abs(g);
  CHECK(total > 0.0);
}

TEST_CASE("attention work scales with one over the group count") {
  std::mt19937_64 rng(86);
  const Tensor images = Tensor::randn({1, 3, 16, 16}, rng);
  auto attention = [&](std::size_t groups) {
    ModelConfig cfg = tiny(groups, false, grouping::Strategy::linear_row);
    cfg.stages[0].grid_m = cfg.stages[0].grid_n = 4;
    const Model model(cfg, 2);
    nd::NoGradGuard ng;
    return nd::counter_scope([&] { (void)model.forward(images); }).attention_mul_adds;
  };
  const auto one = attention(1), four = attention(4), two = attention(2);
  CHECK(one == 4 * four);
  CHECK(one == 2 * two);
}

TEST_CASE("end-to-end gradient on a micro configuration") {
  Model model(tiny(2, false), 12);
  const auto ds = tiny_data(2);
  const auto [images, gt] = ds.all();
  std::vector<Tensor> inputs;
  for (const char* name : {"t.stem.kernel", "t.stage0.group1.embed.kernel", "t.stage0.group0.layer0.wmsa.head0.w_q",
                           "t.stage0.group1.restore.kernel", "t.classifier.kernel", "cnn.classifier.kernel",
                           "cnn.stage1.conv1.kernel"}) {
    inputs.push_back(model.parameters().find(name));
    REQUIRE(inputs.back().defined());
  }
  std::mt19937_64 rng(87);
  const auto r = testing::gradcheck(
      [&] {
        const auto out = model.forward(images);
        return objectives::total_loss(objectives::focal_loss(out.fused, gt, 2.0), out.congruence, 0.8);
      },
      inputs, 6, rng);
  INFO(r.worst);
  CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("config text round trip and errors") {
  RunConfig cfg;
  cfg.train.base_lr = 1e-3;
  cfg.train.batch_size = 2;
  cfg.model.fusion = Fusion::learned;
  const std::string text = to_text(cfg);
  CHECK(to_text(parse_config(text)) == text);
  CHECK_THROWS_AS(parse_config("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("classes = 3\nclasses = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("classes = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("stage_grids = 4x4,2x2\nstage_groups = 2,4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("stage_grids = 2x2\nstage_groups = 5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("base_lr = 0\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
  const RunConfig partial = parse_config("# comment\nseed = 11\n\nimage_size = 32\n");
  CHECK(partial.train.seed == 11);
  CHECK(partial.model.image_height == 32);
  CHECK(partial.model.stages.size() == 2);
}

TEST_CASE("batch schedule") {
  const auto a = batch_indices(7, 5, 8, 2), b = batch_indices(7, 5, 8, 2);
  CHECK(a == b);
  // One epoch visits every sample exactly once.
  std::vector<int> seen(8, 0);
  for (std::uint64_t it = 0; it < 4; ++it) {
    for (auto i : batch_indices(7, it, 8, 2)) ++seen[i];
  }
  CHECK(seen == std::vector<int>(8, 1));
  CHECK(batch_indices(7, 0, 8, 2) != batch_indices(8, 0, 8, 2));
  CHECK_THROWS_AS(batch_indices(7, 0, 0, 2), ContractError);
}

TEST_CASE("training is reproducible and reduces the loss") {
  const auto ds = tiny_data(4);
  auto run = [&](double alpha, std::uint64_t iters) {
    Model model(tiny(2, true), 21);
    TrainConfig t = tiny_train(iters);
    t.alpha = alpha;
    Trainer trainer(model, ds, t);
    return trainer.run(iters);
  };
  const auto a = run(0.8, 30), b = run(0.8, 30);
  CHECK(log_lines(a) == log_lines(b));
  CHECK(a.back().iter == 29);

  auto mean_focal = [](const std::vector<LogRecord>& r, std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += r[i].focal;
    return s / static_cast<double>(to - from);
  };
  const auto c = run(0.0, 30);
  CHECK(mean_focal(a, 24, 30) < mean_focal(a, 0, 6));
  CHECK(mean_focal(c, 24, 30) < mean_focal(c, 0, 6));
  bool congruence_differs = false;
  for (std::size_t i = 1; i < a.size(); ++i) congruence_differs |= a[i].congruence != c[i].congruence;
  CHECK(congruence_differs);
  CHECK(a.front().to_line().rfind("iter=0 lr=", 0) == 0);
}

TEST_CASE("empty datasets are rejected") {
  Model model(tiny(), 1);
  const data::Dataset empty;
  CHECK_THROWS_AS(Trainer(model, empty, tiny_train()), ContractError);
  CHECK_THROWS_AS(evaluate(model, empty), ContractError);
  CHECK_THROWS_AS(predict(model, empty), ContractError);
}

TEST_CASE("non-finite loss names the failing op") {
  const auto ds = tiny_data(2);
  Model model(tiny(), 1);
  Tensor bias = model.parameters().find("t.classifier.bias");
  bias.mutable_values()[0] = std::numeric_limits<double>::infinity();
  Trainer trainer(model, ds, tiny_train());
  try {
    trainer.step();
    FAIL("expected NumericFailure");
  } catch (const NumericFailure& e) {
    CHECK(e.iter() == 0);
    CHECK_FALSE(e.op().empty());
    CHECK(std::string(e.what()).find(e.op()) != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip and resume") {
  TempDir dir("ckpt");
  const auto ds = tiny_data(4);
  RunConfig rc;
  rc.model = tiny(2, true);
  rc.train = tiny_train(10);

  Model full(rc.model, 31);
  Trainer whole(full, ds, rc.train);
  const auto reference = log_lines(whole.run(10));

  Model first(rc.model, 31);
  Trainer part(first, ds, rc.train);
  part.run(5);
  const fs::path file = dir.path / "a.bin";
  write_checkpoint(file, capture(rc, first, part.optimizer(), part.iteration()));
  const Checkpoint loaded = read_checkpoint(file);
  CHECK(loaded.iteration == 5);
  CHECK(loaded.config_text == to_text(rc));

  // Byte-identical rewrite.
  write_checkpoint(dir.path / "b.bin", loaded);
  std::ifstream fa(file, std::ios::binary), fb(dir.path / "b.bin", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);

  Model second(parse_config(loaded.config_text).model, 999);
  Trainer resumed(second, ds, rc.train);
  restore(loaded, second, &resumed.optimizer());
  resumed.set_iteration(loaded.iteration);
  auto tail = log_lines(resumed.run(10));
  std::vector<std::string> want(reference.begin() + 5, reference.end());
  CHECK(tail == want);
  for (const auto& item : full.parameters().items()) {
    CHECK(vec(item.tensor) == vec(second.parameters().find(item.name)));
  }
}

TEST_CASE("checkpoint errors") {
  TempDir dir("bad");
  RunConfig rc;
  rc.model = tiny(2, false);
  Model model(rc.model, 1);
  objectives::Adam adam(model.parameters());
  const fs::path file = dir.path / "c.bin";
  write_checkpoint(file, capture(rc, model, adam, 0));

  Model other(tiny(2, true), 1);
  try {
    restore(read_checkpoint(file), other);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("t.stage1") != std::string::npos);
  }

  std::ifstream in(file, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir.path / name, std::ios::binary);
    out << content;
    return dir.path / name;
  };
  CHECK_THROWS_AS(read_checkpoint(write("trunc.bin", bytes.substr(0, bytes.size() / 2))), FormatError);
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  CHECK_THROWS_AS(read_checkpoint(write("ver.bin", wrong_version)), FormatError);
  CHECK_THROWS_AS(read_checkpoint(write("magic.bin", "NOTACKPT" + bytes.substr(8))), FormatError);
  CHECK_THROWS_AS(read_checkpoint(write("extra.bin", bytes + "x")), FormatError);
  CHECK_THROWS_AS(read_checkpoint(dir.path / "missing.bin"), FormatError);
}

TEST_CASE("synthetic data") {
  data::SynthSpec spec;
  spec.count = 3;
  spec.size = 32;
  const auto a = data::make_synthetic(spec), b = data::make_synthetic(spec);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(vec(a.samples[i].image) == vec(b.samples[i].image));
    CHECK(a.samples[i].gt.labels == b.samples[i].gt.labels);
  }
  spec.seed = 8;
  CHECK(vec(data::make_synthetic(spec).samples[0].image) != vec(a.samples[0].image));

  // Classes separate by color: the nearest palette entry recovers most labels.
  std::size_t right = 0, total = 0;
  for (const auto& s : a.samples) {
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      std::size_t best = 0;
      double best_d = 1e9;
      for (std::size_t c = 0; c < 3; ++c) {
        const auto col = data::class_color(c);
        double d = 0.0;
        for (std::size_t ch = 0; ch < 3; ++ch) d += std::pow(s.image.values()[ch * 1024 + p] - col[ch], 2);
        if (d < best_d) best_d = d, best = c;
      }
      right += static_cast<int>(best) == s.gt.labels[p];
      ++total;
    }
  }
  CHECK(static_cast<double>(right) / static_cast<double>(total) > 0.99);
  std::vector<bool> present(3, false);
  for (const auto& s : a.samples)
    for (int l : s.gt.labels) present[static_cast<std::size_t>(l)] = true;
  CHECK(present == std::vector<bool>{true, true, true});
}

TEST_CASE("dataset files round trip") {
  TempDir dir("data");
  const auto ds = tiny_data(2);
  data::save_dataset(dir.path, ds);
  const auto back = data::load_dataset(dir.path);
  REQUIRE(back.size() == 2);
  CHECK(back.classes == 3);
  CHECK(back.samples[1].gt.labels == ds.samples[1].gt.labels);
  // 8-bit storage quantizes to 1/255.
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.samples[0].image.size(); ++i) {
    worst = std::max(worst, std::abs(back.samples[0].image.values()[i] - ds.samples[0].image.values()[i]));
  }
  CHECK(worst <= 0.5 / 255.0 + 1e-12);
  CHECK_THROWS_AS(data::load_dataset(dir.path / "nothing"), DataError);
  std::ofstream(dir.path / "broken.ppm") << "P6\n4 4\n255\nxx";
  CHECK_THROWS_AS(data::read_ppm(dir.path / "broken.ppm"), DataError);
  CHECK_THROWS_AS(data::parse_synth_spec("count=0"), ConfigError);
}

TEST_CASE("evaluate and predict") {
  const auto ds = tiny_data(2);
  const Model model(tiny(), 3);
  const auto report = evaluate(model, ds);
  CHECK(report.miou >= 0.0);
  CHECK(report.miou <= 1.0);
  CHECK(report.mul_adds > 0);
  CHECK(report.peak_live_elements > 0);
  const auto pred = predict(model, ds);
  CHECK(pred.n == 2);
  const auto [images, gt] = ds.all();
  CHECK(pred.labels == objectives::argmax_labels(model.forward(images).fused).labels);
}

TEST_CASE("ablation plumbing") {
  CHECK(default_settings(AblationMode::grouping).size() == 4);
  CHECK(default_settings(AblationMode::rbf_order) == std::vector<std::string>{"mean", "inner_dot", "1", "2", "3"});
  CHECK(parse_ablation_mode("rbf-order") == AblationMode::rbf_order);
  CHECK_THROWS_AS(parse_ablation_mode("depth"), ConfigError);
  RunConfig base;
  CHECK(apply_setting(AblationMode::grouping, "rectangle", base).model.grouping == grouping::Strategy::rectangle);
  CHECK(apply_setting(AblationMode::downsampling, "avg_pool", base).model.stages[1].wformer.kv ==
        wformer::KvDownsample::avg_pool);
  CHECK(apply_setting(AblationMode::rbf_order, "2", base).model.congruence.taylor_order == 2);
  CHECK_THROWS_AS(apply_setting(AblationMode::grouping, "spiral", base), ConfigError);
  const double e1 = rbf_taylor_error(1, 0.5, 200, 3), e2 = rbf_taylor_error(2, 0.5, 200, 3),
               e3 = rbf_taylor_error(3, 0.5, 200, 3);
  CHECK(e1 > e2);
  CHECK(e2 > e3);

  RunConfig small;
  small.model = tiny(2, false);
  small.train = tiny_train(2);
  const auto table = ablation_run(AblationMode::downsampling, {"wavelet", "avg_pool"}, small, tiny_data(2));
  REQUIRE(table.rows.size() == 2);
  CHECK(table.rows[0].extra == "true");
  CHECK(table.rows[1].extra == "false");
  CHECK(table.to_text().rfind("setting\tmiou\tmul_adds\t", 0) == 0);
}
