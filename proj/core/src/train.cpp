#include "gpw/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "gpw/counter.hpp"

namespace gpw {

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::string LogRecord::to_line() const {
  std::ostringstream os;
  os.precision(10);
  os << "iter=" << iter << " lr=" << lr << " focal=" << focal << " congr=" << congruence
     << " total=" << total;
  return os.str();
}

NumericFailure::NumericFailure(std::uint64_t iter, std::string op)
    : NumericError("non-finite loss at iteration " + std::to_string(iter) +
                   "; first non-finite value produced by op '" + op + "'"),
      iter_(iter),
      op_(std::move(op)) {}

std::string first_nonfinite_op(const nd::Tensor& root) {
  if (!root.defined()) return {};
  // Post-order walk so inputs are visited before the ops that consume them.
  std::vector<nd::Node*> order;
  std::unordered_set<nd::Node*> seen;
  std::vector<std::pair<nd::Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      nd::Node* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (nd::Node* n : order) {
    if (all_finite(n->data)) continue;
    const bool inputs_ok = std::all_of(n->parents.begin(), n->parents.end(),
                                       [](const auto& p) { return all_finite(p->data); });
    if (inputs_ok) return n->op;
  }
  return {};
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t iter,
                                       std::size_t dataset_size, std::size_t batch_size) {
  if (dataset_size == 0) throw ContractError("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::uint64_t pos = iter * batch_size + j;
    const std::uint64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % dataset_size]);
  }
  return out;
}

Trainer::Trainer(Model& model, const data::Dataset& dataset, TrainConfig cfg)
    : model_(model), data_(dataset), cfg_(cfg), adam_(model.parameters(), cfg.adam) {
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  cfg_.validate();
}

LogRecord Trainer::step() {
  if (iter_ >= cfg_.total_iters) {
    throw ContractError("train: iteration " + std::to_string(iter_) + " past total_iters");
  }
  LogRecord rec;
  rec.iter = iter_;
  rec.lr = objectives::poly_lr(iter_, cfg_.total_iters, cfg_.base_lr);

  const auto idx = batch_indices(cfg_.seed, iter_, data_.size(), cfg_.batch_size);
  const auto [images, gt] = data_.batch(idx);
  model_.parameters().zero_grad();
  const ForwardResult out = model_.forward(images);
  nd::Tensor focal = objectives::focal_loss(out.fused, gt, cfg_.gamma);
  if (model_.config().aux_cnn_loss) {
    const nd::Tensor up = nd::resize_bilinear(out.logits_c, gt.h, gt.w);
    focal = nd::add(focal, objectives::focal_loss(up, gt, cfg_.gamma));
  }
  const nd::Tensor total = objectives::total_loss(focal, out.congruence, cfg_.alpha);
  rec.focal = focal.item();
  rec.congruence = out.congruence.item();
  rec.total = total.item();
  if (!std::isfinite(rec.total)) {
    std::string op = first_nonfinite_op(total);
    throw NumericFailure(iter_, op.empty() ? "unknown" : op);
  }
  nd::backward(total);
  adam_.step(rec.lr);
  ++iter_;
  return rec;
}

std::vector<LogRecord> Trainer::run(std::uint64_t until,
                                    const std::function<void(const LogRecord&)>& on_record) {
  std::vector<LogRecord> log;
  const std::uint64_t stop = std::min(until, cfg_.total_iters);
  while (iter_ < stop) {
    log.push_back(step());
    if (on_record) on_record(log.back());
  }
  return log;
}

objectives::LabelMap predict(const Model& model, const data::Dataset& dataset) {
  if (dataset.empty()) throw ContractError("evaluate: dataset is empty");
  nd::NoGradGuard no_grad;
  objectives::LabelMap all;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::size_t one[] = {i};
    const auto [image, gt] = dataset.batch(one);
    const objectives::LabelMap pred = objectives::argmax_labels(model.forward(image).fused);
    if (i == 0) {
      all = objectives::LabelMap{0, pred.h, pred.w, {}};
    } else if (pred.h != all.h || pred.w != all.w) {
      throw DataError("evaluate: sample " + std::to_string(i) + " differs in size");
    }
    all.n += 1;
    all.labels.insert(all.labels.end(), pred.labels.begin(), pred.labels.end());
  }
  return all;
}

objectives::MetricsReport evaluate(const Model& model, const data::Dataset& dataset) {
  const objectives::LabelMap pred = predict(model, dataset);
  const auto [images, gt] = dataset.all();
  objectives::MetricsReport report = objectives::compute_metrics(pred, gt, model.config().classes);
  const std::size_t first[] = {0};
  const nd::Tensor one = dataset.batch(first).first;
  const nd::OpCounter counts = nd::counter_scope([&] { (void)model.forward(one); });
  report.mul_adds = counts.mul_adds;
  report.peak_live_elements = counts.peak_live_elements;
  return report;
}

}  // namespace gpw
