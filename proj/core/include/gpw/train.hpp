#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gpw/config.hpp"
#include "gpw/data.hpp"
#include "gpw/model.hpp"
#include "gpw/objectives.hpp"

namespace gpw {

struct LogRecord {
  std::uint64_t iter = 0;
  double lr = 0.0;
  double focal = 0.0;
  double congruence = 0.0;
  double total = 0.0;

  // iter=<n> lr=<v> focal=<v> congr=<v> total=<v>
  std::string to_line() const;
};

// Raised when a loss turns NaN or infinite; names the first op on the tape
// whose output is non-finite while its inputs are finite.
class NumericFailure : public NumericError {
 public:
  NumericFailure(std::uint64_t iter, std::string op);
  std::uint64_t iter() const { return iter_; }
  const std::string& op() const { return op_; }

 private:
  std::uint64_t iter_;
  std::string op_;
};

// Op name of the earliest non-finite node reachable from `root`, empty
// when every value is finite.
std::string first_nonfinite_op(const nd::Tensor& root);

// Sample indices used at a given iteration: an epoch-wise shuffle that is a
// pure function of (seed, iteration), so resumed runs see the same batches.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t iter,
                                       std::size_t dataset_size, std::size_t batch_size);

class Trainer {
 public:
  Trainer(Model& model, const data::Dataset& dataset, TrainConfig cfg);

  // Runs iteration `iteration()` and advances the counter.
  LogRecord step();
  // Steps until `until` (exclusive) or total_iters, reporting each record.
  std::vector<LogRecord> run(std::uint64_t until,
                             const std::function<void(const LogRecord&)>& on_record = {});

  std::uint64_t iteration() const { return iter_; }
  void set_iteration(std::uint64_t iter) { iter_ = iter; }
  objectives::Adam& optimizer() { return adam_; }
  const objectives::Adam& optimizer() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  Model& model_;
  const data::Dataset& data_;
  TrainConfig cfg_;
  objectives::Adam adam_;
  std::uint64_t iter_ = 0;
};

// Argmax of the fused logits over the whole dataset, with operation counts
// from one single-image forward.
objectives::MetricsReport evaluate(const Model& model, const data::Dataset& dataset);

// Fused-logit argmax for every sample, [N,H,W].
objectives::LabelMap predict(const Model& model, const data::Dataset& dataset);

}  // namespace gpw
