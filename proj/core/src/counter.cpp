#include "gpw/counter.hpp"

#include <algorithm>

namespace gpw::nd {

namespace {
thread_local CounterScope* g_top = nullptr;
thread_local std::int64_t g_live = 0;
thread_local bool g_attention = false;
}  // namespace

namespace counting {

bool active() { return g_top != nullptr; }

void add_mul_adds(std::uint64_t n) {
  if (g_top == nullptr) return;
  g_top->totals_.mul_adds += n;
  if (g_attention) g_top->totals_.attention_mul_adds += n;
}

void on_alloc(std::uint64_t elements) {
  g_live += static_cast<std::int64_t>(elements);
  for (CounterScope* s = g_top; s != nullptr; s = s->parent_) {
    const std::int64_t extra = g_live - s->base_live_;
    if (extra > 0) {
      s->totals_.peak_live_elements = std::max(
          s->totals_.peak_live_elements, static_cast<std::uint64_t>(extra));
    }
  }
}

void on_free(std::uint64_t elements) {
  g_live -= static_cast<std::int64_t>(elements);
}

}  // namespace counting

CounterScope::CounterScope() : base_live_(g_live), parent_(g_top) {
  g_top = this;
}

CounterScope::~CounterScope() {
  g_top = parent_;
  if (parent_ != nullptr) {
    parent_->totals_.mul_adds += totals_.mul_adds;
    parent_->totals_.attention_mul_adds += totals_.attention_mul_adds;
  }
}

OpCounter CounterScope::snapshot() const { return totals_; }

AttentionRegion::AttentionRegion() : previous_(g_attention) {
  g_attention = true;
}

AttentionRegion::~AttentionRegion() { g_attention = previous_; }

}  // namespace gpw::nd
