#pragma once

#include <cstdint>
#include <type_traits>
#include <utility>

namespace gpw::nd {

// One multiply-add is one unit; elementwise ops count one per element.
// Only forward work is counted.
struct OpCounter {
  std::uint64_t mul_adds = 0;
  std::uint64_t peak_live_elements = 0;
  // Portion of mul_adds issued inside an AttentionRegion.
  std::uint64_t attention_mul_adds = 0;
};

namespace counting {
bool active();
void add_mul_adds(std::uint64_t n);
void on_alloc(std::uint64_t elements);
void on_free(std::uint64_t elements);
}  // namespace counting

// RAII counting scope. Nested scopes fold their totals into the parent on
// destruction; peak is measured relative to the live count at entry.
class CounterScope {
 public:
  CounterScope();
  ~CounterScope();
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

  OpCounter snapshot() const;

 private:
  friend void counting::add_mul_adds(std::uint64_t);
  friend void counting::on_alloc(std::uint64_t);
  OpCounter totals_;
  std::int64_t base_live_;
  CounterScope* parent_;
};

// Tags mul-adds issued while alive as attention work.
class AttentionRegion {
 public:
  AttentionRegion();
  ~AttentionRegion();
  AttentionRegion(const AttentionRegion&) = delete;
  AttentionRegion& operator=(const AttentionRegion&) = delete;

 private:
  bool previous_;
};

template <class F>
auto counter_scope(F&& f) {
  CounterScope scope;
  if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
    std::forward<F>(f)();
    return scope.snapshot();
  } else {
    auto result = std::forward<F>(f)();
    return std::pair{std::move(result), scope.snapshot()};
  }
}

}  // namespace gpw::nd
