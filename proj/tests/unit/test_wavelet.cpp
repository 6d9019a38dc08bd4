#include <cmath>
#include <random>

#include "doctest.h"
#include "gpw/wavelet.hpp"
#include "gradcheck.hpp"

using namespace gpw;
using nd::Tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

double energy(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("constant image") {
  const auto s = wavelet::dwt2(Tensor::full({1, 1, 4, 4}, 3.0));
  for (double v : s.ll.values()) CHECK(v == 6.0);
  for (const Tensor* t : {&s.lh, &s.hl, &s.hh}) {
    for (double v : t->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("single block") {
  const auto s = wavelet::dwt2(Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(s.ll.item() == 5.0);
  CHECK(s.lh.item() == -2.0);
  CHECK(s.hl.item() == -1.0);
  CHECK(s.hh.item() == 0.0);
  const Tensor back = wavelet::iwt2({Tensor::full({1, 1, 1, 1}, 5.0), Tensor::full({1, 1, 1, 1}, -2.0),
                                     Tensor::full({1, 1, 1, 1}, -1.0), Tensor::full({1, 1, 1, 1}, 0.0), {}});
  CHECK(std::vector<double>(back.values().begin(), back.values().end()) ==
        std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("zero subbands give a zero image") {
  const Tensor z = Tensor::zeros({1, 2, 3, 3});
  const Tensor x = wavelet::iwt2({z, z, z, z, {}});
  CHECK(x.shape() == nd::Shape{1, 2, 6, 6});
  for (double v : x.values()) CHECK(v == 0.0);
}

TEST_CASE("perfect reconstruction and energy") {
  std::mt19937_64 rng(11);
  for (std::size_t h = 2; h <= 32; h += 6) {
    for (std::size_t w = 2; w <= 32; w += 10) {
      const Tensor x = Tensor::randn({2, 3, h, w}, rng);
      const auto s = wavelet::dwt2(x);
      CHECK(max_abs_diff(wavelet::iwt2(s), x) < 1e-10);
      const double e = energy(s.ll) + energy(s.lh) + energy(s.hl) + energy(s.hh);
      CHECK(std::abs(e - energy(x)) < 1e-10 * std::max(1.0, energy(x)));
    }
  }
}

TEST_CASE("odd extents are padded and cropped") {
  std::mt19937_64 rng(12);
  const Tensor x = Tensor::randn({1, 2, 5, 7}, rng);
  const auto s = wavelet::dwt2(x);
  CHECK(s.ll.shape() == nd::Shape{1, 2, 3, 4});
  CHECK(s.padding.bottom == 1);
  CHECK(s.padding.right == 1);
  const Tensor back = wavelet::iwt2(s);
  CHECK(back.shape() == x.shape());
  CHECK(max_abs_diff(back, x) < 1e-10);
}

TEST_CASE("zero-sized extent rejected") {
  CHECK_THROWS_AS(wavelet::dwt2(Tensor::zeros({1, 1, 0, 4})), DimensionError);
}

TEST_CASE("inconsistent subbands rejected") {
  const Tensor a = Tensor::zeros({1, 1, 2, 2}), b = Tensor::zeros({1, 1, 3, 2});
  CHECK_THROWS_AS(wavelet::iwt2({a, a, b, a, {}}), DimensionError);
}

TEST_CASE("linearity") {
  std::mt19937_64 rng(13);
  const Tensor x = Tensor::randn({1, 2, 8, 8}, rng), y = Tensor::randn({1, 2, 8, 8}, rng);
  const double alpha = 0.7, beta = -1.3;
  const auto lhs = wavelet::dwt_concat(nd::add(nd::scale(x, alpha), nd::scale(y, beta)));
  const auto rhs = nd::add(nd::scale(wavelet::dwt_concat(x), alpha), nd::scale(wavelet::dwt_concat(y), beta));
  CHECK(max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("dwt_concat") {
  std::mt19937_64 rng(14);
  const Tensor one = Tensor::randn({1, 1, 6, 6}, rng);
  const Tensor cat = wavelet::dwt_concat(one);
  CHECK(cat.shape() == nd::Shape{1, 4, 3, 3});
  CHECK(max_abs_diff(nd::slice(cat, 1, 0, 1), wavelet::dwt2(one).ll) == 0.0);
  CHECK(wavelet::dwt_concat(Tensor::zeros({1, 8, 16, 16})).shape() == nd::Shape{1, 32, 8, 8});
  const Tensor x = Tensor::randn({2, 3, 8, 4}, rng);
  CHECK(max_abs_diff(wavelet::iwt2(wavelet::split_subbands(wavelet::dwt_concat(x))), x) < 1e-10);
  CHECK(max_abs_diff(wavelet::iwt_concat(wavelet::dwt_concat(x)), x) < 1e-10);
  CHECK_THROWS(wavelet::dwt_concat(Tensor::zeros({1, 1, 3, 4})));
}

TEST_CASE("wavelet gradients") {
  std::mt19937_64 rng(15);
  Tensor x = Tensor::randn({2, 2, 6, 4}, rng);
  auto r = testing::gradcheck(
      [&] {
        const auto s = wavelet::dwt2(x);
        return nd::add(nd::add(testing::probe(s.ll, 1), testing::probe(s.lh, 2)),
                       nd::add(testing::probe(s.hl, 3), testing::probe(s.hh, 4)));
      },
      {x}, 10, rng);
  CHECK(r.max_rel_err < 1e-4);
  Tensor odd = Tensor::randn({1, 2, 5, 3}, rng);
  r = testing::gradcheck([&] { return testing::probe(wavelet::iwt2(wavelet::dwt2(odd))); }, {odd}, 10, rng);
  CHECK(r.max_rel_err < 1e-4);
  Tensor ll = Tensor::randn({1, 2, 3, 3}, rng), lh = Tensor::randn({1, 2, 3, 3}, rng),
         hl = Tensor::randn({1, 2, 3, 3}, rng), hh = Tensor::randn({1, 2, 3, 3}, rng);
  r = testing::gradcheck([&] { return testing::probe(wavelet::iwt2({ll, lh, hl, hh, {}})); },
                         {ll, lh, hl, hh}, 10, rng);
  CHECK(r.max_rel_err < 1e-4);
  r = testing::gradcheck([&] { return testing::probe(wavelet::iwt_concat(wavelet::dwt_concat(x))); }, {x}, 10, rng);
  CHECK(r.max_rel_err < 1e-4);
}
