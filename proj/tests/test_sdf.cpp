#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hdteacher/rng.hpp"
#include "hdteacher/sdf.hpp"

using namespace hdt;

namespace {

LabelVolume make_volume(std::array<int64_t, 3> dims, std::array<double, 3> spacing,
                        int num_classes = 2) {
  LabelVolume v;
  v.dims = dims;
  v.spacing = spacing;
  v.num_classes = num_classes;
  v.labels.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), 0);
  return v;
}

LabelVolume random_volume(Rng& rng, std::array<int64_t, 3> dims, std::array<double, 3> spacing,
                          double fg_prob) {
  LabelVolume v = make_volume(dims, spacing);
  for (auto& l : v.labels) l = rng.uniform() < fg_prob ? 1 : 0;
  return v;
}

void check_equal(const SdfChannel& a, const SdfChannel& b, double tol) {
  REQUIRE(a.values.size() == b.values.size());
  double worst = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i)
    worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
  CHECK(worst <= tol);
}

}  // namespace

TEST_CASE("absent class is all +1, full class all -1") {
  auto v = make_volume({4, 4, 4}, {1, 1, 1});
  auto ch = compute_sdf(v, 1);
  for (double x : ch.values) CHECK(x == 1.0);
  for (auto& l : v.labels) l = 1;
  ch = compute_sdf(v, 1);
  for (double x : ch.values) CHECK(x == -1.0);
}

TEST_CASE("single voxel: zero at the voxel, positive neighbors, matches oracle") {
  auto v = make_volume({5, 5, 5}, {1, 1, 1});
  v.labels[v.index(2, 2, 2)] = 1;
  auto fast = compute_sdf(v, 1);
  CHECK(fast.values[v.index(2, 2, 2)] == 0.0);
  CHECK(fast.values[v.index(1, 2, 2)] > 0.0);
  CHECK(fast.values[v.index(2, 3, 2)] > 0.0);
  auto ref = oracle_sdf(v, 1);
  check_equal(fast, ref, 1e-9);
}

TEST_CASE("two-voxel bar: both voxels are boundary and read zero") {
  auto v = make_volume({4, 4, 4}, {1, 1, 1});
  v.labels[v.index(1, 1, 1)] = 1;
  v.labels[v.index(1, 1, 2)] = 1;
  auto ref = oracle_sdf(v, 1);
  CHECK(ref.values[v.index(1, 1, 1)] == 0.0);
  CHECK(ref.values[v.index(1, 1, 2)] == 0.0);
  check_equal(compute_sdf(v, 1), ref, 1e-9);
}

TEST_CASE("anisotropic spacing: depth neighbor is farther than in-plane neighbor") {
  auto v = make_volume({5, 5, 5}, {0.4, 0.4, 5.0});
  v.labels[v.index(2, 2, 2)] = 1;
  // unnormalized distances: compare via edt directly
  std::vector<uint8_t> seeds(v.labels.begin(), v.labels.end());
  auto d2 = edt_squared(seeds, v.dims, v.spacing);
  const double depth_neighbor = std::sqrt(d2[v.index(1, 2, 2)]);
  const double plane_neighbor = std::sqrt(d2[v.index(2, 1, 2)]);
  CHECK(depth_neighbor == doctest::Approx(5.0));
  CHECK(plane_neighbor == doctest::Approx(0.4));
  CHECK(depth_neighbor > plane_neighbor);
  check_equal(compute_sdf(v, 1), oracle_sdf(v, 1), 1e-9);
}

TEST_CASE("oracle rejects oversized volumes") {
  auto v = make_volume({33, 33, 33}, {1, 1, 1});
  CHECK_THROWS_AS(oracle_sdf(v, 1), Error);
}

TEST_CASE("compute_sdf equals oracle_sdf on 100 random masks (both spacings)") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::array<int64_t, 3> dims{2 + rng.below(7), 2 + rng.below(15), 2 + rng.below(7)};
    const std::array<double, 3> spacing =
        trial % 2 ? std::array<double, 3>{0.4, 0.4, 5.0} : std::array<double, 3>{1.0, 1.0, 1.0};
    auto v = random_volume(rng, dims, spacing, rng.uniform(0.05, 0.95));
    check_equal(compute_sdf(v, 1), oracle_sdf(v, 1), 1e-9);
  }
}

TEST_CASE("sign matches membership, magnitude bounded, zero iff boundary") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = random_volume(rng, {6, 8, 6}, {1.0, 2.0, 3.0}, 0.4);
    auto ch = compute_sdf(v, 1);
    std::vector<uint8_t> mask(v.labels.size());
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = v.labels[i] == 1;
    bool any_fg = false, any_bg = false;
    for (uint8_t m : mask) (m ? any_fg : any_bg) = true;
    if (!any_fg || !any_bg) continue;
    auto bnd = boundary_mask(mask, v.dims);
    for (size_t i = 0; i < mask.size(); ++i) {
      CHECK(std::abs(ch.values[i]) <= 1.0);
      if (bnd[i])
        CHECK(ch.values[i] == 0.0);
      else if (mask[i])
        CHECK(ch.values[i] < 0.0);
      else
        CHECK(ch.values[i] > 0.0);
    }
  }
}

TEST_CASE("translating an interior mask translates the field") {
  auto base = make_volume({8, 8, 8}, {1, 1, 1});
  for (int64_t i = 2; i < 4; ++i)
    for (int64_t j = 2; j < 4; ++j)
      for (int64_t k = 2; k < 4; ++k) base.labels[base.index(i, j, k)] = 1;
  auto moved = make_volume({8, 8, 8}, {1, 1, 1});
  for (int64_t i = 3; i < 5; ++i)
    for (int64_t j = 3; j < 5; ++j)
      for (int64_t k = 3; k < 5; ++k) moved.labels[moved.index(i, j, k)] = 1;
  auto a = compute_sdf(base, 1);
  auto b = compute_sdf(moved, 1);
  // compare around the mask where edge effects from renormalization are absent:
  // the interior (negative) parts translate exactly
  for (int64_t i = 2; i < 4; ++i)
    for (int64_t j = 2; j < 4; ++j)
      for (int64_t k = 2; k < 4; ++k)
        CHECK(a.values[base.index(i, j, k)] ==
              doctest::Approx(b.values[base.index(i + 1, j + 1, k + 1)]).epsilon(1e-12));
}

TEST_CASE("compute_sdf_all stacks one channel per class") {
  auto v = make_volume({4, 4, 4}, {1, 1, 1}, 3);
  v.labels[v.index(1, 1, 1)] = 1;
  v.labels[v.index(2, 2, 2)] = 2;
  auto all = compute_sdf_all(v);
  CHECK(all.num_classes == 3);
  CHECK(all.values.size() == 3 * 64);
  CHECK(all.channel(1)[v.index(1, 1, 1)] == 0.0);
  CHECK(all.channel(2)[v.index(2, 2, 2)] == 0.0);
}
