#include <cmath>
#include <vector>

#include "advood/data.hpp"
#include "advood/gradcam.hpp"
#include "advood/model.hpp"
#include "advood/rng.hpp"
#include "gtest/gtest.h"

namespace advood {
namespace {

GradCamMap constant_map(double v, std::size_t n = 4) {
  GradCamMap m;
  m.map = Tensor(Shape{n, n}, v);
  return m;
}

GradCamMap random_map(Rng& rng) {
  GradCamMap m;
  m.map = Tensor(Shape{4, 4});
  for (double& v : m.map.data()) v = rng.uniform();
  return m;
}

TEST(GradCam, SingleChannelToy) {
  const std::vector<double> a{1, 2, 3, 4}, g(4, 1.0);
  const GradCamMap m = cam_from_gradients(a.data(), g.data(), 1, 2, 2);
  EXPECT_FALSE(m.degenerate);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(m.map[i], a[i] / 4.0);
}

TEST(GradCam, ZeroHeadIsDegenerate) {
  ModelCheckpoint ck = init_checkpoint(Architecture{}, 3);
  ck.weights.set("fc.weight", Tensor(ck.weights.at("fc.weight").shape(), 0.0));
  const SmallConvNet net(ck);
  const LabeledDataset ds = generate_shapes(4, 1, 5, Split::kTest);
  const std::vector<int> targets{0, 1, 2, 3};
  for (const GradCamMap& m : gradcam(net, ds.images, targets)) {
    EXPECT_TRUE(m.degenerate);
    for (double v : m.map.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(GradCam, MapsAreNormalized) {
  const SmallConvNet net(init_checkpoint(Architecture{}, 4));
  const LabeledDataset ds = generate_shapes(4, 2, 6, Split::kTest);
  const std::vector<int> pred = predict(net, ds.images);
  const auto maps = gradcam(net, ds.images, pred);
  ASSERT_EQ(maps.size(), 8u);
  for (const GradCamMap& m : maps) {
    EXPECT_EQ(m.map.shape(), (Shape{4, 4}));
    if (m.degenerate) continue;
    double peak = 0.0;
    for (double v : m.map.data()) {
      EXPECT_GE(v, 0.0);
      peak = std::max(peak, v);
    }
    EXPECT_EQ(peak, 1.0);
  }
}

TEST(GradCam, TargetOutOfRangeThrows) {
  const SmallConvNet net(init_checkpoint(Architecture{}, 4));
  const LabeledDataset ds = generate_shapes(4, 1, 6, Split::kTest);
  const std::vector<int> bad{0, 1, 2, 4};
  EXPECT_THROW(gradcam(net, ds.images, bad), Error);
}

TEST(L2Distance, Basics) {
  Rng rng(1);
  const GradCamMap a = random_map(rng), b = random_map(rng);
  EXPECT_EQ(l2_distance(a, a), 0.0);
  EXPECT_EQ(l2_distance(constant_map(0), constant_map(1)), 4.0);
  EXPECT_EQ(l2_distance(a, b), l2_distance(b, a));
  EXPECT_THROW(l2_distance(a, constant_map(0, 3)), ShapeError);
}

TEST(Ssim, IdentityAndSymmetry) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const GradCamMap a = random_map(rng), b = random_map(rng);
    EXPECT_EQ(ssim(a, a), 1.0);
    EXPECT_EQ(ssim(a, b), ssim(b, a));
  }
}

TEST(Ssim, ConstantMapsClosedForm) {
  EXPECT_NEAR(ssim(constant_map(0), constant_map(1)), kSsimC1 / (1.0 + kSsimC1), 1e-12);
}

TEST(Ssim, BoundedAboveByOne) {
  Rng rng(3);
  for (int t = 0; t < 1000; ++t) EXPECT_LE(ssim(random_map(rng), random_map(rng)), 1.0);
}

TEST(ShiftDensity, IdenticalPairsFillOneBin) {
  std::vector<ShiftRecord> recs(7);
  const ShiftHistogram h = shift_density(recs, 5, 5);
  EXPECT_EQ(h.total, 7u);
  EXPECT_EQ(h.counts[0][4], 7u);
  EXPECT_EQ(h.mean_l2, 0.0);
  EXPECT_EQ(h.mean_ssim, 1.0);
}

TEST(ShiftDensity, CountsSumToRecords) {
  Rng rng(4);
  std::vector<ShiftRecord> recs(300);
  for (ShiftRecord& r : recs) {
    r.l2 = rng.uniform(0.0, 3.0);
    r.ssim = rng.uniform(-0.5, 1.0);
  }
  const ShiftHistogram h = shift_density(recs, 20, 20);
  std::size_t sum = 0;
  for (const auto& row : h.counts)
    for (std::size_t c : row) sum += c;
  EXPECT_EQ(sum, recs.size());
  EXPECT_EQ(h.l2_edges.size(), 21u);
  EXPECT_EQ(h.ssim_edges.back(), 1.0);
}

TEST(ShiftDensity, EmptyThrows) {
  EXPECT_THROW(shift_density(std::vector<ShiftRecord>{}, 4, 4), Error);
}

}  // namespace
}  // namespace advood
