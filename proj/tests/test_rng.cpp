#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dnpg/rng.hpp"

using dnpg::Rng;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitIsIndependentOfParentPosition) {
  Rng a(5), b(5);
  for (int i = 0; i < 17; ++i) b.next_u64();
  Rng sa = a.split(3), sb = b.split(3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sa.next_u64(), sb.next_u64());
  EXPECT_NE(a.split(3).next_u64(), a.split(4).next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(9);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, IndexIsUnbiasedAndInRange) {
  Rng rng(11);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto k = rng.index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Rng, ChooseDrawsDistinctItems) {
  Rng rng(2);
  std::vector<int> pool(20);
  for (int i = 0; i < 20; ++i) pool[i] = 100 + i;
  for (int t = 0; t < 200; ++t) {
    auto pick = rng.choose<int>(pool, 8);
    std::set<int> s(pick.begin(), pick.end());
    EXPECT_EQ(s.size(), 8u);
    for (int v : pick) EXPECT_TRUE(v >= 100 && v < 120);
  }
}
