#include <doctest.h>

#include <cmath>

#include "equireg/random.hpp"

using equireg::RandomStream;

TEST_SUITE("random") {

// Reference values from an independent splitmix64 implementation.
TEST_CASE("seed 0 draws") {
  RandomStream r(0);
  CHECK(r.next_u64() == 0x07fdd88ab03a824dULL);
  CHECK(r.next_u64() == 0xf33b55e71033af49ULL);
  CHECK(r.next_u64() == 0xaabc36139a02b66aULL);
  CHECK(r.counter() == 3);
  CHECK(RandomStream(42).next_u64() == 0xd7492b557c449d0bULL);
}

TEST_CASE("uniform and index derive from the raw draw") {
  RandomStream a(0), b(0);
  CHECK(a.uniform() == 0.03121713052699171);
  CHECK(b.index(10) == 0);
}

TEST_CASE("split does not advance and is reproducible") {
  RandomStream r(0);
  const RandomStream s = r.split(7);
  CHECK(r.counter() == 0);
  RandomStream s1 = s;
  CHECK(s1.next_u64() == 0xf289d97edd3ef331ULL);
  RandomStream s2 = RandomStream(0).split(7);
  CHECK(s2.next_u64() == 0xf289d97edd3ef331ULL);
  RandomStream other = r.split(8);
  CHECK(other.next_u64() != 0xf289d97edd3ef331ULL);
}

TEST_CASE("moments") {
  RandomStream r(3);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("index stays in range") {
  RandomStream r(5);
  int counts[7] = {};
  for (int i = 0; i < 70000; ++i) {
    const auto k = r.index(7);
    REQUIRE(k < 7);
    ++counts[k];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

}
