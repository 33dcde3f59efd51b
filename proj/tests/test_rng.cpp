#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "pmil/rng.hpp"

using namespace pmil;

TEST_CASE("same seed and stream reproduce bit-identical sequences") {
    Rng a(42, "data");
    Rng b(42, "data");
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("distinct stream labels decorrelate") {
    Rng a(42, "data");
    Rng b(42, "init");
    int same = 0;
    for (int i = 0; i < 100; ++i) same += (a.next_u64() == b.next_u64());
    CHECK(same == 0);
}

TEST_CASE("gaussian with zero sigma returns exactly mu") {
    Rng r(7, "test");
    CHECK(r.gaussian(0.0, 0.0) == 0.0);
    CHECK(r.gaussian(3.5, 0.0) == 3.5);
}

TEST_CASE("gaussian rejects negative sigma") {
    Rng r(7, "test");
    CHECK_THROWS_AS(r.gaussian(0.0, -1.0), ContractError);
}

TEST_CASE("uniform stays in [a,b)") {
    Rng r(1, "test");
    for (int i = 0; i < 1000; ++i) {
        const double x = r.uniform(-2.0, 5.0);
        CHECK(x >= -2.0);
        CHECK(x < 5.0);
    }
    CHECK_THROWS_AS(r.uniform(1.0, 1.0), ContractError);
}

TEST_CASE("permutation is a bijection on 0..n-1") {
    Rng r(3, "shuffle");
    CHECK(r.permutation(1) == std::vector<int>{0});
    for (int n : {2, 7, 64, 1000}) {
        auto p = r.permutation(n);
        std::sort(p.begin(), p.end());
        std::vector<int> expect(n);
        std::iota(expect.begin(), expect.end(), 0);
        CHECK(p == expect);
    }
}

TEST_CASE("gaussian mean and variance are roughly right") {
    Rng r(11, "test");
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.gaussian(1.0, 2.0);
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
    CHECK(var == doctest::Approx(4.0).epsilon(0.1));
}
