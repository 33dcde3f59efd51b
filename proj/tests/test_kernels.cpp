#include "doctest.h"

#include <vector>

#include <array>

#include "pmil/kernels.hpp"
#include "pmil/rng.hpp"
#include "pmil/tensor.hpp"

using namespace pmil;

namespace {
std::vector<float> random_vec(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.gaussian(0.0, 1.0));
    return v;
}
}  // namespace

TEST_CASE("zero kernel maps everything to bias") {
    const int c = 2, h = 3, w = 3;
    std::vector<float> x(c * h * w, 1.5f), wk(c * c * 9, 0.0f), b{0.5f, -1.0f};
    std::vector<float> y(c * h * w, 99.0f);
    kernels::conv3x3_forward(x.data(), wk.data(), b.data(), y.data(), c, h, w, c);
    for (int i = 0; i < h * w; ++i) {
        CHECK(y[i] == 0.5f);
        CHECK(y[h * w + i] == -1.0f);
    }
}

TEST_CASE("identity kernel on a 1x1x1 input") {
    std::vector<float> x{3.25f}, wk(9, 0.0f), b{0.0f}, y(1, 0.0f);
    wk[4] = 1.0f;  // center weight
    kernels::conv3x3_forward(x.data(), wk.data(), b.data(), y.data(), 1, 1, 1, 1);
    CHECK(y[0] == 3.25f);
}

TEST_CASE("all-ones kernel on a 2x2 map sums the whole padded neighborhood") {
    std::vector<float> x{1, 2, 3, 4}, wk(9, 1.0f), b{0.0f}, y(4, 0.0f);
    kernels::conv3x3_forward(x.data(), wk.data(), b.data(), y.data(), 1, 2, 2, 1);
    // every 3x3 window centered on a 2x2 map covers all four cells
    for (float v : y) CHECK(v == 10.0f);
}

TEST_CASE("parallel forward matches serial reference") {
    Rng rng(5, "kernels");
    for (auto [ci, h, w, co] : {std::array<int, 4>{3, 8, 8, 32}, {32, 8, 8, 32},
                                {1, 1, 1, 4}, {5, 7, 3, 9}}) {
        const auto x = random_vec(rng, static_cast<std::size_t>(ci) * h * w);
        const auto wk = random_vec(rng, static_cast<std::size_t>(co) * ci * 9);
        const auto b = random_vec(rng, co);
        std::vector<float> y1(static_cast<std::size_t>(co) * h * w, 0.0f), y2 = y1;
        kernels::conv3x3_forward(x.data(), wk.data(), b.data(), y1.data(), ci, h, w, co);
        kernels::serial::conv3x3_forward(x.data(), wk.data(), b.data(), y2.data(), ci, h, w, co);
        for (std::size_t i = 0; i < y1.size(); ++i)
            CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-4));
    }
}

TEST_CASE("parallel backward matches serial reference") {
    Rng rng(6, "kernels");
    const int ci = 6, h = 5, w = 4, co = 7;
    const auto x = random_vec(rng, static_cast<std::size_t>(ci) * h * w);
    const auto wk = random_vec(rng, static_cast<std::size_t>(co) * ci * 9);
    const auto gy = random_vec(rng, static_cast<std::size_t>(co) * h * w);

    std::vector<float> gx1(x.size(), 0.0f), gx2 = gx1;
    kernels::conv3x3_backward_input(gy.data(), wk.data(), gx1.data(), ci, h, w, co);
    kernels::serial::conv3x3_backward_input(gy.data(), wk.data(), gx2.data(), ci, h, w, co);
    for (std::size_t i = 0; i < gx1.size(); ++i)
        CHECK(gx1[i] == doctest::Approx(gx2[i]).epsilon(1e-4));

    std::vector<float> gw1(wk.size(), 0.0f), gw2 = gw1, gb1(co, 0.0f), gb2 = gb1;
    kernels::conv3x3_backward_params(x.data(), gy.data(), gw1.data(), gb1.data(), ci, h, w, co);
    kernels::serial::conv3x3_backward_params(x.data(), gy.data(), gw2.data(), gb2.data(), ci, h,
                                             w, co);
    for (std::size_t i = 0; i < gw1.size(); ++i)
        CHECK(gw1[i] == doctest::Approx(gw2[i]).epsilon(1e-4));
    for (int i = 0; i < co; ++i) CHECK(gb1[i] == doctest::Approx(gb2[i]).epsilon(1e-4));
}
