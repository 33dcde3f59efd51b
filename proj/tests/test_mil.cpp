#include "doctest.h"

#include <cmath>

#include "pmil/grad_check.hpp"
#include "pmil/mil.hpp"

using namespace pmil;

namespace {

ParamSet<float> unit_scalar_params() {
    // L = M = 1, V1 = V2 = w = 1, zero head
    ParamSet<float> ps;
    ps.add("mil.v1", Tensor<float>::from({1, 1}, {1}), true);
    ps.add("mil.v2", Tensor<float>::from({1, 1}, {1}), true);
    ps.add("mil.w", Tensor<float>::from({1}, {1}), true);
    ps.add("mil.head.w", Tensor<float>::zeros({2, 1}), true);
    ps.add("mil.head.b", Tensor<float>::zeros({2}), true);
    return ps;
}

ParamSet<float> random_params(std::uint64_t seed, int hidden, int dim) {
    ParamSet<float> ps;
    Rng rng(seed, "init.mil");
    mil_init(ps, MilConfig{hidden, dim}, rng);
    // head starts at zero; randomize it so logits discriminate
    Rng head(seed, "head");
    for (auto& x : ps.at("mil.head.w").data) x = static_cast<float>(head.gaussian(0.0, 0.5));
    return ps;
}

std::vector<Tensor<float>> random_features(std::uint64_t seed, int n, int dim) {
    Rng rng(seed, "feat");
    std::vector<Tensor<float>> out;
    for (int i = 0; i < n; ++i) {
        auto t = Tensor<float>::zeros({dim});
        for (auto& x : t.data) x = static_cast<float>(rng.gaussian(0.0, 1.0));
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

TEST_CASE("attention on a singleton bag is [1]") {
    const auto ps = random_params(1, 4, 3);
    const auto a = attention_scores(random_features(1, 1, 3), ps);
    CHECK(a.size() == 1);
    CHECK(a[0] == 1.0f);
}

TEST_CASE("identical features attract uniform attention") {
    const auto ps = random_params(2, 4, 3);
    auto feats = random_features(2, 1, 3);
    for (int i = 0; i < 4; ++i) feats.push_back(feats[0]);
    const auto a = attention_scores(feats, ps);
    for (float x : a) CHECK(x == doctest::Approx(0.2).epsilon(1e-5));
}

TEST_CASE("scalar gated-attention oracle with unit parameters") {
    const auto ps = unit_scalar_params();
    std::vector<Tensor<float>> feats{Tensor<float>::from({1}, {0}),
                                     Tensor<float>::from({1}, {1})};
    const auto a = attention_scores(feats, ps);
    // raw scores: 0 and tanh(1)*sigmoid(1)
    const double s1 = std::tanh(1.0) * (1.0 / (1.0 + std::exp(-1.0)));
    const double e = std::exp(s1);
    CHECK(a[0] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-5));
    CHECK(a[0] == doctest::Approx(0.3643).epsilon(1e-3));
    CHECK(a[1] == doctest::Approx(0.6357).epsilon(1e-3));
}

TEST_CASE("empty bag is rejected") {
    const auto ps = random_params(3, 4, 3);
    CHECK_THROWS_AS(attention_scores(std::vector<Tensor<float>>{}, ps), ContractError);
}

TEST_CASE("bag_pool examples") {
    std::vector<Tensor<float>> feats{Tensor<float>::from({2}, {1, 0}),
                                     Tensor<float>::from({2}, {0, 1})};
    SUBCASE("one-hot selects a patch exactly") {
        const auto f = bag_pool(feats, std::vector<float>{0, 1});
        CHECK(f.data == std::vector<float>{0, 1});
    }
    SUBCASE("midpoint") {
        const auto f = bag_pool(feats, std::vector<float>{0.5f, 0.5f});
        CHECK(f.data == std::vector<float>{0.5f, 0.5f});
    }
    SUBCASE("constant bag is a fixed point") {
        std::vector<Tensor<float>> same(3, Tensor<float>::from({2}, {2, -1}));
        const auto f = bag_pool(same, std::vector<float>{0.2f, 0.3f, 0.5f});
        CHECK(f.data[0] == doctest::Approx(2.0).epsilon(1e-6));
        CHECK(f.data[1] == doctest::Approx(-1.0).epsilon(1e-6));
    }
    SUBCASE("length mismatch") {
        CHECK_THROWS_AS(bag_pool(feats, std::vector<float>{1.0f}), DimensionError);
    }
}

TEST_CASE("null head predicts 0.5") {
    auto ps = random_params(4, 4, 3);
    for (auto& x : ps.at("mil.head.w").data) x = 0;
    const auto r = classify_bag(random_features(4, 5, 3), ps);
    CHECK(r.logits.data == std::vector<float>{0, 0});
    CHECK(positive_probability(r.logits) == 0.5f);
}

TEST_CASE("single-patch bag feature is that patch") {
    const auto ps = random_params(5, 4, 3);
    const auto feats = random_features(5, 1, 3);
    const auto r = classify_bag(feats, ps);
    CHECK(r.bag_feature.data == feats[0].data);
}

TEST_CASE("alphas normalize and bag feature stays in the convex hull") {
    for (std::uint64_t seed = 10; seed < 15; ++seed) {
        const auto ps = random_params(seed, 8, 4);
        const auto feats = random_features(seed, 6, 4);
        const auto r = classify_bag(feats, ps);
        float sum = 0;
        for (float a : r.alphas) {
            CHECK(a >= 0.0f);
            CHECK(a <= 1.0f);
            sum += a;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        for (int d = 0; d < 4; ++d) {
            float lo = feats[0].data[d], hi = feats[0].data[d];
            for (const auto& f : feats) {
                lo = std::min(lo, f.data[d]);
                hi = std::max(hi, f.data[d]);
            }
            CHECK(r.bag_feature.data[d] >= lo - 1e-5f);
            CHECK(r.bag_feature.data[d] <= hi + 1e-5f);
        }
    }
}

TEST_CASE("permuting the bag permutes alphas and preserves logits") {
    const auto ps = random_params(6, 8, 4);
    const auto feats = random_features(6, 7, 4);
    Rng rng(6, "perm");
    const auto perm = rng.permutation(7);
    std::vector<Tensor<float>> shuffled(7, Tensor<float>::zeros({4}));
    for (int k = 0; k < 7; ++k) shuffled[perm[k]] = feats[k];

    const auto a = classify_bag(feats, ps);
    const auto b = classify_bag(shuffled, ps);
    for (int k = 0; k < 7; ++k) CHECK(b.alphas[perm[k]] == doctest::Approx(a.alphas[k]).epsilon(1e-6));
    for (int i = 0; i < 2; ++i)
        CHECK(b.logits.data[i] == doctest::Approx(a.logits.data[i]).epsilon(1e-5));
}

TEST_CASE("duplicating the top-scoring patch grows its attention mass share") {
    const auto ps = random_params(7, 8, 4);
    auto feats = random_features(7, 5, 4);
    const auto a = attention_scores(feats, ps);
    const int top = static_cast<int>(std::max_element(a.begin(), a.end()) - a.begin());
    feats.push_back(feats[top]);
    const auto b = attention_scores(feats, ps);
    CHECK(b[top] + b[5] > a[top]);
}

TEST_CASE("full MIL head passes grad_check") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ParamSet<double> ps;
        Rng rng(seed, "init.mil");
        mil_init(ps, MilConfig{3, 4}, rng);
        for (auto& x : ps.at("mil.head.w").data) x = rng.gaussian(0.0, 0.5);
        const auto feats = random_features(seed, 3, 4);
        auto graph = [&feats](Tape<double>& t, const std::map<std::string, int>& v) {
            std::vector<int> fv;
            for (const auto& f : feats) fv.push_back(t.leaf(f.cast<double>()));
            const auto r = classify_bag_taped(t, fv, v);
            return t.ce_loss(r.logits, 1);
        };
        CHECK(grad_check(graph, ps, 1e-4, 0, seed) < 1e-4);
    }
}
