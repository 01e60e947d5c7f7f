#include <cmath>
#include <numbers>

#include "act360/attention.hpp"
#include "act360/eac.hpp"
#include "act360/erp.hpp"
#include "act360/error.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace act360;
using act360::testing::max_abs_diff;
using act360::testing::random_tensor;
using act360::testing::worst_grad_error;

constexpr double kPi = std::numbers::pi;

TEST_CASE("latitude_of_row: linear map and pixel centers") {
    ErpGrid exact(32, LatitudeMode::Eq1Exact);
    CHECK(latitude_of_row(exact, 16) == doctest::Approx(0.0));
    CHECK(latitude_of_row(exact, 0) == doctest::Approx(-kPi / 2));
    CHECK(latitude_of_row(exact, 8) == doctest::Approx(-kPi / 4));
    CHECK(latitude_of_row(exact, 32) == doctest::Approx(kPi / 2));
    CHECK_THROWS_AS(latitude_of_row(exact, 32.5), ValidationError);
    CHECK_THROWS_AS(latitude_of_row(exact, -0.1), ValidationError);

    ErpGrid center(32);
    CHECK_THROWS_AS(latitude_of_row(center, 32), ValidationError);
    CHECK(latitude_of_row(center, 0) > -kPi / 2);
    CHECK(latitude_of_row(center, 31) < kPi / 2);
    CHECK(center.width() == 64);
    CHECK_THROWS_AS(ErpGrid(1), ValidationError);
}

TEST_CASE("latitude_of_row is strictly increasing and affine") {
    for (auto mode : {LatitudeMode::Eq1Exact, LatitudeMode::PixelCenter}) {
        ErpGrid g(24, mode);
        for (int y = 1; y + 1 < 24; ++y) {
            double a = latitude_of_row(g, y - 1), b = latitude_of_row(g, y), c = latitude_of_row(g, y + 1);
            CHECK(b > a);
            CHECK(std::abs((c - b) - (b - a)) < 1e-9);
        }
    }
}

TEST_CASE("cos_lat_table values and symmetry") {
    auto t32 = cos_lat_table(ErpGrid(32));
    REQUIRE(t32.size() == 32);
    CHECK(t32[15] == doctest::Approx(std::cos(kPi * (15.5 / 32 - 0.5))));
    CHECK(t32[15] == doctest::Approx(0.998795).epsilon(1e-6));
    auto t2 = cos_lat_table(ErpGrid(2));
    CHECK(t2[0] == doctest::Approx(std::sqrt(2.0) / 2));
    CHECK(t2[1] == doctest::Approx(std::sqrt(2.0) / 2));
    for (std::size_t h : {2u, 7u, 32u, 512u}) {
        auto t = cos_lat_table(ErpGrid(h));
        const double floor = std::cos(kPi / 2 - kPi / (2.0 * h));
        for (std::size_t y = 0; y < h; ++y) {
            CHECK(t[y] == doctest::Approx(t[h - 1 - y]).epsilon(1e-12));
            CHECK(t[y] > 0.0);
            CHECK(t[y] <= 1.0);
            CHECK(t[y] >= floor - 1e-15);
        }
    }
}

TEST_CASE("wrap_x is periodic") {
    CHECK(wrap_x(-1, 32) == 31);
    CHECK(wrap_x(32, 32) == 0);
    CHECK(wrap_x(5, 32) == 5);
    for (std::int64_t x = -40; x < 40; ++x)
        for (std::int64_t k = -3; k <= 3; ++k) CHECK(wrap_x(x + k * 32, 32) == wrap_x(x, 32));
    CHECK_THROWS_AS(wrap_x(3, 0), ValidationError);
}

TEST_CASE("erp_project and inverse") {
    ErpGrid g(32, LatitudeMode::Eq1Exact);
    auto c = erp_project(0, 0, g);
    CHECK(c.x == doctest::Approx(32));
    CHECK(c.y == doctest::Approx(16));
    CHECK(erp_project(-kPi / 2, 0, g).y == doctest::Approx(0));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        for (int i = 0; i < 20; ++i) {
            double lat = rng.uniform(-kPi / 2, kPi / 2), lon = rng.uniform(-kPi, kPi);
            auto p = erp_project(lat, lon, g);
            CHECK(std::abs(latitude_of_row(g, p.y) - lat) < 1e-6);
            CHECK(std::abs(latitude_of_pixel_y(g, p.y) - lat) < 1e-6);
            CHECK(std::abs(longitude_of_pixel_x(g, p.x) - lon) < 1e-6);
        }
    }
}

TEST_CASE("adjust_kernel scales by cos(phi)") {
    Tensor one({1, 1}, std::vector<float>{1});
    CHECK(adjust_kernel(one, kPi / 3)[0] == doctest::Approx(0.5));
    Rng rng(1);
    Tensor w = random_tensor({2, 3, 3, 3}, rng);
    CHECK(adjust_kernel(w, 0.0) == w);
    Tensor pair({1, 2}, std::vector<float>{2, -4});
    Tensor adj = adjust_kernel(pair, kPi / 4);
    CHECK(adj[0] == doctest::Approx(std::sqrt(2.0)));
    CHECK(adj[1] == doctest::Approx(-2 * std::sqrt(2.0)));
    CHECK(adj.shape() == pair.shape());
}

TEST_CASE("eac_conv2d equals cos_table[y] times the reference convolution") {
    ErpGrid grid(16);
    const auto table = cos_lat_table(grid);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor in = random_tensor({3, 16, 32}, rng);
        Tensor w = random_tensor({2, 3, 3, 3}, rng);
        EacKernelBank bank(w, {0.0f, 0.0f}, grid);
        Tensor out = eac_conv2d(in, bank);
        Tensor ref = conv2d_reference(in, w, PaddingRule::WrapClamp);
        double worst = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t y = 0; y < 16; ++y)
                for (std::size_t x = 0; x < 32; ++x)
                    worst = std::max(worst, std::abs(double(out.at({c, y, x})) - table[y] * ref.at({c, y, x})));
        CHECK(worst < 1e-5);

        for (std::size_t y = 0; y < 16; y += 5) {
            Tensor ek = bank.effective_kernel(y);
            for (std::size_t i = 0; i < w.size(); ++i) CHECK(ek[i] == w[i] * float(table[y]));
        }
    }
}

TEST_CASE("eac_conv2d at the equator row matches a standard convolution") {
    // Odd height puts a pixel center exactly on the equator.
    ErpGrid grid(33);
    const auto table = cos_lat_table(grid);
    std::size_t eq = 0;
    for (std::size_t y = 0; y < 33; ++y)
        if (std::abs(table[y] - 1) < std::abs(table[eq] - 1)) eq = y;
    Rng rng(9);
    REQUIRE(table[eq] == 1.0);
    Tensor in = random_tensor({2, 33, 66}, rng);
    Tensor w = random_tensor({2, 2, 3, 3}, rng);
    Tensor out = eac_conv2d(in, EacKernelBank(w, {0.1f, -0.2f}, grid));
    Tensor ref = conv2d_reference(in, w, PaddingRule::WrapClamp);
    const float bias[2] = {0.1f, -0.2f};
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t x = 0; x < 66; ++x) CHECK(std::abs(out.at({c, eq, x}) - (ref.at({c, eq, x}) + bias[c])) <= 1e-6);
}

TEST_CASE("eac_conv2d impulse at x=0 reaches the last column") {
    ErpGrid grid(8);
    Tensor in({1, 8, 16});
    in.at({0, 4, 0}) = 1.0f;
    Tensor w({1, 1, 3, 3}, 1.0f);
    Tensor out = eac_conv2d(in, EacKernelBank(w, {0.0f}, grid));
    CHECK(out.at({0, 4, 15}) > 0.0f);
    CHECK(out.at({0, 4, 1}) > 0.0f);
    CHECK(out.at({0, 4, 8}) == 0.0f);
}

TEST_CASE("eac_conv2d constant input: row magnitude proportional to cos") {
    ErpGrid grid(16);
    const auto table = cos_lat_table(grid);
    Tensor in({1, 16, 32}, 0.7f);
    Tensor w({1, 1, 3, 3}, 0.5f);
    Tensor out = eac_conv2d(in, EacKernelBank(w, {0.0f}, grid));
    const double ratio0 = out.at({0, 0, 0}) / table[0];
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 32; x += 7) CHECK(std::abs(out.at({0, y, x}) / table[y] - ratio0) < 1e-5);
}

TEST_CASE("eac_conv2d is circular-shift equivariant") {
    ErpGrid grid(8);
    Rng rng(4);
    Tensor in = random_tensor({2, 8, 16}, rng);
    EacKernelBank bank(random_tensor({3, 2, 3, 3}, rng), {0.1f, 0.2f, 0.3f}, grid);
    Tensor base = eac_conv2d(in, bank);
    for (std::int64_t s : {1, 5, 15}) {
        Tensor shifted(in.shape());
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 16; ++x)
                    shifted.at({c, y, std::size_t(wrap_x(std::int64_t(x) + s, 16))}) = in.at({c, y, x});
        Tensor out = eac_conv2d(shifted, bank);
        bool exact = true;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 16; ++x)
                    exact = exact && out.at({c, y, std::size_t(wrap_x(std::int64_t(x) + s, 16))}) == base.at({c, y, x});
        CHECK(exact);
    }
}

TEST_CASE("eac_conv2d rejects grid mismatches") {
    ErpGrid grid(8);
    EacKernelBank bank(Tensor({1, 1, 3, 3}, 1.0f), {0.0f}, grid);
    CHECK_THROWS_AS(eac_conv2d(Tensor({1, 8, 8}), bank), ValidationError);
    CHECK_THROWS_AS(eac_conv2d(Tensor({2, 8, 16}), bank), ValidationError);
    CHECK_THROWS_AS(EacKernelBank(Tensor({1, 1, 2, 2}), {0.0f}, grid), ValidationError);
}

TEST_CASE("eac gradient carries the cos factor") {
    ErpGrid grid(4);
    Rng rng(12);
    act360::testing::Inputs in{{"x", random_tensor<double>({2, 4, 8}, rng)},
                               {"w", random_tensor<double>({2, 2, 3, 3}, rng)},
                               {"b", random_tensor<double>({2}, rng)}};
    auto build = [&](Tape<double>&, std::map<std::string, Var<double>>& v) {
        auto y = eac_conv2d(v["x"], v["w"], v["b"], grid);
        return ad::sum(ad::mul(y, y));
    };
    CHECK(worst_grad_error(in, build) < 1e-4);

    // With a linear loss the weight gradient must be exactly the cos-weighted
    // correlation; dropping the factor would inflate it near the poles.
    Tape<double> tape;
    auto x = tape.constant(in["x"]);
    auto w = tape.parameter("w", in["w"]);
    auto b = tape.parameter("b", in["b"]);
    auto grads = tape.backward(ad::sum(eac_conv2d(x, w, b, grid)));
    const auto table = cos_lat_table(grid);
    CHECK(grads.at("b")[0] == doctest::Approx(4 * 8));
    const TensorD& xv = in["x"];
    for (std::size_t co = 0; co < 2; ++co)
        for (std::size_t ci = 0; ci < 2; ++ci)
            for (long ky = 0; ky < 3; ++ky)
                for (long kx = 0; kx < 3; ++kx) {
                    double expect = 0.0;
                    for (long y = 0; y < 4; ++y)
                        for (long xx = 0; xx < 8; ++xx) {
                            const long sy = std::clamp(y + ky - 1, 0L, 3L);
                            const long sx = wrap_x(xx + kx - 1, 8);
                            expect += table[y] * xv.at({ci, std::size_t(sy), std::size_t(sx)});
                        }
                    CHECK(grads.at("w").at({co, ci, std::size_t(ky), std::size_t(kx)}) ==
                          doctest::Approx(expect).epsilon(1e-12));
                }
}

TEST_CASE("erp attention map") {
    CHECK(erp_attention_at_latitude(latitude_of_row(ErpGrid(32, LatitudeMode::Eq1Exact), 16), 8.0) == doctest::Approx(1.0));
    CHECK(erp_attention_at_latitude(kPi / 3, 8.0) == doctest::Approx(2.0));
    CHECK_THROWS_AS(erp_attention_at_latitude(kPi / 2, 8.0), ValidationError);
    CHECK_THROWS_AS(erp_attention_map(ErpGrid(32, LatitudeMode::Eq1Exact), 8.0), ValidationError);
    CHECK_THROWS_AS(erp_attention_map(ErpGrid(32), 0.5), ValidationError);

    Tensor big = erp_attention_map(ErpGrid(512), 10.0);
    CHECK(big.shape() == Shape{1, 512, 1});
    CHECK(big[0] == doctest::Approx(10.0));
    CHECK(1.0 / std::cos(kPi * (0.5 / 512 - 0.5)) == doctest::Approx(325.9).epsilon(1e-3));

    Tensor m = erp_attention_map(ErpGrid(32), 8.0);
    const auto table = cos_lat_table(ErpGrid(32));
    float lo = m[0];
    for (std::size_t y = 0; y < 32; ++y) {
        CHECK(m[y] == doctest::Approx(std::min(1.0 / table[y], 8.0)));
        lo = std::min(lo, m[y]);
    }
    CHECK(lo == doctest::Approx(1.0).epsilon(2e-3));
}

namespace {

AttentionParams params_with(Tensor weight, float bias, double cap = kDefaultErpCap) {
    AttentionParams p;
    p.weight = std::move(weight);
    p.bias = bias;
    p.erp_cap = cap;
    return p;
}

}  // namespace

TEST_CASE("motion gate") {
    ErpGrid grid(4);
    Rng rng(11);
    Tensor ft = random_tensor({3, 4, 8}, rng), fp = random_tensor({3, 4, 8}, rng);

    Tensor zero_gate = motion_gate(ft, fp, params_with(Tensor({1, 6, 1, 1}), 0.0f));
    for (float v : zero_gate.values()) CHECK(v == 0.5f);

    Tensor anti({1, 6, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) {
        anti[c] = float(c + 1);
        anti[c + 3] = -float(c + 1);
    }
    Tensor same = motion_gate(ft, ft, params_with(anti, 0.0f));
    for (float v : same.values()) CHECK(v == doctest::Approx(0.5));

    Tensor w = random_tensor({1, 6, 1, 1}, rng);
    auto p = params_with(w, 0.3f);
    Tensor gate = motion_gate(ft, fp, p);
    Tensor cat({6, 4, 8});
    for (std::size_t i = 0; i < ft.size(); ++i) {
        cat[i] = ft[i];
        cat[ft.size() + i] = fp[i];
    }
    Tensor pre = conv2d_reference(cat, w, PaddingRule::Zero);
    for (std::size_t i = 0; i < gate.size(); ++i) {
        CHECK(gate[i] == doctest::Approx(1.0 / (1.0 + std::exp(-(pre[i] + 0.3)))).epsilon(1e-6));
        CHECK(gate[i] > 0.0f);
        CHECK(gate[i] < 1.0f);
    }
    CHECK_THROWS_AS(motion_gate(ft, Tensor({3, 4, 7}), p), ValidationError);
    CHECK_THROWS_AS(motion_gate(ft, fp, params_with(Tensor({1, 4, 1, 1}), 0.0f)), ValidationError);
}

TEST_CASE("apply_attention composes gate, map and features") {
    ErpGrid grid(8);
    Rng rng(5);
    Tensor ft = random_tensor({2, 8, 16}, rng), fp = random_tensor({2, 8, 16}, rng);
    auto p = params_with(random_tensor({1, 4, 1, 1}, rng), -0.2f, 4.0);

    Tensor out = apply_attention(ft, fp, grid, p);
    Tensor gate = motion_gate(ft, fp, p);
    Tensor map = erp_attention_map(grid, 4.0);
    Tensor fin = attention_final_map(ft, fp, grid, p);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            const float a = gate.at({0, y, x}) * map[y];
            CHECK(fin.at({0, y, x}) == doctest::Approx(a));
            CHECK(fin.at({0, y, x}) > 0.0f);
            CHECK(fin.at({0, y, x}) <= 4.0f);
            for (std::size_t c = 0; c < 2; ++c) CHECK(out.at({c, y, x}) == doctest::Approx(ft.at({c, y, x}) * a));
        }

    Tensor zero = apply_attention(Tensor(ft.shape()), fp, grid, p);
    for (float v : zero.values()) CHECK(v == 0.0f);

    Tensor ident = apply_attention(ft, fp, grid, params_with(Tensor({1, 4, 1, 1}), 40.0f, 1.0));
    CHECK(max_abs_diff(ident, ft) < 1e-3);
}

TEST_CASE("attention argmax is unchanged by positive input scaling") {
    ErpGrid grid(8);
    Rng rng(21);
    Tensor ft = random_tensor({2, 8, 16}, rng), fp = random_tensor({2, 8, 16}, rng);
    auto p = params_with(random_tensor({1, 4, 1, 1}, rng), 0.0f);
    auto argmax = [](const Tensor& t) {
        return std::size_t(std::max_element(t.values().begin(), t.values().end()) - t.values().begin());
    };
    const std::size_t base = argmax(attention_final_map(ft, fp, grid, p));
    for (float s : {0.5f, 2.0f, 3.0f}) {
        Tensor a = ft, b = fp;
        for (auto& v : a.data()) v *= s;
        for (auto& v : b.data()) v *= s;
        CHECK(argmax(attention_final_map(a, b, grid, p)) == base);
    }
}

TEST_CASE("attention gradients match finite differences") {
    ErpGrid grid(4);
    Rng rng(8);
    act360::testing::Inputs in{{"f", random_tensor<double>({2, 4, 8}, rng)},
                               {"prev", random_tensor<double>({2, 4, 8}, rng)},
                               {"w", random_tensor<double>({1, 4, 1, 1}, rng)},
                               {"b", random_tensor<double>({1}, rng)}};
    auto build = [&](Tape<double>&, std::map<std::string, Var<double>>& v) {
        auto y = apply_attention(v["f"], v["prev"], v["w"], v["b"], grid, 3.0);
        return ad::sum(ad::mul(y, y));
    };
    CHECK(worst_grad_error(in, build) < 1e-4);
}
