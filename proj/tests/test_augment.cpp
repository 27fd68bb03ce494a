#include "support.hpp"

#include <numeric>

#include "tsrep/augment.hpp"
#include "tsrep/errors.hpp"

using namespace tsrep;
using tsrep::test::max_abs_diff;
using tsrep::test::random_vector;

namespace {

const TransformFamily kAll[] = {TransformFamily::jitter,   TransformFamily::amp_scale, TransformFamily::channel_dropout,
                                TransformFamily::fft_mask, TransformFamily::galilean,  TransformFamily::drift,
                                TransformFamily::rotation, TransformFamily::lorentz,   TransformFamily::polar,
                                TransformFamily::tanh_compress, TransformFamily::moebius};

SeriesBatch random_batch(std::size_t n, std::size_t T, std::uint64_t seed) {
    auto rng = make_rng(seed);
    SeriesBatch b;
    for (std::size_t i = 0; i < n; ++i) b.push_back(random_vector(T, rng));
    return b;
}

}  // namespace

TEST_SUITE("augment") {

TEST_CASE("family names round-trip") {
    for (auto f : kAll) CHECK(parse_transform_family(to_string(f)) == f);
    CHECK_THROWS_AS(parse_transform_family("crop"), ContractError);
}

TEST_CASE("stochastic defaults") {
    auto suite = default_stochastic_suite();
    REQUIRE(suite.size() == 4);
    CHECK(suite[0].family == TransformFamily::jitter);
    CHECK(suite[0].magnitude == doctest::Approx(0.05f));
    CHECK(suite[1].family == TransformFamily::amp_scale);
    CHECK(suite[1].magnitude == doctest::Approx(0.2f));  // U[0.8, 1.2]
    CHECK(suite[2].family == TransformFamily::channel_dropout);
    CHECK(suite[2].magnitude == doctest::Approx(0.2f));
    CHECK(suite[3].family == TransformFamily::fft_mask);
    CHECK(suite[3].magnitude == doctest::Approx(0.3f));
}

TEST_CASE("every transform at magnitude zero is the identity") {
    auto batch = random_batch(3, 96, 1);
    for (auto f : kAll) {
        CAPTURE(to_string(f));
        auto rng = make_rng(2);
        auto out = apply_transform(batch, {f, 0.0f}, rng);
        REQUIRE(out.size() == batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) CHECK(max_abs_diff(out[i], batch[i]) < 1e-4);
    }
}

TEST_CASE("jitter adds noise with the requested spread") {
    SeriesBatch zeros(20, std::vector<float>(500, 0.0f));
    auto rng = make_rng(3);
    auto out = stochastic_suite(zeros, {TransformFamily::jitter, 0.05f}, rng);
    double ss = 0.0;
    for (const auto& s : out)
        for (float v : s) ss += double(v) * v;
    CHECK(std::sqrt(ss / 10000.0) == doctest::Approx(0.05).epsilon(0.05));
}

TEST_CASE("amplitude scale stays in [1 - m, 1 + m] per series") {
    auto batch = random_batch(200, 16, 4);
    auto rng = make_rng(5);
    auto out = stochastic_suite(batch, {TransformFamily::amp_scale, 0.2f}, rng);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const float u = out[i][0] / batch[i][0];
        CHECK(u >= 0.8f - 1e-5f);
        CHECK(u <= 1.2f + 1e-5f);
        for (std::size_t t = 0; t < 16; ++t) CHECK(out[i][t] == doctest::Approx(u * batch[i][t]).epsilon(1e-4));
    }
}

TEST_CASE("channel dropout zeroes whole series at rate p") {
    auto batch = random_batch(2000, 8, 6);
    auto rng = make_rng(7);
    auto out = stochastic_suite(batch, {TransformFamily::channel_dropout, 0.2f}, rng);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool all_zero = std::all_of(out[i].begin(), out[i].end(), [](float v) { return v == 0.0f; });
        if (all_zero) ++dropped;
        else CHECK(out[i] == batch[i]);
    }
    CHECK(double(dropped) / 2000.0 == doctest::Approx(0.2).epsilon(0.15));
}

TEST_CASE("FFT mask at 0% round-trips and 30% zeroes the right bin count") {
    auto rng = make_rng(8);
    auto s = random_vector(128, rng);
    CHECK(max_abs_diff(fft_mask(s, {}), s) < 1e-5);
    auto r0 = make_rng(9);
    CHECK(max_abs_diff(stochastic_suite({s}, {TransformFamily::fft_mask, 0.0f}, r0)[0], s) < 1e-5);

    // Removing the DC bin removes the mean.
    std::vector<std::size_t> dc = {0};
    auto no_dc = fft_mask(s, dc);
    double m = 0.0;
    for (float v : no_dc) m += v;
    CHECK(std::abs(m / 128.0) < 1e-5);
    CHECK_THROWS_AS(fft_mask(s, std::vector<std::size_t>{65}), ContractError);

    // A pure tone survives unless its own bin is masked.
    auto tone = tsrep::test::sine(128, 5.0);
    auto r1 = make_rng(10);
    auto masked = stochastic_suite({tone}, {TransformFamily::fft_mask, 0.3f}, r1)[0];
    const double e = std::inner_product(masked.begin(), masked.end(), masked.begin(), 0.0);
    const double e0 = std::inner_product(tone.begin(), tone.end(), tone.begin(), 0.0);
    CHECK((std::abs(e - e0) < 1e-3 * e0 || e < 1e-6 * e0));
}

TEST_CASE("lorentz boost") {
    auto rng = make_rng(11);
    auto s = random_vector(64, rng);
    CHECK(max_abs_diff(physics_suite(s, {TransformFamily::lorentz, 0.0f}), s) == 0.0);
    const float v = 0.6f;
    auto out = physics_suite(s, {TransformFamily::lorentz, v});
    const double gamma = 1.0 / std::sqrt(1.0 - double(v) * v);
    for (std::size_t i = 0; i < 64; ++i)
        CHECK(out[i] == doctest::Approx(gamma * (s[i] - v * double(i) / 63.0)).epsilon(1e-5));
    CHECK_THROWS_AS(physics_suite(s, {TransformFamily::lorentz, 1.0f}), ContractError);
    CHECK_THROWS_AS(physics_suite(s, {TransformFamily::lorentz, -1.2f}), ContractError);
}

TEST_CASE("tanh compression tends to identity for small magnitude") {
    auto rng = make_rng(12);
    auto s = random_vector(64, rng);
    CHECK(max_abs_diff(physics_suite(s, {TransformFamily::tanh_compress, 1e-3f}), s) < 1e-4);
    auto strong = physics_suite(s, {TransformFamily::tanh_compress, 2.0f});
    for (float v : strong) CHECK(std::abs(v) <= 0.5f + 1e-6f);
}

TEST_CASE("galilean rescale of a ramp scales the slope by 1/(1+m)") {
    const std::size_t T = 100;
    std::vector<float> ramp(T);
    for (std::size_t i = 0; i < T; ++i) ramp[i] = 0.5f * float(i);
    auto out = physics_suite(ramp, {TransformFamily::galilean, 0.1f});
    REQUIRE(out.size() == T);
    for (std::size_t i = 1; i < T; ++i) CHECK(out[i] - out[i - 1] == doctest::Approx(0.5 / 1.1).epsilon(1e-4));
    auto stretch = physics_suite(ramp, {TransformFamily::galilean, -0.2f});
    // Compression runs past the end; the clamp holds the last value there.
    CHECK(stretch[10] == doctest::Approx(0.5 * 10 / 0.8).epsilon(1e-5));
    CHECK(stretch[T - 1] == doctest::Approx(ramp[T - 1]));
}

TEST_CASE("drift adds a linear trend") {
    std::vector<float> z(50, 0.0f);
    auto out = physics_suite(z, {TransformFamily::drift, 2.0f});
    for (std::size_t i = 0; i < 50; ++i) CHECK(out[i] == doctest::Approx(2.0 * i / 50.0));
}

TEST_CASE("rotation, polar and moebius keep length and finiteness") {
    auto rng = make_rng(13);
    auto s = random_vector(80, rng);
    for (auto spec : {TransformSpec{TransformFamily::rotation, 0.3f}, TransformSpec{TransformFamily::polar, 0.4f},
                      TransformSpec{TransformFamily::moebius, 0.5f}}) {
        CAPTURE(to_string(spec.family));
        auto out = physics_suite(s, spec);
        CHECK(out.size() == s.size());
        CHECK(all_finite(out));
        CHECK(max_abs_diff(out, s) > 1e-3);
    }
    // Moebius keeps values inside the scaled disk.
    double peak = 0.0;
    for (float v : s) peak = std::max(peak, double(std::abs(v)));
    for (float v : physics_suite(s, {TransformFamily::moebius, 0.9f})) CHECK(std::abs(v) < peak / 0.999 + 1e-4);
    CHECK_THROWS_AS(physics_suite(s, {TransformFamily::moebius, 1.0f}), ContractError);
    CHECK_THROWS_AS(physics_suite(s, {TransformFamily::rotation, 1.0f}), ContractError);
}

TEST_CASE("rotation by a small angle of a flat series tilts it") {
    std::vector<float> flat(101, 0.0f);
    auto out = physics_suite(flat, {TransformFamily::rotation, 0.1f});
    // (t, 0) rotates to (t cos a, t sin a): resampled slope tan a.
    for (std::size_t i = 1; i < 90; ++i) CHECK(out[i] == doctest::Approx(std::tan(0.1) * i / 100.0).epsilon(1e-4));
}

TEST_CASE("magnitude validation and family dispatch") {
    CHECK_THROWS_AS(TransformSpec({TransformFamily::amp_scale, 1.5f}).validate(), ContractError);
    CHECK_THROWS_AS(TransformSpec({TransformFamily::jitter, -0.1f}).validate(), ContractError);
    auto rng = make_rng(14);
    std::vector<float> s(16, 1.0f);
    CHECK_THROWS_AS(physics_suite(s, {TransformFamily::jitter, 0.1f}), ContractError);
    CHECK_THROWS_AS(stochastic_suite({s}, {TransformFamily::drift, 0.1f}, rng), ContractError);
    auto lr = legal_range(TransformFamily::lorentz);
    CHECK(lr.open);
    CHECK(lr.hi == 1.0f);
}

TEST_CASE("DWT view pairs keep shape and are seed-deterministic") {
    auto batch = random_batch(6, 128, 15);
    DwtConfig cfg;
    auto a = make_dwt_views(batch, cfg, 42);
    auto b = make_dwt_views(batch, cfg, 42);
    auto c = make_dwt_views(batch, cfg, 43);
    REQUIRE(a.teacher.size() == 6);
    REQUIRE(a.student.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a.teacher[i].size() == 128);
        CHECK(a.student[i].size() == 128);
        CHECK(a.teacher[i] == teacher_view(batch[i], cfg));
    }
    CHECK(a.student == b.student);
    CHECK(a.student != c.student);
    CHECK(a.teacher == c.teacher);
    CHECK(a.provenance.student_noise.size() == 6);
    for (float n : a.provenance.student_noise) {
        CHECK(n >= 0.1f);
        CHECK(n <= 0.3f);
    }
}

TEST_CASE("interpolation clamps at the ends") {
    std::vector<double> xs = {0, 1, 2}, ys = {0, 10, 30};
    CHECK(interpolate(xs, ys, -1.0) == 0.0);
    CHECK(interpolate(xs, ys, 0.5) == doctest::Approx(5.0));
    CHECK(interpolate(xs, ys, 1.5) == doctest::Approx(20.0));
    CHECK(interpolate(xs, ys, 3.0) == 30.0);
}

}  // TEST_SUITE
