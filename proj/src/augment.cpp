#include "tsrep/augment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <numeric>

#include "tsrep/errors.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

namespace {

struct FamilyInfo {
    TransformFamily family;
    const char* name;
    MagnitudeRange range;
};

constexpr float kQuarterPi = std::numbers::pi_v<float> / 4.0f;

const FamilyInfo kFamilies[] = {
    {TransformFamily::jitter, "jitter", {0.0f, 1.0f, false}},
    {TransformFamily::amp_scale, "amp_scale", {0.0f, 0.99f, false}},
    {TransformFamily::channel_dropout, "channel_dropout", {0.0f, 1.0f, false}},
    {TransformFamily::fft_mask, "fft_mask", {0.0f, 1.0f, false}},
    {TransformFamily::galilean, "galilean", {-0.5f, 0.5f, false}},
    {TransformFamily::drift, "drift", {-5.0f, 5.0f, false}},
    {TransformFamily::rotation, "rotation", {-kQuarterPi, kQuarterPi, false}},
    {TransformFamily::lorentz, "lorentz", {-1.0f, 1.0f, true}},
    {TransformFamily::polar, "polar", {-1.0f, 1.0f, false}},
    {TransformFamily::tanh_compress, "tanh_compress", {0.0f, 10.0f, false}},
    {TransformFamily::moebius, "moebius", {-1.0f, 1.0f, true}},
};

const FamilyInfo& info(TransformFamily f) {
    for (const auto& i : kFamilies)
        if (i.family == f) return i;
    throw ContractError("unknown transform family");
}

// FFTW planning is not thread-safe.
std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

std::vector<float> resample_pairs(std::vector<double> ts, std::vector<double> xs, std::size_t T) {
    std::vector<std::size_t> order(ts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ts[a] < ts[b]; });
    std::vector<double> st(ts.size()), sx(ts.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        st[i] = ts[order[i]];
        sx[i] = xs[order[i]];
    }
    std::vector<float> out(T);
    for (std::size_t i = 0; i < T; ++i) {
        const double t = T > 1 ? static_cast<double>(i) / static_cast<double>(T - 1) : 0.0;
        out[i] = static_cast<float>(interpolate(st, sx, t));
    }
    return out;
}

double t_norm(std::size_t i, std::size_t T) { return T > 1 ? static_cast<double>(i) / static_cast<double>(T - 1) : 0.0; }

}  // namespace

std::string to_string(TransformFamily family) { return info(family).name; }

TransformFamily parse_transform_family(const std::string& name) {
    for (const auto& i : kFamilies)
        if (name == i.name) return i.family;
    throw ContractError("unknown transform family '" + name + "'");
}

bool is_stochastic(TransformFamily f) {
    return f == TransformFamily::jitter || f == TransformFamily::amp_scale || f == TransformFamily::channel_dropout ||
           f == TransformFamily::fft_mask;
}

MagnitudeRange legal_range(TransformFamily family) { return info(family).range; }

void TransformSpec::validate() const {
    const MagnitudeRange r = legal_range(family);
    const bool ok = r.open ? (magnitude > r.lo && magnitude < r.hi) : (magnitude >= r.lo && magnitude <= r.hi);
    if (!ok) {
        throw ContractError(to_string(family) + ": magnitude " + std::to_string(magnitude) + " outside " +
                            (r.open ? "(" : "[") + std::to_string(r.lo) + ", " + std::to_string(r.hi) +
                            (r.open ? ")" : "]"));
    }
}

std::vector<TransformSpec> default_stochastic_suite() {
    return {{TransformFamily::jitter, 0.05f},
            {TransformFamily::amp_scale, 0.2f},
            {TransformFamily::channel_dropout, 0.2f},
            {TransformFamily::fft_mask, 0.3f}};
}

ViewPair make_dwt_views(const SeriesBatch& batch, const DwtConfig& cfg, std::uint64_t seed) {
    ViewPair views;
    views.teacher.reserve(batch.size());
    views.student.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        views.teacher.push_back(teacher_view(s, cfg));
        views.provenance.teacher_threshold.push_back(
            static_cast<float>(universal_threshold(dwt_forward(s, cfg), cfg.teacher_sigma)));
        auto rng = make_rng(seed, i);
        StudentDraw draw;
        views.student.push_back(student_view(s, cfg, rng, &draw));
        views.provenance.student_noise.push_back(draw.noise_amplitude);
        views.provenance.student_zeroed.push_back(draw.zeroed);
    }
    return views;
}

double interpolate(std::span<const double> xs, std::span<const double> ys, double at) {
    if (xs.empty()) throw ContractError("interpolate: empty abscissa");
    if (at <= xs.front()) return ys.front();
    if (at >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), at);
    const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
    const std::size_t lo = hi - 1;
    const double span = xs[hi] - xs[lo];
    if (span <= 0.0) return ys[lo];
    const double w = (at - xs[lo]) / span;
    return ys[lo] + w * (ys[hi] - ys[lo]);
}

std::vector<float> fft_mask(std::span<const float> series, std::span<const std::size_t> zero_bins) {
    const std::size_t n = series.size();
    if (n == 0) return {};
    const std::size_t bins = n / 2 + 1;
    std::vector<double> in(series.begin(), series.end());
    std::vector<fftw_complex> spec(bins);
    std::vector<double> out(n);
    fftw_plan fwd, inv;
    {
        std::lock_guard lock(fftw_planner_mutex());
        fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(), spec.data(), FFTW_ESTIMATE);
        inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec.data(), out.data(), FFTW_ESTIMATE);
    }
    fftw_execute(fwd);
    for (std::size_t b : zero_bins) {
        if (b >= bins) throw ContractError("fft_mask: bin index out of range");
        spec[b][0] = 0.0;
        spec[b][1] = 0.0;
    }
    fftw_execute(inv);
    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(inv);
    }
    std::vector<float> result(n);
    for (std::size_t i = 0; i < n; ++i) result[i] = static_cast<float>(out[i] / static_cast<double>(n));
    return result;
}

SeriesBatch stochastic_suite(const SeriesBatch& batch, const TransformSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    if (!is_stochastic(spec.family)) throw ContractError(to_string(spec.family) + " is not a stochastic transform");
    SeriesBatch out = batch;
    const float m = spec.magnitude;
    if (m == 0.0f) return out;
    switch (spec.family) {
        case TransformFamily::jitter: {
            std::normal_distribution<float> noise(0.0f, m);
            for (auto& s : out)
                for (auto& v : s) v += noise(rng);
            break;
        }
        case TransformFamily::amp_scale: {
            std::uniform_real_distribution<float> scale(1.0f - m, 1.0f + m);
            for (auto& s : out) {
                const float u = scale(rng);
                for (auto& v : s) v *= u;
            }
            break;
        }
        case TransformFamily::channel_dropout: {
            std::bernoulli_distribution drop(m);
            for (auto& s : out)
                if (drop(rng)) std::fill(s.begin(), s.end(), 0.0f);
            break;
        }
        case TransformFamily::fft_mask: {
            for (auto& s : out) {
                const std::size_t bins = s.size() / 2 + 1;
                const auto k = static_cast<std::size_t>(std::lround(m * static_cast<double>(bins)));
                std::vector<std::size_t> idx(bins);
                std::iota(idx.begin(), idx.end(), 0);
                for (std::size_t i = 0; i < k; ++i) {
                    std::uniform_int_distribution<std::size_t> pick(i, bins - 1);
                    std::swap(idx[i], idx[pick(rng)]);
                }
                idx.resize(k);
                s = fft_mask(s, idx);
            }
            break;
        }
        default:
            break;
    }
    return out;
}

std::vector<float> physics_suite(std::span<const float> series, const TransformSpec& spec) {
    spec.validate();
    if (is_stochastic(spec.family)) throw ContractError(to_string(spec.family) + " is not a physics transform");
    const std::size_t T = series.size();
    const double m = spec.magnitude;
    std::vector<float> out(series.begin(), series.end());
    if (T == 0) return out;
    switch (spec.family) {
        case TransformFamily::galilean: {
            // y(t) = x(t / (1 + m)) on the sample grid.
            std::vector<double> xs(T), ys(series.begin(), series.end());
            std::iota(xs.begin(), xs.end(), 0.0);
            for (std::size_t i = 0; i < T; ++i) out[i] = static_cast<float>(interpolate(xs, ys, static_cast<double>(i) / (1.0 + m)));
            break;
        }
        case TransformFamily::drift:
            for (std::size_t i = 0; i < T; ++i)
                out[i] = static_cast<float>(series[i] + m * static_cast<double>(i) / static_cast<double>(T));
            break;
        case TransformFamily::rotation: {
            if (m == 0.0) break;
            std::vector<double> ts(T), xs(T);
            const double c = std::cos(m), s = std::sin(m);
            for (std::size_t i = 0; i < T; ++i) {
                const double t = t_norm(i, T);
                ts[i] = c * t - s * series[i];
                xs[i] = s * t + c * series[i];
            }
            out = resample_pairs(std::move(ts), std::move(xs), T);
            break;
        }
        case TransformFamily::lorentz: {
            const double gamma = 1.0 / std::sqrt(1.0 - m * m);
            for (std::size_t i = 0; i < T; ++i) out[i] = static_cast<float>(gamma * (series[i] - m * t_norm(i, T)));
            break;
        }
        case TransformFamily::polar: {
            if (m == 0.0) break;
            std::vector<double> ts(T), xs(T);
            for (std::size_t i = 0; i < T; ++i) {
                const double t = t_norm(i, T);
                const double r = std::hypot(t, double(series[i]));
                const double phi = std::atan2(double(series[i]), t) * (1.0 + m);
                ts[i] = r * std::cos(phi);
                xs[i] = r * std::sin(phi);
            }
            out = resample_pairs(std::move(ts), std::move(xs), T);
            break;
        }
        case TransformFamily::tanh_compress:
            if (m == 0.0) break;
            for (std::size_t i = 0; i < T; ++i) out[i] = static_cast<float>(std::tanh(m * series[i]) / m);
            break;
        case TransformFamily::moebius: {
            // Value coordinate scaled into the disk of radius 0.999.
            double peak = 0.0;
            for (float v : series) peak = std::max(peak, std::abs(double(v)));
            if (peak == 0.0 || m == 0.0) break;
            const double scale = peak / 0.999;
            for (std::size_t i = 0; i < T; ++i) {
                const double z = series[i] / scale;
                out[i] = static_cast<float>((z + m) / (1.0 + m * z) * scale);
            }
            break;
        }
        default:
            break;
    }
    return out;
}

SeriesBatch apply_transform(const SeriesBatch& batch, const TransformSpec& spec, std::mt19937_64& rng) {
    if (is_stochastic(spec.family)) return stochastic_suite(batch, spec, rng);
    SeriesBatch out;
    out.reserve(batch.size());
    for (const auto& s : batch) out.push_back(physics_suite(s, spec));
    return out;
}

}  // namespace tsrep
