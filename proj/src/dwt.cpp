#include "tsrep/dwt.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "tsrep/errors.hpp"

namespace tsrep {

namespace {

// Scaling (reconstruction low-pass) coefficients, db1..db8.
const std::array<std::vector<double>, 8> kScaling = {{
    {0.7071067811865476, 0.7071067811865476},
    {0.48296291314453416, 0.8365163037378079, 0.2241438680420134, -0.12940952255126037},
    {0.33267055295008263, 0.8068915093110925, 0.45987750211849154, -0.13501102001025458, -0.08544127388202666,
     0.03522629188570953},
    {0.2303778133088965, 0.7148465705529157, 0.6308807679298589, -0.027983769416859854, -0.18703481171909309,
     0.030841381835560764, 0.0328830116668852, -0.010597401785069032},
    {0.16010239797419293, 0.6038292697971896, 0.7243085284377729, 0.13842814590132074, -0.24229488706638203,
     -0.032244869584638375, 0.07757149384004572, -0.006241490212798274, -0.012580751999081999,
     0.0033357252854737712},
    {0.11154074335010947, 0.49462389039845306, 0.7511339080210954, 0.31525035170919763, -0.22626469396543983,
     -0.12976686756726194, 0.09750160558732304, 0.027522865530305727, -0.03158203931748603, 0.0005538422011614961,
     0.004777257510945511, -0.0010773010853084796},
    {0.07785205408500918, 0.3965393194819173, 0.7291320908462351, 0.4697822874051931, -0.14390600392856498,
     -0.22403618499387498, 0.07130921926683026, 0.08061260915108308, -0.03802993693501441, -0.01657454163066688,
     0.01255099855609984, 0.0004295779729213665, -0.0018016407040474908, 0.00035371379997452024},
    {0.05441584224310401, 0.31287159091429995, 0.6756307362972898, 0.5853546836542067, -0.015829105256349306,
     -0.2840155429615469, 0.0004724845739132828, 0.12874742662047847, -0.017369301001807547, -0.044088253930794755,
     0.013981027917398282, 0.008746094047405777, -0.004870352993451574, -0.00039174037337694705,
     0.0006754494064505693, -0.00011747678412476953},
}};

Wavelet build(int order) {
    Wavelet w;
    w.order = order;
    w.rec_lo = kScaling[static_cast<std::size_t>(order - 1)];
    const std::size_t F = w.rec_lo.size();
    w.dec_lo.assign(w.rec_lo.rbegin(), w.rec_lo.rend());
    w.dec_hi.resize(F);
    for (std::size_t k = 0; k < F; ++k) w.dec_hi[k] = (k % 2 == 0 ? -1.0 : 1.0) * w.rec_lo[k];
    w.rec_hi.assign(w.dec_hi.rbegin(), w.dec_hi.rend());
    return w;
}

// Half-sample symmetric extension: x[-1] = x[0], x[n] = x[n-1].
std::size_t reflect(std::ptrdiff_t m, std::size_t n) {
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    std::ptrdiff_t r = m % period;
    if (r < 0) r += period;
    if (r >= static_cast<std::ptrdiff_t>(n)) r = period - 1 - r;
    return static_cast<std::size_t>(r);
}

}  // namespace

const Wavelet& daubechies(int order) {
    static const std::array<Wavelet, 8> bank = [] {
        std::array<Wavelet, 8> b;
        for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = build(i + 1);
        return b;
    }();
    if (order < 1 || order > 8) throw ContractError("daubechies: order must be in 1..8, got " + std::to_string(order));
    return bank[static_cast<std::size_t>(order - 1)];
}

void DwtConfig::validate() const {
    if (order < 1 || order > 8) throw ContractError("dwt: wavelet order must be in 1..8");
    if (level < 1) throw ContractError("dwt: level must be >= 1");
    if (!(zero_out_fraction >= 0.0f && zero_out_fraction <= 1.0f))
        throw ContractError("dwt: zero_out_fraction must be in [0, 1]");
    if (!(teacher_sigma >= 0.0f)) throw ContractError("dwt: teacher_sigma must be >= 0");
    if (!(noise_lo >= 0.0f && noise_hi >= noise_lo)) throw ContractError("dwt: invalid student noise range");
}

void DwtConfig::validate_for(std::size_t length) const {
    validate();
    if (level >= 63 || (std::size_t{1} << level) > length)
        throw ContractError("dwt: 2^level exceeds series length " + std::to_string(length));
    if (length < daubechies(order).length())
        throw ContractError("dwt: series length " + std::to_string(length) + " shorter than db" + std::to_string(order) +
                            " filter");
}

std::size_t Pyramid::coefficient_count() const {
    std::size_t n = approx.size();
    for (const auto& d : details) n += d.size();
    return n;
}

void dwt_step(std::span<const double> x, const Wavelet& w, std::vector<double>& approx, std::vector<double>& detail) {
    const std::size_t n = x.size();
    const std::size_t F = w.length();
    const std::size_t out = (n + F - 1) / 2;
    approx.assign(out, 0.0);
    detail.assign(out, 0.0);
    for (std::size_t k = 0; k < out; ++k) {
        double a = 0.0, d = 0.0;
        for (std::size_t j = 0; j < F; ++j) {
            const double v = x[reflect(static_cast<std::ptrdiff_t>(2 * k + 1) - static_cast<std::ptrdiff_t>(j), n)];
            a += w.dec_lo[j] * v;
            d += w.dec_hi[j] * v;
        }
        approx[k] = a;
        detail[k] = d;
    }
}

std::vector<double> idwt_step(std::span<const double> approx, std::span<const double> detail, const Wavelet& w,
                              std::size_t out_len) {
    if (approx.size() != detail.size()) throw ContractError("dwt_inverse: approx/detail band lengths differ");
    const std::size_t F = w.length();
    if (approx.size() != (out_len + F - 1) / 2)
        throw ContractError("dwt_inverse: band length " + std::to_string(approx.size()) +
                            " inconsistent with output length " + std::to_string(out_len));
    std::vector<double> x(out_len, 0.0);
    // Adjoint of the orthonormal analysis operator.
    for (std::size_t k = 0; k < approx.size(); ++k) {
        const std::ptrdiff_t centre = static_cast<std::ptrdiff_t>(2 * k + 1);
        for (std::size_t j = 0; j < F; ++j) {
            const std::ptrdiff_t m = centre - static_cast<std::ptrdiff_t>(j);
            if (m < 0 || m >= static_cast<std::ptrdiff_t>(out_len)) continue;
            x[static_cast<std::size_t>(m)] += w.dec_lo[j] * approx[k] + w.dec_hi[j] * detail[k];
        }
    }
    return x;
}

Pyramid dwt_forward(std::span<const float> signal, int order, int level) {
    DwtConfig cfg;
    cfg.order = order;
    cfg.level = level;
    return dwt_forward(signal, cfg);
}

Pyramid dwt_forward(std::span<const float> signal, const DwtConfig& cfg) {
    cfg.validate_for(signal.size());
    const Wavelet& w = daubechies(cfg.order);
    Pyramid p;
    p.order = cfg.order;
    std::vector<double> current(signal.begin(), signal.end());
    for (int l = 0; l < cfg.level; ++l) {
        p.lengths.push_back(current.size());
        std::vector<double> a, d;
        dwt_step(current, w, a, d);
        p.details.push_back(std::move(d));
        current = std::move(a);
    }
    p.approx = std::move(current);
    return p;
}

std::vector<float> dwt_inverse(const Pyramid& pyramid) {
    if (pyramid.details.empty() || pyramid.lengths.size() != pyramid.details.size())
        throw ContractError("dwt_inverse: pyramid has no levels or inconsistent length record");
    const Wavelet& w = daubechies(pyramid.order);
    std::vector<double> current = pyramid.approx;
    for (std::size_t l = pyramid.details.size(); l-- > 0;) {
        current = idwt_step(current, pyramid.details[l], w, pyramid.lengths[l]);
    }
    return std::vector<float>(current.begin(), current.end());
}

float soft_threshold(float x, float tau) {
    const float mag = std::abs(x) - tau;
    return mag > 0.0f ? std::copysign(mag, x) : 0.0f;
}

double soft_threshold(double x, double tau) {
    const double mag = std::abs(x) - tau;
    return mag > 0.0 ? std::copysign(mag, x) : 0.0;
}

double median_abs(std::span<const double> values) {
    if (values.empty()) return 0.0;
    std::vector<double> a(values.size());
    std::transform(values.begin(), values.end(), a.begin(), [](double v) { return std::abs(v); });
    const std::size_t mid = a.size() / 2;
    std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(mid), a.end());
    if (a.size() % 2 == 1) return a[mid];
    const double hi = a[mid];
    const double lo = *std::max_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

double universal_threshold(const Pyramid& pyramid, float sigma) {
    if (pyramid.details.empty()) return 0.0;
    return sigma * median_abs(pyramid.details.front()) / 0.6745;
}

std::vector<float> teacher_view(std::span<const float> signal, const DwtConfig& cfg) {
    Pyramid p = dwt_forward(signal, cfg);
    const double tau = universal_threshold(p, cfg.teacher_sigma);
    for (auto& band : p.details)
        for (auto& d : band) d = soft_threshold(d, tau);
    return dwt_inverse(p);
}

std::vector<float> student_view(std::span<const float> signal, const DwtConfig& cfg, std::mt19937_64& rng,
                                StudentDraw* draw) {
    Pyramid p = dwt_forward(signal, cfg);
    std::uniform_real_distribution<float> amp_dist(cfg.noise_lo, cfg.noise_hi);
    const float amplitude = cfg.noise_hi > cfg.noise_lo ? amp_dist(rng) : cfg.noise_lo;
    if (amplitude > 0.0f) {
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        for (auto& band : p.details)
            for (auto& d : band) d += amplitude * unit(rng);
    }
    if (cfg.student_threshold) {
        const double tau = universal_threshold(p, cfg.teacher_sigma);
        for (auto& band : p.details)
            for (auto& d : band) d = soft_threshold(d, tau);
    }
    auto& finest = p.details.front();
    const auto n_zero = static_cast<std::size_t>(std::lround(cfg.zero_out_fraction * static_cast<double>(finest.size())));
    if (n_zero > 0) {
        std::vector<std::size_t> idx(finest.size());
        std::iota(idx.begin(), idx.end(), 0);
        // Partial Fisher-Yates: first n_zero entries are a uniform subset.
        for (std::size_t i = 0; i < n_zero; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
            finest[idx[i]] = 0.0;
        }
    }
    if (draw) *draw = {amplitude, n_zero};
    return dwt_inverse(p);
}

}  // namespace tsrep
