#include "tsrep/sigreg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>

#include "tsrep/errors.hpp"
#include "tsrep/util.hpp"

namespace tsrep {

void EppsPulleyConfig::validate() const {
    if (n_projections < 1) throw ContractError("sigreg: n_projections must be >= 1");
    if (grid_points < 2) throw ContractError("sigreg: grid needs at least 2 points");
    if (!(grid_max > 0.0)) throw ContractError("sigreg: grid_max must be positive");
}

std::vector<double> EppsPulleyConfig::grid() const {
    std::vector<double> t(grid_points);
    const double h = 2.0 * grid_max / static_cast<double>(grid_points - 1);
    for (std::size_t k = 0; k < grid_points; ++k) t[k] = -grid_max + h * static_cast<double>(k);
    return t;
}

std::vector<double> trapezoid_weights(const EppsPulleyConfig& cfg) {
    cfg.validate();
    const double h = 2.0 * cfg.grid_max / static_cast<double>(cfg.grid_points - 1);
    std::vector<double> w(cfg.grid_points, h);
    w.front() = w.back() = 0.5 * h;
    return w;
}

ProjectionSet sample_projections(std::size_t d_model, const EppsPulleyConfig& cfg, std::uint64_t step) {
    cfg.validate();
    if (d_model < 1) throw ContractError("sample_projections: d_model must be >= 1");
    auto rng = make_rng(cfg.seed, step);
    std::normal_distribution<double> normal(0.0, 1.0);
    ProjectionSet set;
    set.dim = d_model;
    set.directions.resize(cfg.n_projections * d_model);
    std::vector<double> v(d_model);
    for (std::size_t a = 0; a < cfg.n_projections; ++a) {
        double norm2 = 0.0;
        do {
            norm2 = 0.0;
            for (auto& x : v) {
                x = normal(rng);
                norm2 += x * x;
            }
        } while (norm2 == 0.0);
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t j = 0; j < d_model; ++j) set.directions[a * d_model + j] = static_cast<float>(v[j] * inv);
    }
    return set;
}

std::pair<double, double> empirical_cf(std::span<const float> projected, double t) {
    if (projected.empty()) throw ContractError("empirical_cf: empty sample");
    double re = 0.0, im = 0.0;
    for (float x : projected) {
        re += std::cos(t * x);
        im += std::sin(t * x);
    }
    const double n = static_cast<double>(projected.size());
    return {re / n, im / n};
}

namespace {

struct GridTerms {
    std::vector<double> t, quad, target;  // quad = trapezoid weight * e^{-t^2/2}
};

GridTerms grid_terms(const EppsPulleyConfig& cfg) {
    GridTerms g;
    g.t = cfg.grid();
    const auto h = trapezoid_weights(cfg);
    g.quad.resize(g.t.size());
    g.target.resize(g.t.size());
    for (std::size_t k = 0; k < g.t.size(); ++k) {
        g.target[k] = std::exp(-0.5 * g.t[k] * g.t[k]);
        g.quad[k] = h[k] * g.target[k];
    }
    return g;
}

// e^{i t_k y} for the whole grid by repeated multiplication from t_0.
template <typename F>
void for_each_phase(double y, const EppsPulleyConfig& cfg, F&& f) {
    const double h = 2.0 * cfg.grid_max / static_cast<double>(cfg.grid_points - 1);
    std::complex<double> z = std::polar(1.0, -cfg.grid_max * y);
    const std::complex<double> step = std::polar(1.0, h * y);
    for (std::size_t k = 0; k < cfg.grid_points; ++k) {
        f(k, z.real(), z.imag());
        z *= step;
    }
}

// Projected values [N, M] in double.
std::vector<double> project(std::span<const float> x, std::size_t n, std::size_t d, const ProjectionSet& p) {
    const std::size_t m = p.count();
    std::vector<double> y(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const float* row = x.data() + i * d;
        for (std::size_t a = 0; a < m; ++a) {
            const float* dir = p.directions.data() + a * d;
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += static_cast<double>(row[j]) * dir[j];
            y[i * m + a] = acc;
        }
    }
    return y;
}

struct CfSums {
    std::vector<double> re, im;  // [M, K] empirical CF
    std::vector<double> residual;  // [M]
};

CfSums evaluate(const std::vector<double>& y, std::size_t n, std::size_t m, const EppsPulleyConfig& cfg,
                const GridTerms& g) {
    const std::size_t K = cfg.grid_points;
    CfSums s;
    s.re.assign(m * K, 0.0);
    s.im.assign(m * K, 0.0);
    s.residual.assign(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < m; ++a) {
            double* re = s.re.data() + a * K;
            double* im = s.im.data() + a * K;
            for_each_phase(y[i * m + a], cfg, [&](std::size_t k, double c, double sn) {
                re[k] += c;
                im[k] += sn;
            });
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t a = 0; a < m; ++a) {
        double r = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            double& re = s.re[a * K + k];
            double& im = s.im[a * K + k];
            re *= inv_n;
            im *= inv_n;
            const double dr = re - g.target[k];
            r += g.quad[k] * (dr * dr + im * im);
        }
        s.residual[a] = static_cast<double>(n) * r;
    }
    return s;
}

Tensor standardized(const Tensor& x) {
    const Tensor mu = ops::mean(x, 0);
    const Tensor var = ops::variance(x, 0);
    return (x - mu) / ops::sqrt(var + 1e-5f);
}

void check_input(const Tensor& embeddings) {
    if (embeddings.rank() != 2) throw ShapeError("epps_pulley: embeddings must be [N, D], got " + shape_str(embeddings.shape()));
    if (embeddings.dim(0) < 2) throw ContractError("epps_pulley: need N >= 2 samples");
}

}  // namespace

double epps_pulley_residual(std::span<const double> projected, const EppsPulleyConfig& cfg) {
    cfg.validate();
    if (projected.empty()) throw ContractError("epps_pulley_residual: empty sample");
    const auto g = grid_terms(cfg);
    std::vector<double> y(projected.begin(), projected.end());
    return evaluate(y, y.size(), 1, cfg, g).residual[0];
}

std::vector<double> epps_pulley_residuals(const Tensor& embeddings, const EppsPulleyConfig& cfg, std::uint64_t step) {
    check_input(embeddings);
    cfg.validate();
    NoGradGuard no_grad;
    const Tensor x = cfg.standardize ? standardized(embeddings) : embeddings;
    const std::size_t n = x.dim(0), d = x.dim(1);
    const auto proj = sample_projections(d, cfg, step);
    const auto y = project(x.data(), n, d, proj);
    return evaluate(y, n, proj.count(), cfg, grid_terms(cfg)).residual;
}

Tensor epps_pulley_statistic(const Tensor& embeddings, const EppsPulleyConfig& cfg, std::uint64_t step) {
    check_input(embeddings);
    cfg.validate();
    const Tensor x = cfg.standardize ? standardized(embeddings) : embeddings;
    const std::size_t n = x.dim(0), d = x.dim(1);
    auto proj = std::make_shared<ProjectionSet>(sample_projections(d, cfg, step));
    const std::size_t m = proj->count();
    auto y = std::make_shared<std::vector<double>>(project(x.data(), n, d, *proj));
    const auto g = grid_terms(cfg);
    auto sums = std::make_shared<CfSums>(evaluate(*y, n, m, cfg, g));
    double total = 0.0;
    for (double r : sums->residual) total += r;
    const double value = total / static_cast<double>(m);

    return make_result("epps_pulley", {}, {static_cast<float>(value)}, {x},
                       [=, cfg = cfg](Node& out) {
                           Node& in = *out.inputs[0];
                           if (!in.requires_grad) return;
                           const double go = out.grad[0];
                           const std::size_t K = cfg.grid_points;
                           // d value / d y[i, a]
                           std::vector<double> coef(m * K);
                           for (std::size_t a = 0; a < m; ++a)
                               for (std::size_t k = 0; k < K; ++k)
                                   coef[a * K + k] = 2.0 * g.quad[k] * g.t[k] / static_cast<double>(m);
                           std::vector<float> gx(n * d, 0.0f);
                           std::vector<double> row(d);
                           for (std::size_t i = 0; i < n; ++i) {
                               std::fill(row.begin(), row.end(), 0.0);
                               for (std::size_t a = 0; a < m; ++a) {
                                   const double* re = sums->re.data() + a * K;
                                   const double* im = sums->im.data() + a * K;
                                   const double* cf = coef.data() + a * K;
                                   double dy = 0.0;
                                   for_each_phase((*y)[i * m + a], cfg, [&](std::size_t k, double c, double s) {
                                       dy += cf[k] * (-(re[k] - g.target[k]) * s + im[k] * c);
                                   });
                                   const float* dir = proj->directions.data() + a * d;
                                   for (std::size_t j = 0; j < d; ++j) row[j] += dy * dir[j];
                               }
                               for (std::size_t j = 0; j < d; ++j) gx[i * d + j] = static_cast<float>(go * row[j]);
                           }
                           accumulate(in, gx);
                       });
}

SpectrumDiagnostics covariance_spectrum(const Tensor& embeddings) {
    if (embeddings.rank() != 2 || embeddings.dim(0) < 2)
        throw ShapeError("covariance_spectrum: need [N >= 2, D] embeddings");
    const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
    Eigen::MatrixXd x(n, d);
    const auto data = embeddings.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) x(Eigen::Index(i), Eigen::Index(j)) = data[i * d + j];
    const Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw NumericError("covariance_spectrum: eigen-decomposition failed");
    SpectrumDiagnostics out;
    const auto& ev = solver.eigenvalues();
    out.eigenvalues.assign(ev.data(), ev.data() + ev.size());
    std::sort(out.eigenvalues.begin(), out.eigenvalues.end(), std::greater<>());
    double sum = 0.0;
    for (double& v : out.eigenvalues) {
        v = std::max(v, 0.0);
        sum += v;
    }
    if (sum > 0.0) {
        double entropy = 0.0;
        for (double v : out.eigenvalues)
            if (v > 0.0) entropy -= (v / sum) * std::log(v / sum);
        out.effective_rank = std::exp(entropy);
    }
    double std_sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) std_sum += std::sqrt(std::max(cov(Eigen::Index(j), Eigen::Index(j)), 0.0));
    out.mean_std = std_sum / static_cast<double>(d);
    return out;
}

}  // namespace tsrep
