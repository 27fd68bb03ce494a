#pragma once

#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "tsrep/backbone.hpp"
#include "tsrep/tensor.hpp"
#include "tsrep/util.hpp"

namespace tsrep::test {

// Unique directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tsrep-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<float> random_vector(std::size_t n, std::mt19937_64& rng, float stddev = 1.0f) {
    std::normal_distribution<float> nd(0.0f, stddev);
    std::vector<float> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

inline std::vector<float> sine(std::size_t n, double cycles, double phase = 0.0, double amp = 1.0) {
    std::vector<float> v(n);
    for (std::size_t t = 0; t < n; ++t)
        v[t] = static_cast<float>(amp * std::sin(2.0 * M_PI * cycles * static_cast<double>(t) / n + phase));
    return v;
}

inline BackboneConfig tiny_backbone(std::size_t layers = 2, std::size_t d_model = 16) {
    BackboneConfig c;
    c.patch_len = 8;
    c.d_model = d_model;
    c.n_heads = 2;
    c.n_layers = layers;
    c.n_predictor_layers = 1;
    c.max_patches = 8;
    return c;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace tsrep::test
