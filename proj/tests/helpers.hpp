#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pemm/rng.hpp"
#include "pemm/tensor.hpp"

namespace testutil {

/// Tensor with standard-normal entries from a private stream.
inline pemm::Tensor rand_tensor(pemm::Shape shape, std::uint64_t seed,
                                double scl = 1.0, bool requires_grad = true) {
    pemm::Rng rng(seed);
    std::vector<double> v(pemm::shape_numel(shape));
    for (double& x : v) x = scl * rng.normal();
    return pemm::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<int> rand_labels(std::size_t n, std::size_t k,
                                    std::uint64_t seed) {
    pemm::Rng rng(seed);
    std::vector<int> labels(n);
    for (int& l : labels) l = static_cast<int>(rng.below(k));
    return labels;
}

/// Unique scratch directory under the system temp dir, wiped on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("pemm_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

} // namespace testutil
