#ifndef XCODER_TEST_UTIL_HPP
#define XCODER_TEST_UTIL_HPP

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "matrix.hpp"
#include "rng.hpp"

namespace xcoder::testing {

// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir()
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path()
                / ("xcoder_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    const std::filesystem::path &path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

template <typename T = float>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng &rng, double lo = -1.0, double hi = 1.0)
{
    Matrix<T> m(rows, cols);
    for (auto &v : m.flat()) {
        v = static_cast<T>(rng.uniform(lo, hi));
    }
    return m;
}

} // namespace xcoder::testing

#endif
