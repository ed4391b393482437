#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pgsam {

// Error taxonomy shared by every module.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ProviderError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major 2D array. Row index first, column index second.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Grid(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ContractViolation("Grid: data size does not match " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    bool same_shape(const Grid& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool operator==(const Grid&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Image = Grid<float>;
using BinaryGrid = Grid<unsigned char>;

}  // namespace pgsam
