#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace skd {

/// Row-major dense matrix. Batches are stored one sample per row.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Real = float;

struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;

    [[nodiscard]] int plane() const { return height * width; }
    [[nodiscard]] int size() const { return channels * height * width; }
    [[nodiscard]] std::string str() const {
        return "(" + std::to_string(channels) + "," + std::to_string(height) + "," +
               std::to_string(width) + ")";
    }
    friend bool operator==(const Shape&, const Shape&) = default;
};

/// A batch of activations in NCHW order: row b holds sample b, channel planes contiguous.
/// Feature vectors use shape (d, 1, 1).
template <typename Scalar>
struct Activation {
    Matrix<Scalar> values;
    Shape shape;

    Activation() = default;
    Activation(Matrix<Scalar> v, Shape s) : values(std::move(v)), shape(s) {
        if (values.cols() != shape.size()) {
            throw std::invalid_argument("activation width " + std::to_string(values.cols()) +
                                        " does not match shape " + shape.str());
        }
    }

    [[nodiscard]] int batch() const { return static_cast<int>(values.rows()); }

    static Activation zeros(int batch, Shape s) {
        return Activation(Matrix<Scalar>::Zero(batch, s.size()), s);
    }
    static Activation flat(Matrix<Scalar> v) {
        const Shape s{static_cast<int>(v.cols()), 1, 1};
        return Activation(std::move(v), s);
    }
};

/// Learnable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
    std::string name;
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
    bool decay = true;

    Parameter() = default;
    Parameter(std::string n, Matrix<Scalar> v, bool wd = true)
        : name(std::move(n)), value(std::move(v)), decay(wd) {
        grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    }
    void zero_grad() { grad.setZero(); }
};

/// Non-learnable persistent state (normalization running statistics).
template <typename Scalar>
struct Buffer {
    std::string name;
    Matrix<Scalar>* value = nullptr;
};

/// 64-bit FNV-1a over raw bytes.
class Fnv1a {
public:
    void update(const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            hash_ ^= p[i];
            hash_ *= 1099511628211ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    template <typename Scalar>
    void update(const Matrix<Scalar>& m) {
        const std::int64_t dims[2] = {m.rows(), m.cols()};
        update(dims, sizeof(dims));
        update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(Scalar));
    }
    [[nodiscard]] std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 14695981039346656037ULL;
};

std::string hex_digest(std::uint64_t h);

}  // namespace skd
