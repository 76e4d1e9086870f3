#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace cpcl {

/// Dense row-major matrix; one instance per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class Modality { Image, Text };

constexpr std::string_view to_string(Modality m) noexcept {
    return m == Modality::Image ? "image" : "text";
}

constexpr Modality opposite(Modality m) noexcept {
    return m == Modality::Image ? Modality::Text : Modality::Image;
}

}  // namespace cpcl
