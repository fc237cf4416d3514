#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace husim {

// Dense types are templated on scalar; correctness tests run in double,
// training may instantiate float for throughput.
template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;

using Real = double;
using Mat = MatrixX<Real>;
using Vec = VectorX<Real>;
using Index = Eigen::Index;

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

}  // namespace husim
