#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "i2i/tensor.hpp"

namespace i2i {

class CatalogueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The public catalogue comes first; the trailing entries are helpers emitted
// when building input-gradient graphs.
enum class OpKind : std::uint8_t {
  linear,
  conv2d,
  conv_transpose2d,
  batchnorm2d,
  instancenorm2d,
  relu,
  leaky_relu,
  tanh,
  sigmoid,
  add,
  mul,
  scale,
  concat,
  flatten,
  global_avg_pool,
  bilinear_resize,
  l1_loss,
  mse_loss,
  softmax_cross_entropy,
  sum,
  mean,
  sqrt,
  norm2,
  // helpers
  matmul,
  reshape,
  expand_scalar,
  spatial_broadcast,
};

inline constexpr std::array<std::string_view, 27> kOpNames = {
    "linear",          "conv2d",          "conv_transpose2d", "batchnorm2d",
    "instancenorm2d",  "relu",            "leaky_relu",       "tanh",
    "sigmoid",         "add",             "mul",              "scale",
    "concat",          "flatten",         "global_avg_pool",  "bilinear_resize",
    "l1_loss",         "mse_loss",        "softmax_cross_entropy", "sum",
    "mean",            "sqrt",            "norm2",            "matmul",
    "reshape",         "expand_scalar",   "spatial_broadcast"};

inline std::string_view op_name(OpKind kind) {
  auto i = static_cast<std::size_t>(kind);
  if (i >= kOpNames.size()) throw CatalogueError("op kind " + std::to_string(i) + " is not in the catalogue");
  return kOpNames[i];
}

inline OpKind op_kind_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i)
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  throw CatalogueError("unknown op kind '" + std::string(name) + "'");
}

struct OpAttrs {
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t output_padding = 0;
  double slope = 0.0;   // leaky_relu
  double factor = 1.0;  // scale
  double eps = 1e-5;    // normalization
  bool training = true; // batchnorm2d
  std::int64_t axis = 1;
  std::int64_t out_h = 0;
  std::int64_t out_w = 0;
  std::vector<int> labels;  // softmax_cross_entropy targets
  Shape shape;              // reshape / expand_scalar target
};

}  // namespace i2i
