#pragma once

#include <string>
#include <string_view>

#include "mocha/ops.hpp"
#include "mocha/params.hpp"

// Parameterized layers looked up by name under a ParamView prefix.
namespace mocha::layers {

inline std::string key(std::string_view name, std::string_view leaf) { return std::string(name) + "." + std::string(leaf); }

// Full 3x3 (or kxk) convolution, "<name>.w" / "<name>.b".
inline Var conv(const ParamView& p, std::string_view name, Var x, std::size_t dilation = 1) {
  return ops::conv2d(x, p(key(name, "w")), p(key(name, "b")), {dilation, 1});
}
inline Var dwconv(const ParamView& p, std::string_view name, Var x, std::size_t dilation = 1) {
  return ops::depthwise_conv2d(x, p(key(name, "w")), p(key(name, "b")), dilation);
}
// Point-wise convolution / linear projection on the channel axis.
inline Var pconv(const ParamView& p, std::string_view name, Var x) {
  return ops::linear(x, p(key(name, "w")), p(key(name, "b")));
}
inline Var norm(const ParamView& p, std::string_view name, Var x) {
  return ops::layer_norm(x, p(key(name, "g")), p(key(name, "b")));
}

}  // namespace mocha::layers
