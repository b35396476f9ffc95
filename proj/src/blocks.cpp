#include "gridsight/blocks.hpp"

namespace gridsight {

Shape expected_out_shape(const BlockSpec& s, const Shape& in) {
  if (in.size() != 4) throw input_error("expected_out_shape: need N,C,H,W input");
  const int N = in[0], H = in[2], W = in[3];
  auto conv_extent = [](int e, int k, int stride, int pad) {
    return (e + 2 * pad - k) / stride + 1;
  };
  switch (s.kind) {
    case BlockKind::ConvBlock:
      return {N, s.out_channels, conv_extent(H, s.k, s.stride, s.k / 2),
              conv_extent(W, s.k, s.stride, s.k / 2)};
    case BlockKind::RepNBottleneck:
    case BlockKind::RepNCSP:
    case BlockKind::RepNCSPPELAN:
    case BlockKind::SPPELAN:
      return {N, s.out_channels, H, W};
    case BlockKind::ADown:
      return {N, s.out_channels, H / 2, W / 2};
    case BlockKind::Silence:
    case BlockKind::RevCouple:
      return in;
    case BlockKind::Upsample:
      return {N, in[1], H * s.factor, W * s.factor};
    case BlockKind::Concat:
    case BlockKind::CBLinear:
    case BlockKind::CBFuse:
    case BlockKind::Detect:
      throw input_error("expected_out_shape: block has multiple inputs or outputs");
  }
  throw input_error("expected_out_shape: unknown block kind");
}

}  // namespace gridsight
