#include "gz/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif
#include <vector>

namespace gz {
namespace {

template <typename Dtype>
void require_rank(const Tensor<Dtype>& t, std::size_t rank, const char* what) {
  if (t.ndim() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

int conv_out_extent(int in, int k, int stride, int padding) {
  const int span = in + 2 * padding - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

// Range [lo, hi] of output columns whose input column ox*stride - padding + kx
// falls inside [0, in). Empty when hi < lo.
struct ValidRange {
  int lo;
  int hi;
};

ValidRange valid_outputs(int in, int out, int k_offset, int stride, int padding) {
  const int shift = k_offset - padding;  // input index = ox*stride + shift
  int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const int top = in - 1 - shift;
  int hi = top < 0 ? -1 : std::min(out - 1, top / stride);
  return {lo, hi};
}

template <typename Dtype>
void check_conv(const Tensor<Dtype>& input, const Tensor<Dtype>& weight, const Tensor<Dtype>& bias,
                int stride, int padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (stride < 1) throw ArgumentError("conv2d stride must be positive");
  if (padding < 0) throw ArgumentError("conv2d padding must be non-negative");
  if (input.c() != weight.c()) {
    throw ShapeError("conv2d: input has " + std::to_string(input.c()) +
                     " channels but kernel expects " + std::to_string(weight.c()) + " (input " +
                     shape_str(input.shape()) + ", kernel " + shape_str(weight.shape()) + ")");
  }
  if (weight.h() != weight.w()) {
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  }
  if (!bias.empty() && (bias.ndim() != 1 || bias.dim(0) != weight.n())) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(weight.n()) + " output channels");
  }
  if (conv_out_extent(input.h(), weight.h(), stride, padding) < 1 ||
      conv_out_extent(input.w(), weight.w(), stride, padding) < 1) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
}

}  // namespace

namespace {

template <typename Dtype>
struct Simd {
  static constexpr int width = 64 / static_cast<int>(sizeof(Dtype));
  typedef Dtype vec __attribute__((vector_size(64)));
#if defined(__AVX512F__)
  static vec load(const Dtype* p) {
    if constexpr (sizeof(Dtype) == 4) return _mm512_loadu_ps(p);
    else return _mm512_loadu_pd(p);
  }
  static void store(Dtype* p, vec v) {
    if constexpr (sizeof(Dtype) == 4) _mm512_storeu_ps(p, v);
    else _mm512_storeu_pd(p, v);
  }
  static vec splat(Dtype a) {
    if constexpr (sizeof(Dtype) == 4) return _mm512_set1_ps(a);
    else return _mm512_set1_pd(a);
  }
#else
  static vec load(const Dtype* p) {
    vec v;
    std::memcpy(&v, p, sizeof v);
    return v;
  }
  static void store(Dtype* p, vec v) { std::memcpy(p, &v, sizeof v); }
  static vec splat(Dtype a) {
    vec v;
    for (int i = 0; i < width; ++i) v[i] = a;
    return v;
  }
#endif
  // acc + a*b with a single rounding, matching std::fma lane by lane.
  static vec fma(vec a, vec b, vec acc) {
#if defined(__AVX512F__)
    if constexpr (sizeof(Dtype) == 4) return _mm512_fmadd_ps(a, b, acc);
    else return _mm512_fmadd_pd(a, b, acc);
#else
    for (int i = 0; i < width; ++i) acc[i] = std::fma(a[i], b[i], acc[i]);
    return acc;
#endif
  }
};

// C[m][n] = bias[m] + sum_k A[aoff[m] + k] * B[boff[k] + n] as a chain of
// fused multiply-adds, k ascending for every element, so blocking never
// changes an output's rounding. N must be a multiple of the vector width.
template <typename Dtype, int R, int V>
void gemm_block(const Dtype* A, const std::size_t* aoff, const Dtype* B, const std::size_t* boff, Dtype* C,
                int ldc, int Kr, const Dtype* bias) {
  using S = Simd<Dtype>;
  using vec = typename S::vec;
  vec acc[R][V];
  for (int r = 0; r < R; ++r) {
    for (int v = 0; v < V; ++v) acc[r][v] = S::splat(bias ? bias[r] : Dtype{0});
  }
  for (int k = 0; k < Kr; ++k) {
    const Dtype* brow = B + boff[k];
    vec b[V];
    for (int v = 0; v < V; ++v) b[v] = S::load(brow + v * S::width);
    for (int r = 0; r < R; ++r) {
      const vec a = S::splat(A[aoff[r] + k]);
      for (int v = 0; v < V; ++v) acc[r][v] = S::fma(a, b[v], acc[r][v]);
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int v = 0; v < V; ++v) S::store(C + static_cast<std::size_t>(r) * ldc + v * S::width, acc[r][v]);
  }
}

template <typename Dtype>
void gemm(const Dtype* A, const std::size_t* aoff, const Dtype* B, const std::size_t* boff, Dtype* C, int ldc,
          int M, int N, int Kr, const Dtype* bias) {
  constexpr int w = Simd<Dtype>::width;
  auto rows = [&]<int V>(int n) {
    int m = 0;
    for (; m + 4 <= M; m += 4) {
      gemm_block<Dtype, 4, V>(A, aoff + m, B + n, boff, C + static_cast<std::size_t>(m) * ldc + n, ldc, Kr,
                              bias ? bias + m : nullptr);
    }
    for (; m < M; ++m) {
      gemm_block<Dtype, 1, V>(A, aoff + m, B + n, boff, C + static_cast<std::size_t>(m) * ldc + n, ldc, Kr,
                              bias ? bias + m : nullptr);
    }
  };
  int n = 0;
  for (; n + 2 * w <= N; n += 2 * w) rows.template operator()<2>(n);
  for (; n < N; n += w) rows.template operator()<1>(n);
}

template <typename Dtype>
std::vector<Dtype>& scratch(int slot, std::size_t size) {
  thread_local std::vector<Dtype> buf[4];
  auto& b = buf[slot];
  if (b.size() < size) b.resize(size);
  return b;
}

std::vector<std::size_t>& offsets(int slot, std::size_t size) {
  thread_local std::vector<std::size_t> buf[2];
  buf[slot].resize(size);
  return buf[slot];
}

const std::size_t* row_offsets(int slot, std::size_t rows, std::size_t ld) {
  auto& off = offsets(slot, rows);
  for (std::size_t k = 0; k < rows; ++k) off[k] = k * ld;
  return off.data();
}

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

// Stride-1 layout: each channel is zero-padded and stored with row pitch
// Wp = W + 2p, so output q = oy*Wp + ox reads tap (ky, kx) at q + ky*Wp + kx.
// Every tap row is then a shifted contiguous view and no im2col copy is
// needed; the Wp - Wo extra columns per row are computed and dropped.
struct PaddedLayout {
  int H, W, pad, K, Hp, Wp, Ho, Wo;
  std::size_t plane;  // Hp * Wp
  std::size_t cols;   // Ho * Wp rounded up to the vector width

  PaddedLayout(int h, int w, int p, int k, int vec)
      : H(h), W(w), pad(p), K(k), Hp(h + 2 * p), Wp(w + 2 * p), Ho(h + 2 * p - k + 1), Wo(w + 2 * p - k + 1) {
    plane = static_cast<std::size_t>(Hp) * Wp;
    cols = round_up(static_cast<std::size_t>(Ho) * Wp, static_cast<std::size_t>(vec));
  }
  // Slack past the last plane covers the rounded-up tail of the last tap.
  std::size_t buffer(int channels) const { return channels * plane + cols + static_cast<std::size_t>(Wp) * K; }

  void tap_offsets(int channels, std::vector<std::size_t>& off) const {
    std::size_t i = 0;
    for (int ci = 0; ci < channels; ++ci) {
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) off[i++] = ci * plane + static_cast<std::size_t>(ky) * Wp + kx;
      }
    }
  }

  template <typename Dtype>
  void pad_into(const Dtype* in, int channels, Dtype* buf) const {
    std::fill(buf, buf + buffer(channels), Dtype{0});
    for (int ci = 0; ci < channels; ++ci) {
      for (int y = 0; y < H; ++y) {
        std::memcpy(buf + ci * plane + static_cast<std::size_t>(y + pad) * Wp + pad,
                    in + (static_cast<std::size_t>(ci) * H + y) * W, sizeof(Dtype) * W);
      }
    }
  }
};

// out[n] = bias + conv(input[n], weight) for stride 1.
template <typename Dtype>
void conv_stride1(const Dtype* input, int N, int Cin, int H, int W, const Dtype* weight, int Cout, int K,
                  const Dtype* bias, int padding, Dtype* out) {
  const PaddedLayout lay(H, W, padding, K, Simd<Dtype>::width);
  const int Kr = Cin * K * K;
  auto& off = offsets(0, static_cast<std::size_t>(Kr));
  lay.tap_offsets(Cin, off);
  const std::size_t* aoff = row_offsets(1, static_cast<std::size_t>(Cout), static_cast<std::size_t>(Kr));
  auto& buf = scratch<Dtype>(0, lay.buffer(Cin));
  auto& tmp = scratch<Dtype>(1, static_cast<std::size_t>(Cout) * lay.cols);
  const std::size_t in_sample = static_cast<std::size_t>(Cin) * H * W;
  const std::size_t out_plane = static_cast<std::size_t>(lay.Ho) * lay.Wo;
  for (int n = 0; n < N; ++n) {
    lay.pad_into(input + n * in_sample, Cin, buf.data());
    gemm(weight, aoff, buf.data(), off.data(), tmp.data(), static_cast<int>(lay.cols), Cout,
         static_cast<int>(lay.cols), Kr, bias);
    Dtype* o = out + n * Cout * out_plane;
    for (int co = 0; co < Cout; ++co) {
      for (int oy = 0; oy < lay.Ho; ++oy) {
        std::memcpy(o + co * out_plane + static_cast<std::size_t>(oy) * lay.Wo,
                    tmp.data() + co * lay.cols + static_cast<std::size_t>(oy) * lay.Wp, sizeof(Dtype) * lay.Wo);
      }
    }
  }
}

// General-stride fallback: col[(ci*K + ky)*K + kx][oy*Wo + ox], zero in the padding.
template <typename Dtype>
void im2col(const Dtype* in, int Cin, int H, int W, int K, int stride, int padding, int Ho, int Wo,
            std::size_t ldcol, Dtype* col) {
  for (int ci = 0; ci < Cin; ++ci) {
    const Dtype* plane = in + static_cast<std::size_t>(ci) * H * W;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        Dtype* row = col + static_cast<std::size_t>((ci * K + ky) * K + kx) * ldcol;
        std::fill(row, row + ldcol, Dtype{0});
        const ValidRange xr = valid_outputs(W, Wo, kx, stride, padding);
        const int shift = kx - padding;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) continue;
          Dtype* o = row + static_cast<std::size_t>(oy) * Wo;
          const Dtype* irow = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = xr.lo; ox <= xr.hi; ++ox) o[ox] = irow[ox * stride + shift];
        }
      }
    }
  }
}

template <typename Dtype>
void col2im_add(const Dtype* col, int Cin, int H, int W, int K, int stride, int padding, int Ho, int Wo,
                std::size_t ldcol, Dtype* in) {
  for (int ci = 0; ci < Cin; ++ci) {
    Dtype* plane = in + static_cast<std::size_t>(ci) * H * W;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        const Dtype* row = col + static_cast<std::size_t>((ci * K + ky) * K + kx) * ldcol;
        const ValidRange xr = valid_outputs(W, Wo, kx, stride, padding);
        const int shift = kx - padding;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) continue;
          Dtype* irow = plane + static_cast<std::size_t>(iy) * W;
          const Dtype* o = row + static_cast<std::size_t>(oy) * Wo;
          for (int ox = xr.lo; ox <= xr.hi; ++ox) irow[ox * stride + shift] += o[ox];
        }
      }
    }
  }
}

}  // namespace

template <typename Dtype>
Tensor<Dtype> conv2d_forward(const Tensor<Dtype>& input, const Tensor<Dtype>& weight,
                             const Tensor<Dtype>& bias, int stride, int padding) {
  check_conv(input, weight, bias, stride, padding);
  const int N = input.n(), Cin = input.c(), H = input.h(), W = input.w();
  const int Cout = weight.n(), K = weight.h();
  const int Ho = conv_out_extent(H, K, stride, padding);
  const int Wo = conv_out_extent(W, K, stride, padding);
  Tensor<Dtype> out({N, Cout, Ho, Wo});
  const Dtype* b = bias.empty() ? nullptr : bias.data();
  if (stride == 1) {
    conv_stride1(input.data(), N, Cin, H, W, weight.data(), Cout, K, b, padding, out.data());
    return out;
  }
  const int P = Ho * Wo, Kr = Cin * K * K;
  const std::size_t ld = round_up(static_cast<std::size_t>(P), Simd<Dtype>::width);
  auto& col = scratch<Dtype>(0, Kr * ld);
  auto& tmp = scratch<Dtype>(1, Cout * ld);
  const std::size_t* boff = row_offsets(0, static_cast<std::size_t>(Kr), ld);
  const std::size_t* aoff = row_offsets(1, static_cast<std::size_t>(Cout), static_cast<std::size_t>(Kr));
  for (int n = 0; n < N; ++n) {
    im2col(&input.at(n, 0, 0, 0), Cin, H, W, K, stride, padding, Ho, Wo, ld, col.data());
    gemm(weight.data(), aoff, col.data(), boff, tmp.data(), static_cast<int>(ld), Cout, static_cast<int>(ld),
         Kr, b);
    for (int co = 0; co < Cout; ++co) {
      std::memcpy(&out.at(n, co, 0, 0), tmp.data() + co * ld, sizeof(Dtype) * P);
    }
  }
  return out;
}

template <typename Dtype>
Tensor<Dtype> conv2d_backward_input(const Tensor<Dtype>& grad_out, const Tensor<Dtype>& weight,
                                    const Shape& input_shape, int stride, int padding) {
  require_rank(grad_out, 4, "conv2d grad_out");
  Tensor<Dtype> grad_in(input_shape);
  const int N = grad_in.n(), Cin = grad_in.c(), H = grad_in.h(), W = grad_in.w();
  const int Cout = weight.n(), K = weight.h();
  const int Ho = grad_out.h(), Wo = grad_out.w();
  if (grad_out.n() != N || grad_out.c() != Cout || weight.c() != Cin ||
      Ho != conv_out_extent(H, K, stride, padding) || Wo != conv_out_extent(W, K, stride, padding)) {
    throw ShapeError("conv2d backward: grad_out " + shape_str(grad_out.shape()) +
                     " inconsistent with input " + shape_str(input_shape) + " and kernel " +
                     shape_str(weight.shape()));
  }
  const int Kr = Cin * K * K;
  if (stride == 1 && padding <= K - 1) {
    // Full correlation: conv of grad_out with the flipped, transposed kernel.
    auto& flipped = scratch<Dtype>(2, static_cast<std::size_t>(Kr) * Cout);
    for (int co = 0; co < Cout; ++co) {
      for (int ci = 0; ci < Cin; ++ci) {
        for (int ky = 0; ky < K; ++ky) {
          for (int kx = 0; kx < K; ++kx) {
            flipped[((static_cast<std::size_t>(ci) * Cout + co) * K + (K - 1 - ky)) * K + (K - 1 - kx)] =
                weight.at(co, ci, ky, kx);
          }
        }
      }
    }
    conv_stride1(grad_out.data(), N, Cout, Ho, Wo, flipped.data(), Cin, K, static_cast<const Dtype*>(nullptr),
                 K - 1 - padding, grad_in.data());
    return grad_in;
  }
  const int P = Ho * Wo;
  const std::size_t ld = round_up(static_cast<std::size_t>(P), Simd<Dtype>::width);
  auto& wt = scratch<Dtype>(2, static_cast<std::size_t>(Kr) * Cout);
  for (int co = 0; co < Cout; ++co) {
    for (int k = 0; k < Kr; ++k) wt[static_cast<std::size_t>(k) * Cout + co] = weight[static_cast<std::size_t>(co) * Kr + k];
  }
  auto& g = scratch<Dtype>(3, Cout * ld);
  auto& col = scratch<Dtype>(0, Kr * ld);
  const std::size_t* boff = row_offsets(0, static_cast<std::size_t>(Cout), ld);
  const std::size_t* aoff = row_offsets(1, static_cast<std::size_t>(Kr), static_cast<std::size_t>(Cout));
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Cout; ++co) {
      std::fill(g.begin() + co * ld, g.begin() + (co + 1) * ld, Dtype{0});
      std::memcpy(g.data() + co * ld, &grad_out.at(n, co, 0, 0), sizeof(Dtype) * P);
    }
    gemm(wt.data(), aoff, g.data(), boff, col.data(), static_cast<int>(ld), Kr, static_cast<int>(ld), Cout,
         static_cast<const Dtype*>(nullptr));
    col2im_add(col.data(), Cin, H, W, K, stride, padding, Ho, Wo, ld, &grad_in.at(n, 0, 0, 0));
  }
  return grad_in;
}

// Weight gradient as part[k][co] = sum_q x_k[q] * gT[q][co], where x_k is tap k's
// view of the input and gT is grad_out transposed (output channels padded to
// the vector width with zeros).
template <typename Dtype>
void conv2d_backward_params(const Tensor<Dtype>& input, const Tensor<Dtype>& grad_out, int stride,
                            int padding, Tensor<Dtype>& weight_grad, Tensor<Dtype>& bias_grad) {
  const int N = input.n(), Cin = input.c(), H = input.h(), W = input.w();
  const int Cout = weight_grad.n(), K = weight_grad.h();
  const int Ho = grad_out.h(), Wo = grad_out.w();
  if (grad_out.n() != N || grad_out.c() != Cout || weight_grad.c() != Cin) {
    throw ShapeError("conv2d param backward: grad_out " + shape_str(grad_out.shape()) +
                     " inconsistent with input " + shape_str(input.shape()));
  }
  const int P = Ho * Wo, Kr = Cin * K * K;
  const int cop = static_cast<int>(round_up(static_cast<std::size_t>(Cout), Simd<Dtype>::width));
  auto& part = scratch<Dtype>(2, static_cast<std::size_t>(Kr) * cop);
  const bool s1 = stride == 1;
  const PaddedLayout lay(H, W, padding, K, Simd<Dtype>::width);
  // q runs over the padded row pitch (stride 1) or the plain output plane.
  const std::size_t pitch = s1 ? static_cast<std::size_t>(lay.Wp) : static_cast<std::size_t>(Wo);
  const std::size_t Q = static_cast<std::size_t>(Ho) * pitch;
  auto& gT = scratch<Dtype>(3, Q * cop);
  auto& xbuf = scratch<Dtype>(0, s1 ? lay.buffer(Cin) : static_cast<std::size_t>(Kr) * P);
  auto& aoff = offsets(0, static_cast<std::size_t>(Kr));
  if (s1) {
    lay.tap_offsets(Cin, aoff);
  } else {
    for (int k = 0; k < Kr; ++k) aoff[k] = static_cast<std::size_t>(k) * P;
  }
  const std::size_t* boff = row_offsets(1, Q, static_cast<std::size_t>(cop));

  for (int n = 0; n < N; ++n) {
    const Dtype* g = &grad_out.at(n, 0, 0, 0);
    for (int co = 0; co < Cout; ++co) {
      Dtype bsum{0};
      for (int p = 0; p < P; ++p) bsum += g[static_cast<std::size_t>(co) * P + p];
      bias_grad[co] += bsum;
    }
    if (s1) {
      lay.pad_into(&input.at(n, 0, 0, 0), Cin, xbuf.data());
    } else {
      im2col(&input.at(n, 0, 0, 0), Cin, H, W, K, stride, padding, Ho, Wo, static_cast<std::size_t>(P), xbuf.data());
    }
    std::fill(gT.begin(), gT.begin() + static_cast<std::ptrdiff_t>(Q * cop), Dtype{0});
    for (int co = 0; co < Cout; ++co) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          gT[(oy * pitch + ox) * cop + co] = g[(static_cast<std::size_t>(co) * Ho + oy) * Wo + ox];
        }
      }
    }
    gemm(xbuf.data(), aoff.data(), gT.data(), boff, part.data(), cop, Kr, cop, static_cast<int>(Q),
         static_cast<const Dtype*>(nullptr));
    Dtype* wg = weight_grad.data();
    for (int co = 0; co < Cout; ++co) {
      for (int k = 0; k < Kr; ++k) {
        wg[static_cast<std::size_t>(co) * Kr + k] += part[static_cast<std::size_t>(k) * cop + co];
      }
    }
  }
}

template <typename Dtype>
Tensor<Dtype> linear_forward(const Tensor<Dtype>& input, const Tensor<Dtype>& weight,
                             const Tensor<Dtype>& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const int N = input.dim(0), F = input.dim(1), O = weight.dim(0);
  if (weight.dim(1) != F) {
    throw ShapeError("linear: input has " + std::to_string(F) + " features but weight is " +
                     shape_str(weight.shape()));
  }
  if (!bias.empty() && (bias.ndim() != 1 || bias.dim(0) != O)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(O) + " outputs");
  }
  Tensor<Dtype> out({N, O});
  for (int n = 0; n < N; ++n) {
    const Dtype* x = input.data() + static_cast<std::size_t>(n) * F;
    for (int o = 0; o < O; ++o) {
      const Dtype* w = weight.data() + static_cast<std::size_t>(o) * F;
      Dtype s = bias.empty() ? Dtype{0} : bias[o];
      for (int f = 0; f < F; ++f) s += w[f] * x[f];
      out[static_cast<std::size_t>(n) * O + o] = s;
    }
  }
  return out;
}

template <typename Dtype>
Tensor<Dtype> linear_backward_input(const Tensor<Dtype>& grad_out, const Tensor<Dtype>& weight) {
  const int N = grad_out.dim(0), O = weight.dim(0), F = weight.dim(1);
  if (grad_out.dim(1) != O) {
    throw ShapeError("linear backward: grad_out " + shape_str(grad_out.shape()) +
                     " vs weight " + shape_str(weight.shape()));
  }
  Tensor<Dtype> gin({N, F});
  for (int n = 0; n < N; ++n) {
    Dtype* __restrict gi = gin.data() + static_cast<std::size_t>(n) * F;
    for (int o = 0; o < O; ++o) {
      const Dtype g = grad_out[static_cast<std::size_t>(n) * O + o];
      const Dtype* __restrict w = weight.data() + static_cast<std::size_t>(o) * F;
      for (int f = 0; f < F; ++f) gi[f] += w[f] * g;
    }
  }
  return gin;
}

template <typename Dtype>
void linear_backward_params(const Tensor<Dtype>& input, const Tensor<Dtype>& grad_out,
                            Tensor<Dtype>& weight_grad, Tensor<Dtype>& bias_grad) {
  const int N = input.dim(0), F = input.dim(1), O = weight_grad.dim(0);
  for (int n = 0; n < N; ++n) {
    const Dtype* __restrict x = input.data() + static_cast<std::size_t>(n) * F;
    for (int o = 0; o < O; ++o) {
      const Dtype g = grad_out[static_cast<std::size_t>(n) * O + o];
      Dtype* __restrict wg = weight_grad.data() + static_cast<std::size_t>(o) * F;
      for (int f = 0; f < F; ++f) wg[f] += g * x[f];
      bias_grad[o] += g;
    }
  }
}

template <typename Dtype>
Tensor<Dtype> relu_forward(const Tensor<Dtype>& input) {
  Tensor<Dtype> out(input.shape());
  const Dtype* x = input.data();
  Dtype* o = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = x[i] > Dtype{0} ? x[i] : Dtype{0};
  return out;
}

template <typename Dtype>
Tensor<Dtype> relu_backward(const Tensor<Dtype>& output, const Tensor<Dtype>& grad_out) {
  if (output.shape() != grad_out.shape()) {
    throw ShapeError("relu backward: " + shape_str(output.shape()) + " vs " +
                     shape_str(grad_out.shape()));
  }
  Tensor<Dtype> gin(grad_out.shape());
  for (std::size_t i = 0; i < gin.size(); ++i) gin[i] = output[i] > Dtype{0} ? grad_out[i] : Dtype{0};
  return gin;
}

template <typename Dtype>
Tensor<Dtype> maxpool_forward(const Tensor<Dtype>& input, int window, int stride,
                              std::vector<std::int32_t>* argmax) {
  require_rank(input, 4, "maxpool input");
  if (window < 1 || stride < 1) throw ArgumentError("maxpool window and stride must be positive");
  const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
  const int Ho = conv_out_extent(H, window, stride, 0);
  const int Wo = conv_out_extent(W, window, stride, 0);
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("maxpool: window " + std::to_string(window) + " exceeds input " +
                     shape_str(input.shape()));
  }
  Tensor<Dtype> out({N, C, Ho, Wo});
  if (argmax) argmax->assign(out.size(), 0);
  const Dtype* x = input.data();
  Dtype* o = out.data();
  std::size_t oi = 0;
  for (int plane = 0; plane < N * C; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * H * W;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox, ++oi) {
        std::size_t best = base + static_cast<std::size_t>(oy * stride) * W + ox * stride;
        Dtype bv = x[best];
        for (int dy = 0; dy < window; ++dy) {
          const std::size_t row = base + static_cast<std::size_t>(oy * stride + dy) * W + ox * stride;
          for (int dx = 0; dx < window; ++dx) {
            if (x[row + dx] > bv) {
              bv = x[row + dx];
              best = row + dx;
            }
          }
        }
        o[oi] = bv;
        if (argmax) (*argmax)[oi] = static_cast<std::int32_t>(best);
      }
    }
  }
  return out;
}

template <typename Dtype>
Tensor<Dtype> maxpool_backward(const Tensor<Dtype>& grad_out, std::span<const std::int32_t> argmax,
                               const Shape& input_shape) {
  if (argmax.size() != grad_out.size()) {
    throw UsageError("maxpool backward: argmax record does not match grad_out " +
                     shape_str(grad_out.shape()));
  }
  Tensor<Dtype> gin(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) gin[static_cast<std::size_t>(argmax[i])] += grad_out[i];
  return gin;
}

template <typename Dtype>
Tensor<Dtype> global_avg_pool_forward(const Tensor<Dtype>& input) {
  require_rank(input, 4, "global average pool input");
  const int N = input.n(), C = input.c();
  const std::size_t plane = static_cast<std::size_t>(input.h()) * input.w();
  Tensor<Dtype> out({N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const Dtype* p = &input.at(n, c, 0, 0);
      Dtype s{0};
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out[static_cast<std::size_t>(n) * C + c] = s / static_cast<Dtype>(plane);
    }
  }
  return out;
}

template <typename Dtype>
Tensor<Dtype> global_avg_pool_backward(const Tensor<Dtype>& grad_out, const Shape& input_shape) {
  Tensor<Dtype> gin(input_shape);
  const int N = gin.n(), C = gin.c();
  if (grad_out.ndim() != 2 || grad_out.dim(0) != N || grad_out.dim(1) != C) {
    throw ShapeError("global average pool backward: grad_out " + shape_str(grad_out.shape()) +
                     " vs input " + shape_str(input_shape));
  }
  const std::size_t plane = static_cast<std::size_t>(gin.h()) * gin.w();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const Dtype g = grad_out[static_cast<std::size_t>(n) * C + c] / static_cast<Dtype>(plane);
      Dtype* p = &gin.at(n, c, 0, 0);
      std::fill(p, p + plane, g);
    }
  }
  return gin;
}

template <typename Dtype>
LossResult<Dtype> softmax_cross_entropy(const Tensor<Dtype>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross-entropy logits");
  const int N = logits.dim(0), C = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(N)) {
    throw ShapeError("cross-entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(N));
  }
  LossResult<Dtype> r;
  r.grad = Tensor<Dtype>({N, C});
  std::vector<double> p(static_cast<std::size_t>(C));
  for (int n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= C) throw ArgumentError("cross-entropy: label " + std::to_string(y) + " out of range");
    const Dtype* x = logits.data() + static_cast<std::size_t>(n) * C;
    double m = x[0];
    for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(x[c]));
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(static_cast<double>(x[c]) - m);
      z += p[c];
    }
    r.loss += -(static_cast<double>(x[y]) - m - std::log(z));
    for (int c = 0; c < C; ++c) {
      const double g = p[c] / z - (c == y ? 1.0 : 0.0);
      r.grad[static_cast<std::size_t>(n) * C + c] = static_cast<Dtype>(g / N);
    }
  }
  r.loss /= N;
  return r;
}

template <typename Dtype>
void sgd_step(LayerParams<Dtype>& params, Dtype lr, Dtype momentum) {
  auto update = [&](Tensor<Dtype>& w, Tensor<Dtype>& g, Tensor<Dtype>& buf) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      buf[i] = momentum * buf[i] + g[i];
      w[i] -= lr * buf[i];
    }
    g.fill(Dtype{0});
  };
  if (params.empty()) return;
  update(params.weight, params.weight_grad, params.weight_momentum);
  update(params.bias, params.bias_grad, params.bias_momentum);
}

#define GZ_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                    int);                                                      \
  template Tensor<T> conv2d_backward_input(const Tensor<T>&, const Tensor<T>&, const Shape&,   \
                                           int, int);                                          \
  template void conv2d_backward_params(const Tensor<T>&, const Tensor<T>&, int, int,           \
                                       Tensor<T>&, Tensor<T>&);                                \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> linear_backward_input(const Tensor<T>&, const Tensor<T>&);                \
  template void linear_backward_params(const Tensor<T>&, const Tensor<T>&, Tensor<T>&,         \
                                       Tensor<T>&);                                            \
  template Tensor<T> relu_forward(const Tensor<T>&);                                           \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> maxpool_forward(const Tensor<T>&, int, int, std::vector<std::int32_t>*);  \
  template Tensor<T> maxpool_backward(const Tensor<T>&, std::span<const std::int32_t>,         \
                                      const Shape&);                                           \
  template Tensor<T> global_avg_pool_forward(const Tensor<T>&);                                \
  template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                 \
  template LossResult<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);        \
  template void sgd_step(LayerParams<T>&, T, T);

GZ_INSTANTIATE_OPS(float)
GZ_INSTANTIATE_OPS(double)

}  // namespace gz
