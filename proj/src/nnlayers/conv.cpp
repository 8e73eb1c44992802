#include <limits>
#include <stdexcept>

#include "advdef/layers.hpp"
#include "advdef/linalg.hpp"

namespace advdef::nn {

namespace {

struct Geometry {
  std::size_t n, h, w, c;
};

Geometry nhwc(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw std::invalid_argument(std::string(op) + ": expected NHWC input, got " + shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// cols[(n,y,x), (ky,kx,c)] = img[n, y+ky-pad, x+kx-pad, c], zero outside.
void im2col(const float* img, const Geometry& g, std::size_t k, float* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t row_len = k * k * g.c;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t x = 0; x < g.w; ++x) {
        float* row = cols + ((n * g.h + y) * g.w + x) * row_len;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - pad;
            float* dst = row + (ky * k + kx) * g.c;
            if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(g.h) || sx >= static_cast<std::ptrdiff_t>(g.w)) {
              std::fill(dst, dst + g.c, 0.0f);
            } else {
              const float* src = img + ((n * g.h + sy) * g.w + sx) * g.c;
              std::copy(src, src + g.c, dst);
            }
          }
        }
      }
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im(const float* cols, const Geometry& g, std::size_t k, float* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t row_len = k * k * g.c;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t x = 0; x < g.w; ++x) {
        const float* row = cols + ((n * g.h + y) * g.w + x) * row_len;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - pad;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const float* src = row + (ky * k + kx) * g.c;
            float* dst = img + ((n * g.h + sy) * g.w + sx) * g.c;
            for (std::size_t c = 0; c < g.c; ++c) dst[c] += src[c];
          }
        }
      }
}

void check_kernel(const Tensor& weight, const char* op) {
  if (weight.rank() != 4 || weight.dim(0) != weight.dim(1) || weight.dim(0) % 2 == 0)
    throw std::invalid_argument(std::string(op) + ": weight must be [k,k,in,out] with odd k, got " +
                                shape_str(weight.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  auto g = nhwc(x, "conv2d");
  check_kernel(weight, "conv2d");
  const std::size_t k = weight.dim(0), cout = weight.dim(3);
  if (weight.dim(2) != g.c)
    throw std::invalid_argument("conv2d: input has " + std::to_string(g.c) + " channels, kernel expects " +
                                std::to_string(weight.dim(2)));
  if (bias.numel() != cout) throw std::invalid_argument("conv2d: bias length must equal output channels");
  const std::size_t rows = g.n * g.h * g.w, kdim = k * k * g.c;

  auto cols = std::make_shared<std::vector<float>>(rows * kdim);
  im2col(x.data().data(), g, k, cols->data());
  std::vector<float> out(rows * cout);
  for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * cout);
  linalg::gemm(false, false, rows, cout, kdim, 1.0f, cols->data(), weight.data().data(), 1.0f, out.data());

  auto wn = weight.node();
  bool keep_cols = weight.needs_grad() && grad_enabled();
  if (!keep_cols) cols.reset();
  return make_op_result({g.n, g.h, g.w, cout}, std::move(out), {x, weight, bias}, "conv2d",
                        [g, k, cout, rows, kdim, cols, wn](std::span<const float> go, detail::GradInputs gi) {
                          if (gi[0]) {
                            std::vector<float> dcols(rows * kdim);
                            linalg::gemm(false, true, rows, kdim, cout, 1.0f, go.data(), wn->data.data(), 0.0f,
                                         dcols.data());
                            col2im(dcols.data(), g, k, gi[0]->data());
                          }
                          if (gi[1])
                            linalg::gemm(true, false, kdim, cout, rows, 1.0f, cols->data(), go.data(), 1.0f,
                                         gi[1]->data());
                          if (gi[2])
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cout; ++c) (*gi[2])[c] += go[r * cout + c];
                        });
}

Tensor transpose_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  auto g = nhwc(x, "transpose_conv2d");
  check_kernel(weight, "transpose_conv2d");
  const std::size_t k = weight.dim(0), cout = weight.dim(2);
  if (weight.dim(3) != g.c)
    throw std::invalid_argument("transpose_conv2d: input has " + std::to_string(g.c) + " channels, kernel expects " +
                                std::to_string(weight.dim(3)));
  if (bias.numel() != cout) throw std::invalid_argument("transpose_conv2d: bias length must equal output channels");
  const Geometry og{g.n, g.h, g.w, cout};
  const std::size_t rows = g.n * g.h * g.w, kdim = k * k * cout;

  // cols = x * W^T, then scatter into the output image
  std::vector<float> cols(rows * kdim);
  linalg::gemm(false, true, rows, kdim, g.c, 1.0f, x.data().data(), weight.data().data(), 0.0f, cols.data());
  std::vector<float> out(rows * cout, 0.0f);
  col2im(cols.data(), og, k, out.data());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] += bias.data()[c];

  auto xn = x.node(), wn = weight.node();
  return make_op_result({g.n, g.h, g.w, cout}, std::move(out), {x, weight, bias}, "transpose_conv2d",
                        [og, k, cout, rows, kdim, cin = g.c, xn, wn](std::span<const float> go,
                                                                     detail::GradInputs gi) {
                          std::vector<float> gcols(rows * kdim);
                          im2col(go.data(), og, k, gcols.data());
                          if (gi[0])
                            linalg::gemm(false, false, rows, cin, kdim, 1.0f, gcols.data(), wn->data.data(), 1.0f,
                                         gi[0]->data());
                          if (gi[1])
                            linalg::gemm(true, false, kdim, cin, rows, 1.0f, gcols.data(), xn->data.data(), 1.0f,
                                         gi[1]->data());
                          if (gi[2])
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cout; ++c) (*gi[2])[c] += go[r * cout + c];
                        });
}

Tensor maxpool2x2(const Tensor& x) {
  auto g = nhwc(x, "maxpool2x2");
  if (g.h % 2 != 0 || g.w % 2 != 0)
    throw std::invalid_argument("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t oh = g.h / 2, ow = g.w / 2;
  std::vector<float> out(g.n * oh * ow * g.c);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  auto in = x.data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo)
        for (std::size_t c = 0; c < g.c; ++c) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_idx = 0;
          // row-major scan with strict comparison keeps the first maximum
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              std::size_t idx = ((n * g.h + 2 * y + dy) * g.w + 2 * xo + dx) * g.c + c;
              if (in[idx] > best || (dy == 0 && dx == 0)) {
                best = in[idx];
                best_idx = idx;
              }
            }
          std::size_t o = ((n * oh + y) * ow + xo) * g.c + c;
          out[o] = best;
          (*argmax)[o] = static_cast<std::uint32_t>(best_idx);
        }
  return make_op_result({g.n, oh, ow, g.c}, std::move(out), {x}, "maxpool2x2",
                        [argmax](std::span<const float> go, detail::GradInputs gi) {
                          for (std::size_t o = 0; o < go.size(); ++o) (*gi[0])[(*argmax)[o]] += go[o];
                        });
}

Tensor upsample2x(const Tensor& x) {
  auto g = nhwc(x, "upsample2x");
  const std::size_t oh = g.h * 2, ow = g.w * 2;
  std::vector<float> out(g.n * oh * ow * g.c);
  auto in = x.data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const float* src = in.data() + ((n * g.h + y / 2) * g.w + xo / 2) * g.c;
        std::copy(src, src + g.c, out.begin() + ((n * oh + y) * ow + xo) * g.c);
      }
  return make_op_result({g.n, oh, ow, g.c}, std::move(out), {x}, "upsample2x",
                        [g, oh, ow](std::span<const float> go, detail::GradInputs gi) {
                          for (std::size_t n = 0; n < g.n; ++n)
                            for (std::size_t y = 0; y < oh; ++y)
                              for (std::size_t xo = 0; xo < ow; ++xo) {
                                const float* src = go.data() + ((n * oh + y) * ow + xo) * g.c;
                                float* dst = gi[0]->data() + ((n * g.h + y / 2) * g.w + xo / 2) * g.c;
                                for (std::size_t c = 0; c < g.c; ++c) dst[c] += src[c];
                              }
                        });
}

}  // namespace advdef::nn
