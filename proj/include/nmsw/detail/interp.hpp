#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace nmsw::detail {

struct LinearTap {
  int i0;
  int i1;
  double w0;
  double w1;
};

/// 1-D linear interpolation taps, align-corners-false convention: output
/// sample j reads source coordinate (j + 0.5) * in / out - 0.5, clamped.
inline std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int j = 0; j < out; ++j) {
    double src = (j + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 + 1 < in ? i0 + 1 : in - 1;
    const double lambda = src - i0;
    taps[static_cast<std::size_t>(j)] = {i0, i1, 1.0 - lambda, lambda};
  }
  return taps;
}

// Layout [channels, d0, d1, d2]; resamples one axis while keeping the others.
template <class T>
std::vector<T> resize_axis(const std::vector<T>& src, int channels, const std::array<int, 3>& in, int axis,
                           int out_len) {
  std::array<int, 3> out = in;
  out[axis] = out_len;
  const auto taps = linear_taps(in[axis], out_len);
  // outer = channels * prod(dims before axis), inner = prod(dims after axis)
  std::int64_t outer = channels;
  for (int a = 0; a < axis; ++a) outer *= in[a];
  std::int64_t inner = 1;
  for (int a = axis + 1; a < 3; ++a) inner *= in[a];
  std::vector<T> dst(static_cast<std::size_t>(outer * out_len * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* s = src.data() + o * in[axis] * inner;
    T* d = dst.data() + o * out_len * inner;
    for (int j = 0; j < out_len; ++j) {
      const auto& t = taps[static_cast<std::size_t>(j)];
      const T* a0 = s + t.i0 * inner;
      const T* a1 = s + t.i1 * inner;
      T* dj = d + j * inner;
      const T w0 = static_cast<T>(t.w0);
      const T w1 = static_cast<T>(t.w1);
      for (std::int64_t i = 0; i < inner; ++i) dj[i] = w0 * a0[i] + w1 * a1[i];
    }
  }
  return dst;
}

// Adjoint of resize_axis: scatters `grad` (shape with out_len on `axis`) back
// onto a buffer of the original extent in[axis].
template <class T>
std::vector<T> resize_axis_adjoint(const std::vector<T>& grad, int channels, const std::array<int, 3>& in, int axis,
                                   int out_len) {
  const auto taps = linear_taps(in[axis], out_len);
  std::int64_t outer = channels;
  for (int a = 0; a < axis; ++a) outer *= in[a];
  std::int64_t inner = 1;
  for (int a = axis + 1; a < 3; ++a) inner *= in[a];
  std::vector<T> dst(static_cast<std::size_t>(outer * in[axis] * inner), T(0));
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* g = grad.data() + o * out_len * inner;
    T* d = dst.data() + o * in[axis] * inner;
    for (int j = 0; j < out_len; ++j) {
      const auto& t = taps[static_cast<std::size_t>(j)];
      T* a0 = d + t.i0 * inner;
      T* a1 = d + t.i1 * inner;
      const T* gj = g + j * inner;
      const T w0 = static_cast<T>(t.w0);
      const T w1 = static_cast<T>(t.w1);
      for (std::int64_t i = 0; i < inner; ++i) {
        a0[i] += w0 * gj[i];
        a1[i] += w1 * gj[i];
      }
    }
  }
  return dst;
}

/// Separable trilinear resize of a [C, H, W, D] buffer.
template <class T>
std::vector<T> resize_trilinear(const std::vector<T>& src, int channels, const std::array<int, 3>& in,
                                const std::array<int, 3>& out) {
  std::array<int, 3> cur = in;
  std::vector<T> buf = src;
  for (int axis = 0; axis < 3; ++axis) {
    if (cur[axis] == out[axis]) continue;
    buf = resize_axis(buf, channels, cur, axis, out[axis]);
    cur[axis] = out[axis];
  }
  return buf;
}

template <class T>
std::vector<T> resize_trilinear_adjoint(const std::vector<T>& grad, int channels, const std::array<int, 3>& in,
                                        const std::array<int, 3>& out) {
  // Forward passes run axis 0, 1, 2; the adjoint undoes them in reverse.
  std::array<std::array<int, 3>, 3> before{};
  std::array<int, 3> cur = in;
  for (int axis = 0; axis < 3; ++axis) {
    before[static_cast<std::size_t>(axis)] = cur;
    cur[axis] = out[axis];
  }
  std::vector<T> buf = grad;
  for (int axis = 2; axis >= 0; --axis) {
    const auto& shape_in = before[static_cast<std::size_t>(axis)];
    if (shape_in[axis] == out[axis]) continue;
    buf = resize_axis_adjoint(buf, channels, shape_in, axis, out[axis]);
  }
  return buf;
}

}  // namespace nmsw::detail
