#pragma once

// Numeric kernels behind the autodiff ops. Every kernel has a serial
// reference implementation and an OpenMP one; gemm additionally has a BLAS
// lane when the project is built against OpenBLAS. The OpenMP lane
// parallelizes over independent output elements with the same inner
// accumulation order as the serial lane, so the two produce bit-identical
// results for any thread count.

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <string>

#include "diffil/errors.hpp"
#include "diffil/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#ifdef DIFFIL_HAVE_BLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace diffil::kernels {

enum class Mode { serial, openmp, blas };

inline std::atomic<Mode>& mode_flag() {
  static std::atomic<Mode> m{Mode::openmp};
  return m;
}

inline Mode mode() { return mode_flag().load(std::memory_order_relaxed); }
inline void set_mode(Mode m) {
  mode_flag().store(m, std::memory_order_relaxed);
#ifdef DIFFIL_HAVE_BLAS
  // gemms here are skinny; OpenBLAS thread fan-out loses to cache locality.
  // OPENBLAS_NUM_THREADS still wins if the user sets it explicitly.
  if (m == Mode::blas && std::getenv("OPENBLAS_NUM_THREADS") == nullptr) openblas_set_num_threads(1);
#endif
}

// Keeps multi-megabyte tensor blocks on the heap instead of bouncing them
// through mmap/munmap; the allocation churn of graph building is hot.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

inline bool blas_available() {
#ifdef DIFFIL_HAVE_BLAS
  return true;
#else
  return false;
#endif
}

inline Mode parse_mode(const std::string& name) {
  if (name == "serial") return Mode::serial;
  if (name == "openmp") return Mode::openmp;
  if (name == "blas") {
    if (!blas_available()) throw config_error("kernels=blas requested but built without BLAS");
    return Mode::blas;
  }
  if (name == "auto") return blas_available() ? Mode::blas : Mode::openmp;
  throw config_error("unknown kernel mode '" + name + "' (serial|openmp|blas|auto)");
}

// Honors DIFFIL_KERNELS if set; otherwise keeps the current mode.
inline void set_mode_from_env() {
  if (const char* e = std::getenv("DIFFIL_KERNELS")) set_mode(parse_mode(e));
}

// Elementwise loops over large tensors go parallel; small ones stay serial to
// avoid fork overhead. Chunks are fixed-size so results do not depend on the
// thread count.
template <typename F>
void parallel_for(int64_t n, F&& body) {
#ifdef _OPENMP
  if (mode() != Mode::serial && n >= 16384) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) body(i);
}

// ---------------------------------------------------------------------------
// gemm: C = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is [M,K], op(B) is [K,N], C is [M,N].
// ---------------------------------------------------------------------------

template <typename T>
void gemm_serial(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, T alpha, const T* A,
                 const T* B, T beta, T* C) {
  const int64_t lda = trans_a ? M : K;
  const int64_t ldb = trans_b ? K : N;
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    if (beta == T{0}) {
      for (int64_t j = 0; j < N; ++j) c[j] = T{0};
    } else if (beta != T{1}) {
      for (int64_t j = 0; j < N; ++j) c[j] *= beta;
    }
    for (int64_t k = 0; k < K; ++k) {
      const T a = alpha * (trans_a ? A[k * lda + i] : A[i * lda + k]);
      if (a == T{0}) continue;
      if (!trans_b) {
        const T* b = B + k * ldb;
        for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
      } else {
        for (int64_t j = 0; j < N; ++j) c[j] += a * B[j * ldb + k];
      }
    }
  }
}

template <typename T>
void gemm_openmp(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, T alpha, const T* A,
                 const T* B, T beta, T* C) {
  const int64_t lda = trans_a ? M : K;
  const int64_t ldb = trans_b ? K : N;
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    if (beta == T{0}) {
      for (int64_t j = 0; j < N; ++j) c[j] = T{0};
    } else if (beta != T{1}) {
      for (int64_t j = 0; j < N; ++j) c[j] *= beta;
    }
    for (int64_t k = 0; k < K; ++k) {
      const T a = alpha * (trans_a ? A[k * lda + i] : A[i * lda + k]);
      if (a == T{0}) continue;
      if (!trans_b) {
        const T* b = B + k * ldb;
        for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
      } else {
        for (int64_t j = 0; j < N; ++j) c[j] += a * B[j * ldb + k];
      }
    }
  }
}

#ifdef DIFFIL_HAVE_BLAS
inline void gemm_blas(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, double alpha,
                      const double* A, const double* B, double beta, double* C) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), alpha, A,
              static_cast<int>(trans_a ? M : K), B, static_cast<int>(trans_b ? K : N), beta, C,
              static_cast<int>(N));
}

inline void gemm_blas(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, float alpha,
                      const float* A, const float* B, float beta, float* C) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), alpha, A,
              static_cast<int>(trans_a ? M : K), B, static_cast<int>(trans_b ? K : N), beta, C,
              static_cast<int>(N));
}
#endif

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, T alpha, const T* A, const T* B,
          T beta, T* C) {
  switch (mode()) {
    case Mode::serial:
      gemm_serial(trans_a, trans_b, M, N, K, alpha, A, B, beta, C);
      return;
    case Mode::openmp:
      gemm_openmp(trans_a, trans_b, M, N, K, alpha, A, B, beta, C);
      return;
    case Mode::blas:
#ifdef DIFFIL_HAVE_BLAS
      if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
        gemm_blas(trans_a, trans_b, M, N, K, alpha, A, B, beta, C);
        return;
      }
#endif
      gemm_openmp(trans_a, trans_b, M, N, K, alpha, A, B, beta, C);
      return;
  }
}

// ---------------------------------------------------------------------------
// Convolution support: im2col / col2im over NHWC images.
//
// Geometry follows TensorFlow SAME padding: out = ceil(in / stride), total
// pad = max((out-1)*stride + k - in, 0), split with the extra row/column at
// the bottom/right.
// ---------------------------------------------------------------------------

struct ConvGeom {
  int64_t in_h = 0, in_w = 0, in_c = 0;
  int64_t k = 0, stride = 1;
  int64_t out_h = 0, out_w = 0, out_c = 0;
  int64_t pad_top = 0, pad_left = 0;
};

inline ConvGeom conv_geom_same(int64_t in_h, int64_t in_w, int64_t in_c, int64_t out_c, int64_t k,
                               int64_t stride) {
  ConvGeom g;
  g.in_h = in_h;
  g.in_w = in_w;
  g.in_c = in_c;
  g.out_c = out_c;
  g.k = k;
  g.stride = stride;
  g.out_h = (in_h + stride - 1) / stride;
  g.out_w = (in_w + stride - 1) / stride;
  const int64_t pad_h = std::max<int64_t>((g.out_h - 1) * stride + k - in_h, 0);
  const int64_t pad_w = std::max<int64_t>((g.out_w - 1) * stride + k - in_w, 0);
  g.pad_top = pad_h / 2;
  g.pad_left = pad_w / 2;
  return g;
}

// cols: [B*out_h*out_w, k*k*in_c]
template <typename T>
void im2col_rows(const ConvGeom& g, const T* x, int64_t b0, int64_t b1, T* cols) {
  const int64_t row_len = g.k * g.k * g.in_c;
  const int64_t per_image = g.out_h * g.out_w;
  const bool parallel = mode() != Mode::serial;
#pragma omp parallel for schedule(static) collapse(2) if (parallel)
  for (int64_t b = b0; b < b1; ++b) {
    for (int64_t p = 0; p < per_image; ++p) {
      const int64_t oh = p / g.out_w, ow = p % g.out_w;
      T* row = cols + ((b - b0) * per_image + p) * row_len;
      for (int64_t kh = 0; kh < g.k; ++kh) {
        const int64_t ih = oh * g.stride - g.pad_top + kh;
        for (int64_t kw = 0; kw < g.k; ++kw) {
          const int64_t iw = ow * g.stride - g.pad_left + kw;
          T* dst = row + (kh * g.k + kw) * g.in_c;
          if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) {
            for (int64_t c = 0; c < g.in_c; ++c) dst[c] = T{0};
          } else {
            const T* src = x + ((b * g.in_h + ih) * g.in_w + iw) * g.in_c;
            std::memcpy(dst, src, sizeof(T) * static_cast<size_t>(g.in_c));
          }
        }
      }
    }
  }
}

// Scatter-add of cols back into images; inverse of im2col_rows.
// Parallel over batch entries only, so each image is written by one thread.
template <typename T>
void col2im_rows(const ConvGeom& g, const T* cols, int64_t b0, int64_t b1, T* x) {
  const int64_t row_len = g.k * g.k * g.in_c;
  const int64_t per_image = g.out_h * g.out_w;
  const bool parallel = mode() != Mode::serial;
#pragma omp parallel for schedule(static) if (parallel)
  for (int64_t b = b0; b < b1; ++b) {
    for (int64_t p = 0; p < per_image; ++p) {
      const int64_t oh = p / g.out_w, ow = p % g.out_w;
      const T* row = cols + ((b - b0) * per_image + p) * row_len;
      for (int64_t kh = 0; kh < g.k; ++kh) {
        const int64_t ih = oh * g.stride - g.pad_top + kh;
        if (ih < 0 || ih >= g.in_h) continue;
        for (int64_t kw = 0; kw < g.k; ++kw) {
          const int64_t iw = ow * g.stride - g.pad_left + kw;
          if (iw < 0 || iw >= g.in_w) continue;
          const T* src = row + (kh * g.k + kw) * g.in_c;
          T* dst = x + ((b * g.in_h + ih) * g.in_w + iw) * g.in_c;
          for (int64_t c = 0; c < g.in_c; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

// Conv work is chunked over the batch to cap the im2col scratch size.
inline int64_t conv_chunk_frames() { return 128; }

// y[b,oh,ow,oc] = sum_{kh,kw,ic} x[b,...] * w[kh,kw,ic,oc]
template <typename T>
void conv2d_forward(const ConvGeom& g, const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& y) {
  const int64_t B = x.dim(0);
  const int64_t row_len = g.k * g.k * g.in_c;
  const int64_t per_image = g.out_h * g.out_w;
  std::vector<T> cols;
  for (int64_t b0 = 0; b0 < B; b0 += conv_chunk_frames()) {
    const int64_t b1 = std::min(B, b0 + conv_chunk_frames());
    cols.resize(static_cast<size_t>((b1 - b0) * per_image * row_len));
    im2col_rows(g, x.data(), b0, b1, cols.data());
    gemm<T>(false, false, (b1 - b0) * per_image, g.out_c, row_len, T{1}, cols.data(), w.data(), T{0},
            y.data() + b0 * per_image * g.out_c);
  }
}

// gx = d(conv2d)/dx contracted with gy
template <typename T>
void conv2d_dinput(const ConvGeom& g, const Tensor<T>& gy, const Tensor<T>& w, Tensor<T>& gx) {
  const int64_t B = gy.dim(0);
  const int64_t row_len = g.k * g.k * g.in_c;
  const int64_t per_image = g.out_h * g.out_w;
  std::fill(gx.v.begin(), gx.v.end(), T{0});
  std::vector<T> dcols;
  for (int64_t b0 = 0; b0 < B; b0 += conv_chunk_frames()) {
    const int64_t b1 = std::min(B, b0 + conv_chunk_frames());
    dcols.resize(static_cast<size_t>((b1 - b0) * per_image * row_len));
    gemm<T>(false, true, (b1 - b0) * per_image, row_len, g.out_c, T{1},
            gy.data() + b0 * per_image * g.out_c, w.data(), T{0}, dcols.data());
    col2im_rows(g, dcols.data(), b0, b1, gx.data());
  }
}

// gw = d(conv2d)/dw contracted with gy; accumulates over the batch.
template <typename T>
void conv2d_dweight(const ConvGeom& g, const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>& gw) {
  const int64_t B = x.dim(0);
  const int64_t row_len = g.k * g.k * g.in_c;
  const int64_t per_image = g.out_h * g.out_w;
  std::fill(gw.v.begin(), gw.v.end(), T{0});
  std::vector<T> cols;
  for (int64_t b0 = 0; b0 < B; b0 += conv_chunk_frames()) {
    const int64_t b1 = std::min(B, b0 + conv_chunk_frames());
    cols.resize(static_cast<size_t>((b1 - b0) * per_image * row_len));
    im2col_rows(g, x.data(), b0, b1, cols.data());
    gemm<T>(true, false, row_len, g.out_c, (b1 - b0) * per_image, T{1}, cols.data(),
            gy.data() + b0 * per_image * g.out_c, T{1}, gw.data());
  }
}

}  // namespace diffil::kernels
