#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include "emoattack/errors.hpp"

namespace emoattack {

using cplx = std::complex<double>;

// Complex DFT of arbitrary length: iterative radix-2 for powers of two,
// recursive mixed radix otherwise. Forward transform uses exp(-2*pi*i*k*n/N);
// the inverse is unscaled.
class Fft {
 public:
  explicit Fft(std::size_t n) : n_(n) {
    if (n == 0) throw DomainError("FFT size must be positive");
    twiddle_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      twiddle_[k] = {std::cos(a), std::sin(a)};
    }
    pow2_ = (n & (n - 1)) == 0;
    if (pow2_) {
      bitrev_.resize(n);
      std::size_t bits = 0;
      while ((std::size_t{1} << bits) < n) ++bits;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = 0;
        for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
        bitrev_[i] = r;
      }
    } else {
      std::size_t m = n;
      for (std::size_t p : {4u, 2u, 3u, 5u}) {
        while (m % p == 0) {
          factors_.push_back(p);
          m /= p;
        }
      }
      for (std::size_t p = 7; m > 1; p += 2) {
        while (m % p == 0) {
          factors_.push_back(p);
          m /= p;
        }
      }
    }
  }

  std::size_t size() const { return n_; }

  void forward(std::span<const cplx> in, std::span<cplx> out) const { transform(in, out, false); }
  void inverse(std::span<const cplx> in, std::span<cplx> out) const { transform(in, out, true); }

 private:
  void transform(std::span<const cplx> in, std::span<cplx> out, bool inv) const {
    if (in.size() != n_ || out.size() != n_) throw DomainError("FFT buffer size mismatch");
    if (pow2_) {
      for (std::size_t i = 0; i < n_; ++i) out[bitrev_[i]] = in[i];
      for (std::size_t len = 2; len <= n_; len <<= 1) {
        const std::size_t half = len / 2;
        const std::size_t step = n_ / len;
        for (std::size_t start = 0; start < n_; start += len) {
          for (std::size_t j = 0; j < half; ++j) {
            cplx w = twiddle_[j * step];
            if (inv) w = std::conj(w);
            const cplx u = out[start + j];
            const cplx v = out[start + j + half] * w;
            out[start + j] = u + v;
            out[start + j + half] = u - v;
          }
        }
      }
    } else {
      std::vector<cplx> scratch(factors_.empty() ? 1 : *std::max_element(factors_.begin(), factors_.end()));
      recurse(in.data(), 1, out.data(), n_, 0, inv, scratch);
    }
  }

  cplx tw(std::size_t k, bool inv) const {
    const cplx w = twiddle_[k % n_];
    return inv ? std::conj(w) : w;
  }

  void recurse(const cplx* in, std::size_t stride, cplx* out, std::size_t n, std::size_t level, bool inv,
               std::vector<cplx>& scratch) const {
    if (n == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t p = factors_[level];
    const std::size_t m = n / p;
    for (std::size_t q = 0; q < p; ++q) recurse(in + q * stride, stride * p, out + q * m, m, level + 1, inv, scratch);
    const std::size_t step = n_ / n;
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t q = 0; q < p; ++q) scratch[q] = out[q * m + k] * tw(q * k * step, inv);
      for (std::size_t r = 0; r < p; ++r) {
        cplx acc = 0.0;
        for (std::size_t q = 0; q < p; ++q) acc += scratch[q] * tw(((q * r) % p) * m * step, inv);
        out[k + r * m] = acc;
      }
    }
  }

  std::size_t n_;
  bool pow2_ = false;
  std::vector<cplx> twiddle_;
  std::vector<std::size_t> bitrev_;
  std::vector<std::size_t> factors_;
};

// Real-input DFT of even length n via one complex transform of length n/2.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n), half_(n / 2) {
    if (n < 2 || n % 2 != 0) throw DomainError("real FFT size must be even");
    post_.resize(half_ + 1);
    for (std::size_t k = 0; k <= half_; ++k) {
      const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      post_[k] = {std::cos(a), std::sin(a)};
    }
  }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return half_ + 1; }

  // out has n/2 + 1 bins.
  void forward(std::span<const double> in, std::span<cplx> out) const {
    if (in.size() != n_ || out.size() != half_ + 1) throw DomainError("real FFT buffer size mismatch");
    std::vector<cplx> z(half_), zf(half_);
    for (std::size_t i = 0; i < half_; ++i) z[i] = {in[2 * i], in[2 * i + 1]};
    fft_.forward(z, zf);
    for (std::size_t k = 0; k <= half_; ++k) {
      const cplx a = zf[k % half_];
      const cplx b = std::conj(zf[(half_ - k) % half_]);
      const cplx even = 0.5 * (a + b);
      const cplx odd = cplx(0.0, -0.5) * (a - b);
      out[k] = even + post_[k] * odd;
    }
  }

  // Inverse of forward, scaled by 1/n; imaginary parts of bins 0 and n/2 are ignored.
  void inverse(std::span<const cplx> in, std::span<double> out) const {
    if (out.size() != n_ || in.size() != half_ + 1) throw DomainError("real FFT buffer size mismatch");
    std::vector<cplx> z(half_), zt(half_);
    for (std::size_t k = 0; k < half_; ++k) {
      const cplx a = in[k];
      const cplx b = std::conj(in[half_ - k]);
      const cplx even = 0.5 * (a + b);
      const cplx odd = 0.5 * (a - b) * std::conj(post_[k]);
      z[k] = even + cplx(0.0, 1.0) * odd;
    }
    fft_.inverse(z, zt);
    const double scale = 1.0 / static_cast<double>(half_);
    for (std::size_t i = 0; i < half_; ++i) {
      out[2 * i] = zt[i].real() * scale;
      out[2 * i + 1] = zt[i].imag() * scale;
    }
  }

 private:
  std::size_t n_;
  std::size_t half_;
  Fft fft_{half_};
  std::vector<cplx> post_;
};

// Plans are immutable once built; the cache hands out shared instances.
inline std::shared_ptr<const RealFft> real_fft_plan(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const RealFft>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_shared<const RealFft>(n);
  return slot;
}

}  // namespace emoattack
