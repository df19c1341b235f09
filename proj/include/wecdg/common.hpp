#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>

namespace wecdg {

// All recoverable failures are reported as Error with a stable kind tag.
// The CLI maps these to "error[<kind>]: <message>" and exit code 1.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string &message)
      : std::runtime_error("[" + kind + "] " + message), kind_(std::move(kind)) {}

  const std::string &kind() const { return kind_; }

 private:
  std::string kind_;
};

#define WECDG_DEFINE_ERROR(Name)                                           \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string &message) : Error(#Name, message) {}   \
  }

WECDG_DEFINE_ERROR(ShapeMismatch);
WECDG_DEFINE_ERROR(NotScalar);
WECDG_DEFINE_ERROR(MissingGrad);
WECDG_DEFINE_ERROR(OddDimensions);
WECDG_DEFINE_ERROR(NonPositiveTemperature);
WECDG_DEFINE_ERROR(UnknownLabel);
WECDG_DEFINE_ERROR(EmptyImage);
WECDG_DEFINE_ERROR(ZeroVector);
WECDG_DEFINE_ERROR(EmptyDescriptorSet);
WECDG_DEFINE_ERROR(EmptyDataset);
WECDG_DEFINE_ERROR(UnsupportedFormat);
WECDG_DEFINE_ERROR(CorruptFile);
WECDG_DEFINE_ERROR(IoError);
WECDG_DEFINE_ERROR(ImageTooSmall);
WECDG_DEFINE_ERROR(ConfigError);

#undef WECDG_DEFINE_ERROR

// xoshiro256++ with splitmix64 seeding. All randomness in the library goes
// through this generator so that a (seed, config) pair fixes every bit of
// initialization, data synthesis and augmentation, independent of platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto &word : state_) word = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Box-Muller; consumes exactly two uniforms per call for reproducibility.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  static uint64_t splitmix64(uint64_t &x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  uint64_t state_[4];
};

// Allocator that leaves trivially-constructible elements uninitialized on
// resize. Op outputs are fully written (or explicitly zeroed) by each kernel,
// so the default zero-fill of std::vector would only add memory traffic.
template <typename T, typename A = std::allocator<T>>
class default_init_allocator : public A {
 public:
  template <typename U>
  struct rebind {
    using other =
        default_init_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
  };
  using A::A;

  template <typename U>
  void construct(U *ptr) noexcept(std::is_nothrow_default_constructible<U>::value) {
    ::new (static_cast<void *>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U *ptr, Args &&...args) {
    std::allocator_traits<A>::construct(static_cast<A &>(*this), ptr,
                                        std::forward<Args>(args)...);
  }
};

// Stable 64-bit name hash (FNV-1a). Used to derive per-parameter seeds so
// initialization does not depend on construction order.
inline uint64_t hash_name(const std::string &name) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng rng_for(uint64_t seed, const std::string &name) {
  uint64_t mixed = seed ^ hash_name(name);
  return Rng(Rng::splitmix64(mixed));
}

}  // namespace wecdg
