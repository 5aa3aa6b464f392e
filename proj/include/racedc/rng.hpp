#ifndef RACEDC_RNG_HPP
#define RACEDC_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace racedc {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z)
{
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace detail

/// Stream labels so that different consumers of one root seed never share draws.
enum class Stream : std::uint64_t {
    batch_data = 1,
    batch_mean = 2,
    projection = 3,
    cv_folds = 4,
    replication = 5,
};

/// Derive a substream key from a root seed and a path of identifiers.
/// The result depends only on the arguments, never on generation order.
inline std::uint64_t derive_key(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
{
    std::uint64_t k = detail::mix64(seed + detail::kGolden);
    for (std::uint64_t id : path)
        k = detail::mix64(k ^ detail::mix64(id + detail::kGolden));
    return k;
}

inline std::uint64_t derive_key(std::uint64_t seed, Stream stream,
                                std::initializer_list<std::uint64_t> ids = {})
{
    std::uint64_t k = derive_key(seed, {static_cast<std::uint64_t>(stream)});
    for (std::uint64_t id : ids)
        k = detail::mix64(k ^ detail::mix64(id + detail::kGolden));
    return k;
}

/// Counter-based generator: the i-th output is a bijective mix of (key + i * golden).
/// Satisfies UniformRandomBitGenerator.
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t key) : key_(key) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return detail::mix64(key_ + (++counter_) * detail::kGolden); }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Standard normal sampler bound to one substream.
class NormalStream {
public:
    explicit NormalStream(std::uint64_t key) : rng_(key) {}

    double operator()() { return dist_(rng_); }
    CounterRng& engine() { return rng_; }

private:
    CounterRng rng_;
    std::normal_distribution<double> dist_{0.0, 1.0};
};

} // namespace racedc

#endif
