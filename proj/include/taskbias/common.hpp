#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace taskbias {

// ----------------------------- errors -----------------------------
// Thrown by subcommand argument handling and config parsing.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad files, bad schemas, missing inputs, out-of-range requests.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values, degenerate numerical states.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- hashing -----------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::uint64_t fnv1a64_u64(std::uint64_t v, std::uint64_t seed = 0xcbf29ce484222325ull) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    return fnv1a64(bytes, 8, seed);
}

// ----------------------------- rng -----------------------------
// SplitMix64 core. Self-contained so that streams are identical across
// platforms and standard-library versions.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        (void)splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    // independent child stream identified by tag
    Rng fork(std::uint64_t tag) const { return Rng(fnv1a64_u64(tag, fnv1a64_u64(state_))); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// mix a global seed with a stream tag into a fresh seed
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) { return fnv1a64_u64(tag, fnv1a64_u64(seed)); }

// ----------------------------- worker pool -----------------------------
// Row-partitioned parallelism. Every task writes a disjoint output range, so
// results are bitwise identical for any worker count.
class WorkerPool {
public:
    static WorkerPool& instance() {
        static WorkerPool pool;
        return pool;
    }

    void set_workers(int n) {
        std::unique_lock lock(mu_);
        target_workers_ = n < 1 ? 1 : n;
    }

    int workers() {
        std::unique_lock lock(mu_);
        return target_workers_;
    }

    // fn(begin, end) over [0, count) split into contiguous chunks
    void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
        int nw;
        {
            std::unique_lock lock(mu_);
            nw = target_workers_;
        }
        if (nw <= 1 || count < 2) {
            fn(0, count);
            return;
        }
        const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(nw), count);
        const std::size_t step = (count + chunks - 1) / chunks;
        std::vector<std::thread> threads;
        threads.reserve(chunks - 1);
        for (std::size_t c = 1; c < chunks; ++c) {
            const std::size_t b = c * step;
            const std::size_t e = std::min(count, b + step);
            if (b >= e) break;
            threads.emplace_back([&fn, b, e] { fn(b, e); });
        }
        fn(0, std::min(count, step));
        for (auto& t : threads) t.join();
    }

private:
    WorkerPool() : target_workers_(default_workers()) {}

    static int default_workers() {
        const unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }

    std::mutex mu_;
    int target_workers_;
};

inline void set_workers(int n) { WorkerPool::instance().set_workers(n); }
inline int workers() { return WorkerPool::instance().workers(); }

inline void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
    WorkerPool::instance().parallel_for(count, fn);
}

}  // namespace taskbias
