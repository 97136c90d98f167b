#pragma once

// Shared plumbing: error type, deterministic RNG, content hashing,
// key/value text blocks, binary file helpers, parallel loop wrapper.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace tw {

namespace fs = std::filesystem;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

// ---------------------------------------------------------------------------
// RNG. splitmix64 core; all distributions hand-mapped so streams are
// bit-reproducible across standard libraries.
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[size_t(uniform_int(int(i)))]);
    }

    // Decorrelated child stream for item `index` of a seeded collection.
    static uint64_t derive(uint64_t seed, uint64_t index) {
        uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL + index * 0xbf58476d1ce4e5b9ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    uint64_t state_;
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit content hash (integrity fingerprints, not crypto).
// ---------------------------------------------------------------------------
struct Fnv64 {
    uint64_t h = 1469598103934665603ULL;
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    }
    uint64_t digest() const { return h; }
};

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

inline std::string hash_bytes(const void* data, size_t n) {
    Fnv64 f;
    f.update(data, n);
    return hex64(f.digest());
}

inline std::string hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open for hashing: " + path.string());
    Fnv64 f;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) f.update(buf, size_t(in.gcount()));
    return hex64(f.digest());
}

// ---------------------------------------------------------------------------
// Key/value text blocks: "key = value" lines, '#' comments. Used by volume
// headers, archive metadata, config snapshots and reports.
// ---------------------------------------------------------------------------
using KvMap = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline KvMap parse_kv(std::istream& in) {
    KvMap m;
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        check(eq != std::string::npos, "malformed key=value line: " + t);
        m[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return m;
}

inline KvMap parse_kv_file(const fs::path& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open: " + path.string());
    return parse_kv(in);
}

inline void write_kv(std::ostream& out, const KvMap& m) {
    for (const auto& [k, v] : m) out << k << " = " << v << "\n";
}

inline void write_kv_file(const fs::path& path, const KvMap& m) {
    std::ofstream out(path);
    check(out.good(), "cannot write: " + path.string());
    write_kv(out, m);
}

inline const std::string& kv_get(const KvMap& m, const std::string& key) {
    auto it = m.find(key);
    check(it != m.end(), "missing key: " + key);
    return it->second;
}

inline std::string kv_get_or(const KvMap& m, const std::string& key, const std::string& dflt) {
    auto it = m.find(key);
    return it == m.end() ? dflt : it->second;
}

// Locale-independent numeric formatting for reports (shortest round-trip-ish).
inline std::string fmt_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

inline double parse_double(const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    size_t pos = 0;
    double v = std::stod(s, &pos);
    check(pos == s.size() || trim(s.substr(pos)).empty(), "malformed number: " + s);
    return v;
}

inline long parse_long(const std::string& s) {
    size_t pos = 0;
    long v = std::stol(s, &pos);
    check(pos == s.size(), "malformed integer: " + s);
    return v;
}

// ---------------------------------------------------------------------------
// Binary file helpers (little-endian payloads; this code targets LE hosts).
// ---------------------------------------------------------------------------
template <typename T>
void write_binary(const fs::path& path, const std::vector<T>& v) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "cannot write: " + path.string());
    out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(T)));
    check(out.good(), "short write: " + path.string());
}

template <typename T>
std::vector<T> read_binary(const fs::path& path, size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open: " + path.string());
    in.seekg(0, std::ios::end);
    size_t bytes = size_t(in.tellg());
    in.seekg(0);
    check(bytes == expected_count * sizeof(T),
          "payload size mismatch for " + path.string() + ": have " + std::to_string(bytes) +
              " bytes, expected " + std::to_string(expected_count * sizeof(T)));
    std::vector<T> v(expected_count);
    in.read(reinterpret_cast<char*>(v.data()), std::streamsize(bytes));
    check(in.good(), "short read: " + path.string());
    return v;
}

// ---------------------------------------------------------------------------
// Parallel loop. Every iteration writes disjoint state; no cross-thread
// reductions, so results do not depend on the thread count.
// ---------------------------------------------------------------------------
template <typename F>
void parallel_for(int n, F&& f) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < n; ++i) f(i);
}

inline int hardware_threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace tw
