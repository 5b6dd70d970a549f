#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace camnet {

// Deterministic RNG. mt19937 output is fixed by the standard; the
// distributions below are hand-rolled so streams are identical across
// standard-library implementations.
class Rng {
public:
    explicit Rng(std::uint32_t seed) : gen_(seed) {}

    std::uint32_t next_u32() { return gen_(); }

    // Uniform in [0,1) with 24 bits of resolution.
    double uniform() { return (next_u32() >> 8) * (1.0 / 16777216.0); }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Integer in [0, n).
    int below(int n) {
        int v = static_cast<int>(uniform() * n);
        return v >= n ? n - 1 : v;
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-12) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << gen_;
        if (have_spare_) os << " 1 " << spare_;
        else os << " 0 0";
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        int flag = 0;
        is >> flag >> spare_;
        have_spare_ = flag != 0;
    }

private:
    std::mt19937 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace camnet
