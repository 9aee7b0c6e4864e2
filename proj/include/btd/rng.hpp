#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace btd {

/// Deterministic generator. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the distributions are spelled out here
/// because std:: distributions are implementation-defined.
class Rng {
public:
	explicit Rng(std::uint64_t seed) : engine_(seed) {}
	Rng(std::uint64_t seed, std::uint64_t stream) {
		std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
		                  static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
		engine_.seed(seq);
	}

	std::uint64_t next() { return engine_(); }

	/// Uniform in [0, 1).
	double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
	double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

	/// Uniform integer in [0, n).
	std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

	double normal() {
		double u1 = uniform();
		while (u1 <= 0.0) u1 = uniform();
		const double u2 = uniform();
		return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
	}

	template <class It>
	void shuffle(It first, It last) {
		const auto n = static_cast<std::size_t>(last - first);
		for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[index(i)]);
	}

private:
	std::mt19937_64 engine_;
};

} // namespace btd
