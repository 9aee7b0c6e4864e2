#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace btd {

inline constexpr double kPrecisionThresholds[5] = {0.5, 0.6, 0.7, 0.8, 0.9};

/// IoU of two binary masks. Both empty gives 1; exactly one empty gives 0.
double sample_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct CategoryStats {
	std::size_t count = 0;
	double miou = 0.0;
	double oiou = 0.0;
};

struct Report {
	double pr[5] = {}; // Pr@0.5 .. Pr@0.9
	double oiou = 0.0;
	double miou = 0.0;
	std::size_t samples = 0;
	std::map<std::string, CategoryStats> per_category;

	/// Aligned plain-text table.
	std::string to_text() const;
	/// {pr50, pr60, pr70, pr80, pr90, oiou, miou, per_category}.
	std::string to_json() const;
};

class EvalAccumulator {
public:
	/// `category` keys the per-category table (the target's shape name).
	void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const std::string& category);
	/// Appends another accumulator's samples after this one's.
	void merge(const EvalAccumulator& other);
	/// Throws UsageError when no sample was added.
	Report finalize() const;

	std::size_t size() const { return entries_.size(); }

private:
	struct Entry {
		std::uint64_t inter = 0, uni = 0;
		double iou = 0.0;
		std::string category;
	};
	std::vector<Entry> entries_;
};

} // namespace btd
