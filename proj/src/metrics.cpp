#include "btd/metrics.hpp"

#include "btd/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace btd {

namespace {

struct Counts {
	std::uint64_t inter = 0, uni = 0;
};

Counts count(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
	if (pred.size() != gt.size())
		throw DimensionError("iou: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
		                     std::to_string(gt.size()) + ")");
	Counts c;
	for (std::size_t i = 0; i < pred.size(); ++i) {
		if (pred[i] > 1 || gt[i] > 1) throw UsageError("iou: masks must be binary");
		c.inter += pred[i] & gt[i];
		c.uni += pred[i] | gt[i];
	}
	return c;
}

double iou_of(const Counts& c) { return c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni); }

} // namespace

double sample_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) { return iou_of(count(pred, gt)); }

void EvalAccumulator::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                          const std::string& category) {
	Counts c = count(pred, gt);
	entries_.push_back({c.inter, c.uni, iou_of(c), category});
}

void EvalAccumulator::merge(const EvalAccumulator& other) {
	entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
}

namespace {

// Summing in ascending order makes the mean independent of sample order.
double sorted_mean(std::vector<double>& values) {
	std::sort(values.begin(), values.end());
	double acc = 0.0;
	for (double v : values) acc += v;
	return acc / static_cast<double>(values.size());
}

} // namespace

Report EvalAccumulator::finalize() const {
	if (entries_.empty()) throw UsageError("metrics: no samples accumulated");
	Report r;
	r.samples = entries_.size();
	std::uint64_t inter = 0, uni = 0;
	std::vector<double> ious;
	std::size_t hits[5] = {};
	struct Cat {
		std::vector<double> ious;
		std::uint64_t inter = 0, uni = 0;
	};
	std::map<std::string, Cat> cats;
	for (const auto& e : entries_) {
		inter += e.inter;
		uni += e.uni;
		ious.push_back(e.iou);
		for (std::size_t t = 0; t < 5; ++t)
			if (e.iou > kPrecisionThresholds[t]) ++hits[t];
		Cat& c = cats[e.category];
		c.ious.push_back(e.iou);
		c.inter += e.inter;
		c.uni += e.uni;
	}
	const double n = static_cast<double>(entries_.size());
	for (std::size_t t = 0; t < 5; ++t) r.pr[t] = static_cast<double>(hits[t]) / n;
	r.miou = sorted_mean(ious);
	r.oiou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
	for (auto& [name, c] : cats)
		r.per_category[name] = {c.ious.size(), sorted_mean(c.ious),
		                        c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni)};
	return r;
}

std::string Report::to_text() const {
	std::ostringstream os;
	char line[160];
	std::snprintf(line, sizeof line, "%-10s %8s %8s %8s %8s %8s %8s %8s\n", "split", "Pr@0.5", "Pr@0.6", "Pr@0.7",
	              "Pr@0.8", "Pr@0.9", "oIoU", "mIoU");
	os << line;
	std::snprintf(line, sizeof line, "%-10s %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f\n", "all", 100 * pr[0],
	              100 * pr[1], 100 * pr[2], 100 * pr[3], 100 * pr[4], 100 * oiou, 100 * miou);
	os << line << "\n";
	std::snprintf(line, sizeof line, "%-10s %8s %8s %8s\n", "category", "count", "mIoU", "oIoU");
	os << line;
	for (const auto& [name, c] : per_category) {
		std::snprintf(line, sizeof line, "%-10s %8zu %8.2f %8.2f\n", name.c_str(), c.count, 100 * c.miou, 100 * c.oiou);
		os << line;
	}
	return os.str();
}

std::string Report::to_json() const {
	nlohmann::ordered_json j;
	const char* keys[5] = {"pr50", "pr60", "pr70", "pr80", "pr90"};
	for (std::size_t t = 0; t < 5; ++t) j[keys[t]] = pr[t];
	j["oiou"] = oiou;
	j["miou"] = miou;
	j["per_category"] = nlohmann::ordered_json::object();
	for (const auto& [name, c] : per_category)
		j["per_category"][name] = {{"count", c.count}, {"miou", c.miou}, {"oiou", c.oiou}};
	return j.dump(2) + "\n";
}

} // namespace btd
