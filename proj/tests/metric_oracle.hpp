#pragma once

// Independent re-computation of the evaluation metrics with a plain pixel
// loop, used as the reference for the metrics module.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace btd::testing {

struct OracleSample {
	std::vector<std::uint8_t> pred, gt;
	std::string category;
};

struct OracleReport {
	double pr[5] = {};
	double oiou = 0, miou = 0;
	struct Cat {
		std::size_t count = 0;
		double miou = 0, oiou = 0;
	};
	std::map<std::string, Cat> per_category;
};

inline OracleReport oracle_metrics(const std::vector<OracleSample>& samples) {
	const double thresholds[5] = {0.5, 0.6, 0.7, 0.8, 0.9};
	OracleReport r;
	std::uint64_t total_i = 0, total_u = 0;
	std::vector<double> ious;
	std::map<std::string, std::vector<double>> cat_ious;
	std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> cat_iu;
	for (const auto& s : samples) {
		std::uint64_t i = 0, u = 0;
		for (std::size_t p = 0; p < s.pred.size(); ++p) {
			const bool a = s.pred[p] != 0, b = s.gt[p] != 0;
			if (a && b) ++i;
			if (a || b) ++u;
		}
		const double iou = u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
		total_i += i;
		total_u += u;
		ious.push_back(iou);
		cat_ious[s.category].push_back(iou);
		cat_iu[s.category].first += i;
		cat_iu[s.category].second += u;
		for (int t = 0; t < 5; ++t)
			if (iou > thresholds[t]) r.pr[t] += 1.0;
	}
	auto mean = [](std::vector<double> v) {
		std::sort(v.begin(), v.end());
		double acc = 0;
		for (double x : v) acc += x;
		return acc / static_cast<double>(v.size());
	};
	for (auto& p : r.pr) p /= static_cast<double>(samples.size());
	r.miou = mean(ious);
	r.oiou = total_u == 0 ? 1.0 : static_cast<double>(total_i) / static_cast<double>(total_u);
	for (const auto& [name, v] : cat_ious) {
		const auto [ci, cu] = cat_iu[name];
		r.per_category[name] = {v.size(), mean(v), cu == 0 ? 1.0 : static_cast<double>(ci) / static_cast<double>(cu)};
	}
	return r;
}

} // namespace btd::testing
