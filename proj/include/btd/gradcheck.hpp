#pragma once

// End-to-end finite-difference check of dL_total/dtheta on a small config.

#include "btd/config.hpp"

#include <map>
#include <string>
#include <vector>

namespace btd {

struct GradcheckOptions {
	std::size_t min_scalars = 200; // at least one scalar per parameter tensor is always checked
	double epsilon = 1e-5;         // central difference step
	double tolerance = 1e-4;       // pass iff max relative error <= tolerance
	double floor = 1e-3;           // denominator floor: gradients below it are held to tolerance * floor absolute
	std::uint64_t seed = 0;        // drives the sample and the scalar choice
	std::size_t batch = 2;         // samples averaged into the checked loss
	/// Test hook: scale the analytic gradient of this parameter by 1.5.
	std::string corrupt;
};

struct GradcheckEntry {
	std::string param;
	std::size_t index = 0;
	double analytic = 0.0;
	double numeric = 0.0;
	double rel_err = 0.0;
};

struct GradcheckReport {
	bool pass = false;
	double max_rel_err = 0.0;
	std::string worst_param;
	std::size_t tensors = 0;
	std::vector<GradcheckEntry> entries;
	std::map<std::string, double> module_worst; // keyed by the first name component
	std::vector<std::string> failing;           // parameters with an entry above tolerance

	std::string to_text() const;
	std::string to_json() const;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});

} // namespace btd
