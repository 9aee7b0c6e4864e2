#include "btd/checkpoint.hpp"

#include "btd/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace btd {

using json = nlohmann::ordered_json;

namespace {

static_assert(std::endian::native == std::endian::little, "payload is written in host order");

void append(std::vector<double>& payload, const std::vector<double>& values, json& entry) {
	entry["offset"] = payload.size();
	payload.insert(payload.end(), values.begin(), values.end());
}

std::vector<double> read_payload(const std::string& path) {
	std::ifstream in(path, std::ios::binary | std::ios::ate);
	if (!in) throw FormatError("checkpoint: cannot open payload " + path);
	const auto bytes = static_cast<std::size_t>(in.tellg());
	if (bytes % sizeof(double) != 0) throw FormatError("checkpoint: payload " + path + " is not a whole number of doubles");
	std::vector<double> out(bytes / sizeof(double));
	in.seekg(0);
	in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
	if (!in) throw FormatError("checkpoint: short read from " + path);
	return out;
}

std::vector<double> take(const std::vector<double>& payload, std::size_t offset, std::size_t count,
                         const std::string& what) {
	if (offset > payload.size() || count > payload.size() - offset)
		throw FormatError("checkpoint: " + what + " runs past the end of the payload");
	return {payload.begin() + static_cast<std::ptrdiff_t>(offset),
	        payload.begin() + static_cast<std::ptrdiff_t>(offset + count)};
}

void write_file(const std::string& path, const char* data, std::size_t size) {
	const std::string tmp = path + ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out) throw FormatError("checkpoint: cannot write " + tmp);
		out.write(data, static_cast<std::streamsize>(size));
		if (!out) throw FormatError("checkpoint: write failed for " + tmp);
	}
	std::filesystem::rename(tmp, path);
}

} // namespace

std::string checkpoint_stem(const std::string& path) {
	for (const char* ext : {".json", ".bin"}) {
		const std::string e(ext);
		if (path.size() > e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0)
			return path.substr(0, path.size() - e.size());
	}
	return path;
}

Checkpoint snapshot(const ModelConfig& config, const ParameterStore& store, std::size_t global_step, std::size_t epoch,
                    const OptimizerState* optimizer) {
	Checkpoint c;
	c.config = config;
	c.global_step = global_step;
	c.epoch = epoch;
	for (const auto& p : store) {
		auto d = p.value.data();
		c.params.push_back({p.name, p.value.shape(), std::vector<double>(d.begin(), d.end())});
	}
	if (optimizer) c.optimizer = *optimizer;
	return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
	const std::string stem = checkpoint_stem(path);
	const std::string payload_name = std::filesystem::path(stem + ".bin").filename().string();
	std::vector<double> payload;
	json manifest;
	manifest["format"] = kCheckpointFormat;
	manifest["config"] = json::parse(ckpt.config.to_json());
	manifest["global_step"] = ckpt.global_step;
	manifest["epoch"] = ckpt.epoch;
	manifest["payload"] = payload_name;
	json table = json::array();
	for (const auto& t : ckpt.params) {
		if (numel(t.shape) != t.values.size())
			throw UsageError("checkpoint: parameter " + t.name + " has " + std::to_string(t.values.size()) +
			                 " values for shape " + to_string(t.shape));
		json entry;
		entry["name"] = t.name;
		entry["shape"] = t.shape;
		append(payload, t.values, entry);
		table.push_back(std::move(entry));
	}
	manifest["params"] = std::move(table);
	if (ckpt.optimizer) {
		const OptimizerState& o = *ckpt.optimizer;
		if (o.m.size() != ckpt.params.size() || o.v.size() != ckpt.params.size())
			throw UsageError("checkpoint: optimizer state does not match the parameter table");
		json opt;
		opt["step"] = o.step;
		json moments = json::array();
		for (std::size_t i = 0; i < o.m.size(); ++i) {
			if (o.m[i].size() != ckpt.params[i].values.size() || o.v[i].size() != ckpt.params[i].values.size())
				throw UsageError("checkpoint: optimizer moments for " + ckpt.params[i].name + " have the wrong size");
			json entry, m, v;
			append(payload, o.m[i], m);
			append(payload, o.v[i], v);
			entry["m_offset"] = m["offset"];
			entry["v_offset"] = v["offset"];
			moments.push_back(std::move(entry));
		}
		opt["moments"] = std::move(moments);
		manifest["optimizer"] = std::move(opt);
	} else {
		manifest["optimizer"] = nullptr;
	}
	manifest["payload_values"] = payload.size();

	const auto parent = std::filesystem::path(stem).parent_path();
	if (!parent.empty()) std::filesystem::create_directories(parent);
	write_file(stem + ".bin", reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(double));
	const std::string text = manifest.dump(2) + "\n";
	write_file(stem + ".json", text.data(), text.size());
}

Checkpoint load_checkpoint(const std::string& path) {
	const std::string stem = checkpoint_stem(path);
	const std::string manifest_path = stem + ".json";
	std::ifstream in(manifest_path);
	if (!in) throw FormatError("checkpoint: cannot open manifest " + manifest_path);
	json m;
	try {
		m = json::parse(in);
	} catch (const json::parse_error& e) {
		throw FormatError("checkpoint: " + manifest_path + " is not valid JSON: " + e.what());
	}
	try {
		const std::string format = m.at("format").get<std::string>();
		if (format != kCheckpointFormat)
			throw FormatError("checkpoint: " + manifest_path + " has format '" + format + "', expected '" +
			                  kCheckpointFormat + "'");
		Checkpoint c;
		c.config = ModelConfig::from_json(m.at("config").dump());
		c.global_step = m.at("global_step").get<std::size_t>();
		c.epoch = m.at("epoch").get<std::size_t>();
		const auto payload_path = (std::filesystem::path(stem).parent_path() / m.at("payload").get<std::string>()).string();
		const std::vector<double> payload = read_payload(payload_path);
		if (payload.size() != m.at("payload_values").get<std::size_t>())
			throw FormatError("checkpoint: payload " + payload_path + " holds " + std::to_string(payload.size()) +
			                  " values, manifest expects " + m.at("payload_values").dump());
		for (const auto& e : m.at("params")) {
			CheckpointTensor t;
			t.name = e.at("name").get<std::string>();
			t.shape = e.at("shape").get<Shape>();
			t.values = take(payload, e.at("offset").get<std::size_t>(), numel(t.shape), "parameter " + t.name);
			c.params.push_back(std::move(t));
		}
		if (!m.at("optimizer").is_null()) {
			const json& o = m.at("optimizer");
			OptimizerState s;
			s.step = o.at("step").get<std::size_t>();
			const json& moments = o.at("moments");
			if (moments.size() != c.params.size())
				throw FormatError("checkpoint: optimizer table size does not match the parameter table");
			for (std::size_t i = 0; i < moments.size(); ++i) {
				const std::size_t n = c.params[i].values.size();
				s.m.push_back(take(payload, moments[i].at("m_offset").get<std::size_t>(), n, "moment m of " + c.params[i].name));
				s.v.push_back(take(payload, moments[i].at("v_offset").get<std::size_t>(), n, "moment v of " + c.params[i].name));
			}
			c.optimizer = std::move(s);
		}
		return c;
	} catch (const nlohmann::json::exception& e) {
		throw FormatError("checkpoint: malformed manifest " + manifest_path + ": " + e.what());
	} catch (const ConfigError& e) {
		throw FormatError("checkpoint: bad config in " + manifest_path + ": " + e.what());
	}
}

void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& store) {
	std::set<std::string> seen;
	for (const auto& t : ckpt.params) {
		if (!seen.insert(t.name).second) throw FormatError("checkpoint: parameter " + t.name + " appears twice");
		auto id = store.find(t.name);
		if (!id) throw FormatError("checkpoint: unknown parameter " + t.name + " (" + kCheckpointFormat + ")");
		Parameter& p = store[*id];
		if (p.value.shape() != t.shape)
			throw FormatError("checkpoint: parameter " + t.name + " has shape " + to_string(t.shape) + ", model expects " +
			                  to_string(p.value.shape()) + " (" + kCheckpointFormat + ")");
	}
	for (const auto& p : store)
		if (!seen.count(p.name)) throw FormatError("checkpoint: missing parameter " + p.name + " (" + kCheckpointFormat + ")");
	for (const auto& t : ckpt.params) {
		Parameter& p = store[*store.find(t.name)];
		auto dst = p.value.mutable_data();
		std::copy(t.values.begin(), t.values.end(), dst.begin());
	}
}

} // namespace btd
