#include "fogdet/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace fogdet::training {

// ---- variants ------------------------------------------------------------------------

VariantFlags variant_flags(Variant v) {
	switch (v) {
	case Variant::Base: return {false, false, false, false};
	case Variant::V1: return {true, false, false, false};
	case Variant::V2: return {true, true, false, false};
	case Variant::V3: return {true, true, true, false};
	case Variant::V4: return {true, true, true, true};
	case Variant::V5: return {false, true, true, true};
	case Variant::V6: return {true, false, true, true};
	case Variant::V7: return {true, true, false, true};
	}
	throw InvalidArgument("unknown variant");
}

std::string variant_name(Variant v) {
	static const char* names[] = {"Base", "V1", "V2", "V3", "V4", "V5", "V6", "V7"};
	return names[static_cast<int>(v)];
}

const std::vector<Variant>& all_variants() {
	static const std::vector<Variant> all{Variant::Base, Variant::V1, Variant::V2, Variant::V3,
	                                      Variant::V4,   Variant::V5, Variant::V6, Variant::V7};
	return all;
}

Variant parse_variant(const std::string& name) {
	for (Variant v : all_variants()) {
		std::string n = variant_name(v);
		if (std::equal(n.begin(), n.end(), name.begin(), name.end(),
		               [](char a, char b) { return std::tolower(a) == std::tolower(b); })) {
			return v;
		}
	}
	throw ConfigError("unknown variant '" + name + "' (expected Base or V1..V7)");
}

const std::vector<LossWeights>& sweep_weight_grid() {
	static const std::vector<LossWeights> grid{{1.0, 1.0}, {0.7, 0.3}, {0.5, 0.5}, {0.2, 0.6},
	                                           {0.2, 0.8}, {0.2, 1.0}, {0.1, 1.2}};
	return grid;
}

std::string weight_label(const LossWeights& w) {
	char buf[64];
	std::snprintf(buf, sizeof buf, "%g&%g", w.detection, w.restoration);
	return buf;
}

// ---- configuration ------------------------------------------------------------------

ModelConfig TrainConfig::model_config() const {
	ModelConfig m = model;
	m.use_dtfe = flags.dtfe;
	m.use_scconv = flags.scconv;
	return m;
}

void TrainConfig::validate() const {
	std::vector<std::string> bad;
	if (epochs < 1) bad.push_back("train.epochs must be >= 1");
	if (batch_size < 1) bad.push_back("train.batch_size must be >= 1");
	if (!(base_lr >= 0)) bad.push_back("train.base_lr must be >= 0");
	if (!(lr_floor >= 0) || lr_floor > base_lr) bad.push_back("train.lr_floor must lie in [0, base_lr]");
	if (!(momentum >= 0 && momentum < 1)) bad.push_back("train.momentum must lie in [0, 1)");
	if (!(weight_decay >= 0)) bad.push_back("train.weight_decay must be >= 0");
	if (log_every < 0) bad.push_back("train.log_every must be >= 0");
	if (!(weights.detection >= 0)) bad.push_back("loss.lambda_detection must be >= 0");
	if (!(weights.restoration >= 0)) bad.push_back("loss.lambda_restoration must be >= 0");
	if (weights.detection == 0 && weights.restoration == 0) bad.push_back("loss weights must not both be zero");
	if (!(focal_alpha >= 0 && focal_alpha <= 1)) bad.push_back("loss.focal_alpha must lie in [0, 1]");
	if (!(focal_gamma >= 0)) bad.push_back("loss.focal_gamma must be >= 0");
	if (!(beta_range.first > 0) || beta_range.first > beta_range.second) {
		bad.push_back("data.beta_min/beta_max must satisfy 0 < beta_min <= beta_max");
	}
	if (!(airlight >= 0 && airlight <= 1)) bad.push_back("data.airlight must lie in [0, 1]");
	try {
		model_config().validate();
	} catch (const ConfigError& e) {
		bad.push_back(e.what());
	}
	if (!bad.empty()) {
		std::string msg = "invalid training config:";
		for (const auto& b : bad) msg += "\n  " + b;
		throw ConfigError(msg);
	}
}

namespace {

std::string fmt_double(double v) {
	char buf[64];
	std::snprintf(buf, sizeof buf, "%.17g", v);
	// shortest form that still round-trips
	for (int prec = 1; prec <= 17; ++prec) {
		char shorter[64];
		std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
		if (std::strtod(shorter, nullptr) == v) return shorter;
	}
	return buf;
}

std::optional<double> to_double(const std::string& s) {
	double v{};
	auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
	if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
	return v;
}

template <typename Int>
std::optional<Int> to_int(const std::string& s) {
	Int v{};
	auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
	if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
	return v;
}

std::optional<bool> to_bool(std::string s) {
	std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
	if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
	if (s == "false" || s == "0" || s == "no" || s == "off") return false;
	return std::nullopt;
}

struct Field {
	const char* key;
	std::function<bool(TrainConfig&, const std::string&)> set;
	std::function<std::string(const TrainConfig&)> get;
};

#define FOGDET_DOUBLE(KEY, EXPR)                                                                        \
	Field {                                                                                             \
		KEY, [](TrainConfig& c, const std::string& s) { auto v = to_double(s); if (v) EXPR = *v; return v.has_value(); }, \
		    [](const TrainConfig& c) { return fmt_double(EXPR); }                                         \
	}
#define FOGDET_INT(KEY, EXPR, TYPE)                                                                     \
	Field {                                                                                             \
		KEY, [](TrainConfig& c, const std::string& s) { auto v = to_int<TYPE>(s); if (v) EXPR = *v; return v.has_value(); }, \
		    [](const TrainConfig& c) { return std::to_string(EXPR); }                                     \
	}
#define FOGDET_BOOL(KEY, EXPR)                                                                          \
	Field {                                                                                             \
		KEY, [](TrainConfig& c, const std::string& s) { auto v = to_bool(s); if (v) EXPR = *v; return v.has_value(); }, \
		    [](const TrainConfig& c) { return std::string((EXPR) ? "true" : "false"); }                   \
	}

const std::vector<Field>& fields() {
	static const std::vector<Field> f{
	    FOGDET_INT("train.epochs", c.epochs, int),
	    FOGDET_INT("train.batch_size", c.batch_size, int),
	    FOGDET_DOUBLE("train.base_lr", c.base_lr),
	    FOGDET_DOUBLE("train.lr_floor", c.lr_floor),
	    FOGDET_DOUBLE("train.momentum", c.momentum),
	    FOGDET_DOUBLE("train.weight_decay", c.weight_decay),
	    FOGDET_INT("train.seed", c.seed, std::uint64_t),
	    FOGDET_BOOL("train.deterministic", c.deterministic),
	    FOGDET_INT("train.log_every", c.log_every, int),
	    FOGDET_DOUBLE("loss.lambda_detection", c.weights.detection),
	    FOGDET_DOUBLE("loss.lambda_restoration", c.weights.restoration),
	    FOGDET_DOUBLE("loss.focal_alpha", c.focal_alpha),
	    FOGDET_DOUBLE("loss.focal_gamma", c.focal_gamma),
	    FOGDET_INT("model.num_classes", c.model.num_classes, int),
	    FOGDET_DOUBLE("model.width", c.model.width),
	    FOGDET_DOUBLE("model.depth", c.model.depth),
	    FOGDET_INT("model.image_size", c.model.image_size, int),
	    FOGDET_INT("model.attention_heads", c.model.attention_heads, int),
	    FOGDET_INT("model.mlp_ratio", c.model.mlp_ratio, int),
	    FOGDET_BOOL("model.spp", c.model.use_spp),
	    FOGDET_DOUBLE("data.beta_min", c.beta_range.first),
	    FOGDET_DOUBLE("data.beta_max", c.beta_range.second),
	    FOGDET_DOUBLE("data.airlight", c.airlight),
	    FOGDET_BOOL("variant.restoration", c.flags.restoration),
	    FOGDET_BOOL("variant.dtfe", c.flags.dtfe),
	    FOGDET_BOOL("variant.focal", c.flags.focal),
	    FOGDET_BOOL("variant.scconv", c.flags.scconv),
	};
	return f;
}

#undef FOGDET_DOUBLE
#undef FOGDET_INT
#undef FOGDET_BOOL

// Returns an error string, empty on success.
std::string set_field(TrainConfig& cfg, const std::string& key, const std::string& value) {
	if (key == "variant.name") {
		try {
			cfg.flags = variant_flags(parse_variant(value));
			return {};
		} catch (const ConfigError& e) {
			return std::string("variant.name: ") + e.what();
		}
	}
	for (const Field& f : fields()) {
		if (key == f.key) {
			return f.set(cfg, value) ? std::string{} : key + ": cannot parse '" + value + "'";
		}
	}
	return key + ": unknown key";
}

} // namespace

TrainConfig parse_config(const std::string& ini_text) {
	namespace pt = boost::property_tree;
	pt::ptree tree;
	std::istringstream in(ini_text);
	try {
		pt::read_ini(in, tree);
	} catch (const pt::ini_parser_error& e) {
		throw ParseError("config: " + e.message(), e.line());
	}
	TrainConfig cfg;
	std::vector<std::string> errors;
	std::vector<std::pair<std::string, std::string>> entries;
	for (const auto& [section, body] : tree) {
		if (body.empty()) {
			errors.push_back(section + ": keys must live inside a [section]");
			continue;
		}
		for (const auto& [key, value] : body) {
			entries.emplace_back(section + "." + key, value.data());
		}
	}
	// variant.name first so individual flags can refine it
	std::stable_partition(entries.begin(), entries.end(), [](const auto& e) { return e.first == "variant.name"; });
	for (const auto& [k, v] : entries) {
		if (auto err = set_field(cfg, k, v); !err.empty()) errors.push_back(err);
	}
	if (!errors.empty()) {
		std::string msg = "invalid training config:";
		for (const auto& e : errors) msg += "\n  " + e;
		throw ConfigError(msg);
	}
	cfg.validate();
	return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
	std::ifstream in(path);
	if (!in) throw ConfigError("cannot read config file " + path.string());
	std::stringstream ss;
	ss << in.rdbuf();
	return parse_config(ss.str());
}

void apply_override(TrainConfig& cfg, const std::string& dotted_key, const std::string& value) {
	if (auto err = set_field(cfg, dotted_key, value); !err.empty()) {
		throw ConfigError("invalid override " + err);
	}
}

std::string to_ini(const TrainConfig& cfg) {
	std::ostringstream out;
	std::string section;
	for (const Field& f : fields()) {
		const std::string key = f.key;
		const auto dot = key.find('.');
		const std::string sec = key.substr(0, dot);
		if (sec != section) {
			if (!section.empty()) out << '\n';
			out << '[' << sec << "]\n";
			section = sec;
		}
		out << key.substr(dot + 1) << " = " << f.get(cfg) << '\n';
	}
	return out.str();
}

nlohmann::json to_json(const TrainConfig& cfg) {
	nlohmann::json j = nlohmann::json::object();
	for (const Field& f : fields()) j[f.key] = f.get(cfg);
	return j;
}

// ---- model ----------------------------------------------------------------------------

JointModel::JointModel(const ModelConfig& cfg, bool with_restoration, std::uint64_t seed) {
	Rng rng(seed);
	// Detector first: its initialisation does not depend on whether a decoder follows.
	detector_ = std::make_unique<detection::Detector>(cfg, rng);
	if (with_restoration) {
		decoder_ = std::make_unique<restoration::RestorationDecoder>(detector_->backbone().stage_channels(), rng);
	}
}

std::vector<nn::NamedParameter> JointModel::named_parameters() const {
	auto out = detector_->named_parameters();
	if (decoder_) {
		auto dec = decoder_->named_parameters("restoration.");
		out.insert(out.end(), dec.begin(), dec.end());
	}
	return out;
}

std::map<std::string, std::string> metadata_from_model_config(const ModelConfig& cfg) {
	return {{"model.num_classes", std::to_string(cfg.num_classes)},
	        {"model.width", fmt_double(cfg.width)},
	        {"model.depth", fmt_double(cfg.depth)},
	        {"model.image_size", std::to_string(cfg.image_size)},
	        {"model.dtfe", cfg.use_dtfe ? "1" : "0"},
	        {"model.scconv", cfg.use_scconv ? "1" : "0"},
	        {"model.spp", cfg.use_spp ? "1" : "0"},
	        {"model.attention_heads", std::to_string(cfg.attention_heads)},
	        {"model.mlp_ratio", std::to_string(cfg.mlp_ratio)}};
}

ModelConfig model_config_from_metadata(const std::map<std::string, std::string>& meta) {
	ModelConfig cfg;
	std::vector<std::string> bad;
	auto need = [&](const std::string& k) -> std::string {
		auto it = meta.find(k);
		if (it == meta.end()) {
			bad.push_back("missing " + k);
			return {};
		}
		return it->second;
	};
	auto as_int = [&](const std::string& k, int& dst) {
		const std::string v = need(k);
		if (v.empty()) return;
		if (auto x = to_int<int>(v)) dst = *x; else bad.push_back(k + " is not an integer");
	};
	auto as_double = [&](const std::string& k, double& dst) {
		const std::string v = need(k);
		if (v.empty()) return;
		if (auto x = to_double(v)) dst = *x; else bad.push_back(k + " is not a number");
	};
	auto as_bool = [&](const std::string& k, bool& dst) {
		const std::string v = need(k);
		if (v.empty()) return;
		if (auto x = to_bool(v)) dst = *x; else bad.push_back(k + " is not a boolean");
	};
	as_int("model.num_classes", cfg.num_classes);
	as_double("model.width", cfg.width);
	as_double("model.depth", cfg.depth);
	as_int("model.image_size", cfg.image_size);
	as_bool("model.dtfe", cfg.use_dtfe);
	as_bool("model.scconv", cfg.use_scconv);
	as_bool("model.spp", cfg.use_spp);
	as_int("model.attention_heads", cfg.attention_heads);
	as_int("model.mlp_ratio", cfg.mlp_ratio);
	if (!bad.empty()) {
		std::string msg = "checkpoint metadata incomplete:";
		for (const auto& b : bad) msg += "\n  " + b;
		throw ConfigError(msg);
	}
	return cfg;
}

Checkpoint JointModel::to_checkpoint(const std::map<std::string, std::string>& metadata) const {
	Checkpoint ckpt;
	ckpt.metadata = metadata_from_model_config(detector_->config());
	for (const auto& [k, v] : metadata) ckpt.metadata[k] = v;
	capture(ckpt, *detector_);
	if (decoder_) capture(ckpt, *decoder_, "restoration.");
	return ckpt;
}

void JointModel::load(const Checkpoint& ckpt) {
	restore(ckpt, *detector_, "", true);
	if (decoder_) restore(ckpt, *decoder_, "restoration.", false);
}

std::unique_ptr<detection::Detector> load_detector(const Checkpoint& ckpt) {
	const ModelConfig cfg = model_config_from_metadata(ckpt.metadata);
	Rng rng(0);
	auto det = std::make_unique<detection::Detector>(cfg, rng);
	restore(ckpt, *det, "", true);
	return det;
}

// ---- objective and optimiser -------------------------------------------------------------

Tensor total_loss(detection::LossBreakdown& det, const Tensor& restoration, const LossWeights& weights) {
	Tensor total = ops::scale(det.detection_total, weights.detection);
	if (restoration.defined()) {
		det.restoration = restoration;
		if (weights.restoration != 0.0) {
			total = ops::add(total, ops::scale(restoration, weights.restoration));
		}
	}
	det.grand_total = total;
	return total;
}

double lr_schedule(long step, long total_steps, double base_lr, double floor) {
	if (total_steps <= 0) return base_lr;
	const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
	return std::max(floor, base_lr * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0);
}

Sgd::Sgd(std::vector<nn::NamedParameter> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
	for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
}

void Sgd::zero_grad() {
	for (auto& p : params_) p.tensor.zero_grad();
}

void Sgd::step(double lr) {
	for (std::size_t i = 0; i < params_.size(); ++i) {
		Tensor w = params_[i].tensor;
		if (!w.has_grad()) continue;
		const auto g = std::as_const(w).grad();
		auto data = w.data();
		auto& v = velocity_[i];
		const double wd = params_[i].decay ? weight_decay_ : 0.0;
		for (std::size_t j = 0; j < data.size(); ++j) {
			v[j] = momentum_ * v[j] + g[j] + wd * data[j];
			data[j] -= lr * v[j];
		}
	}
}

Trainer::Trainer(const TrainConfig& cfg, JointModel& model)
    : cfg_(cfg), model_(model), sgd_(model.named_parameters(), cfg.momentum, cfg.weight_decay) {
	if (cfg.flags.restoration && !model.decoder()) {
		throw ConfigError("restoration is switched on but the model has no decoder");
	}
}

namespace {
LossValues values_of(const detection::LossBreakdown& b) {
	return {b.value(b.iou), b.value(b.cls), b.value(b.focal), b.value(b.restoration), b.value(b.detection_total),
	        b.value(b.grand_total), b.num_positive};
}
} // namespace

LossValues Trainer::compute_gradients(const datakit::Batch& batch) {
	sgd_.zero_grad();
	const int h = batch.foggy.dim(2), w = batch.foggy.dim(3);
	auto out = model_.detector().forward(batch.foggy);
	const auto targets = detection::assign_targets(batch.annotations, h, w);
	const detection::LossOptions opts{cfg_.flags.focal, cfg_.focal_alpha, cfg_.focal_gamma, detection::kIouWeight};
	auto breakdown = detection::detection_loss(out.heads, targets, opts);
	Tensor re;
	if (cfg_.flags.restoration) {
		const auto restored = model_.decoder()->forward(out.pyramid, h, w);
		re = restoration::restoration_loss(restored, batch.clean);
	}
	Tensor total = total_loss(breakdown, re, cfg_.weights);
	const LossValues v = values_of(breakdown);
	if (!std::isfinite(v.grand_total) || !std::isfinite(v.detection_total) || !std::isfinite(v.restoration)) {
		std::string ids;
		for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
		throw NonFiniteLoss("non-finite loss in batch [" + ids + "]: " + format_metrics_line(-1, -1, 0.0, v), batch.ids);
	}
	total.backward();
	return v;
}

LossValues Trainer::train_step(const datakit::Batch& batch, double lr) {
	const LossValues v = compute_gradients(batch);
	sgd_.step(lr);
	return v;
}

std::string format_metrics_line(long step, int epoch, double lr, const LossValues& v) {
	char buf[320];
	std::snprintf(buf, sizeof buf,
	              "step=%ld epoch=%d lr=%.6g iou=%.6f cls=%.6f focal=%.6f restoration=%.6f detection=%.6f total=%.6f pos=%d",
	              step, epoch, lr, v.iou, v.cls, v.focal, v.restoration, v.detection_total, v.grand_total, v.num_positive);
	return buf;
}

TrainResult fit(const TrainConfig& cfg, JointModel& model, const std::vector<datakit::PairedSample>& train,
                std::ostream* metrics, const std::function<void(const EpochCallbackInfo&)>& on_epoch) {
	cfg.validate();
	if (cfg.deterministic) ops::set_blas_threads(1);
	Trainer trainer(cfg, model);
	TrainResult result;
	if (train.empty()) return result;
	const long per_epoch = static_cast<long>((train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
	                                         static_cast<std::size_t>(cfg.batch_size));
	const long total = per_epoch * cfg.epochs;
	Rng order_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
	long step = 0;
	for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
		datakit::BatchIterator it(train, cfg.batch_size, cfg.model.image_size, order_rng, true);
		LossValues sum;
		int n = 0;
		while (auto batch = it.next()) {
			const double lr = lr_schedule(step, total, cfg.base_lr, cfg.lr_floor);
			const LossValues v = trainer.train_step(*batch, lr);
			result.trajectory.push_back(v);
			if (metrics && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total)) {
				*metrics << format_metrics_line(step, epoch, lr, v) << '\n';
				metrics->flush();
			}
			sum.iou += v.iou;
			sum.cls += v.cls;
			sum.focal += v.focal;
			sum.restoration += v.restoration;
			sum.detection_total += v.detection_total;
			sum.grand_total += v.grand_total;
			sum.num_positive += v.num_positive;
			++n;
			++step;
		}
		if (on_epoch && n > 0) {
			LossValues mean{sum.iou / n,         sum.cls / n,         sum.focal / n, sum.restoration / n,
			                sum.detection_total / n, sum.grand_total / n, sum.num_positive / n};
			on_epoch({epoch, step, mean});
		}
	}
	result.steps = step;
	return result;
}

Evaluation evaluate(const detection::Detector& det, const std::vector<datakit::PairedSample>& samples, int image_size,
                    int batch_size, double conf, double nms_iou) {
	NoGradGuard no_grad;
	Evaluation ev;
	std::map<std::string, std::vector<datakit::BBox>> gts;
	Rng unused(0);
	datakit::BatchIterator it(samples, batch_size, image_size, unused, false);
	while (auto batch = it.next()) {
		const auto out = det.forward(batch->foggy);
		const auto dets = detection::postprocess(out.heads, conf, nms_iou, image_size, image_size);
		for (std::size_t i = 0; i < batch->ids.size(); ++i) {
			ev.detections[batch->ids[i]] = dets[i];
			gts[batch->ids[i]] = batch->annotations[i].boxes;
		}
	}
	ev.result = evalkit::mean_ap(ev.detections, gts, det.config().num_classes);
	return ev;
}

// ---- grids ------------------------------------------------------------------------------

std::vector<std::pair<std::string, double>> GridReport::means() const {
	std::vector<std::pair<std::string, double>> out;
	std::vector<int> counts;
	for (const RunRow& r : rows) {
		auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.label; });
		if (it == out.end()) {
			out.emplace_back(r.label, r.map);
			counts.push_back(1);
		} else {
			it->second += r.map;
			++counts[static_cast<std::size_t>(it - out.begin())];
		}
	}
	for (std::size_t i = 0; i < out.size(); ++i) out[i].second /= counts[i];
	return out;
}

nlohmann::json GridReport::to_json() const {
	nlohmann::json j;
	j["runs"] = nlohmann::json::array();
	for (const RunRow& r : rows) {
		j["runs"].push_back({{"label", r.label},
		                     {"seed", r.seed},
		                     {"map", r.map},
		                     {"final_total_loss", r.final_loss.grand_total},
		                     {"seconds", r.seconds}});
	}
	j["mean_map"] = nlohmann::json::object();
	for (const auto& [label, m] : means()) j["mean_map"][label] = m;
	return j;
}

std::string GridReport::format() const {
	std::ostringstream out;
	char buf[160];
	std::snprintf(buf, sizeof buf, "%-10s %6s %10s %12s %9s\n", "run", "seed", "mAP@0.5", "final_loss", "seconds");
	out << buf;
	for (const RunRow& r : rows) {
		std::snprintf(buf, sizeof buf, "%-10s %6llu %10.4f %12.5f %9.1f\n", r.label.c_str(),
		              static_cast<unsigned long long>(r.seed), r.map, r.final_loss.grand_total, r.seconds);
		out << buf;
	}
	out << "mean mAP@0.5:";
	for (const auto& [label, m] : means()) {
		std::snprintf(buf, sizeof buf, " %s=%.4f", label.c_str(), m);
		out << buf;
	}
	out << '\n';
	return out.str();
}

namespace {

RunRow train_and_score(const std::string& label, const TrainConfig& cfg, const std::vector<datakit::PairedSample>& train,
                       const std::vector<datakit::PairedSample>& test) {
	const auto t0 = std::chrono::steady_clock::now();
	JointModel model(cfg.model_config(), cfg.flags.restoration, cfg.seed);
	const TrainResult tr = fit(cfg, model, train);
	const Evaluation ev = evaluate(model.detector(), test, cfg.model.image_size, cfg.batch_size);
	RunRow row;
	row.label = label;
	row.seed = cfg.seed;
	row.map = ev.result.map_score;
	if (!tr.trajectory.empty()) row.final_loss = tr.trajectory.back();
	row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
	return row;
}

} // namespace

GridReport run_ablation(const std::vector<Variant>& variants, const std::vector<std::uint64_t>& seeds,
                        const TrainConfig& base, const std::vector<datakit::PairedSample>& train,
                        const std::vector<datakit::PairedSample>& test, const RunHook& hook) {
	GridReport report;
	for (Variant v : variants) {
		for (std::uint64_t seed : seeds) {
			TrainConfig cfg = base;
			cfg.flags = variant_flags(v);
			cfg.seed = seed;
			report.rows.push_back(train_and_score(variant_name(v), cfg, train, test));
			if (hook) hook(report.rows.back());
		}
	}
	return report;
}

GridReport run_weight_sweep(const std::vector<LossWeights>& grid, const std::vector<std::uint64_t>& seeds,
                            const TrainConfig& base, const std::vector<datakit::PairedSample>& train,
                            const std::vector<datakit::PairedSample>& test, const RunHook& hook) {
	GridReport report;
	for (const LossWeights& w : grid) {
		for (std::uint64_t seed : seeds) {
			TrainConfig cfg = base;
			cfg.flags = variant_flags(Variant::V4);
			cfg.weights = w;
			cfg.seed = seed;
			report.rows.push_back(train_and_score(weight_label(w), cfg, train, test));
			if (hook) hook(report.rows.back());
		}
	}
	return report;
}

} // namespace fogdet::training
