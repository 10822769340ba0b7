#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "fogdet/checkpoint.hpp"
#include "fogdet/datakit.hpp"
#include "fogdet/evalkit.hpp"
#include "fogdet/training.hpp"
#include "fogdet/weathersim.hpp"

namespace fogdet::cli {

using nlohmann::json;

// ---- manifest and hashing -------------------------------------------------------------

json RunManifest::to_json() const {
	return {{"command", command},   {"argv", argv},           {"config", config},
	        {"seed", seed},         {"artifacts", artifacts}, {"input_hash", input_hash},
	        {"output_hash", output_hash}};
}

RunManifest RunManifest::from_json(const json& j) {
	RunManifest m;
	try {
		m.command = j.at("command").get<std::string>();
		m.argv = j.at("argv").get<std::vector<std::string>>();
		m.config = j.value("config", json::object());
		m.seed = j.value("seed", std::uint64_t{0});
		m.artifacts = j.value("artifacts", std::vector<std::string>{});
		m.input_hash = j.value("input_hash", std::string{});
		m.output_hash = j.value("output_hash", std::string{});
	} catch (const json::exception& e) {
		throw ConfigError(std::string("manifest: ") + e.what());
	}
	return m;
}

namespace {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv(std::uint64_t& h, const char* p, std::size_t n) {
	for (std::size_t i = 0; i < n; ++i) {
		h ^= static_cast<unsigned char>(p[i]);
		h *= kFnvPrime;
	}
}

std::string hex(std::uint64_t h) {
	char buf[17];
	std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
	return buf;
}

std::string slurp(const fs::path& p) {
	std::ifstream in(p, std::ios::binary);
	if (!in) throw ConfigError("cannot read " + p.string());
	std::ostringstream ss;
	ss << in.rdbuf();
	return ss.str();
}

} // namespace

std::string content_hash(const fs::path& root, std::vector<std::string> relative_files, const std::string& extra) {
	std::sort(relative_files.begin(), relative_files.end());
	std::uint64_t h = kFnvOffset;
	for (const auto& rel : relative_files) {
		fnv(h, rel.data(), rel.size() + 1); // includes the terminating NUL as a separator
		const std::string body = slurp(root / rel);
		fnv(h, body.data(), body.size());
	}
	fnv(h, extra.data(), extra.size());
	return hex(h);
}

std::vector<std::string> list_files(const fs::path& root) {
	std::vector<std::string> out;
	if (!fs::is_directory(root)) return out;
	for (const auto& e : fs::recursive_directory_iterator(root)) {
		if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
		out.push_back(fs::relative(e.path(), root).generic_string());
	}
	std::sort(out.begin(), out.end());
	return out;
}

void write_manifest(const fs::path& path, const RunManifest& m) {
	if (path.has_parent_path()) fs::create_directories(path.parent_path());
	std::ofstream out(path);
	out << m.to_json().dump(2) << '\n';
	if (!out) throw std::runtime_error("cannot write manifest " + path.string());
}

RunManifest read_manifest(const fs::path& path) {
	const std::string text = slurp(path);
	try {
		return RunManifest::from_json(json::parse(text));
	} catch (const json::parse_error& e) {
		throw ParseError("manifest " + path.string() + ": " + e.what(), 0);
	}
}

// ---- shared helpers ---------------------------------------------------------------------

namespace {

// Line-delimited records to report.jsonl (and stdout in --jsonl mode), prose otherwise.
class Reporter {
public:
	Reporter(const Context& ctx, const fs::path& file) : ctx_(ctx), null_(nullptr) {
		if (file.has_parent_path()) fs::create_directories(file.parent_path());
		file_.open(file);
		if (!file_) throw std::runtime_error("cannot write " + file.string());
	}
	void record(const json& j) {
		const std::string line = j.dump();
		file_ << line << '\n';
		if (ctx_.jsonl) ctx_.out << line << '\n';
	}
	std::ostream& text() { return ctx_.jsonl ? null_ : ctx_.out; }

private:
	const Context& ctx_;
	std::ofstream file_;
	std::ostream null_;
};

void finish(const Context& ctx, const std::string& command, const fs::path& manifest_path, const fs::path& out_root,
            json config, std::uint64_t seed, std::vector<std::string> artifacts, std::string input_hash) {
	RunManifest m;
	m.command = command;
	m.argv = ctx.argv;
	m.config = std::move(config);
	m.seed = seed;
	std::sort(artifacts.begin(), artifacts.end());
	m.artifacts = artifacts;
	m.input_hash = std::move(input_hash);
	// wall-clock timings live in report.jsonl, so it stays out of the output hash
	std::vector<std::string> hashed;
	for (const auto& a : artifacts)
		if (fs::path(a).filename() != "report.jsonl") hashed.push_back(a);
	m.output_hash = content_hash(out_root, hashed);
	write_manifest(manifest_path, m);
}

training::TrainConfig resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
	training::TrainConfig cfg = file.empty() ? training::TrainConfig{} : training::load_config(file);
	std::vector<std::string> bad;
	for (const auto& o : overrides) {
		const auto eq = o.find('=');
		if (eq == std::string::npos) {
			bad.push_back(o + ": expected section.key=value");
			continue;
		}
		try {
			training::apply_override(cfg, o.substr(0, eq), o.substr(eq + 1));
		} catch (const ConfigError& e) {
			bad.push_back(e.what());
		}
	}
	if (!bad.empty()) {
		std::string msg = "invalid overrides:";
		for (const auto& b : bad) msg += "\n  " + b;
		throw ConfigError(msg);
	}
	return cfg;
}

datakit::ClassList classes_of(const Checkpoint& ckpt, int num_classes) {
	datakit::ClassList out;
	if (auto it = ckpt.metadata.find("classes"); it != ckpt.metadata.end()) {
		std::stringstream ss(it->second);
		std::string c;
		while (std::getline(ss, c, ',')) out.push_back(c);
	}
	if (static_cast<int>(out.size()) != num_classes) {
		out.clear();
		for (int i = 0; i < num_classes; ++i) out.push_back("class" + std::to_string(i));
	}
	return out;
}

std::string join(const datakit::ClassList& classes) {
	std::string s;
	for (const auto& c : classes) s += (s.empty() ? "" : ",") + c;
	return s;
}

void check_range(std::pair<double, double> r, const std::string& what, std::vector<std::string>& bad) {
	if (!(r.first >= 0 && r.first <= r.second)) bad.push_back(what + " must satisfy 0 <= lo <= hi");
}

void throw_if(const std::vector<std::string>& bad, const std::string& head) {
	if (bad.empty()) return;
	std::string msg = head;
	for (const auto& b : bad) msg += "\n  " + b;
	throw ConfigError(msg);
}

bool is_image(const fs::path& p) {
	std::string ext = p.extension().string();
	std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
	return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<datakit::PairedSample> load_pairs(const fs::path& root, const std::string& split, const datakit::ClassList& classes) {
	return datakit::to_pairs(datakit::load_split(root, split, classes));
}

Rgb class_color(int c) {
	const double h = std::fmod(0.12 + 0.618034 * c, 1.0) * 6.0;
	const double s = 0.85, v = 0.95;
	const int i = static_cast<int>(h);
	const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
	switch (i % 6) {
	case 0: return {v, t, p};
	case 1: return {q, v, p};
	case 2: return {p, v, t};
	case 3: return {p, q, v};
	case 4: return {t, p, v};
	default: return {v, p, q};
	}
}

std::string fmt(const char* f, double v) {
	char buf[64];
	std::snprintf(buf, sizeof buf, f, v);
	return buf;
}

} // namespace

std::map<std::string, std::vector<detection::Detection>> detect_images(
    const detection::Detector& det, const std::vector<std::pair<std::string, const ImageTensor*>>& images, int batch,
    double conf, double nms) {
	NoGradGuard no_grad;
	const int size = det.config().image_size;
	std::map<std::string, std::vector<detection::Detection>> out;
	for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(std::max(batch, 1))) {
		const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(std::max(batch, 1)));
		std::vector<datakit::Letterbox> boxes;
		for (std::size_t i = start; i < end; ++i) boxes.push_back(datakit::letterbox(*images[i].second, size));
		std::vector<const ImageTensor*> ptrs;
		for (const auto& lb : boxes) ptrs.push_back(&lb.image);
		const auto fwd = det.forward(stack_images(ptrs));
		const auto dets = detection::postprocess(fwd.heads, conf, nms, size, size);
		for (std::size_t i = start; i < end; ++i) {
			const auto& lb = boxes[i - start];
			const ImageTensor& img = *images[i].second;
			auto& dst = out[images[i].first];
			for (const auto& d : dets[i - start]) {
				datakit::BBox b{(d.box.x_min - lb.pad_x) / lb.scale, (d.box.y_min - lb.pad_y) / lb.scale,
				                (d.box.x_max - lb.pad_x) / lb.scale, (d.box.y_max - lb.pad_y) / lb.scale, d.box.class_id};
				if (auto c = datakit::clip_box(b, img.width, img.height)) dst.push_back({*c, d.score});
			}
		}
	}
	return out;
}

ImageTensor draw_detections(const ImageTensor& image, const std::vector<detection::Detection>& dets,
                            const datakit::ClassList& classes) {
	ImageTensor canvas = image;
	for (const auto& d : dets) {
		const Rgb color = class_color(d.class_id());
		const int x0 = static_cast<int>(std::floor(d.box.x_min)), y0 = static_cast<int>(std::floor(d.box.y_min));
		const int x1 = static_cast<int>(std::ceil(d.box.x_max)) - 1, y1 = static_cast<int>(std::ceil(d.box.y_max)) - 1;
		draw_rect_outline(canvas, x0, y0, x1, y1, color, 2);
		const std::string name = d.class_id() < static_cast<int>(classes.size())
		                             ? classes[static_cast<std::size_t>(d.class_id())]
		                             : std::to_string(d.class_id());
		const std::string label = name + " " + fmt("%.2f", d.score);
		const int tw = 4 * static_cast<int>(label.size()) + 1;
		// label sits above the box, or inside it at the top edge
		const int ty = y0 >= 7 ? y0 - 7 : y0;
		fill_rect(canvas, x0, ty, x0 + tw, ty + 7, color);
		draw_text(canvas, x0 + 1, ty + 1, label, {1.0, 1.0, 1.0});
	}
	return canvas;
}

BenchStats bench_stats(std::vector<double> latencies) {
	BenchStats s;
	s.latencies = std::move(latencies);
	if (s.latencies.empty()) return s;
	s.mean = std::accumulate(s.latencies.begin(), s.latencies.end(), 0.0) / static_cast<double>(s.latencies.size());
	s.fps = s.mean > 0 ? 1.0 / s.mean : 0.0;
	return s;
}

// ---- make-dataset ------------------------------------------------------------------------

int cmd_make_dataset(const MakeDatasetOptions& o, const Context& ctx) {
	std::vector<std::string> bad;
	if (o.out.empty()) bad.push_back("--out is required");
	if (o.train < 0) bad.push_back("--train must be >= 0");
	if (o.test < 0) bad.push_back("--test must be >= 0");
	if (o.size < 64) bad.push_back("--size must be >= 64");
	if (!(o.airlight >= 0 && o.airlight <= 1)) bad.push_back("--airlight must lie in [0, 1]");
	check_range(o.beta_train, "--beta-train", bad);
	check_range(o.beta_test, "--beta-test", bad);
	throw_if(bad, "make-dataset:");

	Rng rng(o.seed);
	datakit::SceneConfig sc;
	sc.width = sc.height = o.size;
	auto samples = datakit::synthesize_toy_pairs(rng, sc, o.train, o.beta_train, o.airlight, "train");
	auto test = datakit::synthesize_toy_pairs(rng, sc, o.test, o.beta_test, o.airlight, "test");
	std::vector<std::string> splits(samples.size(), "train");
	splits.resize(samples.size() + test.size(), "test");
	samples.insert(samples.end(), std::make_move_iterator(test.begin()), std::make_move_iterator(test.end()));

	const fs::path root = o.out;
	const auto files = datakit::write_paired_dataset(root, samples, splits, datakit::toy_classes());

	Reporter rep(ctx, root / "report.jsonl");
	const json cfg = {{"train", o.train},           {"test", o.test},           {"size", o.size},
	                  {"airlight", o.airlight},     {"beta_train", o.beta_train}, {"beta_test", o.beta_test}};
	rep.record({{"type", "dataset"}, {"root", root.string()}, {"train", o.train}, {"test", o.test}, {"seed", o.seed}});
	rep.text() << "wrote " << o.train << " train + " << o.test << " test samples to " << root.string() << '\n';
	std::vector<std::string> artifacts = files;
	artifacts.push_back("report.jsonl");
	finish(ctx, "make-dataset", root / "manifest.json", root, cfg, o.seed, artifacts,
	       content_hash(root, {}, cfg.dump() + std::to_string(o.seed)));
	return kOk;
}

// ---- synth-fog ----------------------------------------------------------------------------

int cmd_synth_fog(const SynthFogOptions& o, const Context& ctx) {
	std::vector<std::string> bad;
	if (o.input.empty()) bad.push_back("--input is required");
	if (o.out.empty()) bad.push_back("--out is required");
	if (!(o.airlight >= 0 && o.airlight <= 1)) bad.push_back("--airlight must lie in [0, 1]");
	if (o.beta < 0) check_range(o.beta_range, "--beta-range", bad);
	if (o.classes != "toy" && o.classes != "road") bad.push_back("--classes must be toy or road");
	throw_if(bad, "synth-fog:");
	const fs::path in = o.input;
	if (!fs::is_directory(in)) throw ConfigError("synth-fog: input directory not found: " + in.string());

	datakit::ClassList classes = o.classes == "road" ? datakit::road_classes() : datakit::toy_classes();
	if (fs::exists(in / "classes.txt")) classes = datakit::read_class_list(in);

	// gather (id, split, image path, annotation path)
	struct Item {
		std::string id, split;
		fs::path image, xml;
	};
	std::vector<Item> items;
	std::vector<std::string> errors;
	if (fs::exists(in / "index.txt")) {
		for (const auto& e : datakit::read_index(in)) {
			Item it{e.image_id, e.split, {}, in / "annotations" / (e.image_id + ".xml")};
			for (const char* ext : {".png", ".jpg", ".jpeg"})
				if (fs::exists(in / "images" / (e.image_id + ext))) it.image = in / "images" / (e.image_id + ext);
			if (it.image.empty()) errors.push_back((in / "images" / e.image_id).string() + ".*: no such image");
			items.push_back(std::move(it));
		}
	} else {
		for (const auto& e : fs::directory_iterator(in))
			if (e.is_regular_file() && is_image(e.path())) items.push_back({e.path().stem().string(), "all", e.path(), {}});
		std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.id < b.id; });
	}
	if (items.empty() && errors.empty()) throw ConfigError("synth-fog: no images found in " + in.string());

	// read everything first so a bad file stops the run before anything is written
	std::vector<ImageTensor> images(items.size());
	std::vector<datakit::Annotation> anns(items.size());
	for (std::size_t i = 0; i < items.size(); ++i) {
		if (items[i].image.empty()) continue;
		try {
			images[i] = read_image(items[i].image);
		} catch (const std::exception& e) {
			errors.push_back(items[i].image.string() + ": " + e.what());
			continue;
		}
		anns[i] = {items[i].id, images[i].width, images[i].height, {}};
		if (!items[i].xml.empty() && fs::exists(items[i].xml)) {
			try {
				anns[i] = datakit::parse_voc_annotation(slurp(items[i].xml), classes).annotation;
				anns[i].image_id = items[i].id;
			} catch (const std::exception& e) {
				errors.push_back(items[i].xml.string() + ": " + e.what());
			}
		}
	}
	if (!errors.empty()) {
		ctx.err << "synth-fog: " << errors.size() << " input file(s) could not be read:\n";
		for (const auto& e : errors) ctx.err << "  " << e << '\n';
		return kRuntimeError;
	}

	Rng rng(o.seed);
	std::vector<datakit::PairedSample> samples;
	std::vector<std::string> splits;
	for (std::size_t i = 0; i < items.size(); ++i) {
		const double beta = o.beta >= 0 ? o.beta : weathersim::sample_beta(o.beta_range, rng);
		datakit::PairedSample s = datakit::make_paired_sample(images[i], anns[i], {o.airlight, beta});
		s.id = items[i].id;
		s.foggy = quantize8(s.foggy);
		samples.push_back(std::move(s));
		splits.push_back(items[i].split);
	}
	const fs::path root = o.out;
	const auto files = datakit::write_paired_dataset(root, samples, splits, classes);

	Reporter rep(ctx, root / "report.jsonl");
	for (const auto& s : samples) rep.record({{"type", "fog"}, {"id", s.id}, {"airlight", s.fog.airlight}, {"beta", s.fog.beta}});
	rep.text() << "fogged " << samples.size() << " image(s) into " << root.string() << '\n';
	std::vector<std::string> inputs;
	for (const auto& it : items) {
		inputs.push_back(fs::relative(it.image, in).generic_string());
		if (!it.xml.empty() && fs::exists(it.xml)) inputs.push_back(fs::relative(it.xml, in).generic_string());
	}
	const json cfg = {{"airlight", o.airlight}, {"beta", o.beta}, {"beta_range", o.beta_range}, {"classes", classes}};
	finish(ctx, "synth-fog", root / "manifest.json", root, cfg, o.seed, files, content_hash(in, inputs, cfg.dump()));
	return kOk;
}

// ---- train --------------------------------------------------------------------------------

int cmd_train(const TrainOptions& o, const Context& ctx) {
	std::vector<std::string> overrides = o.overrides;
	if (!o.variant.empty()) overrides.push_back("variant.name=" + o.variant);
	training::TrainConfig cfg = resolve_config(o.config, overrides);
	std::vector<std::string> bad;
	if (o.data.empty() || o.out.empty()) bad.push_back("--data and --out are required");
	if (o.checkpoint_every < 0) bad.push_back("--checkpoint-every must be >= 0");
	throw_if(bad, "train:");
	const fs::path data = o.data, out = o.out;
	const datakit::ClassList classes = datakit::read_class_list(data);
	cfg.model.num_classes = static_cast<int>(classes.size());
	cfg.validate();
	const auto train = load_pairs(data, "train", classes);
	if (train.empty()) throw ConfigError("train: split 'train' of " + data.string() + " is empty");
	const auto test = load_pairs(data, "test", classes);

	fs::create_directories(out);
	std::vector<std::string> artifacts{"config.ini", "metrics.log", "report.jsonl", "model.ckpt"};
	{
		std::ofstream ini(out / "config.ini");
		ini << training::to_ini(cfg);
	}
	std::ofstream metrics(out / "metrics.log");
	Reporter rep(ctx, out / "report.jsonl");

	training::JointModel model(cfg.model_config(), cfg.flags.restoration, cfg.seed);
	const std::map<std::string, std::string> meta{{"classes", join(classes)},
	                                              {"train.variant.restoration", cfg.flags.restoration ? "1" : "0"},
	                                              {"train.variant.focal", cfg.flags.focal ? "1" : "0"},
	                                              {"train.seed", std::to_string(cfg.seed)}};
	const auto t0 = std::chrono::steady_clock::now();
	training::fit(cfg, model, train, &metrics, [&](const training::EpochCallbackInfo& e) {
		const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
		rep.record({{"type", "epoch"},
		            {"epoch", e.epoch},
		            {"step", e.step},
		            {"total", e.mean.grand_total},
		            {"detection", e.mean.detection_total},
		            {"restoration", e.mean.restoration},
		            {"seconds", secs}});
		rep.text() << "epoch " << e.epoch + 1 << "/" << cfg.epochs << "  total " << fmt("%.5f", e.mean.grand_total)
		           << "  detection " << fmt("%.5f", e.mean.detection_total) << "  restoration "
		           << fmt("%.5f", e.mean.restoration) << "  (" << fmt("%.1f", secs) << " s)\n";
		if (o.checkpoint_every > 0 && (e.epoch + 1) % o.checkpoint_every == 0 && e.epoch + 1 < cfg.epochs) {
			char name[32];
			std::snprintf(name, sizeof name, "epoch_%03d.ckpt", e.epoch + 1);
			save_checkpoint(out / name, model.to_checkpoint(meta));
			artifacts.push_back(name);
		}
	});
	metrics.close();
	save_checkpoint(out / "model.ckpt", model.to_checkpoint(meta));

	if (!test.empty()) {
		const auto ev = training::evaluate(model.detector(), test, cfg.model.image_size, cfg.batch_size);
		rep.record({{"type", "eval"}, {"split", "test"}, {"map", ev.result.map_score}});
		rep.text() << "test mAP@0.5 " << fmt("%.4f", ev.result.map_score) << '\n';
	}
	rep.text() << "checkpoint " << (out / "model.ckpt").string() << '\n';
	finish(ctx, "train", out / "manifest.json", out, training::to_json(cfg), cfg.seed, artifacts,
	       content_hash(data, list_files(data), training::to_ini(cfg)));
	return kOk;
}

// ---- eval ----------------------------------------------------------------------------------

int cmd_eval(const EvalOptions& o, const Context& ctx) {
	std::vector<std::string> bad;
	if (o.checkpoint.empty() == o.detections.empty()) bad.push_back("give exactly one of --checkpoint or --detections");
	if (o.data.empty()) bad.push_back("--data is required");
	if (o.out.empty()) bad.push_back("--out is required");
	if (!(o.iou > 0 && o.iou <= 1)) bad.push_back("--iou must lie in (0, 1]");
	if (o.batch < 1) bad.push_back("--batch must be >= 1");
	throw_if(bad, "eval:");
	const fs::path data = o.data, out = o.out;
	const datakit::ClassList classes = datakit::read_class_list(data);
	const auto samples = datakit::load_split(data, o.split, classes);
	if (samples.empty()) throw ConfigError("eval: split '" + o.split + "' of " + data.string() + " is empty");

	std::map<std::string, std::vector<datakit::BBox>> gts;
	for (const auto& s : samples) gts[s.id] = s.annotation.boxes;
	std::map<std::string, std::vector<detection::Detection>> dets;
	std::vector<std::string> inputs;
	if (!o.checkpoint.empty()) {
		const Checkpoint ckpt = load_checkpoint(o.checkpoint);
		auto det = training::load_detector(ckpt);
		if (det->config().num_classes != static_cast<int>(classes.size())) {
			throw ConfigError("eval: checkpoint has " + std::to_string(det->config().num_classes) + " classes, dataset " +
			                  std::to_string(classes.size()));
		}
		std::vector<std::pair<std::string, const ImageTensor*>> images;
		for (const auto& s : samples) images.emplace_back(s.id, &s.image);
		dets = detect_images(*det, images, o.batch, o.conf, o.nms);
	} else {
		std::ifstream in(o.detections);
		if (!in) throw ConfigError("eval: detection file not found: " + o.detections);
		dets = detection::read_detections(in, classes);
	}

	const auto mode = o.eleven_point ? evalkit::Interpolation::ElevenPoint : evalkit::Interpolation::AllPoint;
	const evalkit::EvalResult r = evalkit::mean_ap(dets, gts, static_cast<int>(classes.size()), o.iou, mode);

	fs::create_directories(out);
	std::vector<std::string> artifacts{"report.jsonl", "detections.txt"};
	{
		std::ofstream f(out / "detections.txt");
		for (const auto& [id, ds] : dets) detection::write_detections(f, id, ds, classes);
	}
	Reporter rep(ctx, out / "report.jsonl");
	json summary = evalkit::to_json(r, classes);
	summary["type"] = "eval";
	summary["split"] = o.split;
	summary["images"] = samples.size();
	summary["iou"] = o.iou;
	summary["interpolation"] = o.eleven_point ? "11-point" : "all-point";
	rep.record(summary);
	rep.text() << evalkit::format_report(r, classes);
	if (o.plots) {
		for (const auto& [c, curve] : r.pr_curves) {
			const std::string name = "pr_" + classes[static_cast<std::size_t>(c)] + ".png";
			write_image(out / name, evalkit::plot_pr_curve(curve));
			artifacts.push_back(name);
		}
	}
	const std::string extra = slurp(o.checkpoint.empty() ? o.detections : o.checkpoint);
	const json cfg = {{"checkpoint", o.checkpoint}, {"detections", o.detections}, {"split", o.split},
	                  {"iou", o.iou},               {"conf", o.conf},             {"nms", o.nms},
	                  {"eleven_point", o.eleven_point}};
	finish(ctx, "eval", out / "manifest.json", out, cfg, 0, artifacts,
	       content_hash(data, list_files(data), extra + cfg.dump()));
	return kOk;
}

// ---- infer ---------------------------------------------------------------------------------

int cmd_infer(const InferOptions& o, const Context& ctx) {
	std::vector<std::string> bad;
	if (o.checkpoint.empty()) bad.push_back("--checkpoint is required");
	if (o.input.empty()) bad.push_back("--input is required");
	if (o.out.empty()) bad.push_back("--out is required");
	throw_if(bad, "infer:");
	const Checkpoint ckpt = load_checkpoint(o.checkpoint);
	auto det = training::load_detector(ckpt);
	const datakit::ClassList classes = classes_of(ckpt, det->config().num_classes);

	const fs::path in = o.input, out = o.out;
	std::vector<std::pair<std::string, fs::path>> files;
	if (fs::is_regular_file(in)) {
		files.emplace_back(in.stem().string(), in);
	} else if (fs::is_directory(in)) {
		const fs::path dir = fs::is_directory(in / "images") ? in / "images" : in;
		for (const auto& e : fs::directory_iterator(dir))
			if (e.is_regular_file() && is_image(e.path())) files.emplace_back(e.path().stem().string(), e.path());
		std::sort(files.begin(), files.end());
	} else {
		throw ConfigError("infer: input not found: " + in.string());
	}
	if (files.empty()) throw ConfigError("infer: no images under " + in.string());

	std::vector<ImageTensor> images;
	for (const auto& [id, p] : files) images.push_back(read_image(p));
	std::vector<std::pair<std::string, const ImageTensor*>> refs;
	for (std::size_t i = 0; i < files.size(); ++i) refs.emplace_back(files[i].first, &images[i]);
	const auto dets = detect_images(*det, refs, 8, o.conf, o.nms);

	fs::create_directories(out);
	std::vector<std::string> artifacts{"detections.txt", "report.jsonl"};
	Reporter rep(ctx, out / "report.jsonl");
	std::ofstream dfile(out / "detections.txt");
	for (std::size_t i = 0; i < files.size(); ++i) {
		const std::string& id = files[i].first;
		const auto& ds = dets.count(id) ? dets.at(id) : std::vector<detection::Detection>{};
		detection::write_detections(dfile, id, ds, classes);
		write_image(out / (id + ".png"), draw_detections(images[i], ds, classes));
		artifacts.push_back(id + ".png");
		json boxes = json::array();
		for (const auto& d : ds)
			boxes.push_back({{"class", classes[static_cast<std::size_t>(d.class_id())]},
			                 {"score", d.score},
			                 {"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}}});
		rep.record({{"type", "detections"}, {"id", id}, {"count", ds.size()}, {"boxes", boxes}});
		rep.text() << id << ": " << ds.size() << " detection(s)\n";
	}
	dfile.close();
	std::string extra = slurp(o.checkpoint);
	for (const auto& [id, p] : files) extra += slurp(p);
	const json cfg = {{"checkpoint", o.checkpoint}, {"conf", o.conf}, {"nms", o.nms}};
	finish(ctx, "infer", out / "manifest.json", out, cfg, 0, artifacts, content_hash(out, {}, extra + cfg.dump()));
	return kOk;
}

// ---- ablate / sweep-weights -------------------------------------------------------------------

namespace {

int run_grid(const GridOptions& o, const Context& ctx, bool sweep) {
	const char* name = sweep ? "sweep-weights" : "ablate";
	training::TrainConfig base = resolve_config(o.config, o.overrides);
	std::vector<std::string> bad;
	if (o.data.empty()) bad.push_back("--data is required");
	if (o.out.empty()) bad.push_back("--out is required");
	if (o.seeds.empty()) bad.push_back("--seeds needs at least one seed");
	std::vector<training::Variant> variants;
	std::vector<training::LossWeights> grid;
	if (!sweep) {
		if (o.labels.empty()) variants = training::all_variants();
		for (const auto& l : o.labels) {
			try {
				variants.push_back(training::parse_variant(l));
			} catch (const ConfigError& e) {
				bad.push_back(e.what());
			}
		}
	} else {
		if (o.labels.empty()) grid = training::sweep_weight_grid();
		for (const auto& l : o.labels) {
			const auto amp = l.find('&');
			double a = 0, b = 0;
			char tail = 0;
			if (amp == std::string::npos || std::sscanf(l.substr(0, amp).c_str(), "%lf%c", &a, &tail) != 1 ||
			    std::sscanf(l.substr(amp + 1).c_str(), "%lf%c", &b, &tail) != 1 || a < 0 || b < 0 || (a == 0 && b == 0)) {
				bad.push_back("weight pair '" + l + "' must look like 0.2&0.8 with non-negative weights, not both zero");
			} else {
				grid.push_back({a, b});
			}
		}
	}
	throw_if(bad, std::string(name) + ":");
	const fs::path data = o.data, out = o.out;
	const datakit::ClassList classes = datakit::read_class_list(data);
	base.model.num_classes = static_cast<int>(classes.size());
	base.validate();
	const auto train = load_pairs(data, "train", classes);
	const auto test = load_pairs(data, "test", classes);
	if (train.empty() || test.empty()) throw ConfigError(std::string(name) + ": dataset needs train and test splits");

	fs::create_directories(out);
	Reporter rep(ctx, out / "report.jsonl");
	auto hook = [&](const training::RunRow& r) {
		rep.record({{"type", "run"},
		            {"label", r.label},
		            {"seed", r.seed},
		            {"map", r.map},
		            {"final_total_loss", r.final_loss.grand_total},
		            {"seconds", r.seconds}});
		rep.text() << r.label << " seed " << r.seed << ": mAP@0.5 " << fmt("%.4f", r.map) << " ("
		           << fmt("%.1f", r.seconds) << " s)\n";
	};
	const training::GridReport report = sweep ? training::run_weight_sweep(grid, o.seeds, base, train, test, hook)
	                                          : training::run_ablation(variants, o.seeds, base, train, test, hook);
	json summary = report.to_json();
	summary["type"] = "summary";
	rep.record(summary);
	rep.text() << report.format();
	{
		std::ofstream t(out / "table.txt");
		t << report.format();
	}
	json cfg = training::to_json(base);
	cfg["labels"] = o.labels;
	cfg["seeds"] = o.seeds;
	finish(ctx, name, out / "manifest.json", out, cfg, o.seeds.front(), {"report.jsonl", "table.txt"},
	       content_hash(data, list_files(data), cfg.dump()));
	return kOk;
}

} // namespace

int cmd_ablate(const GridOptions& o, const Context& ctx) { return run_grid(o, ctx, false); }
int cmd_sweep_weights(const GridOptions& o, const Context& ctx) { return run_grid(o, ctx, true); }

// ---- bench ---------------------------------------------------------------------------------

int cmd_bench(const BenchOptions& o, const Context& ctx) {
	std::vector<std::string> bad;
	if (o.runs < 1) bad.push_back("--runs must be >= 1");
	if (o.warmup < 0) bad.push_back("--warmup must be >= 0");
	if (o.out.empty()) bad.push_back("--out is required");
	throw_if(bad, "bench:");
	std::unique_ptr<detection::Detector> det;
	std::string extra;
	if (!o.checkpoint.empty()) {
		det = training::load_detector(load_checkpoint(o.checkpoint));
		extra = slurp(o.checkpoint);
	} else {
		const training::TrainConfig cfg = resolve_config(o.config, o.overrides);
		cfg.validate();
		Rng rng(o.seed);
		det = std::make_unique<detection::Detector>(cfg.model_config(), rng);
		extra = training::to_ini(cfg);
	}
	const int size = det->config().image_size;
	ImageTensor img;
	if (!o.image.empty()) {
		img = read_image(o.image);
		extra += slurp(o.image);
	} else {
		Rng rng(o.seed);
		std::uniform_real_distribution<double> u(0.0, 1.0);
		img = ImageTensor(3, size, size);
		for (double& v : img.data) v = u(rng);
	}
	const std::vector<std::pair<std::string, const ImageTensor*>> one{{"bench", &img}};
	for (int i = 0; i < o.warmup; ++i) detect_images(*det, one, 1, detection::kEvalConf, detection::kNmsIou);
	std::vector<double> lat;
	for (int i = 0; i < o.runs; ++i) {
		const auto t0 = std::chrono::steady_clock::now();
		detect_images(*det, one, 1, detection::kEvalConf, detection::kNmsIou);
		lat.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
	}
	const BenchStats s = bench_stats(lat);

	const fs::path out = o.out;
	Reporter rep(ctx, out / "report.jsonl");
	json ms = json::array();
	for (double v : s.latencies) ms.push_back(v * 1e3);
	rep.record({{"type", "bench"},
	            {"runs", o.runs},
	            {"warmup", o.warmup},
	            {"image_size", size},
	            {"mean_latency_ms", s.mean * 1e3},
	            {"fps", s.fps},
	            {"latencies_ms", ms},
	            {"blas", ops::blas_backend()}});
	rep.text() << "runs " << o.runs << " (after " << o.warmup << " warm-up)  mean latency " << fmt("%.2f", s.mean * 1e3)
	           << " ms  FPS " << fmt("%.2f", s.fps) << "  at " << size << "x" << size << '\n';
	const json cfg = {{"checkpoint", o.checkpoint}, {"runs", o.runs}, {"warmup", o.warmup}, {"image", o.image}};
	finish(ctx, "bench", out / "manifest.json", out, cfg, o.seed, {"report.jsonl"}, content_hash(out, {}, extra + cfg.dump()));
	return kOk;
}

// ---- strip-checkpoint --------------------------------------------------------------------------

int cmd_strip_checkpoint(const StripOptions& o, const Context& ctx) {
	if (o.input.empty() || o.output.empty()) throw ConfigError("strip-checkpoint: --input and --output are required");
	Checkpoint ckpt = load_checkpoint(o.input);
	const std::size_t removed = strip_prefix(ckpt, o.prefix);
	const fs::path output = o.output;
	save_checkpoint(output, ckpt);
	const fs::path dir = output.has_parent_path() ? output.parent_path() : fs::path(".");
	Reporter rep(ctx, fs::path(output.string() + ".report.jsonl"));
	rep.record({{"type", "strip"}, {"prefix", o.prefix}, {"removed", removed}, {"kept", ckpt.tensors.size()}});
	rep.text() << "removed " << removed << " tensor(s) under '" << o.prefix << "', kept " << ckpt.tensors.size() << '\n';
	const json cfg = {{"input", o.input}, {"prefix", o.prefix}};
	finish(ctx, "strip-checkpoint", output.string() + ".manifest.json", dir,
	       cfg, 0, {output.filename().string()}, content_hash(".", {}, slurp(o.input) + cfg.dump()));
	return kOk;
}

// ---- entry --------------------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
	CLI::App app{"fogdet: fog synthesis, joint restoration/detection training and evaluation"};
	app.require_subcommand(1);
	app.fallthrough(); // lets --jsonl follow the subcommand name
	bool jsonl = false;
	app.add_flag("--jsonl", jsonl, "print line-delimited JSON records instead of text");

	MakeDatasetOptions mk;
	auto* c_mk = app.add_subcommand("make-dataset", "generate the toy foggy dataset");
	c_mk->add_option("--out", mk.out, "output directory")->required();
	c_mk->add_option("--train", mk.train, "train samples")->capture_default_str();
	c_mk->add_option("--test", mk.test, "test samples")->capture_default_str();
	c_mk->add_option("--seed", mk.seed)->capture_default_str();
	c_mk->add_option("--size", mk.size, "image side in pixels")->capture_default_str();
	c_mk->add_option("--airlight", mk.airlight)->capture_default_str();
	c_mk->add_option("--beta-train", mk.beta_train, "beta range for the train split")->capture_default_str();
	c_mk->add_option("--beta-test", mk.beta_test, "beta range for the test split")->capture_default_str();

	SynthFogOptions sf;
	auto* c_sf = app.add_subcommand("synth-fog", "add fog to a directory of clean images or a dataset");
	c_sf->add_option("--input", sf.input, "input directory")->required();
	c_sf->add_option("--out", sf.out, "output directory")->required();
	c_sf->add_option("--airlight", sf.airlight)->capture_default_str();
	auto* beta_opt = c_sf->add_option("--beta", sf.beta, "fixed beta for every image");
	c_sf->add_option("--beta-range", sf.beta_range, "beta drawn uniformly per image")->capture_default_str()->excludes(beta_opt);
	c_sf->add_option("--seed", sf.seed)->capture_default_str();
	c_sf->add_option("--classes", sf.classes, "class list when the input has none: toy | road")->capture_default_str();

	TrainOptions tr;
	auto* c_tr = app.add_subcommand("train", "train a model on a paired dataset");
	c_tr->add_option("--data", tr.data, "dataset root")->required();
	c_tr->add_option("--out", tr.out, "run directory")->required();
	c_tr->add_option("--config", tr.config, "INI config file");
	c_tr->add_option("--set", tr.overrides, "section.key=value override (repeatable)");
	c_tr->add_option("--variant", tr.variant, "Base or V1..V7");
	c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "epochs between checkpoints, 0 for final only")
	    ->capture_default_str();

	EvalOptions ev;
	auto* c_ev = app.add_subcommand("eval", "score a checkpoint or a detection file");
	c_ev->add_option("--checkpoint", ev.checkpoint);
	c_ev->add_option("--detections", ev.detections, "detection file instead of a checkpoint");
	c_ev->add_option("--data", ev.data, "dataset root")->required();
	c_ev->add_option("--split", ev.split)->capture_default_str();
	c_ev->add_option("--out", ev.out, "report directory")->required();
	c_ev->add_option("--iou", ev.iou)->capture_default_str();
	c_ev->add_option("--conf", ev.conf)->capture_default_str();
	c_ev->add_option("--nms", ev.nms)->capture_default_str();
	c_ev->add_option("--batch", ev.batch)->capture_default_str();
	c_ev->add_flag("--eleven-point", ev.eleven_point, "11-point interpolated AP");
	c_ev->add_flag("--plots", ev.plots, "write PR curve images");

	InferOptions in;
	auto* c_in = app.add_subcommand("infer", "draw detections on images");
	c_in->add_option("--checkpoint", in.checkpoint)->required();
	c_in->add_option("--input", in.input, "image, image directory or dataset root")->required();
	c_in->add_option("--out", in.out, "output directory")->required();
	c_in->add_option("--conf", in.conf)->capture_default_str();
	c_in->add_option("--nms", in.nms)->capture_default_str();

	GridOptions ab;
	auto* c_ab = app.add_subcommand("ablate", "train and score variants over seeds");
	c_ab->add_option("--data", ab.data)->required();
	c_ab->add_option("--out", ab.out)->required();
	c_ab->add_option("--config", ab.config);
	c_ab->add_option("--set", ab.overrides);
	c_ab->add_option("--variants", ab.labels, "default: Base V1 ... V7");
	c_ab->add_option("--seeds", ab.seeds)->capture_default_str();

	GridOptions sw;
	auto* c_sw = app.add_subcommand("sweep-weights", "train and score loss-weight pairs over seeds");
	c_sw->add_option("--data", sw.data)->required();
	c_sw->add_option("--out", sw.out)->required();
	c_sw->add_option("--config", sw.config);
	c_sw->add_option("--set", sw.overrides);
	c_sw->add_option("--weights", sw.labels, "pairs like 0.2&0.8; default: the seven-pair grid");
	c_sw->add_option("--seeds", sw.seeds)->capture_default_str();

	BenchOptions bn;
	auto* c_bn = app.add_subcommand("bench", "per-image latency and FPS");
	c_bn->add_option("--checkpoint", bn.checkpoint);
	c_bn->add_option("--config", bn.config);
	c_bn->add_option("--set", bn.overrides);
	c_bn->add_option("--image", bn.image);
	c_bn->add_option("--out", bn.out)->required();
	c_bn->add_option("--runs", bn.runs)->capture_default_str();
	c_bn->add_option("--warmup", bn.warmup)->capture_default_str();
	c_bn->add_option("--seed", bn.seed)->capture_default_str();

	StripOptions st;
	auto* c_st = app.add_subcommand("strip-checkpoint", "drop tensors under a prefix (restoration by default)");
	c_st->add_option("--input", st.input)->required();
	c_st->add_option("--output", st.output)->required();
	c_st->add_option("--prefix", st.prefix)->capture_default_str();

	std::string manifest;
	auto* c_re = app.add_subcommand("replay", "re-run the command recorded in a manifest");
	c_re->add_option("manifest", manifest)->required();

	try {
		app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
	} catch (const CLI::ParseError& e) {
		const int code = app.exit(e, out, err);
		return code == 0 ? kOk : kValidationError;
	}

	Context ctx{out, err, jsonl, args};
	try {
		if (*c_mk) return cmd_make_dataset(mk, ctx);
		if (*c_sf) return cmd_synth_fog(sf, ctx);
		if (*c_tr) return cmd_train(tr, ctx);
		if (*c_ev) return cmd_eval(ev, ctx);
		if (*c_in) return cmd_infer(in, ctx);
		if (*c_ab) return cmd_ablate(ab, ctx);
		if (*c_sw) return cmd_sweep_weights(sw, ctx);
		if (*c_bn) return cmd_bench(bn, ctx);
		if (*c_st) return cmd_strip_checkpoint(st, ctx);
		if (*c_re) {
			const RunManifest m = read_manifest(manifest);
			if (m.argv.empty() || std::find(m.argv.begin(), m.argv.end(), "replay") != m.argv.end()) {
				throw ConfigError("manifest " + manifest + " does not hold a replayable command");
			}
			return run(m.argv, out, err);
		}
	} catch (const ConfigError& e) {
		err << "error: " << e.what() << '\n';
		return kValidationError;
	} catch (const ParseError& e) {
		err << "error: " << e.what() << '\n';
		return kValidationError;
	} catch (const std::invalid_argument& e) { // InvalidArgument and ShapeError
		err << "error: " << e.what() << '\n';
		return kValidationError;
	} catch (const std::exception& e) {
		err << "error: " << e.what() << '\n';
		return kRuntimeError;
	}
	return kValidationError;
}

} // namespace fogdet::cli
