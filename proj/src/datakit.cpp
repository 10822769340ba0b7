#include "fogdet/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

namespace fogdet::datakit {

namespace pt = boost::property_tree;

ClassList road_classes() {
	return {"car", "bus", "motorbike", "bicycle", "person"};
}

ClassList toy_classes() {
	return {"rectangle", "ellipse", "triangle"};
}

std::optional<BBox> clip_box(const BBox& box, int width, int height) {
	BBox c = box;
	c.x_min = std::clamp(c.x_min, 0.0, static_cast<double>(width));
	c.x_max = std::clamp(c.x_max, 0.0, static_cast<double>(width));
	c.y_min = std::clamp(c.y_min, 0.0, static_cast<double>(height));
	c.y_max = std::clamp(c.y_max, 0.0, static_cast<double>(height));
	if (!c.valid()) {
		return std::nullopt;
	}
	return c;
}

namespace {

int class_index(const ClassList& classes, const std::string& name) {
	auto it = std::find(classes.begin(), classes.end(), name);
	return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

} // namespace

VocParseResult parse_voc_annotation(std::string_view document, const ClassList& classes) {
	pt::ptree tree;
	std::istringstream in{std::string(document)};
	try {
		pt::read_xml(in, tree, pt::xml_parser::trim_whitespace);
	} catch (const pt::xml_parser_error& e) {
		throw ParseError("malformed VOC XML (line " + std::to_string(e.line()) + "): " + e.message(), e.line());
	}
	auto root = tree.get_child_optional("annotation");
	if (!root) {
		throw ParseError("VOC XML has no <annotation> root", 0);
	}
	VocParseResult result;
	Annotation& ann = result.annotation;
	std::string filename = root->get<std::string>("filename", "");
	if (auto dot = filename.rfind('.'); dot != std::string::npos) {
		filename.resize(dot);
	}
	ann.image_id = filename;
	try {
		ann.width = root->get<int>("size.width");
		ann.height = root->get<int>("size.height");
	} catch (const pt::ptree_error& e) {
		throw ParseError(std::string("VOC XML missing <size>: ") + e.what(), 0);
	}
	if (ann.width <= 0 || ann.height <= 0) {
		throw ParseError("VOC XML has non-positive image size", 0);
	}
	for (const auto& [tag, node] : *root) {
		if (tag != "object") {
			continue;
		}
		const std::string name = node.get<std::string>("name", "");
		if (node.get_optional<std::string>("difficult")) {
			++result.dropped_difficult;
		}
		const int id = class_index(classes, name);
		if (id < 0) {
			++result.skipped_unknown;
			continue;
		}
		BBox box;
		try {
			box.x_min = node.get<double>("bndbox.xmin");
			box.y_min = node.get<double>("bndbox.ymin");
			box.x_max = node.get<double>("bndbox.xmax");
			box.y_max = node.get<double>("bndbox.ymax");
		} catch (const pt::ptree_error& e) {
			throw ParseError("VOC object '" + name + "' has a malformed <bndbox>: " + e.what(), 0);
		}
		box.class_id = id;
		if (auto clipped = clip_box(box, ann.width, ann.height)) {
			ann.boxes.push_back(*clipped);
		}
	}
	return result;
}

std::string write_voc_annotation(const Annotation& annotation, const ClassList& classes) {
	std::ostringstream os;
	os << "<annotation>\n"
	   << "  <filename>" << annotation.image_id << ".png</filename>\n"
	   << "  <size><width>" << annotation.width << "</width><height>" << annotation.height
	   << "</height><depth>3</depth></size>\n";
	for (const BBox& b : annotation.boxes) {
		if (b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= classes.size()) {
			throw InvalidArgument("write_voc_annotation: class id " + std::to_string(b.class_id) + " out of range");
		}
		os << "  <object>\n"
		   << "    <name>" << classes[static_cast<std::size_t>(b.class_id)] << "</name>\n"
		   << "    <bndbox><xmin>" << b.x_min << "</xmin><ymin>" << b.y_min << "</ymin><xmax>" << b.x_max
		   << "</xmax><ymax>" << b.y_max << "</ymax></bndbox>\n"
		   << "  </object>\n";
	}
	os << "</annotation>\n";
	return os.str();
}

Annotation filter_classes(const Annotation& ann, const ClassList& source, const ClassList& keep) {
	Annotation out = ann;
	out.boxes.clear();
	for (const BBox& b : ann.boxes) {
		if (b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= source.size()) {
			continue;
		}
		const int id = class_index(keep, source[static_cast<std::size_t>(b.class_id)]);
		if (id >= 0) {
			BBox kept = b;
			kept.class_id = id;
			out.boxes.push_back(kept);
		}
	}
	return out;
}

namespace {

Rgb hsv_to_rgb(double h, double s, double v) {
	const double c = v * s;
	const double hp = h * 6.0;
	const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
	Rgb rgb{};
	switch (static_cast<int>(hp) % 6) {
	case 0: rgb = {c, x, 0}; break;
	case 1: rgb = {x, c, 0}; break;
	case 2: rgb = {0, c, x}; break;
	case 3: rgb = {0, x, c}; break;
	case 4: rgb = {x, 0, c}; break;
	default: rgb = {c, 0, x}; break;
	}
	const double m = v - c;
	for (double& ch : rgb) ch += m;
	return rgb;
}

// Does the pixel centre (x+0.5, y+0.5) fall inside shape `cls` inscribed in the box?
bool inside_shape(int cls, double px, double py, double x0, double y0, double w, double h) {
	const double u = (px - x0) / w; // [0,1] across the box
	const double v = (py - y0) / h;
	if (u < 0 || u > 1 || v < 0 || v > 1) {
		return false;
	}
	switch (cls) {
	case 0:
		return true;
	case 1: {
		const double du = u - 0.5, dv = v - 0.5;
		return du * du + dv * dv <= 0.25;
	}
	default:
		// Apex at top centre, base along the bottom edge.
		return std::abs(u - 0.5) <= 0.5 * v;
	}
}

double box_iou(const BBox& a, const BBox& b) {
	const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
	const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
	const double inter = iw * ih;
	const double uni = a.area() + b.area() - inter;
	return uni > 0 ? inter / uni : 0.0;
}

} // namespace

ToyScene generate_toy_scene(Rng& rng, const SceneConfig& config, std::string image_id) {
	if (config.width < 1 || config.height < 1 || config.min_objects < 0 || config.max_objects < config.min_objects ||
	    config.min_size < 1 || config.max_size < config.min_size) {
		throw InvalidArgument("generate_toy_scene: inconsistent scene config");
	}
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	std::normal_distribution<double> noise(0.0, config.texture_noise);

	ToyScene scene;
	scene.image = ImageTensor(3, config.height, config.width);
	scene.annotation.image_id = std::move(image_id);
	scene.annotation.width = config.width;
	scene.annotation.height = config.height;

	// Grey background: random linear gradient plus pixel noise, identical in all channels.
	const double base = 0.3 + 0.4 * unit(rng);
	const double gx = (unit(rng) - 0.5) * 0.3, gy = (unit(rng) - 0.5) * 0.3;
	for (int y = 0; y < config.height; ++y) {
		for (int x = 0; x < config.width; ++x) {
			const double v = std::clamp(base + gx * x / config.width + gy * y / config.height + noise(rng), 0.0, 1.0);
			for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = v;
		}
	}

	std::uniform_int_distribution<int> count_dist(config.min_objects, config.max_objects);
	scene.requested = count_dist(rng);
	std::uniform_int_distribution<int> size_dist(config.min_size, std::min({config.max_size, config.width, config.height}));
	std::uniform_int_distribution<int> class_dist(0, 2);

	for (int obj = 0; obj < scene.requested; ++obj) {
		bool placed = false;
		for (int attempt = 0; attempt < config.max_retries && !placed; ++attempt) {
			const int w = size_dist(rng), h = size_dist(rng);
			std::uniform_int_distribution<int> xd(0, config.width - w), yd(0, config.height - h);
			const int x0 = xd(rng), y0 = yd(rng);
			const int cls = class_dist(rng);

			// Rasterise, then take the tight box of covered pixels.
			int tx0 = config.width, ty0 = config.height, tx1 = -1, ty1 = -1;
			std::vector<std::pair<int, int>> pixels;
			for (int y = y0; y < y0 + h; ++y) {
				for (int x = x0; x < x0 + w; ++x) {
					if (inside_shape(cls, x + 0.5, y + 0.5, x0, y0, w, h)) {
						pixels.emplace_back(x, y);
						tx0 = std::min(tx0, x);
						ty0 = std::min(ty0, y);
						tx1 = std::max(tx1, x);
						ty1 = std::max(ty1, y);
					}
				}
			}
			if (pixels.empty()) continue;
			BBox box{double(tx0), double(ty0), double(tx1 + 1), double(ty1 + 1), cls};
			if (box.width() < config.min_size || box.height() < config.min_size) continue;
			const bool overlaps = std::any_of(scene.annotation.boxes.begin(), scene.annotation.boxes.end(),
			                                  [&](const BBox& o) {
				                                  const double iou = box_iou(box, o);
				                                  return config.max_overlap <= 0.0 ? iou > 0.0 : iou > config.max_overlap;
			                                  });
			if (overlaps) continue;

			Rgb color;
			do {
				color = hsv_to_rgb(unit(rng), 0.6 + 0.4 * unit(rng), 0.5 + 0.5 * unit(rng));
			} while (std::find(scene.colors.begin(), scene.colors.end(), color) != scene.colors.end());
			for (auto [x, y] : pixels) {
				for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = color[static_cast<std::size_t>(c)];
			}
			scene.annotation.boxes.push_back(box);
			scene.colors.push_back(color);
			placed = true;
		}
	}
	scene.incomplete = static_cast<int>(scene.annotation.boxes.size()) < scene.requested;
	return scene;
}

PairedSample make_paired_sample(const ImageTensor& clean, const Annotation& ann, const weathersim::FogParams& fog) {
	PairedSample s;
	s.id = ann.image_id;
	s.foggy = weathersim::apply_fog(clean, fog);
	s.clean = clean;
	s.annotation = ann;
	s.fog = fog;
	return s;
}

std::vector<PairedSample> synthesize_toy_pairs(Rng& rng, const SceneConfig& config, int count,
                                               std::pair<double, double> beta_range, double airlight,
                                               const std::string& prefix) {
	std::vector<PairedSample> out;
	out.reserve(static_cast<std::size_t>(std::max(count, 0)));
	for (int i = 0; i < count; ++i) {
		char id[32];
		std::snprintf(id, sizeof id, "%05d", i);
		ToyScene scene = generate_toy_scene(rng, config, prefix + id);
		const weathersim::FogParams fog{airlight, weathersim::sample_beta(beta_range, rng)};
		const ImageTensor clean = quantize8(scene.image);
		PairedSample s = make_paired_sample(clean, scene.annotation, fog);
		s.foggy = quantize8(s.foggy);
		out.push_back(std::move(s));
	}
	return out;
}

namespace {

ImageTensor resize_bilinear(const ImageTensor& src, int out_w, int out_h) {
	ImageTensor out(src.channels, out_h, out_w, 0.0, src.range);
	const double sx = static_cast<double>(src.width) / out_w;
	const double sy = static_cast<double>(src.height) / out_h;
	for (int y = 0; y < out_h; ++y) {
		const double fy = std::max((y + 0.5) * sy - 0.5, 0.0);
		const int y0 = std::min(static_cast<int>(fy), src.height - 1);
		const int y1 = std::min(y0 + 1, src.height - 1);
		const double ay = fy - y0;
		for (int x = 0; x < out_w; ++x) {
			const double fx = std::max((x + 0.5) * sx - 0.5, 0.0);
			const int x0 = std::min(static_cast<int>(fx), src.width - 1);
			const int x1 = std::min(x0 + 1, src.width - 1);
			const double ax = fx - x0;
			for (int c = 0; c < src.channels; ++c) {
				const double top = src.at(c, y0, x0) * (1 - ax) + src.at(c, y0, x1) * ax;
				const double bot = src.at(c, y1, x0) * (1 - ax) + src.at(c, y1, x1) * ax;
				out.at(c, y, x) = top * (1 - ay) + bot * ay;
			}
		}
	}
	return out;
}

} // namespace

Letterbox letterbox(const ImageTensor& image, int target, double pad_value) {
	if (target < 1) {
		throw InvalidArgument("letterbox: target size must be positive");
	}
	Letterbox lb;
	lb.scale = std::min(static_cast<double>(target) / image.width, static_cast<double>(target) / image.height);
	const int new_w = std::clamp(static_cast<int>(std::lround(image.width * lb.scale)), 1, target);
	const int new_h = std::clamp(static_cast<int>(std::lround(image.height * lb.scale)), 1, target);
	lb.pad_x = (target - new_w) / 2;
	lb.pad_y = (target - new_h) / 2;
	const ImageTensor resized =
	    (new_w == image.width && new_h == image.height) ? image : resize_bilinear(image, new_w, new_h);
	lb.image = ImageTensor(image.channels, target, target, pad_value, image.range);
	for (int c = 0; c < image.channels; ++c) {
		for (int y = 0; y < new_h; ++y) {
			for (int x = 0; x < new_w; ++x) {
				lb.image.at(c, y + lb.pad_y, x + lb.pad_x) = resized.at(c, y, x);
			}
		}
	}
	return lb;
}

BBox transform_box(const BBox& box, double scale, int pad_x, int pad_y) {
	return {box.x_min * scale + pad_x, box.y_min * scale + pad_y, box.x_max * scale + pad_x, box.y_max * scale + pad_y,
	        box.class_id};
}

Annotation transform_annotation(const Annotation& ann, const Letterbox& lb, int target) {
	Annotation out = ann;
	out.width = target;
	out.height = target;
	out.boxes.clear();
	for (const BBox& b : ann.boxes) {
		if (auto c = clip_box(transform_box(b, lb.scale, lb.pad_x, lb.pad_y), target, target)) {
			out.boxes.push_back(*c);
		}
	}
	return out;
}

BatchIterator::BatchIterator(const std::vector<PairedSample>& dataset, int batch_size, int target_size, Rng& rng,
                             bool shuffle)
    : dataset_(dataset), batch_size_(batch_size), target_(target_size), order_(dataset.size()) {
	if (batch_size < 1) {
		throw InvalidArgument("batch_size must be >= 1");
	}
	std::iota(order_.begin(), order_.end(), std::size_t{0});
	if (shuffle) {
		std::shuffle(order_.begin(), order_.end(), rng);
	}
}

std::size_t BatchIterator::batch_count() const {
	return (order_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
}

std::optional<Batch> BatchIterator::next() {
	if (cursor_ >= order_.size()) {
		return std::nullopt;
	}
	const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
	Batch batch;
	std::vector<ImageTensor> foggy, clean;
	foggy.reserve(end - cursor_);
	clean.reserve(end - cursor_);
	for (std::size_t i = cursor_; i < end; ++i) {
		const PairedSample& s = dataset_[order_[i]];
		Letterbox lf = letterbox(s.foggy, target_);
		Letterbox lc = letterbox(s.clean, target_);
		batch.annotations.push_back(transform_annotation(s.annotation, lf, target_));
		batch.ids.push_back(s.id);
		batch.fog.push_back(s.fog);
		batch.indices.push_back(order_[i]);
		foggy.push_back(std::move(lf.image));
		clean.push_back(std::move(lc.image));
	}
	std::vector<const ImageTensor*> fp, cp;
	for (std::size_t i = 0; i < foggy.size(); ++i) {
		fp.push_back(&foggy[i]);
		cp.push_back(&clean[i]);
	}
	batch.foggy = stack_images(fp);
	batch.clean = stack_images(cp);
	cursor_ = end;
	return batch;
}

std::vector<IndexEntry> read_index(const std::filesystem::path& root) {
	std::ifstream in(root / "index.txt");
	if (!in) {
		throw std::runtime_error("cannot read dataset index " + (root / "index.txt").string());
	}
	std::vector<IndexEntry> entries;
	std::string line;
	while (std::getline(in, line)) {
		std::istringstream ls(line);
		IndexEntry e;
		if (ls >> e.image_id >> e.split) {
			entries.push_back(std::move(e));
		}
	}
	return entries;
}

void write_index(const std::filesystem::path& root, const std::vector<IndexEntry>& entries) {
	std::ofstream out(root / "index.txt");
	for (const auto& e : entries) {
		out << e.image_id << ' ' << e.split << '\n';
	}
	if (!out) {
		throw std::runtime_error("cannot write dataset index under " + root.string());
	}
}

namespace {

std::string read_text(const std::filesystem::path& p) {
	std::ifstream in(p);
	if (!in) {
		throw std::runtime_error("cannot read " + p.string());
	}
	std::ostringstream os;
	os << in.rdbuf();
	return os.str();
}

std::filesystem::path find_image(const std::filesystem::path& dir, const std::string& id) {
	for (const char* ext : {".png", ".jpg", ".jpeg"}) {
		auto p = dir / (id + ext);
		if (std::filesystem::exists(p)) {
			return p;
		}
	}
	throw std::runtime_error("no image for '" + id + "' in " + dir.string());
}

} // namespace

std::vector<DiskSample> load_split(const std::filesystem::path& root, const std::string& split, const ClassList& classes) {
	std::map<std::string, weathersim::FogParams> fog;
	if (std::ifstream fin(root / "fog.tsv"); fin) {
		std::string id;
		weathersim::FogParams p;
		while (fin >> id >> p.airlight >> p.beta) {
			fog[id] = p;
		}
	}
	std::vector<DiskSample> out;
	for (const IndexEntry& e : read_index(root)) {
		if (!split.empty() && e.split != split) {
			continue;
		}
		DiskSample s;
		s.id = e.image_id;
		s.image = read_image(find_image(root / "images", e.image_id));
		if (std::filesystem::exists(root / "clean")) {
			s.clean = read_image(find_image(root / "clean", e.image_id));
		}
		s.annotation = parse_voc_annotation(read_text(root / "annotations" / (e.image_id + ".xml")), classes).annotation;
		s.annotation.image_id = e.image_id;
		if (auto it = fog.find(e.image_id); it != fog.end()) {
			s.fog = it->second;
		}
		out.push_back(std::move(s));
	}
	return out;
}

std::vector<PairedSample> to_pairs(const std::vector<DiskSample>& samples) {
	std::vector<PairedSample> out;
	out.reserve(samples.size());
	for (const DiskSample& s : samples) {
		PairedSample p;
		p.id = s.id;
		p.foggy = s.image;
		p.clean = s.clean ? *s.clean : s.image;
		p.annotation = s.annotation;
		p.fog = s.fog.value_or(weathersim::FogParams{weathersim::kDefaultAirlight, 0.0});
		out.push_back(std::move(p));
	}
	return out;
}

void write_class_list(const std::filesystem::path& root, const ClassList& classes) {
	std::ofstream out(root / "classes.txt");
	for (const auto& c : classes) {
		out << c << '\n';
	}
}

ClassList read_class_list(const std::filesystem::path& root) {
	std::ifstream in(root / "classes.txt");
	if (!in) {
		throw std::runtime_error("cannot read class list " + (root / "classes.txt").string());
	}
	ClassList classes;
	std::string line;
	while (std::getline(in, line)) {
		if (!line.empty()) classes.push_back(line);
	}
	return classes;
}

std::vector<std::string> write_paired_dataset(const std::filesystem::path& root, const std::vector<PairedSample>& samples,
                                              const std::vector<std::string>& splits, const ClassList& classes) {
	if (splits.size() != samples.size()) {
		throw InvalidArgument("write_paired_dataset: one split name per sample");
	}
	namespace fs = std::filesystem;
	for (const char* sub : {"images", "clean", "annotations"}) fs::create_directories(root / sub);
	std::vector<std::string> files;
	std::vector<IndexEntry> index;
	std::ofstream fog(root / "fog.tsv");
	char buf[96];
	for (std::size_t i = 0; i < samples.size(); ++i) {
		const PairedSample& s = samples[i];
		write_image(root / "images" / (s.id + ".png"), s.foggy);
		write_image(root / "clean" / (s.id + ".png"), s.clean);
		Annotation ann = s.annotation;
		ann.image_id = s.id;
		std::ofstream xml(root / "annotations" / (s.id + ".xml"));
		xml << write_voc_annotation(ann, classes);
		if (!xml) throw std::runtime_error("cannot write annotation for " + s.id);
		std::snprintf(buf, sizeof buf, "\t%.17g\t%.17g\n", s.fog.airlight, s.fog.beta);
		fog << s.id << buf;
		index.push_back({s.id, splits[i]});
		for (const char* sub : {"images/", "clean/"}) files.push_back(sub + s.id + ".png");
		files.push_back("annotations/" + s.id + ".xml");
	}
	if (!fog) throw std::runtime_error("cannot write " + (root / "fog.tsv").string());
	write_index(root, index);
	write_class_list(root, classes);
	for (const char* f : {"fog.tsv", "index.txt", "classes.txt"}) files.push_back(f);
	return files;
}

} // namespace fogdet::datakit
