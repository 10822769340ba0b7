#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fogdet/image.hpp"
#include "fogdet/tensor.hpp"
#include "fogdet/weathersim.hpp"

namespace fogdet::datakit {

using ClassList = std::vector<std::string>;

/// Five road-scene classes used for foggy VOC subsets (VOC spells motorcycle "motorbike").
ClassList road_classes();
/// The three toy shape classes.
ClassList toy_classes();

/// Axis-aligned box in pixel coordinates; x_max/y_max are exclusive edges.
struct BBox {
	double x_min{0}, y_min{0}, x_max{0}, y_max{0};
	int class_id{0};

	double width() const { return x_max - x_min; }
	double height() const { return y_max - y_min; }
	double area() const { return width() * height(); }
	bool valid() const { return x_min < x_max && y_min < y_max; }
	bool operator==(const BBox&) const = default;
};

struct Annotation {
	std::string image_id;
	int width{0};
	int height{0};
	std::vector<BBox> boxes;
	bool operator==(const Annotation&) const = default;
};

/// Clips to [0,width]x[0,height]; returns nullopt if nothing is left.
std::optional<BBox> clip_box(const BBox& box, int width, int height);

struct VocParseResult {
	Annotation annotation;
	int skipped_unknown{0};  // objects whose class is not in the list
	int dropped_difficult{0}; // objects that carried a difficult flag (kept, flag ignored)
};

/// Parses a PASCAL VOC XML annotation. Throws ParseError (with line) on malformed XML.
VocParseResult parse_voc_annotation(std::string_view document, const ClassList& classes);
std::string write_voc_annotation(const Annotation& annotation, const ClassList& classes);

/// Keeps boxes whose class (named via `source`) is in `keep`, remapping ids to `keep` order.
Annotation filter_classes(const Annotation& ann, const ClassList& source, const ClassList& keep);

struct SceneConfig {
	int width{160};
	int height{160};
	int min_objects{1};
	int max_objects{4};
	int min_size{16};
	int max_size{56};
	double max_overlap{0.0}; // max IoU between any two object boxes
	int max_retries{60};
	double texture_noise{0.04};
};

struct ToyScene {
	ImageTensor image;
	Annotation annotation;
	std::vector<Rgb> colors; // fill colour of each box, same order
	int requested{0};
	bool incomplete{false}; // fewer objects placed than requested
};

ToyScene generate_toy_scene(Rng& rng, const SceneConfig& config, std::string image_id = "toy");

struct PairedSample {
	std::string id;
	ImageTensor foggy;
	ImageTensor clean;
	Annotation annotation;
	weathersim::FogParams fog;
};

PairedSample make_paired_sample(const ImageTensor& clean, const Annotation& ann, const weathersim::FogParams& fog);

/// `count` toy scenes, each fogged with beta drawn from `beta_range`. Clean and foggy
/// images are quantised through 8 bits, so the result matches a save/load cycle.
/// Ids are `prefix` followed by a zero-padded index.
std::vector<PairedSample> synthesize_toy_pairs(Rng& rng, const SceneConfig& config, int count,
                                               std::pair<double, double> beta_range, double airlight,
                                               const std::string& prefix);

struct Letterbox {
	ImageTensor image;
	double scale{1.0};
	int pad_x{0};
	int pad_y{0};
};

/// Aspect-preserving resize into a target x target canvas, centred, grey padding.
Letterbox letterbox(const ImageTensor& image, int target, double pad_value = 0.5);
BBox transform_box(const BBox& box, double scale, int pad_x, int pad_y);
Annotation transform_annotation(const Annotation& ann, const Letterbox& lb, int target);

struct Batch {
	std::vector<std::string> ids;
	Tensor foggy; // (B,3,S,S) in [0,1]
	Tensor clean; // (B,3,S,S) in [0,1]
	std::vector<Annotation> annotations; // in letterboxed coordinates
	std::vector<weathersim::FogParams> fog;
	std::vector<std::size_t> indices; // positions in the source dataset
};

/// Seeded shuffled batches with letterboxing; the final partial batch is emitted.
class BatchIterator {
public:
	BatchIterator(const std::vector<PairedSample>& dataset, int batch_size, int target_size, Rng& rng,
	              bool shuffle = true);
	std::optional<Batch> next();
	std::size_t batch_count() const;
	const std::vector<std::size_t>& order() const { return order_; }

private:
	const std::vector<PairedSample>& dataset_;
	int batch_size_;
	int target_;
	std::vector<std::size_t> order_;
	std::size_t cursor_{0};
};

// ---- on-disk layout -------------------------------------------------------
//   root/index.txt         "<image_id> <split>" per line
//   root/images/<id>.png   network input (foggy for paired sets)
//   root/clean/<id>.png    clean counterpart (paired sets only)
//   root/annotations/<id>.xml
//   root/fog.tsv           "<id>\t<airlight>\t<beta>" (paired sets only)

struct IndexEntry {
	std::string image_id;
	std::string split;
};

std::vector<IndexEntry> read_index(const std::filesystem::path& root);
void write_index(const std::filesystem::path& root, const std::vector<IndexEntry>& entries);

struct DiskSample {
	std::string id;
	ImageTensor image;
	std::optional<ImageTensor> clean;
	Annotation annotation;
	std::optional<weathersim::FogParams> fog;
};

/// Loads every entry of `split` (all entries when split is empty).
std::vector<DiskSample> load_split(const std::filesystem::path& root, const std::string& split, const ClassList& classes);

/// Converts disk samples to training pairs; a sample without a clean image pairs with itself.
std::vector<PairedSample> to_pairs(const std::vector<DiskSample>& samples);

void write_class_list(const std::filesystem::path& root, const ClassList& classes);

/// Writes the full paired layout: images/ (foggy), clean/, annotations/, fog.tsv,
/// classes.txt and index.txt. `splits[i]` names the split of `samples[i]`.
/// Returns every file written, relative to `root`.
std::vector<std::string> write_paired_dataset(const std::filesystem::path& root, const std::vector<PairedSample>& samples,
                                              const std::vector<std::string>& splits, const ClassList& classes);
ClassList read_class_list(const std::filesystem::path& root);

} // namespace fogdet::datakit
