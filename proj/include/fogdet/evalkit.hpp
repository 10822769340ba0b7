#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fogdet/detection.hpp"
#include "fogdet/image.hpp"

namespace fogdet::evalkit {

using datakit::BBox;
using detection::Detection;

enum class Interpolation {
	AllPoint,    // area under the precision envelope
	ElevenPoint, // mean envelope precision at recall 0, 0.1, ..., 1
};

struct ImageDetection {
	std::string image_id;
	Detection det;
};

/// Greedy matching in the given order (callers sort by descending score).
/// Each detection takes the highest-IoU unmatched ground truth of its class with
/// IoU >= threshold; everything else is a false positive.
std::vector<bool> match_detections(const std::vector<ImageDetection>& dets,
                                   const std::map<std::string, std::vector<BBox>>& gts, double iou_threshold);

using PrCurve = std::vector<std::pair<double, double>>; // (recall, precision)

/// Cumulative precision/recall for flags already in descending-score order.
PrCurve pr_curve(const std::vector<bool>& tp_flags, int num_gt);

/// nullopt when num_gt == 0 (the class is then left out of the mean).
std::optional<double> average_precision(const std::vector<bool>& tp_flags, int num_gt,
                                        Interpolation mode = Interpolation::AllPoint);

struct EvalResult {
	std::map<int, double> per_class_ap; // classes with at least one ground truth
	std::map<int, int> num_gt;
	std::map<int, int> num_det;
	std::map<int, PrCurve> pr_curves;
	double map_score{0.0};
};

/// Streamed accumulation: per-image matching, merged ranking at finalize.
/// Sharded accumulators merged in image order give the same result as one pass.
class Accumulator {
public:
	Accumulator(int num_classes, double iou_threshold = 0.5, Interpolation mode = Interpolation::AllPoint);
	void add_image(const std::vector<Detection>& dets, const std::vector<BBox>& gts);
	void merge(const Accumulator& other);
	EvalResult finalize() const;

private:
	struct Record {
		double score;
		bool tp;
	};
	int num_classes_;
	double iou_;
	Interpolation mode_;
	std::vector<std::vector<Record>> records_;
	std::vector<int> num_gt_;
};

/// Per-class AP and mAP over images in id order. Images missing from `dets`
/// contribute only ground truth; images missing from `gts` contribute false positives.
EvalResult mean_ap(const std::map<std::string, std::vector<Detection>>& dets,
                   const std::map<std::string, std::vector<BBox>>& gts, int num_classes, double iou_threshold = 0.5,
                   Interpolation mode = Interpolation::AllPoint);

nlohmann::json to_json(const EvalResult& r, const datakit::ClassList& classes);
std::string format_report(const EvalResult& r, const datakit::ClassList& classes);
/// Simple PR plot: recall on x, precision on y, white background.
ImageTensor plot_pr_curve(const PrCurve& curve, int size = 200);

} // namespace fogdet::evalkit
