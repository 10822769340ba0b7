#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fogdet/backbone.hpp"
#include "fogdet/datakit.hpp"
#include "fogdet/nn.hpp"

namespace fogdet::detection {

using datakit::Annotation;
using datakit::BBox;

inline constexpr std::array<int, 3> kStrides{8, 16, 32};
inline constexpr double kIouWeight = 5.0;
inline constexpr double kEvalConf = 0.01;
inline constexpr double kDemoConf = 0.25;
inline constexpr double kNmsIou = 0.45;

struct Detection {
	BBox box; // box.class_id is the predicted class
	double score{0};
	int class_id() const { return box.class_id; }
};

double iou(const BBox& a, const BBox& b);

/// Greedy per-class NMS; result sorted by descending score.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// ---- heads -----------------------------------------------------------------

struct ScaleOutput {
	Tensor cls; // (N,C,H,W) logits
	Tensor reg; // (N,4,H,W): dx, dy, log w, log h in stride units
	Tensor obj; // (N,1,H,W) logit
	int stride{8};
};

struct HeadOutput {
	std::vector<ScaleOutput> scales; // strides 8, 16, 32
	int batch() const { return scales.empty() ? 0 : scales[0].obj.dim(0); }
	int num_classes() const { return scales.empty() ? 0 : scales[0].cls.dim(1); }
};

/// Self-calibrated convolution: split in half; the first half is gated by
/// sigmoid(x1 + up(K2(avgpool_r(x1)))) and passed through K3/K4, the second through K1.
class ScConv : public nn::Module {
public:
	ScConv(int channels, Rng& rng, int pool_rate = 4);
	Tensor forward(const Tensor& x) const;

	int pool_rate() const { return rate_; }
	nn::Conv2d k1, k2, k3, k4;

private:
	int channels_;
	int rate_;
};

/// Top-down then bottom-up fusion of c3/c4/c5.
class Neck : public nn::Module {
public:
	Neck(const ModelConfig& cfg, const std::vector<int>& stage_channels, Rng& rng);
	/// Returns maps at strides 8, 16, 32.
	std::array<Tensor, 3> forward(const backbone::FeaturePyramid& p) const;
	std::array<int, 3> out_channels() const { return out_; }

private:
	std::array<int, 3> out_;
	nn::ConvNormAct lateral0_, reduce1_, bu2_, bu1_;
	backbone::CspBlock p4_, p3_, n3_, n4_;
};

class DecoupledHead : public nn::Module {
public:
	DecoupledHead(int in_ch, int width, int num_classes, Rng& rng);
	ScaleOutput forward(const Tensor& x, int stride) const;

private:
	nn::ConvNormAct stem_, cls1_, cls2_, reg1_, reg2_;
	nn::Conv2d cls_pred_, reg_pred_, obj_pred_;
};

struct DetectorOutput {
	HeadOutput heads;
	backbone::FeaturePyramid pyramid;
};

/// Backbone + neck + optional SC-conv + three decoupled heads. Holds no restoration parameters.
class Detector : public nn::Module {
public:
	Detector(const ModelConfig& cfg, Rng& rng);
	DetectorOutput forward(const Tensor& images) const;

	const ModelConfig& config() const { return cfg_; }
	const backbone::Backbone& backbone() const { return backbone_; }
	const Neck& neck() const { return neck_; }

private:
	ModelConfig cfg_;
	backbone::Backbone backbone_;
	Neck neck_;
	std::vector<std::unique_ptr<ScConv>> scconv_;
	std::vector<std::unique_ptr<DecoupledHead>> heads_;
};

// ---- box coding --------------------------------------------------------------

/// Regression targets (dx, dy, log w, log h) of a box relative to grid cell (gx, gy).
std::array<double, 4> encode_box(const BBox& box, int gx, int gy, int stride);
/// Inverse of encode_box; class id is left at 0.
BBox decode_box(const std::array<double, 4>& reg, int gx, int gy, int stride);

/// Per-image detections with score sigmoid(obj) * sigmoid(cls) >= conf_threshold.
/// Boxes are clipped to the image when image_w/image_h are positive.
std::vector<std::vector<Detection>> decode_predictions(const HeadOutput& heads, double conf_threshold,
                                                       int image_w = 0, int image_h = 0);

/// decode + per-class NMS + top-k.
std::vector<std::vector<Detection>> postprocess(const HeadOutput& heads, double conf_threshold, double nms_iou,
                                                int image_w, int image_h, int max_detections = 100);

// ---- targets and loss ----------------------------------------------------------

struct GridGeometry {
	int height{0};
	int width{0};
	int stride{8};
	int offset{0}; // first flattened cell index of this level
	int cells() const { return height * width; }
};

std::vector<GridGeometry> make_grids(int image_h, int image_w);

struct TargetSet {
	std::vector<GridGeometry> grids;
	int batch{0};
	int cells{0};             // per image, over all levels
	std::vector<int> assigned; // batch*cells; -1 for negatives, else box index
	std::vector<std::vector<BBox>> boxes;
	int num_positive{0};

	int at(int b, int cell) const { return assigned[static_cast<std::size_t>(b) * cells + cell]; }
	double obj_target(int b, int cell) const { return at(b, cell) >= 0 ? 1.0 : 0.0; }
};

inline constexpr double kCenterRadius = 2.5;

/// A cell is positive for a box when its centre lies strictly inside the box and
/// within kCenterRadius strides of the box centre (per axis). Contested cells go to
/// the smallest box. A box left without cells takes the stride-8 cell holding its centre.
TargetSet assign_targets(const std::vector<Annotation>& annotations, int image_h, int image_w);

/// Scalar focal loss with prob clamped to [1e-12, 1 - 1e-12].
double focal_loss(double prob, int target, double alpha, double gamma);

struct LossOptions {
	bool focal{true}; // objectness: focal (true) or plain BCE
	double alpha{0.25};
	double gamma{2.0};
	double iou_weight{kIouWeight};
};

struct LossBreakdown {
	Tensor iou;              // mean (1 - IoU) over positives
	Tensor cls;              // BCE summed over classes, mean over positives
	Tensor focal;            // objectness term over all cells, normalised by max(1, positives)
	Tensor restoration;      // zero when restoration is off
	Tensor detection_total;  // iou_weight * iou + cls + focal
	Tensor grand_total;      // set by the training objective
	int num_positive{0};

	double value(const Tensor& t) const { return t.defined() ? t.item() : 0.0; }
};

/// Restoration term is zero and grand_total equals detection_total.
LossBreakdown detection_loss(const HeadOutput& heads, const TargetSet& targets, const LossOptions& opts = {});

// ---- interchange ----------------------------------------------------------------

/// One line per detection: image_id class score x_min y_min x_max y_max.
void write_detections(std::ostream& out, const std::string& image_id, const std::vector<Detection>& dets,
                      const datakit::ClassList& classes);
std::map<std::string, std::vector<Detection>> read_detections(std::istream& in, const datakit::ClassList& classes);

} // namespace fogdet::detection
