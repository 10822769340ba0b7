#include "fogdet/detection.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace fogdet::detection {

double iou(const BBox& a, const BBox& b) {
	const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
	const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
	if (iw <= 0 || ih <= 0) {
		return 0.0;
	}
	const double inter = iw * ih;
	const double uni = a.area() + b.area() - inter;
	return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
	std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
	std::vector<Detection> kept;
	for (const Detection& d : dets) {
		const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
			return k.class_id() == d.class_id() && iou(k.box, d.box) > iou_threshold;
		});
		if (!suppressed) kept.push_back(d);
	}
	return kept;
}

// ---- modules -------------------------------------------------------------------

ScConv::ScConv(int channels, Rng& rng, int pool_rate)
    : k1(std::max(1, channels / 2), std::max(1, channels / 2), 3, 1, 1, true, rng),
      k2(std::max(1, channels / 2), std::max(1, channels / 2), 3, 1, 1, true, rng),
      k3(std::max(1, channels / 2), std::max(1, channels / 2), 3, 1, 1, true, rng),
      k4(std::max(1, channels / 2), std::max(1, channels / 2), 3, 1, 1, true, rng), channels_(channels),
      rate_(pool_rate) {
	if (channels % 2 != 0) {
		throw ConfigError("sc-conv needs an even channel count, got " + std::to_string(channels));
	}
	if (pool_rate < 1) {
		throw ConfigError("sc-conv pool rate must be >= 1");
	}
	register_module("k1", k1);
	register_module("k2", k2);
	register_module("k3", k3);
	register_module("k4", k4);
}

Tensor ScConv::forward(const Tensor& x) const {
	if (x.ndim() != 4 || x.dim(1) != channels_) {
		throw ShapeError("sc-conv expects " + std::to_string(channels_) + " channels, got " + shape_str(x.shape()));
	}
	const int half = channels_ / 2;
	const Tensor x1 = ops::slice_channels(x, 0, half);
	const Tensor x2 = ops::slice_channels(x, half, channels_);
	const Tensor coarse = k2.forward(ops::avg_pool2d(x1, rate_));
	const Tensor gate = ops::sigmoid(ops::add(x1, ops::upsample_nearest(coarse, x.dim(2), x.dim(3))));
	const Tensor y1 = k4.forward(ops::mul(k3.forward(x1), gate));
	const Tensor y2 = k1.forward(x2);
	return ops::concat_channels({y1, y2});
}

Neck::Neck(const ModelConfig& cfg, const std::vector<int>& ch, Rng& rng)
    : out_{ch[2], ch[3], ch[4]}, lateral0_(ch[4], ch[3], 1, 1, rng), reduce1_(ch[3], ch[2], 1, 1, rng),
      bu2_(ch[2], ch[2], 3, 2, rng), bu1_(ch[3], ch[3], 3, 2, rng),
      p4_(2 * ch[3], ch[3], cfg.blocks(3), false, rng), p3_(2 * ch[2], ch[2], cfg.blocks(3), false, rng),
      n3_(2 * ch[2], ch[3], cfg.blocks(3), false, rng), n4_(2 * ch[3], ch[4], cfg.blocks(3), false, rng) {
	register_module("lateral0", lateral0_);
	register_module("p4", p4_);
	register_module("reduce1", reduce1_);
	register_module("p3", p3_);
	register_module("bu2", bu2_);
	register_module("n3", n3_);
	register_module("bu1", bu1_);
	register_module("n4", n4_);
}

std::array<Tensor, 3> Neck::forward(const backbone::FeaturePyramid& p) const {
	auto up2 = [](const Tensor& t) { return ops::upsample_nearest(t, 2 * t.dim(2), 2 * t.dim(3)); };
	const Tensor f0 = lateral0_.forward(p.c5);
	const Tensor f4 = p4_.forward(ops::concat_channels({up2(f0), p.c4}));
	const Tensor f1 = reduce1_.forward(f4);
	const Tensor out8 = p3_.forward(ops::concat_channels({up2(f1), p.c3}));
	const Tensor out16 = n3_.forward(ops::concat_channels({bu2_.forward(out8), f1}));
	const Tensor out32 = n4_.forward(ops::concat_channels({bu1_.forward(out16), f0}));
	return {out8, out16, out32};
}

DecoupledHead::DecoupledHead(int in_ch, int width, int num_classes, Rng& rng)
    : stem_(in_ch, width, 1, 1, rng), cls1_(width, width, 3, 1, rng), cls2_(width, width, 3, 1, rng),
      reg1_(width, width, 3, 1, rng), reg2_(width, width, 3, 1, rng), cls_pred_(width, num_classes, 1, 1, 0, true, rng),
      reg_pred_(width, 4, 1, 1, 0, true, rng), obj_pred_(width, 1, 1, 1, 0, true, rng) {
	// Start from a 1% foreground prior so early objectness loss is not swamped by negatives.
	const double prior = -std::log((1.0 - 0.01) / 0.01);
	for (double& v : cls_pred_.bias.data()) v = prior;
	for (double& v : obj_pred_.bias.data()) v = prior;
	register_module("stem", stem_);
	register_module("cls1", cls1_);
	register_module("cls2", cls2_);
	register_module("reg1", reg1_);
	register_module("reg2", reg2_);
	register_module("cls_pred", cls_pred_);
	register_module("reg_pred", reg_pred_);
	register_module("obj_pred", obj_pred_);
}

ScaleOutput DecoupledHead::forward(const Tensor& x, int stride) const {
	const Tensor s = stem_.forward(x);
	const Tensor c = cls2_.forward(cls1_.forward(s));
	const Tensor r = reg2_.forward(reg1_.forward(s));
	return {cls_pred_.forward(c), reg_pred_.forward(r), obj_pred_.forward(r), stride};
}

Detector::Detector(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg), backbone_(cfg, rng), neck_(cfg, backbone_.stage_channels(), rng) {
	register_module("backbone", backbone_);
	register_module("neck", neck_);
	const auto widths = neck_.out_channels();
	for (std::size_t i = 0; i < widths.size(); ++i) {
		if (cfg.use_scconv) {
			scconv_.push_back(std::make_unique<ScConv>(widths[i], rng));
			register_module("scconv" + std::to_string(i), *scconv_.back());
		}
	}
	for (std::size_t i = 0; i < widths.size(); ++i) {
		heads_.push_back(std::make_unique<DecoupledHead>(widths[i], cfg.head_width(), cfg.num_classes, rng));
		register_module("head" + std::to_string(i), *heads_.back());
	}
}

DetectorOutput Detector::forward(const Tensor& images) const {
	DetectorOutput out;
	out.pyramid = backbone_.forward(images);
	const auto fused = neck_.forward(out.pyramid);
	for (std::size_t i = 0; i < fused.size(); ++i) {
		Tensor f = fused[i];
		if (!scconv_.empty()) f = scconv_[i]->forward(f);
		out.heads.scales.push_back(heads_[i]->forward(f, kStrides[i]));
	}
	return out;
}

// ---- box coding ------------------------------------------------------------------

namespace {
constexpr double kMaxLogSize = 15.0;

inline double sigmoid(double x) {
	return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) {
	return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
} // namespace

std::array<double, 4> encode_box(const BBox& box, int gx, int gy, int stride) {
	const double s = stride;
	return {(box.x_min + box.x_max) / 2.0 / s - gx, (box.y_min + box.y_max) / 2.0 / s - gy, std::log(box.width() / s),
	        std::log(box.height() / s)};
}

BBox decode_box(const std::array<double, 4>& reg, int gx, int gy, int stride) {
	const double s = stride;
	const double cx = (gx + reg[0]) * s;
	const double cy = (gy + reg[1]) * s;
	const double w = std::exp(std::min(reg[2], kMaxLogSize)) * s;
	const double h = std::exp(std::min(reg[3], kMaxLogSize)) * s;
	return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, 0};
}

std::vector<std::vector<Detection>> decode_predictions(const HeadOutput& heads, double conf_threshold, int image_w,
                                                       int image_h) {
	const int batch = heads.batch();
	const int nc = heads.num_classes();
	std::vector<std::vector<Detection>> out(static_cast<std::size_t>(std::max(batch, 0)));
	for (const ScaleOutput& so : heads.scales) {
		const int h = so.obj.dim(2), w = so.obj.dim(3);
		const std::size_t plane = static_cast<std::size_t>(h) * w;
		const auto obj = so.obj.data();
		const auto cls = so.cls.data();
		const auto reg = so.reg.data();
		for (int b = 0; b < batch; ++b) {
			for (std::size_t cell = 0; cell < plane; ++cell) {
				const double po = sigmoid(obj[static_cast<std::size_t>(b) * plane + cell]);
				if (po < conf_threshold) continue;
				const int gy = static_cast<int>(cell) / w, gx = static_cast<int>(cell) % w;
				std::array<double, 4> r{};
				for (int k = 0; k < 4; ++k) r[static_cast<std::size_t>(k)] = reg[(static_cast<std::size_t>(b) * 4 + k) * plane + cell];
				BBox box = decode_box(r, gx, gy, so.stride);
				if (image_w > 0 && image_h > 0) {
					auto clipped = datakit::clip_box(box, image_w, image_h);
					if (!clipped) continue;
					box = *clipped;
				}
				for (int c = 0; c < nc; ++c) {
					const double score = po * sigmoid(cls[(static_cast<std::size_t>(b) * nc + c) * plane + cell]);
					if (score < conf_threshold) continue;
					box.class_id = c;
					out[static_cast<std::size_t>(b)].push_back({box, score});
				}
			}
		}
	}
	return out;
}

std::vector<std::vector<Detection>> postprocess(const HeadOutput& heads, double conf_threshold, double nms_iou,
                                                int image_w, int image_h, int max_detections) {
	auto per_image = decode_predictions(heads, conf_threshold, image_w, image_h);
	for (auto& dets : per_image) {
		dets = nms(std::move(dets), nms_iou);
		if (max_detections > 0 && dets.size() > static_cast<std::size_t>(max_detections)) {
			dets.resize(static_cast<std::size_t>(max_detections));
		}
	}
	return per_image;
}

// ---- assignment --------------------------------------------------------------------

std::vector<GridGeometry> make_grids(int image_h, int image_w) {
	std::vector<GridGeometry> grids;
	int offset = 0;
	for (int s : kStrides) {
		GridGeometry g{image_h / s, image_w / s, s, offset};
		offset += g.cells();
		grids.push_back(g);
	}
	return grids;
}

TargetSet assign_targets(const std::vector<Annotation>& annotations, int image_h, int image_w) {
	TargetSet t;
	t.grids = make_grids(image_h, image_w);
	t.batch = static_cast<int>(annotations.size());
	t.cells = t.grids.back().offset + t.grids.back().cells();
	t.assigned.assign(static_cast<std::size_t>(t.batch) * t.cells, -1);
	for (int b = 0; b < t.batch; ++b) {
		const auto& boxes = annotations[static_cast<std::size_t>(b)].boxes;
		t.boxes.push_back(boxes);
		int* row = t.assigned.data() + static_cast<std::size_t>(b) * t.cells;
		std::vector<int> count(boxes.size(), 0);
		for (const GridGeometry& g : t.grids) {
			const double radius = kCenterRadius * g.stride;
			for (int gy = 0; gy < g.height; ++gy) {
				for (int gx = 0; gx < g.width; ++gx) {
					const double cx = (gx + 0.5) * g.stride, cy = (gy + 0.5) * g.stride;
					int best = -1;
					for (std::size_t i = 0; i < boxes.size(); ++i) {
						const BBox& bx = boxes[i];
						const bool inside = cx > bx.x_min && cx < bx.x_max && cy > bx.y_min && cy < bx.y_max;
						const bool near = std::abs(cx - (bx.x_min + bx.x_max) / 2) < radius &&
						                  std::abs(cy - (bx.y_min + bx.y_max) / 2) < radius;
						if (inside && near && (best < 0 || bx.area() < boxes[static_cast<std::size_t>(best)].area())) {
							best = static_cast<int>(i);
						}
					}
					row[g.offset + gy * g.width + gx] = best;
					if (best >= 0) ++count[static_cast<std::size_t>(best)];
				}
			}
		}
		const GridGeometry& fine = t.grids.front();
		for (std::size_t i = 0; i < boxes.size(); ++i) {
			if (count[i] > 0 || !boxes[i].valid()) continue;
			const int gx = std::clamp(static_cast<int>((boxes[i].x_min + boxes[i].x_max) / 2 / fine.stride), 0, fine.width - 1);
			const int gy = std::clamp(static_cast<int>((boxes[i].y_min + boxes[i].y_max) / 2 / fine.stride), 0, fine.height - 1);
			int& slot = row[fine.offset + gy * fine.width + gx];
			if (slot < 0 || boxes[static_cast<std::size_t>(slot)].area() > boxes[i].area()) {
				slot = static_cast<int>(i);
			}
		}
		for (int c = 0; c < t.cells; ++c) {
			if (row[c] >= 0) ++t.num_positive;
		}
	}
	return t;
}

// ---- loss ------------------------------------------------------------------------------

double focal_loss(double prob, int target, double alpha, double gamma) {
	const double p = std::clamp(prob, 1e-12, 1.0 - 1e-12);
	const double pt = target == 1 ? p : 1.0 - p;
	const double a = target == 1 ? alpha : 1.0 - alpha;
	return -a * std::pow(1.0 - pt, gamma) * std::log(pt);
}

namespace {

struct ObjTerm {
	double loss;
	double grad; // d loss / d logit
};

ObjTerm objectness_term(double x, bool positive, const LossOptions& o) {
	if (!o.focal) {
		const double t = positive ? 1.0 : 0.0;
		return {softplus(x) - t * x, sigmoid(x) - t};
	}
	const double p = sigmoid(x);
	if (positive) {
		const double s = softplus(-x); // -ln p
		const double m = std::pow(1.0 - p, o.gamma);
		return {o.alpha * m * s, o.alpha * m * (-o.gamma * p * s - (1.0 - p))};
	}
	const double s = softplus(x); // -ln(1-p)
	const double m = std::pow(p, o.gamma);
	return {(1.0 - o.alpha) * m * s, (1.0 - o.alpha) * m * (p + o.gamma * (1.0 - p) * s)};
}

// 1 - IoU of the decoded prediction against gt, with d/d(reg) written into g.
double iou_term(const std::array<double, 4>& r, int gx, int gy, int stride, const BBox& gt, std::array<double, 4>& g) {
	const double s = stride;
	const double w = std::exp(std::min(r[2], kMaxLogSize)) * s;
	const double h = std::exp(std::min(r[3], kMaxLogSize)) * s;
	const double cx = (gx + r[0]) * s, cy = (gy + r[1]) * s;
	const double px1 = cx - w / 2, px2 = cx + w / 2, py1 = cy - h / 2, py2 = cy + h / 2;
	const double iw = std::min(px2, gt.x_max) - std::max(px1, gt.x_min);
	const double ih = std::min(py2, gt.y_max) - std::max(py1, gt.y_min);
	g = {0, 0, 0, 0};
	if (iw <= 0 || ih <= 0) {
		return 1.0;
	}
	const double inter = iw * ih;
	const double ap = w * h;
	const double u = ap + gt.area() - inter;
	const double value = inter / u;
	// dIoU = dinter * (1/u + inter/u^2) - dAp * inter/u^2
	const double ki = 1.0 / u + inter / (u * u);
	const double ka = inter / (u * u);
	const double d_inter_x1 = px1 > gt.x_min ? -ih : 0.0;
	const double d_inter_x2 = px2 < gt.x_max ? ih : 0.0;
	const double d_inter_y1 = py1 > gt.y_min ? -iw : 0.0;
	const double d_inter_y2 = py2 < gt.y_max ? iw : 0.0;
	const double dx1 = ki * d_inter_x1 + ka * h;
	const double dx2 = ki * d_inter_x2 - ka * h;
	const double dy1 = ki * d_inter_y1 + ka * w;
	const double dy2 = ki * d_inter_y2 - ka * w;
	// x1 = cx - w/2, x2 = cx + w/2; cx = (gx + r0) s, w = exp(r2) s.
	const double dcx = dx1 + dx2, dcy = dy1 + dy2;
	const double dw = (dx2 - dx1) / 2, dh = (dy2 - dy1) / 2;
	// gradient of (1 - IoU)
	g[0] = -dcx * s;
	g[1] = -dcy * s;
	g[2] = r[2] < kMaxLogSize ? -dw * w : 0.0;
	g[3] = r[3] < kMaxLogSize ? -dh * h : 0.0;
	return 1.0 - value;
}

} // namespace

LossBreakdown detection_loss(const HeadOutput& heads, const TargetSet& targets, const LossOptions& opts) {
	if (heads.scales.size() != targets.grids.size()) {
		throw ShapeError("detection_loss: head has " + std::to_string(heads.scales.size()) + " levels, targets have " +
		                 std::to_string(targets.grids.size()));
	}
	const int batch = heads.batch();
	const int nc = heads.num_classes();
	if (batch != targets.batch) {
		throw ShapeError("detection_loss: batch mismatch between heads and targets");
	}
	std::vector<Tensor> inputs;
	std::vector<std::vector<double>> grads;
	std::vector<int> term_of;
	double l_iou = 0, l_cls = 0, l_obj = 0;
	const int npos = targets.num_positive;
	const double obj_norm = std::max(1, npos);
	const double pos_norm = npos > 0 ? static_cast<double>(npos) : 1.0;

	for (std::size_t lvl = 0; lvl < heads.scales.size(); ++lvl) {
		const ScaleOutput& so = heads.scales[lvl];
		const GridGeometry& geo = targets.grids[lvl];
		if (so.obj.dim(2) != geo.height || so.obj.dim(3) != geo.width || so.stride != geo.stride) {
			throw ShapeError("detection_loss: level " + std::to_string(lvl) + " geometry mismatch");
		}
		const std::size_t plane = static_cast<std::size_t>(geo.cells());
		std::vector<double> g_reg(so.reg.numel(), 0.0), g_cls(so.cls.numel(), 0.0), g_obj(so.obj.numel(), 0.0);
		const auto reg = so.reg.data();
		const auto cls = so.cls.data();
		const auto obj = so.obj.data();
		for (int b = 0; b < batch; ++b) {
			for (std::size_t cell = 0; cell < plane; ++cell) {
				const int a = targets.at(b, geo.offset + static_cast<int>(cell));
				const std::size_t oi = static_cast<std::size_t>(b) * plane + cell;
				const ObjTerm ot = objectness_term(obj[oi], a >= 0, opts);
				l_obj += ot.loss;
				g_obj[oi] = ot.grad / obj_norm;
				if (a < 0) continue;
				const BBox& gt = targets.boxes[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)];
				const int gy = static_cast<int>(cell) / geo.width, gx = static_cast<int>(cell) % geo.width;
				std::array<double, 4> r{}, gr{};
				for (int k = 0; k < 4; ++k) r[static_cast<std::size_t>(k)] = reg[(static_cast<std::size_t>(b) * 4 + k) * plane + cell];
				l_iou += iou_term(r, gx, gy, geo.stride, gt, gr);
				for (int k = 0; k < 4; ++k) {
					g_reg[(static_cast<std::size_t>(b) * 4 + k) * plane + cell] = gr[static_cast<std::size_t>(k)] / pos_norm;
				}
				for (int c = 0; c < nc; ++c) {
					const std::size_t ci = (static_cast<std::size_t>(b) * nc + c) * plane + cell;
					const double t = c == gt.class_id ? 1.0 : 0.0;
					l_cls += softplus(cls[ci]) - t * cls[ci];
					g_cls[ci] = (sigmoid(cls[ci]) - t) / pos_norm;
				}
			}
		}
		inputs.push_back(so.reg);
		grads.push_back(std::move(g_reg));
		term_of.push_back(0);
		inputs.push_back(so.cls);
		grads.push_back(std::move(g_cls));
		term_of.push_back(1);
		inputs.push_back(so.obj);
		grads.push_back(std::move(g_obj));
		term_of.push_back(2);
	}

	std::vector<double> values{npos > 0 ? l_iou / npos : 0.0, npos > 0 ? l_cls / npos : 0.0, l_obj / obj_norm};
	const Tensor terms = autograd::make_result({3}, std::move(values), inputs,
	                                           [grads = std::move(grads), term_of](TensorImpl& self) {
		                                           for (std::size_t i = 0; i < self.parents.size(); ++i) {
			                                           if (!autograd::wants_grad(self.parents[i])) continue;
			                                           const double up = self.grad[static_cast<std::size_t>(term_of[i])];
			                                           if (up == 0.0) continue;
			                                           double* dst = self.parents[i]->grad_buffer();
			                                           const auto& g = grads[i];
			                                           for (std::size_t j = 0; j < g.size(); ++j) dst[j] += up * g[j];
		                                           }
	                                           });

	LossBreakdown out;
	const std::array<double, 3> pick_iou{1, 0, 0}, pick_cls{0, 1, 0}, pick_obj{0, 0, 1};
	const std::array<double, 3> combine{opts.iou_weight, 1.0, 1.0};
	out.iou = ops::weighted_sum(terms, pick_iou);
	out.cls = ops::weighted_sum(terms, pick_cls);
	out.focal = ops::weighted_sum(terms, pick_obj);
	out.detection_total = ops::weighted_sum(terms, combine);
	out.restoration = Tensor::scalar(0.0);
	out.grand_total = out.detection_total;
	out.num_positive = npos;
	return out;
}

// ---- interchange ----------------------------------------------------------------------

void write_detections(std::ostream& out, const std::string& image_id, const std::vector<Detection>& dets,
                      const datakit::ClassList& classes) {
	const auto old_prec = out.precision(std::numeric_limits<double>::max_digits10);
	for (const Detection& d : dets) {
		if (d.class_id() < 0 || d.class_id() >= static_cast<int>(classes.size())) {
			throw InvalidArgument("write_detections: class id " + std::to_string(d.class_id()) + " out of range");
		}
		out << image_id << ' ' << classes[static_cast<std::size_t>(d.class_id())] << ' ' << d.score << ' ' << d.box.x_min
		    << ' ' << d.box.y_min << ' ' << d.box.x_max << ' ' << d.box.y_max << '\n';
	}
	out.precision(old_prec);
}

std::map<std::string, std::vector<Detection>> read_detections(std::istream& in, const datakit::ClassList& classes) {
	std::map<std::string, std::vector<Detection>> out;
	std::string line;
	int lineno = 0;
	while (std::getline(in, line)) {
		++lineno;
		if (line.empty() || line[0] == '#') continue;
		std::istringstream ss(line);
		std::string id, cls;
		Detection d;
		if (!(ss >> id >> cls >> d.score >> d.box.x_min >> d.box.y_min >> d.box.x_max >> d.box.y_max)) {
			throw ParseError("detection line needs 7 fields", lineno);
		}
		auto it = std::find(classes.begin(), classes.end(), cls);
		if (it == classes.end()) {
			throw ParseError("unknown class '" + cls + "'", lineno);
		}
		d.box.class_id = static_cast<int>(it - classes.begin());
		out[id].push_back(d);
	}
	return out;
}

} // namespace fogdet::detection
