#include "fogdet/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace fogdet::evalkit {

namespace {

// Greedy matching of one image's detections (already in ranking order).
std::vector<bool> match_image(const std::vector<const Detection*>& dets, const std::vector<BBox>& gts, double thr) {
	std::vector<bool> used(gts.size(), false);
	std::vector<bool> flags;
	flags.reserve(dets.size());
	for (const Detection* d : dets) {
		int best = -1;
		double best_iou = -1.0;
		for (std::size_t g = 0; g < gts.size(); ++g) {
			if (used[g] || gts[g].class_id != d->class_id()) continue;
			const double v = detection::iou(d->box, gts[g]);
			if (v >= thr && v > best_iou) {
				best_iou = v;
				best = static_cast<int>(g);
			}
		}
		if (best >= 0) used[static_cast<std::size_t>(best)] = true;
		flags.push_back(best >= 0);
	}
	return flags;
}

} // namespace

std::vector<bool> match_detections(const std::vector<ImageDetection>& dets,
                                   const std::map<std::string, std::vector<BBox>>& gts, double iou_threshold) {
	std::map<std::string, std::vector<bool>> used;
	std::vector<bool> flags;
	flags.reserve(dets.size());
	static const std::vector<BBox> none;
	for (const ImageDetection& d : dets) {
		auto it = gts.find(d.image_id);
		const auto& boxes = it == gts.end() ? none : it->second;
		auto& u = used[d.image_id];
		u.resize(boxes.size(), false);
		int best = -1;
		double best_iou = -1.0;
		for (std::size_t g = 0; g < boxes.size(); ++g) {
			if (u[g] || boxes[g].class_id != d.det.class_id()) continue;
			const double v = detection::iou(d.det.box, boxes[g]);
			if (v >= iou_threshold && v > best_iou) {
				best_iou = v;
				best = static_cast<int>(g);
			}
		}
		if (best >= 0) u[static_cast<std::size_t>(best)] = true;
		flags.push_back(best >= 0);
	}
	return flags;
}

PrCurve pr_curve(const std::vector<bool>& tp_flags, int num_gt) {
	PrCurve curve;
	curve.reserve(tp_flags.size());
	int tp = 0, fp = 0;
	for (bool f : tp_flags) {
		f ? ++tp : ++fp;
		const double recall = num_gt > 0 ? static_cast<double>(tp) / num_gt : 0.0;
		curve.emplace_back(recall, static_cast<double>(tp) / (tp + fp));
	}
	return curve;
}

std::optional<double> average_precision(const std::vector<bool>& tp_flags, int num_gt, Interpolation mode) {
	if (num_gt <= 0) {
		return std::nullopt;
	}
	const PrCurve curve = pr_curve(tp_flags, num_gt);
	if (mode == Interpolation::ElevenPoint) {
		double ap = 0.0;
		for (int i = 0; i <= 10; ++i) {
			const double t = i / 10.0;
			double p = 0.0;
			for (const auto& [r, pr] : curve) {
				if (r >= t) p = std::max(p, pr);
			}
			ap += p / 11.0;
		}
		return ap;
	}
	std::vector<double> mrec{0.0}, mpre{0.0};
	for (const auto& [r, p] : curve) {
		mrec.push_back(r);
		mpre.push_back(p);
	}
	mrec.push_back(1.0);
	mpre.push_back(0.0);
	for (std::size_t i = mpre.size() - 1; i > 0; --i) {
		mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
	}
	double ap = 0.0;
	for (std::size_t i = 1; i < mrec.size(); ++i) {
		ap += (mrec[i] - mrec[i - 1]) * mpre[i];
	}
	return ap;
}

Accumulator::Accumulator(int num_classes, double iou_threshold, Interpolation mode)
    : num_classes_(num_classes), iou_(iou_threshold), mode_(mode),
      records_(static_cast<std::size_t>(std::max(num_classes, 0))), num_gt_(static_cast<std::size_t>(std::max(num_classes, 0)), 0) {
	if (num_classes < 1) {
		throw InvalidArgument("evaluation needs at least one class");
	}
}

void Accumulator::add_image(const std::vector<Detection>& dets, const std::vector<BBox>& gts) {
	for (const BBox& g : gts) {
		if (g.class_id < 0 || g.class_id >= num_classes_) {
			throw InvalidArgument("ground-truth class id " + std::to_string(g.class_id) + " out of range");
		}
		++num_gt_[static_cast<std::size_t>(g.class_id)];
	}
	std::vector<const Detection*> order;
	for (const Detection& d : dets) {
		if (d.class_id() < 0 || d.class_id() >= num_classes_) {
			throw InvalidArgument("detection class id " + std::to_string(d.class_id()) + " out of range");
		}
		order.push_back(&d);
	}
	std::stable_sort(order.begin(), order.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
	const auto flags = match_image(order, gts, iou_);
	for (std::size_t i = 0; i < order.size(); ++i) {
		records_[static_cast<std::size_t>(order[i]->class_id())].push_back({order[i]->score, flags[i]});
	}
}

void Accumulator::merge(const Accumulator& other) {
	if (other.num_classes_ != num_classes_) {
		throw InvalidArgument("cannot merge accumulators with different class counts");
	}
	for (std::size_t c = 0; c < records_.size(); ++c) {
		records_[c].insert(records_[c].end(), other.records_[c].begin(), other.records_[c].end());
		num_gt_[c] += other.num_gt_[c];
	}
}

EvalResult Accumulator::finalize() const {
	EvalResult r;
	double sum = 0.0;
	int counted = 0;
	for (int c = 0; c < num_classes_; ++c) {
		auto recs = records_[static_cast<std::size_t>(c)];
		std::stable_sort(recs.begin(), recs.end(), [](const Record& a, const Record& b) { return a.score > b.score; });
		std::vector<bool> flags;
		for (const auto& rec : recs) flags.push_back(rec.tp);
		const int ngt = num_gt_[static_cast<std::size_t>(c)];
		r.num_gt[c] = ngt;
		r.num_det[c] = static_cast<int>(flags.size());
		r.pr_curves[c] = pr_curve(flags, ngt);
		if (auto ap = average_precision(flags, ngt, mode_)) {
			r.per_class_ap[c] = *ap;
			sum += *ap;
			++counted;
		}
	}
	r.map_score = counted > 0 ? sum / counted : 0.0;
	return r;
}

EvalResult mean_ap(const std::map<std::string, std::vector<Detection>>& dets,
                   const std::map<std::string, std::vector<BBox>>& gts, int num_classes, double iou_threshold,
                   Interpolation mode) {
	Accumulator acc(num_classes, iou_threshold, mode);
	std::vector<std::string> ids;
	for (const auto& [id, _] : gts) ids.push_back(id);
	for (const auto& [id, _] : dets) ids.push_back(id);
	std::sort(ids.begin(), ids.end());
	ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
	static const std::vector<Detection> no_dets;
	static const std::vector<BBox> no_gts;
	for (const auto& id : ids) {
		auto d = dets.find(id);
		auto g = gts.find(id);
		acc.add_image(d == dets.end() ? no_dets : d->second, g == gts.end() ? no_gts : g->second);
	}
	return acc.finalize();
}

nlohmann::json to_json(const EvalResult& r, const datakit::ClassList& classes) {
	nlohmann::json j;
	j["map"] = r.map_score;
	nlohmann::json per = nlohmann::json::object();
	for (const auto& [c, ap] : r.per_class_ap) {
		const std::string name = c < static_cast<int>(classes.size()) ? classes[static_cast<std::size_t>(c)] : std::to_string(c);
		per[name] = {{"ap", ap}, {"num_gt", r.num_gt.at(c)}, {"num_det", r.num_det.at(c)}};
	}
	j["per_class"] = per;
	return j;
}

std::string format_report(const EvalResult& r, const datakit::ClassList& classes) {
	std::ostringstream out;
	char buf[160];
	std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s\n", "class", "AP", "gt", "dets");
	out << buf;
	for (const auto& [c, ngt] : r.num_gt) {
		const std::string name = c < static_cast<int>(classes.size()) ? classes[static_cast<std::size_t>(c)] : std::to_string(c);
		auto it = r.per_class_ap.find(c);
		if (it == r.per_class_ap.end()) {
			std::snprintf(buf, sizeof buf, "%-12s %8s %8d %8d\n", name.c_str(), "n/a", ngt, r.num_det.at(c));
		} else {
			std::snprintf(buf, sizeof buf, "%-12s %8.4f %8d %8d\n", name.c_str(), it->second, ngt, r.num_det.at(c));
		}
		out << buf;
	}
	std::snprintf(buf, sizeof buf, "mAP@0.5 %.4f\n", r.map_score);
	out << buf;
	return out.str();
}

ImageTensor plot_pr_curve(const PrCurve& curve, int size) {
	ImageTensor img(3, size, size, 1.0);
	const int m = 10;
	const int span = size - 2 * m;
	const Rgb axis{0.2, 0.2, 0.2}, line{0.1, 0.3, 0.9};
	fill_rect(img, m, size - m, size - m, size - m + 1, axis);
	fill_rect(img, m - 1, m, m, size - m, axis);
	auto px = [&](double r) { return m + static_cast<int>(std::lround(r * (span - 1))); };
	auto py = [&](double p) { return size - m - 1 - static_cast<int>(std::lround(p * (span - 1))); };
	for (std::size_t i = 0; i < curve.size(); ++i) {
		const auto [r, p] = curve[i];
		const int x = px(r), y = py(p);
		fill_rect(img, x, y, x + 2, y + 2, line);
		if (i > 0) {
			// vertical segment between consecutive points keeps the curve readable
			const int y0 = py(curve[i - 1].second);
			fill_rect(img, x, std::min(y, y0), x + 1, std::max(y, y0) + 1, line);
		}
	}
	return img;
}

} // namespace fogdet::evalkit
