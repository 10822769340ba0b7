// Acceptance gate: criteria 1-8, one PASS/FAIL line each.
// Usage: acceptance [N ...]   (no arguments runs everything, 7 last)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "fogdet/checkpoint.hpp"
#include "fogdet/dtfe.hpp"
#include "fogdet/evalkit.hpp"
#include "fogdet/training.hpp"
#include "fogdet/weathersim.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace fogdet;
namespace fs = std::filesystem;
using testing::check_all;
using testing::check_some;
using testing::rand_tensor;
using testing::readout;

namespace {

struct Outcome {
	bool ok{true};
	std::vector<std::string> failures;
	std::ostringstream detail;

	void check(bool cond, const std::string& what) {
		if (cond) return;
		ok = false;
		if (failures.size() < 5) failures.push_back(what);
	}
};

std::string fmt(double v) {
	std::ostringstream s;
	s.precision(4);
	s << v;
	return s.str();
}

ImageTensor random_image(int w, int h, Rng& rng) {
	std::uniform_real_distribution<double> u(0.0, 1.0);
	ImageTensor img(3, h, w);
	for (double& v : img.data) v = u(rng);
	return img;
}

// ---- 1 ---------------------------------------------------------------------------------

void fog_model(Outcome& o) {
	using namespace weathersim;
	Rng rng(101);
	std::uniform_real_distribution<double> a(0.3, 0.7);
	double worst = 0.0;
	for (int i = 0; i < 10; ++i) {
		const ImageTensor img = random_image(160, 160, rng);
		const FogParams p{a(rng), sample_beta(kTestBetaRange, rng)};
		const InversionResult r = invert_fog(apply_fog(img, p), p);
		const TransmissionMap t = compute_transmission(compute_depth(160, 160), p.beta);
		for (int y = 0; y < 160; ++y)
			for (int x = 0; x < 160; ++x) {
				const bool trusted = r.trusted[static_cast<std::size_t>(y) * 160 + x];
				o.check(trusted == (t.at(y, x) >= kTransmissionFloor), "trusted mask disagrees with t >= 0.05");
				if (!trusted) continue;
				for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(r.image.at(c, y, x) - img.at(c, y, x)));
			}
	}
	o.check(worst < 1e-6, "round trip error " + fmt(worst));

	const ImageTensor img = random_image(160, 160, rng);
	o.check(apply_fog(img, {0.5, 0.0}).data == img.data, "beta 0 apply is not the identity");
	o.check(invert_fog(img, {0.5, 0.0}).image.data == img.data, "beta 0 invert is not the identity");

	double fixed = 0.0;
	for (double airlight : {0.2, 0.5, 0.9}) {
		const ImageTensor flat(3, 160, 160, airlight);
		for (double b : {0.05, 0.1, 0.14})
			for (double v : apply_fog(flat, {airlight, b}).data) fixed = std::max(fixed, std::abs(v - airlight));
	}
	o.check(fixed < 1e-12, "J = A moved by " + fmt(fixed));

	// 160 is even: the four pixels around (79.5, 79.5) share the smallest transmission
	for (double b : {0.05, 0.1, 0.14}) {
		const TransmissionMap t = compute_transmission(compute_depth(160, 160), b);
		const double lo = *std::min_element(t.values.begin(), t.values.end());
		o.check(t.at(79, 79) == lo && t.at(80, 80) == lo && t.at(79, 80) == lo && t.at(80, 79) == lo,
		        "centre transmission is not minimal");
		o.check(t.at(0, 0) > lo, "corner transmission not above centre");
	}
	o.detail << "round trip " << fmt(worst);
}

// ---- 2 ---------------------------------------------------------------------------------

Tensor offsets_filled(int n, int k, int h, int w, double dy, double dx) {
	Tensor off = Tensor::zeros({n, 2 * k * k, h, w}, true);
	for (int b = 0; b < n; ++b)
		for (int t = 0; t < k * k; ++t)
			for (int i = 0; i < h * w; ++i) {
				off[((static_cast<std::size_t>(b) * 2 * k * k + 2 * t) * h * w) + i] = dy;
				off[((static_cast<std::size_t>(b) * 2 * k * k + 2 * t + 1) * h * w) + i] = dx;
			}
	return off;
}

void deform_conv(Outcome& o) {
	Rng rng(102);
	double zero = 0.0;
	for (int trial = 0; trial < 5; ++trial) {
		Tensor x = rand_tensor({2, 3, 6 + trial, 5}, rng);
		Tensor w = rand_tensor({4, 3, 3, 3}, rng);
		Tensor b = rand_tensor({4}, rng);
		Tensor y = dtfe::deform_conv2d(x, offsets_filled(2, 3, 6 + trial, 5, 0, 0), w, b, 1, 1);
		Tensor ref = ops::conv2d(x, w, b, 1, 1);
		for (std::size_t i = 0; i < y.numel(); ++i) zero = std::max(zero, std::abs(y[i] - ref[i]));
	}
	o.check(zero < 1e-5, "zero-offset diff " + fmt(zero));

	// offset (dy, dx) on every tap reads x shifted by (dy, dx); compare away from the border
	double shift = 0.0;
	const int h = 9, w = 8;
	for (auto [dy, dx] : {std::pair{0, 1}, std::pair{1, 0}, std::pair{-1, 1}}) {
		Tensor x = rand_tensor({1, 2, h, w}, rng);
		Tensor wt = rand_tensor({3, 2, 3, 3}, rng);
		Tensor y = dtfe::deform_conv2d(x, offsets_filled(1, 3, h, w, dy, dx), wt, Tensor(), 1, 1);
		Tensor shifted = Tensor::zeros({1, 2, h, w});
		for (int c = 0; c < 2; ++c)
			for (int i = 0; i < h; ++i)
				for (int j = 0; j < w; ++j) {
					const int si = i + dy, sj = j + dx;
					if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
					shifted[(static_cast<std::size_t>(c) * h + i) * w + j] = x[(static_cast<std::size_t>(c) * h + si) * w + sj];
				}
		Tensor ref = ops::conv2d(shifted, wt, Tensor(), 1, 1);
		for (int oc = 0; oc < 3; ++oc)
			for (int i = 2; i < h - 2; ++i)
				for (int j = 2; j < w - 2; ++j) {
					const std::size_t idx = (static_cast<std::size_t>(oc) * h + i) * w + j;
					shift = std::max(shift, std::abs(y[idx] - ref[idx]));
				}
	}
	o.check(shift < 1e-12, "uniform-shift diff " + fmt(shift));

	double grad = 0.0;
	for (int trial = 0; trial < 3; ++trial) {
		Tensor x = rand_tensor({1, 1 + trial, 5, 5}, rng);
		Tensor off = rand_tensor({1, 18, 5, 5}, rng, -1.5, 1.5);
		Tensor wt = rand_tensor({2, 1 + trial, 3, 3}, rng);
		Tensor b = rand_tensor({2}, rng);
		grad = std::max(grad, check_all([&] { return readout(dtfe::deform_conv2d(x, off, wt, b, 1, 1)); }, {x, off, wt, b}));
	}
	o.check(grad < 1e-3, "gradient rel error " + fmt(grad));
	o.detail << "zero-offset " << fmt(zero) << ", grad " << fmt(grad);
}

// ---- 3 ---------------------------------------------------------------------------------

void zero_matching(const nn::Module& m, const std::vector<std::string>& prefixes) {
	for (auto& p : m.named_parameters())
		for (const auto& pre : prefixes)
			if (p.path.rfind(pre, 0) == 0) {
				Tensor t = p.tensor;
				for (double& v : t.data()) v = 0.0;
			}
}

void jitter(const nn::Module& m, const std::string& prefix, double scale, Rng& rng) {
	std::normal_distribution<double> n(0.0, scale);
	for (auto& p : m.named_parameters()) {
		if (p.path.rfind(prefix, 0) != 0) continue;
		Tensor t = p.tensor;
		for (double& v : t.data()) v += n(rng);
	}
}

void attention(Outcome& o) {
	Rng rng(103);
	double row_err = 0.0;
	{
		dtfe::TransformerEnhancement tfe(16, 5, 5, 4, 4, rng);
		dtfe::AttentionTrace trace;
		tfe.forward(rand_tensor({2, 16, 5, 5}, rng, -4, 4), &trace);
		const int rows = trace.attention.dim(0) * trace.attention.dim(1), t = trace.attention.dim(2);
		for (int r = 0; r < rows; ++r) {
			double s = 0;
			for (int j = 0; j < t; ++j) {
				const double p = trace.attention[static_cast<std::size_t>(r) * t + j];
				o.check(p >= 0.0, "negative attention weight");
				s += p;
			}
			row_err = std::max(row_err, std::abs(s - 1.0));
		}
	}
	o.check(row_err <= 1e-6, "softmax row sum off by " + fmt(row_err));

	{
		dtfe::TransformerEnhancement tfe(8, 3, 3, 2, 4, rng);
		zero_matching(tfe, {"q.", "k.", "v.", "proj.", "fc1.", "fc2.", "pos_embed"});
		Tensor x = rand_tensor({2, 8, 3, 3}, rng);
		Tensor y = tfe.forward(x);
		bool same = true;
		for (std::size_t i = 0; i < x.numel(); ++i) same = same && y[i] == x[i];
		o.check(same, "zeroed block is not the identity");
	}

	{
		dtfe::TransformerEnhancement tfe(8, 1, 1, 2, 2, rng);
		dtfe::AttentionTrace trace;
		tfe.forward(rand_tensor({3, 8, 1, 1}, rng), &trace);
		for (double p : trace.attention.data()) o.check(std::abs(p - 1.0) < 1e-15, "single-token weight is not 1");
		o.check(trace.context.numel() == trace.values.numel(), "single-token context shape");
		double d = 0.0;
		for (std::size_t i = 0; i < trace.values.numel() && i < trace.context.numel(); ++i)
			d = std::max(d, std::abs(trace.context[i] - trace.values[i]));
		o.check(d < 1e-13, "single-token context differs from values by " + fmt(d));
	}

	double grad = 0.0;
	for (int trial = 0; trial < 2; ++trial) {
		dtfe::Dtfe block(8, 3, 3, 2, 2, rng);
		// keep offsets away from the bilinear kinks at integer positions
		jitter(block, "dft.deform1.offset", 0.3, rng);
		jitter(block, "dft.deform2.offset", 0.3, rng);
		Tensor x = rand_tensor({2, 8, 3, 3}, rng);
		std::vector<Tensor> inputs{x};
		for (auto& p : block.named_parameters()) inputs.push_back(p.tensor);
		grad = std::max(grad, check_some([&] { return readout(block.forward(x)); }, inputs, 6, rng));
	}
	o.check(grad < 1e-2, "DTFE gradient rel error " + fmt(grad));
	o.detail << "row sum " << fmt(row_err) << ", grad " << fmt(grad);
}

// ---- 4, 6 --------------------------------------------------------------------------------

training::TrainConfig desk_config() {
	training::TrainConfig cfg;
	cfg.model.width = 0.125;
	cfg.flags = training::variant_flags(training::Variant::V4);
	return cfg;
}

const std::vector<datakit::PairedSample>& toy() {
	static const auto data = [] {
		Rng rng(5);
		return datakit::synthesize_toy_pairs(rng, datakit::SceneConfig{}, 8, weathersim::kTrainBetaRange, 0.5, "t");
	}();
	return data;
}

datakit::Batch first_batch(int n) {
	Rng r(1);
	const std::vector<datakit::PairedSample> sub(toy().begin(), toy().begin() + n);
	datakit::BatchIterator it(sub, n, 160, r, false);
	return *it.next();
}

void loss_arithmetic(Outcome& o) {
	using training::total_loss;
	detection::LossBreakdown b;
	b.detection_total = Tensor::from_data({1}, {3.7}, true);
	Tensor re = Tensor::from_data({1}, {0.45}, true);
	o.check(total_loss(b, re, {0.2, 0.8}).item() == 0.2 * 3.7 + 0.8 * 0.45, "total_loss arithmetic");

	const training::TrainConfig cfg = desk_config();
	o.check(cfg.weights.detection == 0.2 && cfg.weights.restoration == 0.8, "default weights are not (0.2, 0.8)");
	training::JointModel m(cfg.model_config(), true, 3);
	training::Trainer tr(cfg, m);
	const training::LossValues v = tr.compute_gradients(first_batch(2));
	o.check(v.restoration > 0.0, "restoration term missing");
	o.check(v.detection_total == 5.0 * v.iou + v.cls + v.focal, "detection_total != 5 iou + cls + focal");
	o.check(v.grand_total == 0.2 * v.detection_total + 0.8 * v.restoration, "grand_total != 0.2 det + 0.8 re");

	double focal = 0.0;
	for (double p = 0.01; p < 1.0; p += 0.01)
		for (double alpha : {0.25, 0.5, 0.75}) {
			focal = std::max(focal, std::abs(detection::focal_loss(p, 1, alpha, 0.0) + alpha * std::log(p)));
			focal = std::max(focal, std::abs(detection::focal_loss(p, 0, alpha, 0.0) + (1 - alpha) * std::log(1 - p)));
		}
	o.check(focal < 1e-7, "focal gamma 0 vs alpha-BCE " + fmt(focal));

	Rng rng(104);
	Tensor pred = rand_tensor({2, 3, 6, 5}, rng);
	Tensor clean = Tensor::uniform({2, 3, 6, 5}, 0.0, 1.0, rng);
	restoration::restoration_loss({pred}, clean).backward();
	const double n = static_cast<double>(pred.numel());
	double g = 0.0;
	for (std::size_t i = 0; i < pred.numel(); ++i) {
		const double want = 2.0 * (pred[i] - (2 * clean[i] - 1)) / n;
		g = std::max(g, std::abs(std::as_const(pred).grad()[i] - want) / std::max(1e-12, std::abs(want)));
	}
	o.check(g < 1e-12, "restoration gradient rel error " + fmt(g));
	o.detail << "grand_total " << v.grand_total << ", focal " << fmt(focal);
}

std::vector<double> grads(const std::vector<nn::NamedParameter>& params) {
	std::vector<double> out;
	for (const auto& p : params) {
		const auto g = std::as_const(p.tensor).grad();
		if (g.empty())
			out.insert(out.end(), p.tensor.numel(), 0.0);
		else
			out.insert(out.end(), g.begin(), g.end());
	}
	return out;
}

void training_sanity(Outcome& o) {
	using namespace training;
	{
		TrainConfig cfg = desk_config();
		JointModel m(cfg.model_config(), true, 0);
		Trainer tr(cfg, m);
		const datakit::Batch batch = first_batch(8);
		double first = 0.0, last = 0.0;
		for (int s = 0; s < 50; ++s) {
			const double v = tr.train_step(batch, cfg.base_lr).grand_total;
			if (s == 0) first = v;
			last = v;
		}
		o.check(last <= 0.5 * first, "overfit " + fmt(first) + " -> " + fmt(last));
		o.detail << "overfit " << fmt(first) << " -> " << fmt(last);
	}
	{
		TrainConfig cfg = desk_config();
		cfg.epochs = 2;
		cfg.batch_size = 4;
		auto run = [&] {
			JointModel m(cfg.model_config(), true, cfg.seed);
			return fit(cfg, m, toy(), nullptr);
		};
		const TrainResult a = run(), b = run();
		bool same = a.trajectory.size() == b.trajectory.size() && !a.trajectory.empty();
		for (std::size_t i = 0; same && i < a.trajectory.size(); ++i)
			same = std::memcmp(&a.trajectory[i], &b.trajectory[i], sizeof(LossValues)) == 0;
		o.check(same, "trajectories differ");
	}
	{
		TrainConfig cfg = desk_config();
		cfg.weights = {1.0, 0.0};
		const datakit::Batch batch = first_batch(2);
		JointModel with(cfg.model_config(), true, 6);
		Trainer(cfg, with).compute_gradients(batch);
		TrainConfig off = cfg;
		off.flags.restoration = false;
		JointModel without(off.model_config(), false, 6);
		Trainer(off, without).compute_gradients(batch);
		const auto ga = grads(with.detector().named_parameters()), gb = grads(without.detector().named_parameters());
		double diff = ga.size() == gb.size() ? 0.0 : 1.0;
		for (std::size_t i = 0; i < std::min(ga.size(), gb.size()); ++i)
			diff = std::max(diff, std::abs(ga[i] - gb[i]) / std::max(1e-15, std::abs(gb[i])));
		o.check(diff < 1e-12, "lambda2 = 0 detector gradients differ by " + fmt(diff));
		for (double g : grads(with.decoder()->named_parameters())) o.check(g == 0.0, "decoder got a gradient at lambda2 = 0");
	}
	{
		TrainConfig cfg = desk_config();
		cfg.weights = {0.0, 0.8};
		JointModel m(cfg.model_config(), true, 7);
		Trainer(cfg, m).compute_gradients(first_batch(2));
		double backbone = 0.0, rest = 0.0;
		for (const auto& p : m.detector().named_parameters()) {
			double s = 0.0;
			for (double v : std::as_const(p.tensor).grad()) s += v * v;
			(p.path.starts_with("backbone.") ? backbone : rest) += s;
		}
		o.check(backbone > 0.0, "lambda1 = 0 leaves the backbone without gradient");
		o.check(rest == 0.0, "lambda1 = 0 reaches detection-only parameters");
	}
}

// ---- 5 ---------------------------------------------------------------------------------

using Dets = std::map<std::string, std::vector<detection::Detection>>;
using Gts = std::map<std::string, std::vector<datakit::BBox>>;

datakit::BBox random_box(std::mt19937_64& rng, int classes, double extent = 40.0) {
	std::uniform_real_distribution<double> pos(0.0, extent), size(4.0, 16.0);
	std::uniform_int_distribution<int> cls(0, classes - 1);
	const double x = pos(rng), y = pos(rng);
	return {x, y, x + size(rng), y + size(rng), cls(rng)};
}

void evaluation(Outcome& o) {
	std::mt19937_64 rng(105);
	double worst = 0.0;
	for (int trial = 0; trial < 200; ++trial) {
		std::uniform_int_distribution<int> nimg(1, 3), ncls(1, 3), nbox(0, 5), coin(0, 2);
		std::uniform_real_distribution<double> s(0.0, 1.0), j(-4.0, 4.0);
		const int classes = ncls(rng);
		Dets dets;
		Gts gts;
		const int images = nimg(rng);
		for (int i = 0; i < images; ++i) {
			const std::string id = "img" + std::to_string(i);
			auto& g = gts[id];
			for (int k = nbox(rng); k > 0; --k) g.push_back(random_box(rng, classes));
			auto& d = dets[id];
			for (const auto& b : g)
				for (int r = coin(rng); r > 0; --r) {
					datakit::BBox nb{b.x_min + j(rng), b.y_min + j(rng), b.x_max + j(rng), b.y_max + j(rng), b.class_id};
					d.push_back({nb.valid() ? nb : b, s(rng)});
				}
			for (int r = coin(rng); r > 0; --r) d.push_back({random_box(rng, classes), s(rng)});
		}
		const double ours = evalkit::mean_ap(dets, gts, classes).map_score;
		worst = std::max(worst, std::abs(ours - oracle::map_brute(dets, gts, classes)));
	}
	o.check(worst <= 1e-9, "mAP vs brute force " + fmt(worst));

	int mismatched = 0;
	std::uniform_int_distribution<int> count(0, 12), cls(0, 2);
	std::uniform_real_distribution<double> score(0.0, 1.0), thr(0.1, 0.8);
	for (int set = 0; set < 100; ++set) {
		std::vector<detection::Detection> d;
		for (int i = set < 5 ? 5 : count(rng); i > 0; --i) d.push_back({random_box(rng, 3, 30.0), score(rng)});
		for (auto& det : d) det.box.class_id = cls(rng);
		const double t = thr(rng);
		const auto got = detection::nms(d, t), want = oracle::nms(d, t);
		bool same = got.size() == want.size();
		for (std::size_t i = 0; same && i < got.size(); ++i) same = got[i].box == want[i].box && got[i].score == want[i].score;
		mismatched += same ? 0 : 1;
	}
	o.check(mismatched == 0, std::to_string(mismatched) + " NMS sets differ");

	using detection::iou;
	o.check(iou({0, 0, 2, 2, 0}, {0, 0, 2, 2, 0}) == 1.0, "iou identical != 1");
	o.check(iou({0, 0, 2, 2, 0}, {3, 3, 4, 4, 0}) == 0.0, "iou disjoint != 0");
	o.check(iou({0, 0, 2, 2, 0}, {1, 1, 3, 3, 0}) == 1.0 / 7.0, "iou overlap != 1/7");
	o.detail << "mAP diff " << fmt(worst) << ", nms mismatches " << mismatched;
}

// ---- 7 ---------------------------------------------------------------------------------

void ablation(Outcome& o) {
	using namespace training;
	Rng rng(2024);
	const datakit::SceneConfig sc;
	const auto train = datakit::synthesize_toy_pairs(rng, sc, 500, weathersim::kTrainBetaRange, 0.5, "train");
	const auto test = datakit::synthesize_toy_pairs(rng, sc, 100, weathersim::kTestBetaRange, 0.5, "test");
	TrainConfig cfg;
	cfg.model.width = 0.125;
	o.check(cfg.epochs == 20, "expected 20 epochs");
	const GridReport r = run_ablation({Variant::Base, Variant::V1, Variant::V4}, {0, 1, 2}, cfg, train, test, [](const RunRow& row) {
		std::cout << "  " << row.label << " seed " << row.seed << ": mAP " << row.map << " (" << fmt(row.seconds) << " s)"
		          << std::endl;
	});
	std::map<std::string, double> mean;
	for (const auto& [label, m] : r.means()) mean[label] = m;
	o.check(mean.at("V1") >= mean.at("Base"), "V1 " + fmt(mean.at("V1")) + " < Base " + fmt(mean.at("Base")));
	o.check(mean.at("V4") >= mean.at("Base"), "V4 " + fmt(mean.at("V4")) + " < Base " + fmt(mean.at("Base")));
	o.detail << "mean mAP Base " << fmt(mean.at("Base")) << ", V1 " << fmt(mean.at("V1")) << ", V4 " << fmt(mean.at("V4"));
}

// ---- 8 ---------------------------------------------------------------------------------

void stripped_checkpoint(Outcome& o) {
	const fs::path base = fs::temp_directory_path() / "fogdet_acceptance_strip";
	fs::remove_all(base);
	fs::create_directories(base);
	std::ostringstream out, err;
	auto run = [&](std::vector<std::string> args) {
		const int code = cli::run(args, out, err);
		o.check(code == 0, args[0] + " exited " + std::to_string(code) + ": " + err.str().substr(0, 200));
		return code == 0;
	};
	const std::string ds = (base / "ds").string(), ckpt = (base / "run" / "model.ckpt").string(),
	                  slim = (base / "slim.ckpt").string();
	if (!run({"make-dataset", "--out", ds, "--train", "6", "--test", "3", "--seed", "3"})) return;
	if (!run({"train", "--data", ds, "--out", (base / "run").string(), "--checkpoint-every", "0", "--set", "model.width=0.125",
	          "--set", "train.epochs=1", "--set", "train.batch_size=3"}))
		return;
	if (!run({"strip-checkpoint", "--input", ckpt, "--output", slim})) return;
	const Checkpoint full = load_checkpoint(ckpt), stripped = load_checkpoint(slim);
	int dropped = 0;
	for (const auto& [k, _] : full.tensors) dropped += k.starts_with("restoration.") ? 1 : 0;
	for (const auto& [k, _] : stripped.tensors) o.check(!k.starts_with("restoration."), "restoration tensor left: " + k);
	o.check(dropped > 0, "trained checkpoint had no restoration tensors");
	run({"infer", "--checkpoint", slim, "--input", ds, "--out", (base / "infer").string(), "--conf", "0.001"});
	o.check(fs::exists(base / "infer" / "detections.txt"), "infer wrote no detections.txt");
	run({"eval", "--checkpoint", slim, "--data", ds, "--out", (base / "eval").string()});
	o.check(out.str().find("mAP@0.5") != std::string::npos, "eval printed no mAP");
	o.detail << dropped << " restoration tensors stripped";
}

struct Criterion {
	int id;
	double budget_s;
	void (*body)(Outcome&);
};

} // namespace

int main(int argc, char** argv) {
	const std::vector<Criterion> all{{1, 30, fog_model},        {2, 60, deform_conv},     {3, 60, attention},
	                                 {4, 10, loss_arithmetic},  {5, 60, evaluation},      {6, 300, training_sanity},
	                                 {8, 60, stripped_checkpoint}, {7, 4 * 3600, ablation}};
	std::vector<int> only;
	for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

	int failed = 0;
	for (const auto& c : all) {
		if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
		Outcome o;
		const auto t0 = std::chrono::steady_clock::now();
		try {
			c.body(o);
		} catch (const std::exception& e) {
			o.check(false, std::string("exception: ") + e.what());
		}
		const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
		o.check(s < c.budget_s, "over budget (" + fmt(c.budget_s) + " s)");
		std::cout << "criterion " << c.id << ": " << (o.ok ? "PASS" : "FAIL") << " (";
		if (!o.detail.str().empty()) std::cout << o.detail.str() << ", ";
		std::cout << fmt(s) << " s)";
		for (const auto& f : o.failures) std::cout << "\n  " << f;
		std::cout << std::endl;
		failed += o.ok ? 0 : 1;
	}
	return failed == 0 ? 0 : 1;
}
