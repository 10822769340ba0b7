#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "fogdet/training.hpp"

using namespace fogdet;
using namespace fogdet::training;

namespace {

TrainConfig desk_config(Variant v = Variant::V4) {
	TrainConfig cfg;
	cfg.model.width = 0.125;
	cfg.flags = variant_flags(v);
	return cfg;
}

const std::vector<datakit::PairedSample>& toy(int n = 8) {
	static std::map<int, std::vector<datakit::PairedSample>> cache;
	auto it = cache.find(n);
	if (it == cache.end()) {
		Rng rng(5);
		it = cache.emplace(n, datakit::synthesize_toy_pairs(rng, datakit::SceneConfig{}, n, {0.07, 0.12}, 0.5, "t")).first;
	}
	return it->second;
}

datakit::Batch first_batch(int n) {
	Rng r(1);
	datakit::BatchIterator it(toy(n), n, 160, r, false);
	return *it.next();
}

std::map<std::string, std::vector<double>> grads_of(const JointModel& m, bool detector_only) {
	std::map<std::string, std::vector<double>> out;
	const auto params = detector_only ? m.detector().named_parameters() : m.named_parameters();
	for (const auto& p : params) {
		const auto g = std::as_const(p.tensor).grad();
		out[p.path] = g.empty() ? std::vector<double>(p.tensor.numel(), 0.0) : std::vector<double>(g.begin(), g.end());
	}
	return out;
}

} // namespace

TEST_CASE("variant grid") {
	CHECK(variant_flags(Variant::Base) == VariantFlags{false, false, false, false});
	CHECK(variant_flags(Variant::V1) == VariantFlags{true, false, false, false});
	CHECK(variant_flags(Variant::V2) == VariantFlags{true, true, false, false});
	CHECK(variant_flags(Variant::V3) == VariantFlags{true, true, true, false});
	CHECK(variant_flags(Variant::V4) == VariantFlags{true, true, true, true});
	CHECK(variant_flags(Variant::V5) == VariantFlags{false, true, true, true});
	CHECK(variant_flags(Variant::V6) == VariantFlags{true, false, true, true});
	CHECK(variant_flags(Variant::V7) == VariantFlags{true, true, false, true});
	for (Variant v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
	CHECK(parse_variant("v4") == Variant::V4);
	CHECK_THROWS_AS(parse_variant("V8"), ConfigError);
	const TrainConfig c = desk_config(Variant::V6);
	CHECK_FALSE(c.model_config().use_dtfe);
	CHECK(c.model_config().use_scconv);
}

TEST_CASE("loss-weight sweep grid, verbatim") {
	std::vector<std::string> labels;
	for (const auto& w : sweep_weight_grid()) labels.push_back(weight_label(w));
	CHECK(labels == std::vector<std::string>{"1&1", "0.7&0.3", "0.5&0.5", "0.2&0.6", "0.2&0.8", "0.2&1", "0.1&1.2"});
	CHECK(sweep_weight_grid()[5] == LossWeights{0.2, 1.0});
	CHECK(TrainConfig{}.weights == LossWeights{0.2, 0.8});
}

TEST_CASE("cosine schedule") {
	CHECK(lr_schedule(0, 100, 0.01) == 0.01);
	CHECK(lr_schedule(100, 100, 0.01) == doctest::Approx(0.0).epsilon(1e-18));
	CHECK(lr_schedule(50, 100, 0.01) == doctest::Approx(0.005).epsilon(1e-12));
	CHECK(lr_schedule(100, 100, 0.01, 1e-4) == 1e-4);
	CHECK(lr_schedule(25, 100, 0.01) == doctest::Approx(0.01 * (1 + std::cos(std::numbers::pi / 4)) / 2).epsilon(1e-12));
	for (long s = 1; s <= 100; ++s) CHECK(lr_schedule(s, 100, 0.01) <= lr_schedule(s - 1, 100, 0.01));
}

TEST_CASE("total loss arithmetic") {
	detection::LossBreakdown b;
	b.detection_total = Tensor::from_data({1}, {1.0}, true);
	Tensor re = Tensor::from_data({1}, {1.0}, true);
	CHECK(total_loss(b, re, {0.2, 0.8}).item() == doctest::Approx(1.0).epsilon(1e-15));

	b.detection_total = Tensor::from_data({1}, {3.7}, true);
	re = Tensor::from_data({1}, {0.45}, true);
	CHECK(total_loss(b, re, {0.2, 0.8}).item() == 0.2 * 3.7 + 0.8 * 0.45);

	// (1, 0): exactly the detection term, and the restoration input gets no gradient
	Tensor t = total_loss(b, re, {1.0, 0.0});
	CHECK(t.item() == 3.7);
	t.backward();
	CHECK(std::as_const(b.detection_total).grad()[0] == 1.0);
	CHECK((std::as_const(re).grad().empty() || std::as_const(re).grad()[0] == 0.0));

	// undefined restoration: same
	CHECK(total_loss(b, Tensor{}, {0.2, 0.8}).item() == 0.2 * 3.7);
}

TEST_CASE("grand total on a real batch is exactly 0.2 detection + 0.8 restoration") {
	TrainConfig cfg = desk_config();
	JointModel m(cfg.model_config(), true, 3);
	Trainer tr(cfg, m);
	const LossValues v = tr.compute_gradients(first_batch(2));
	CHECK(v.restoration > 0.0);
	CHECK(v.grand_total == 0.2 * v.detection_total + 0.8 * v.restoration);
	CHECK(v.detection_total == 5.0 * v.iou + v.cls + v.focal);
}

TEST_CASE("config file: parse, overrides, every bad key listed") {
	const std::string ini = "[train]\nepochs = 3\nbase_lr = 0.02\nseed = 7\n"
	                        "[model]\nwidth = 0.125\n"
	                        "[loss]\nlambda_detection = 0.5\nlambda_restoration = 0.5\n"
	                        "[variant]\nname = V5\nfocal = false\n";
	TrainConfig c = parse_config(ini);
	CHECK(c.epochs == 3);
	CHECK(c.base_lr == 0.02);
	CHECK(c.seed == 7);
	CHECK(c.model.width == 0.125);
	CHECK(c.weights == LossWeights{0.5, 0.5});
	CHECK(c.flags == VariantFlags{false, true, false, true});

	// ini round trip
	const TrainConfig again = parse_config(to_ini(c));
	CHECK(to_json(again) == to_json(c));

	apply_override(c, "train.epochs", "9");
	CHECK(c.epochs == 9);
	apply_override(c, "variant.name", "Base");
	CHECK(c.flags == variant_flags(Variant::Base));
	CHECK_THROWS_AS(apply_override(c, "train.nope", "1"), ConfigError);
	CHECK_THROWS_AS(apply_override(c, "train.epochs", "many"), ConfigError);

	const std::string bad = "[train]\nepochs = x\nbogus = 1\n[loss]\nlambda_detection = 0\nlambda_restoration = 0\n";
	try {
		parse_config(bad);
		FAIL("expected ConfigError");
	} catch (const ConfigError& e) {
		const std::string msg = e.what();
		CHECK(msg.find("train.epochs") != std::string::npos);
		CHECK(msg.find("train.bogus") != std::string::npos);
	}
	try {
		parse_config("[train]\nmomentum = 1.5\n[loss]\nlambda_detection = 0\nlambda_restoration = 0\n[data]\nairlight = 2\n");
		FAIL("expected ConfigError");
	} catch (const ConfigError& e) {
		const std::string msg = e.what();
		CHECK(msg.find("momentum") != std::string::npos);
		CHECK(msg.find("both be zero") != std::string::npos);
		CHECK(msg.find("airlight") != std::string::npos);
	}
	CHECK_THROWS_AS(load_config("/nonexistent/fogdet.ini"), ConfigError);
}

TEST_CASE("lr = 0 leaves every parameter unchanged") {
	TrainConfig cfg = desk_config();
	JointModel m(cfg.model_config(), true, 4);
	std::vector<std::vector<double>> before;
	for (const auto& p : m.named_parameters()) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
	Trainer tr(cfg, m);
	tr.train_step(first_batch(2), 0.0);
	const auto after = m.named_parameters();
	for (std::size_t i = 0; i < after.size(); ++i) {
		CHECK(std::memcmp(after[i].tensor.data().data(), before[i].data(), before[i].size() * sizeof(double)) == 0);
	}
}

TEST_CASE("one step moves a scalar parameter by -lr times its finite-difference gradient") {
	TrainConfig cfg = desk_config();
	cfg.weight_decay = 0.0;
	JointModel m(cfg.model_config(), true, 5);
	Trainer tr(cfg, m);
	const datakit::Batch batch = first_batch(1);
	tr.compute_gradients(batch);

	// largest gradient away from the deformable offset predictors (bilinear kinks at zero offset)
	Tensor target;
	std::size_t at = 0;
	double best = 0.0;
	for (const auto& p : m.named_parameters()) {
		if (p.path.find("offset") != std::string::npos) continue;
		const auto g = std::as_const(p.tensor).grad();
		for (std::size_t i = 0; i < g.size(); ++i)
			if (std::abs(g[i]) > best) {
				best = std::abs(g[i]);
				target = p.tensor;
				at = i;
			}
	}
	REQUIRE(best > 0.0);
	const double analytic = std::as_const(target).grad()[at];

	const double w0 = target[at], eps = 1e-6;
	target[at] = w0 + eps;
	const double up = tr.compute_gradients(batch).grand_total;
	target[at] = w0 - eps;
	const double down = tr.compute_gradients(batch).grand_total;
	target[at] = w0;
	const double numeric = (up - down) / (2 * eps);
	CHECK(std::abs(analytic - numeric) <= 1e-4 * std::max(1.0, std::abs(numeric)));

	const double lr = 1e-3;
	tr.train_step(batch, lr);
	CHECK(target[at] - w0 == doctest::Approx(-lr * analytic).epsilon(1e-9));
}

TEST_CASE("lambda2 = 0 isolates the detector gradients") {
	TrainConfig cfg = desk_config();
	cfg.weights = {1.0, 0.0};
	const datakit::Batch batch = first_batch(2);

	JointModel with(cfg.model_config(), true, 6);
	Trainer(cfg, with).compute_gradients(batch);
	TrainConfig off = cfg;
	off.flags.restoration = false;
	JointModel without(off.model_config(), false, 6);
	Trainer(off, without).compute_gradients(batch);

	const auto a = grads_of(with, true), b = grads_of(without, true);
	REQUIRE(a.size() == b.size());
	for (const auto& [k, ga] : a) {
		const auto& gb = b.at(k);
		for (std::size_t i = 0; i < ga.size(); ++i)
			CHECK(ga[i] == doctest::Approx(gb[i]).epsilon(1e-12).scale(1e-15));
	}
	// and the decoder gets nothing
	for (const auto& p : with.decoder()->named_parameters()) {
		const auto g = std::as_const(p.tensor).grad();
		for (double v : g) CHECK(v == 0.0);
	}
}

TEST_CASE("lambda1 = 0 still trains the shared backbone") {
	TrainConfig cfg = desk_config();
	cfg.weights = {0.0, 0.8};
	JointModel m(cfg.model_config(), true, 7);
	Trainer(cfg, m).compute_gradients(first_batch(2));
	// neck, SC-conv and heads sit only on the detection path
	double backbone_norm = 0.0, head_norm = 0.0;
	int heads = 0;
	for (const auto& p : m.detector().named_parameters()) {
		const auto g = std::as_const(p.tensor).grad();
		double s = 0.0;
		for (double v : g) s += v * v;
		if (p.path.starts_with("backbone.")) {
			backbone_norm += s;
		} else {
			head_norm += s;
			++heads;
		}
	}
	CHECK(heads > 0);
	CHECK(backbone_norm > 0.0);
	CHECK(head_norm == 0.0);
}

TEST_CASE("single-batch overfit: 50 steps cut the total loss at least in half") {
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
	MESSAGE("overfit: " << first << " -> " << last);
	CHECK(last <= 0.5 * first);
}

TEST_CASE("deterministic fit: identical trajectories bit for bit, metrics log") {
	TrainConfig cfg = desk_config();
	cfg.epochs = 2;
	cfg.batch_size = 4;
	cfg.log_every = 1;
	auto run = [&](std::ostream* log) {
		JointModel m(cfg.model_config(), true, cfg.seed);
		return fit(cfg, m, toy(8), log);
	};
	std::ostringstream log;
	int epochs_seen = 0;
	JointModel m(cfg.model_config(), true, cfg.seed);
	const TrainResult a = fit(cfg, m, toy(8), &log, [&](const EpochCallbackInfo&) { ++epochs_seen; });
	const TrainResult b = run(nullptr);
	REQUIRE(a.steps == 4);
	REQUIRE(a.trajectory.size() == b.trajectory.size());
	for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
		CHECK(std::memcmp(&a.trajectory[i], &b.trajectory[i], sizeof(LossValues)) == 0);
	}
	CHECK(epochs_seen == 2);
	const std::string text = log.str();
	CHECK(std::count(text.begin(), text.end(), '\n') == 4);
	CHECK(text.find("step=0 epoch=0 lr=0.01 ") != std::string::npos);
	CHECK(text.find("restoration=") != std::string::npos);
}

TEST_CASE("non-finite loss aborts with the batch ids") {
	TrainConfig cfg = desk_config();
	JointModel m(cfg.model_config(), true, 8);
	Trainer tr(cfg, m);
	datakit::Batch batch = first_batch(2);
	batch.foggy[0] = std::numeric_limits<double>::quiet_NaN();
	try {
		tr.train_step(batch, 0.01);
		FAIL("expected NonFiniteLoss");
	} catch (const NonFiniteLoss& e) {
		CHECK(e.batch_ids() == batch.ids);
		CHECK(std::string(e.what()).find(batch.ids[0]) != std::string::npos);
	}
}

TEST_CASE("restoration switched on without a decoder is a config error") {
	TrainConfig cfg = desk_config();
	JointModel m(cfg.model_config(), false, 9);
	CHECK_THROWS_AS(Trainer(cfg, m), ConfigError);
}

TEST_CASE("ablation and sweep runners: one row per (label, seed)") {
	TrainConfig cfg = desk_config();
	cfg.epochs = 1;
	cfg.batch_size = 4;
	const auto& data = toy(8);
	const std::vector<datakit::PairedSample> train(data.begin(), data.begin() + 4), test(data.begin() + 4, data.end());
	int hooked = 0;
	const GridReport r = run_ablation({Variant::Base}, {0}, cfg, train, test, [&](const RunRow&) { ++hooked; });
	REQUIRE(r.rows.size() == 1);
	CHECK(hooked == 1);
	CHECK(r.rows[0].label == "Base");
	CHECK((r.rows[0].map >= 0.0 && r.rows[0].map <= 1.0));
	CHECK(r.to_json()["mean_map"].contains("Base"));
	CHECK(r.format().find("Base") != std::string::npos);

	const GridReport s = run_weight_sweep({{0.7, 0.3}}, {1, 2}, cfg, train, test);
	REQUIRE(s.rows.size() == 2);
	CHECK(s.means().size() == 1);
	CHECK(s.means()[0].first == "0.7&0.3");
	CHECK(s.means()[0].second == doctest::Approx((s.rows[0].map + s.rows[1].map) / 2));
}
