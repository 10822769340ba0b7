#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fogdet/backbone.hpp"
#include "fogdet/checkpoint.hpp"
#include "fogdet/datakit.hpp"
#include "fogdet/detection.hpp"
#include "fogdet/evalkit.hpp"
#include "fogdet/restoration.hpp"

namespace fogdet::training {

// ---- variants ------------------------------------------------------------------

struct VariantFlags {
	bool restoration{true};
	bool dtfe{true};
	bool focal{true};
	bool scconv{true};
	bool operator==(const VariantFlags&) const = default;
};

enum class Variant { Base, V1, V2, V3, V4, V5, V6, V7 };

/// Base: nothing. V1: +restoration. V2: V1+DTFE. V3: V2+focal. V4: everything
/// (adds SC-conv). V5/V6/V7: V4 without restoration / DTFE / focal.
VariantFlags variant_flags(Variant v);
std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();

struct LossWeights {
	double detection{0.2};
	double restoration{0.8};
	bool operator==(const LossWeights&) const = default;
};

/// The seven (detection, restoration) weight pairs of the loss-weight sweep.
const std::vector<LossWeights>& sweep_weight_grid();

// ---- configuration -------------------------------------------------------------

struct TrainConfig {
	int epochs{20};
	int batch_size{8};
	double base_lr{1e-2};
	double lr_floor{0.0};
	double momentum{0.9};
	double weight_decay{5e-4};
	LossWeights weights{};
	std::uint64_t seed{0};
	VariantFlags flags{};
	ModelConfig model{};
	std::pair<double, double> beta_range{0.07, 0.12};
	double airlight{0.5};
	double focal_alpha{0.25};
	double focal_gamma{2.0};
	bool deterministic{true};
	int log_every{10};

	/// Applies the variant switches to the model config.
	ModelConfig model_config() const;
	/// Throws ConfigError listing every invalid key.
	void validate() const;
};

/// Flat INI with sections [train], [model], [loss], [data], [variant]. Unknown keys
/// and unparsable values are collected and reported together.
TrainConfig parse_config(const std::string& ini_text);
TrainConfig load_config(const std::filesystem::path& path);
/// "section.key" = value; same validation as the file parser.
void apply_override(TrainConfig& cfg, const std::string& dotted_key, const std::string& value);
std::string to_ini(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);

// ---- model and objective ------------------------------------------------------

/// Detector plus, when requested, the training-only restoration decoder.
/// Detector parameters are keyed at the root, decoder parameters under "restoration.".
class JointModel {
public:
	JointModel(const ModelConfig& cfg, bool with_restoration, std::uint64_t seed);

	detection::Detector& detector() { return *detector_; }
	const detection::Detector& detector() const { return *detector_; }
	const restoration::RestorationDecoder* decoder() const { return decoder_.get(); }

	std::vector<nn::NamedParameter> named_parameters() const;
	Checkpoint to_checkpoint(const std::map<std::string, std::string>& metadata = {}) const;
	/// Loads detector tensors (strict) and decoder tensors when present.
	void load(const Checkpoint& ckpt);

private:
	std::unique_ptr<detection::Detector> detector_;
	std::unique_ptr<restoration::RestorationDecoder> decoder_;
};

/// Rebuilds a detector-only model from a checkpoint's metadata and tensors.
/// Restoration tensors, if any, are ignored.
std::unique_ptr<detection::Detector> load_detector(const Checkpoint& ckpt);

ModelConfig model_config_from_metadata(const std::map<std::string, std::string>& meta);
std::map<std::string, std::string> metadata_from_model_config(const ModelConfig& cfg);

/// grand_total = w.detection * detection_total + w.restoration * restoration.
/// An undefined restoration tensor or a zero restoration weight leaves that term out.
Tensor total_loss(detection::LossBreakdown& det, const Tensor& restoration, const LossWeights& weights);

/// Cosine decay from base_lr at step 0 to `floor` at total_steps.
double lr_schedule(long step, long total_steps, double base_lr, double floor = 0.0);

class Sgd {
public:
	Sgd(std::vector<nn::NamedParameter> params, double momentum, double weight_decay);
	void zero_grad();
	void step(double lr);
	const std::vector<nn::NamedParameter>& params() const { return params_; }

private:
	std::vector<nn::NamedParameter> params_;
	std::vector<std::vector<double>> velocity_;
	double momentum_;
	double weight_decay_;
};

struct LossValues {
	double iou{0}, cls{0}, focal{0}, restoration{0}, detection_total{0}, grand_total{0};
	int num_positive{0};
};

class NonFiniteLoss : public std::runtime_error {
public:
	NonFiniteLoss(const std::string& what, std::vector<std::string> batch_ids)
	    : std::runtime_error(what), batch_ids_(std::move(batch_ids)) {}
	const std::vector<std::string>& batch_ids() const { return batch_ids_; }

private:
	std::vector<std::string> batch_ids_;
};

class Trainer {
public:
	Trainer(const TrainConfig& cfg, JointModel& model);

	/// Forward + backward only; gradients are left on the parameters.
	LossValues compute_gradients(const datakit::Batch& batch);
	/// One SGD-with-momentum update on the weighted objective.
	LossValues train_step(const datakit::Batch& batch, double lr);

	Sgd& optimizer() { return sgd_; }

private:
	TrainConfig cfg_;
	JointModel& model_;
	Sgd sgd_;
};

struct EpochCallbackInfo {
	int epoch;
	long step;
	LossValues mean;
};

struct TrainResult {
	std::vector<LossValues> trajectory; // one entry per step
	long steps{0};
};

/// Full training run. Metrics lines go to `metrics` when non-null.
TrainResult fit(const TrainConfig& cfg, JointModel& model, const std::vector<datakit::PairedSample>& train,
                std::ostream* metrics = nullptr, const std::function<void(const EpochCallbackInfo&)>& on_epoch = {});

std::string format_metrics_line(long step, int epoch, double lr, const LossValues& v);

/// Runs the detector on the foggy member of each sample (letterboxed to image_size)
/// and scores the result against the letterboxed annotations.
struct Evaluation {
	evalkit::EvalResult result;
	std::map<std::string, std::vector<detection::Detection>> detections;
};
Evaluation evaluate(const detection::Detector& det, const std::vector<datakit::PairedSample>& samples, int image_size,
                    int batch_size = 8, double conf = detection::kEvalConf, double nms_iou = detection::kNmsIou);

// ---- experiment grids ----------------------------------------------------------

struct RunRow {
	std::string label; // variant name or "a&b" weight pair
	std::uint64_t seed{0};
	double map{0};
	LossValues final_loss;
	double seconds{0};
};

struct GridReport {
	std::vector<RunRow> rows;
	/// Mean mAP per label in first-seen order.
	std::vector<std::pair<std::string, double>> means() const;
	nlohmann::json to_json() const;
	std::string format() const;
};

using RunHook = std::function<void(const RunRow&)>;

/// Trains and evaluates each variant for each seed on identical data.
GridReport run_ablation(const std::vector<Variant>& variants, const std::vector<std::uint64_t>& seeds,
                        const TrainConfig& base, const std::vector<datakit::PairedSample>& train,
                        const std::vector<datakit::PairedSample>& test, const RunHook& hook = {});

/// Same, over loss-weight pairs with every component switched on.
GridReport run_weight_sweep(const std::vector<LossWeights>& grid, const std::vector<std::uint64_t>& seeds,
                            const TrainConfig& base, const std::vector<datakit::PairedSample>& train,
                            const std::vector<datakit::PairedSample>& test, const RunHook& hook = {});

std::string weight_label(const LossWeights& w);

} // namespace fogdet::training
