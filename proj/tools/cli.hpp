#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fogdet/detection.hpp"
#include "fogdet/image.hpp"

namespace fogdet::cli {

namespace fs = std::filesystem;

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kValidationError = 1;
inline constexpr int kRuntimeError = 2;

struct RunManifest {
	std::string command;
	std::vector<std::string> argv; // as passed after the program name; replayable
	nlohmann::json config = nlohmann::json::object();
	std::uint64_t seed{0};
	std::vector<std::string> artifacts;
	std::string input_hash;
	std::string output_hash;

	nlohmann::json to_json() const;
	static RunManifest from_json(const nlohmann::json& j);
};

/// 64-bit FNV-1a over (relative name, contents) of each file, in name order, then `extra`.
/// Returned as 16 hex digits.
std::string content_hash(const fs::path& root, std::vector<std::string> relative_files, const std::string& extra = "");
/// Every regular file under `root`, relative, sorted; files named manifest.json are skipped.
std::vector<std::string> list_files(const fs::path& root);

void write_manifest(const fs::path& path, const RunManifest& m);
RunManifest read_manifest(const fs::path& path);

/// Where a command reports. Human text goes to `out` unless `jsonl` is set, in which
/// case `out` receives the line-delimited records instead. Each command also writes
/// the records to report.jsonl next to its manifest.
struct Context {
	std::ostream& out;
	std::ostream& err;
	bool jsonl{false};
	std::vector<std::string> argv;
};

struct MakeDatasetOptions {
	std::string out;
	int train{500};
	int test{100};
	std::uint64_t seed{0};
	int size{160};
	double airlight{0.5};
	std::pair<double, double> beta_train{0.07, 0.12};
	std::pair<double, double> beta_test{0.05, 0.14};
};

struct SynthFogOptions {
	std::string input;
	std::string out;
	double airlight{0.5};
	double beta{-1.0}; // fixed beta when >= 0, otherwise drawn from beta_range
	std::pair<double, double> beta_range{0.07, 0.12};
	std::uint64_t seed{0};
	std::string classes{"toy"}; // used when the input has no classes.txt: toy | road
};

struct TrainOptions {
	std::string data;
	std::string out;
	std::string config; // optional INI file
	std::vector<std::string> overrides; // section.key=value, applied after the file
	std::string variant; // optional shortcut for variant.name
	int checkpoint_every{5};
};

struct EvalOptions {
	std::string checkpoint; // either this...
	std::string detections; // ...or a detection file
	std::string data;
	std::string split{"test"};
	std::string out;
	double iou{0.5};
	double conf{detection::kEvalConf};
	double nms{detection::kNmsIou};
	bool eleven_point{false};
	bool plots{false};
	int batch{8};
};

struct InferOptions {
	std::string checkpoint;
	std::string input; // image file, directory of images, or dataset root
	std::string out;
	double conf{detection::kDemoConf};
	double nms{detection::kNmsIou};
};

struct GridOptions {
	std::string data;
	std::string out;
	std::string config;
	std::vector<std::string> overrides;
	std::vector<std::string> labels; // variants for ablate, "a&b" pairs for sweep-weights
	std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct BenchOptions {
	std::string checkpoint; // empty: fresh model from config/overrides
	std::string config;
	std::vector<std::string> overrides;
	std::string image; // empty: a seeded random image
	std::string out;
	int runs{50};
	int warmup{5};
	std::uint64_t seed{0};
};

struct StripOptions {
	std::string input;
	std::string output;
	std::string prefix{"restoration."};
};

int cmd_make_dataset(const MakeDatasetOptions& o, const Context& ctx);
int cmd_synth_fog(const SynthFogOptions& o, const Context& ctx);
int cmd_train(const TrainOptions& o, const Context& ctx);
int cmd_eval(const EvalOptions& o, const Context& ctx);
int cmd_infer(const InferOptions& o, const Context& ctx);
int cmd_ablate(const GridOptions& o, const Context& ctx);
int cmd_sweep_weights(const GridOptions& o, const Context& ctx);
int cmd_bench(const BenchOptions& o, const Context& ctx);
int cmd_strip_checkpoint(const StripOptions& o, const Context& ctx);

/// Parses `args` (without the program name), runs the subcommand, maps exceptions to
/// exit codes: configuration/validation problems 1, anything else 2.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Shared pieces, exposed for tests.

/// Letterboxes each image to `size`, runs the detector, maps boxes back to image coordinates.
std::map<std::string, std::vector<detection::Detection>> detect_images(
    const detection::Detector& det, const std::vector<std::pair<std::string, const ImageTensor*>>& images, int batch,
    double conf, double nms);

/// Boxes with "<class> <score>" labels, one colour per class.
ImageTensor draw_detections(const ImageTensor& image, const std::vector<detection::Detection>& dets,
                            const datakit::ClassList& classes);

struct BenchStats {
	std::vector<double> latencies; // seconds
	double mean{0};
	double fps{0};
};
BenchStats bench_stats(std::vector<double> latencies);

} // namespace fogdet::cli
