#include "fogdet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace fogdet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'O', 'G', 'D', 'E', 'T', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T v) {
	out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str(std::ostream& out, const std::string& s) {
	put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
	out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
	Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

	template <typename T>
	T get() {
		T v{};
		in_.read(reinterpret_cast<char*>(&v), sizeof v);
		check();
		return v;
	}

	std::string str() {
		const auto n = get<std::uint32_t>();
		if (n > (1u << 24)) fail("string length " + std::to_string(n) + " is implausible");
		std::string s(n, '\0');
		in_.read(s.data(), n);
		check();
		return s;
	}

	void raw(void* dst, std::size_t bytes) {
		in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
		check();
	}

	[[noreturn]] void fail(const std::string& why) { throw ParseError("checkpoint " + path_ + ": " + why, 0); }

private:
	void check() {
		if (!in_) fail("truncated file");
	}
	std::istream& in_;
	std::string path_;
};

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
	if (path.has_parent_path()) {
		std::filesystem::create_directories(path.parent_path());
	}
	const auto tmp = path.string() + ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
		out.write(kMagic, sizeof kMagic);
		put<std::uint32_t>(out, kCheckpointVersion);
		put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
		for (const auto& [k, v] : ckpt.metadata) {
			put_str(out, k);
			put_str(out, v);
		}
		put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
		for (const auto& [name, t] : ckpt.tensors) {
			put_str(out, name);
			put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
			for (int d : t.shape()) put<std::int32_t>(out, d);
			out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
		}
		if (!out) throw std::runtime_error("write failed for checkpoint " + tmp);
	}
	std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) {
		throw ConfigError("checkpoint not found: " + path.string());
	}
	Reader r(in, path.string());
	char magic[8];
	r.raw(magic, sizeof magic);
	if (std::memcmp(magic, kMagic, sizeof magic) != 0) r.fail("bad magic");
	const auto version = r.get<std::uint32_t>();
	if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
	Checkpoint ckpt;
	const auto n_meta = r.get<std::uint32_t>();
	for (std::uint32_t i = 0; i < n_meta; ++i) {
		std::string k = r.str();
		ckpt.metadata[k] = r.str();
	}
	const auto n_tensors = r.get<std::uint32_t>();
	for (std::uint32_t i = 0; i < n_tensors; ++i) {
		std::string name = r.str();
		const auto ndim = r.get<std::uint32_t>();
		if (ndim > 8) r.fail("tensor " + name + " has " + std::to_string(ndim) + " dims");
		Shape shape;
		std::size_t numel = 1;
		for (std::uint32_t d = 0; d < ndim; ++d) {
			const auto v = r.get<std::int32_t>();
			if (v < 0) r.fail("negative dim in " + name);
			shape.push_back(v);
			numel *= static_cast<std::size_t>(v);
		}
		if (numel > (std::size_t{1} << 30)) r.fail("tensor " + name + " is implausibly large");
		std::vector<double> values(numel);
		r.raw(values.data(), numel * sizeof(double));
		ckpt.tensors.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
	}
	return ckpt;
}

void capture(Checkpoint& ckpt, const nn::Module& module, const std::string& prefix) {
	for (const auto& p : module.named_parameters(prefix)) {
		ckpt.tensors[p.path] = p.tensor.detach();
	}
}

LoadReport restore(const Checkpoint& ckpt, const nn::Module& module, const std::string& prefix, bool strict) {
	LoadReport report;
	std::map<std::string, Tensor> wanted;
	for (const auto& p : module.named_parameters(prefix)) wanted.emplace(p.path, p.tensor);
	for (auto& [name, dst] : wanted) {
		auto it = ckpt.tensors.find(name);
		if (it == ckpt.tensors.end()) {
			report.missing.push_back(name);
			continue;
		}
		if (it->second.shape() != dst.shape()) {
			throw ShapeError("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) +
			                 ", model expects " + shape_str(dst.shape()));
		}
		std::copy(it->second.data().begin(), it->second.data().end(), dst.data().begin());
		report.loaded.push_back(name);
	}
	for (const auto& [name, _] : ckpt.tensors) {
		if (name.starts_with(prefix) && !wanted.count(name)) report.unexpected.push_back(name);
	}
	if (strict && !report.missing.empty()) {
		std::string msg = "checkpoint is missing " + std::to_string(report.missing.size()) + " tensor(s):";
		for (std::size_t i = 0; i < std::min<std::size_t>(report.missing.size(), 8); ++i) msg += " " + report.missing[i];
		throw ConfigError(msg);
	}
	return report;
}

std::size_t strip_prefix(Checkpoint& ckpt, const std::string& prefix) {
	return std::erase_if(ckpt.tensors, [&](const auto& kv) { return kv.first.starts_with(prefix); });
}

} // namespace fogdet
