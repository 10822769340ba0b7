#include "fogdet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <csetjmp>
#include <cstring>
#include <map>
#include <memory>

#include <jpeglib.h>
#include <png.h>

namespace fogdet {

bool ImageTensor::within_range() const {
	switch (range) {
	case ValueRange::Unit:
		return std::all_of(data.begin(), data.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
	case ValueRange::SignedUnit:
		return std::all_of(data.begin(), data.end(), [](double v) { return v >= -1.0 && v <= 1.0; });
	case ValueRange::Unbounded:
		return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
	}
	return false;
}

std::vector<unsigned char> to_bytes(const ImageTensor& image) {
	// Interleaved HWC.
	std::vector<unsigned char> out(image.data.size());
	for (int y = 0; y < image.height; ++y) {
		for (int x = 0; x < image.width; ++x) {
			for (int c = 0; c < image.channels; ++c) {
				const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
				out[(static_cast<std::size_t>(y) * image.width + x) * image.channels + c] =
				    static_cast<unsigned char>(std::lround(v * 255.0));
			}
		}
	}
	return out;
}

ImageTensor from_bytes(const std::vector<unsigned char>& bytes, int channels, int height, int width) {
	if (bytes.size() != static_cast<std::size_t>(channels) * height * width) {
		throw InvalidArgument("from_bytes: buffer size does not match dimensions");
	}
	ImageTensor img(channels, height, width);
	for (int y = 0; y < height; ++y) {
		for (int x = 0; x < width; ++x) {
			for (int c = 0; c < channels; ++c) {
				img.at(c, y, x) = bytes[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0;
			}
		}
	}
	return img;
}

ImageTensor quantize8(const ImageTensor& image) {
	ImageTensor q = from_bytes(to_bytes(image), image.channels, image.height, image.width);
	q.range = ValueRange::Unit;
	return q;
}

namespace {

std::string lower_ext(const std::filesystem::path& p) {
	std::string ext = p.extension().string();
	std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
	return ext;
}

ImageTensor read_png(const std::filesystem::path& path) {
	png_image png;
	std::memset(&png, 0, sizeof(png));
	png.version = PNG_IMAGE_VERSION;
	if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
		throw std::runtime_error("cannot read PNG " + path.string() + ": " + png.message);
	}
	png.format = PNG_FORMAT_RGB;
	std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
	if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
		png_image_free(&png);
		throw std::runtime_error("cannot decode PNG " + path.string() + ": " + png.message);
	}
	return from_bytes(buf, 3, static_cast<int>(png.height), static_cast<int>(png.width));
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
	png_image png;
	std::memset(&png, 0, sizeof(png));
	png.version = PNG_IMAGE_VERSION;
	png.width = static_cast<png_uint_32>(image.width);
	png.height = static_cast<png_uint_32>(image.height);
	png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
	const auto bytes = to_bytes(image);
	if (!png_image_write_to_file(&png, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
		throw std::runtime_error("cannot write PNG " + path.string() + ": " + png.message);
	}
}

struct JpegError {
	jpeg_error_mgr mgr;
	std::jmp_buf jump;
	char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr info) {
	auto* err = reinterpret_cast<JpegError*>(info->err);
	(*info->err->format_message)(info, err->message);
	std::longjmp(err->jump, 1);
}

struct FileCloser {
	void operator()(std::FILE* f) const {
		if (f) std::fclose(f);
	}
};

ImageTensor read_jpeg(const std::filesystem::path& path) {
	std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.string().c_str(), "rb"));
	if (!file) {
		throw std::runtime_error("cannot open JPEG " + path.string());
	}
	jpeg_decompress_struct info{};
	JpegError err{};
	info.err = jpeg_std_error(&err.mgr);
	err.mgr.error_exit = jpeg_error_exit;
	std::vector<unsigned char> buf;
	int width = 0, height = 0;
	if (setjmp(err.jump)) {
		jpeg_destroy_decompress(&info);
		throw std::runtime_error("cannot decode JPEG " + path.string() + ": " + err.message);
	}
	jpeg_create_decompress(&info);
	jpeg_stdio_src(&info, file.get());
	jpeg_read_header(&info, TRUE);
	info.out_color_space = JCS_RGB;
	jpeg_start_decompress(&info);
	width = static_cast<int>(info.output_width);
	height = static_cast<int>(info.output_height);
	buf.resize(static_cast<std::size_t>(width) * height * 3);
	while (info.output_scanline < info.output_height) {
		unsigned char* row = buf.data() + static_cast<std::size_t>(info.output_scanline) * width * 3;
		jpeg_read_scanlines(&info, &row, 1);
	}
	jpeg_finish_decompress(&info);
	jpeg_destroy_decompress(&info);
	return from_bytes(buf, 3, height, width);
}

void write_jpeg(const std::filesystem::path& path, const ImageTensor& image) {
	if (image.channels != 3) {
		throw InvalidArgument("write_jpeg: 3-channel image required");
	}
	std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.string().c_str(), "wb"));
	if (!file) {
		throw std::runtime_error("cannot open " + path.string() + " for writing");
	}
	const auto bytes = to_bytes(image);
	jpeg_compress_struct info{};
	JpegError err{};
	info.err = jpeg_std_error(&err.mgr);
	err.mgr.error_exit = jpeg_error_exit;
	if (setjmp(err.jump)) {
		jpeg_destroy_compress(&info);
		throw std::runtime_error("cannot encode JPEG " + path.string() + ": " + err.message);
	}
	jpeg_create_compress(&info);
	jpeg_stdio_dest(&info, file.get());
	info.image_width = static_cast<JDIMENSION>(image.width);
	info.image_height = static_cast<JDIMENSION>(image.height);
	info.input_components = 3;
	info.in_color_space = JCS_RGB;
	jpeg_set_defaults(&info);
	jpeg_set_quality(&info, 95, TRUE);
	jpeg_start_compress(&info, TRUE);
	while (info.next_scanline < info.image_height) {
		auto* row = const_cast<unsigned char*>(bytes.data() + static_cast<std::size_t>(info.next_scanline) * image.width * 3);
		jpeg_write_scanlines(&info, &row, 1);
	}
	jpeg_finish_compress(&info);
	jpeg_destroy_compress(&info);
}

} // namespace

ImageTensor read_image(const std::filesystem::path& path) {
	const std::string ext = lower_ext(path);
	if (ext == ".png") {
		return read_png(path);
	}
	if (ext == ".jpg" || ext == ".jpeg") {
		return read_jpeg(path);
	}
	throw InvalidArgument("unsupported image extension: " + path.string());
}

void write_image(const std::filesystem::path& path, const ImageTensor& image) {
	const std::string ext = lower_ext(path);
	if (ext == ".png") {
		write_png(path, image);
	} else if (ext == ".jpg" || ext == ".jpeg") {
		write_jpeg(path, image);
	} else {
		throw InvalidArgument("unsupported image extension: " + path.string());
	}
}

Tensor stack_images(const std::vector<const ImageTensor*>& images) {
	if (images.empty()) {
		throw InvalidArgument("stack_images: empty batch");
	}
	const ImageTensor& first = *images.front();
	std::vector<double> data;
	data.reserve(first.data.size() * images.size());
	for (const ImageTensor* img : images) {
		if (!img->same_dims(first)) {
			throw ShapeError("stack_images: images differ in size");
		}
		data.insert(data.end(), img->data.begin(), img->data.end());
	}
	return Tensor::from_data({static_cast<int>(images.size()), first.channels, first.height, first.width}, std::move(data));
}

ImageTensor unstack_image(const Tensor& batch, int index, ValueRange range) {
	if (batch.ndim() != 4 || index < 0 || index >= batch.dim(0)) {
		throw ShapeError("unstack_image: bad index for " + shape_str(batch.shape()));
	}
	ImageTensor img(batch.dim(1), batch.dim(2), batch.dim(3), 0.0, range);
	const std::size_t n = img.data.size();
	std::copy_n(batch.data().begin() + static_cast<long>(n * static_cast<std::size_t>(index)), n, img.data.begin());
	return img;
}

void fill_rect(ImageTensor& image, int x0, int y0, int x1, int y1, const Rgb& color) {
	x0 = std::max(x0, 0);
	y0 = std::max(y0, 0);
	x1 = std::min(x1, image.width);
	y1 = std::min(y1, image.height);
	for (int y = y0; y < y1; ++y) {
		for (int x = x0; x < x1; ++x) {
			for (int c = 0; c < std::min(3, image.channels); ++c) {
				image.at(c, y, x) = color[static_cast<std::size_t>(c)];
			}
		}
	}
}

void draw_rect_outline(ImageTensor& image, int x0, int y0, int x1, int y1, const Rgb& color, int thickness) {
	fill_rect(image, x0, y0, x1, y0 + thickness, color);
	fill_rect(image, x0, y1 - thickness, x1, y1, color);
	fill_rect(image, x0, y0, x0 + thickness, y1, color);
	fill_rect(image, x1 - thickness, y0, x1, y1, color);
}

namespace {

const std::map<char, const char*>& glyphs() {
	static const std::map<char, const char*> table = {
	    {'0', "111101101101111"}, {'1', "010110010010111"}, {'2', "111001111100111"}, {'3', "111001111001111"},
	    {'4', "101101111001001"}, {'5', "111100111001111"}, {'6', "111100111101111"}, {'7', "111001001001001"},
	    {'8', "111101111101111"}, {'9', "111101111001111"}, {'.', "000000000000010"}, {'_', "000000000000111"},
	    {'A', "010101111101101"}, {'B', "110101110101110"}, {'C', "011100100100011"}, {'D', "110101101101110"},
	    {'E', "111100110100111"}, {'F', "111100110100100"}, {'G', "011100101101011"}, {'H', "101101111101101"},
	    {'I', "111010010010111"}, {'J', "001001001101010"}, {'K', "101101110101101"}, {'L', "100100100100111"},
	    {'M', "101111111101101"}, {'N', "110101101101101"}, {'O', "010101101101010"}, {'P', "110101110100100"},
	    {'Q', "010101101110011"}, {'R', "110101110101101"}, {'S', "011100010001110"}, {'T', "111010010010010"},
	    {'U', "101101101101111"}, {'V', "101101101101010"}, {'W', "101101111111101"}, {'X', "101101010101101"},
	    {'Y', "101101010010010"}, {'Z', "111001010100111"},
	};
	return table;
}

} // namespace

void draw_text(ImageTensor& image, int x, int y, const std::string& text, const Rgb& color) {
	int cx = x;
	for (char ch : text) {
		const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
		auto it = glyphs().find(up);
		if (it != glyphs().end()) {
			for (int r = 0; r < 5; ++r) {
				for (int c = 0; c < 3; ++c) {
					if (it->second[r * 3 + c] == '1') {
						fill_rect(image, cx + c, y + r, cx + c + 1, y + r + 1, color);
					}
				}
			}
		}
		cx += 4;
	}
}

} // namespace fogdet
