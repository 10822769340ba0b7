#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "fogdet/tensor.hpp"

namespace fogdet {

enum class ValueRange {
	Unit,       // [0, 1]
	SignedUnit, // [-1, 1]
	Unbounded,
};

/// Channel-major (C,H,W) floating-point raster.
struct ImageTensor {
	int channels{0};
	int height{0};
	int width{0};
	ValueRange range{ValueRange::Unit};
	std::vector<double> data;

	ImageTensor() = default;
	ImageTensor(int c, int h, int w, double fill = 0.0, ValueRange r = ValueRange::Unit)
	    : channels(c), height(h), width(w), range(r), data(static_cast<std::size_t>(c) * h * w, fill) {}

	double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
	double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
	std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
	bool same_dims(const ImageTensor& o) const {
		return channels == o.channels && height == o.height && width == o.width;
	}

	/// True when every value lies in the declared range.
	bool within_range() const;
};

using Rgb = std::array<double, 3>;

/// Reads PNG or JPEG (by extension) into [0,1], 3 channels.
ImageTensor read_image(const std::filesystem::path& path);
/// Writes 8-bit PNG or JPEG (by extension); values are clamped to [0,1] and rounded to nearest.
void write_image(const std::filesystem::path& path, const ImageTensor& image);

std::vector<unsigned char> to_bytes(const ImageTensor& image);
ImageTensor from_bytes(const std::vector<unsigned char>& bytes, int channels, int height, int width);
/// Quantises through 8 bits exactly as a save/load cycle would.
ImageTensor quantize8(const ImageTensor& image);

/// Packs equally sized images into a (B,C,H,W) tensor.
Tensor stack_images(const std::vector<const ImageTensor*>& images);
/// Extracts batch item `index` of an NCHW tensor.
ImageTensor unstack_image(const Tensor& batch, int index, ValueRange range);

// Drawing on 3-channel rasters; coordinates are pixel indices, clipped to the image.
void draw_rect_outline(ImageTensor& image, int x0, int y0, int x1, int y1, const Rgb& color, int thickness = 1);
void fill_rect(ImageTensor& image, int x0, int y0, int x1, int y1, const Rgb& color);
/// Small 3x5 bitmap font; supports digits, '.', and A-Z/a-z.
void draw_text(ImageTensor& image, int x, int y, const std::string& text, const Rgb& color);

} // namespace fogdet
