#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fogdet {

/// Bad argument value (range, sign, dimension) passed to a public function.
class InvalidArgument : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not fit together.
class ShapeError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// Inconsistent or missing configuration (bad key, absent skip feature, ...).
class ConfigError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Malformed input document. `line()` is 0 when unknown.
class ParseError : public std::runtime_error {
public:
	ParseError(const std::string& what, std::size_t line)
	    : std::runtime_error(what), line_(line) {}
	std::size_t line() const noexcept { return line_; }

private:
	std::size_t line_;
};

} // namespace fogdet
