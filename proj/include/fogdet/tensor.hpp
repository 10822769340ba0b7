#pragma once

// Dense double-precision tensor with tape-free reverse-mode autograd.
//
// Every op output keeps shared ownership of its inputs plus a closure that
// pushes its gradient back to them. `backward()` walks that graph once in
// reverse topological order and then releases it.

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fogdet/errors.hpp"

namespace fogdet {

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
using BackwardFn = std::function<void(TensorImpl& self)>;

struct TensorImpl {
	Shape shape;
	std::vector<double> data;
	std::vector<double> grad; // empty until first accumulation
	bool requires_grad{false};
	std::vector<std::shared_ptr<TensorImpl>> parents;
	BackwardFn backward;

	/// Gradient buffer, zero-allocated on first use.
	double* grad_buffer();
};

class Tensor {
public:
	Tensor() = default;
	explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

	static Tensor zeros(Shape shape, bool requires_grad = false);
	static Tensor full(Shape shape, double value, bool requires_grad = false);
	static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
	static Tensor scalar(double value);
	/// Uniform in [lo, hi).
	static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
	static Tensor normal(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

	bool defined() const noexcept { return static_cast<bool>(impl_); }
	const Shape& shape() const { return impl_->shape; }
	int ndim() const { return static_cast<int>(impl_->shape.size()); }
	int dim(int i) const;
	std::size_t numel() const { return impl_->data.size(); }

	std::span<double> data() { return impl_->data; }
	std::span<const double> data() const { return impl_->data; }
	double item() const;
	double operator[](std::size_t i) const { return impl_->data[i]; }
	double& operator[](std::size_t i) { return impl_->data[i]; }

	bool requires_grad() const { return impl_->requires_grad; }
	void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
	bool has_grad() const { return !impl_->grad.empty(); }
	/// Mutable gradient view; allocates zeros if none accumulated yet.
	std::span<double> grad();
	/// Read-only gradient view; empty when nothing was accumulated.
	std::span<const double> grad() const { return impl_->grad; }
	void zero_grad();

	/// Reverse-mode sweep from this scalar. Releases the graph afterwards.
	void backward();

	/// Same values, no history, fresh storage.
	Tensor detach() const;
	Tensor clone() const { return detach(); }

	TensorImpl* impl() const { return impl_.get(); }
	const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
	std::shared_ptr<TensorImpl> impl_;
};

bool grad_enabled() noexcept;

/// Disables graph construction for its lifetime (thread-local).
class NoGradGuard {
public:
	NoGradGuard();
	~NoGradGuard();
	NoGradGuard(const NoGradGuard&) = delete;
	NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
	bool previous_;
};

namespace autograd {

/// Wraps freshly computed `values` as an op output. History is recorded only
/// when grad mode is on and at least one input requires grad.
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs, BackwardFn fn);

/// True when `parent` wants a gradient contribution.
inline bool wants_grad(const std::shared_ptr<TensorImpl>& parent) {
	return parent && parent->requires_grad;
}

} // namespace autograd

} // namespace fogdet
