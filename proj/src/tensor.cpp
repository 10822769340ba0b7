#include "fogdet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace fogdet {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
	std::size_t n = 1;
	for (int d : shape) {
		if (d < 0) {
			throw ShapeError("negative dimension in shape " + shape_str(shape));
		}
		n *= static_cast<std::size_t>(d);
	}
	return n;
}

std::string shape_str(const Shape& shape) {
	std::ostringstream os;
	os << '[';
	for (std::size_t i = 0; i < shape.size(); ++i) {
		os << (i ? "," : "") << shape[i];
	}
	os << ']';
	return os.str();
}

double* TensorImpl::grad_buffer() {
	if (grad.empty()) {
		grad.assign(data.size(), 0.0);
	}
	return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
	return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
	auto impl = std::make_shared<TensorImpl>();
	impl->data.assign(shape_numel(shape), value);
	impl->shape = std::move(shape);
	impl->requires_grad = requires_grad;
	return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
	if (shape_numel(shape) != values.size()) {
		throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
	}
	auto impl = std::make_shared<TensorImpl>();
	impl->shape = std::move(shape);
	impl->data = std::move(values);
	impl->requires_grad = requires_grad;
	return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) {
	return from_data({1}, {value});
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
	Tensor t = zeros(std::move(shape), requires_grad);
	std::uniform_real_distribution<double> dist(lo, hi);
	for (double& v : t.data()) {
		v = dist(rng);
	}
	return t;
}

Tensor Tensor::normal(Shape shape, double stddev, Rng& rng, bool requires_grad) {
	Tensor t = zeros(std::move(shape), requires_grad);
	std::normal_distribution<double> dist(0.0, stddev);
	for (double& v : t.data()) {
		v = dist(rng);
	}
	return t;
}

int Tensor::dim(int i) const {
	const int n = ndim();
	if (i < 0) {
		i += n;
	}
	if (i < 0 || i >= n) {
		throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(shape()));
	}
	return impl_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
	if (numel() != 1) {
		throw ShapeError("item() on tensor of shape " + shape_str(shape()));
	}
	return impl_->data[0];
}

std::span<double> Tensor::grad() {
	impl_->grad_buffer();
	return impl_->grad;
}

void Tensor::zero_grad() {
	std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
	return from_data(impl_->shape, impl_->data, false);
}

void Tensor::backward() {
	if (numel() != 1) {
		throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
	}
	if (!impl_->requires_grad) {
		throw InvalidArgument("backward() on a tensor that does not require grad");
	}

	// Iterative post-order DFS gives a topological order without recursion depth limits.
	// The order holds owning pointers: clearing a node's parents below must not free
	// nodes that are still waiting for their turn.
	std::vector<std::shared_ptr<TensorImpl>> order;
	std::unordered_set<TensorImpl*> seen;
	std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
	stack.emplace_back(impl_, 0);
	seen.insert(impl_.get());
	while (!stack.empty()) {
		auto& top = stack.back();
		if (top.second < top.first->parents.size()) {
			std::shared_ptr<TensorImpl> parent = top.first->parents[top.second++];
			if (parent && parent->requires_grad && seen.insert(parent.get()).second) {
				stack.emplace_back(std::move(parent), 0);
			}
		} else {
			order.push_back(std::move(top.first));
			stack.pop_back();
		}
	}

	impl_->grad_buffer()[0] += 1.0;
	for (auto it = order.rbegin(); it != order.rend(); ++it) {
		TensorImpl* node = it->get();
		if (node->backward && !node->grad.empty()) {
			node->backward(*node);
		}
		// Interior nodes are done; dropping the closure frees saved buffers early.
		node->backward = nullptr;
		node->parents.clear();
		it->reset();
	}
}

bool grad_enabled() noexcept {
	return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
	g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
	g_grad_enabled = previous_;
}

namespace autograd {

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs, BackwardFn fn) {
	Tensor out = Tensor::from_data(std::move(shape), std::move(values));
	if (!g_grad_enabled) {
		return out;
	}
	const bool track = std::any_of(inputs.begin(), inputs.end(),
	                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
	if (!track) {
		return out;
	}
	TensorImpl* impl = out.impl();
	impl->requires_grad = true;
	impl->parents.reserve(inputs.size());
	for (const Tensor& t : inputs) {
		impl->parents.push_back(t.impl_ptr());
	}
	impl->backward = std::move(fn);
	return out;
}

} // namespace autograd

} // namespace fogdet
