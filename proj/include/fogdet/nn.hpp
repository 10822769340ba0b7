#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fogdet/ops.hpp"
#include "fogdet/tensor.hpp"

namespace fogdet::nn {

struct NamedParameter {
	std::string path;
	Tensor tensor;
	bool decay{true}; // weight decay applies (conv / linear weights only)
};

/// Parameter container with stable dotted path names ("neck.lateral0.conv.weight").
/// Modules are pinned in memory: children register by address.
class Module {
public:
	Module() = default;
	virtual ~Module() = default;
	Module(const Module&) = delete;
	Module& operator=(const Module&) = delete;

	std::vector<NamedParameter> named_parameters(const std::string& prefix = "") const;
	std::vector<Tensor> parameters() const;
	std::size_t parameter_count() const;

protected:
	Tensor register_parameter(const std::string& name, Tensor t, bool decay);
	void register_module(const std::string& name, Module& child);

private:
	std::vector<NamedParameter> params_;
	std::vector<std::pair<std::string, Module*>> children_;
};

/// Group count for GroupNorm: about four channels per group, capped at 32.
int default_groups(int channels);

class Conv2d : public Module {
public:
	Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, bool bias, Rng& rng);
	Tensor forward(const Tensor& x) const;

	Tensor weight;
	Tensor bias; // undefined when constructed without bias
	int stride;
	int padding;
};

class ConvTranspose2d : public Module {
public:
	ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int padding, Rng& rng);
	Tensor forward(const Tensor& x) const;

	Tensor weight;
	Tensor bias;
	int stride;
	int padding;
};

class GroupNorm : public Module {
public:
	explicit GroupNorm(int channels, int groups = 0);
	Tensor forward(const Tensor& x) const;

	Tensor gamma;
	Tensor beta;
	int groups;
};

class LayerNorm : public Module {
public:
	explicit LayerNorm(int features);
	Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

	Tensor gamma;
	Tensor beta;
};

class Linear : public Module {
public:
	Linear(int in_f, int out_f, Rng& rng);
	Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

	Tensor weight;
	Tensor bias;
};

/// conv (no bias) -> GroupNorm -> SiLU; "same" padding.
class ConvNormAct : public Module {
public:
	ConvNormAct(int in_ch, int out_ch, int kernel, int stride, Rng& rng);
	Tensor forward(const Tensor& x) const;

	int in_channels() const { return conv_.weight.dim(1); }
	int out_channels() const { return conv_.weight.dim(0); }

private:
	Conv2d conv_;
	GroupNorm norm_;
};

/// Overwrites every parameter value with zero.
void zero_parameters(const Module& m);

} // namespace fogdet::nn
