// SPDX-License-Identifier: Apache-2.0
#include "bt/nn.hpp"

#include <cmath>

namespace bt::nn {

ad::Tensor trunc_normal(ad::Shape shape, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
    for (auto& x : v) {
        double s;
        do s = n(rng);
        while (std::abs(s) > 2.0);
        x = s * std;
    }
    return ad::Tensor::parameter(ad::Tensor::from_values(std::move(shape), std::span<const double>(v)));
}

Linear::Linear(std::int64_t in, std::int64_t out, double std, std::mt19937_64& rng)
    : weight(trunc_normal({in, out}, std, rng)),
      bias(ad::Tensor::parameter(ad::Tensor::zeros({out}))) {}

ad::Tensor Linear::operator()(const ad::Tensor& x) const {
    if (x.rank() == 2) return ad::add(ad::matmul(x, weight), bias);
    const auto& s = x.shape();
    const std::int64_t rows = x.numel() / s.back();
    ad::Shape out = s;
    out.back() = weight.size(1);
    return ad::reshape(ad::add(ad::matmul(ad::reshape(x, {rows, s.back()}), weight), bias), out);
}

void Linear::visit(const ParamVisitor& v, const std::string& prefix) {
    v(prefix + ".weight", weight);
    v(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::int64_t dim)
    : gain(ad::Tensor::parameter(ad::Tensor::full({dim}, 1.0))),
      bias(ad::Tensor::parameter(ad::Tensor::zeros({dim}))) {}

ad::Tensor LayerNorm::operator()(const ad::Tensor& x) const { return ad::layer_norm(x, gain, bias); }

void LayerNorm::visit(const ParamVisitor& v, const std::string& prefix) {
    v(prefix + ".gain", gain);
    v(prefix + ".bias", bias);
}

Mlp2::Mlp2(std::int64_t in, std::int64_t hidden, std::int64_t out, double std, double out_std,
           std::mt19937_64& rng)
    : fc1(in, hidden, std, rng), fc2(hidden, out, out_std, rng) {}

ad::Tensor Mlp2::operator()(const ad::Tensor& x) const { return fc2(ad::gelu(fc1(x))); }

void Mlp2::visit(const ParamVisitor& v, const std::string& prefix) {
    fc1.visit(v, prefix + ".fc1");
    fc2.visit(v, prefix + ".fc2");
}

} // namespace bt::nn
