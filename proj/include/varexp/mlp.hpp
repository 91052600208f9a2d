#pragma once

// Dense ReLU multilayer perceptron with hand-written reverse mode.
//
// Batches are column-major: each column of the input matrix is one sample.
// Hidden layers use ReLU (derivative 0 at exactly 0); the output layer is
// linear.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "varexp/rng.hpp"

namespace varexp {

struct LayerParams {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
};

using ParamSet = std::vector<LayerParams>;

/// `depth` counts linear layers, so depth 1 is a single affine map.
struct MlpShape {
    int input_dim = 2;
    int output_dim = 2;
    int hidden_dim = 128;
    int depth = 4;

    std::vector<int> layer_dims() const {
        std::vector<int> dims{input_dim};
        for (int k = 0; k + 1 < depth; ++k) dims.push_back(hidden_dim);
        dims.push_back(output_dim);
        return dims;
    }

    void validate() const {
        if (input_dim < 1 || output_dim < 1 || depth < 1 || (depth > 1 && hidden_dim < 1))
            throw std::invalid_argument("invalid MLP shape");
    }

    friend bool operator==(const MlpShape&, const MlpShape&) = default;
};

inline ParamSet zeros_like(const ParamSet& p) {
    ParamSet out(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
        out[k].weight = Eigen::MatrixXd::Zero(p[k].weight.rows(), p[k].weight.cols());
        out[k].bias = Eigen::VectorXd::Zero(p[k].bias.size());
    }
    return out;
}

inline std::size_t parameter_count(const ParamSet& p) {
    std::size_t n = 0;
    for (const auto& l : p) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

class Mlp;

/// Activations recorded by a forward pass; consumed by backward.
struct Tape {
    const Mlp* owner = nullptr;
    std::uint64_t version = 0;
    /// inputs[k] is the input to layer k (post-ReLU for k > 0).
    std::vector<Eigen::MatrixXd> inputs;

    bool empty() const noexcept { return owner == nullptr; }
};

class Mlp {
public:
    Mlp() = default;

    /// Zero-initialized network of the given shape.
    explicit Mlp(const MlpShape& shape) : shape_(shape) {
        shape.validate();
        const auto dims = shape.layer_dims();
        layers_.resize(dims.size() - 1);
        for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
            layers_[k].weight = Eigen::MatrixXd::Zero(dims[k + 1], dims[k]);
            layers_[k].bias = Eigen::VectorXd::Zero(dims[k + 1]);
        }
    }

    /// He-normal weights (std sqrt(2 / fan_in)), zero biases.
    static Mlp he_init(const MlpShape& shape, RngStream& rng) {
        Mlp net(shape);
        for (auto& l : net.layers_) {
            const double std = std::sqrt(2.0 / static_cast<double>(l.weight.cols()));
            for (Eigen::Index j = 0; j < l.weight.cols(); ++j)
                for (Eigen::Index i = 0; i < l.weight.rows(); ++i) l.weight(i, j) = std * rng.normal();
        }
        return net;
    }

    const MlpShape& shape() const noexcept { return shape_; }
    int input_dim() const noexcept { return shape_.input_dim; }
    int output_dim() const noexcept { return shape_.output_dim; }
    const ParamSet& params() const noexcept { return layers_; }

    /// Mutable access invalidates outstanding tapes.
    ParamSet& mutable_params() noexcept {
        ++version_;
        return layers_;
    }

    std::uint64_t version() const noexcept { return version_; }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& batch, Tape* tape = nullptr) const {
        if (batch.rows() != shape_.input_dim)
            throw std::invalid_argument("batch has " + std::to_string(batch.rows()) + " features, network expects " +
                                        std::to_string(shape_.input_dim));
        if (tape) {
            tape->owner = this;
            tape->version = version_;
            tape->inputs.resize(layers_.size());
        }
        Eigen::MatrixXd h = batch;
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            if (tape) tape->inputs[k] = h;
            Eigen::MatrixXd pre = layers_[k].weight * h;
            pre.colwise() += layers_[k].bias;
            if (k + 1 < layers_.size()) {
                h = pre.cwiseMax(0.0);
            } else {
                h = std::move(pre);
            }
        }
        return h;
    }

    /// Accumulates parameter gradients of sum_j <upstream_j, f(x_j)> into
    /// `grads` and returns the gradient with respect to the inputs.
    Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& upstream, ParamSet& grads) const {
        if (tape.owner != this || tape.version != version_ || tape.inputs.size() != layers_.size())
            throw std::logic_error("backward called with a stale or foreign tape");
        if (upstream.rows() != shape_.output_dim || upstream.cols() != tape.inputs.front().cols())
            throw std::invalid_argument("upstream gradient shape mismatch");
        if (grads.size() != layers_.size()) grads = zeros_like(layers_);
        Eigen::MatrixXd delta = upstream;
        for (std::size_t k = layers_.size(); k-- > 0;) {
            const Eigen::MatrixXd& in = tape.inputs[k];
            grads[k].weight.noalias() += delta * in.transpose();
            grads[k].bias += delta.rowwise().sum();
            Eigen::MatrixXd back = layers_[k].weight.transpose() * delta;
            if (k > 0) back = (in.array() > 0.0).select(back, 0.0);
            delta = std::move(back);
        }
        return delta;
    }

    friend bool operator==(const Mlp& a, const Mlp& b) {
        if (!(a.shape_ == b.shape_) || a.layers_.size() != b.layers_.size()) return false;
        for (std::size_t k = 0; k < a.layers_.size(); ++k)
            if (a.layers_[k].weight != b.layers_[k].weight || a.layers_[k].bias != b.layers_[k].bias) return false;
        return true;
    }

private:
    MlpShape shape_;
    ParamSet layers_;
    std::uint64_t version_ = 0;
};

}  // namespace varexp
