#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "multer/errors.hpp"

namespace multer {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { Train, Eval };

// Dense row-major float64 tensor. Data is immutable after construction by
// convention (ops allocate fresh outputs); only the gradient buffer mutates.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d, bool req_grad);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad();
    void zero_grad();
    void accum_grad(const std::vector<double>& g);
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
TensorPtr zeros(Shape shape, bool requires_grad = false);
TensorPtr full(Shape shape, double value, bool requires_grad = false);
TensorPtr scalar(double value, bool requires_grad = false);
TensorPtr rand_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad = false);

// Records the forward pass as an ordered list of operations; every node's
// inputs are produced earlier, so one reverse sweep is a valid backward pass.
// A tape and its tensors belong to a single thread.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    // The backward closure reads output->grad and accumulates into the
    // inputs' grad buffers. No-op when grad recording is disabled.
    void record(std::vector<TensorPtr> inputs, TensorPtr output, std::function<void()> backward);

    bool contains(const Tensor* t) const { return outputs_.count(t) > 0; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Gradients
    // accumulate additively across fan-out.
    void backward(const TensorPtr& loss);

private:
    struct Node {
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
    std::unordered_set<const Tensor*> outputs_;
    bool grad_enabled_ = true;
};

// ---- recorded operations ----

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernels,
                 std::int64_t stride, std::int64_t pad);
TensorPtr max_pool2d(Tape& tape, const TensorPtr& input, std::int64_t k,
                     std::int64_t stride, std::int64_t pad);
TensorPtr relu(Tape& tape, const TensorPtr& x);
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr add_bias(Tape& tape, const TensorPtr& x, const TensorPtr& bias);  // [B×F] + [F]
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& tape, const TensorPtr& a, double s);
TensorPtr concat(Tape& tape, const std::vector<TensorPtr>& parts, int axis);
TensorPtr softmax(Tape& tape, const TensorPtr& x);  // along the last axis
TensorPtr global_avg_pool(Tape& tape, const TensorPtr& x);                  // [B×D×H×W] -> [B×D]
TensorPtr outer_product(Tape& tape, const TensorPtr& a, const TensorPtr& b); // [B×P],[B×Q] -> [B×P·Q]
TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape new_shape);
TensorPtr sum(Tape& tape, const TensorPtr& x);  // -> scalar

// Learnable affine normalization with running statistics.
struct BatchNorm {
    TensorPtr gamma;
    TensorPtr beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.1;  // weight of the new batch statistic
};

BatchNorm make_batch_norm(std::int64_t features);

TensorPtr batch_norm(Tape& tape, const TensorPtr& x, BatchNorm& bn, Mode mode);    // [B×F]
TensorPtr batch_norm2d(Tape& tape, const TensorPtr& x, BatchNorm& bn, Mode mode);  // [B×C×H×W], per channel

// Fully connected layer: y = x·w + b.
struct Linear {
    TensorPtr w;  // [in×out]
    TensorPtr b;  // [out]
};

Linear make_linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng);
TensorPtr linear(Tape& tape, const TensorPtr& x, const Linear& fc);

// Inverse of concat; plain utility, not recorded.
std::vector<TensorPtr> split(const TensorPtr& x, int axis, const std::vector<std::int64_t>& sizes);

// ---- finite-difference oracle ----

// Central difference (f(x+eps·e_i) - f(x-eps·e_i)) / (2·eps) per element.
// f re-runs the forward pass and returns the scalar under study; x is
// perturbed in place and restored.
std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& x, double eps = 1e-5);

// Same, but only at the given flat indices (for large parameter tensors).
std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor& x,
                                        const std::vector<std::int64_t>& indices, double eps = 1e-5);

// Relative error with a floor so near-zero pairs compare absolutely.
double rel_error(double a, double b);
double max_rel_error(const std::vector<double>& a, const std::vector<double>& b);

// splitmix64 step; derives independent seed streams from one run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace multer
