#include "multer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace multer {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool req_grad)
    : shape(std::move(s)), data(std::move(d)), requires_grad(req_grad) {
    for (auto e : shape) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

void Tensor::accum_grad(const std::vector<double>& g) {
    if (g.size() != data.size()) {
        throw DimensionError("gradient length " + std::to_string(g.size()) +
                             " does not match tensor " + shape_str(shape));
    }
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

TensorPtr zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

TensorPtr full(Shape shape, double value, bool requires_grad) {
    auto n = numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

TensorPtr scalar(double value, bool requires_grad) {
    return make_tensor({1}, {value}, requires_grad);
}

TensorPtr rand_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
    auto n = numel(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = dist(rng);
    return make_tensor(std::move(shape), std::move(d), requires_grad);
}

void Tape::record(std::vector<TensorPtr> inputs, TensorPtr output, std::function<void()> backward) {
    if (!grad_enabled_) return;
    outputs_.insert(output.get());
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const TensorPtr& loss) {
    if (!loss || loss->size() != 1) {
        throw UsageError("backward requires a scalar loss, got " +
                         std::string(loss ? shape_str(loss->shape) : "null"));
    }
    if (!contains(loss.get())) {
        throw UsageError("backward: loss tensor is not an output recorded on this tape");
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // nothing ever flowed into this node
        it->backward();
    }
}

namespace {

bool track(const Tape& tape, std::initializer_list<const TensorPtr*> inputs) {
    if (!tape.grad_enabled()) return false;
    for (auto* t : inputs) {
        if (*t && (*t)->requires_grad) return true;
    }
    return false;
}

}  // namespace

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2) {
        throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a->shape) +
                             " and " + shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0], p = a->shape[1];
    const std::int64_t p2 = b->shape[0], q = b->shape[1];
    if (p != p2) {
        throw DimensionError("matmul inner extents disagree: " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    std::vector<double> out(static_cast<std::size_t>(m * q), 0.0);
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t k = 0; k < p; ++k) {
            const double av = a->data[static_cast<std::size_t>(i * p + k)];
            if (av == 0.0) continue;
            const double* brow = b->data.data() + static_cast<std::size_t>(k * q);
            double* orow = out.data() + static_cast<std::size_t>(i * q);
            for (std::int64_t j = 0; j < q; ++j) orow[j] += av * brow[j];
        }
    }
    const bool rec = track(tape, {&a, &b});
    auto y = make_tensor({m, q}, std::move(out), rec);
    if (rec) {
        tape.record({a, b}, y, [a, b, y, m, p, q]() {
            if (a->requires_grad) {
                std::vector<double> ga(static_cast<std::size_t>(m * p), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < q; ++j) {
                        const double g = y->grad[static_cast<std::size_t>(i * q + j)];
                        if (g == 0.0) continue;
                        const double* brow = b->data.data() + static_cast<std::size_t>(j);
                        for (std::int64_t k = 0; k < p; ++k) {
                            ga[static_cast<std::size_t>(i * p + k)] += g * brow[static_cast<std::size_t>(k * q)];
                        }
                    }
                }
                a->accum_grad(ga);
            }
            if (b->requires_grad) {
                std::vector<double> gb(static_cast<std::size_t>(p * q), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t k = 0; k < p; ++k) {
                        const double av = a->data[static_cast<std::size_t>(i * p + k)];
                        if (av == 0.0) continue;
                        const double* grow = y->grad.data() + static_cast<std::size_t>(i * q);
                        double* gbrow = gb.data() + static_cast<std::size_t>(k * q);
                        for (std::int64_t j = 0; j < q; ++j) gbrow[j] += av * grow[j];
                    }
                }
                b->accum_grad(gb);
            }
        });
    }
    return y;
}

namespace {

std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Zero-padded copy of one sample, all channels, contiguous [C×Hp×Wp].
void pad_sample(const double* src, std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t pad, std::vector<double>& dst) {
    const std::int64_t hp = h + 2 * pad, wp = w + 2 * pad;
    std::fill(dst.begin(), dst.end(), 0.0);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t y = 0; y < h; ++y) {
            const double* s = src + (ci * h + y) * w;
            double* d = dst.data() + (ci * hp + y + pad) * wp + pad;
            std::copy(s, s + w, d);
        }
    }
}

}  // namespace

TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernels,
                 std::int64_t stride, std::int64_t pad) {
    if (input->shape.size() != 4 || kernels->shape.size() != 4) {
        throw DimensionError("conv2d expects input [B×C×H×W] and kernels [O×C×kh×kw], got " +
                             shape_str(input->shape) + " and " + shape_str(kernels->shape));
    }
    const std::int64_t B = input->shape[0], C = input->shape[1], H = input->shape[2], W = input->shape[3];
    const std::int64_t O = kernels->shape[0], C2 = kernels->shape[1], KH = kernels->shape[2], KW = kernels->shape[3];
    if (C != C2) {
        throw DimensionError("conv2d channel mismatch: " + shape_str(input->shape) + " vs " +
                             shape_str(kernels->shape));
    }
    if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
    if (pad < 0) throw DimensionError("conv2d pad must be >= 0");
    const std::int64_t HO = conv_out_extent(H, KH, stride, pad);
    const std::int64_t WO = conv_out_extent(W, KW, stride, pad);
    if (HO <= 0 || WO <= 0) {
        throw DimensionError("conv2d output extent non-positive for input " + shape_str(input->shape) +
                             ", kernel " + shape_str(kernels->shape) + ", stride " + std::to_string(stride) +
                             ", pad " + std::to_string(pad));
    }

    const std::int64_t HP = H + 2 * pad, WP = W + 2 * pad;
    std::vector<double> out(static_cast<std::size_t>(B * O * HO * WO), 0.0);
    std::vector<double> xpad(static_cast<std::size_t>(C * HP * WP));
    for (std::int64_t n = 0; n < B; ++n) {
        pad_sample(input->data.data() + n * C * H * W, C, H, W, pad, xpad);
        for (std::int64_t o = 0; o < O; ++o) {
            double* oplane = out.data() + ((n * O + o) * HO) * WO;
            const double* kbase = kernels->data.data() + o * C * KH * KW;
            for (std::int64_t ci = 0; ci < C; ++ci) {
                const double* xplane = xpad.data() + ci * HP * WP;
                const double* kplane = kbase + ci * KH * KW;
                for (std::int64_t ho = 0; ho < HO; ++ho) {
                    const std::int64_t hi = ho * stride;
                    double* orow = oplane + ho * WO;
                    for (std::int64_t kh = 0; kh < KH; ++kh) {
                        const double* xrow = xplane + (hi + kh) * WP;
                        const double* krow = kplane + kh * KW;
                        for (std::int64_t wo = 0; wo < WO; ++wo) {
                            const double* xp = xrow + wo * stride;
                            double acc = 0.0;
                            for (std::int64_t kw = 0; kw < KW; ++kw) acc += xp[kw] * krow[kw];
                            orow[wo] += acc;
                        }
                    }
                }
            }
        }
    }

    const bool rec = track(tape, {&input, &kernels});
    auto y = make_tensor({B, O, HO, WO}, std::move(out), rec);
    if (rec) {
        tape.record({input, kernels}, y, [input, kernels, y, B, C, H, W, O, KH, KW, HO, WO, stride, pad]() {
            const std::int64_t HP = H + 2 * pad, WP = W + 2 * pad;
            std::vector<double> xpad(static_cast<std::size_t>(C * HP * WP));
            std::vector<double> gpad(static_cast<std::size_t>(C * HP * WP));
            std::vector<double> gx(input->requires_grad ? input->data.size() : 0, 0.0);
            std::vector<double> gk(kernels->requires_grad ? kernels->data.size() : 0, 0.0);
            for (std::int64_t n = 0; n < B; ++n) {
                if (input->requires_grad) std::fill(gpad.begin(), gpad.end(), 0.0);
                if (kernels->requires_grad) {
                    pad_sample(input->data.data() + n * C * H * W, C, H, W, pad, xpad);
                }
                for (std::int64_t o = 0; o < O; ++o) {
                    const double* gplane = y->grad.data() + ((n * O + o) * HO) * WO;
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        const double* kplane = kernels->data.data() + (o * C + ci) * KH * KW;
                        double* gkplane = kernels->requires_grad ? gk.data() + (o * C + ci) * KH * KW : nullptr;
                        double* gxplane = input->requires_grad ? gpad.data() + ci * HP * WP : nullptr;
                        const double* xplane = kernels->requires_grad ? xpad.data() + ci * HP * WP : nullptr;
                        for (std::int64_t ho = 0; ho < HO; ++ho) {
                            const std::int64_t hi = ho * stride;
                            const double* grow = gplane + ho * WO;
                            for (std::int64_t kh = 0; kh < KH; ++kh) {
                                for (std::int64_t wo = 0; wo < WO; ++wo) {
                                    const double g = grow[wo];
                                    if (g == 0.0) continue;
                                    const std::int64_t base = (hi + kh) * WP + wo * stride;
                                    if (gxplane) {
                                        const double* krow = kplane + kh * KW;
                                        double* gxrow = gxplane + base;
                                        for (std::int64_t kw = 0; kw < KW; ++kw) gxrow[kw] += g * krow[kw];
                                    }
                                    if (gkplane) {
                                        const double* xrow = xplane + base;
                                        double* gkrow = gkplane + kh * KW;
                                        for (std::int64_t kw = 0; kw < KW; ++kw) gkrow[kw] += g * xrow[kw];
                                    }
                                }
                            }
                        }
                    }
                }
                if (input->requires_grad) {
                    // strip the padding back off
                    for (std::int64_t ci = 0; ci < C; ++ci) {
                        for (std::int64_t yy = 0; yy < H; ++yy) {
                            const double* s = gpad.data() + (ci * HP + yy + pad) * WP + pad;
                            double* d = gx.data() + ((n * C + ci) * H + yy) * W;
                            for (std::int64_t xx = 0; xx < W; ++xx) d[xx] += s[xx];
                        }
                    }
                }
            }
            if (input->requires_grad) input->accum_grad(gx);
            if (kernels->requires_grad) kernels->accum_grad(gk);
        });
    }
    return y;
}

TensorPtr max_pool2d(Tape& tape, const TensorPtr& input, std::int64_t k,
                     std::int64_t stride, std::int64_t pad) {
    if (input->shape.size() != 4) {
        throw DimensionError("max_pool2d expects [B×C×H×W], got " + shape_str(input->shape));
    }
    const std::int64_t B = input->shape[0], C = input->shape[1], H = input->shape[2], W = input->shape[3];
    const std::int64_t HO = conv_out_extent(H, k, stride, pad);
    const std::int64_t WO = conv_out_extent(W, k, stride, pad);
    if (HO <= 0 || WO <= 0) {
        throw DimensionError("max_pool2d output extent non-positive for input " + shape_str(input->shape));
    }
    std::vector<double> out(static_cast<std::size_t>(B * C * HO * WO));
    // flat index into the input of each cell's max; first max wins ties
    std::vector<std::int64_t> argmax(out.size());
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xplane = input->data.data() + (n * C + c) * H * W;
            for (std::int64_t ho = 0; ho < HO; ++ho) {
                for (std::int64_t wo = 0; wo < WO; ++wo) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t kh = 0; kh < k; ++kh) {
                        const std::int64_t hi = ho * stride - pad + kh;
                        if (hi < 0 || hi >= H) continue;
                        for (std::int64_t kw = 0; kw < k; ++kw) {
                            const std::int64_t wi = wo * stride - pad + kw;
                            if (wi < 0 || wi >= W) continue;
                            const double v = xplane[hi * W + wi];
                            if (v > best) {
                                best = v;
                                best_idx = (n * C + c) * H * W + hi * W + wi;
                            }
                        }
                    }
                    // window fully in padding: max over zeros
                    if (best_idx < 0) best = 0.0;
                    const std::size_t oi =
                        static_cast<std::size_t>(((n * C + c) * HO + ho) * WO + wo);
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    const bool rec = track(tape, {&input});
    auto y = make_tensor({B, C, HO, WO}, std::move(out), rec);
    if (rec) {
        tape.record({input}, y, [input, y, argmax = std::move(argmax)]() {
            if (!input->requires_grad) return;
            std::vector<double> gx(input->data.size(), 0.0);
            for (std::size_t i = 0; i < argmax.size(); ++i) {
                if (argmax[i] >= 0) gx[static_cast<std::size_t>(argmax[i])] += y->grad[i];
            }
            input->accum_grad(gx);
        });
    }
    return y;
}

TensorPtr relu(Tape& tape, const TensorPtr& x) {
    std::vector<double> out(x->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    const bool rec = track(tape, {&x});
    auto y = make_tensor(x->shape, std::move(out), rec);
    if (rec) {
        tape.record({x}, y, [x, y]() {
            if (!x->requires_grad) return;
            std::vector<double> gx(x->data.size());
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x->data[i] > 0.0 ? y->grad[i] : 0.0;
            x->accum_grad(gx);
        });
    }
    return y;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError("add shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
    const bool rec = track(tape, {&a, &b});
    auto y = make_tensor(a->shape, std::move(out), rec);
    if (rec) {
        tape.record({a, b}, y, [a, b, y]() {
            if (a->requires_grad) a->accum_grad(y->grad);
            if (b->requires_grad) b->accum_grad(y->grad);
        });
    }
    return y;
}

TensorPtr add_bias(Tape& tape, const TensorPtr& x, const TensorPtr& bias) {
    if (x->shape.size() != 2 || bias->shape.size() != 1 || x->shape[1] != bias->shape[0]) {
        throw DimensionError("add_bias expects [B×F] and [F], got " + shape_str(x->shape) + " and " +
                             shape_str(bias->shape));
    }
    const std::int64_t B = x->shape[0], F = x->shape[1];
    std::vector<double> out(x->data.size());
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t f = 0; f < F; ++f) {
            out[static_cast<std::size_t>(n * F + f)] =
                x->data[static_cast<std::size_t>(n * F + f)] + bias->data[static_cast<std::size_t>(f)];
        }
    }
    const bool rec = track(tape, {&x, &bias});
    auto y = make_tensor(x->shape, std::move(out), rec);
    if (rec) {
        tape.record({x, bias}, y, [x, bias, y, B, F]() {
            if (x->requires_grad) x->accum_grad(y->grad);
            if (bias->requires_grad) {
                std::vector<double> gb(static_cast<std::size_t>(F), 0.0);
                for (std::int64_t n = 0; n < B; ++n) {
                    for (std::int64_t f = 0; f < F; ++f) {
                        gb[static_cast<std::size_t>(f)] += y->grad[static_cast<std::size_t>(n * F + f)];
                    }
                }
                bias->accum_grad(gb);
            }
        });
    }
    return y;
}

TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError("mul shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
    const bool rec = track(tape, {&a, &b});
    auto y = make_tensor(a->shape, std::move(out), rec);
    if (rec) {
        tape.record({a, b}, y, [a, b, y]() {
            if (a->requires_grad) {
                std::vector<double> ga(a->data.size());
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = b->data[i] * y->grad[i];
                a->accum_grad(ga);
            }
            if (b->requires_grad) {
                std::vector<double> gb(b->data.size());
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = a->data[i] * y->grad[i];
                b->accum_grad(gb);
            }
        });
    }
    return y;
}

TensorPtr scale(Tape& tape, const TensorPtr& a, double s) {
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * s;
    const bool rec = track(tape, {&a});
    auto y = make_tensor(a->shape, std::move(out), rec);
    if (rec) {
        tape.record({a}, y, [a, y, s]() {
            if (!a->requires_grad) return;
            std::vector<double> ga(a->data.size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = s * y->grad[i];
            a->accum_grad(ga);
        });
    }
    return y;
}

TensorPtr concat(Tape& tape, const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const auto rank = static_cast<int>(parts[0]->shape.size());
    if (axis < 0 || axis >= rank) {
        throw DimensionError("concat axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    }
    Shape out_shape = parts[0]->shape;
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (static_cast<int>(p->shape.size()) != rank) {
            throw DimensionError("concat rank mismatch: " + shape_str(parts[0]->shape) + " vs " +
                                 shape_str(p->shape));
        }
        for (int d = 0; d < rank; ++d) {
            if (d != axis && p->shape[d] != out_shape[d]) {
                throw DimensionError("concat shape mismatch off axis: " + shape_str(parts[0]->shape) +
                                     " vs " + shape_str(p->shape));
            }
        }
        axis_total += p->shape[axis];
    }
    out_shape[axis] = axis_total;

    // outer = product of extents before axis, inner = product after
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[d];

    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    std::int64_t axis_off = 0;
    for (const auto& p : parts) {
        const std::int64_t pa = p->shape[axis];
        for (std::int64_t ou = 0; ou < outer; ++ou) {
            const double* src = p->data.data() + ou * pa * inner;
            double* dst = out.data() + (ou * axis_total + axis_off) * inner;
            std::copy(src, src + pa * inner, dst);
        }
        axis_off += pa;
    }

    bool rec = tape.grad_enabled() &&
               std::any_of(parts.begin(), parts.end(), [](const TensorPtr& p) { return p->requires_grad; });
    auto y = make_tensor(out_shape, std::move(out), rec);
    if (rec) {
        tape.record(parts, y, [parts, y, outer, inner, axis_total, axis]() {
            std::int64_t axis_off = 0;
            for (const auto& p : parts) {
                const std::int64_t pa = p->shape[axis];
                if (p->requires_grad) {
                    std::vector<double> gp(p->data.size());
                    for (std::int64_t ou = 0; ou < outer; ++ou) {
                        const double* src = y->grad.data() + (ou * axis_total + axis_off) * inner;
                        double* dst = gp.data() + ou * pa * inner;
                        std::copy(src, src + pa * inner, dst);
                    }
                    p->accum_grad(gp);
                }
                axis_off += pa;
            }
        });
    }
    return y;
}

std::vector<TensorPtr> split(const TensorPtr& x, int axis, const std::vector<std::int64_t>& sizes) {
    const auto rank = static_cast<int>(x->shape.size());
    if (axis < 0 || axis >= rank) {
        throw DimensionError("split axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    }
    std::int64_t total = 0;
    for (auto s : sizes) total += s;
    if (total != x->shape[axis]) {
        throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis extent is " +
                             std::to_string(x->shape[axis]));
    }
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x->shape[d];
    for (int d = axis + 1; d < rank; ++d) inner *= x->shape[d];

    std::vector<TensorPtr> parts;
    std::int64_t axis_off = 0;
    for (auto sz : sizes) {
        Shape ps = x->shape;
        ps[axis] = sz;
        std::vector<double> pd(static_cast<std::size_t>(numel(ps)));
        for (std::int64_t ou = 0; ou < outer; ++ou) {
            const double* src = x->data.data() + (ou * x->shape[axis] + axis_off) * inner;
            std::copy(src, src + sz * inner, pd.data() + ou * sz * inner);
        }
        parts.push_back(make_tensor(std::move(ps), std::move(pd)));
        axis_off += sz;
    }
    return parts;
}

TensorPtr softmax(Tape& tape, const TensorPtr& x) {
    if (x->shape.empty()) throw DimensionError("softmax expects rank >= 1");
    const std::int64_t K = x->shape.back();
    const std::int64_t rows = x->size() / K;
    for (double v : x->data) {
        if (!std::isfinite(v)) throw NumericError("softmax input contains a non-finite value");
    }
    std::vector<double> out(x->data.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x->data.data() + r * K;
        double* yr = out.data() + r * K;
        double mx = xr[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double s = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            yr[k] = std::exp(xr[k] - mx);
            s += yr[k];
        }
        for (std::int64_t k = 0; k < K; ++k) yr[k] /= s;
    }
    const bool rec = track(tape, {&x});
    auto y = make_tensor(x->shape, std::move(out), rec);
    if (rec) {
        tape.record({x}, y, [x, y, rows, K]() {
            if (!x->requires_grad) return;
            std::vector<double> gx(x->data.size());
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y->data.data() + r * K;
                const double* gr = y->grad.data() + r * K;
                double dot = 0.0;
                for (std::int64_t k = 0; k < K; ++k) dot += yr[k] * gr[k];
                for (std::int64_t k = 0; k < K; ++k) {
                    gx[static_cast<std::size_t>(r * K + k)] = yr[k] * (gr[k] - dot);
                }
            }
            x->accum_grad(gx);
        });
    }
    return y;
}

TensorPtr global_avg_pool(Tape& tape, const TensorPtr& x) {
    if (x->shape.size() != 4) {
        throw DimensionError("global_avg_pool expects [B×D×H×W], got " + shape_str(x->shape));
    }
    const std::int64_t B = x->shape[0], D = x->shape[1], HW = x->shape[2] * x->shape[3];
    std::vector<double> out(static_cast<std::size_t>(B * D));
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t d = 0; d < D; ++d) {
            const double* p = x->data.data() + (n * D + d) * HW;
            double s = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) s += p[i];
            out[static_cast<std::size_t>(n * D + d)] = s / static_cast<double>(HW);
        }
    }
    const bool rec = track(tape, {&x});
    auto y = make_tensor({B, D}, std::move(out), rec);
    if (rec) {
        tape.record({x}, y, [x, y, B, D, HW]() {
            if (!x->requires_grad) return;
            std::vector<double> gx(x->data.size());
            const double inv = 1.0 / static_cast<double>(HW);
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t d = 0; d < D; ++d) {
                    const double g = y->grad[static_cast<std::size_t>(n * D + d)] * inv;
                    double* p = gx.data() + (n * D + d) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) p[i] = g;
                }
            }
            x->accum_grad(gx);
        });
    }
    return y;
}

TensorPtr outer_product(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2) {
        throw DimensionError("outer_product expects rank-2 operands, got " + shape_str(a->shape) +
                             " and " + shape_str(b->shape));
    }
    if (a->shape[0] != b->shape[0]) {
        throw DimensionError("outer_product batch mismatch: " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    const std::int64_t B = a->shape[0], P = a->shape[1], Q = b->shape[1];
    std::vector<double> out(static_cast<std::size_t>(B * P * Q));
    for (std::int64_t n = 0; n < B; ++n) {
        const double* ar = a->data.data() + n * P;
        const double* br = b->data.data() + n * Q;
        double* yr = out.data() + n * P * Q;
        for (std::int64_t p = 0; p < P; ++p) {
            for (std::int64_t q = 0; q < Q; ++q) yr[p * Q + q] = ar[p] * br[q];
        }
    }
    const bool rec = track(tape, {&a, &b});
    auto y = make_tensor({B, P * Q}, std::move(out), rec);
    if (rec) {
        tape.record({a, b}, y, [a, b, y, B, P, Q]() {
            if (a->requires_grad) {
                std::vector<double> ga(a->data.size(), 0.0);
                for (std::int64_t n = 0; n < B; ++n) {
                    const double* br = b->data.data() + n * Q;
                    const double* gr = y->grad.data() + n * P * Q;
                    for (std::int64_t p = 0; p < P; ++p) {
                        double s = 0.0;
                        for (std::int64_t q = 0; q < Q; ++q) s += gr[p * Q + q] * br[q];
                        ga[static_cast<std::size_t>(n * P + p)] = s;
                    }
                }
                a->accum_grad(ga);
            }
            if (b->requires_grad) {
                std::vector<double> gb(b->data.size(), 0.0);
                for (std::int64_t n = 0; n < B; ++n) {
                    const double* ar = a->data.data() + n * P;
                    const double* gr = y->grad.data() + n * P * Q;
                    for (std::int64_t q = 0; q < Q; ++q) {
                        double s = 0.0;
                        for (std::int64_t p = 0; p < P; ++p) s += gr[p * Q + q] * ar[p];
                        gb[static_cast<std::size_t>(n * Q + q)] = s;
                    }
                }
                b->accum_grad(gb);
            }
        });
    }
    return y;
}

TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape new_shape) {
    if (numel(new_shape) != x->size()) {
        throw DimensionError("reshape from " + shape_str(x->shape) + " to " + shape_str(new_shape) +
                             " changes element count");
    }
    const bool rec = track(tape, {&x});
    auto y = make_tensor(std::move(new_shape), x->data, rec);
    if (rec) {
        tape.record({x}, y, [x, y]() {
            if (x->requires_grad) x->accum_grad(y->grad);
        });
    }
    return y;
}

TensorPtr sum(Tape& tape, const TensorPtr& x) {
    double s = 0.0;
    for (double v : x->data) s += v;
    const bool rec = track(tape, {&x});
    auto y = make_tensor({1}, {s}, rec);
    if (rec) {
        tape.record({x}, y, [x, y]() {
            if (!x->requires_grad) return;
            std::vector<double> gx(x->data.size(), y->grad[0]);
            x->accum_grad(gx);
        });
    }
    return y;
}

BatchNorm make_batch_norm(std::int64_t features) {
    BatchNorm bn;
    bn.gamma = full({features}, 1.0, true);
    bn.beta = zeros({features}, true);
    bn.running_mean.assign(static_cast<std::size_t>(features), 0.0);
    bn.running_var.assign(static_cast<std::size_t>(features), 1.0);
    return bn;
}

namespace {

// Shared normalization core: x viewed as `rows` groups of F features where
// the statistic for feature f pools `count` values. index(r, f) maps into x.
template <typename IndexFn>
TensorPtr batch_norm_impl(Tape& tape, const TensorPtr& x, BatchNorm& bn, Mode mode,
                          std::int64_t F, std::int64_t count_per_feature, IndexFn index,
                          std::int64_t rows, const char* what) {
    if (bn.gamma->shape != Shape{F} || bn.beta->shape != Shape{F}) {
        throw DimensionError(std::string(what) + ": gamma/beta extent does not match feature extent " +
                             std::to_string(F));
    }
    if (mode == Mode::Train && count_per_feature < 2) {
        throw ConfigError(std::string(what) + ": train mode needs at least 2 values per feature, got " +
                          std::to_string(count_per_feature));
    }

    std::vector<double> mean(static_cast<std::size_t>(F), 0.0);
    std::vector<double> var(static_cast<std::size_t>(F), 0.0);
    if (mode == Mode::Train) {
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t f = 0; f < F; ++f) mean[static_cast<std::size_t>(f)] += x->data[index(r, f)];
        }
        const double inv = 1.0 / static_cast<double>(count_per_feature);
        for (auto& m : mean) m *= inv;
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t f = 0; f < F; ++f) {
                const double d = x->data[index(r, f)] - mean[static_cast<std::size_t>(f)];
                var[static_cast<std::size_t>(f)] += d * d;
            }
        }
        for (auto& v : var) v *= inv;
        for (std::int64_t f = 0; f < F; ++f) {
            bn.running_mean[static_cast<std::size_t>(f)] =
                (1.0 - bn.momentum) * bn.running_mean[static_cast<std::size_t>(f)] +
                bn.momentum * mean[static_cast<std::size_t>(f)];
            bn.running_var[static_cast<std::size_t>(f)] =
                (1.0 - bn.momentum) * bn.running_var[static_cast<std::size_t>(f)] +
                bn.momentum * var[static_cast<std::size_t>(f)];
        }
    } else {
        mean = bn.running_mean;
        var = bn.running_var;
    }

    std::vector<double> invstd(static_cast<std::size_t>(F));
    for (std::int64_t f = 0; f < F; ++f) {
        invstd[static_cast<std::size_t>(f)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + bn.eps);
    }

    std::vector<double> out(x->data.size());
    std::vector<double> xhat(x->data.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t f = 0; f < F; ++f) {
            const std::size_t i = index(r, f);
            const std::size_t fs = static_cast<std::size_t>(f);
            const double xn = (x->data[i] - mean[fs]) * invstd[fs];
            xhat[i] = xn;
            out[i] = xn * bn.gamma->data[fs] + bn.beta->data[fs];
        }
    }

    auto gamma = bn.gamma;
    auto beta = bn.beta;
    const bool rec = track(tape, {&x, &gamma, &beta});
    auto y = make_tensor(x->shape, std::move(out), rec);
    if (rec) {
        const bool train_stats = (mode == Mode::Train);
        tape.record({x, gamma, beta}, y,
                    [x, gamma, beta, y, F, rows, count_per_feature, index, train_stats,
                     xhat = std::move(xhat), invstd = std::move(invstd)]() {
            std::vector<double> sum_dy(static_cast<std::size_t>(F), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<std::size_t>(F), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t f = 0; f < F; ++f) {
                    const std::size_t i = index(r, f);
                    const std::size_t fs = static_cast<std::size_t>(f);
                    sum_dy[fs] += y->grad[i];
                    sum_dy_xhat[fs] += y->grad[i] * xhat[i];
                }
            }
            if (beta->requires_grad) beta->accum_grad(sum_dy);
            if (gamma->requires_grad) gamma->accum_grad(sum_dy_xhat);
            if (x->requires_grad) {
                std::vector<double> gx(x->data.size());
                const double m = static_cast<double>(count_per_feature);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t f = 0; f < F; ++f) {
                        const std::size_t i = index(r, f);
                        const std::size_t fs = static_cast<std::size_t>(f);
                        if (train_stats) {
                            gx[i] = gamma->data[fs] * invstd[fs] / m *
                                    (m * y->grad[i] - sum_dy[fs] - xhat[i] * sum_dy_xhat[fs]);
                        } else {
                            // frozen statistics are constants
                            gx[i] = gamma->data[fs] * invstd[fs] * y->grad[i];
                        }
                    }
                }
                x->accum_grad(gx);
            }
        });
    }
    return y;
}

}  // namespace

TensorPtr batch_norm(Tape& tape, const TensorPtr& x, BatchNorm& bn, Mode mode) {
    if (x->shape.size() != 2) {
        throw DimensionError("batch_norm expects [B×F], got " + shape_str(x->shape));
    }
    const std::int64_t B = x->shape[0], F = x->shape[1];
    auto index = [F](std::int64_t r, std::int64_t f) { return static_cast<std::size_t>(r * F + f); };
    return batch_norm_impl(tape, x, bn, mode, F, B, index, B, "batch_norm");
}

TensorPtr batch_norm2d(Tape& tape, const TensorPtr& x, BatchNorm& bn, Mode mode) {
    if (x->shape.size() != 4) {
        throw DimensionError("batch_norm2d expects [B×C×H×W], got " + shape_str(x->shape));
    }
    const std::int64_t B = x->shape[0], C = x->shape[1], HW = x->shape[2] * x->shape[3];
    // row r = (sample, spatial position); feature f = channel
    auto index = [C, HW](std::int64_t r, std::int64_t f) {
        const std::int64_t n = r / HW, s = r % HW;
        return static_cast<std::size_t>((n * C + f) * HW + s);
    };
    return batch_norm_impl(tape, x, bn, mode, C, B * HW, index, B * HW, "batch_norm2d");
}

Linear make_linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear fc;
    fc.w = rand_uniform({in, out}, -bound, bound, rng, true);
    fc.b = zeros({out}, true);
    return fc;
}

TensorPtr linear(Tape& tape, const TensorPtr& x, const Linear& fc) {
    return add_bias(tape, matmul(tape, x, fc.w), fc.b);
}

std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& x, double eps) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(x.size()));
    std::iota(idx.begin(), idx.end(), 0);
    return finite_diff_grad_at(f, x, idx, eps);
}

std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor& x,
                                        const std::vector<std::int64_t>& indices, double eps) {
    if (eps <= 0.0) throw UsageError("finite_diff_grad eps must be > 0");
    std::vector<double> g(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto i = static_cast<std::size_t>(indices[k]);
        const double orig = x.data[i];
        x.data[i] = orig + eps;
        const double fp = f();
        x.data[i] = orig - eps;
        const double fm = f();
        x.data[i] = orig;
        g[k] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

double rel_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

double max_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw UsageError("max_rel_error length mismatch");
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, rel_error(a[i], b[i]));
    return mx;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace multer
