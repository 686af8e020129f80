#include "multer/encoding.hpp"

#include <cmath>

namespace multer {

double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

namespace {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

double effective_smoothing(double raw) { return softplus(raw); }

Codebook make_codebook(std::int64_t k, std::int64_t d, std::mt19937_64& rng) {
    if (k < 1 || d < 1) {
        throw ConfigError("codebook needs K >= 1 and D >= 1, got K=" + std::to_string(k) +
                          " D=" + std::to_string(d));
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(k));
    Codebook cb;
    cb.codewords = rand_uniform({k, d}, -bound, bound, rng, true);
    cb.smoothing = rand_uniform({k}, 0.0, 1.0, rng, true);
    return cb;
}

LemParams make_lem_params(const LemConfig& cfg, std::mt19937_64& rng) {
    if (cfg.d < 1 || cfg.k < 1 || cfg.branch_dim < 1 || cfg.c < 1) {
        throw ConfigError("lem config extents must be positive");
    }
    LemParams p;
    p.cfg = cfg;
    p.codebook = make_codebook(cfg.k, cfg.d, rng);
    p.fc1 = make_linear(cfg.k * cfg.d, cfg.branch_dim, rng);
    p.fc2 = make_linear(cfg.d, cfg.branch_dim, rng);
    p.fc3 = make_linear(cfg.branch_dim * cfg.branch_dim, cfg.c, rng);
    p.bn1 = make_batch_norm(cfg.k * cfg.d);
    p.bn2 = make_batch_norm(cfg.d);
    return p;
}

std::vector<TensorPtr> lem_parameters(LemParams& p) {
    return {p.codebook.codewords, p.codebook.smoothing,
            p.fc1.w, p.fc1.b, p.fc2.w, p.fc2.b, p.fc3.w, p.fc3.b,
            p.bn1.gamma, p.bn1.beta, p.bn2.gamma, p.bn2.beta};
}

TensorPtr reshape_spatial(Tape& tape, const TensorPtr& fmap) {
    if (fmap->shape.size() != 4) {
        throw DimensionError("reshape_spatial expects [B×D×H×W], got " + shape_str(fmap->shape));
    }
    const std::int64_t B = fmap->shape[0], D = fmap->shape[1], N = fmap->shape[2] * fmap->shape[3];
    std::vector<double> out(fmap->data.size());
    for (std::int64_t n = 0; n < B; ++n) {
        const double* src = fmap->data.data() + n * D * N;
        double* dst = out.data() + n * N * D;
        for (std::int64_t d = 0; d < D; ++d) {
            for (std::int64_t i = 0; i < N; ++i) dst[i * D + d] = src[d * N + i];
        }
    }
    const bool rec = tape.grad_enabled() && fmap->requires_grad;
    auto y = make_tensor({B, N, D}, std::move(out), rec);
    if (rec) {
        tape.record({fmap}, y, [fmap, y, B, D, N]() {
            std::vector<double> gx(fmap->data.size());
            for (std::int64_t n = 0; n < B; ++n) {
                const double* src = y->grad.data() + n * N * D;
                double* dst = gx.data() + n * D * N;
                for (std::int64_t d = 0; d < D; ++d) {
                    for (std::int64_t i = 0; i < N; ++i) dst[d * N + i] = src[i * D + d];
                }
            }
            fmap->accum_grad(gx);
        });
    }
    return y;
}

TensorPtr assign_weights(Tape& tape, const TensorPtr& descriptors, const Codebook& cb) {
    if (descriptors->shape.size() != 3) {
        throw DimensionError("assign_weights expects descriptors [B×N×D], got " +
                             shape_str(descriptors->shape));
    }
    const std::int64_t B = descriptors->shape[0], N = descriptors->shape[1], D = descriptors->shape[2];
    const std::int64_t K = cb.codewords->shape[0];
    if (cb.codewords->shape[1] != D) {
        throw DimensionError("descriptor dim " + std::to_string(D) + " does not match codeword dim " +
                             std::to_string(cb.codewords->shape[1]));
    }

    std::vector<double> s(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) s[static_cast<std::size_t>(k)] = softplus(cb.smoothing->data[k]);

    // dist²_{b,i,k} kept for the backward pass
    std::vector<double> dist2(static_cast<std::size_t>(B * N * K));
    std::vector<double> out(dist2.size());
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t i = 0; i < N; ++i) {
            const double* x = descriptors->data.data() + (n * N + i) * D;
            double* arow = out.data() + (n * N + i) * K;
            double* drow = dist2.data() + (n * N + i) * K;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t k = 0; k < K; ++k) {
                const double* c = cb.codewords->data.data() + k * D;
                double d2 = 0.0;
                for (std::int64_t d = 0; d < D; ++d) {
                    const double r = x[d] - c[d];
                    d2 += r * r;
                }
                drow[k] = d2;
                arow[k] = -s[static_cast<std::size_t>(k)] * d2;
                mx = std::max(mx, arow[k]);
            }
            double sumexp = 0.0;
            for (std::int64_t k = 0; k < K; ++k) {
                arow[k] = std::exp(arow[k] - mx);
                sumexp += arow[k];
            }
            for (std::int64_t k = 0; k < K; ++k) arow[k] /= sumexp;
        }
    }

    auto codewords = cb.codewords;
    auto smoothing = cb.smoothing;
    const bool rec = track_any(tape, {descriptors, codewords, smoothing});
    auto y = make_tensor({B, N, K}, std::move(out), rec);
    if (rec) {
        tape.record({descriptors, codewords, smoothing}, y,
                    [descriptors, codewords, smoothing, y, B, N, D, K,
                     s = std::move(s), dist2 = std::move(dist2)]() {
            std::vector<double> gx(descriptors->requires_grad ? descriptors->data.size() : 0, 0.0);
            std::vector<double> gc(codewords->requires_grad ? codewords->data.size() : 0, 0.0);
            std::vector<double> gs(static_cast<std::size_t>(K), 0.0);
            std::vector<double> h(static_cast<std::size_t>(K));
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t i = 0; i < N; ++i) {
                    const std::int64_t row = (n * N + i);
                    const double* a = y->data.data() + row * K;
                    const double* ga = y->grad.data() + row * K;
                    const double* drow = dist2.data() + row * K;
                    const double* x = descriptors->data.data() + row * D;
                    double dot = 0.0;
                    for (std::int64_t k = 0; k < K; ++k) dot += a[k] * ga[k];
                    for (std::int64_t k = 0; k < K; ++k) {
                        h[static_cast<std::size_t>(k)] = a[k] * (ga[k] - dot);  // d loss / d logit
                        gs[static_cast<std::size_t>(k)] -= h[static_cast<std::size_t>(k)] * drow[k];
                    }
                    if (!gx.empty() || !gc.empty()) {
                        for (std::int64_t k = 0; k < K; ++k) {
                            // d logit / d dist² = -s_k
                            const double gd = -s[static_cast<std::size_t>(k)] * h[static_cast<std::size_t>(k)];
                            if (gd == 0.0) continue;
                            const double* c = codewords->data.data() + k * D;
                            for (std::int64_t d = 0; d < D; ++d) {
                                const double r2 = 2.0 * (x[d] - c[d]);
                                if (!gx.empty()) gx[static_cast<std::size_t>(row * D + d)] += gd * r2;
                                if (!gc.empty()) gc[static_cast<std::size_t>(k * D + d)] -= gd * r2;
                            }
                        }
                    }
                }
            }
            if (descriptors->requires_grad) descriptors->accum_grad(gx);
            if (codewords->requires_grad) codewords->accum_grad(gc);
            if (smoothing->requires_grad) {
                for (std::int64_t k = 0; k < K; ++k) {
                    gs[static_cast<std::size_t>(k)] *= sigmoid(smoothing->data[k]);  // softplus'
                }
                smoothing->accum_grad(gs);
            }
        });
    }
    return y;
}

TensorPtr aggregate(Tape& tape, const TensorPtr& descriptors, const Codebook& cb,
                    const TensorPtr& assignments) {
    if (descriptors->shape.size() != 3 || assignments->shape.size() != 3) {
        throw DimensionError("aggregate expects [B×N×D] descriptors and [B×N×K] assignments");
    }
    const std::int64_t B = descriptors->shape[0], N = descriptors->shape[1], D = descriptors->shape[2];
    const std::int64_t K = cb.codewords->shape[0];
    if (assignments->shape[0] != B || assignments->shape[1] != N || assignments->shape[2] != K ||
        cb.codewords->shape[1] != D) {
        throw DimensionError("aggregate shape mismatch: descriptors " + shape_str(descriptors->shape) +
                             ", assignments " + shape_str(assignments->shape) + ", codewords " +
                             shape_str(cb.codewords->shape));
    }

    const double invn = 1.0 / static_cast<double>(N);
    std::vector<double> out(static_cast<std::size_t>(B * K * D), 0.0);
    for (std::int64_t n = 0; n < B; ++n) {
        for (std::int64_t i = 0; i < N; ++i) {
            const double* x = descriptors->data.data() + (n * N + i) * D;
            const double* a = assignments->data.data() + (n * N + i) * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const double w = a[k] * invn;
                if (w == 0.0) continue;
                const double* c = cb.codewords->data.data() + k * D;
                double* e = out.data() + (n * K + k) * D;
                for (std::int64_t d = 0; d < D; ++d) e[d] += w * (x[d] - c[d]);
            }
        }
    }

    auto codewords = cb.codewords;
    const bool rec = track_any(tape, {descriptors, codewords, assignments});
    auto y = make_tensor({B, K, D}, std::move(out), rec);
    if (rec) {
        tape.record({descriptors, codewords, assignments}, y,
                    [descriptors, codewords, assignments, y, B, N, D, K, invn]() {
            std::vector<double> gx(descriptors->requires_grad ? descriptors->data.size() : 0, 0.0);
            std::vector<double> ga(assignments->requires_grad ? assignments->data.size() : 0, 0.0);
            std::vector<double> gc(codewords->requires_grad ? codewords->data.size() : 0, 0.0);
            for (std::int64_t n = 0; n < B; ++n) {
                const double* ge = y->grad.data() + n * K * D;
                if (!gc.empty()) {
                    // e_k depends on c_k through -(1/N)·Σ_i a_ik
                    for (std::int64_t k = 0; k < K; ++k) {
                        double asum = 0.0;
                        for (std::int64_t i = 0; i < N; ++i) {
                            asum += assignments->data[(n * N + i) * K + k];
                        }
                        const double w = asum * invn;
                        for (std::int64_t d = 0; d < D; ++d) {
                            gc[static_cast<std::size_t>(k * D + d)] -= w * ge[k * D + d];
                        }
                    }
                }
                if (!gx.empty() || !ga.empty()) {
                    for (std::int64_t i = 0; i < N; ++i) {
                        const double* x = descriptors->data.data() + (n * N + i) * D;
                        const double* a = assignments->data.data() + (n * N + i) * K;
                        for (std::int64_t k = 0; k < K; ++k) {
                            const double* c = codewords->data.data() + k * D;
                            const double* gek = ge + k * D;
                            if (!ga.empty()) {
                                double dot = 0.0;
                                for (std::int64_t d = 0; d < D; ++d) dot += gek[d] * (x[d] - c[d]);
                                ga[static_cast<std::size_t>((n * N + i) * K + k)] = dot * invn;
                            }
                            if (!gx.empty()) {
                                const double w = a[k] * invn;
                                if (w != 0.0) {
                                    double* gxi = gx.data() + (n * N + i) * D;
                                    for (std::int64_t d = 0; d < D; ++d) gxi[d] += w * gek[d];
                                }
                            }
                        }
                    }
                }
            }
            if (descriptors->requires_grad) descriptors->accum_grad(gx);
            if (codewords->requires_grad) codewords->accum_grad(gc);
            if (assignments->requires_grad) assignments->accum_grad(ga);
        });
    }
    return y;
}

TensorPtr encode(Tape& tape, const TensorPtr& fmap, const Codebook& cb) {
    auto x = reshape_spatial(tape, fmap);
    auto a = assign_weights(tape, x, cb);
    auto e = aggregate(tape, x, cb, a);
    const std::int64_t B = e->shape[0];
    return reshape(tape, e, {B, e->shape[1] * e->shape[2]});
}

TensorPtr lem_forward(Tape& tape, const TensorPtr& fmap, LemParams& p, Mode mode) {
    if (fmap->shape.size() != 4 || fmap->shape[1] != p.cfg.d) {
        throw DimensionError("lem_forward expects [B×" + std::to_string(p.cfg.d) + "×H×W], got " +
                             shape_str(fmap->shape));
    }
    auto local = linear(tape, batch_norm(tape, encode(tape, fmap, p.codebook), p.bn1, mode), p.fc1);
    auto global = linear(tape, batch_norm(tape, global_avg_pool(tape, fmap), p.bn2, mode), p.fc2);
    auto fused = outer_product(tape, local, global);
    return linear(tape, fused, p.fc3);
}

}  // namespace multer
