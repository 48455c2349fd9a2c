#include "klm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace klm::nn {

namespace {

void check(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

bool same_shape(const TensorPtr& a, const TensorPtr& b) { return a->shape == b->shape; }

// C += A(m×k) · B(k×n), row-major
void gemm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
              std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a_row = A + i * k;
        double* c_row = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double a = a_row[p];
            if (a == 0.0) continue;
            const double* b_row = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C += A(m×k)ᵀ · B(m×n)  ->  C is k×n
void gemm_ta_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a_row = A + i * k;
        const double* b_row = B + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double a = a_row[p];
            if (a == 0.0) continue;
            double* c_row = C + p * n;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C += A(m×n) · B(k×n)ᵀ  ->  C is m×k
void gemm_tb_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t n,
                 std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a_row = A + i * n;
        double* c_row = C + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* b_row = B + p * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += a_row[j] * b_row[j];
            c_row[p] += dot;
        }
    }
}

std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace

TensorPtr make_tensor(std::vector<std::size_t> shape, bool requires_grad) {
    auto t = std::make_shared<Node>();
    t->value.assign(numel(shape), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr from_values(std::vector<std::size_t> shape, std::vector<double> values,
                      bool requires_grad) {
    check(numel(shape) == values.size(), "from_values: shape/data length mismatch");
    auto t = std::make_shared<Node>();
    t->shape = std::move(shape);
    t->value = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr randn(std::vector<std::size_t> shape, double stddev, std::mt19937_64& rng,
                bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t->value) v = dist(rng);
    return t;
}

TensorPtr identity_matrix(std::size_t n, bool requires_grad) {
    auto t = make_tensor({n, n}, requires_grad);
    for (std::size_t i = 0; i < n; ++i) t->value[i * n + i] = 1.0;
    return t;
}

TensorPtr Tape::record(TensorPtr out, std::function<void()> backward) {
    steps_.push_back({out, std::move(backward)});
    return steps_.back().out;
}

void Tape::backward(const TensorPtr& loss) {
    check(loss->size() == 1, "backward: loss must be scalar");
    for (auto& s : steps_) {
        s.out->ensure_grad();
        s.out->zero_grad();
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->back();
}

TensorPtr add(Tape& t, const TensorPtr& a, const TensorPtr& b) {
    check(same_shape(a, b), "add: shape mismatch");
    auto out = make_tensor(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] + b->value[i];
    if (!out->requires_grad) return out;
    return t.record(out, [a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
        }
    });
}

TensorPtr sub(Tape& t, const TensorPtr& a, const TensorPtr& b) {
    check(same_shape(a, b), "sub: shape mismatch");
    auto out = make_tensor(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] - b->value[i];
    if (!out->requires_grad) return out;
    return t.record(out, [a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
        }
    });
}

TensorPtr mul(Tape& t, const TensorPtr& a, const TensorPtr& b) {
    check(same_shape(a, b), "mul: shape mismatch");
    auto out = make_tensor(a->shape, a->requires_grad || b->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * b->value[i];
    if (!out->requires_grad) return out;
    return t.record(out, [a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->value[i];
        }
    });
}

TensorPtr scale(Tape& t, const TensorPtr& a, double c) {
    auto out = make_tensor(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * c;
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, c] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * c;
    });
}

TensorPtr add_rowvec(Tape& t, const TensorPtr& m, const TensorPtr& v) {
    check(m->shape.size() == 2 && v->size() == m->shape[1], "add_rowvec: shape mismatch");
    auto out = make_tensor(m->shape, m->requires_grad || v->requires_grad);
    std::size_t r = m->shape[0], c = m->shape[1];
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out->value[i * c + j] = m->value[i * c + j] + v->value[j];
    if (!out->requires_grad) return out;
    return t.record(out, [m, v, out, r, c] {
        if (m->requires_grad) {
            m->ensure_grad();
            for (std::size_t i = 0; i < r * c; ++i) m->grad[i] += out->grad[i];
        }
        if (v->requires_grad) {
            v->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) v->grad[j] += out->grad[i * c + j];
        }
    });
}

TensorPtr matmul(Tape& t, const TensorPtr& a, const TensorPtr& b) {
    check(a->shape.size() == 2 && b->shape.size() == 2 && a->shape[1] == b->shape[0],
          "matmul: incompatible shapes");
    std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = make_tensor({m, n}, a->requires_grad || b->requires_grad);
    gemm_acc(a->value.data(), b->value.data(), out->value.data(), m, k, n);
    if (!out->requires_grad) return out;
    return t.record(out, [a, b, out, m, k, n] {
        if (a->requires_grad) {
            a->ensure_grad();
            gemm_tb_acc(out->grad.data(), b->value.data(), a->grad.data(), m, n, k);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            gemm_ta_acc(a->value.data(), out->grad.data(), b->grad.data(), m, k, n);
        }
    });
}

TensorPtr transpose(Tape& t, const TensorPtr& a) {
    check(a->shape.size() == 2, "transpose: expects 2-D tensor");
    std::size_t r = a->shape[0], c = a->shape[1];
    auto out = make_tensor({c, r}, a->requires_grad);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out->value[j * r + i] = a->value[i * c + j];
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, r, c] {
        a->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) a->grad[i * c + j] += out->grad[j * r + i];
    });
}

TensorPtr relu(Tape& t, const TensorPtr& a) {
    auto out = make_tensor(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] > 0 ? a->value[i] : 0.0;
    if (!out->requires_grad) return out;
    return t.record(out, [a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i)
            if (a->value[i] > 0) a->grad[i] += out->grad[i];
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

TensorPtr gelu(Tape& t, const TensorPtr& a) {
    auto out = make_tensor(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) {
        double x = a->value[i];
        out->value[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    }
    if (!out->requires_grad) return out;
    return t.record(out, [a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) {
            double x = a->value[i];
            double u = kGeluC * (x + kGeluA * x * x * x);
            double th = std::tanh(u);
            double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            a->grad[i] += out->grad[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
        }
    });
}

TensorPtr sigmoid(Tape& t, const TensorPtr& a) {
    auto out = make_tensor(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
    if (!out->requires_grad) return out;
    return t.record(out, [a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) {
            double s = out->value[i];
            a->grad[i] += out->grad[i] * s * (1.0 - s);
        }
    });
}

namespace {

// row softmax on contiguous data; grads via ds = (dy - sum(dy*y)) * y
void softmax_rows_fwd(const double* x, double* y, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x + i * c;
        double* yr = y + i * c;
        double mx = xr[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < c; ++j) yr[j] /= sum;
    }
}

}  // namespace

TensorPtr softmax(Tape& t, const TensorPtr& a, int axis) {
    check(!a->shape.empty() && a->size() > 0, "softmax: empty tensor");
    int rank = static_cast<int>(a->shape.size());
    if (axis < 0) axis += rank;
    check(axis >= 0 && axis < rank, "softmax: bad axis");

    std::size_t r, c;
    bool along_rows;  // softmax along the last (column) dimension
    if (rank == 1) {
        r = 1;
        c = a->shape[0];
        along_rows = true;
    } else {
        r = a->shape[0];
        c = a->shape[1];
        along_rows = (axis == 1);
    }
    check((along_rows ? c : r) > 0, "softmax: empty axis");

    auto out = make_tensor(a->shape, a->requires_grad);
    if (along_rows) {
        softmax_rows_fwd(a->value.data(), out->value.data(), r, c);
    } else {
        // column softmax via a transposed scratch buffer
        std::vector<double> xt(r * c), yt(r * c);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) xt[j * r + i] = a->value[i * c + j];
        softmax_rows_fwd(xt.data(), yt.data(), c, r);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out->value[i * c + j] = yt[j * r + i];
    }
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, r, c, along_rows] {
        a->ensure_grad();
        std::size_t groups = along_rows ? r : c;
        std::size_t len = along_rows ? c : r;
        for (std::size_t gidx = 0; gidx < groups; ++gidx) {
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                std::size_t idx = along_rows ? gidx * c + j : j * c + gidx;
                dot += out->grad[idx] * out->value[idx];
            }
            for (std::size_t j = 0; j < len; ++j) {
                std::size_t idx = along_rows ? gidx * c + j : j * c + gidx;
                a->grad[idx] += (out->grad[idx] - dot) * out->value[idx];
            }
        }
    });
}

TensorPtr layer_norm(Tape& t, const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     double eps) {
    std::size_t r = x->shape.size() == 2 ? x->shape[0] : 1;
    std::size_t c = x->shape.size() == 2 ? x->shape[1] : x->shape[0];
    check(gamma->size() == c && beta->size() == c, "layer_norm: gamma/beta size mismatch");

    auto out = make_tensor(x->shape,
                           x->requires_grad || gamma->requires_grad || beta->requires_grad);
    auto xhat = std::make_shared<std::vector<double>>(r * c);
    auto inv_std = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x->value.data() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            double xh = (xr[j] - mean) * is;
            (*xhat)[i * c + j] = xh;
            out->value[i * c + j] = gamma->value[j] * xh + beta->value[j];
        }
    }
    if (!out->requires_grad) return out;
    return t.record(out, [x, gamma, beta, out, xhat, inv_std, r, c] {
        for (std::size_t i = 0; i < r; ++i) {
            const double* g = out->grad.data() + i * c;
            const double* xh = xhat->data() + i * c;
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (std::size_t j = 0; j < c; ++j) gamma->grad[j] += g[j] * xh[j];
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (std::size_t j = 0; j < c; ++j) beta->grad[j] += g[j];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                double sum_dxhat = 0.0, sum_dxhat_xh = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    double dxh = g[j] * gamma->value[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xh += dxh * xh[j];
                }
                double is = (*inv_std)[i];
                double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    double dxh = g[j] * gamma->value[j];
                    x->grad[i * c + j] +=
                        is * (dxh - inv_c * sum_dxhat - xh[j] * inv_c * sum_dxhat_xh);
                }
            }
        }
    });
}

TensorPtr embedding(Tape& t, const TensorPtr& table, const std::vector<int32_t>& ids) {
    check(table->shape.size() == 2, "embedding: table must be 2-D");
    std::size_t v = table->shape[0], d = table->shape[1];
    for (int32_t id : ids)
        check(id >= 0 && static_cast<std::size_t>(id) < v, "embedding: id out of range");
    auto out = make_tensor({ids.size(), d}, table->requires_grad);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table->value.data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out->value.data() + i * d);
    if (!out->requires_grad) return out;
    auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
    return t.record(out, [table, out, ids_copy, d] {
        table->ensure_grad();
        for (std::size_t i = 0; i < ids_copy->size(); ++i) {
            double* dst = table->grad.data() + static_cast<std::size_t>((*ids_copy)[i]) * d;
            const double* src = out->grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

TensorPtr dropout(Tape& t, const TensorPtr& a, double p, std::mt19937_64& rng, bool training) {
    check(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
    if (!training || p == 0.0) return a;
    auto mask = std::make_shared<std::vector<double>>(a->size());
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    double keep_scale = 1.0 / (1.0 - p);
    for (double& m : *mask) m = dist(rng) < p ? 0.0 : keep_scale;
    auto out = make_tensor(a->shape, a->requires_grad);
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * (*mask)[i];
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, mask] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * (*mask)[i];
    });
}

TensorPtr row_sum(Tape& t, const TensorPtr& a) {
    check(a->shape.size() == 2, "row_sum: expects 2-D tensor");
    std::size_t r = a->shape[0], c = a->shape[1];
    auto out = make_tensor({r, 1}, a->requires_grad);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += a->value[i * c + j];
        out->value[i] = s;
    }
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, r, c] {
        a->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) a->grad[i * c + j] += out->grad[i];
    });
}

TensorPtr col_broadcast_mul(Tape& t, const TensorPtr& m, const TensorPtr& v) {
    check(m->shape.size() == 2 && v->size() == m->shape[0], "col_broadcast_mul: shape mismatch");
    std::size_t r = m->shape[0], c = m->shape[1];
    auto out = make_tensor(m->shape, m->requires_grad || v->requires_grad);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out->value[i * c + j] = m->value[i * c + j] * v->value[i];
    if (!out->requires_grad) return out;
    return t.record(out, [m, v, out, r, c] {
        if (m->requires_grad) {
            m->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    m->grad[i * c + j] += out->grad[i * c + j] * v->value[i];
        }
        if (v->requires_grad) {
            v->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) s += out->grad[i * c + j] * m->value[i * c + j];
                v->grad[i] += s;
            }
        }
    });
}

TensorPtr concat_cols(Tape& t, const std::vector<TensorPtr>& parts) {
    check(!parts.empty(), "concat_cols: no inputs");
    std::size_t r = parts[0]->shape[0], total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        check(p->shape.size() == 2 && p->shape[0] == r, "concat_cols: row mismatch");
        total += p->shape[1];
        rg = rg || p->requires_grad;
    }
    auto out = make_tensor({r, total}, rg);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t c = p->shape[1];
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p->value.data() + i * c, c, out->value.data() + i * total + off);
        off += c;
    }
    if (!rg) return out;
    return t.record(out, [parts, out, r, total] {
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::size_t c = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        p->grad[i * c + j] += out->grad[i * total + off + j];
            }
            off += c;
        }
    });
}

TensorPtr concat_rows(Tape& t, const std::vector<TensorPtr>& parts) {
    check(!parts.empty(), "concat_rows: no inputs");
    std::size_t c = parts[0]->shape.size() == 2 ? parts[0]->shape[1] : parts[0]->shape[0];
    std::size_t total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        check(p->shape.size() == 2 && p->shape[1] == c, "concat_rows: column mismatch");
        total += p->shape[0];
        rg = rg || p->requires_grad;
    }
    auto out = make_tensor({total, c}, rg);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.begin(), p->value.end(), out->value.begin() + off * c);
        off += p->shape[0];
    }
    if (!rg) return out;
    return t.record(out, [parts, out, c] {
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::size_t n = p->shape[0] * c;
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) p->grad[i] += out->grad[off * c + i];
            }
            off += p->shape[0];
        }
    });
}

TensorPtr slice_rows(Tape& t, const TensorPtr& a, std::size_t start, std::size_t count) {
    check(a->shape.size() == 2 && start + count <= a->shape[0], "slice_rows: out of range");
    std::size_t c = a->shape[1];
    auto out = make_tensor({count, c}, a->requires_grad);
    std::copy_n(a->value.data() + start * c, count * c, out->value.data());
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, start, count, c] {
        a->ensure_grad();
        for (std::size_t i = 0; i < count * c; ++i) a->grad[start * c + i] += out->grad[i];
    });
}

TensorPtr slice_cols(Tape& t, const TensorPtr& a, std::size_t start, std::size_t count) {
    check(a->shape.size() == 2 && start + count <= a->shape[1], "slice_cols: out of range");
    std::size_t r = a->shape[0], c = a->shape[1];
    auto out = make_tensor({r, count}, a->requires_grad);
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(a->value.data() + i * c + start, count, out->value.data() + i * count);
    if (!out->requires_grad) return out;
    return t.record(out, [a, out, start, count, r, c] {
        a->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < count; ++j)
                a->grad[i * c + start + j] += out->grad[i * count + j];
    });
}

TensorPtr sum_all(Tape& t, const TensorPtr& a) {
    auto out = make_tensor({1}, a->requires_grad);
    double s = 0.0;
    for (double v : a->value) s += v;
    out->value[0] = s;
    if (!out->requires_grad) return out;
    return t.record(out, [a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
    });
}

TensorPtr mean_all(Tape& t, const TensorPtr& a) {
    check(a->size() > 0, "mean_all: empty tensor");
    return scale(t, sum_all(t, a), 1.0 / static_cast<double>(a->size()));
}

TensorPtr cross_entropy_loss(Tape& t, const TensorPtr& logits,
                             const std::vector<int32_t>& labels) {
    check(logits->shape.size() == 2, "cross_entropy_loss: logits must be 2-D");
    std::size_t m = logits->shape[0], c = logits->shape[1];
    check(labels.size() == m, "cross_entropy_loss: label count mismatch");
    for (int32_t l : labels)
        check(l >= 0 && static_cast<std::size_t>(l) < c, "cross_entropy_loss: label out of range");

    auto probs = std::make_shared<std::vector<double>>(m * c);
    softmax_rows_fwd(logits->value.data(), probs->data(), m, c);
    auto out = make_tensor({1}, logits->requires_grad);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        loss -= std::log(std::max((*probs)[i * c + labels[i]], 1e-300));
    out->value[0] = loss / static_cast<double>(m);
    if (!out->requires_grad) return out;
    auto labels_copy = std::make_shared<std::vector<int32_t>>(labels);
    return t.record(out, [logits, out, probs, labels_copy, m, c] {
        logits->ensure_grad();
        double g = out->grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < c; ++j)
                logits->grad[i * c + j] += g * (*probs)[i * c + j];
            logits->grad[i * c + (*labels_copy)[i]] -= g;
        }
    });
}

TensorPtr bce_with_logits(Tape& t, const TensorPtr& logits, const std::vector<double>& targets) {
    check(logits->shape.size() == 2, "bce_with_logits: logits must be 2-D");
    std::size_t m = logits->shape[0], c = logits->shape[1];
    check(targets.size() == m * c, "bce_with_logits: target size mismatch");

    auto out = make_tensor({1}, logits->requires_grad);
    double loss = 0.0;
    for (std::size_t i = 0; i < m * c; ++i) {
        double x = logits->value[i], y = targets[i];
        loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    out->value[0] = loss / static_cast<double>(m);
    if (!out->requires_grad) return out;
    auto targets_copy = std::make_shared<std::vector<double>>(targets);
    return t.record(out, [logits, out, targets_copy, m, c] {
        logits->ensure_grad();
        double g = out->grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m * c; ++i) {
            double s = 1.0 / (1.0 + std::exp(-logits->value[i]));
            logits->grad[i] += g * (s - (*targets_copy)[i]);
        }
    });
}

double grad_check(const std::function<TensorPtr(Tape&)>& f, const std::vector<TensorPtr>& params,
                  double fd_step) {
    for (const auto& p : params) {
        if (!p->requires_grad) throw std::invalid_argument("grad_check: param without grad");
        p->ensure_grad();
        p->zero_grad();
    }
    std::vector<std::vector<double>> ad_grads;
    {
        Tape tape;
        TensorPtr loss = f(tape);
        if (!std::isfinite(loss->value[0])) throw std::runtime_error("grad_check: non-finite loss");
        tape.backward(loss);
        for (const auto& p : params) ad_grads.push_back(p->grad);
    }

    auto eval = [&]() {
        Tape tape;
        TensorPtr loss = f(tape);
        double v = loss->value[0];
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
        return v;
    };

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p->size(); ++i) {
            double orig = p->value[i];
            p->value[i] = orig + fd_step;
            double up = eval();
            p->value[i] = orig - fd_step;
            double down = eval();
            p->value[i] = orig;
            double g_fd = (up - down) / (2.0 * fd_step);
            double g_ad = ad_grads[pi][i];
            double rel = std::abs(g_ad - g_fd) / std::max({1.0, std::abs(g_ad), std::abs(g_fd)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace klm::nn
