// SPDX-License-Identifier: Apache-2.0

#include "advfusion/numcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace advfusion::numcore {

namespace {

using detail::Node;
using Backward = std::function<void(Node&)>;

void check_finite(const char* op, const std::vector<double>& values) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw OverflowError(std::string(op) + ": non-finite result");
        }
    }
}

Tensor record(const char* op, Shape shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs, Backward backward) {
    check_finite(op, values);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const Tensor* t : inputs) {
            needs = needs || t->requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) {
            node->parents.push_back(t->node());
        }
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

Tensor record(const char* op, Shape shape, std::vector<double> values,
              const std::vector<Tensor>& inputs, Backward backward) {
    check_finite(op, values);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) {
            needs = needs || t.requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& t : inputs) {
            node->parents.push_back(t.node());
        }
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

// Grad buffer of parent i, or nullptr when that input is not on the tape.
std::vector<double>* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

const std::vector<double>& parent_data(Node& self, std::size_t i) { return self.parents[i]->data; }

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    auto A = a.data();
    auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += av * brow[j];
            }
        }
    }
    return record("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
        const auto& g = self.grad;
        const auto& A = parent_data(self, 0);
        const auto& B = parent_data(self, 1);
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += g[i * n + j] * B[p * n + j];
                    }
                    (*ga)[i * k + p] += acc;
                }
            }
        }
        if (auto* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    double* grow = gb->data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        grow[j] += av * g[i * n + j];
                    }
                }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    auto A = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = A[i * n + j];
        }
    }
    return record("transpose", {n, m}, std::move(out), {&a}, [m, n](Node& self) {
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    (*ga)[i * n + j] += self.grad[j * m + i];
                }
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.data().begin(), a.data().end());
    auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += B[i];
    }
    return record("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < g->size(); ++i) {
                    (*g)[i] += self.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.data().begin(), a.data().end());
    auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= B[i];
    }
    return record("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i];
            }
        }
        if (auto* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] -= self.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    auto A = a.data();
    auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = A[i] * B[i];
    }
    return record("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        const auto& A = parent_data(self, 0);
        const auto& B = parent_data(self, 1);
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * B[i];
            }
        }
        if (auto* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * A[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= factor;
    }
    return record("scale", a.shape(), std::move(out), {&a}, [factor](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i] * factor;
            }
        }
    });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require_rank("add_bias", a, 2);
    require_rank("add_bias", bias, 1);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (bias.dim(0) != cols) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    auto B = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] += B[c];
        }
    }
    return record("add_bias", a.shape(), std::move(out), {&a, &bias}, [rows, cols](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) {
                (*g)[i] += self.grad[i];
            }
        }
        if (auto* g = parent_grad(self, 1)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    (*g)[c] += self.grad[r * cols + c];
                }
            }
        }
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v = v > 0.0 ? v : 0.0;
    }
    return record("relu", a.shape(), std::move(out), {&a}, [](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            const auto& A = parent_data(self, 0);
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (A[i] > 0.0) {
                    (*g)[i] += self.grad[i];
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank("layer_norm", x, 2);
    require_rank("layer_norm", gamma, 1);
    require_rank("layer_norm", beta, 1);
    if (!(eps > 0.0)) {
        throw std::invalid_argument("layer_norm: epsilon must be positive");
    }
    const std::size_t rows = x.dim(0), h = x.dim(1);
    if (gamma.dim(0) != h || beta.dim(0) != h) {
        throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(h));
    }
    auto X = x.data();
    auto G = gamma.data();
    auto Bt = beta.data();
    std::vector<double> xhat(rows * h), inv_std(rows), out(rows * h);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = X.data() + r * h;
        double mu = 0.0;
        for (std::size_t c = 0; c < h; ++c) {
            mu += xr[c];
        }
        mu /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t c = 0; c < h; ++c) {
            var += (xr[c] - mu) * (xr[c] - mu);
        }
        var /= static_cast<double>(h);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < h; ++c) {
            xhat[r * h + c] = (xr[c] - mu) * inv_std[r];
            out[r * h + c] = xhat[r * h + c] * G[c] + Bt[c];
        }
    }
    return record("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                  [rows, h, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                      const auto& g = self.grad;
                      const auto& G = parent_data(self, 1);
                      if (auto* gx = parent_grad(self, 0)) {
                          const double hd = static_cast<double>(h);
                          for (std::size_t r = 0; r < rows; ++r) {
                              double sum_d = 0.0, sum_dx = 0.0;
                              for (std::size_t c = 0; c < h; ++c) {
                                  const double d = g[r * h + c] * G[c];
                                  sum_d += d;
                                  sum_dx += d * xhat[r * h + c];
                              }
                              for (std::size_t c = 0; c < h; ++c) {
                                  const double d = g[r * h + c] * G[c];
                                  (*gx)[r * h + c] +=
                                      inv_std[r] / hd * (hd * d - sum_d - xhat[r * h + c] * sum_dx);
                              }
                          }
                      }
                      if (auto* gg = parent_grad(self, 1)) {
                          for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < h; ++c) {
                                  (*gg)[c] += g[r * h + c] * xhat[r * h + c];
                              }
                          }
                      }
                      if (auto* gb = parent_grad(self, 2)) {
                          for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < h; ++c) {
                                  (*gb)[c] += g[r * h + c];
                              }
                          }
                      }
                  });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
    require_rank("embedding", table, 2);
    if (ids.empty()) {
        throw ShapeError("embedding: empty id sequence");
    }
    const std::size_t vocab = table.dim(0), h = table.dim(1);
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw std::out_of_range("embedding: id " + std::to_string(ids[t]) +
                                    " outside table of " + std::to_string(vocab) + " rows");
        }
        rows[t] = static_cast<std::size_t>(ids[t]);
    }
    std::vector<double> out(ids.size() * h);
    auto W = table.data();
    for (std::size_t t = 0; t < rows.size(); ++t) {
        std::copy_n(W.data() + rows[t] * h, h, out.data() + t * h);
    }
    return record("embedding", {ids.size(), h}, std::move(out), {&table},
                  [rows = std::move(rows), h](Node& self) {
                      if (auto* g = parent_grad(self, 0)) {
                          for (std::size_t t = 0; t < rows.size(); ++t) {
                              for (std::size_t c = 0; c < h; ++c) {
                                  (*g)[rows[t] * h + c] += self.grad[t * h + c];
                              }
                          }
                      }
                  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    if (axis > 1) {
        throw ShapeError("concat: axis must be 0 or 1");
    }
    for (const auto& p : parts) {
        require_rank("concat", p, 2);
        if (p.dim(1 - axis) != parts.front().dim(1 - axis)) {
            throw ShapeError("concat: " + shape_str(p.shape()) + " does not line up with " +
                             shape_str(parts.front().shape()) + " on axis " + std::to_string(axis));
        }
    }
    const std::size_t rows = parts.front().dim(0);
    const std::size_t cols = parts.front().dim(1);
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const auto& p : parts) {
        extents.push_back(p.dim(axis));
        total += p.dim(axis);
    }
    std::vector<double> out;
    Shape shape;
    if (axis == 0) {
        shape = {total, cols};
        out.reserve(total * cols);
        for (const auto& p : parts) {
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
    } else {
        shape = {rows, total};
        out.resize(rows * total);
        std::size_t offset = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.dim(1);
            auto D = p.data();
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(D.data() + r * w, w, out.data() + r * total + offset);
            }
            offset += w;
        }
    }
    return record("concat", shape, std::move(out), parts,
                  [axis, extents = std::move(extents), rows, cols, total](Node& self) {
                      std::size_t offset = 0;
                      for (std::size_t i = 0; i < extents.size(); ++i) {
                          auto* g = parent_grad(self, i);
                          if (g) {
                              if (axis == 0) {
                                  for (std::size_t k = 0; k < extents[i] * cols; ++k) {
                                      (*g)[k] += self.grad[offset * cols + k];
                                  }
                              } else {
                                  const std::size_t w = extents[i];
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      for (std::size_t c = 0; c < w; ++c) {
                                          (*g)[r * w + c] += self.grad[r * total + offset + c];
                                      }
                                  }
                              }
                          }
                          offset += extents[i];
                      }
                  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    require_rank("slice_cols", a, 2);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (count == 0 || start + count > cols) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(a.shape()));
    }
    std::vector<double> out(rows * count);
    auto A = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(A.data() + r * cols + start, count, out.data() + r * count);
    }
    return record("slice_cols", {rows, count}, std::move(out), {&a}, [rows, cols, start, count](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < count; ++c) {
                    (*g)[r * cols + start + c] += self.grad[r * count + c];
                }
            }
        }
    });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    if (a.rank() > 2 || axis >= a.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    }
    // View as [outer x len x inner] with reduction over len.
    const std::size_t len = a.dim(axis);
    const std::size_t outer = (a.rank() == 2 && axis == 1) ? a.dim(0) : 1;
    const std::size_t inner = (a.rank() == 2 && axis == 0) ? a.dim(1) : 1;
    if (len == 0) {
        throw ShapeError("softmax: empty axis");
    }
    auto A = a.data();
    std::vector<double> out(a.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            auto idx = [&](std::size_t k) { return (o * len + k) * inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) {
                mx = std::max(mx, A[idx(k)]);
            }
            double z = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                out[idx(k)] = std::exp(A[idx(k)] - mx);
                z += out[idx(k)];
            }
            for (std::size_t k = 0; k < len; ++k) {
                out[idx(k)] /= z;
            }
        }
    }
    return record("softmax", a.shape(), std::move(out), {&a}, [outer, len, inner](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            const auto& s = self.data;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) {
                    auto idx = [&](std::size_t k) { return (o * len + k) * inner + i; };
                    double dot = 0.0;
                    for (std::size_t k = 0; k < len; ++k) {
                        dot += s[idx(k)] * self.grad[idx(k)];
                    }
                    for (std::size_t k = 0; k < len; ++k) {
                        (*g)[idx(k)] += s[idx(k)] * (self.grad[idx(k)] - dot);
                    }
                }
            }
        }
    });
}

Tensor causal_softmax(const Tensor& scores) {
    require_rank("causal_softmax", scores, 2);
    const std::size_t n = scores.dim(0);
    if (scores.dim(1) != n) {
        throw ShapeError("causal_softmax: expected square scores, got " + shape_str(scores.shape()));
    }
    auto A = scores.data();
    std::vector<double> out(n * n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c <= r; ++c) {
            mx = std::max(mx, A[r * n + c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c <= r; ++c) {
            out[r * n + c] = std::exp(A[r * n + c] - mx);
            z += out[r * n + c];
        }
        for (std::size_t c = 0; c <= r; ++c) {
            out[r * n + c] /= z;
        }
    }
    return record("causal_softmax", scores.shape(), std::move(out), {&scores}, [n](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            const auto& s = self.data;
            for (std::size_t r = 0; r < n; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c <= r; ++c) {
                    dot += s[r * n + c] * self.grad[r * n + c];
                }
                for (std::size_t c = 0; c <= r; ++c) {
                    (*g)[r * n + c] += s[r * n + c] * (self.grad[r * n + c] - dot);
                }
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
    require_rank("cross_entropy", logits, 2);
    const std::size_t rows = logits.dim(0), classes = logits.dim(1);
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    }
    std::vector<std::int64_t> tgt(targets.begin(), targets.end());
    std::size_t counted = 0;
    for (auto t : tgt) {
        if (t == ignore_index) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= classes) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                                    std::to_string(classes) + ")");
        }
        ++counted;
    }
    auto L = logits.data();
    std::vector<double> probs(rows * classes, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore_index) {
            continue;
        }
        const double* lr = L.data() + r * classes;
        const double mx = *std::max_element(lr, lr + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            probs[r * classes + c] = std::exp(lr[c] - mx);
            z += probs[r * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) {
            probs[r * classes + c] /= z;
        }
        total += (mx + std::log(z)) - lr[static_cast<std::size_t>(tgt[r])];
    }
    const double loss = counted ? total / static_cast<double>(counted) : 0.0;
    return record("cross_entropy", {1}, {loss}, {&logits},
                  [rows, classes, counted, ignore_index, tgt = std::move(tgt),
                   probs = std::move(probs)](Node& self) {
                      auto* g = parent_grad(self, 0);
                      if (!g || counted == 0) {
                          return;
                      }
                      const double coef = self.grad[0] / static_cast<double>(counted);
                      for (std::size_t r = 0; r < rows; ++r) {
                          if (tgt[r] == ignore_index) {
                              continue;
                          }
                          for (std::size_t c = 0; c < classes; ++c) {
                              double d = probs[r * classes + c];
                              if (static_cast<std::int64_t>(c) == tgt[r]) {
                                  d -= 1.0;
                              }
                              (*g)[r * classes + c] += coef * d;
                          }
                      }
                  });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) {
        total += v;
    }
    return record("sum", {1}, {total}, {&a}, [](Node& self) {
        if (auto* g = parent_grad(self, 0)) {
            for (auto& v : *g) {
                v += self.grad[0];
            }
        }
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor row_dot(const Tensor& a, const Tensor& b) {
    require_rank("row_dot", a, 2);
    require_same_shape("row_dot", a, b);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    auto A = a.data();
    auto B = b.data();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r] += A[r * cols + c] * B[r * cols + c];
        }
    }
    return record("row_dot", {rows, 1}, std::move(out), {&a, &b}, [rows, cols](Node& self) {
        const auto& A = parent_data(self, 0);
        const auto& B = parent_data(self, 1);
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    (*ga)[r * cols + c] += self.grad[r] * B[r * cols + c];
                }
            }
        }
        if (auto* gb = parent_grad(self, 1)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    (*gb)[r * cols + c] += self.grad[r] * A[r * cols + c];
                }
            }
        }
    });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
    require_rank("scale_rows", a, 2);
    require_rank("scale_rows", s, 2);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (s.dim(0) != rows || s.dim(1) != 1) {
        throw ShapeError("scale_rows: scale " + shape_str(s.shape()) + " does not match " +
                         shape_str(a.shape()));
    }
    auto A = a.data();
    auto S = s.data();
    std::vector<double> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = A[r * cols + c] * S[r];
        }
    }
    return record("scale_rows", a.shape(), std::move(out), {&a, &s}, [rows, cols](Node& self) {
        const auto& A = parent_data(self, 0);
        const auto& S = parent_data(self, 1);
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    (*ga)[r * cols + c] += self.grad[r * cols + c] * S[r];
                }
            }
        }
        if (auto* gs = parent_grad(self, 1)) {
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    acc += self.grad[r * cols + c] * A[r * cols + c];
                }
                (*gs)[r] += acc;
            }
        }
    });
}

Tensor kron(const Tensor& a, const Tensor& b) {
    require_rank("kron", a, 2);
    require_rank("kron", b, 2);
    const std::size_t am = a.dim(0), an = a.dim(1);
    const std::size_t bm = b.dim(0), bn = b.dim(1);
    const std::size_t rows = am * bm, cols = an * bn;
    auto A = a.data();
    auto B = b.data();
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < am; ++i) {
        for (std::size_t j = 0; j < an; ++j) {
            const double av = A[i * an + j];
            for (std::size_t p = 0; p < bm; ++p) {
                for (std::size_t q = 0; q < bn; ++q) {
                    out[(i * bm + p) * cols + j * bn + q] = av * B[p * bn + q];
                }
            }
        }
    }
    return record("kron", {rows, cols}, std::move(out), {&a, &b}, [am, an, bm, bn, cols](Node& self) {
        const auto& A = parent_data(self, 0);
        const auto& B = parent_data(self, 1);
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        for (std::size_t i = 0; i < am; ++i) {
            for (std::size_t j = 0; j < an; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < bm; ++p) {
                    for (std::size_t q = 0; q < bn; ++q) {
                        const double g = self.grad[(i * bm + p) * cols + j * bn + q];
                        acc += g * B[p * bn + q];
                        if (gb) {
                            (*gb)[p * bn + q] += g * A[i * an + j];
                        }
                    }
                }
                if (ga) {
                    (*ga)[i * an + j] += acc;
                }
            }
        }
    });
}

Tensor outer(const Tensor& u, const Tensor& v) {
    require_rank("outer", u, 1);
    require_rank("outer", v, 1);
    const std::size_t p = u.dim(0), q = v.dim(0);
    auto U = u.data();
    auto V = v.data();
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < q; ++j) {
            out[i * q + j] = U[i] * V[j];
        }
    }
    return record("outer", {p, q}, std::move(out), {&u, &v}, [p, q](Node& self) {
        const auto& U = parent_data(self, 0);
        const auto& V = parent_data(self, 1);
        if (auto* gu = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t j = 0; j < q; ++j) {
                    (*gu)[i] += self.grad[i * q + j] * V[j];
                }
            }
        }
        if (auto* gv = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t j = 0; j < q; ++j) {
                    (*gv)[j] += self.grad[i * q + j] * U[i];
                }
            }
        }
    });
}

}  // namespace advfusion::numcore
