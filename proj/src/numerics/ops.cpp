#include "edt/numerics/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <string>

namespace edt::ad {
namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<Mat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const Mat<T>>;
template <class T>
using Strided = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStrided = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <class T>
ConstMapMat<T> view(const Tensor<T>& t) {
  return ConstMapMat<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <class T>
MapMat<T> view(Tensor<T>& t) {
  return MapMat<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ContractViolation(std::string(op) + ": " + what);
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, op, "expected a rank-2 tensor, got " + shape_string(t.shape()));
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  require(a.tape == b.tape && a.tape != nullptr, op, "operands live on different tapes");
}

template <class T, class F>
void accumulate(Tape<T>& tape, std::size_t id, F&& fn) {
  if (tape.requires_grad(id)) fn(tape.grad_accumulator(id));
}

template <class T>
T weight_total(const std::vector<T>& w) {
  T total = 0;
  for (T x : w) total += x;
  return total;
}

}  // namespace

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  require(av.cols() == bv.rows(), "matmul",
          "inner dims differ: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.cols());
  view(out).noalias() = view(av) * view(bv);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("matmul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
    auto g = view(tape.grad(self));
    accumulate(tape, ia, [&](Tensor<T>& ga) { view(ga).noalias() += g * view(tape.value(ib)).transpose(); });
    accumulate(tape, ib, [&](Tensor<T>& gb) { view(gb).noalias() += view(tape.value(ia)).transpose() * g; });
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "add");
  require(a.value().shape() == b.value().shape(), "add",
          "shape mismatch " + shape_string(a.value().shape()) + " vs " + shape_string(b.value().shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    for (std::size_t in : {ia, ib}) {
      accumulate(tape, in, [&](Tensor<T>& gi) {
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
      });
    }
  });
}

template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  require_same_tape(a, row, "add_row");
  const auto& av = a.value();
  const auto& rv = row.value();
  require_matrix(av, "add_row");
  require(rv.size() == av.cols() && rv.rows() == 1, "add_row",
          "row " + shape_string(rv.shape()) + " does not broadcast over " + shape_string(av.shape()));
  Tensor<T> out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out(r, c) += rv[c];
  }
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->push("add_row", std::move(out), {ia, ir}, [ia, ir](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
    accumulate(tape, ir, [&](Tensor<T>& gr) {
      const std::size_t n = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) gr[c] += g(r, c);
      }
    });
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "mul");
  require(a.value().shape() == b.value().shape(), "mul",
          "shape mismatch " + shape_string(a.value().shape()) + " vs " + shape_string(b.value().shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      const auto& bv = tape.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    });
    accumulate(tape, ib, [&](Tensor<T>& gb) {
      const auto& av = tape.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    });
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->push("scale", std::move(out), {ia}, [ia, factor](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
    });
  });
}

template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  Tensor<T> out = a.value();
  for (auto& x : out.values()) {
    x = T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
  }
  const std::size_t ia = a.id;
  return a.tape->push("gelu", std::move(out), {ia}, [ia](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      const auto& xv = tape.value(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const T x = xv[i];
        const T t = std::tanh(k * (x + c * x * x * x));
        const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
        ga[i] += g[i] * d;
      }
    });
  });
}

template <class T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = std::tanh(x);
  const std::size_t ia = a.id;
  return a.tape->push("tanh", std::move(out), {ia}, [ia](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& y = tape.value(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  });
}

template <class T>
Var<T> softmax_rows(Var<T> a) {
  const auto& av = a.value();
  require_matrix(av, "softmax_rows");
  Tensor<T> out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    T* row = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (std::size_t c = 0; c < n; ++c) total += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) row[c] /= total;
  }
  const std::size_t ia = a.id;
  return a.tape->push("softmax_rows", std::move(out), {ia}, [ia](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& y = tape.value(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      const std::size_t n = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += g(r, c) * y(r, c);
        for (std::size_t c = 0; c < n; ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
      }
    });
  });
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  const auto& av = a.value();
  require_matrix(av, "log_softmax_rows");
  Tensor<T> out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    T* row = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(row[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < n; ++c) row[c] -= lse;
  }
  const std::size_t ia = a.id;
  return a.tape->push("log_softmax_rows", std::move(out), {ia}, [ia](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    const auto& y = tape.value(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      const std::size_t n = y.cols();
      for (std::size_t r = 0; r < y.rows(); ++r) {
        T gsum = 0;
        for (std::size_t c = 0; c < n; ++c) gsum += g(r, c);
        for (std::size_t c = 0; c < n; ++c) ga(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
      }
    });
  });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  const auto& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  require(gain.value().size() == n && bias.value().size() == n, "layer_norm",
          "gain/bias must have " + std::to_string(n) + " entries");
  Tensor<T> normalized = xv;
  std::vector<T> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    T* row = normalized.data() + r * n;
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) row[c] = (row[c] - mu) * inv_std[r];
  }
  Tensor<T> out = normalized;
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out(r, c) = out(r, c) * gv[c] + bv[c];
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->push(
      "layer_norm", std::move(out), {ix, ig, ib},
      [ix, ig, ib, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad(self);
        const std::size_t m = g.rows(), n = g.cols();
        accumulate(tape, ig, [&](Tensor<T>& gg) {
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * normalized(r, c);
        });
        accumulate(tape, ib, [&](Tensor<T>& gb) {
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
        });
        accumulate(tape, ix, [&](Tensor<T>& gx) {
          const auto& gv = tape.value(ig);
          std::vector<T> dxhat(n);
          for (std::size_t r = 0; r < m; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < n; ++c) {
              dxhat[c] = g(r, c) * gv[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * normalized(r, c);
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t c = 0; c < n; ++c) {
              gx(r, c) += inv_std[r] * (dxhat[c] - mean_d - normalized(r, c) * mean_dx);
            }
          }
        });
      });
}

template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> indices) {
  const auto& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t n = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(indices.size(), n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < tv.rows(), "gather_rows",
            "index " + std::to_string(indices[i]) + " out of range for " + std::to_string(tv.rows()) + " rows");
    std::copy_n(tv.data() + indices[i] * n, n, out.data() + i * n);
  }
  const std::size_t it = table.id;
  return table.tape->push("gather_rows", std::move(out), {it},
                          [it, indices = std::move(indices)](Tape<T>& tape, std::size_t self) {
                            const auto& g = tape.grad(self);
                            accumulate(tape, it, [&](Tensor<T>& gt) {
                              const std::size_t n = g.cols();
                              for (std::size_t i = 0; i < indices.size(); ++i) {
                                T* dst = gt.data() + indices[i] * n;
                                const T* src = g.data() + i * n;
                                for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                              }
                            });
                          });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  require_matrix(av, "slice_cols");
  require(begin < end && end <= av.cols(), "slice_cols",
          "bad column range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  const std::size_t w = end - begin;
  Tensor<T> out = Tensor<T>::matrix(av.rows(), w);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.data() + r * av.cols() + begin, w, out.data() + r * w);
  }
  const std::size_t ia = a.id;
  return a.tape->push("slice_cols", std::move(out), {ia}, [ia, begin, w](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) += g(r, c);
    });
  });
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t m = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_cols");
    require_matrix(p.value(), "concat_cols");
    require(p.value().rows() == m, "concat_cols", "row counts differ");
    ids.push_back(p.id);
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor<T> out = Tensor<T>::matrix(m, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(v.data() + r * v.cols(), v.cols(), out.data() + r * total + off);
    off += v.cols();
  }
  auto backward = [ids, widths](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      accumulate(tape, ids[k], [&](Tensor<T>& gi) {
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gi(r, c) += g(r, off + c);
      });
      off += widths[k];
    }
  };
  return parts[0].tape->push("concat_cols", std::move(out), ids, backward);
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const std::size_t n = parts[0].value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p, "concat_rows");
    require_matrix(p.value(), "concat_rows");
    require(p.value().cols() == n, "concat_rows", "column counts differ");
    ids.push_back(p.id);
    total += p.value().rows();
  }
  Tensor<T> out = Tensor<T>::matrix(total, n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.data() + off);
    off += p.value().size();
  }
  auto backward = [ids](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t len = tape.value(id).size();
      accumulate(tape, id, [&](Tensor<T>& gi) {
        for (std::size_t i = 0; i < len; ++i) gi[i] += g[off + i];
      });
      off += len;
    }
  };
  return parts[0].tape->push("concat_rows", std::move(out), ids, backward);
}

template <class T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().values()) total += v;
  const std::size_t ia = a.id;
  return a.tape->push("sum", Tensor<T>::scalar(total), {ia}, [ia](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0];
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      for (auto& v : ga.values()) v += g;
    });
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t count = a.value().size();
  require(count > 0, "mean", "empty tensor");
  T total = 0;
  for (T v : a.value().values()) total += v;
  const std::size_t ia = a.id;
  return a.tape->push("mean", Tensor<T>::scalar(total / T(count)), {ia}, [ia, count](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0] / T(count);
    accumulate(tape, ia, [&](Tensor<T>& ga) {
      for (auto& v : ga.values()) v += g;
    });
  });
}

template <class T>
Var<T> squared_error(Var<T> pred, Tensor<T> target, std::vector<T> row_weights) {
  const auto& pv = pred.value();
  require_matrix(pv, "squared_error");
  require(target.shape() == pv.shape(), "squared_error",
          "target shape " + shape_string(target.shape()) + " vs pred " + shape_string(pv.shape()));
  require(row_weights.size() == pv.rows(), "squared_error", "one weight per row required");
  const std::size_t n = pv.cols();
  const T denom = weight_total(row_weights) * T(n);
  T total = 0;
  if (denom > T(0)) {
    for (std::size_t r = 0; r < pv.rows(); ++r) {
      if (row_weights[r] == T(0)) continue;
      T row = 0;
      for (std::size_t c = 0; c < n; ++c) {
        const T d = pv(r, c) - target(r, c);
        row += d * d;
      }
      total += row_weights[r] * row;
    }
    total /= denom;
  }
  const std::size_t ip = pred.id;
  return pred.tape->push(
      "squared_error", Tensor<T>::scalar(total), {ip},
      [ip, denom, target = std::move(target), w = std::move(row_weights)](Tape<T>& tape, std::size_t self) {
        if (denom <= T(0)) return;
        const T g = tape.grad(self)[0];
        accumulate(tape, ip, [&](Tensor<T>& gp) {
          const auto& pv = tape.value(ip);
          for (std::size_t r = 0; r < pv.rows(); ++r) {
            const T k = T(2) * g * w[r] / denom;
            for (std::size_t c = 0; c < pv.cols(); ++c) gp(r, c) += k * (pv(r, c) - target(r, c));
          }
        });
      });
}

template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::size_t> targets, std::vector<T> row_weights) {
  const auto& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  require(targets.size() == lv.rows() && row_weights.size() == lv.rows(), "cross_entropy",
          "one target and one weight per row required");
  const std::size_t n = lv.cols();
  const T denom = weight_total(row_weights);
  Tensor<T> probs = lv;
  T total = 0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    require(targets[r] < n, "cross_entropy", "target class out of range");
    T* row = probs.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) row[c] /= z;
    if (row_weights[r] != T(0)) {
      total += row_weights[r] * (mx + std::log(z) - lv(r, targets[r]));
    }
  }
  if (denom > T(0)) total /= denom;
  const std::size_t il = logits.id;
  return logits.tape->push("cross_entropy", Tensor<T>::scalar(denom > T(0) ? total : T(0)), {il},
                           [il, denom, probs = std::move(probs), targets = std::move(targets),
                            w = std::move(row_weights)](Tape<T>& tape, std::size_t self) {
                             if (denom <= T(0)) return;
                             const T g = tape.grad(self)[0];
                             accumulate(tape, il, [&](Tensor<T>& gl) {
                               for (std::size_t r = 0; r < probs.rows(); ++r) {
                                 const T k = g * w[r] / denom;
                                 if (k == T(0)) continue;
                                 for (std::size_t c = 0; c < probs.cols(); ++c) {
                                   gl(r, c) += k * (probs(r, c) - (c == targets[r] ? T(1) : T(0)));
                                 }
                               }
                             });
                           });
}

template <class T>
Var<T> expectile(Var<T> pred, std::vector<T> target, T alpha, std::vector<T> row_weights) {
  const auto& pv = pred.value();
  require(pv.size() == target.size() && row_weights.size() == target.size(), "expectile",
          "pred, target and weights must have equal length");
  require(alpha > T(0) && alpha < T(1), "expectile", "alpha must lie in (0,1)");
  const T denom = weight_total(row_weights);
  T total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T u = target[i] - pv[i];
    const T weight = u < T(0) ? T(1) - alpha : alpha;
    total += row_weights[i] * weight * u * u;
  }
  if (denom > T(0)) total /= denom;
  const std::size_t ip = pred.id;
  return pred.tape->push("expectile", Tensor<T>::scalar(denom > T(0) ? total : T(0)), {ip},
                         [ip, alpha, denom, target = std::move(target), w = std::move(row_weights)](
                             Tape<T>& tape, std::size_t self) {
                           if (denom <= T(0)) return;
                           const T g = tape.grad(self)[0];
                           accumulate(tape, ip, [&](Tensor<T>& gp) {
                             const auto& pv = tape.value(ip);
                             for (std::size_t i = 0; i < target.size(); ++i) {
                               const T u = target[i] - pv[i];
                               const T weight = u < T(0) ? T(1) - alpha : alpha;
                               gp[i] += g * w[i] / denom * T(-2) * weight * u;
                             }
                           });
                         });
}

template <class T>
Var<T> masked_attention(Var<T> qkv, std::shared_ptr<const AttentionLayout> layout, std::size_t n_heads) {
  const auto& xv = qkv.value();
  require_matrix(xv, "masked_attention");
  require(n_heads > 0 && xv.cols() % (3 * n_heads) == 0, "masked_attention",
          "qkv width must be 3 * n_heads * head_dim");
  const std::size_t d = xv.cols() / 3;
  const std::size_t hd = d / n_heads;
  const Eigen::Index stride = static_cast<Eigen::Index>(xv.cols());
  const T scale_factor = T(1) / std::sqrt(T(hd));

  Tensor<T> out = Tensor<T>::matrix(xv.rows(), d);
  // Attention probabilities per (segment, head), kept for the backward pass.
  std::vector<Mat<T>> probs;
  probs.reserve(layout->segments.size() * n_heads);

  for (const auto& seg : layout->segments) {
    require(seg.offset + seg.length <= xv.rows() && seg.mask < layout->masks.size(), "masked_attention",
            "segment out of range");
    const auto& mask = layout->masks[seg.mask];
    const Eigen::Index n = static_cast<Eigen::Index>(seg.length);
    require(mask.size() == seg.length * seg.length, "masked_attention", "mask size mismatch");
    for (std::size_t h = 0; h < n_heads; ++h) {
      const T* base = xv.data() + seg.offset * xv.cols() + h * hd;
      ConstStrided<T> q(base, n, hd, Eigen::OuterStride<>(stride));
      ConstStrided<T> k(base + d, n, hd, Eigen::OuterStride<>(stride));
      ConstStrided<T> v(base + 2 * d, n, hd, Eigen::OuterStride<>(stride));
      Mat<T> s = (q * k.transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (Eigen::Index j = 0; j < n; ++j) {
          if (mask[i * n + j]) {
            mx = std::max(mx, s(i, j));
            any = true;
          }
        }
        require(any, "masked_attention", "query row with no attendable key");
        T total = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
          s(i, j) = mask[i * n + j] ? std::exp(s(i, j) - mx) : T(0);
          total += s(i, j);
        }
        s.row(i) /= total;
      }
      Strided<T> o(out.data() + seg.offset * d + h * hd, n, hd, Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
      o.noalias() = s * v;
      probs.push_back(std::move(s));
    }
  }

  const std::size_t ix = qkv.id;
  return qkv.tape->push(
      "masked_attention", std::move(out), {ix},
      [ix, layout = std::move(layout), n_heads, d, hd, scale_factor, probs = std::move(probs)](Tape<T>& tape,
                                                                                             std::size_t self) {
        const auto& g = tape.grad(self);
        accumulate(tape, ix, [&](Tensor<T>& gx) {
          const auto& xv = tape.value(ix);
          const Eigen::Index stride = static_cast<Eigen::Index>(xv.cols());
          const Eigen::Index out_stride = static_cast<Eigen::Index>(d);
          std::size_t p = 0;
          for (const auto& seg : layout->segments) {
            const Eigen::Index n = static_cast<Eigen::Index>(seg.length);
            for (std::size_t h = 0; h < n_heads; ++h, ++p) {
              const Mat<T>& prob = probs[p];
              const std::size_t base_off = seg.offset * xv.cols() + h * hd;
              ConstStrided<T> q(xv.data() + base_off, n, hd, Eigen::OuterStride<>(stride));
              ConstStrided<T> k(xv.data() + base_off + d, n, hd, Eigen::OuterStride<>(stride));
              ConstStrided<T> v(xv.data() + base_off + 2 * d, n, hd, Eigen::OuterStride<>(stride));
              ConstStrided<T> dout(g.data() + seg.offset * d + h * hd, n, hd, Eigen::OuterStride<>(out_stride));
              Strided<T> dq(gx.data() + base_off, n, hd, Eigen::OuterStride<>(stride));
              Strided<T> dk(gx.data() + base_off + d, n, hd, Eigen::OuterStride<>(stride));
              Strided<T> dv(gx.data() + base_off + 2 * d, n, hd, Eigen::OuterStride<>(stride));

              dv.noalias() += prob.transpose() * dout;
              Mat<T> dp = dout * v.transpose();
              for (Eigen::Index i = 0; i < n; ++i) {
                const T dot = dp.row(i).dot(prob.row(i));
                dp.row(i) = prob.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
              }
              dq.noalias() += (dp * k) * scale_factor;
              dk.noalias() += (dp.transpose() * q) * scale_factor;
            }
          }
        });
      });
}

#define EDT_INSTANTIATE_OPS(T)                                                                             \
  template Var<T> matmul(Var<T>, Var<T>);                                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                                     \
  template Var<T> add_row(Var<T>, Var<T>);                                                                 \
  template Var<T> mul(Var<T>, Var<T>);                                                                     \
  template Var<T> scale(Var<T>, T);                                                                        \
  template Var<T> gelu(Var<T>);                                                                            \
  template Var<T> tanh(Var<T>);                                                                            \
  template Var<T> softmax_rows(Var<T>);                                                                    \
  template Var<T> log_softmax_rows(Var<T>);                                                                \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                                   \
  template Var<T> gather_rows(Var<T>, std::vector<std::size_t>);                                           \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                            \
  template Var<T> concat_cols(std::span<const Var<T>>);                                                    \
  template Var<T> concat_rows(std::span<const Var<T>>);                                                    \
  template Var<T> sum(Var<T>);                                                                             \
  template Var<T> mean(Var<T>);                                                                            \
  template Var<T> squared_error(Var<T>, Tensor<T>, std::vector<T>);                                        \
  template Var<T> cross_entropy(Var<T>, std::vector<std::size_t>, std::vector<T>);                         \
  template Var<T> expectile(Var<T>, std::vector<T>, T, std::vector<T>);                                    \
  template Var<T> masked_attention(Var<T>, std::shared_ptr<const AttentionLayout>, std::size_t);

EDT_INSTANTIATE_OPS(float)
EDT_INSTANTIATE_OPS(double)

}  // namespace edt::ad
