#include "msa/ops.hpp"

#include <algorithm>
#include <cmath>

#include "msa/errors.hpp"

namespace msa {

namespace {

thread_local KinkWatch* g_active_watch = nullptr;

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (!tape) {
      tape = t->tape();
    } else {
      MSA_CHECK(tape == t->tape(), ErrorKind::kContract,
                "operands belong to different tapes");
    }
  }
  return tape;
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  MSA_CHECK(a.shape() == b.shape(), ErrorKind::kShape, op, ": shapes ",
            shape_str(a.shape()), " and ", shape_str(b.shape()), " differ");
}

}  // namespace

KinkWatch::KinkWatch() : prev_(g_active_watch) { g_active_watch = this; }

KinkWatch::~KinkWatch() { g_active_watch = prev_; }

void KinkWatch::report(double distance) {
  if (g_active_watch && distance < g_active_watch->min_distance_) {
    g_active_watch->min_distance_ = distance;
  }
}

// ---- elementwise / linear algebra ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  Tensor y = Tensor::from_vector(a.shape(), std::move(out));

  Tape* tape = common_tape({&a, &b});
  if (!tape) return y;
  std::vector<int> parents;
  int ia = -1, ib = -1;
  if (a.tracked()) { ia = static_cast<int>(parents.size()); parents.push_back(a.node()); }
  if (b.tracked()) { ib = static_cast<int>(parents.size()); parents.push_back(b.node()); }
  return tape->record(std::move(y), std::move(parents),
                      [ia, ib](std::span<const double> g,
                               std::span<const std::span<double>> pg) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (ia >= 0) pg[ia][i] += g[i];
                          if (ib >= 0) pg[ib][i] += g[i];
                        }
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  Tensor y = Tensor::from_vector(a.shape(), std::move(out));

  Tape* tape = common_tape({&a, &b});
  if (!tape) return y;
  std::vector<int> parents;
  int ia = -1, ib = -1;
  if (a.tracked()) { ia = static_cast<int>(parents.size()); parents.push_back(a.node()); }
  if (b.tracked()) { ib = static_cast<int>(parents.size()); parents.push_back(b.node()); }
  return tape->record(std::move(y), std::move(parents),
                      [ia, ib](std::span<const double> g,
                               std::span<const std::span<double>> pg) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (ia >= 0) pg[ia][i] += g[i];
                          if (ib >= 0) pg[ib][i] -= g[i];
                        }
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  Tensor y = Tensor::from_vector(a.shape(), std::move(out));

  Tape* tape = common_tape({&a, &b});
  if (!tape) return y;
  std::vector<int> parents;
  int ia = -1, ib = -1;
  if (a.tracked()) { ia = static_cast<int>(parents.size()); parents.push_back(a.node()); }
  if (b.tracked()) { ib = static_cast<int>(parents.size()); parents.push_back(b.node()); }
  auto da = a.payload();
  auto db = b.payload();
  return tape->record(std::move(y), std::move(parents),
                      [ia, ib, da, db](std::span<const double> g,
                                       std::span<const std::span<double>> pg) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (ia >= 0) pg[ia][i] += g[i] * (*db)[i];
                          if (ib >= 0) pg[ib][i] += g[i] * (*da)[i];
                        }
                      });
}

Tensor scale(const Tensor& a, double c) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * c;
  Tensor y = Tensor::from_vector(a.shape(), std::move(out));
  if (!a.tracked()) return y;
  return a.tape()->record(std::move(y), {a.node()},
                          [c](std::span<const double> g,
                              std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              pg[0][i] += c * g[i];
                            }
                          });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  MSA_CHECK(a.rank() == 2 && b.rank() == 2, ErrorKind::kShape,
            "matmul needs rank-2 operands, got ", shape_str(a.shape()), " and ",
            shape_str(b.shape()));
  const std::size_t n = a.extent(0), k = a.extent(1);
  const std::size_t k2 = b.extent(0), m = b.extent(1);
  MSA_CHECK(k == k2, ErrorKind::kShape, "matmul inner extents differ: ",
            shape_str(a.shape()), " x ", shape_str(b.shape()));

  std::vector<double> out(n * m, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * m;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  Tensor y = Tensor::from_vector({n, m}, std::move(out));

  Tape* tape = common_tape({&a, &b});
  if (!tape) return y;
  std::vector<int> parents;
  int ia = -1, ib = -1;
  if (a.tracked()) { ia = static_cast<int>(parents.size()); parents.push_back(a.node()); }
  if (b.tracked()) { ib = static_cast<int>(parents.size()); parents.push_back(b.node()); }
  auto da = a.payload();
  auto db = b.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [ia, ib, da, db, n, k, m](std::span<const double> g,
                                std::span<const std::span<double>> pg) {
        if (ia >= 0) {  // dA = G * B^T
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = g.data() + i * m;
              const double* brow = db->data() + kk * m;
              for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
              pg[ia][i * k + kk] += acc;
            }
          }
        }
        if (ib >= 0) {  // dB = A^T * G
          for (std::size_t i = 0; i < n; ++i) {
            const double* arow = da->data() + i * k;
            const double* grow = g.data() + i * m;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double av = arow[kk];
              if (av == 0.0) continue;
              double* brow = pg[ib].data() + kk * m;
              for (std::size_t j = 0; j < m; ++j) brow[j] += av * grow[j];
            }
          }
        }
      });
}

Tensor transpose(const Tensor& m) {
  MSA_CHECK(m.rank() == 2, ErrorKind::kShape, "transpose needs rank 2, got ",
            shape_str(m.shape()));
  const std::size_t r = m.extent(0), c = m.extent(1);
  std::vector<double> out(r * c);
  const double* pm = m.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = pm[i * c + j];
  }
  Tensor y = Tensor::from_vector({c, r}, std::move(out));
  if (!m.tracked()) return y;
  return m.tape()->record(std::move(y), {m.node()},
                          [r, c](std::span<const double> g,
                                 std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) {
                                pg[0][i * c + j] += g[j * r + i];
                              }
                            }
                          });
}

Tensor reshape(const Tensor& a, Shape shape) {
  MSA_CHECK(shape_numel(shape) == a.size(), ErrorKind::kShape, "reshape from ",
            shape_str(a.shape()), " to ", shape_str(shape),
            " changes element count");
  std::vector<double> out(a.data().begin(), a.data().end());
  Tensor y = Tensor::from_vector(std::move(shape), std::move(out));
  if (!a.tracked()) return y;
  return a.tape()->record(std::move(y), {a.node()},
                          [](std::span<const double> g,
                             std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              pg[0][i] += g[i];
                            }
                          });
}

Tensor tanh_op(const Tensor& a) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(pa[i]);
  Tensor y = Tensor::from_vector(a.shape(), std::move(out));
  if (!a.tracked()) return y;
  auto dy = y.payload();
  return a.tape()->record(std::move(y), {a.node()},
                          [dy](std::span<const double> g,
                               std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double t = (*dy)[i];
                              pg[0][i] += g[i] * (1.0 - t * t);
                            }
                          });
}

Tensor sigmoid(const Tensor& a) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(pa[i]);
  Tensor y = Tensor::from_vector(a.shape(), std::move(out));
  if (!a.tracked()) return y;
  auto dy = y.payload();
  return a.tape()->record(std::move(y), {a.node()},
                          [dy](std::span<const double> g,
                               std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double s = (*dy)[i];
                              pg[0][i] += g[i] * s * (1.0 - s);
                            }
                          });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor y = Tensor::scalar(acc);
  if (!a.tracked()) return y;
  return a.tape()->record(std::move(y), {a.node()},
                          [](std::span<const double> g,
                             std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < pg[0].size(); ++i) {
                              pg[0][i] += g[0];
                            }
                          });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  MSA_CHECK(m.rank() == 2 && v.rank() == 1 && m.extent(1) == v.extent(0),
            ErrorKind::kShape, "add_rowvec: shapes ", shape_str(m.shape()),
            " and ", shape_str(v.shape()), " are incompatible");
  const std::size_t r = m.extent(0), c = m.extent(1);
  std::vector<double> out(r * c);
  const double* pm = m.data().data();
  const double* pv = v.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = pm[i * c + j] + pv[j];
  }
  Tensor y = Tensor::from_vector(m.shape(), std::move(out));

  Tape* tape = common_tape({&m, &v});
  if (!tape) return y;
  std::vector<int> parents;
  int im = -1, iv = -1;
  if (m.tracked()) { im = static_cast<int>(parents.size()); parents.push_back(m.node()); }
  if (v.tracked()) { iv = static_cast<int>(parents.size()); parents.push_back(v.node()); }
  return tape->record(std::move(y), std::move(parents),
                      [im, iv, r, c](std::span<const double> g,
                                     std::span<const std::span<double>> pg) {
                        for (std::size_t i = 0; i < r; ++i) {
                          for (std::size_t j = 0; j < c; ++j) {
                            if (im >= 0) pg[im][i * c + j] += g[i * c + j];
                            if (iv >= 0) pg[iv][j] += g[i * c + j];
                          }
                        }
                      });
}

Tensor softmax_rows(const Tensor& m, double temperature) {
  MSA_CHECK(temperature > 0.0, ErrorKind::kConfig,
            "softmax temperature must be positive, got ", temperature);
  MSA_CHECK(m.rank() == 2, ErrorKind::kShape, "softmax_rows needs rank 2, got ",
            shape_str(m.shape()));
  const std::size_t r = m.extent(0), c = m.extent(1);
  std::vector<double> out(r * c);
  const double* pm = m.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, pm[i * c + j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(pm[i * c + j] / temperature - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  Tensor y = Tensor::from_vector(m.shape(), std::move(out));
  if (!m.tracked()) return y;
  auto dy = y.payload();
  return m.tape()->record(
      std::move(y), {m.node()},
      [dy, r, c, temperature](std::span<const double> g,
                              std::span<const std::span<double>> pg) {
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * (*dy)[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            pg[0][i * c + j] +=
                (*dy)[i * c + j] * (g[i * c + j] - dot) / temperature;
          }
        }
      });
}

Tensor detach(const Tensor& a) { return a.detached(); }

// ---- image encoder kernels --------------------------------------------------

Tensor channel_linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  MSA_CHECK(x.rank() == 4, ErrorKind::kShape, "channel_linear input must be b×c×h×w, got ",
            shape_str(x.shape()));
  MSA_CHECK(w.rank() == 2, ErrorKind::kShape, "channel_linear weight must be c_out×c_in");
  const std::size_t b = x.extent(0), ci = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const std::size_t co = w.extent(0);
  MSA_CHECK(w.extent(1) == ci, ErrorKind::kShape, "channel_linear: weight ",
            shape_str(w.shape()), " does not match ", ci, " input channels");
  if (bias) {
    MSA_CHECK(bias->rank() == 1 && bias->extent(0) == co, ErrorKind::kShape,
              "channel_linear: bias shape ", shape_str(bias->shape()));
  }
  const std::size_t hw = h * wd;
  std::vector<double> out(b * co * hw, 0.0);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (std::size_t bb = 0; bb < b; ++bb) {
    for (std::size_t o = 0; o < co; ++o) {
      double* orow = out.data() + (bb * co + o) * hw;
      if (bias) {
        const double bv = bias->data()[o];
        for (std::size_t p = 0; p < hw; ++p) orow[p] = bv;
      }
      for (std::size_t c = 0; c < ci; ++c) {
        const double wv = pw[o * ci + c];
        if (wv == 0.0) continue;
        const double* xrow = px + (bb * ci + c) * hw;
        for (std::size_t p = 0; p < hw; ++p) orow[p] += wv * xrow[p];
      }
    }
  }
  Tensor y = Tensor::from_vector({b, co, h, wd}, std::move(out));

  const Tensor* bptr = bias;
  Tape* tape = bptr ? common_tape({&x, &w, bptr}) : common_tape({&x, &w});
  if (!tape) return y;
  std::vector<int> parents;
  int ix = -1, iw = -1, ib = -1;
  if (x.tracked()) { ix = static_cast<int>(parents.size()); parents.push_back(x.node()); }
  if (w.tracked()) { iw = static_cast<int>(parents.size()); parents.push_back(w.node()); }
  if (bptr && bptr->tracked()) { ib = static_cast<int>(parents.size()); parents.push_back(bptr->node()); }
  auto dx = x.payload();
  auto dw = w.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [ix, iw, ib, dx, dw, b, ci, co, hw](std::span<const double> g,
                                          std::span<const std::span<double>> pg) {
        for (std::size_t bb = 0; bb < b; ++bb) {
          for (std::size_t o = 0; o < co; ++o) {
            const double* grow = g.data() + (bb * co + o) * hw;
            if (ib >= 0) {
              double acc = 0.0;
              for (std::size_t p = 0; p < hw; ++p) acc += grow[p];
              pg[ib][o] += acc;
            }
            for (std::size_t c = 0; c < ci; ++c) {
              const double* xrow = dx->data() + (bb * ci + c) * hw;
              if (iw >= 0) {
                double acc = 0.0;
                for (std::size_t p = 0; p < hw; ++p) acc += grow[p] * xrow[p];
                pg[iw][o * ci + c] += acc;
              }
              if (ix >= 0) {
                const double wv = (*dw)[o * ci + c];
                if (wv != 0.0) {
                  double* xg = pg[ix].data() + (bb * ci + c) * hw;
                  for (std::size_t p = 0; p < hw; ++p) xg[p] += wv * grow[p];
                }
              }
            }
          }
        }
      });
}

Tensor avg_pool2(const Tensor& x) {
  MSA_CHECK(x.rank() == 4, ErrorKind::kShape, "avg_pool2 input must be b×c×h×w");
  const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  MSA_CHECK(h % 2 == 0 && w % 2 == 0, ErrorKind::kConfig,
            "spatial extent ", h, "x", w, " not divisible by pooling factor 2");
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> out(b * c * ho * wo);
  const double* px = x.data().data();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const double* plane = px + bc * h * w;
    double* oplane = out.data() + bc * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        oplane[i * wo + j] = 0.25 * (plane[(2 * i) * w + 2 * j] +
                                     plane[(2 * i) * w + 2 * j + 1] +
                                     plane[(2 * i + 1) * w + 2 * j] +
                                     plane[(2 * i + 1) * w + 2 * j + 1]);
      }
    }
  }
  Tensor y = Tensor::from_vector({b, c, ho, wo}, std::move(out));
  if (!x.tracked()) return y;
  return x.tape()->record(
      std::move(y), {x.node()},
      [b, c, h, w, ho, wo](std::span<const double> g,
                           std::span<const std::span<double>> pg) {
        for (std::size_t bc = 0; bc < b * c; ++bc) {
          const double* gplane = g.data() + bc * ho * wo;
          double* xg = pg[0].data() + bc * h * w;
          for (std::size_t i = 0; i < ho; ++i) {
            for (std::size_t j = 0; j < wo; ++j) {
              const double gv = 0.25 * gplane[i * wo + j];
              xg[(2 * i) * w + 2 * j] += gv;
              xg[(2 * i) * w + 2 * j + 1] += gv;
              xg[(2 * i + 1) * w + 2 * j] += gv;
              xg[(2 * i + 1) * w + 2 * j + 1] += gv;
            }
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  MSA_CHECK(x.rank() == 4, ErrorKind::kShape, "global_avg_pool input must be b×c×h×w");
  const std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  std::vector<double> out(b * c);
  const double* px = x.data().data();
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    double acc = 0.0;
    const double* plane = px + bc * hw;
    for (std::size_t p = 0; p < hw; ++p) acc += plane[p];
    out[bc] = acc / static_cast<double>(hw);
  }
  Tensor y = Tensor::from_vector({b, c}, std::move(out));
  if (!x.tracked()) return y;
  return x.tape()->record(std::move(y), {x.node()},
                          [b, c, hw](std::span<const double> g,
                                     std::span<const std::span<double>> pg) {
                            const double inv = 1.0 / static_cast<double>(hw);
                            for (std::size_t bc = 0; bc < b * c; ++bc) {
                              double* xg = pg[0].data() + bc * hw;
                              const double gv = g[bc] * inv;
                              for (std::size_t p = 0; p < hw; ++p) xg[p] += gv;
                            }
                          });
}

// ---- text encoder kernels ---------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& ids,
                        std::size_t b, std::size_t p) {
  MSA_CHECK(table.rank() == 2, ErrorKind::kShape, "embedding table must be rank 2");
  MSA_CHECK(ids.size() == b * p, ErrorKind::kContract, "expected ", b * p,
            " token ids, got ", ids.size());
  const std::size_t rows = table.extent(0), d = table.extent(1);
  for (std::int64_t id : ids) {
    MSA_CHECK(id >= 0 && static_cast<std::size_t>(id) < rows, ErrorKind::kInput,
              "token id ", id, " out of range [0, ", rows, ")");
  }
  std::vector<double> out(b * p * d);
  const double* pt = table.data().data();
  for (std::size_t i = 0; i < b * p; ++i) {
    const double* row = pt + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.data() + i * d);
  }
  Tensor y = Tensor::from_vector({b, p, d}, std::move(out));
  if (!table.tracked()) return y;
  return table.tape()->record(std::move(y), {table.node()},
                              [ids, d](std::span<const double> g,
                                       std::span<const std::span<double>> pg) {
                                for (std::size_t i = 0; i < ids.size(); ++i) {
                                  double* trow =
                                      pg[0].data() + static_cast<std::size_t>(ids[i]) * d;
                                  const double* grow = g.data() + i * d;
                                  for (std::size_t j = 0; j < d; ++j) trow[j] += grow[j];
                                }
                              });
}

Tensor add_posenc(const Tensor& e, const Tensor& pos) {
  MSA_CHECK(e.rank() == 3 && pos.rank() == 2 && e.extent(1) == pos.extent(0) &&
                e.extent(2) == pos.extent(1),
            ErrorKind::kShape, "add_posenc: shapes ", shape_str(e.shape()), " and ",
            shape_str(pos.shape()), " are incompatible");
  const std::size_t b = e.extent(0), p = e.extent(1), d = e.extent(2);
  std::vector<double> out(b * p * d);
  const double* pe = e.data().data();
  const double* pp = pos.data().data();
  for (std::size_t bb = 0; bb < b; ++bb) {
    for (std::size_t i = 0; i < p * d; ++i) out[bb * p * d + i] = pe[bb * p * d + i] + pp[i];
  }
  Tensor y = Tensor::from_vector(e.shape(), std::move(out));

  Tape* tape = common_tape({&e, &pos});
  if (!tape) return y;
  std::vector<int> parents;
  int ie = -1, ip = -1;
  if (e.tracked()) { ie = static_cast<int>(parents.size()); parents.push_back(e.node()); }
  if (pos.tracked()) { ip = static_cast<int>(parents.size()); parents.push_back(pos.node()); }
  return tape->record(std::move(y), std::move(parents),
                      [ie, ip, b, p, d](std::span<const double> g,
                                        std::span<const std::span<double>> pg) {
                        for (std::size_t bb = 0; bb < b; ++bb) {
                          for (std::size_t i = 0; i < p * d; ++i) {
                            if (ie >= 0) pg[ie][bb * p * d + i] += g[bb * p * d + i];
                            if (ip >= 0) pg[ip][i] += g[bb * p * d + i];
                          }
                        }
                      });
}

Tensor token_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const std::vector<std::uint8_t>& mask,
                               std::size_t heads, double scaling) {
  MSA_CHECK(q.rank() == 3 && k.shape() == q.shape() && v.shape() == q.shape(),
            ErrorKind::kShape, "token attention expects matching b×p×d inputs");
  const std::size_t b = q.extent(0), p = q.extent(1), d = q.extent(2);
  MSA_CHECK(mask.size() == b * p, ErrorKind::kContract, "mask size mismatch");
  MSA_CHECK(heads > 0 && d % heads == 0, ErrorKind::kConfig, "dimension ", d,
            " not divisible by ", heads, " heads");
  const std::size_t dh = d / heads;

  std::vector<double> out(b * p * d, 0.0);
  std::vector<double> alpha(b * heads * p * p, 0.0);  // (b, h, query, key)
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();

  for (std::size_t bb = 0; bb < b; ++bb) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < p; ++t) {
        const double* qv = pq + (bb * p + t) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> logits(p, 0.0);
        for (std::size_t s = 0; s < p; ++s) {
          if (!mask[bb * p + s]) continue;
          const double* kv = pk + (bb * p + s) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += qv[j] * kv[j];
          logits[s] = dot * scaling;
          mx = std::max(mx, logits[s]);
        }
        MSA_CHECK(std::isfinite(mx), ErrorKind::kInput,
                  "text row ", bb, " has no valid token");
        double z = 0.0;
        double* arow = alpha.data() + ((bb * heads + h) * p + t) * p;
        for (std::size_t s = 0; s < p; ++s) {
          if (!mask[bb * p + s]) continue;
          arow[s] = std::exp(logits[s] - mx);
          z += arow[s];
        }
        double* orow = out.data() + (bb * p + t) * d + h * dh;
        for (std::size_t s = 0; s < p; ++s) {
          if (arow[s] == 0.0) continue;
          arow[s] /= z;
          const double* vv = pv + (bb * p + s) * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) orow[j] += arow[s] * vv[j];
        }
      }
    }
  }
  Tensor y = Tensor::from_vector(q.shape(), std::move(out));

  Tape* tape = common_tape({&q, &k, &v});
  if (!tape) return y;
  std::vector<int> parents;
  int iq = -1, ik = -1, iv = -1;
  if (q.tracked()) { iq = static_cast<int>(parents.size()); parents.push_back(q.node()); }
  if (k.tracked()) { ik = static_cast<int>(parents.size()); parents.push_back(k.node()); }
  if (v.tracked()) { iv = static_cast<int>(parents.size()); parents.push_back(v.node()); }
  auto dq = q.payload();
  auto dk = k.payload();
  auto dv = v.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [iq, ik, iv, dq, dk, dv, al = std::move(alpha), mask, b, p, d, dh, heads,
       scaling](std::span<const double> g, std::span<const std::span<double>> pg) {
        std::vector<double> dlogit(p);
        for (std::size_t bb = 0; bb < b; ++bb) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < p; ++t) {
              const double* arow = al.data() + ((bb * heads + h) * p + t) * p;
              const double* grow = g.data() + (bb * p + t) * d + h * dh;
              double inner = 0.0;
              for (std::size_t s = 0; s < p; ++s) {
                if (arow[s] == 0.0) { dlogit[s] = 0.0; continue; }
                const double* vv = dv->data() + (bb * p + s) * d + h * dh;
                double dalpha = 0.0;
                for (std::size_t j = 0; j < dh; ++j) dalpha += grow[j] * vv[j];
                if (iv >= 0) {
                  double* vg = pg[iv].data() + (bb * p + s) * d + h * dh;
                  for (std::size_t j = 0; j < dh; ++j) vg[j] += arow[s] * grow[j];
                }
                dlogit[s] = dalpha;  // to be centered below
                inner += arow[s] * dalpha;
              }
              const double* qv = dq->data() + (bb * p + t) * d + h * dh;
              for (std::size_t s = 0; s < p; ++s) {
                if (arow[s] == 0.0) continue;
                const double dl = arow[s] * (dlogit[s] - inner) * scaling;
                const double* kv = dk->data() + (bb * p + s) * d + h * dh;
                if (iq >= 0) {
                  double* qg = pg[iq].data() + (bb * p + t) * d + h * dh;
                  for (std::size_t j = 0; j < dh; ++j) qg[j] += dl * kv[j];
                }
                if (ik >= 0) {
                  double* kg = pg[ik].data() + (bb * p + s) * d + h * dh;
                  for (std::size_t j = 0; j < dh; ++j) kg[j] += dl * qv[j];
                }
              }
            }
          }
        }
      });
}

Tensor mask_rows(const Tensor& local, const std::vector<std::uint8_t>& mask) {
  MSA_CHECK(local.rank() == 3, ErrorKind::kShape, "mask_rows expects b×p×d");
  const std::size_t b = local.extent(0), p = local.extent(1), d = local.extent(2);
  MSA_CHECK(mask.size() == b * p, ErrorKind::kContract, "mask size mismatch");
  std::vector<double> out(b * p * d, 0.0);
  const double* pl = local.data().data();
  for (std::size_t i = 0; i < b * p; ++i) {
    if (!mask[i]) continue;
    std::copy(pl + i * d, pl + (i + 1) * d, out.data() + i * d);
  }
  Tensor y = Tensor::from_vector(local.shape(), std::move(out));
  if (!local.tracked()) return y;
  return local.tape()->record(std::move(y), {local.node()},
                              [mask, d](std::span<const double> g,
                                        std::span<const std::span<double>> pg) {
                                for (std::size_t i = 0; i < mask.size(); ++i) {
                                  if (!mask[i]) continue;
                                  for (std::size_t j = 0; j < d; ++j) {
                                    pg[0][i * d + j] += g[i * d + j];
                                  }
                                }
                              });
}

Tensor masked_mean_rows(const Tensor& local, const std::vector<std::uint8_t>& mask) {
  MSA_CHECK(local.rank() == 3, ErrorKind::kShape, "masked_mean_rows expects b×p×d");
  const std::size_t b = local.extent(0), p = local.extent(1), d = local.extent(2);
  MSA_CHECK(mask.size() == b * p, ErrorKind::kContract, "mask size mismatch");
  std::vector<double> out(b * d, 0.0);
  std::vector<double> inv_count(b, 0.0);
  const double* pl = local.data().data();
  for (std::size_t bb = 0; bb < b; ++bb) {
    std::size_t cnt = 0;
    for (std::size_t t = 0; t < p; ++t) {
      if (!mask[bb * p + t]) continue;
      ++cnt;
      const double* row = pl + (bb * p + t) * d;
      for (std::size_t j = 0; j < d; ++j) out[bb * d + j] += row[j];
    }
    MSA_CHECK(cnt > 0, ErrorKind::kInput, "text row ", bb, " has no valid token");
    inv_count[bb] = 1.0 / static_cast<double>(cnt);
    for (std::size_t j = 0; j < d; ++j) out[bb * d + j] *= inv_count[bb];
  }
  Tensor y = Tensor::from_vector({b, d}, std::move(out));
  if (!local.tracked()) return y;
  return local.tape()->record(
      std::move(y), {local.node()},
      [mask, ic = std::move(inv_count), b, p, d](std::span<const double> g,
                                                 std::span<const std::span<double>> pg) {
        for (std::size_t bb = 0; bb < b; ++bb) {
          for (std::size_t t = 0; t < p; ++t) {
            if (!mask[bb * p + t]) continue;
            double* lg = pg[0].data() + (bb * p + t) * d;
            for (std::size_t j = 0; j < d; ++j) lg[j] += g[bb * d + j] * ic[bb];
          }
        }
      });
}

// ---- pairwise attention kernels ---------------------------------------------

Tensor pairwise_gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                const std::vector<std::uint8_t>& mask,
                                double temperature, std::size_t heads,
                                std::vector<double>* gate_dump) {
  MSA_CHECK(q.rank() == 2 && k.rank() == 3 && v.shape() == k.shape(),
            ErrorKind::kShape, "pairwise_gated_attention: bad shapes ",
            shape_str(q.shape()), ", ", shape_str(k.shape()), ", ",
            shape_str(v.shape()));
  const std::size_t a = q.extent(0), d = q.extent(1);
  const std::size_t b = k.extent(0), p = k.extent(1);
  MSA_CHECK(k.extent(2) == d, ErrorKind::kShape,
            "pairwise_gated_attention: query dim ", d, " vs token dim ", k.extent(2));
  MSA_CHECK(mask.size() == b * p, ErrorKind::kContract, "mask size mismatch");
  MSA_CHECK(temperature > 0.0, ErrorKind::kConfig,
            "attention temperature must be positive, got ", temperature);
  MSA_CHECK(heads > 0 && d % heads == 0, ErrorKind::kConfig, "dimension ", d,
            " not divisible by ", heads, " heads");
  const std::size_t dh = d / heads;

  std::vector<double> out(a * b * d, 0.0);
  std::vector<double> gates(a * b * heads * p, 0.0);  // masked tokens stay 0
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  const double inv_tau = 1.0 / temperature;

  for (std::size_t j = 0; j < a; ++j) {
    const double* qrow = pq + j * d;
    for (std::size_t kk = 0; kk < b; ++kk) {
      double* orow = out.data() + (j * b + kk) * d;
      double* grow = gates.data() + ((j * b + kk) * heads) * p;
      for (std::size_t t = 0; t < p; ++t) {
        if (!mask[kk * p + t]) continue;
        const double* krow = pk + (kk * p + t) * d;
        const double* vrow = pv + (kk * p + t) * d;
        for (std::size_t h = 0; h < heads; ++h) {
          double dot = 0.0;
          const std::size_t off = h * dh;
          for (std::size_t u = 0; u < dh; ++u) dot += qrow[off + u] * krow[off + u];
          const double gate = sigmoid_scalar(dot * inv_tau);
          grow[h * p + t] = gate;
          for (std::size_t u = 0; u < dh; ++u) orow[off + u] += gate * vrow[off + u];
        }
      }
    }
  }
  if (gate_dump) *gate_dump = gates;
  Tensor y = Tensor::from_vector({a, b, d}, std::move(out));

  Tape* tape = common_tape({&q, &k, &v});
  if (!tape) return y;
  std::vector<int> parents;
  int iq = -1, ik = -1, iv = -1;
  if (q.tracked()) { iq = static_cast<int>(parents.size()); parents.push_back(q.node()); }
  if (k.tracked()) { ik = static_cast<int>(parents.size()); parents.push_back(k.node()); }
  if (v.tracked()) { iv = static_cast<int>(parents.size()); parents.push_back(v.node()); }
  auto dq = q.payload();
  auto dk = k.payload();
  auto dv = v.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [iq, ik, iv, dq, dk, dv, gt = std::move(gates), mask, a, b, p, d, dh, heads,
       inv_tau](std::span<const double> g, std::span<const std::span<double>> pg) {
        for (std::size_t j = 0; j < a; ++j) {
          const double* qrow = dq->data() + j * d;
          for (std::size_t kk = 0; kk < b; ++kk) {
            const double* grow = g.data() + (j * b + kk) * d;
            const double* gate_row = gt.data() + ((j * b + kk) * heads) * p;
            for (std::size_t t = 0; t < p; ++t) {
              if (!mask[kk * p + t]) continue;
              const double* krow = dk->data() + (kk * p + t) * d;
              const double* vrow = dv->data() + (kk * p + t) * d;
              for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * dh;
                const double gate = gate_row[h * p + t];
                double dgate = 0.0;
                for (std::size_t u = 0; u < dh; ++u) {
                  dgate += grow[off + u] * vrow[off + u];
                  if (iv >= 0) {
                    pg[iv][(kk * p + t) * d + off + u] += gate * grow[off + u];
                  }
                }
                const double dlogit = dgate * gate * (1.0 - gate) * inv_tau;
                if (dlogit == 0.0) continue;
                for (std::size_t u = 0; u < dh; ++u) {
                  if (iq >= 0) pg[iq][j * d + off + u] += dlogit * krow[off + u];
                  if (ik >= 0) {
                    pg[ik][(kk * p + t) * d + off + u] += dlogit * qrow[off + u];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor pairwise_softmax_attention(const Tensor& q_img, const Tensor& k_img,
                                  const Tensor& v_img, const Tensor& k_txt,
                                  const Tensor& v_txt,
                                  const std::vector<std::uint8_t>& mask,
                                  std::size_t heads) {
  MSA_CHECK(q_img.rank() == 2 && k_img.shape() == q_img.shape() &&
                v_img.shape() == q_img.shape(),
            ErrorKind::kShape, "pairwise_softmax_attention: image operands must share a×d");
  MSA_CHECK(k_txt.rank() == 3 && v_txt.shape() == k_txt.shape(), ErrorKind::kShape,
            "pairwise_softmax_attention: token operands must share b×p×d");
  const std::size_t a = q_img.extent(0), d = q_img.extent(1);
  const std::size_t b = k_txt.extent(0), p = k_txt.extent(1);
  MSA_CHECK(k_txt.extent(2) == d, ErrorKind::kShape, "dimension mismatch");
  MSA_CHECK(mask.size() == b * p, ErrorKind::kContract, "mask size mismatch");
  MSA_CHECK(heads > 0 && d % heads == 0, ErrorKind::kConfig, "dimension ", d,
            " not divisible by ", heads, " heads");
  const std::size_t dh = d / heads;
  const double scaling = 1.0 / std::sqrt(static_cast<double>(dh));

  // attention weights per (j, k, h): image position then p token slots
  std::vector<double> alpha(a * b * heads * (p + 1), 0.0);
  std::vector<double> out(a * b * d, 0.0);
  const double* pq = q_img.data().data();
  const double* pki = k_img.data().data();
  const double* pvi = v_img.data().data();
  const double* pkt = k_txt.data().data();
  const double* pvt = v_txt.data().data();

  for (std::size_t kk = 0; kk < b; ++kk) {
    bool any = false;
    for (std::size_t t = 0; t < p; ++t) any = any || mask[kk * p + t];
    MSA_CHECK(any, ErrorKind::kInput, "text row ", kk, " has no valid token");
  }

  std::vector<double> logits(p + 1);
  for (std::size_t j = 0; j < a; ++j) {
    for (std::size_t kk = 0; kk < b; ++kk) {
      double* orow = out.data() + (j * b + kk) * d;
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const double* qv = pq + j * d + off;
        double dot = 0.0;
        for (std::size_t u = 0; u < dh; ++u) dot += qv[u] * pki[j * d + off + u];
        logits[0] = dot * scaling;
        double mx = logits[0];
        for (std::size_t t = 0; t < p; ++t) {
          if (!mask[kk * p + t]) continue;
          const double* kv = pkt + (kk * p + t) * d + off;
          dot = 0.0;
          for (std::size_t u = 0; u < dh; ++u) dot += qv[u] * kv[u];
          logits[t + 1] = dot * scaling;
          mx = std::max(mx, logits[t + 1]);
        }
        double z = std::exp(logits[0] - mx);
        double* arow = alpha.data() + ((j * b + kk) * heads + h) * (p + 1);
        arow[0] = z;
        for (std::size_t t = 0; t < p; ++t) {
          if (!mask[kk * p + t]) continue;
          arow[t + 1] = std::exp(logits[t + 1] - mx);
          z += arow[t + 1];
        }
        arow[0] /= z;
        for (std::size_t u = 0; u < dh; ++u) orow[off + u] += arow[0] * pvi[j * d + off + u];
        for (std::size_t t = 0; t < p; ++t) {
          if (arow[t + 1] == 0.0) continue;
          arow[t + 1] /= z;
          const double* vv = pvt + (kk * p + t) * d + off;
          for (std::size_t u = 0; u < dh; ++u) orow[off + u] += arow[t + 1] * vv[u];
        }
      }
    }
  }
  Tensor y = Tensor::from_vector({a, b, d}, std::move(out));

  Tape* tape = common_tape({&q_img, &k_img, &v_img, &k_txt, &v_txt});
  if (!tape) return y;
  std::vector<int> parents;
  int iq = -1, iki = -1, ivi = -1, ikt = -1, ivt = -1;
  auto track = [&](const Tensor& t, int& slot) {
    if (t.tracked()) { slot = static_cast<int>(parents.size()); parents.push_back(t.node()); }
  };
  track(q_img, iq);
  track(k_img, iki);
  track(v_img, ivi);
  track(k_txt, ikt);
  track(v_txt, ivt);
  auto dq = q_img.payload();
  auto dki = k_img.payload();
  auto dvi = v_img.payload();
  auto dkt = k_txt.payload();
  auto dvt = v_txt.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [iq, iki, ivi, ikt, ivt, dq, dki, dvi, dkt, dvt, al = std::move(alpha), mask,
       a, b, p, d, dh, heads, scaling](std::span<const double> g,
                                       std::span<const std::span<double>> pg) {
        std::vector<double> dlogit(p + 1);
        for (std::size_t j = 0; j < a; ++j) {
          for (std::size_t kk = 0; kk < b; ++kk) {
            const double* grow = g.data() + (j * b + kk) * d;
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = h * dh;
              const double* arow = al.data() + ((j * b + kk) * heads + h) * (p + 1);
              double inner = 0.0;
              {  // image slot
                double dalpha = 0.0;
                for (std::size_t u = 0; u < dh; ++u) {
                  dalpha += grow[off + u] * (*dvi)[j * d + off + u];
                  if (ivi >= 0) pg[ivi][j * d + off + u] += arow[0] * grow[off + u];
                }
                dlogit[0] = dalpha;
                inner += arow[0] * dalpha;
              }
              for (std::size_t t = 0; t < p; ++t) {
                if (arow[t + 1] == 0.0) { dlogit[t + 1] = 0.0; continue; }
                double dalpha = 0.0;
                const double* vv = dvt->data() + (kk * p + t) * d + off;
                for (std::size_t u = 0; u < dh; ++u) {
                  dalpha += grow[off + u] * vv[u];
                  if (ivt >= 0) {
                    pg[ivt][(kk * p + t) * d + off + u] += arow[t + 1] * grow[off + u];
                  }
                }
                dlogit[t + 1] = dalpha;
                inner += arow[t + 1] * dalpha;
              }
              const double* qv = dq->data() + j * d + off;
              {  // image slot contributions
                const double dl = arow[0] * (dlogit[0] - inner) * scaling;
                for (std::size_t u = 0; u < dh; ++u) {
                  if (iq >= 0) pg[iq][j * d + off + u] += dl * (*dki)[j * d + off + u];
                  if (iki >= 0) pg[iki][j * d + off + u] += dl * qv[u];
                }
              }
              for (std::size_t t = 0; t < p; ++t) {
                if (arow[t + 1] == 0.0) continue;
                const double dl = arow[t + 1] * (dlogit[t + 1] - inner) * scaling;
                const double* kv = dkt->data() + (kk * p + t) * d + off;
                for (std::size_t u = 0; u < dh; ++u) {
                  if (iq >= 0) pg[iq][j * d + off + u] += dl * kv[u];
                  if (ikt >= 0) pg[ikt][(kk * p + t) * d + off + u] += dl * qv[u];
                }
              }
            }
          }
        }
      });
}

Tensor add_cls_broadcast(const Tensor& agg, const Tensor& cls) {
  MSA_CHECK(agg.rank() == 3 && cls.rank() == 2 && agg.extent(1) == cls.extent(0) &&
                agg.extent(2) == cls.extent(1),
            ErrorKind::kShape, "add_cls_broadcast: shapes ", shape_str(agg.shape()),
            " and ", shape_str(cls.shape()), " are incompatible");
  const std::size_t a = agg.extent(0), b = agg.extent(1), d = agg.extent(2);
  std::vector<double> out(a * b * d);
  const double* pa = agg.data().data();
  const double* pc = cls.data().data();
  for (std::size_t j = 0; j < a; ++j) {
    for (std::size_t kk = 0; kk < b; ++kk) {
      const double* arow = pa + (j * b + kk) * d;
      const double* crow = pc + kk * d;
      double* orow = out.data() + (j * b + kk) * d;
      for (std::size_t u = 0; u < d; ++u) orow[u] = arow[u] + crow[u];
    }
  }
  Tensor y = Tensor::from_vector(agg.shape(), std::move(out));

  Tape* tape = common_tape({&agg, &cls});
  if (!tape) return y;
  std::vector<int> parents;
  int ia = -1, ic = -1;
  if (agg.tracked()) { ia = static_cast<int>(parents.size()); parents.push_back(agg.node()); }
  if (cls.tracked()) { ic = static_cast<int>(parents.size()); parents.push_back(cls.node()); }
  return tape->record(std::move(y), std::move(parents),
                      [ia, ic, a, b, d](std::span<const double> g,
                                        std::span<const std::span<double>> pg) {
                        for (std::size_t j = 0; j < a; ++j) {
                          for (std::size_t kk = 0; kk < b; ++kk) {
                            const double* grow = g.data() + (j * b + kk) * d;
                            for (std::size_t u = 0; u < d; ++u) {
                              if (ia >= 0) pg[ia][(j * b + kk) * d + u] += grow[u];
                              if (ic >= 0) pg[ic][kk * d + u] += grow[u];
                            }
                          }
                        }
                      });
}

namespace {
constexpr double kNormFloor = 1e-30;
}

Tensor pairwise_cosine(const Tensor& v, const Tensor& u) {
  MSA_CHECK(v.rank() == 2 && u.rank() == 3 && u.extent(0) == v.extent(0) &&
                u.extent(2) == v.extent(1),
            ErrorKind::kShape, "pairwise_cosine: shapes ", shape_str(v.shape()),
            " and ", shape_str(u.shape()), " are incompatible");
  const std::size_t a = v.extent(0), d = v.extent(1), b = u.extent(1);
  std::vector<double> out(a * b);
  const double* pv = v.data().data();
  const double* pu = u.data().data();
  std::vector<double> vnorm(a);
  for (std::size_t j = 0; j < a; ++j) {
    double acc = 0.0;
    for (std::size_t x = 0; x < d; ++x) acc += pv[j * d + x] * pv[j * d + x];
    vnorm[j] = std::sqrt(acc);
  }
  for (std::size_t j = 0; j < a; ++j) {
    for (std::size_t kk = 0; kk < b; ++kk) {
      const double* urow = pu + (j * b + kk) * d;
      double dot = 0.0, un = 0.0;
      for (std::size_t x = 0; x < d; ++x) {
        dot += pv[j * d + x] * urow[x];
        un += urow[x] * urow[x];
      }
      un = std::sqrt(un);
      const double denom = vnorm[j] * un;
      out[j * b + kk] = denom < kNormFloor ? 0.0 : dot / denom;
    }
  }
  Tensor y = Tensor::from_vector({a, b}, std::move(out));

  Tape* tape = common_tape({&v, &u});
  if (!tape) return y;
  std::vector<int> parents;
  int ivv = -1, iu = -1;
  if (v.tracked()) { ivv = static_cast<int>(parents.size()); parents.push_back(v.node()); }
  if (u.tracked()) { iu = static_cast<int>(parents.size()); parents.push_back(u.node()); }
  auto dv = v.payload();
  auto du = u.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [ivv, iu, dv, du, a, b, d](std::span<const double> g,
                                 std::span<const std::span<double>> pg) {
        for (std::size_t j = 0; j < a; ++j) {
          const double* vr = dv->data() + j * d;
          double vn2 = 0.0;
          for (std::size_t x = 0; x < d; ++x) vn2 += vr[x] * vr[x];
          const double vn = std::sqrt(vn2);
          for (std::size_t kk = 0; kk < b; ++kk) {
            const double gv = g[j * b + kk];
            if (gv == 0.0) continue;
            const double* ur = du->data() + (j * b + kk) * d;
            double dot = 0.0, un2 = 0.0;
            for (std::size_t x = 0; x < d; ++x) {
              dot += vr[x] * ur[x];
              un2 += ur[x] * ur[x];
            }
            const double un = std::sqrt(un2);
            const double denom = vn * un;
            if (denom < kNormFloor) continue;
            const double c = dot / denom;
            for (std::size_t x = 0; x < d; ++x) {
              if (ivv >= 0) {
                pg[ivv][j * d + x] += gv * (ur[x] / denom - c * vr[x] / vn2);
              }
              if (iu >= 0) {
                pg[iu][(j * b + kk) * d + x] += gv * (vr[x] / denom - c * ur[x] / un2);
              }
            }
          }
        }
      });
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  MSA_CHECK(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(1),
            ErrorKind::kShape, "cosine_matrix: shapes ", shape_str(a.shape()),
            " and ", shape_str(b.shape()), " are incompatible");
  const std::size_t n = a.extent(0), m = b.extent(0), d = a.extent(1);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> na(n), nb(m);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t x = 0; x < d; ++x) acc += pa[i * d + x] * pa[i * d + x];
    na[i] = std::sqrt(acc);
  }
  for (std::size_t j = 0; j < m; ++j) {
    double acc = 0.0;
    for (std::size_t x = 0; x < d; ++x) acc += pb[j * d + x] * pb[j * d + x];
    nb[j] = std::sqrt(acc);
  }
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t x = 0; x < d; ++x) dot += pa[i * d + x] * pb[j * d + x];
      const double denom = na[i] * nb[j];
      out[i * m + j] = denom < kNormFloor ? 0.0 : dot / denom;
    }
  }
  Tensor y = Tensor::from_vector({n, m}, std::move(out));

  Tape* tape = common_tape({&a, &b});
  if (!tape) return y;
  std::vector<int> parents;
  int ia = -1, ib = -1;
  if (a.tracked()) { ia = static_cast<int>(parents.size()); parents.push_back(a.node()); }
  if (b.tracked()) { ib = static_cast<int>(parents.size()); parents.push_back(b.node()); }
  auto da = a.payload();
  auto db = b.payload();
  return tape->record(
      std::move(y), std::move(parents),
      [ia, ib, da, db, n, m, d](std::span<const double> g,
                                std::span<const std::span<double>> pg) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* ar = da->data() + i * d;
          double an2 = 0.0;
          for (std::size_t x = 0; x < d; ++x) an2 += ar[x] * ar[x];
          const double an = std::sqrt(an2);
          for (std::size_t j = 0; j < m; ++j) {
            const double gv = g[i * m + j];
            if (gv == 0.0) continue;
            const double* br = db->data() + j * d;
            double dot = 0.0, bn2 = 0.0;
            for (std::size_t x = 0; x < d; ++x) {
              dot += ar[x] * br[x];
              bn2 += br[x] * br[x];
            }
            const double bn = std::sqrt(bn2);
            const double denom = an * bn;
            if (denom < kNormFloor) continue;
            const double c = dot / denom;
            for (std::size_t x = 0; x < d; ++x) {
              if (ia >= 0) pg[ia][i * d + x] += gv * (br[x] / denom - c * ar[x] / an2);
              if (ib >= 0) pg[ib][j * d + x] += gv * (ar[x] / denom - c * br[x] / bn2);
            }
          }
        }
      });
}

// ---- loss kernels -----------------------------------------------------------

Tensor diagonal_nll(const Tensor& m, double temperature) {
  MSA_CHECK(m.rank() == 2 && m.extent(0) == m.extent(1), ErrorKind::kContract,
            "diagonal_nll needs a square matrix, got ", shape_str(m.shape()));
  MSA_CHECK(temperature > 0.0, ErrorKind::kConfig,
            "contrastive temperature must be positive, got ", temperature);
  const std::size_t b = m.extent(0);
  const double* pm = m.data().data();
  std::vector<double> prob(b * b);
  double loss = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < b; ++u) mx = std::max(mx, pm[j * b + u] / temperature);
    double z = 0.0;
    for (std::size_t u = 0; u < b; ++u) {
      prob[j * b + u] = std::exp(pm[j * b + u] / temperature - mx);
      z += prob[j * b + u];
    }
    for (std::size_t u = 0; u < b; ++u) prob[j * b + u] /= z;
    loss += mx + std::log(z) - pm[j * b + j] / temperature;
  }
  loss /= static_cast<double>(b);
  Tensor y = Tensor::scalar(loss);
  if (!m.tracked()) return y;
  return m.tape()->record(
      std::move(y), {m.node()},
      [pr = std::move(prob), b, temperature](std::span<const double> g,
                                             std::span<const std::span<double>> pg) {
        const double c = g[0] / (static_cast<double>(b) * temperature);
        for (std::size_t j = 0; j < b; ++j) {
          for (std::size_t u = 0; u < b; ++u) {
            pg[0][j * b + u] += c * (pr[j * b + u] - (u == j ? 1.0 : 0.0));
          }
        }
      });
}

Tensor rows_kl(const Tensor& student, const Tensor& teacher, double mu) {
  MSA_CHECK(student.rank() == 2 && student.shape() == teacher.shape(),
            ErrorKind::kContract, "rows_kl needs matching matrices, got ",
            shape_str(student.shape()), " and ", shape_str(teacher.shape()));
  MSA_CHECK(mu > 0.0, ErrorKind::kConfig,
            "distillation temperature must be positive, got ", mu);
  const std::size_t r = student.extent(0), c = student.extent(1);
  const double* ps = student.data().data();
  const double* pt = teacher.data().data();

  auto row_log_softmax = [c, mu](const double* row, std::vector<double>& out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < c; ++u) mx = std::max(mx, row[u] / mu);
    double z = 0.0;
    for (std::size_t u = 0; u < c; ++u) z += std::exp(row[u] / mu - mx);
    const double lse = mx + std::log(z);
    for (std::size_t u = 0; u < c; ++u) out[u] = row[u] / mu - lse;
  };

  std::vector<double> logp(r * c), logq(r * c), row_kl(r, 0.0);
  std::vector<double> tmp(c);
  double loss = 0.0;
  for (std::size_t j = 0; j < r; ++j) {
    row_log_softmax(ps + j * c, tmp);
    std::copy(tmp.begin(), tmp.end(), logp.begin() + j * c);
    row_log_softmax(pt + j * c, tmp);
    std::copy(tmp.begin(), tmp.end(), logq.begin() + j * c);
    double kl = 0.0;
    for (std::size_t u = 0; u < c; ++u) {
      kl += std::exp(logp[j * c + u]) * (logp[j * c + u] - logq[j * c + u]);
    }
    row_kl[j] = kl;
    loss += kl;
  }
  loss /= static_cast<double>(r);
  Tensor y = Tensor::scalar(loss);

  Tape* tape = common_tape({&student, &teacher});
  if (!tape) return y;
  std::vector<int> parents;
  int is = -1, it = -1;
  if (student.tracked()) { is = static_cast<int>(parents.size()); parents.push_back(student.node()); }
  if (teacher.tracked()) { it = static_cast<int>(parents.size()); parents.push_back(teacher.node()); }
  return tape->record(
      std::move(y), std::move(parents),
      [is, it, lp = std::move(logp), lq = std::move(logq), rk = std::move(row_kl), r,
       c, mu](std::span<const double> g, std::span<const std::span<double>> pg) {
        const double coef = g[0] / (static_cast<double>(r) * mu);
        for (std::size_t j = 0; j < r; ++j) {
          for (std::size_t u = 0; u < c; ++u) {
            const double p = std::exp(lp[j * c + u]);
            if (is >= 0) {
              pg[is][j * c + u] += coef * p * ((lp[j * c + u] - lq[j * c + u]) - rk[j]);
            }
            if (it >= 0) {
              pg[it][j * c + u] += coef * (std::exp(lq[j * c + u]) - p);
            }
          }
        }
      });
}

Tensor triplet_hinge(const Tensor& s, double margin, NegativeStrategy strategy) {
  MSA_CHECK(s.rank() == 2 && s.extent(0) == s.extent(1), ErrorKind::kContract,
            "triplet_hinge needs a square similarity matrix, got ",
            shape_str(s.shape()));
  MSA_CHECK(margin >= 0.0, ErrorKind::kConfig, "margin must be non-negative, got ",
            margin);
  const std::size_t b = s.extent(0);
  MSA_CHECK(b >= 2, ErrorKind::kContract,
            "triplet loss needs batch size >= 2, got ", b);
  const double* ps = s.data().data();

  // contributions[i*b+k] is the coefficient of S[i][k] in the loss
  std::vector<double> coeff(b * b, 0.0);
  double loss = 0.0;

  auto anchor_pass = [&](bool image_anchor) {
    for (std::size_t i = 0; i < b; ++i) {
      const double pos = ps[i * b + i];
      if (strategy == NegativeStrategy::kHardest) {
        std::size_t best = b;
        double best_sim = -std::numeric_limits<double>::infinity();
        double second_sim = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < b; ++k) {
          if (k == i) continue;
          const double sim = image_anchor ? ps[i * b + k] : ps[k * b + i];
          if (sim > best_sim) {
            second_sim = best_sim;
            best_sim = sim;
            best = k;
          } else if (sim > second_sim) {
            second_sim = sim;
          }
        }
        if (b > 2) KinkWatch::report(best_sim - second_sim);
        const double h = margin - pos + best_sim;
        KinkWatch::report(std::abs(h));
        if (h > 0.0) {
          loss += h;
          coeff[i * b + i] -= 1.0;
          if (image_anchor) {
            coeff[i * b + best] += 1.0;
          } else {
            coeff[best * b + i] += 1.0;
          }
        }
      } else {
        for (std::size_t k = 0; k < b; ++k) {
          if (k == i) continue;
          const double sim = image_anchor ? ps[i * b + k] : ps[k * b + i];
          const double h = margin - pos + sim;
          KinkWatch::report(std::abs(h));
          if (h > 0.0) {
            loss += h;
            coeff[i * b + i] -= 1.0;
            if (image_anchor) {
              coeff[i * b + k] += 1.0;
            } else {
              coeff[k * b + i] += 1.0;
            }
          }
        }
      }
    }
  };
  anchor_pass(true);
  anchor_pass(false);

  Tensor y = Tensor::scalar(loss);
  if (!s.tracked()) return y;
  return s.tape()->record(std::move(y), {s.node()},
                          [cf = std::move(coeff)](std::span<const double> g,
                                                  std::span<const std::span<double>> pg) {
                            for (std::size_t i = 0; i < cf.size(); ++i) {
                              pg[0][i] += g[0] * cf[i];
                            }
                          });
}

}  // namespace msa
