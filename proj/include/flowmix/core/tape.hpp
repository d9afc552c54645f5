#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flowmix/core/errors.hpp"
#include "flowmix/core/mat.hpp"

namespace flowmix::core {

// Reverse-mode tape. Nodes are matrices; the creation order is a valid
// topological order, so backward is a single reverse sweep over node ids.
// Subgraphs may be reused (e.g. conditioning tokens shared across unrolled
// flow steps); gradients accumulate at the shared nodes.
template <class S>
class Tape {
 public:
  struct Node {
    Mat<S> val;
    Mat<S> grad;                  // allocated on first accumulation
    std::function<void()> back;   // empty for leaves
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int size() const { return int(nodes_.size()); }
  const Mat<S>& val(int id) const { return nodes_[id].val; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  // Gradient of a node; zeros if nothing has flowed into it.
  Mat<S> grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) return Mat<S>::zeros(n.val.rows, n.val.cols);
    return n.grad;
  }

  int leaf(Mat<S> v, bool requires_grad = false) {
    return push(std::move(v), requires_grad, {});
  }

  int scalar(S v, bool requires_grad = false) {
    Mat<S> m(1, 1);
    m.at(0, 0) = v;
    return push(std::move(m), requires_grad, {});
  }

  // ----- elementwise -----

  int add(int a, int b) {
    check_same_shape(a, b, "add");
    Mat<S> out(shape_r(a), shape_c(a));
    emap(out) = emap(val(a)) + emap(val(b));
    return unary_or_binary(std::move(out), a, b, [this](int id, int a2, int b2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)); });
      acc(b2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)); });
    });
  }

  int sub(int a, int b) {
    check_same_shape(a, b, "sub");
    Mat<S> out(shape_r(a), shape_c(a));
    emap(out) = emap(val(a)) - emap(val(b));
    return unary_or_binary(std::move(out), a, b, [this](int id, int a2, int b2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)); });
      acc(b2, [&](Mat<S>& g) { emap(g) -= emap(grad_ref(id)); });
    });
  }

  int hadamard(int a, int b) {
    check_same_shape(a, b, "hadamard");
    Mat<S> out(shape_r(a), shape_c(a));
    emap(out) = emap(val(a)).cwiseProduct(emap(val(b)));
    return unary_or_binary(std::move(out), a, b, [this](int id, int a2, int b2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)).cwiseProduct(emap(val(b2))); });
      acc(b2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)).cwiseProduct(emap(val(a2))); });
    });
  }

  int scale(int a, S c) {
    Mat<S> out(shape_r(a), shape_c(a));
    emap(out) = emap(val(a)) * c;
    return unary(std::move(out), a, [this, c](int id, int a2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)) * c; });
    });
  }

  // x * s where s is a 1x1 node (e.g. the adapter gate); gradient reaches s.
  int scale_var(int a, int s) {
    if (val(s).size() != 1) throw std::invalid_argument("scale_var: scalar node must be 1x1");
    S sv = val(s).at(0, 0);
    Mat<S> out(shape_r(a), shape_c(a));
    emap(out) = emap(val(a)) * sv;
    return unary_or_binary(std::move(out), a, s, [this, sv](int id, int a2, int s2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)) * sv; });
      acc(s2, [&](Mat<S>& g) {
        g.at(0, 0) += (emap(grad_ref(id)).cwiseProduct(emap(val(a2)))).sum();
      });
    });
  }

  // X + broadcast row vector r (1 x C)
  int add_rowvec(int a, int r) {
    if (shape_c(a) != shape_c(r) || shape_r(r) != 1)
      throw std::invalid_argument("add_rowvec: need 1xC row vector matching columns");
    Mat<S> out(shape_r(a), shape_c(a));
    emap(out) = emap(val(a)).rowwise() + emap(val(r)).row(0);
    return unary_or_binary(std::move(out), a, r, [this](int id, int a2, int r2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)); });
      acc(r2, [&](Mat<S>& g) { emap(g).row(0) += emap(grad_ref(id)).colwise().sum(); });
    });
  }

  int silu(int a) {
    Mat<S> out(shape_r(a), shape_c(a));
    const Mat<S>& x = val(a);
    for (size_t i = 0; i < x.size(); ++i) {
      S v = x.data()[i];
      out.data()[i] = v / (S(1) + std::exp(-v));
    }
    return unary(std::move(out), a, [this](int id, int a2) {
      acc(a2, [&](Mat<S>& g) {
        const Mat<S>& x = val(a2);
        const Mat<S>& go = grad_ref(id);
        for (size_t i = 0; i < x.size(); ++i) {
          S v = x.data()[i];
          S sig = S(1) / (S(1) + std::exp(-v));
          g.data()[i] += go.data()[i] * sig * (S(1) + v * (S(1) - sig));
        }
      });
    });
  }

  // ----- matmul (with transpose flags) -----

  int matmul(int a, int b, bool ta = false, bool tb = false) {
    int ar = ta ? shape_c(a) : shape_r(a), ac = ta ? shape_r(a) : shape_c(a);
    int br = tb ? shape_c(b) : shape_r(b), bc = tb ? shape_r(b) : shape_c(b);
    if (ac != br) throw std::invalid_argument("matmul: inner dimensions mismatch");
    Mat<S> out(ar, bc);
    mm(out, val(a), val(b), ta, tb);
    return unary_or_binary(std::move(out), a, b, [this, ta, tb](int id, int a2, int b2) {
      const Mat<S>& g = grad_ref(id);
      acc(a2, [&](Mat<S>& ga) {
        if (!ta && !tb) emap(ga) += emap(g) * emap(val(b2)).transpose();
        else if (ta && !tb) emap(ga) += emap(val(b2)) * emap(g).transpose();
        else if (!ta && tb) emap(ga) += emap(g) * emap(val(b2));
        else emap(ga) += (emap(g) * emap(val(b2))).transpose();
      });
      acc(b2, [&](Mat<S>& gb) {
        if (!ta && !tb) emap(gb) += emap(val(a2)).transpose() * emap(g);
        else if (ta && !tb) emap(gb) += emap(val(a2)) * emap(g);
        else if (!ta && tb) emap(gb) += emap(g).transpose() * emap(val(a2));
        else emap(gb) += (emap(val(a2)) * emap(g)).transpose();
      });
    });
  }

  // ----- softmax / log-softmax over rows -----

  int softmax_rows(int a) {
    Mat<S> out(shape_r(a), shape_c(a));
    const Mat<S>& x = val(a);
    for (int r = 0; r < x.rows; ++r) {
      S mx = x.at(r, 0);
      for (int c = 1; c < x.cols; ++c) mx = std::max(mx, x.at(r, c));
      S sum = 0;
      for (int c = 0; c < x.cols; ++c) {
        S e = std::exp(x.at(r, c) - mx);
        out.at(r, c) = e;
        sum += e;
      }
      for (int c = 0; c < x.cols; ++c) out.at(r, c) /= sum;
    }
    return unary(std::move(out), a, [this](int id, int a2) {
      acc(a2, [&](Mat<S>& g) {
        const Mat<S>& y = val(id);
        const Mat<S>& go = grad_ref(id);
        for (int r = 0; r < y.rows; ++r) {
          S dot = 0;
          for (int c = 0; c < y.cols; ++c) dot += go.at(r, c) * y.at(r, c);
          for (int c = 0; c < y.cols; ++c) g.at(r, c) += y.at(r, c) * (go.at(r, c) - dot);
        }
      });
    });
  }

  int log_softmax_rows(int a) {
    Mat<S> out(shape_r(a), shape_c(a));
    const Mat<S>& x = val(a);
    for (int r = 0; r < x.rows; ++r) {
      S mx = x.at(r, 0);
      for (int c = 1; c < x.cols; ++c) mx = std::max(mx, x.at(r, c));
      S sum = 0;
      for (int c = 0; c < x.cols; ++c) sum += std::exp(x.at(r, c) - mx);
      S lse = mx + std::log(sum);
      for (int c = 0; c < x.cols; ++c) out.at(r, c) = x.at(r, c) - lse;
    }
    return unary(std::move(out), a, [this](int id, int a2) {
      acc(a2, [&](Mat<S>& g) {
        const Mat<S>& y = val(id);  // log-probs
        const Mat<S>& go = grad_ref(id);
        for (int r = 0; r < y.rows; ++r) {
          S gsum = 0;
          for (int c = 0; c < y.cols; ++c) gsum += go.at(r, c);
          for (int c = 0; c < y.cols; ++c)
            g.at(r, c) += go.at(r, c) - std::exp(y.at(r, c)) * gsum;
        }
      });
    });
  }

  // ----- layer normalization over rows, with affine gain/bias (1 x C) -----

  int layernorm_rows(int a, int gain, int bias, S eps = S(1e-5)) {
    int R = shape_r(a), C = shape_c(a);
    if (shape_r(gain) != 1 || shape_c(gain) != C || shape_r(bias) != 1 || shape_c(bias) != C)
      throw std::invalid_argument("layernorm_rows: gain/bias must be 1xC");
    Mat<S> out(R, C);
    auto norm = std::make_shared<Mat<S>>(R, C);   // (x - mu) / sigma
    auto inv = std::make_shared<std::vector<S>>(R);
    const Mat<S>& x = val(a);
    const Mat<S>& gm = val(gain);
    const Mat<S>& bm = val(bias);
    for (int r = 0; r < R; ++r) {
      S mu = 0;
      for (int c = 0; c < C; ++c) mu += x.at(r, c);
      mu /= S(C);
      S var = 0;
      for (int c = 0; c < C; ++c) {
        S d = x.at(r, c) - mu;
        var += d * d;
      }
      var /= S(C);
      S iv = S(1) / std::sqrt(var + eps);
      (*inv)[r] = iv;
      for (int c = 0; c < C; ++c) {
        S n = (x.at(r, c) - mu) * iv;
        norm->at(r, c) = n;
        out.at(r, c) = n * gm.at(0, c) + bm.at(0, c);
      }
    }
    int id = push(std::move(out), needs_grad(a) || needs_grad(gain) || needs_grad(bias), {});
    nodes_[id].back = [this, id, a, gain, bias, norm, inv]() {
      const Mat<S>& go = grad_ref(id);
      int R = go.rows, C = go.cols;
      const Mat<S>& gm = val(gain);
      acc(gain, [&](Mat<S>& g) {
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c) g.at(0, c) += go.at(r, c) * norm->at(r, c);
      });
      acc(bias, [&](Mat<S>& g) {
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c) g.at(0, c) += go.at(r, c);
      });
      acc(a, [&](Mat<S>& g) {
        for (int r = 0; r < R; ++r) {
          S mean_dn = 0, mean_dnn = 0;
          for (int c = 0; c < C; ++c) {
            S dn = go.at(r, c) * gm.at(0, c);
            mean_dn += dn;
            mean_dnn += dn * norm->at(r, c);
          }
          mean_dn /= S(C);
          mean_dnn /= S(C);
          S iv = (*inv)[r];
          for (int c = 0; c < C; ++c) {
            S dn = go.at(r, c) * gm.at(0, c);
            g.at(r, c) += iv * (dn - mean_dn - norm->at(r, c) * mean_dnn);
          }
        }
      });
    };
    return id;
  }

  // ----- framing / overlap-add -----

  // X is N x C; output is F x (k*C), frame f flattens rows [f*s, f*s+k).
  int frame_rows(int a, int k, int s) {
    int N = shape_r(a), C = shape_c(a);
    if (k <= 0 || s <= 0 || k > N) throw std::invalid_argument("frame_rows: bad kernel/stride");
    int F = (N - k) / s + 1;
    Mat<S> out(F, k * C);
    const Mat<S>& x = val(a);
    for (int f = 0; f < F; ++f)
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < C; ++c) out.at(f, r * C + c) = x.at(f * s + r, c);
    return unary(std::move(out), a, [this, k, s](int id, int a2) {
      acc(a2, [&](Mat<S>& g) {
        const Mat<S>& go = grad_ref(id);
        int C = g.cols;
        for (int f = 0; f < go.rows; ++f)
          for (int r = 0; r < k; ++r)
            for (int c = 0; c < C; ++c) g.at(f * s + r, c) += go.at(f, r * C + c);
      });
    });
  }

  // Y is F x k; scatter-adds frame f at offset f*s into an N x 1 signal.
  int overlap_add(int a, int s, int n_out) {
    int F = shape_r(a), k = shape_c(a);
    if ((F - 1) * s + k > n_out) throw std::invalid_argument("overlap_add: frames exceed output");
    Mat<S> out(n_out, 1);
    const Mat<S>& y = val(a);
    for (int f = 0; f < F; ++f)
      for (int r = 0; r < k; ++r) out.at(f * s + r, 0) += y.at(f, r);
    return unary(std::move(out), a, [this, s](int id, int a2) {
      acc(a2, [&](Mat<S>& g) {
        const Mat<S>& go = grad_ref(id);
        for (int f = 0; f < g.rows; ++f)
          for (int r = 0; r < g.cols; ++r) g.at(f, r) += go.at(f * s + r, 0);
      });
    });
  }

  // ----- structure -----

  int concat_rows(int a, int b) {
    if (shape_c(a) != shape_c(b)) throw std::invalid_argument("concat_rows: column mismatch");
    int ra = shape_r(a), rb = shape_r(b), C = shape_c(a);
    Mat<S> out(ra + rb, C);
    emap(out).topRows(ra) = emap(val(a));
    emap(out).bottomRows(rb) = emap(val(b));
    return unary_or_binary(std::move(out), a, b, [this, ra, rb](int id, int a2, int b2) {
      acc(a2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)).topRows(ra); });
      acc(b2, [&](Mat<S>& g) { emap(g) += emap(grad_ref(id)).bottomRows(rb); });
    });
  }

  int slice_rows(int a, int r0, int r1) {
    if (r0 < 0 || r1 > shape_r(a) || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    Mat<S> out(r1 - r0, shape_c(a));
    emap(out) = emap(val(a)).middleRows(r0, r1 - r0);
    return unary(std::move(out), a, [this, r0, r1](int id, int a2) {
      acc(a2, [&](Mat<S>& g) { emap(g).middleRows(r0, r1 - r0) += emap(grad_ref(id)); });
    });
  }

  // ----- reductions -----

  int sum_all(int a) {
    Mat<S> out(1, 1);
    out.at(0, 0) = emap(val(a)).sum();
    return unary(std::move(out), a, [this](int id, int a2) {
      acc(a2, [&](Mat<S>& g) { emap(g).array() += grad_ref(id).at(0, 0); });
    });
  }

  int mean_all(int a) {
    S n = S(val(a).size());
    Mat<S> out(1, 1);
    out.at(0, 0) = emap(val(a)).sum() / n;
    return unary(std::move(out), a, [this, n](int id, int a2) {
      acc(a2, [&](Mat<S>& g) { emap(g).array() += grad_ref(id).at(0, 0) / n; });
    });
  }

  // Identity forward; gradient does not flow past this node.
  int stop_gradient(int a) {
    Mat<S> out = val(a);  // shared storage
    return push(std::move(out), false, {});
  }

  // mean of squared difference over all entries
  int mse(int a, int b) { return mean_all(hadamard(sub(a, b), sub(a, b))); }

  // ----- backward -----

  void backward(const std::vector<std::pair<int, S>>& seeds) {
    int max_id = -1;
    for (const auto& [id, s] : seeds) {
      if (val(id).size() != 1) throw std::invalid_argument("backward: seeds must be scalars");
      if (!nodes_[id].needs_grad) continue;
      grad_mut(id).at(0, 0) += s;
      max_id = std::max(max_id, id);
    }
    for (int i = max_id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.needs_grad && !n.grad.empty()) n.back();
    }
  }

  void backward(int id, S seed = S(1)) { backward({{id, seed}}); }

  void check_finite(int id, const std::string& label) const {
    if (!val(id).all_finite()) throw NumericError("non-finite activations at " + label);
  }

 private:
  std::vector<Node> nodes_;

  int shape_r(int id) const { return nodes_[id].val.rows; }
  int shape_c(int id) const { return nodes_[id].val.cols; }

  void check_same_shape(int a, int b, const char* op) const {
    if (shape_r(a) != shape_r(b) || shape_c(a) != shape_c(b))
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  int push(Mat<S> v, bool ng, std::function<void()> back) {
    nodes_.push_back(Node{std::move(v), Mat<S>(), std::move(back), ng});
    return int(nodes_.size()) - 1;
  }

  Mat<S>& grad_mut(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Mat<S>::zeros(n.val.rows, n.val.cols);
    return n.grad;
  }

  const Mat<S>& grad_ref(int id) const { return nodes_[id].grad; }

  // accumulate into a parent only if it participates in differentiation
  template <class F>
  void acc(int id, F&& f) {
    if (!nodes_[id].needs_grad) return;
    f(grad_mut(id));
  }

  template <class F>
  int unary(Mat<S> out, int a, F&& back) {
    bool ng = needs_grad(a);
    int id = push(std::move(out), ng, {});
    if (ng) nodes_[id].back = [this, id, a, back]() { back(id, a); };
    return id;
  }

  template <class F>
  int unary_or_binary(Mat<S> out, int a, int b, F&& back) {
    bool ng = needs_grad(a) || needs_grad(b);
    int id = push(std::move(out), ng, {});
    if (ng) nodes_[id].back = [this, id, a, b, back]() { back(id, a, b); };
    return id;
  }

  static void mm(Mat<S>& out, const Mat<S>& a, const Mat<S>& b, bool ta, bool tb) {
    auto A = emap(a);
    auto B = emap(b);
    auto O = emap(out);
    if (!ta && !tb) O.noalias() = A * B;
    else if (ta && !tb) O.noalias() = A.transpose() * B;
    else if (!ta && tb) O.noalias() = A * B.transpose();
    else O.noalias() = A.transpose() * B.transpose();
  }
};

}  // namespace flowmix::core
