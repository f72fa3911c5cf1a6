#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "drmkit/error.hpp"
#include "drmkit/tape.hpp"

namespace drmkit::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

void require_same(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

template <typename F>
Tensor map_values(const Tensor& in, F f) {
  Tensor out(in.shape());
  auto src = in.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  require_same("add", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto ga = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = map_values(a.value(), [s](double x) { return s * x; });
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = map_values(a.value(), [s](double x) { return x + s; });
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  MapM(out.data().data(), m, n).noalias() = MapC(a.value().data().data(), m, k) * MapC(b.value().data().data(), k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::uint32_t self) {
    MapC g(t.upstream(self).data().data(), m, n);
    if (t.requires_grad(ia)) {
      MapM(t.grad_buffer(ia).data(), m, k).noalias() += g * MapC(t.value(ib).data().data(), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      MapM(t.grad_buffer(ib).data(), k, n).noalias() += MapC(t.value(ia).data().data(), m, k).transpose() * g;
    }
  });
}

Var affine(Var x, Var weight, Var bias) {
  require_rank("affine", x, 2);
  require_rank("affine", weight, 2);
  const auto m = x.shape()[0], in = x.shape()[1], outd = weight.shape()[1];
  if (weight.shape()[0] != in || bias.value().size() != outd || bias.shape().size() != 1) {
    throw ShapeError("affine: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) + ", bias " +
                     shape_str(bias.shape()) + " do not conform");
  }
  Tensor out({m, outd});
  MapM o(out.data().data(), m, outd);
  o.noalias() = MapC(x.value().data().data(), m, in) * MapC(weight.value().data().data(), in, outd);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data().data(), outd);
  const auto ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, weight, bias}, [ix, iw, ib, m, in, outd](Tape& t, std::uint32_t self) {
    MapC g(t.upstream(self).data().data(), m, outd);
    if (t.requires_grad(ix)) {
      MapM(t.grad_buffer(ix).data(), m, in).noalias() += g * MapC(t.value(iw).data().data(), in, outd).transpose();
    }
    if (t.requires_grad(iw)) {
      MapM(t.grad_buffer(iw).data(), in, outd).noalias() += MapC(t.value(ix).data().data(), m, in).transpose() * g;
    }
    if (t.requires_grad(ib)) {
      Eigen::Map<Eigen::RowVectorXd>(t.grad_buffer(ib).data(), outd) += g.colwise().sum();
    }
  });
}

Var relu(Var a) {
  Tensor out = map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    const auto x = t.value(ia).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var log_sigmoid(Var a) {
  // log σ(x) = min(x, 0) - log1p(exp(-|x|))
  Tensor out = map_values(a.value(), [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    const auto x = t.value(ia).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      // d/dx log σ(x) = σ(-x)
      const double e = std::exp(-std::abs(x[i]));
      const double sig_neg = x[i] >= 0.0 ? e / (1.0 + e) : 1.0 / (1.0 + e);
      ga[i] += g[i] * sig_neg;
    }
  });
}

Var exp(Var a) {
  Tensor out = map_values(a.value(), [](double x) { return std::exp(x); });
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    const auto y = t.value(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  const auto ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [ia](Tape& t, std::uint32_t self) {
    const double g = t.upstream(self)[0];
    for (auto& x : t.grad_buffer(ia)) x += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mse(Var a, Var b) {
  require_same("mse", a, b);
  const auto av = a.value().data();
  const auto bv = b.value().data();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(Tensor::scalar(s / n), {a, b}, [ia, ib, n](Tape& t, std::uint32_t self) {
    const double g = t.upstream(self)[0];
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * 2.0 * (av[i] - bv[i]) / n;
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * 2.0 * (av[i] - bv[i]) / n;
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  std::vector<std::size_t> extents;
  std::size_t other = 0;
  for (const auto& p : parts) {
    require_rank("concat", p, 2);
    const auto o = p.shape()[1 - axis];
    if (other == 0) other = o;
    if (o != other) {
      throw ShapeError("concat: shape " + shape_str(p.shape()) + " does not match " + shape_str(parts[0].shape()));
    }
    extents.push_back(p.shape()[axis]);
  }
  std::size_t total = 0;
  for (auto e : extents) total += e;
  const std::size_t rows = axis == 0 ? total : other;
  const std::size_t cols = axis == 0 ? other : total;
  Tensor out({rows, cols});
  std::vector<std::uint32_t> ids;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    if (axis == 0) {
      std::copy(v.data().begin(), v.data().end(), out.data().begin() + offset * cols);
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < extents[p]; ++c) out.at(r, offset + c) = v.at(r, c);
      }
    }
    offset += extents[p];
    ids.push_back(parts[p].id());
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids, extents, axis, rows, cols](Tape& t, std::uint32_t self) {
        const auto& g = t.upstream(self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (t.requires_grad(ids[p])) {
            auto gp = t.grad_buffer(ids[p]);
            if (axis == 0) {
              for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset * cols + i];
            } else {
              for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < extents[p]; ++c) gp[r * extents[p] + c] += g.at(r, offset + c);
              }
            }
          }
          offset += extents[p];
        }
      });
}

Var transpose(Var a) {
  const auto& s = a.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_str(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t p = s[s.size() - 2], q = s[s.size() - 1];
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor out(os);
  const auto in = a.value().data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < q; ++j) o[b * p * q + j * p + i] = in[b * p * q + i * q + j];
    }
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, batch, p, q](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < q; ++j) ga[b * p * q + i * q + j] += g[b * p * q + j * p + i];
      }
    }
  });
}

Var row_sum(Var a) {
  require_rank("row_sum", a, 2);
  const auto m = a.shape()[0], n = a.shape()[1];
  Tensor out({m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += a.value().at(r, c);
    out[r] = s;
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, m, n](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r];
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  require_rank("gather_rows", a, 2);
  const auto m = a.shape()[0], n = a.shape()[1];
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of " + shape_str(a.shape()));
    for (std::size_t c = 0; c < n; ++c) out.at(i, c) = a.value().at(rows[i], c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, idx = std::move(idx), n](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < n; ++c) ga[idx[i] * n + c] += g[i * n + c];
    }
  });
}

Var clipped_surrogate(Var ratio, std::span<const double> advantages, double eps_clip) {
  if (ratio.value().size() != advantages.size()) {
    throw ShapeError("clipped_surrogate: ratio " + shape_str(ratio.shape()) + " vs " +
                     std::to_string(advantages.size()) + " advantages");
  }
  if (!(eps_clip > 0.0)) throw ShapeError("clipped_surrogate: eps_clip must be positive");
  Tensor out(ratio.shape());
  // Gradient flows only where the unclipped branch attains the minimum.
  std::vector<double> dmask(advantages.size());
  const auto r = ratio.value().data();
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    const double adv = advantages[i];
    const double unclipped = r[i] * adv;
    const double clipped = std::clamp(r[i], 1.0 - eps_clip, 1.0 + eps_clip) * adv;
    if (unclipped <= clipped) {
      out[i] = unclipped;
      dmask[i] = adv;
    } else {
      out[i] = clipped;
      const bool inside = r[i] >= 1.0 - eps_clip && r[i] <= 1.0 + eps_clip;
      dmask[i] = inside ? adv : 0.0;
    }
  }
  const auto ir = ratio.id();
  return ratio.tape().record(std::move(out), {ratio}, [ir, dmask = std::move(dmask)](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto gr = t.grad_buffer(ir);
    for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * dmask[i];
  });
}

Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t padding) {
  const auto& is = input.shape();
  const auto& ks = kernels.shape();
  if (is.size() != 3 && is.size() != 4) throw ShapeError("conv2d: input must be [c,h,w] or [n,c,h,w], got " + shape_str(is));
  require_rank("conv2d", kernels, 4);
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const bool batched = is.size() == 4;
  const std::size_t n = batched ? is[0] : 1;
  const std::size_t cin = is[is.size() - 3], h = is[is.size() - 2], w = is[is.size() - 1];
  const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
  if (ks[1] != cin) {
    throw ShapeError("conv2d: input " + shape_str(is) + " has " + std::to_string(cin) + " channels, kernels " +
                     shape_str(ks) + " expect " + std::to_string(ks[1]));
  }
  const std::size_t hp = h + 2 * padding, wp = w + 2 * padding;
  if (kh > hp || kw > wp) {
    throw ShapeError("conv2d: kernels " + shape_str(ks) + " larger than padded input " + shape_str(is));
  }
  if ((hp - kh) % stride != 0 || (wp - kw) % stride != 0) {
    throw ShapeError("conv2d: non-integral output extent for input " + shape_str(is) + ", kernels " + shape_str(ks) +
                     ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const std::size_t oh = (hp - kh) / stride + 1, ow = (wp - kw) / stride + 1;
  const std::size_t patch = cin * kh * kw, npos = oh * ow;

  // im2col: cols[(ci,ky,kx), (oy,ox)] for one sample.
  auto im2col = [=](const double* x, double* cols) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          double* row = cols + ((ci * kh + ky) * kw + kx) * npos;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::int64_t>(oy * stride + ky) - static_cast<std::int64_t>(padding);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::int64_t>(ox * stride + kx) - static_cast<std::int64_t>(padding);
              const bool in = iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(h) && ix < static_cast<std::int64_t>(w);
              row[oy * ow + ox] = in ? x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : 0.0;
            }
          }
        }
      }
    }
  };

  Shape os = batched ? Shape{n, cout, oh, ow} : Shape{cout, oh, ow};
  Tensor out(os);
  Storage cols(patch * npos);
  MapC kmat(kernels.value().data().data(), cout, patch);
  for (std::size_t b = 0; b < n; ++b) {
    im2col(input.value().data().data() + b * cin * h * w, cols.data());
    MapM(out.data().data() + b * cout * npos, cout, npos).noalias() = kmat * MapC(cols.data(), patch, npos);
  }

  const auto ii = input.id(), ik = kernels.id();
  return input.tape().record(std::move(out), {input, kernels}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.upstream(self);
    Storage cols(patch * npos), dcols(patch * npos);
    MapC kmat(t.value(ik).data().data(), cout, patch);
    for (std::size_t b = 0; b < n; ++b) {
      MapC gb(g.data().data() + b * cout * npos, cout, npos);
      if (t.requires_grad(ik)) {
        im2col(t.value(ii).data().data() + b * cin * h * w, cols.data());
        MapM(t.grad_buffer(ik).data(), cout, patch).noalias() += gb * MapC(cols.data(), patch, npos).transpose();
      }
      if (t.requires_grad(ii)) {
        MapM(dcols.data(), patch, npos).noalias() = kmat.transpose() * gb;
        double* dx = t.grad_buffer(ii).data() + b * cin * h * w;
        // col2im
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double* row = dcols.data() + ((ci * kh + ky) * kw + kx) * npos;
              for (std::size_t oy = 0; oy < oh; ++oy) {
                const auto iy = static_cast<std::int64_t>(oy * stride + ky) - static_cast<std::int64_t>(padding);
                if (iy < 0 || iy >= static_cast<std::int64_t>(h)) continue;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const auto ix = static_cast<std::int64_t>(ox * stride + kx) - static_cast<std::int64_t>(padding);
                  if (ix < 0 || ix >= static_cast<std::int64_t>(w)) continue;
                  dx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * ow + ox];
                }
              }
            }
          }
        }
      }
    }
  });
}

Var add_channel_bias(Var input, Var bias) {
  const auto& s = input.shape();
  if (s.size() != 3 && s.size() != 4) throw ShapeError("add_channel_bias: input must be rank 3 or 4, got " + shape_str(s));
  const std::size_t c = s[s.size() - 3];
  const std::size_t plane = s[s.size() - 2] * s[s.size() - 1];
  const std::size_t n = s.size() == 4 ? s[0] : 1;
  if (bias.shape().size() != 1 || bias.shape()[0] != c) {
    throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " for input " + shape_str(s));
  }
  Tensor out = input.value();
  auto o = out.data();
  const auto bv = bias.value().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < plane; ++p) o[(b * c + ch) * plane + p] += bv[ch];
    }
  }
  const auto ii = input.id(), ib = bias.id();
  return input.tape().record(std::move(out), {input, bias}, [ii, ib, n, c, plane](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    if (t.requires_grad(ii)) {
      auto gi = t.grad_buffer(ii);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t p = 0; p < plane; ++p) gb[ch] += g[(b * c + ch) * plane + p];
        }
      }
    }
  });
}

Var mean_pool2d(Var input) {
  const auto& s = input.shape();
  if (s.size() != 3 && s.size() != 4) throw ShapeError("mean_pool2d: input must be [c,h,w] or [n,c,h,w], got " + shape_str(s));
  const bool batched = s.size() == 4;
  const std::size_t n = batched ? s[0] : 1;
  const std::size_t c = s[s.size() - 3];
  const std::size_t plane = s[s.size() - 2] * s[s.size() - 1];
  Tensor out(batched ? Shape{n, c} : Shape{c});
  const auto x = input.value().data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += x[i * plane + p];
    out[i] = acc / static_cast<double>(plane);
  }
  const auto ii = input.id();
  return input.tape().record(std::move(out), {input}, [ii, n, c, plane](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    auto gi = t.grad_buffer(ii);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < n * c; ++i) {
      for (std::size_t p = 0; p < plane; ++p) gi[i * plane + p] += g[i] * inv;
    }
  });
}

}  // namespace drmkit::ad
