#include "gflowmask/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace gfm {

namespace {
constexpr double kLnEps = 1e-300; // log() guard, inputs are clamped upstream
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
} // namespace

NodeId Tape::push(Tensor value) {
    Node n;
    n.grad = Tensor(value.shape);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::constant(Tensor v) { return push(std::move(v)); }

NodeId Tape::param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    NodeId id = push(p.value);
    nodes_[id].bound = &p;
    param_nodes_.emplace(&p, id);
    return id;
}

NodeId Tape::add(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, b, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    };
    return id;
}

NodeId Tape::sub(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, b, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    };
    return id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, b, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va = t.nodes_[a].value;
        const Tensor& vb2 = t.nodes_[b].value;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * vb2[i];
            gb[i] += g[i] * va[i];
        }
    };
    return id;
}

NodeId Tape::scale(NodeId a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, c, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
    return id;
}

NodeId Tape::square(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v *= v;
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va = t.nodes_[a].value;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * va[i] * g[i];
    };
    return id;
}

NodeId Tape::log(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::log(std::max(v, kLnEps));
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va = t.nodes_[a].value;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] / std::max(va[i], kLnEps);
    };
    return id;
}

NodeId Tape::relu(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va = t.nodes_[a].value;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (va[i] > 0.0) ga[i] += g[i];
    };
    return id;
}

NodeId Tape::gelu(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va = t.nodes_[a].value;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = va[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga[i] += g[i] * (cdf + x * pdf);
        }
    };
    return id;
}

NodeId Tape::logistic(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& y = t.nodes_[id].value;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
    return id;
}

NodeId Tape::clamp(NodeId a, double lo, double hi) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::min(std::max(v, lo), hi);
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, lo, hi, id](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va = t.nodes_[a].value;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (va[i] >= lo && va[i] <= hi) ga[i] += g[i];
    };
    return id;
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
        throw ShapeError("matmul: " + va.shape_str() + " x " + vb.shape_str());
    std::size_t m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double aip = va.data[i * k + p];
            const double* brow = &vb.data[p * n];
            double* orow = &out.data[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, b, id, m, k, n](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va2 = t.nodes_[a].value;
        const Tensor& vb2 = t.nodes_[b].value;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        // ga += g * b^T
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double gij = g.data[i * n + j];
                const double* brow = &vb2.data[0] + j; // column j of b, stride n
                double* garow = &ga.data[i * k];
                for (std::size_t p = 0; p < k; ++p) garow[p] += gij * brow[p * n];
            }
        // gb += a^T * g
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) {
                double aip = va2.data[i * k + p];
                const double* grow = &g.data[i * n];
                double* gbrow = &gb.data[p * n];
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
    };
    return id;
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[1])
        throw ShapeError("matmul_nt: " + va.shape_str() + " x " + vb.shape_str() + "^T");
    std::size_t m = va.shape[0], k = va.shape[1], n = vb.shape[0];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double* arow = &va.data[i * k];
            const double* brow = &vb.data[j * k];
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            out.data[i * n + j] = s;
        }
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, b, id, m, k, n](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& va2 = t.nodes_[a].value;
        const Tensor& vb2 = t.nodes_[b].value;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double gij = g.data[i * n + j];
                const double* brow = &vb2.data[j * k];
                const double* arow = &va2.data[i * k];
                double* garow = &ga.data[i * k];
                double* gbrow = &gb.data[j * k];
                for (std::size_t p = 0; p < k; ++p) {
                    garow[p] += gij * brow[p];
                    gbrow[p] += gij * arow[p];
                }
            }
    };
    return id;
}

NodeId Tape::matvec(NodeId w, NodeId x) {
    const Tensor& vw = value(w);
    const Tensor& vx = value(x);
    if (vw.rank() != 2 || vx.rank() != 1 || vw.shape[1] != vx.shape[0])
        throw ShapeError("matvec: " + vw.shape_str() + " x " + vx.shape_str());
    std::size_t m = vw.shape[0], n = vw.shape[1];
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &vw.data[i * n];
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += row[j] * vx[j];
        out[i] = s;
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [w, x, id, m, n](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& vw2 = t.nodes_[w].value;
        const Tensor& vx2 = t.nodes_[x].value;
        Tensor& gw = t.nodes_[w].grad;
        Tensor& gx = t.nodes_[x].grad;
        for (std::size_t i = 0; i < m; ++i) {
            double gi = g[i];
            const double* wrow = &vw2.data[i * n];
            double* gwrow = &gw.data[i * n];
            for (std::size_t j = 0; j < n; ++j) {
                gwrow[j] += gi * vx2[j];
                gx[j] += gi * wrow[j];
            }
        }
    };
    return id;
}

NodeId Tape::transpose(NodeId a) {
    const Tensor& va = value(a);
    if (va.rank() != 2) throw ShapeError("transpose: rank != 2");
    std::size_t m = va.shape[0], n = va.shape[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = va.data[i * n + j];
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, id, m, n](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j * m + i];
    };
    return id;
}

NodeId Tape::conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    const Tensor& vb = value(b);
    if (vx.rank() != 3 || vw.rank() != 4 || vb.rank() != 1)
        throw ShapeError("conv2d: bad ranks");
    if (vw.shape[1] != vx.shape[0] || vw.shape[0] != vb.shape[0])
        throw ShapeError("conv2d: channel mismatch " + vx.shape_str() + " w " + vw.shape_str());
    const int C = (int)vx.shape[0], H = (int)vx.shape[1], W = (int)vx.shape[2];
    const int O = (int)vw.shape[0], kh = (int)vw.shape[2], kw = (int)vw.shape[3];
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: empty output");
    Tensor out({(std::size_t)O, (std::size_t)OH, (std::size_t)OW});
    for (int o = 0; o < O; ++o) {
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                double s = vb[o];
                for (int c = 0; c < C; ++c) {
                    const double* xc = &vx.data[(std::size_t)c * H * W];
                    const double* wc = &vw.data[(((std::size_t)o * C) + c) * kh * kw];
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        const double* xrow = xc + (std::size_t)iy * W;
                        const double* wrow = wc + (std::size_t)ky * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            s += wrow[kx] * xrow[ix];
                        }
                    }
                }
                out.data[((std::size_t)o * OH + oy) * OW + ox] = s;
            }
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, w, b, id, stride, pad, C, H, W, O, kh, kw, OH, OW](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& vx2 = t.nodes_[x].value;
        const Tensor& vw2 = t.nodes_[w].value;
        Tensor& gx = t.nodes_[x].grad;
        Tensor& gw = t.nodes_[w].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (int o = 0; o < O; ++o)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double go = g.data[((std::size_t)o * OH + oy) * OW + ox];
                    if (go == 0.0) continue;
                    gb[o] += go;
                    for (int c = 0; c < C; ++c) {
                        const double* xc = &vx2.data[(std::size_t)c * H * W];
                        const double* wc = &vw2.data[(((std::size_t)o * C) + c) * kh * kw];
                        double* gxc = &gx.data[(std::size_t)c * H * W];
                        double* gwc = &gw.data[(((std::size_t)o * C) + c) * kh * kw];
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                gxc[(std::size_t)iy * W + ix] += go * wc[(std::size_t)ky * kw + kx];
                                gwc[(std::size_t)ky * kw + kx] += go * xc[(std::size_t)iy * W + ix];
                            }
                        }
                    }
                }
    };
    return id;
}

NodeId Tape::add_row_vector(NodeId x, NodeId b) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(b);
    if (vx.rank() != 2 || vb.rank() != 1 || vx.shape[1] != vb.shape[0])
        throw ShapeError("add_row_vector: " + vx.shape_str() + " + " + vb.shape_str());
    std::size_t T = vx.shape[0], D = vx.shape[1];
    Tensor out = vx;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) out.data[t * D + d] += vb[d];
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, b, id, T, D](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& gx = t.nodes_[x].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (std::size_t r = 0; r < T; ++r)
            for (std::size_t d = 0; d < D; ++d) {
                gx.data[r * D + d] += g.data[r * D + d];
                gb[d] += g.data[r * D + d];
            }
    };
    return id;
}

NodeId Tape::mul_cols(NodeId x, NodeId m) {
    const Tensor& vx = value(x);
    const Tensor& vm = value(m);
    if (vx.rank() != 2 || vm.rank() != 1 || vx.shape[1] != vm.shape[0])
        throw ShapeError("mul_cols: " + vx.shape_str() + " * " + vm.shape_str());
    std::size_t T = vx.shape[0], D = vx.shape[1];
    Tensor out = vx;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) out.data[t * D + d] *= vm[d];
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, m, id, T, D](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& vx2 = t.nodes_[x].value;
        const Tensor& vm2 = t.nodes_[m].value;
        Tensor& gx = t.nodes_[x].grad;
        Tensor& gm = t.nodes_[m].grad;
        for (std::size_t r = 0; r < T; ++r)
            for (std::size_t d = 0; d < D; ++d) {
                gx.data[r * D + d] += g.data[r * D + d] * vm2[d];
                gm[d] += g.data[r * D + d] * vx2.data[r * D + d];
            }
    };
    return id;
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta) {
    const Tensor& vx = value(x);
    const Tensor& vg = value(gamma);
    const Tensor& vbt = value(beta);
    if (vx.rank() != 2 || vg.shape != std::vector<std::size_t>{vx.shape[1]} ||
        vbt.shape != vg.shape)
        throw ShapeError("layer_norm: bad shapes");
    const std::size_t T = vx.shape[0], D = vx.shape[1];
    const double eps = 1e-5;
    Tensor out({T, D});
    for (std::size_t t = 0; t < T; ++t) {
        const double* row = &vx.data[t * D];
        double mu = 0.0;
        for (std::size_t d = 0; d < D; ++d) mu += row[d];
        mu /= (double)D;
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
        var /= (double)D;
        double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t d = 0; d < D; ++d)
            out.data[t * D + d] = vg[d] * ((row[d] - mu) * inv) + vbt[d];
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, gamma, beta, id, T, D, eps](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& vx2 = t.nodes_[x].value;
        const Tensor& vg2 = t.nodes_[gamma].value;
        Tensor& gx = t.nodes_[x].grad;
        Tensor& gg = t.nodes_[gamma].grad;
        Tensor& gb = t.nodes_[beta].grad;
        std::vector<double> xhat(D);
        for (std::size_t r = 0; r < T; ++r) {
            const double* row = &vx2.data[r * D];
            const double* grow = &g.data[r * D];
            double mu = 0.0;
            for (std::size_t d = 0; d < D; ++d) mu += row[d];
            mu /= (double)D;
            double var = 0.0;
            for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
            var /= (double)D;
            double inv = 1.0 / std::sqrt(var + eps);
            double mean_gy = 0.0, mean_gyxh = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                xhat[d] = (row[d] - mu) * inv;
                double gy = grow[d] * vg2[d];
                mean_gy += gy;
                mean_gyxh += gy * xhat[d];
            }
            mean_gy /= (double)D;
            mean_gyxh /= (double)D;
            for (std::size_t d = 0; d < D; ++d) {
                double gy = grow[d] * vg2[d];
                gx.data[r * D + d] += inv * (gy - mean_gy - xhat[d] * mean_gyxh);
                gg[d] += grow[d] * xhat[d];
                gb[d] += grow[d];
            }
        }
    };
    return id;
}

NodeId Tape::softmax_rows(NodeId x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 2) throw ShapeError("softmax_rows: rank != 2");
    std::size_t T = vx.shape[0], D = vx.shape[1];
    Tensor out({T, D});
    for (std::size_t t = 0; t < T; ++t) {
        const double* row = &vx.data[t * D];
        double m = row[0];
        for (std::size_t d = 1; d < D; ++d) m = std::max(m, row[d]);
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            out.data[t * D + d] = std::exp(row[d] - m);
            s += out.data[t * D + d];
        }
        for (std::size_t d = 0; d < D; ++d) out.data[t * D + d] /= s;
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, id, T, D](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& y = t.nodes_[id].value;
        Tensor& gx = t.nodes_[x].grad;
        for (std::size_t r = 0; r < T; ++r) {
            const double* grow = &g.data[r * D];
            const double* yrow = &y.data[r * D];
            double dot = 0.0;
            for (std::size_t d = 0; d < D; ++d) dot += grow[d] * yrow[d];
            for (std::size_t d = 0; d < D; ++d)
                gx.data[r * D + d] += yrow[d] * (grow[d] - dot);
        }
    };
    return id;
}

NodeId Tape::row_mean(NodeId x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 2) throw ShapeError("row_mean: rank != 2");
    std::size_t T = vx.shape[0], D = vx.shape[1];
    Tensor out({D});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) out[d] += vx.data[t * D + d];
    for (std::size_t d = 0; d < D; ++d) out[d] /= (double)T;
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, id, T, D](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& gx = t.nodes_[x].grad;
        for (std::size_t r = 0; r < T; ++r)
            for (std::size_t d = 0; d < D; ++d) gx.data[r * D + d] += g[d] / (double)T;
    };
    return id;
}

NodeId Tape::slice_cols(NodeId x, std::size_t c0, std::size_t c1) {
    const Tensor& vx = value(x);
    if (vx.rank() != 2 || c1 > vx.shape[1] || c0 >= c1)
        throw ShapeError("slice_cols: bad range");
    std::size_t T = vx.shape[0], D = vx.shape[1], W = c1 - c0;
    Tensor out({T, W});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < W; ++d) out.data[t * W + d] = vx.data[t * D + c0 + d];
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, id, T, D, W, c0](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& gx = t.nodes_[x].grad;
        for (std::size_t r = 0; r < T; ++r)
            for (std::size_t d = 0; d < W; ++d) gx.data[r * D + c0 + d] += g.data[r * W + d];
    };
    return id;
}

NodeId Tape::concat_cols(std::span<const NodeId> xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty");
    std::size_t T = value(xs[0]).shape[0], D = 0;
    for (NodeId n : xs) {
        const Tensor& v = value(n);
        if (v.rank() != 2 || v.shape[0] != T) throw ShapeError("concat_cols: row mismatch");
        D += v.shape[1];
    }
    Tensor out({T, D});
    std::size_t off = 0;
    for (NodeId n : xs) {
        const Tensor& v = value(n);
        std::size_t W = v.shape[1];
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < W; ++d) out.data[t * D + off + d] = v.data[t * W + d];
        off += W;
    }
    std::vector<NodeId> parts(xs.begin(), xs.end());
    NodeId id = push(std::move(out));
    nodes_[id].back = [parts, id, T, D](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        std::size_t off2 = 0;
        for (NodeId n : parts) {
            Tensor& gx = t.nodes_[n].grad;
            std::size_t W = t.nodes_[n].value.shape[1];
            for (std::size_t r = 0; r < T; ++r)
                for (std::size_t d = 0; d < W; ++d)
                    gx.data[r * W + d] += g.data[r * D + off2 + d];
            off2 += W;
        }
    };
    return id;
}

NodeId Tape::channel_mean(NodeId x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 3) throw ShapeError("channel_mean: rank != 3");
    std::size_t C = vx.shape[0], HW = vx.shape[1] * vx.shape[2];
    Tensor out({C});
    for (std::size_t c = 0; c < C; ++c) {
        const double* p = &vx.data[c * HW];
        double s = 0.0;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
        out[c] = s / (double)HW;
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, id, C, HW](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& gx = t.nodes_[x].grad;
        for (std::size_t c = 0; c < C; ++c) {
            double gc = g[c] / (double)HW;
            double* p = &gx.data[c * HW];
            for (std::size_t i = 0; i < HW; ++i) p[i] += gc;
        }
    };
    return id;
}

NodeId Tape::mul_channels(NodeId x, NodeId m) {
    const Tensor& vx = value(x);
    const Tensor& vm = value(m);
    if (vx.rank() != 3 || vm.rank() != 1 || vm.shape[0] != vx.shape[0])
        throw ShapeError("mul_channels: " + vx.shape_str() + " * " + vm.shape_str());
    std::size_t C = vx.shape[0], HW = vx.shape[1] * vx.shape[2];
    Tensor out = vx;
    for (std::size_t c = 0; c < C; ++c) {
        double* p = &out.data[c * HW];
        for (std::size_t i = 0; i < HW; ++i) p[i] *= vm[c];
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, m, id, C, HW](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        const Tensor& vx2 = t.nodes_[x].value;
        const Tensor& vm2 = t.nodes_[m].value;
        Tensor& gx = t.nodes_[x].grad;
        Tensor& gm = t.nodes_[m].grad;
        for (std::size_t c = 0; c < C; ++c) {
            const double* gp = &g.data[c * HW];
            const double* xp = &vx2.data[c * HW];
            double* gxp = &gx.data[c * HW];
            double s = 0.0;
            for (std::size_t i = 0; i < HW; ++i) {
                gxp[i] += gp[i] * vm2[c];
                s += gp[i] * xp[i];
            }
            gm[c] += s;
        }
    };
    return id;
}

NodeId Tape::concat_vec(NodeId a, NodeId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 1 || vb.rank() != 1) throw ShapeError("concat_vec: rank != 1");
    std::size_t n = va.size(), m = vb.size();
    Tensor out({n + m});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + n);
    NodeId id = push(std::move(out));
    nodes_[id].back = [a, b, id, n, m](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& ga = t.nodes_[a].grad;
        Tensor& gb = t.nodes_[b].grad;
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < m; ++i) gb[i] += g[n + i];
    };
    return id;
}

NodeId Tape::sum_all(NodeId a) {
    const Tensor& va = value(a);
    double s = 0.0;
    for (double v : va.data) s += v;
    NodeId id = push(Tensor::scalar(s));
    nodes_[id].back = [a, id](Tape& t) {
        double g = t.nodes_[id].grad[0];
        Tensor& ga = t.nodes_[a].grad;
        for (double& v : ga.data) v += g;
    };
    return id;
}

NodeId Tape::mean_all(NodeId a) {
    std::size_t n = value(a).size();
    return scale(sum_all(a), 1.0 / (double)n);
}

NodeId Tape::mean_scalars(std::span<const NodeId> xs) {
    if (xs.empty()) throw ShapeError("mean_scalars: empty");
    double s = 0.0;
    for (NodeId n : xs) s += value(n).item();
    std::vector<NodeId> parts(xs.begin(), xs.end());
    double inv = 1.0 / (double)parts.size();
    NodeId id = push(Tensor::scalar(s * inv));
    nodes_[id].back = [parts, inv, id](Tape& t) {
        double g = t.nodes_[id].grad[0] * inv;
        for (NodeId n : parts) t.nodes_[n].grad[0] += g;
    };
    return id;
}

NodeId Tape::pick(NodeId v, std::size_t index) {
    const Tensor& vv = value(v);
    if (index >= vv.size()) throw ShapeError("pick: index out of range");
    NodeId id = push(Tensor::scalar(vv[index]));
    nodes_[id].back = [v, index, id](Tape& t) {
        t.nodes_[v].grad[index] += t.nodes_[id].grad[0];
    };
    return id;
}

NodeId Tape::cross_entropy(NodeId logits, int label) {
    const Tensor& vl = value(logits);
    if (vl.rank() != 1) throw ShapeError("cross_entropy: logits rank != 1");
    if (label < 0 || (std::size_t)label >= vl.size())
        throw ShapeError("cross_entropy: label out of range");
    double m = vl[0];
    for (double v : vl.data) m = std::max(m, v);
    double s = 0.0;
    for (double v : vl.data) s += std::exp(v - m);
    double loss = m + std::log(s) - vl[label];
    NodeId id = push(Tensor::scalar(loss));
    nodes_[id].back = [logits, label, id, m, s](Tape& t) {
        double g = t.nodes_[id].grad[0];
        const Tensor& vl2 = t.nodes_[logits].value;
        Tensor& gl = t.nodes_[logits].grad;
        for (std::size_t i = 0; i < vl2.size(); ++i) {
            double p = std::exp(vl2[i] - m) / s;
            gl[i] += g * (p - ((int)i == label ? 1.0 : 0.0));
        }
    };
    return id;
}

NodeId Tape::patchify(NodeId x, int patch) {
    const Tensor& vx = value(x);
    if (vx.rank() != 3) throw ShapeError("patchify: rank != 3");
    const int C = (int)vx.shape[0], S = (int)vx.shape[1];
    if ((int)vx.shape[2] != S || S % patch != 0)
        throw ShapeError("patchify: image not square or not divisible by patch size");
    const int G = S / patch;
    const std::size_t n_tokens = (std::size_t)G * G;
    const std::size_t dim = (std::size_t)C * patch * patch;
    Tensor out({n_tokens, dim});
    for (int py = 0; py < G; ++py)
        for (int px = 0; px < G; ++px) {
            std::size_t tok = (std::size_t)py * G + px;
            std::size_t f = 0;
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        out.data[tok * dim + f++] =
                            vx.at((std::size_t)c, (std::size_t)(py * patch + dy),
                                  (std::size_t)(px * patch + dx));
        }
    NodeId id = push(std::move(out));
    nodes_[id].back = [x, id, C, S, patch, G, dim](Tape& t) {
        const Tensor& g = t.nodes_[id].grad;
        Tensor& gx = t.nodes_[x].grad;
        for (int py = 0; py < G; ++py)
            for (int px = 0; px < G; ++px) {
                std::size_t tok = (std::size_t)py * G + px;
                std::size_t f = 0;
                for (int c = 0; c < C; ++c)
                    for (int dy = 0; dy < patch; ++dy)
                        for (int dx = 0; dx < patch; ++dx)
                            gx.data[((std::size_t)c * S + (py * patch + dy)) * S +
                                    (px * patch + dx)] += g.data[tok * dim + f++];
            }
    };
    return id;
}

void Tape::backward(NodeId loss) {
    if (backward_done_)
        throw Error("backward already run on this tape; record a new forward first");
    if (value(loss).size() != 1) throw ShapeError("backward: loss is not a scalar");
    backward_done_ = true;
    nodes_[loss].grad[0] = 1.0;
    for (NodeId id = loss; id >= 0; --id)
        if (nodes_[id].back) nodes_[id].back(*this);
    for (auto& [p, id] : param_nodes_) {
        if (id > loss) continue; // bound after the loss node, cannot contribute
        const Tensor& g = nodes_[id].grad;
        for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
}

} // namespace gfm
