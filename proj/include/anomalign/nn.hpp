#pragma once

#include "anomalign/common.hpp"
#include "anomalign/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace anomalign::nn {

// Minimal training engine: declarative layers with explicit activation
// caches so one model instance can run several batch items concurrently.
// Templated on the scalar so gradient checks can run the same code in
// double precision.

template <typename T>
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int c, int h, int w, T fill = T{0})
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    T& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    T at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

/// Named view of one parameter tensor and its gradient buffer.
template <typename T>
struct ParamRef {
    std::string name;
    std::vector<T>* value = nullptr;
    std::vector<T>* grad = nullptr;
};

// ---------------------------------------------------------------------------
// im2col
// ---------------------------------------------------------------------------

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, std::vector<T>& cols,
            int& out_h, int& out_w) {
    out_h = (x.height + 2 * pad - k) / stride + 1;
    out_w = (x.width + 2 * pad - k) / stride + 1;
    const int ckk = x.channels * k * k;
    cols.assign(static_cast<std::size_t>(ckk) * out_h * out_w, T{0});
    // column-major [ckk x L]: each output location owns one contiguous patch
    std::size_t col = 0;
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox, ++col) {
            T* dst = cols.data() + col * ckk;
            for (int c = 0; c < x.channels; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    const int yy = oy * stride - pad + ky;
                    if (yy < 0 || yy >= x.height) {
                        dst += k;
                        continue;
                    }
                    for (int kx = 0; kx < k; ++kx) {
                        const int xx = ox * stride - pad + kx;
                        *dst++ = (xx >= 0 && xx < x.width) ? x.at(c, yy, xx) : T{0};
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(std::span<const T> cols, int channels, int height, int width, int k, int stride,
            int pad, int out_h, int out_w, Tensor<T>& dx) {
    dx = Tensor<T>(channels, height, width);
    const int ckk = channels * k * k;
    std::size_t col = 0;
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox, ++col) {
            const T* src = cols.data() + col * ckk;
            for (int c = 0; c < channels; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    const int yy = oy * stride - pad + ky;
                    if (yy < 0 || yy >= height) {
                        src += k;
                        continue;
                    }
                    for (int kx = 0; kx < k; ++kx) {
                        const int xx = ox * stride - pad + kx;
                        const T v = *src++;
                        if (xx >= 0 && xx < width) dx.at(c, yy, xx) += v;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
    std::vector<T> weight; // [out_ch][in_ch*k*k]
    std::vector<T> bias;   // [out_ch]
    std::vector<T> dweight, dbias;

    Conv2d() = default;
    Conv2d(int in, int out, int kernel, int stride_, int pad_)
        : in_ch(in), out_ch(out), k(kernel), stride(stride_), pad(pad_),
          weight(static_cast<std::size_t>(out) * in * kernel * kernel),
          bias(static_cast<std::size_t>(out)),
          dweight(weight.size(), T{0}), dbias(bias.size(), T{0}) {}

    void init_he(Rng& rng) {
        const double std_dev = std::sqrt(2.0 / (in_ch * k * k));
        for (T& w : weight) w = static_cast<T>(rng.normal() * std_dev);
        std::fill(bias.begin(), bias.end(), T{0});
    }

    /// cols_cache receives the im2col matrix when training needs a backward.
    Tensor<T> forward(const Tensor<T>& x, std::vector<T>* cols_cache = nullptr) const {
        std::vector<T> local;
        std::vector<T>& cols = cols_cache ? *cols_cache : local;
        int oh = 0, ow = 0;
        im2col(x, k, stride, pad, cols, oh, ow);
        const int ckk = in_ch * k * k;
        const long cols_n = static_cast<long>(oh) * ow;

        Tensor<T> y(out_ch, oh, ow);
        Eigen::Map<const MatrixRM<T>> w_map(weight.data(), out_ch, ckk);
        Eigen::Map<const MatrixCM<T>> c_map(cols.data(), ckk, cols_n);
        Eigen::Map<MatrixRM<T>> y_map(y.data.data(), out_ch, cols_n);
        y_map.noalias() = w_map * c_map;
        for (int o = 0; o < out_ch; ++o) y_map.row(o).array() += bias[static_cast<std::size_t>(o)];
        return y;
    }

    /// Gradients accumulate into caller-provided buffers so batch items can
    /// run on separate threads.
    Tensor<T> backward(const Tensor<T>& x, const std::vector<T>& cols, const Tensor<T>& dy,
                       std::vector<T>& dw, std::vector<T>& db) const {
        const int ckk = in_ch * k * k;
        const long cols_n = static_cast<long>(dy.height) * dy.width;

        Eigen::Map<const MatrixRM<T>> dy_map(dy.data.data(), out_ch, cols_n);
        Eigen::Map<const MatrixCM<T>> c_map(cols.data(), ckk, cols_n);
        Eigen::Map<MatrixRM<T>> dw_map(dw.data(), out_ch, ckk);
        dw_map.noalias() += dy_map * c_map.transpose();
        for (int o = 0; o < out_ch; ++o) db[static_cast<std::size_t>(o)] += dy_map.row(o).sum();

        std::vector<T> dcols(static_cast<std::size_t>(ckk) * cols_n);
        Eigen::Map<const MatrixRM<T>> w_map(weight.data(), out_ch, ckk);
        Eigen::Map<MatrixCM<T>> dc_map(dcols.data(), ckk, cols_n);
        dc_map.noalias() = w_map.transpose() * dy_map;

        Tensor<T> dx;
        col2im(std::span<const T>(dcols), x.channels, x.height, x.width, k, stride, pad,
               dy.height, dy.width, dx);
        return dx;
    }
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (T& v : y.data) v = v > T{0} ? v : T{0};
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
        if (x.data[i] <= T{0}) dx.data[i] = T{0};
    }
    return dx;
}

/// Per-channel affine (y = s*x + t); the inference form of a folded
/// batch-normalization layer. Scale/shift stay trainable.
template <typename T>
struct ChannelAffine {
    std::vector<T> scale, shift;
    std::vector<T> dscale, dshift;

    ChannelAffine() = default;
    explicit ChannelAffine(int channels)
        : scale(static_cast<std::size_t>(channels), T{1}),
          shift(static_cast<std::size_t>(channels), T{0}),
          dscale(scale.size(), T{0}), dshift(shift.size(), T{0}) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = x;
        const std::size_t hw = static_cast<std::size_t>(x.height) * x.width;
        for (int c = 0; c < x.channels; ++c) {
            const T s = scale[static_cast<std::size_t>(c)];
            const T t = shift[static_cast<std::size_t>(c)];
            T* p = y.data.data() + static_cast<std::size_t>(c) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * s + t;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, std::vector<T>& ds,
                       std::vector<T>& dt) const {
        Tensor<T> dx = dy;
        const std::size_t hw = static_cast<std::size_t>(x.height) * x.width;
        for (int c = 0; c < x.channels; ++c) {
            const T s = scale[static_cast<std::size_t>(c)];
            const T* xp = x.data.data() + static_cast<std::size_t>(c) * hw;
            const T* dyp = dy.data.data() + static_cast<std::size_t>(c) * hw;
            T* dxp = dx.data.data() + static_cast<std::size_t>(c) * hw;
            T acc_s = T{0}, acc_t = T{0};
            for (std::size_t i = 0; i < hw; ++i) {
                acc_s += dyp[i] * xp[i];
                acc_t += dyp[i];
                dxp[i] = dyp[i] * s;
            }
            ds[static_cast<std::size_t>(c)] += acc_s;
            dt[static_cast<std::size_t>(c)] += acc_t;
        }
        return dx;
    }
};

template <typename T>
struct MaxPool {
    int k = 2, stride = 2, pad = 0;

    Tensor<T> forward(const Tensor<T>& x, std::vector<int>* argmax = nullptr) const {
        const int oh = (x.height + 2 * pad - k) / stride + 1;
        const int ow = (x.width + 2 * pad - k) / stride + 1;
        Tensor<T> y(x.channels, oh, ow);
        if (argmax) argmax->assign(y.size(), -1);
        for (int c = 0; c < x.channels; ++c) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    int best_idx = -1;
                    for (int ky = 0; ky < k; ++ky) {
                        const int yy = oy * stride - pad + ky;
                        if (yy < 0 || yy >= x.height) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int xx = ox * stride - pad + kx;
                            if (xx < 0 || xx >= x.width) continue;
                            const T v = x.at(c, yy, xx);
                            if (v > best) {
                                best = v;
                                best_idx = (c * x.height + yy) * x.width + xx;
                            }
                        }
                    }
                    y.at(c, oy, ox) = best;
                    if (argmax) {
                        (*argmax)[(static_cast<std::size_t>(c) * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, const std::vector<int>& argmax) const {
        Tensor<T> dx(x.channels, x.height, x.width);
        for (std::size_t i = 0; i < dy.data.size(); ++i) {
            if (argmax[i] >= 0) dx.data[static_cast<std::size_t>(argmax[i])] += dy.data[i];
        }
        return dx;
    }
};

/// Spatial mean per channel: [C,H,W] -> [C,1,1].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    Tensor<T> y(x.channels, 1, 1);
    const std::size_t hw = static_cast<std::size_t>(x.height) * x.width;
    for (int c = 0; c < x.channels; ++c) {
        T acc = T{0};
        const T* p = x.data.data() + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        y.data[static_cast<std::size_t>(c)] = acc / static_cast<T>(hw);
    }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(int height, int width, const Tensor<T>& dy) {
    Tensor<T> dx(dy.channels, height, width);
    const std::size_t hw = static_cast<std::size_t>(height) * width;
    for (int c = 0; c < dy.channels; ++c) {
        const T g = dy.data[static_cast<std::size_t>(c)] / static_cast<T>(hw);
        T* p = dx.data.data() + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] = g;
    }
    return dx;
}

template <typename T>
struct Linear {
    int in_dim = 0, out_dim = 0;
    std::vector<T> weight; // [out][in]
    std::vector<T> bias;   // [out]
    std::vector<T> dweight, dbias;

    Linear() = default;
    Linear(int in, int out)
        : in_dim(in), out_dim(out),
          weight(static_cast<std::size_t>(in) * out), bias(static_cast<std::size_t>(out)),
          dweight(weight.size(), T{0}), dbias(bias.size(), T{0}) {}

    void init_he(Rng& rng) {
        const double std_dev = std::sqrt(2.0 / in_dim);
        for (T& w : weight) w = static_cast<T>(rng.normal() * std_dev);
        std::fill(bias.begin(), bias.end(), T{0});
    }

    std::vector<T> forward(std::span<const T> x) const {
        std::vector<T> y(static_cast<std::size_t>(out_dim));
        Eigen::Map<const MatrixRM<T>> w_map(weight.data(), out_dim, in_dim);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> x_map(x.data(), in_dim);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> y_map(y.data(), out_dim);
        y_map.noalias() = w_map * x_map;
        for (int o = 0; o < out_dim; ++o) y[static_cast<std::size_t>(o)] += bias[static_cast<std::size_t>(o)];
        return y;
    }

    std::vector<T> backward(std::span<const T> x, std::span<const T> dy, std::vector<T>& dw,
                            std::vector<T>& db) const {
        for (int o = 0; o < out_dim; ++o) {
            db[static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(o)];
            for (int i = 0; i < in_dim; ++i) {
                dw[static_cast<std::size_t>(o) * in_dim + i] += dy[static_cast<std::size_t>(o)] * x[static_cast<std::size_t>(i)];
            }
        }
        std::vector<T> dx(static_cast<std::size_t>(in_dim), T{0});
        Eigen::Map<const MatrixRM<T>> w_map(weight.data(), out_dim, in_dim);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> dy_map(dy.data(), out_dim);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dx_map(dx.data(), in_dim);
        dx_map.noalias() = w_map.transpose() * dy_map;
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef<T>>& refs) {
        if (m_.empty()) {
            for (const ParamRef<T>& r : refs) {
                m_.emplace_back(r.value->size(), T{0});
                v_.emplace_back(r.value->size(), T{0});
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t ri = 0; ri < refs.size(); ++ri) {
            std::vector<T>& value = *refs[ri].value;
            std::vector<T>& grad = *refs[ri].grad;
            std::vector<T>& m = m_[ri];
            std::vector<T>& v = v_[ri];
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = static_cast<double>(grad[i]);
                m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * g);
                v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * g * g);
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                value[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    long step_count() const { return t_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }

    /// Restores serialized optimizer state (resume support).
    void restore(long t, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

/// Deterministic work partition: results must not depend on `workers`.
/// Call sites precompute any randomness per item before fanning out.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

template <typename T>
void zero_grads(const std::vector<ParamRef<T>>& refs) {
    for (const ParamRef<T>& r : refs) std::fill(r.grad->begin(), r.grad->end(), T{0});
}

template <typename T>
std::size_t param_count(const std::vector<ParamRef<T>>& refs) {
    std::size_t n = 0;
    for (const ParamRef<T>& r : refs) n += r.value->size();
    return n;
}

} // namespace anomalign::nn
