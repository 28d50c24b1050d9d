#include "forge/nn.hpp"

#include <cmath>

namespace forge::nn {

Mat linear(const Mat & x, const Mat & w) {
    Mat y(x.rows(), w.rows());
    y.noalias() = x * w.transpose();
    return y;
}

Mat linear(const Mat & x, const Mat & w, const Mat & bias) {
    Mat y = linear(x, w);
    y.rowwise() += bias.row(0);
    return y;
}

Mat linear_backward(const Mat & x, const Mat & w, const Mat & dy, Mat & dw) {
    dw.noalias() += dy.transpose() * x;
    Mat dx(x.rows(), x.cols());
    dx.noalias() = dy * w;
    return dx;
}

Mat linear_backward(const Mat & x, const Mat & w, const Mat & dy, Mat & dw, Mat & db) {
    db.row(0) += dy.colwise().sum();
    return linear_backward(x, w, dy, dw);
}

Mat rms_norm(const Mat & x, const Mat & gain, VecF * inv_rms) {
    const auto d = static_cast<float>(x.cols());
    VecF r = ((x.array().square().rowwise().sum() / d) + kRmsEps).rsqrt().matrix();
    Mat y = (x.array().colwise() * r.array()).rowwise() * gain.row(0).array();
    if (inv_rms) {
        *inv_rms = std::move(r);
    }
    return y;
}

Mat rms_norm_backward(const Mat & x, const Mat & gain, const VecF & inv_rms, const Mat & dy, Mat & dgain) {
    const auto d = static_cast<float>(x.cols());
    dgain.row(0) += (dy.array() * (x.array().colwise() * inv_rms.array())).colwise().sum().matrix();
    Mat u = dy.array().rowwise() * gain.row(0).array();
    VecF dot = (u.array() * x.array()).rowwise().sum().matrix();
    Mat dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const float r = inv_rms(i);
        dx.row(i) = r * u.row(i) - (r * r * r * dot(i) / d) * x.row(i);
    }
    return dx;
}

void rope(Mat & x, int n_heads, int pos0, bool inverse) {
    const int head_dim = static_cast<int>(x.cols()) / n_heads;
    const int half = head_dim / 2;
    std::vector<float> inv_freq(half);
    for (int i = 0; i < half; ++i) {
        inv_freq[i] = std::pow(kRopeBase, -2.0f * static_cast<float>(i) / static_cast<float>(head_dim));
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float pos = static_cast<float>(pos0 + r);
        for (int i = 0; i < half; ++i) {
            const float angle = pos * inv_freq[i];
            const float c = std::cos(angle);
            const float s = inverse ? -std::sin(angle) : std::sin(angle);
            for (int h = 0; h < n_heads; ++h) {
                float & a = x(r, h * head_dim + i);
                float & b = x(r, h * head_dim + i + half);
                const float x1 = a;
                const float x2 = b;
                a = x1 * c - x2 * s;
                b = x1 * s + x2 * c;
            }
        }
    }
}

Mat attention(const Mat & q, const Mat & k, const Mat & v, int n_heads, bool causal, int q_pos0,
              std::vector<Mat> * probs) {
    const Eigen::Index n_q = q.rows();
    const Eigen::Index n_k = k.rows();
    const int head_dim = static_cast<int>(q.cols()) / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    Mat out(n_q, q.cols());
    if (probs) {
        probs->assign(n_heads, Mat());
    }
    for (int h = 0; h < n_heads; ++h) {
        const auto qh = q.middleCols(h * head_dim, head_dim);
        const auto kh = k.middleCols(h * head_dim, head_dim);
        const auto vh = v.middleCols(h * head_dim, head_dim);
        Mat s(n_q, n_k);
        s.noalias() = qh * kh.transpose();
        s *= scale;
        for (Eigen::Index i = 0; i < n_q; ++i) {
            const Eigen::Index visible = causal ? std::min<Eigen::Index>(n_k, q_pos0 + i + 1) : n_k;
            auto row = s.row(i).head(visible).array();
            row = (row - row.maxCoeff()).exp();
            row /= row.sum();
            if (visible < n_k) {
                s.row(i).tail(n_k - visible).setZero();
            }
        }
        out.middleCols(h * head_dim, head_dim).noalias() = s * vh;
        if (probs) {
            (*probs)[h] = std::move(s);
        }
    }
    return out;
}

void attention_backward(const Mat & q, const Mat & k, const Mat & v, const std::vector<Mat> & probs,
                        const Mat & d_out, int n_heads, Mat & dq, Mat & dk, Mat & dv) {
    const int head_dim = static_cast<int>(q.cols()) / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    dq.setZero(q.rows(), q.cols());
    dk.setZero(k.rows(), k.cols());
    dv.setZero(v.rows(), v.cols());
    for (int h = 0; h < n_heads; ++h) {
        const Mat & p = probs[h];
        const auto doh = d_out.middleCols(h * head_dim, head_dim);
        dv.middleCols(h * head_dim, head_dim).noalias() = p.transpose() * doh;
        Mat dp(p.rows(), p.cols());
        dp.noalias() = doh * v.middleCols(h * head_dim, head_dim).transpose();
        const VecF row_dot = (dp.array() * p.array()).rowwise().sum().matrix();
        Mat ds = (p.array() * (dp.array().colwise() - row_dot.array())) * scale;
        dq.middleCols(h * head_dim, head_dim).noalias() = ds * k.middleCols(h * head_dim, head_dim);
        dk.middleCols(h * head_dim, head_dim).noalias() = ds.transpose() * q.middleCols(h * head_dim, head_dim);
    }
}

float silu(float x) {
    return x / (1.0f + std::exp(-x));
}

float silu_grad(float x) {
    const float s = 1.0f / (1.0f + std::exp(-x));
    return s * (1.0f + x * (1.0f - s));
}

float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
}

float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * M_2_SQRTPI * M_SQRT1_2);
    return cdf + x * pdf;
}

} // namespace forge::nn
