#include "gma/decoders.hpp"

#include "gma/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace gma {

std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::Gelu;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation '" + s + "'");
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

MlpGrad MlpGrad::zeros_like(const MlpWeights& w) {
    MlpGrad g;
    g.w1 = Eigen::MatrixXd::Zero(w.w1.rows(), w.w1.cols());
    g.b1 = Eigen::VectorXd::Zero(w.b1.size());
    g.w2 = Eigen::MatrixXd::Zero(w.w2.rows(), w.w2.cols());
    g.b2 = Eigen::VectorXd::Zero(w.b2.size());
    return g;
}

void MlpGrad::set_zero() {
    w1.setZero();
    b1.setZero();
    w2.setZero();
    b2.setZero();
}

MlpWeights make_mlp(int input_dim, int output_dim, Activation act, std::mt19937_64& rng, double output_gain,
                    int hidden_dim) {
    if (input_dim <= 0 || output_dim <= 0 || hidden_dim <= 0) throw ShapeError("make_mlp: dimensions must be positive");
    MlpWeights w;
    w.activation = act;
    std::normal_distribution<double> first(0.0, std::sqrt(2.0 / input_dim));
    std::normal_distribution<double> second(0.0, output_gain / std::sqrt(static_cast<double>(hidden_dim)));
    w.w1.resize(hidden_dim, input_dim);
    for (Eigen::Index r = 0; r < w.w1.rows(); ++r)
        for (Eigen::Index c = 0; c < w.w1.cols(); ++c) w.w1(r, c) = first(rng);
    w.b1 = Eigen::VectorXd::Zero(hidden_dim);
    w.w2.resize(output_dim, hidden_dim);
    for (Eigen::Index r = 0; r < w.w2.rows(); ++r)
        for (Eigen::Index c = 0; c < w.w2.cols(); ++c) w.w2(r, c) = second(rng);
    w.b2 = Eigen::VectorXd::Zero(output_dim);
    return w;
}

Eigen::MatrixXd mlp_forward_batch(const MlpWeights& w, const Eigen::MatrixXd& input, GradTape* tape) {
    if (input.rows() != w.input_dim())
        throw ShapeError("mlp input has " + std::to_string(input.rows()) + " rows, expected " +
                         std::to_string(w.input_dim()));
    Eigen::MatrixXd pre = w.w1 * input;
    pre.colwise() += w.b1;
    Eigen::MatrixXd hidden(pre.rows(), pre.cols());
    if (w.activation == Activation::Gelu)
        hidden = pre.unaryExpr([](double x) { return gelu(x); });
    else
        hidden = pre.cwiseMax(0.0);
    Eigen::MatrixXd out = w.w2 * hidden;
    out.colwise() += w.b2;
    if (tape) {
        tape->input = input;
        tape->pre = std::move(pre);
        tape->hidden = std::move(hidden);
    }
    return out;
}

Eigen::VectorXd mlp_forward(const MlpWeights& w, const Eigen::VectorXd& input, GradTape* tape) {
    Eigen::MatrixXd out = mlp_forward_batch(w, input, tape);
    return out.col(0);
}

Eigen::MatrixXd mlp_backward(const MlpWeights& w, const GradTape& tape, const Eigen::MatrixXd& grad_output,
                             MlpGrad* grad) {
    if (grad_output.rows() != w.output_dim() || grad_output.cols() != tape.hidden.cols())
        throw ShapeError("mlp_backward: gradient shape does not match the tape");
    Eigen::MatrixXd grad_hidden = w.w2.transpose() * grad_output;
    Eigen::MatrixXd grad_pre(grad_hidden.rows(), grad_hidden.cols());
    if (w.activation == Activation::Gelu)
        grad_pre = grad_hidden.cwiseProduct(tape.pre.unaryExpr([](double x) { return gelu_derivative(x); }));
    else
        grad_pre = grad_hidden.cwiseProduct(tape.pre.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; }));
    if (grad) {
        grad->w2.noalias() += grad_output * tape.hidden.transpose();
        grad->b2 += grad_output.rowwise().sum();
        grad->w1.noalias() += grad_pre * tape.input.transpose();
        grad->b1 += grad_pre.rowwise().sum();
    }
    return w.w1.transpose() * grad_pre;
}

DecoderSet make_decoders(const CoreConstants& c, bool free_offsets, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    DecoderSet d;
    // small output gains keep the initial morph and colors near their head centers
    d.coarse = make_mlp(c.input_dim(), free_offsets ? 3 : 1, Activation::Gelu, rng, 0.1);
    d.fine = make_mlp(c.input_dim(), 3 * c.n_k, Activation::Gelu, rng, 1.0);
    d.color = make_mlp(c.input_dim(), 3 * c.n_k, Activation::Relu, rng, 0.5);
    d.scale = make_mlp(c.input_dim(), 2 * c.n_k, Activation::Relu, rng, 0.3);
    return d;
}

DecoderGrads DecoderGrads::zeros_like(const DecoderSet& d) {
    return {MlpGrad::zeros_like(d.coarse), MlpGrad::zeros_like(d.fine), MlpGrad::zeros_like(d.color),
            MlpGrad::zeros_like(d.scale)};
}

double coarse_head(double raw, double max_offset) { return max_offset * std::tanh(raw); }

std::vector<UvdCoord> fine_head(std::span<const double> raw, int n_k, double max_d) {
    if (raw.size() != static_cast<std::size_t>(3 * n_k)) throw ShapeError("fine_head: expected 3 * n_k outputs");
    std::vector<UvdCoord> out(static_cast<std::size_t>(n_k));
    for (int j = 0; j < n_k; ++j) {
        const double a = raw[3 * j], b = raw[3 * j + 1];
        const double m = std::max({a, b, 0.0});
        const double ea = std::exp(a - m), eb = std::exp(b - m), ec = std::exp(-m);
        const double sum = ea + eb + ec;
        out[j].u = ea / sum;
        out[j].v = eb / sum;
        out[j].d = max_d * std::tanh(raw[3 * j + 2]);
    }
    return out;
}

std::vector<Vec3> color_head(std::span<const double> raw, int n_k) {
    if (raw.size() != static_cast<std::size_t>(3 * n_k)) throw ShapeError("color_head: expected 3 * n_k outputs");
    std::vector<Vec3> out(static_cast<std::size_t>(n_k));
    for (int j = 0; j < n_k; ++j)
        for (int c = 0; c < 3; ++c) out[j][c] = 1.0 / (1.0 + std::exp(-raw[3 * j + c]));
    return out;
}

std::vector<Vec2> scale_head(std::span<const double> raw, int n_k, double max_factor) {
    if (raw.size() != static_cast<std::size_t>(2 * n_k)) throw ShapeError("scale_head: expected 2 * n_k outputs");
    const double lo = std::log(1e-4), hi = std::log(max_factor);
    std::vector<Vec2> out(static_cast<std::size_t>(n_k));
    for (int j = 0; j < n_k; ++j)
        for (int c = 0; c < 2; ++c) out[j][c] = std::exp(std::clamp(raw[2 * j + c], lo, hi));
    return out;
}

Eigen::VectorXd decoder_input(const Eigen::VectorXd& feature, const std::vector<double>& encoded_center) {
    Eigen::VectorXd x(feature.size() + static_cast<Eigen::Index>(encoded_center.size()));
    x.head(feature.size()) = feature;
    for (std::size_t i = 0; i < encoded_center.size(); ++i) x[feature.size() + static_cast<Eigen::Index>(i)] = encoded_center[i];
    return x;
}

namespace {

std::vector<double> run(const MlpWeights& w, const Eigen::VectorXd& feature, const std::vector<double>& mu_hat) {
    for (Eigen::Index i = 0; i < feature.size(); ++i)
        if (!std::isfinite(feature[i])) throw ParameterError("non-finite feature");
    const Eigen::VectorXd out = mlp_forward(w, decoder_input(feature, mu_hat));
    return {out.data(), out.data() + out.size()};
}

}  // namespace

double decode_coarse(const MlpWeights& f_coarse, const Eigen::VectorXd& f_geo_i, const std::vector<double>& mu_hat_i,
                     double max_offset) {
    const auto raw = run(f_coarse, f_geo_i, mu_hat_i);
    return coarse_head(raw.at(0), max_offset);
}

std::vector<UvdCoord> decode_fine(const MlpWeights& f_fine, const Eigen::VectorXd& f_geo_i,
                                  const std::vector<double>& mu_hat_i, int n_k, double max_d) {
    return fine_head(run(f_fine, f_geo_i, mu_hat_i), n_k, max_d);
}

std::vector<Vec3> decode_color(const MlpWeights& t_color, const Eigen::VectorXd& f_tex_i,
                               const std::vector<double>& mu_hat_i, int n_k) {
    return color_head(run(t_color, f_tex_i, mu_hat_i), n_k);
}

std::vector<Vec2> decode_scale(const MlpWeights& t_scale, const Eigen::VectorXd& f_tex_i,
                               const std::vector<double>& mu_hat_i, int n_k, double max_factor) {
    return scale_head(run(t_scale, f_tex_i, mu_hat_i), n_k, max_factor);
}

Vec3 coarse_color(std::span<const Vec3> fine_colors) {
    if (fine_colors.empty()) throw ShapeError("coarse_color: no fine colors");
    Vec3 sum = Vec3::Zero();
    for (const auto& c : fine_colors) sum += c;
    return sum / static_cast<double>(fine_colors.size());
}

}  // namespace gma
