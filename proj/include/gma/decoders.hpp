#pragma once

#include "gma/gma_core.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace gma {

enum class Activation { Gelu, Relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// LINEAR -> activation -> LINEAR. Output is pre-head.
struct MlpWeights {
    Activation activation = Activation::Gelu;
    Eigen::MatrixXd w1;  // hidden x in
    Eigen::VectorXd b1;
    Eigen::MatrixXd w2;  // out x hidden
    Eigen::VectorXd b2;

    int input_dim() const { return static_cast<int>(w1.cols()); }
    int hidden_dim() const { return static_cast<int>(w1.rows()); }
    int output_dim() const { return static_cast<int>(w2.rows()); }

    bool operator==(const MlpWeights& o) const {
        return activation == o.activation && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2;
    }
};

/// Same layout as MlpWeights; accumulates parameter gradients.
struct MlpGrad {
    Eigen::MatrixXd w1;
    Eigen::VectorXd b1;
    Eigen::MatrixXd w2;
    Eigen::VectorXd b2;

    static MlpGrad zeros_like(const MlpWeights& w);
    void set_zero();
};

/// Activations of one forward pass. Each column is one evaluation, so a
/// batch of faces shares a tape without mixing their values.
struct GradTape {
    Eigen::MatrixXd input;   // in x n
    Eigen::MatrixXd pre;     // hidden x n
    Eigen::MatrixXd hidden;  // hidden x n
};

inline constexpr int kHiddenDim = 128;

/// Kaiming fan-in init for the first layer; the output layer is scaled by
/// `output_gain` / sqrt(hidden). Biases start at zero.
MlpWeights make_mlp(int input_dim, int output_dim, Activation act, std::mt19937_64& rng, double output_gain = 1.0,
                    int hidden_dim = kHiddenDim);

/// Single input; returns the pre-head output.
Eigen::VectorXd mlp_forward(const MlpWeights& w, const Eigen::VectorXd& input, GradTape* tape = nullptr);

/// Batched: input is in x n, result is out x n.
Eigen::MatrixXd mlp_forward_batch(const MlpWeights& w, const Eigen::MatrixXd& input, GradTape* tape = nullptr);

/// Backward through a recorded pass. Accumulates into `grad` when non-null
/// and returns the input gradient (in x n).
Eigen::MatrixXd mlp_backward(const MlpWeights& w, const GradTape& tape, const Eigen::MatrixXd& grad_output,
                             MlpGrad* grad);

double gelu(double x);
double gelu_derivative(double x);

/// The four per-avatar decoders.
struct DecoderSet {
    MlpWeights coarse;  ///< F_coarse, GELU; 1 output (normal offset) or 3 (free offset)
    MlpWeights fine;    ///< F_fine, GELU; 3 * n_k outputs
    MlpWeights color;   ///< T_color, ReLU; 3 * n_k outputs
    MlpWeights scale;   ///< T_scale, ReLU; 2 * n_k outputs

    bool operator==(const DecoderSet&) const = default;
};

DecoderSet make_decoders(const CoreConstants& c, bool free_offsets, std::uint64_t seed);

struct DecoderGrads {
    MlpGrad coarse, fine, color, scale;
    static DecoderGrads zeros_like(const DecoderSet& d);
};

// Heads. Each maps raw network outputs onto the valid range of its quantity.

/// max_offset * tanh(raw).
double coarse_head(double raw, double max_offset);

/// Per surfel j: logits (raw[3j], raw[3j+1], 0) -> softmax -> (u, v); d = max_d * tanh(raw[3j+2]).
std::vector<UvdCoord> fine_head(std::span<const double> raw, int n_k, double max_d);

/// Sigmoid per channel.
std::vector<Vec3> color_head(std::span<const double> raw, int n_k);

/// exp(raw) clamped to [1e-4, max_factor].
std::vector<Vec2> scale_head(std::span<const double> raw, int n_k, double max_factor);

/// Builds the decoder input [feature row; encoded center].
Eigen::VectorXd decoder_input(const Eigen::VectorXd& feature, const std::vector<double>& encoded_center);

double decode_coarse(const MlpWeights& f_coarse, const Eigen::VectorXd& f_geo_i, const std::vector<double>& mu_hat_i,
                     double max_offset);
std::vector<UvdCoord> decode_fine(const MlpWeights& f_fine, const Eigen::VectorXd& f_geo_i,
                                  const std::vector<double>& mu_hat_i, int n_k, double max_d);
std::vector<Vec3> decode_color(const MlpWeights& t_color, const Eigen::VectorXd& f_tex_i,
                               const std::vector<double>& mu_hat_i, int n_k);
std::vector<Vec2> decode_scale(const MlpWeights& t_scale, const Eigen::VectorXd& f_tex_i,
                               const std::vector<double>& mu_hat_i, int n_k, double max_factor);

/// Mean of the fine colors of one face; the coarse surfel's color.
Vec3 coarse_color(std::span<const Vec3> fine_colors);

}  // namespace gma
