#pragma once

#include <koopeig/common.hpp>
#include <koopeig/spatial.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/systems.hpp>

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace koopeig {

// ============================================================================
// Lifted input field
// ============================================================================

/// grad(Phi) G(x) on the nodes of a field grid. values[j] is the n_phi x n_nodes
/// slice for input channel j.
struct LiftedInputField {
    SimGrid grid;
    std::vector<Mat> values;
    std::vector<std::uint8_t> mask;

    Index n_phi() const { return values.empty() ? 0 : values.front().rows(); }
    Index input_dim() const { return static_cast<Index>(values.size()); }

    Mat at(Index k) const {
        Mat g(n_phi(), input_dim());
        for (Index j = 0; j < input_dim(); ++j) g.col(j) = values[static_cast<std::size_t>(j)].col(k);
        return g;
    }

    /// Bilinear interpolation at an arbitrary state.
    Mat sample(const Vec& x, bool* outside = nullptr) const {
        Mat g(n_phi(), input_dim());
        bool out = false;
        for (Index j = 0; j < input_dim(); ++j) {
            bool o = false;
            g.col(j) = sample_nodes(grid, values[static_cast<std::size_t>(j)], x, &o);
            out = out || o;
        }
        if (outside) *outside = out;
        return g;
    }
};

inline LiftedInputField lifted_input_samples(const EigenfunctionField& field, const DynSystem& sys) {
    if (!field.has_gradient()) throw StateError("lifted input dynamics need the field gradient");
    if (field.grid.dims() != sys.state_dim) throw ConfigError("field grid does not match the system");
    LiftedInputField out;
    out.grid = field.grid;
    out.mask = field.mask;
    out.values.assign(static_cast<std::size_t>(sys.input_dim), Mat::Zero(field.n_phi(), field.grid.size()));
    parallel_for(field.grid.size(), [&](Index k) {
        if (field.masked(k)) return;
        const Mat g = field.gradient_at(k) * sys.G(field.grid.node(k));
        for (Index j = 0; j < sys.input_dim; ++j) out.values[static_cast<std::size_t>(j)].col(k) = g.col(j);
    });
    return out;
}

/// Adds the conservative eigenfunction (constant 1, zero gradient) as row 0.
inline EigenfunctionField extend_field_conservative(const EigenfunctionField& f) {
    EigenfunctionField out = f;
    out.values.resize(f.values.rows() + 1, f.values.cols());
    out.values.row(0).setOnes();
    out.values.bottomRows(f.values.rows()) = f.values;
    for (std::size_t j = 0; j < f.gradient.size(); ++j) {
        out.gradient[j].resize(f.gradient[j].rows() + 1, f.gradient[j].cols());
        out.gradient[j].row(0).setZero();
        out.gradient[j].bottomRows(f.gradient[j].rows()) = f.gradient[j];
    }
    return out;
}

// ============================================================================
// Sigmoid surrogate
// ============================================================================

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Gamma(x) = reshape(W2 sigma(w1^T z + b1) + B2), z the normalized state.
/// The output vector stacks the n_phi x input_dim matrix column by column.
struct SigmoidSurrogate {
    Mat w1;  // m x h
    Vec b1;  // h
    Mat W2;  // (n_phi input_dim) x h
    Vec B2;
    Vec x_center;
    Vec x_scale;
    Vec hull_lo;
    Vec hull_hi;
    Index n_phi = 0;
    Index input_dim = 0;

    Index hidden() const { return b1.size(); }

    Vec hidden_activation(const Vec& x) const {
        const Vec z = (x - x_center).cwiseQuotient(x_scale);
        Vec a = w1.transpose() * z + b1;
        return a.unaryExpr([](double v) { return sigmoid(v); });
    }

    Vec evaluate_flat(const Vec& x) const { return W2 * hidden_activation(x) + B2; }

    Mat evaluate(const Vec& x) const {
        const Vec f = evaluate_flat(x);
        return Eigen::Map<const Mat>(f.data(), n_phi, input_dim);
    }

    bool inside_hull(const Vec& x) const {
        return (x.array() >= hull_lo.array() - 1e-12).all() && (x.array() <= hull_hi.array() + 1e-12).all();
    }

    bool finite() const { return w1.allFinite() && b1.allFinite() && W2.allFinite() && B2.allFinite(); }
};

struct SurrogateTraining {
    Index hidden = 15;
    double ridge = 1e-8;
    double weight_scale = 2.0;  // std of the random input weights (normalized inputs)
    double bias_scale = 1.0;    // half-width of the uniform random biases
    Index adam_iterations = 0;
    double adam_step = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    Index max_samples = 20000;  // deterministic stride subsampling above this
    std::uint64_t seed = 1;
};

struct SurrogateFit {
    SigmoidSurrogate model;
    double mse = 0.0;
    double initial_mse = 0.0;
    bool refined = false;
};

namespace detail {

inline double surrogate_mse(const SigmoidSurrogate& s, const Mat& X, const Mat& T) {
    double acc = 0.0;
    for (Index k = 0; k < X.cols(); ++k) acc += (s.evaluate_flat(X.col(k)) - T.col(k)).squaredNorm();
    return acc / static_cast<double>(T.size());
}

/// Hidden activations H (h x n) for states X (m x n).
inline Mat surrogate_hidden(const SigmoidSurrogate& s, const Mat& X) {
    Mat H(s.hidden(), X.cols());
    for (Index k = 0; k < X.cols(); ++k) H.col(k) = s.hidden_activation(X.col(k));
    return H;
}

/// Ridge solve of the output layer with an unpenalized bias (targets centred).
inline void fit_output_layer(SigmoidSurrogate& s, const Mat& H, const Mat& T, double ridge) {
    const Vec hm = H.rowwise().mean();
    const Vec tm = T.rowwise().mean();
    const Mat Hc = H.colwise() - hm;
    const Mat Tc = T.colwise() - tm;
    s.W2 = ridge_fit(Hc, Tc, ridge * static_cast<double>(H.cols()));
    s.B2 = tm - s.W2 * hm;
}

}  // namespace detail

/// Two-stage fit of Gamma samples: random hidden layer plus ridge output layer,
/// then optional full-parameter Adam refinement on the mean squared error that
/// keeps the best iterate. `states` is m x n, `targets` is (n_phi input_dim) x n.
inline SurrogateFit fit_sigmoid_surrogate(const Mat& states, const Mat& targets, Index n_phi, Index input_dim,
                                          const SurrogateTraining& cfg = {}) {
    if (cfg.hidden < 1) throw ConfigError("surrogate needs at least one hidden unit");
    if (states.cols() != targets.cols()) throw ConfigError("surrogate states and targets differ in count");
    if (targets.rows() != n_phi * input_dim) throw ConfigError("surrogate target rows must equal n_phi * input_dim");
    if (states.cols() < 2 * (cfg.hidden + 1)) throw InsufficientDataError("too few samples for the surrogate");

    Mat X = states, T = targets;
    if (cfg.max_samples > 0 && X.cols() > cfg.max_samples) {
        const Index stride = (X.cols() + cfg.max_samples - 1) / cfg.max_samples;
        const Index n = (X.cols() + stride - 1) / stride;
        Mat Xs(X.rows(), n), Ts(T.rows(), n);
        for (Index i = 0; i < n; ++i) {
            Xs.col(i) = X.col(i * stride);
            Ts.col(i) = T.col(i * stride);
        }
        X = std::move(Xs);
        T = std::move(Ts);
    }

    const Index m = X.rows(), h = cfg.hidden;
    SigmoidSurrogate s;
    s.n_phi = n_phi;
    s.input_dim = input_dim;
    s.hull_lo = states.rowwise().minCoeff();
    s.hull_hi = states.rowwise().maxCoeff();
    s.x_center = 0.5 * (s.hull_lo + s.hull_hi);
    s.x_scale = (0.5 * (s.hull_hi - s.hull_lo)).cwiseMax(1e-12);

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> nd(0.0, cfg.weight_scale);
    std::uniform_real_distribution<double> ud(-cfg.bias_scale, cfg.bias_scale);
    s.w1.resize(m, h);
    s.b1.resize(h);
    for (Index j = 0; j < h; ++j) {
        for (Index i = 0; i < m; ++i) s.w1(i, j) = nd(rng);
        s.b1(j) = ud(rng);
    }
    detail::fit_output_layer(s, detail::surrogate_hidden(s, X), T, cfg.ridge);

    SurrogateFit fit;
    fit.model = s;
    fit.initial_mse = detail::surrogate_mse(s, X, T);
    fit.mse = fit.initial_mse;
    if (cfg.adam_iterations <= 0) return fit;

    // Adam on (w1, b1, W2, B2) with full-batch gradients.
    const Index q = T.rows(), n = X.cols();
    Mat Z(m, n);
    for (Index k = 0; k < n; ++k) Z.col(k) = (X.col(k) - s.x_center).cwiseQuotient(s.x_scale);
    struct Moments {
        Mat w1, W2;
        Vec b1, B2;
    } mom{Mat::Zero(m, h), Mat::Zero(q, h), Vec::Zero(h), Vec::Zero(q)},
        vel{Mat::Zero(m, h), Mat::Zero(q, h), Vec::Zero(h), Vec::Zero(q)};
    SigmoidSurrogate cur = s, best = s;
    double best_mse = fit.initial_mse;
    bool diverged = false;
    const double eps = 1e-8;
    for (Index it = 1; it <= cfg.adam_iterations; ++it) {
        const Mat A = ((cur.w1.transpose() * Z).colwise() + cur.b1).unaryExpr([](double v) { return sigmoid(v); });
        const Mat Y = (cur.W2 * A).colwise() + cur.B2;
        const Mat R = Y - T;
        const double mse = R.squaredNorm() / static_cast<double>(R.size());
        if (mse < best_mse) {
            best_mse = mse;
            best = cur;
        }
        if (!std::isfinite(mse) || mse > 10.0 * fit.initial_mse) {
            diverged = true;
            break;
        }
        const Mat dY = (2.0 / static_cast<double>(R.size())) * R;
        const Mat gW2 = dY * A.transpose();
        const Vec gB2 = dY.rowwise().sum();
        const Mat dA = (cur.W2.transpose() * dY).cwiseProduct(A.cwiseProduct((1.0 - A.array()).matrix()));
        const Mat gw1 = Z * dA.transpose();
        const Vec gb1 = dA.rowwise().sum();
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(it));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(it));
        const auto step = [&](auto& p, auto& mo, auto& ve, const auto& g) {
            mo = cfg.adam_beta1 * mo + (1.0 - cfg.adam_beta1) * g;
            ve = cfg.adam_beta2 * ve + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
            p -= (cfg.adam_step * (mo / c1).array() / ((ve / c2).array().sqrt() + eps)).matrix();
        };
        step(cur.w1, mom.w1, vel.w1, gw1);
        step(cur.b1, mom.b1, vel.b1, gb1);
        step(cur.W2, mom.W2, vel.W2, gW2);
        step(cur.B2, mom.B2, vel.B2, gB2);
    }
    if (!diverged) {
        const double final_mse = detail::surrogate_mse(cur, X, T);
        if (final_mse < best_mse) {
            best_mse = final_mse;
            best = cur;
        }
    } else {
        log::warn("surrogate refinement diverged; keeping the ridge-fitted model");
        return fit;
    }
    fit.model = best;
    fit.mse = best_mse;
    fit.refined = true;
    return fit;
}

/// Convenience overload on a lifted field: unmasked nodes become samples.
inline SurrogateFit fit_sigmoid_surrogate(const LiftedInputField& lifted, const SurrogateTraining& cfg = {}) {
    std::vector<Index> keep;
    for (Index k = 0; k < lifted.grid.size(); ++k)
        if (lifted.mask.empty() || !lifted.mask[static_cast<std::size_t>(k)]) keep.push_back(k);
    const Index np = lifted.n_phi(), p = lifted.input_dim();
    Mat X(lifted.grid.dims(), static_cast<Index>(keep.size()));
    Mat T(np * p, static_cast<Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
        X.col(static_cast<Index>(i)) = lifted.grid.node(keep[i]);
        const Mat g = lifted.at(keep[i]);
        T.col(static_cast<Index>(i)) = Eigen::Map<const Vec>(g.data(), g.size());
    }
    return fit_sigmoid_surrogate(X, T, np, p, cfg);
}

// ============================================================================
// LPV prediction
// ============================================================================

/// State-dependent input coupling Gamma(x) with an optional validity box.
struct InputDynamics {
    std::function<Mat(const Vec&)> gamma;
    Vec hull_lo;
    Vec hull_hi;

    bool inside(const Vec& x) const {
        if (hull_lo.size() == 0) return true;
        return (x.array() >= hull_lo.array() - 1e-12).all() && (x.array() <= hull_hi.array() + 1e-12).all();
    }
};

inline InputDynamics input_dynamics_from(const LiftedInputField& lifted) {
    InputDynamics d;
    auto shared = std::make_shared<LiftedInputField>(lifted);
    d.gamma = [shared](const Vec& x) { return shared->sample(x); };
    d.hull_lo.resize(lifted.grid.dims());
    d.hull_hi.resize(lifted.grid.dims());
    for (Index j = 0; j < lifted.grid.dims(); ++j) {
        d.hull_lo(j) = lifted.grid.ranges[static_cast<std::size_t>(j)].lo;
        d.hull_hi(j) = lifted.grid.ranges[static_cast<std::size_t>(j)].hi;
    }
    return d;
}

inline InputDynamics input_dynamics_from(const SigmoidSurrogate& s) {
    InputDynamics d;
    d.gamma = [s](const Vec& x) { return s.evaluate(x); };
    d.hull_lo = s.hull_lo;
    d.hull_hi = s.hull_hi;
    return d;
}

/// Constant coupling, used for LTI checks.
inline InputDynamics constant_input_dynamics(const Mat& gamma) {
    InputDynamics d;
    d.gamma = [gamma](const Vec&) { return gamma; };
    return d;
}

struct LpvPrediction {
    Mat states;  // m x N
    Mat phi;     // n_phi x N
    bool left_hull = false;
};

/// Heun integration of Phi' = Lambda Phi + Gamma(C Phi) u with inputs held over
/// each step (column k of `inputs` on [t_k, t_{k+1})).
inline LpvPrediction predict_lpv(const Mat& lambda, const Mat& C_ref, const InputDynamics& gamma, const Vec& phi_init,
                                 const Mat& inputs, double dt) {
    if (lambda.rows() != phi_init.size() || C_ref.cols() != phi_init.size())
        throw ConfigError("LPV model dimensions are inconsistent");
    const Index N = inputs.cols();
    LpvPrediction out;
    out.states.resize(C_ref.rows(), N);
    out.phi.resize(phi_init.size(), N);
    Vec phi = phi_init;
    const auto rhs = [&](const Vec& p, const Vec& u) {
        const Vec x = C_ref * p;
        if (!gamma.inside(x) && !out.left_hull) {
            out.left_hull = true;
            log::warn("LPV prediction left the input-dynamics training region");
        }
        Vec d = lambda * p;
        if (u.size() > 0) d.noalias() += gamma.gamma(x) * u;
        return d;
    };
    out.phi.col(0) = phi;
    out.states.col(0) = C_ref * phi;
    for (Index k = 1; k < N; ++k) {
        const Vec u = inputs.col(k - 1);
        const Vec k1 = rhs(phi, u);
        const Vec k2 = rhs(phi + dt * k1, u);
        phi += 0.5 * dt * (k1 + k2);
        if (!phi.allFinite()) throw SimulationError("LPV prediction diverged at step " + std::to_string(k));
        out.phi.col(k) = phi;
        out.states.col(k) = C_ref * phi;
    }
    return out;
}

/// Sum over state components of the mean absolute error.
inline double sum_mae(const Mat& truth, const Mat& predicted) {
    if (truth.rows() != predicted.rows() || truth.cols() != predicted.cols())
        throw ConfigError("MAE inputs differ in shape");
    return (truth - predicted).cwiseAbs().rowwise().mean().sum();
}

/// Ridge projection of auxiliary observables Y (q x N) onto [Phi; u]:
/// returns W (q x (n_phi + p)) with Y ~ W [Phi; u].
inline Mat fit_observable_projection(const Mat& phi, const Mat& inputs, const Mat& observables, double ridge) {
    if (phi.cols() != observables.cols() || (inputs.size() && inputs.cols() != phi.cols()))
        throw ConfigError("observable projection inputs differ in length");
    Mat F(phi.rows() + inputs.rows(), phi.cols());
    F.topRows(phi.rows()) = phi;
    if (inputs.rows()) F.bottomRows(inputs.rows()) = inputs;
    return ridge_fit(F, observables, ridge);
}

}  // namespace koopeig
