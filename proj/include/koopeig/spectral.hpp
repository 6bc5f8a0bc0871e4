#pragma once

#include <koopeig/common.hpp>
#include <koopeig/systems.hpp>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <vector>

namespace koopeig {

// ============================================================================
// Eigenvalue sets
// ============================================================================

struct EigenPair {
    double re = 0.0;
    double im = 0.0;  // >= 0; zero means a real eigenvalue with a 1x1 block
    bool fixed = false;
};

/// Ordered eigenvalue pairs. A pair with im > 0 stands for re +- i im and
/// owns a 2x2 block [[re, -im], [im, re]] of Lambda; a real entry owns a 1x1
/// block. Imaginary parts below imag_floor are zeroed on construction.
class EigenvalueSet {
public:
    static constexpr double kDefaultImagFloor = 0.01;

    EigenvalueSet() = default;

    explicit EigenvalueSet(std::vector<EigenPair> pairs, double imag_floor = kDefaultImagFloor)
        : pairs_(std::move(pairs)), imag_floor_(imag_floor) {
        for (auto& p : pairs_) {
            if (!std::isfinite(p.re) || !std::isfinite(p.im)) throw ConfigError("non-finite eigenvalue");
            p.im = std::abs(p.im);
            if (p.im < imag_floor_) p.im = 0.0;
        }
        offsets_.resize(pairs_.size() + 1, 0);
        for (std::size_t i = 0; i < pairs_.size(); ++i) offsets_[i + 1] = offsets_[i] + block_size(i);
    }

    /// Fixed pairs first (verbatim), then free pairs decoded from the flat
    /// encoding (re_1, im_1, re_2, im_2, ...).
    static EigenvalueSet from_free(const std::vector<EigenPair>& fixed, const Vec& free_flat,
                                   double imag_floor = kDefaultImagFloor) {
        if (free_flat.size() % 2 != 0) throw ConfigError("free eigenvalue vector must have even length");
        std::vector<EigenPair> all;
        for (auto p : fixed) {
            p.fixed = true;
            all.push_back(p);
        }
        for (Index i = 0; i < free_flat.size(); i += 2) all.push_back({free_flat(i), free_flat(i + 1), false});
        return EigenvalueSet(std::move(all), imag_floor);
    }

    const std::vector<EigenPair>& pairs() const { return pairs_; }
    std::size_t size() const { return pairs_.size(); }
    double imag_floor() const { return imag_floor_; }

    Index block_size(std::size_t i) const { return pairs_[i].im > 0.0 ? 2 : 1; }
    Index block_offset(std::size_t i) const { return offsets_[i]; }
    Index n_phi() const { return offsets_.empty() ? 0 : offsets_.back(); }

    std::vector<EigenPair> fixed_pairs() const {
        std::vector<EigenPair> out;
        for (const auto& p : pairs_)
            if (p.fixed) out.push_back(p);
        return out;
    }

    Vec free_vector() const {
        std::vector<double> v;
        for (const auto& p : pairs_)
            if (!p.fixed) {
                v.push_back(p.re);
                v.push_back(p.im);
            }
        return Eigen::Map<Vec>(v.data(), static_cast<Index>(v.size()));
    }

    /// Block-diagonal generator Lambda (n_phi x n_phi).
    Mat lambda_matrix() const {
        Mat L = Mat::Zero(n_phi(), n_phi());
        for (std::size_t i = 0; i < pairs_.size(); ++i) {
            const Index o = offsets_[i];
            const auto& p = pairs_[i];
            L(o, o) = p.re;
            if (p.im > 0.0) {
                L(o, o + 1) = -p.im;
                L(o + 1, o) = p.im;
                L(o + 1, o + 1) = p.re;
            }
        }
        return L;
    }

    /// Eigenvalues of Lambda, conjugates included, in block order.
    std::vector<std::complex<double>> spectrum() const {
        std::vector<std::complex<double>> out;
        for (const auto& p : pairs_) {
            out.emplace_back(p.re, p.im);
            if (p.im > 0.0) out.emplace_back(p.re, -p.im);
        }
        return out;
    }

    /// Pair list with an extra real entry prepended.
    EigenvalueSet prepend(EigenPair p) const {
        std::vector<EigenPair> all{p};
        all.insert(all.end(), pairs_.begin(), pairs_.end());
        return EigenvalueSet(std::move(all), imag_floor_);
    }

private:
    std::vector<EigenPair> pairs_;
    std::vector<Index> offsets_{0};
    double imag_floor_ = kDefaultImagFloor;
};

/// e^{Lambda t} for the block-diagonal generator, evaluated block-wise.
inline Mat lambda_exponential(const EigenvalueSet& eigs, double t) {
    Mat out = Mat::Zero(eigs.n_phi(), eigs.n_phi());
    for (std::size_t i = 0; i < eigs.size(); ++i) {
        const auto& p = eigs.pairs()[i];
        const Index o = eigs.block_offset(i);
        const double g = std::exp(p.re * t);
        if (p.im > 0.0) {
            const double c = std::cos(p.im * t), s = std::sin(p.im * t);
            out(o, o) = g * c;
            out(o, o + 1) = -g * s;
            out(o + 1, o) = g * s;
            out(o + 1, o + 1) = g * c;
        } else {
            out(o, o) = g;
        }
    }
    return out;
}

// ============================================================================
// Ridge solves
// ============================================================================

/// Factorization of (A A^T + lambda I) for repeated right-hand sides, where A is
/// k x n with samples along columns. solve(Y) returns (A A^T + lambda I)^{-1} A Y
/// for Y of shape n x r. lambda > 0 uses Cholesky of the Gram matrix with a
/// complete orthogonal decomposition of the augmented system as fallback;
/// lambda == 0 is a least-squares solve that rejects rank deficiency.
class RidgeProjector {
public:
    RidgeProjector(const Mat& A, double lambda) : A_(A), lambda_(lambda) {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("ridge weight must be finite and >= 0");
        if (!A.allFinite()) throw ConditioningError("non-finite basis");
        const Index k = A.rows();
        if (lambda > 0.0) {
            Mat gram = A * A.transpose();
            gram.diagonal().array() += lambda;
            llt_.compute(gram);
            if (llt_.info() == Eigen::Success) {
                use_llt_ = true;
                return;
            }
            Mat aug(A.cols() + k, k);
            aug.topRows(A.cols()) = A.transpose();
            aug.bottomRows(k) = std::sqrt(lambda) * Mat::Identity(k, k);
            cod_.compute(aug);
        } else {
            cod_.setThreshold(1e-13);
            cod_.compute(A.transpose());
            if (cod_.rank() < k) throw ConditioningError("rank-deficient basis with zero ridge weight");
        }
    }

    Mat solve(const Mat& Y) const {
        if (Y.rows() != A_.cols()) throw ConfigError("ridge solve: sample count mismatch");
        if (use_llt_) return llt_.solve(A_ * Y);
        if (lambda_ > 0.0) {
            Mat rhs = Mat::Zero(A_.cols() + A_.rows(), Y.cols());
            rhs.topRows(A_.cols()) = Y;
            return cod_.solve(rhs);
        }
        return cod_.solve(Y);
    }

private:
    Mat A_;
    double lambda_;
    bool use_llt_ = false;
    Eigen::LLT<Mat> llt_;
    Eigen::CompleteOrthogonalDecomposition<Mat> cod_;
};

/// (A A^T + lambda I)^{-1} A Y.
inline Mat ridge_solve(const Mat& A, const Mat& Y, double lambda) { return RidgeProjector(A, lambda).solve(Y); }

/// Ridge fit of targets T (r x n) onto features F (k x n): W (r x k) minimising
/// ||T - W F||^2 + lambda ||W||^2.
inline Mat ridge_fit(const Mat& features, const Mat& targets, double lambda) {
    return ridge_solve(features, targets.transpose(), lambda).transpose();
}

// ============================================================================
// Temporal basis and projection
// ============================================================================

/// Fundamental basis E (n_phi x N) with unit eigenfunction initial conditions.
inline Mat build_fundamental_basis(const EigenvalueSet& eigs, const Vec& t) {
    Mat E(eigs.n_phi(), t.size());
    for (std::size_t i = 0; i < eigs.size(); ++i) {
        const auto& p = eigs.pairs()[i];
        const Index o = eigs.block_offset(i);
        for (Index k = 0; k < t.size(); ++k) {
            const double g = std::exp(p.re * t(k));
            if (p.im > 0.0) {
                const double c = std::cos(p.im * t(k)), s = std::sin(p.im * t(k));
                E(o, k) = g * (c - s);
                E(o + 1, k) = g * (s + c);
            } else {
                E(o, k) = g;
            }
        }
    }
    return E;
}

/// Reference Koopman modes (m x n_phi) and the fit residual ||x_ref - C E||_F.
struct ModeMatrix {
    Mat C_ref;
    double ridge_weight = 0.0;
    double residual = 0.0;
};

inline ModeMatrix fit_reference_modes(const Mat& x_ref, const Mat& E, double ridge) {
    if (x_ref.cols() != E.cols()) throw ConfigError("reference trajectory and basis lengths differ");
    ModeMatrix mm;
    mm.ridge_weight = ridge;
    mm.C_ref = ridge_solve(E, x_ref.transpose(), ridge).transpose();
    mm.residual = (x_ref - mm.C_ref * E).norm();
    return mm;
}

/// Projection basis B (n_phi x m N) in state-major flattening.
inline Mat build_projection_basis(const Mat& C_ref, const EigenvalueSet& eigs, const Vec& t) {
    if (C_ref.cols() != eigs.n_phi()) throw ConfigError("mode matrix column count differs from n_phi");
    const Index m = C_ref.rows(), N = t.size();
    Mat B(eigs.n_phi(), m * N);
    for (std::size_t i = 0; i < eigs.size(); ++i) {
        const auto& p = eigs.pairs()[i];
        const Index o = eigs.block_offset(i);
        for (Index k = 0; k < N; ++k) {
            const double g = std::exp(p.re * t(k));
            if (p.im > 0.0) {
                const double c = g * std::cos(p.im * t(k)), s = g * std::sin(p.im * t(k));
                for (Index r = 0; r < m; ++r) {
                    B(o, r * N + k) = C_ref(r, o) * c + C_ref(r, o + 1) * s;
                    B(o + 1, r * N + k) = -C_ref(r, o) * s + C_ref(r, o + 1) * c;
                }
            } else {
                for (Index r = 0; r < m; ++r) B(o, r * N + k) = C_ref(r, o) * g;
            }
        }
    }
    return B;
}

/// Phi_0 column for one trajectory (m x N).
inline Vec project_trajectory(const Mat& x, const Mat& B, double ridge) {
    return ridge_solve(B, flatten_trajectory(x), ridge).col(0);
}

/// Phi_0 for every column of a flattened data matrix (m N x n_t).
inline Mat project_all(const Mat& flat, const Mat& B, double ridge) { return RidgeProjector(B, ridge).solve(flat); }

/// x(t_k) = C e^{Lambda t_k} Phi_0, returned as m x N.
inline Mat reconstruct(const Mat& C_ref, const EigenvalueSet& eigs, const Vec& phi0, const Vec& t) {
    Mat out(C_ref.rows(), t.size());
    for (Index k = 0; k < t.size(); ++k) out.col(k) = C_ref * (lambda_exponential(eigs, t(k)) * phi0);
    return out;
}

/// Mean of squared residuals x - C e^{Lambda t} Phi_0 over every entry of the
/// selected trajectories. `flat` is the ensemble's flattened data matrix and
/// `phi0` holds one column per ensemble trajectory.
inline double temporal_cost(const Mat& flat, const std::vector<Index>& subgrid, const Mat& B, const Mat& phi0) {
    if (subgrid.empty()) throw ConfigError("empty subgrid");
    double acc = 0.0;
    for (Index i : subgrid) acc += (flat.col(i) - B.transpose() * phi0.col(i)).squaredNorm();
    return acc / static_cast<double>(flat.rows() * static_cast<Index>(subgrid.size()));
}

inline double temporal_cost(const TrajectoryEnsemble& ens, const std::vector<Index>& subgrid, const Mat& C_ref,
                            const EigenvalueSet& eigs, const Mat& phi0) {
    if (subgrid.empty()) throw ConfigError("empty subgrid");
    const Mat B = build_projection_basis(C_ref, eigs, ens.time_axis());
    double acc = 0.0;
    for (Index i : subgrid) acc += (flatten_trajectory(ens.states.at(static_cast<std::size_t>(i))) -
                                    B.transpose() * phi0.col(i))
                                       .squaredNorm();
    return acc / static_cast<double>(ens.state_dim() * ens.n_samples * static_cast<Index>(subgrid.size()));
}

/// Output of the temporal stage of the cost for one candidate spectrum.
struct TemporalFit {
    Mat E;
    ModeMatrix modes;
    Mat B;
    Mat phi0;  // n_phi x n_t
    double j_temp = 0.0;
};

/// E -> C_ref -> B -> Phi_0 for all trajectories -> J_temp on the subgrid.
inline TemporalFit fit_temporal(const TrajectoryEnsemble& ens, const Mat& flat, const std::vector<Index>& subgrid,
                                const EigenvalueSet& eigs, double ridge) {
    TemporalFit f;
    const Vec t = ens.time_axis();
    f.E = build_fundamental_basis(eigs, t);
    f.modes = fit_reference_modes(ens.reference(), f.E, ridge);
    f.B = build_projection_basis(f.modes.C_ref, eigs, t);
    f.phi0 = project_all(flat, f.B, ridge);
    f.j_temp = temporal_cost(flat, subgrid, f.B, f.phi0);
    return f;
}

// ============================================================================
// Limit-cycle frequency
// ============================================================================

/// Fundamental angular frequency from zero crossings of state component
/// `component`: crossing times are linearly interpolated, consecutive crossings
/// after t_skip give half-periods, and the median over the ensemble is used.
inline double estimate_fundamental_frequency(const TrajectoryEnsemble& ens, Index component = 0, double t_skip = 2.0) {
    std::vector<double> half_periods;
    for (const Mat& s : ens.states) {
        double last = -1.0;
        for (Index k = 1; k < s.cols(); ++k) {
            const double a = s(component, k - 1), b = s(component, k);
            if ((a < 0.0) == (b < 0.0) || a == b) continue;
            const double tc = ens.dt * (static_cast<double>(k - 1) + a / (a - b));
            if (tc < t_skip) continue;
            if (last >= 0.0) half_periods.push_back(tc - last);
            last = tc;
        }
    }
    if (half_periods.empty()) throw InsufficientDataError("no repeated zero crossings for a frequency estimate");
    auto mid = half_periods.begin() + static_cast<std::ptrdiff_t>(half_periods.size() / 2);
    std::nth_element(half_periods.begin(), mid, half_periods.end());
    return M_PI / *mid;
}

}  // namespace koopeig
