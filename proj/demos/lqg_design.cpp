// LQR and Kalman gains for a lightly damped oscillator, with the CARE residual
// and the closed-loop spectra.

#include <koopeig/control.hpp>

#include <cstdio>
#include <iostream>

using namespace koopeig;

int main() {
    Mat A(2, 2), B(2, 1), C(1, 2);
    A << 0.0, 1.0, -1.0, -0.1;
    B << 0.0, 1.0;
    C << 1.0, 0.0;
    const RiccatiProblem lqr{A, B, Mat::Identity(2, 2), Mat::Identity(1, 1)};
    const auto s = solve_care(lqr);
    std::cout << "K = " << s.K << "\n";
    std::printf("CARE residual %.2e, max Re(A - BK) = %.4f\n", care_residual(lqr, s.P).norm(), max_real_part(A - B * s.K));

    const Mat L = design_kalman(A, C, 0.1 * Mat::Identity(2, 2), 0.01 * Mat::Identity(1, 1));
    std::cout << "L = " << L.transpose() << "\n";
    std::printf("max Re(A - LC) = %.4f\n", max_real_part(A - L * C));
}
