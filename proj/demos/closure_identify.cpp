// Identifies the missing eigenvalue of the closure system from trajectory data
// and compares the eigenfunction samples with the analytic x1^2.

#include <koopeig/koopeig.hpp>

#include <cstdio>

using namespace koopeig;

int main() {
    const SimGrid grid = SimGrid::square(-1.0, 1.0, 11);
    Vec ref(2);
    ref << -1.0, -1.0;
    const DynSystem sys = closure_system(-0.1, -1.0);
    const auto ens = simulate_ensemble(sys, grid, 0.2, 150, ref);

    SearchSpace sp;
    sp.fixed = {{-0.1, 0.0}, {-1.0, 0.0}};
    sp.n_free_pairs = 1;
    sp.re_min = -1.0;
    sp.re_max = -0.15;
    sp.im_max = 0.5;
    CostConfig cc;
    cc.gamma = 1e-4;
    const CostEvaluator ev(sys, ens, grid, SimGrid::square(-1.0, 1.0, 40), cc, sp);

    IdentificationSettings is;
    is.pso.population = 20;
    is.pso.generations = 30;
    is.nm.max_iter = 300;
    const auto res = identify_eigenvalues(ev, is);

    std::printf("eigenvalues:");
    for (const auto& p : res.eigs.pairs()) std::printf("  %.4f%+.4fi", p.re, p.im);
    std::printf("\nJ_temp = %.3g  J_KPDE = %.3g\n", res.cost.j_temp, res.cost.j_kpde);

    const auto d = ev.detail(res.eigs);
    const Index r = *grid.find_node(ref);
    double worst = 0.0;
    for (Index row = 0; row < d.fit.phi0.rows(); ++row) {
        double err = 0.0;
        for (Index k = 0; k < grid.size(); ++k) {
            const double x1 = grid.node(k)(0);
            err = std::max(err, std::abs(d.fit.phi0(row, k) / d.fit.phi0(row, r) - x1 * x1));
        }
        if (row == 0 || err < worst) worst = err;
    }
    std::printf("closest row to x1^2: max error %.3g\n", worst);
}
