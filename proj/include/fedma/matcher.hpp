#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <vector>

#include "fedma/perm.hpp"
#include "fedma/rng.hpp"
#include "fedma/tensor.hpp"

namespace fedma {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct MatchError : std::runtime_error {
    explicit MatchError(const std::string& what) : std::runtime_error(what) {}
};

struct CostMatrix {
    std::int64_t rows = 0, cols = 0;
    std::vector<double> c;
    double& at(std::int64_t r, std::int64_t col) { return c[static_cast<std::size_t>(r * cols + col)]; }
    double at(std::int64_t r, std::int64_t col) const { return c[static_cast<std::size_t>(r * cols + col)]; }
};

enum class CostMode { Euclidean, BbpMap };

struct MatchConfig {
    CostMode cost_mode = CostMode::Euclidean;
    double epsilon = 1.0;            // new-neuron threshold (Euclidean mode)
    double size_penalty_slope = 0.1; // kappa: linear growth penalty f(i) = kappa*(i-L)
    double gamma0 = 7.0;             // discovery rate (BBP-MAP mode)
    double sigma0_sq = 1.0;          // prior variance of global weights
    double sigma_sq = 1.0;           // variance of local weights around global
    int passes = 1;
    std::uint64_t client_order_seed = 0;
};

struct MatchStats {
    std::uint64_t cost_build_ops = 0;  // entries*dim work in cost construction
    std::uint64_t hungarian_calls = 0;
};

// Growing global-layer state: per atom a running sum and contributor count.
// theta is the cost-mode-specific center (arithmetic mean for Euclidean,
// Gaussian posterior mean for BBP-MAP).
struct GlobalAtoms {
    std::int64_t dim = 0;
    std::int64_t size = 0;
    std::vector<double> theta;
    std::vector<double> sums;
    std::vector<std::int64_t> counts;

    double* theta_row(std::int64_t i) { return theta.data() + i * dim; }
    const double* theta_row(std::int64_t i) const { return theta.data() + i * dim; }
    double* sum_row(std::int64_t i) { return sums.data() + i * dim; }
    const double* sum_row(std::int64_t i) const { return sums.data() + i * dim; }

    // arithmetic contributor mean, used for the final averaged weights
    std::vector<double> mean_row(std::int64_t i) const {
        std::vector<double> m(static_cast<std::size_t>(dim));
        for (std::int64_t d = 0; d < dim; ++d)
            m[static_cast<std::size_t>(d)] = sum_row(i)[d] / static_cast<double>(counts[static_cast<std::size_t>(i)]);
        return m;
    }
};

namespace detail {

inline double posterior_variance(std::int64_t n, const MatchConfig& cfg) {
    return 1.0 / (1.0 / cfg.sigma0_sq + static_cast<double>(n) / cfg.sigma_sq);
}

inline void refresh_theta(GlobalAtoms& atoms, std::int64_t i, const MatchConfig& cfg) {
    const auto n = atoms.counts[static_cast<std::size_t>(i)];
    if (cfg.cost_mode == CostMode::Euclidean) {
        for (std::int64_t d = 0; d < atoms.dim; ++d)
            atoms.theta_row(i)[d] = atoms.sum_row(i)[d] / static_cast<double>(n);
    } else {
        const double v = posterior_variance(n, cfg);
        for (std::int64_t d = 0; d < atoms.dim; ++d)
            atoms.theta_row(i)[d] = v * atoms.sum_row(i)[d] / cfg.sigma_sq;
    }
}

}  // namespace detail

// Rectangular minimum-cost assignment (rows <= cols) via shortest augmenting
// paths with potentials. Ties resolve toward lower column indices.
struct HungarianResult {
    std::vector<std::int64_t> assignment;  // per row, assigned column
    double total_cost = 0.0;
};

inline HungarianResult hungarian_solve(const CostMatrix& cm) {
    const std::int64_t n = cm.rows, m = cm.cols;
    if (n > m) throw MatchError("hungarian_solve: more rows than columns");
    if (n == 0) return {};
    for (double v : cm.c)
        if (!std::isfinite(v)) throw MatchError("hungarian_solve: non-finite cost entry");

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
    std::vector<std::int64_t> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
    for (std::int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::int64_t j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const std::int64_t i0 = p[static_cast<std::size_t>(j0)];
            std::int64_t j1 = -1;
            double delta = inf;
            for (std::int64_t j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cm.at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (std::int64_t j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    HungarianResult res;
    res.assignment.assign(static_cast<std::size_t>(n), -1);
    for (std::int64_t j = 1; j <= m; ++j)
        if (p[static_cast<std::size_t>(j)] != 0)
            res.assignment[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    for (std::int64_t i = 0; i < n; ++i) res.total_cost += cm.at(i, res.assignment[static_cast<std::size_t>(i)]);
    return res;
}

namespace detail {

inline double new_atom_cost(const NeuronBundle& b, std::int64_t l, std::int64_t new_index,
                            const MatchConfig& cfg, std::int64_t client_count) {
    if (cfg.cost_mode == CostMode::Euclidean)
        return cfg.epsilon + cfg.size_penalty_slope * static_cast<double>(new_index + 1);
    const double var = cfg.sigma0_sq + cfg.sigma_sq;
    double sq = 0.0;
    const double* w = b.row(l);
    for (std::int64_t d = 0; d < b.dim; ++d) sq += w[d] * w[d];
    return sq / (2.0 * var) + 0.5 * static_cast<double>(b.dim) * std::log(var) -
           std::log(cfg.gamma0 / static_cast<double>(client_count));
}

}  // namespace detail

// Extended cost of the maximum bipartite matching formulation: L existing-atom
// columns, then L_j' "create a new neuron" columns priced by threshold + size
// penalty (Euclidean) or by the prior predictive with the IBP discovery term
// (BBP-MAP, with a rich-get-richer -log n_i bonus on existing atoms).
inline CostMatrix build_extended_cost(const NeuronBundle& bundle, const GlobalAtoms& atoms,
                                      const MatchConfig& cfg, std::int64_t client_count = 1,
                                      MatchStats* stats = nullptr) {
    if (atoms.size > 0 && atoms.dim != bundle.dim)
        throw MatchError("build_extended_cost: neuron dimension mismatch (" +
                         std::to_string(bundle.dim) + " vs " + std::to_string(atoms.dim) + ")");
    const std::int64_t L = atoms.size, R = bundle.rows, D = bundle.dim;
    CostMatrix cm;
    cm.rows = R;
    cm.cols = L + R;
    cm.c.assign(static_cast<std::size_t>(cm.rows * cm.cols), 0.0);
    if (stats) stats->cost_build_ops += static_cast<std::uint64_t>(R) * static_cast<std::uint64_t>(cm.cols) *
                                        static_cast<std::uint64_t>(D);

    if (L > 0) {
        // squared distances via |w|^2 + |t|^2 - 2 w.t
        ECMap W(bundle.vectors.data(), R, D);
        Eigen::VectorXd wsq = W.rowwise().squaredNorm();
        if (cfg.cost_mode == CostMode::Euclidean) {
            ECMap T(atoms.theta.data(), L, D);
            Eigen::VectorXd tsq = T.rowwise().squaredNorm();
            EMat prod = W * T.transpose();
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t i = 0; i < L; ++i)
                    cm.at(r, i) = std::max(0.0, wsq(r) + tsq(i) - 2.0 * prod(r, i));
        } else {
            // posterior means and predictive scaling per atom
            EMat M(L, D);
            std::vector<double> a(static_cast<std::size_t>(L)), b0(static_cast<std::size_t>(L));
            for (std::int64_t i = 0; i < L; ++i) {
                const double v = detail::posterior_variance(atoms.counts[static_cast<std::size_t>(i)], cfg);
                for (std::int64_t d = 0; d < D; ++d)
                    M(i, d) = v * atoms.sum_row(i)[d] / cfg.sigma_sq;
                const double pv = v + cfg.sigma_sq;
                a[static_cast<std::size_t>(i)] = 1.0 / (2.0 * pv);
                b0[static_cast<std::size_t>(i)] = 0.5 * static_cast<double>(D) * std::log(pv) -
                                                  std::log(static_cast<double>(atoms.counts[static_cast<std::size_t>(i)]));
            }
            Eigen::VectorXd msq = M.rowwise().squaredNorm();
            EMat prod = W * M.transpose();
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t i = 0; i < L; ++i) {
                    const double sq = std::max(0.0, wsq(r) + msq(i) - 2.0 * prod(r, i));
                    cm.at(r, i) = a[static_cast<std::size_t>(i)] * sq + b0[static_cast<std::size_t>(i)];
                }
        }
    }
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t j = 0; j < R; ++j)
            cm.at(r, L + j) = detail::new_atom_cost(bundle, r, j, cfg, client_count);
    return cm;
}

// Matches one client into the growing global model, updating atoms in place.
// Unmatched "new" columns are compacted away so atom ids stay dense; existing
// atom ids never move within a pass. Returns the assignment and its cost.
inline std::pair<AssignmentMatrix, double> match_client(GlobalAtoms& atoms, const NeuronBundle& bundle,
                                                        const MatchConfig& cfg,
                                                        std::int64_t client_count = 1,
                                                        MatchStats* stats = nullptr) {
    AssignmentMatrix asg;
    asg.local_size = bundle.rows;

    if (atoms.size == 0) {
        // base case: every neuron founds its own atom, in order
        atoms.dim = bundle.dim;
        atoms.size = bundle.rows;
        atoms.sums.assign(bundle.vectors.begin(), bundle.vectors.end());
        atoms.theta.assign(static_cast<std::size_t>(atoms.size * atoms.dim), 0.0);
        atoms.counts.assign(static_cast<std::size_t>(atoms.size), 1);
        for (std::int64_t i = 0; i < atoms.size; ++i) detail::refresh_theta(atoms, i, cfg);
        asg.global_size = bundle.rows;
        asg.map.resize(static_cast<std::size_t>(bundle.rows));
        double cost = 0.0;
        for (std::int64_t l = 0; l < bundle.rows; ++l) {
            asg.map[static_cast<std::size_t>(l)] = l;
            cost += detail::new_atom_cost(bundle, l, l, cfg, client_count);
        }
        return {asg, cost};
    }

    const std::int64_t L = atoms.size;
    CostMatrix cm = build_extended_cost(bundle, atoms, cfg, client_count, stats);
    if (stats) ++stats->hungarian_calls;
    HungarianResult hr = hungarian_solve(cm);

    // order new atoms by their assigned column so ids are deterministic
    std::vector<std::pair<std::int64_t, std::int64_t>> new_cols;  // (col, row)
    for (std::int64_t l = 0; l < bundle.rows; ++l)
        if (hr.assignment[static_cast<std::size_t>(l)] >= L)
            new_cols.emplace_back(hr.assignment[static_cast<std::size_t>(l)], l);
    std::sort(new_cols.begin(), new_cols.end());

    const std::int64_t L_new = L + static_cast<std::int64_t>(new_cols.size());
    atoms.sums.resize(static_cast<std::size_t>(L_new * atoms.dim), 0.0);
    atoms.theta.resize(static_cast<std::size_t>(L_new * atoms.dim), 0.0);
    atoms.counts.resize(static_cast<std::size_t>(L_new), 0);

    asg.global_size = L_new;
    asg.map.assign(static_cast<std::size_t>(bundle.rows), -1);
    for (std::int64_t l = 0; l < bundle.rows; ++l) {
        const std::int64_t col = hr.assignment[static_cast<std::size_t>(l)];
        if (col < L) asg.map[static_cast<std::size_t>(l)] = col;
    }
    for (std::size_t k = 0; k < new_cols.size(); ++k)
        asg.map[static_cast<std::size_t>(new_cols[k].second)] = L + static_cast<std::int64_t>(k);

    atoms.size = L_new;
    for (std::int64_t l = 0; l < bundle.rows; ++l) {
        const std::int64_t i = asg.map[static_cast<std::size_t>(l)];
        const double* w = bundle.row(l);
        for (std::int64_t d = 0; d < atoms.dim; ++d) atoms.sum_row(i)[d] += w[d];
        ++atoms.counts[static_cast<std::size_t>(i)];
        detail::refresh_theta(atoms, i, cfg);
    }
    return {asg, hr.total_cost};
}

// The matching objective at the current atoms: squared distances in Euclidean
// mode, posterior-predictive cost in BBP-MAP mode.
inline double objective_value(const GlobalAtoms& atoms, const std::vector<AssignmentMatrix>& assignments,
                              const std::vector<NeuronBundle>& bundles, const MatchConfig& cfg) {
    double total = 0.0;
    for (std::size_t j = 0; j < bundles.size(); ++j) {
        const NeuronBundle& b = bundles[j];
        for (std::int64_t l = 0; l < b.rows; ++l) {
            const std::int64_t i = assignments[j].map[static_cast<std::size_t>(l)];
            const double* w = b.row(l);
            double sq = 0.0;
            if (cfg.cost_mode == CostMode::Euclidean) {
                const double* t = atoms.theta_row(i);
                for (std::int64_t d = 0; d < b.dim; ++d) sq += (w[d] - t[d]) * (w[d] - t[d]);
                total += sq;
            } else {
                const double v = detail::posterior_variance(atoms.counts[static_cast<std::size_t>(i)], cfg);
                const double pv = v + cfg.sigma_sq;
                const double* t = atoms.theta_row(i);
                for (std::int64_t d = 0; d < b.dim; ++d) sq += (w[d] - t[d]) * (w[d] - t[d]);
                total += sq / (2.0 * pv) + 0.5 * static_cast<double>(b.dim) * std::log(pv) -
                         std::log(static_cast<double>(atoms.counts[static_cast<std::size_t>(i)]));
            }
        }
    }
    return total;
}

struct MatchResult {
    GlobalAtoms atoms;
    std::vector<AssignmentMatrix> assignments;  // per client, into the final atom space
    MatchStats stats;
    std::vector<double> objective_per_pass;
};

namespace detail {

// Removes client j's contribution; atoms emptied by the removal are compacted
// out and every stored assignment is renumbered accordingly.
inline void remove_client(GlobalAtoms& atoms, std::vector<AssignmentMatrix>& assignments,
                          const std::vector<NeuronBundle>& bundles, std::size_t j,
                          const MatchConfig& cfg) {
    const NeuronBundle& b = bundles[j];
    AssignmentMatrix& asg = assignments[j];
    for (std::int64_t l = 0; l < b.rows; ++l) {
        const std::int64_t i = asg.map[static_cast<std::size_t>(l)];
        const double* w = b.row(l);
        for (std::int64_t d = 0; d < atoms.dim; ++d) atoms.sum_row(i)[d] -= w[d];
        --atoms.counts[static_cast<std::size_t>(i)];
    }
    asg.map.clear();
    asg.local_size = 0;

    std::vector<std::int64_t> remap(static_cast<std::size_t>(atoms.size), -1);
    std::int64_t next = 0;
    for (std::int64_t i = 0; i < atoms.size; ++i) {
        if (atoms.counts[static_cast<std::size_t>(i)] == 0) continue;
        remap[static_cast<std::size_t>(i)] = next;
        if (next != i) {
            std::copy(atoms.sum_row(i), atoms.sum_row(i) + atoms.dim, atoms.sum_row(next));
            atoms.counts[static_cast<std::size_t>(next)] = atoms.counts[static_cast<std::size_t>(i)];
        }
        ++next;
    }
    atoms.size = next;
    atoms.sums.resize(static_cast<std::size_t>(next * atoms.dim));
    atoms.theta.assign(static_cast<std::size_t>(next * atoms.dim), 0.0);
    atoms.counts.resize(static_cast<std::size_t>(next));
    for (std::int64_t i = 0; i < next; ++i) refresh_theta(atoms, i, cfg);

    for (auto& a : assignments) {
        a.global_size = next;
        for (auto& g : a.map) g = remap[static_cast<std::size_t>(g)];
    }
}

}  // namespace detail

// Iterative matched averaging: clients are matched one at a time in a seeded
// order; later passes re-match each client against the model built from the
// others. Re-sweeps in Euclidean mode keep a re-match only if it does not
// increase the squared-distance objective, so the objective is non-increasing
// across passes.
inline MatchResult matched_average(const std::vector<NeuronBundle>& bundles, const MatchConfig& cfg) {
    if (bundles.empty()) throw MatchError("matched_average: no clients");
    const std::int64_t J = static_cast<std::int64_t>(bundles.size());
    for (const auto& b : bundles)
        if (b.dim != bundles[0].dim) throw MatchError("matched_average: inconsistent neuron dims");

    std::vector<std::size_t> order(bundles.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.client_order_seed);
    rng.shuffle(order);

    MatchResult res;
    res.assignments.assign(bundles.size(), {});
    for (std::size_t j : order) {
        auto [asg, cost] = match_client(res.atoms, bundles[j], cfg, J, &res.stats);
        res.assignments[j] = asg;
    }
    for (auto& a : res.assignments) a.global_size = res.atoms.size;
    res.objective_per_pass.push_back(objective_value(res.atoms, res.assignments, bundles, cfg));

    for (int pass = 1; pass < cfg.passes; ++pass) {
        for (std::size_t j : order) {
            const GlobalAtoms atoms_before = res.atoms;
            const std::vector<AssignmentMatrix> asg_before = res.assignments;
            const double obj_before =
                cfg.cost_mode == CostMode::Euclidean
                    ? objective_value(res.atoms, res.assignments, bundles, cfg)
                    : 0.0;

            detail::remove_client(res.atoms, res.assignments, bundles, j, cfg);
            auto [asg, cost] = match_client(res.atoms, bundles[j], cfg, J, &res.stats);
            res.assignments[j] = asg;
            for (auto& a : res.assignments) a.global_size = res.atoms.size;

            if (cfg.cost_mode == CostMode::Euclidean) {
                const double obj_after = objective_value(res.atoms, res.assignments, bundles, cfg);
                if (obj_after > obj_before + 1e-12 * (1.0 + std::fabs(obj_before))) {
                    res.atoms = atoms_before;
                    res.assignments = asg_before;
                }
            }
        }
        res.objective_per_pass.push_back(objective_value(res.atoms, res.assignments, bundles, cfg));
    }
    return res;
}

// Turns matched atoms back into layer tensors. Every global slot is the plain
// mean of its actual contributors; dummy slots never enter a denominator. The
// appended bias coordinate is split back out.
inline std::vector<Tensor> average_layer(const GlobalAtoms& atoms,
                                         const std::vector<AssignmentMatrix>& assignments,
                                         const std::vector<NeuronBundle>& bundles) {
    if (bundles.empty()) throw MatchError("average_layer: no bundles");
    const NeuronBundle& meta = bundles[0];
    const std::int64_t Lp = atoms.size;
    for (auto c : atoms.counts)
        if (c < 1) throw MatchError("average_layer: zero-contributor slot");

    std::vector<std::vector<double>> mean(static_cast<std::size_t>(Lp));
    for (std::int64_t i = 0; i < Lp; ++i) mean[static_cast<std::size_t>(i)] = atoms.mean_row(i);

    switch (meta.kind) {
        case LayerKind::FullyConnected: {
            const std::int64_t in = meta.in_groups * meta.block;
            Tensor w({in, Lp}), b({Lp});
            for (std::int64_t i = 0; i < Lp; ++i) {
                for (std::int64_t r = 0; r < in; ++r) w.at2(r, i) = mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)];
                b[static_cast<std::size_t>(i)] = mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(in)];
            }
            return {std::move(w), std::move(b)};
        }
        case LayerKind::Conv2d: {
            const std::int64_t khw = meta.kh * meta.kw;
            Tensor w({meta.in_groups, meta.kh, meta.kw, Lp}), b({Lp});
            for (std::int64_t i = 0; i < Lp; ++i) {
                for (std::int64_t ck = 0; ck < meta.in_groups * khw; ++ck)
                    w.data[static_cast<std::size_t>(ck * Lp + i)] = mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(ck)];
                b[static_cast<std::size_t>(i)] = mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(meta.in_groups * khw)];
            }
            return {std::move(w), std::move(b)};
        }
        case LayerKind::Lstm: {
            const std::int64_t S = meta.gates, G = meta.in_groups;
            Tensor wih({S * Lp, G}), bih({S * Lp});
            for (std::int64_t i = 0; i < Lp; ++i)
                for (std::int64_t gate = 0; gate < S; ++gate) {
                    for (std::int64_t d = 0; d < G; ++d)
                        wih.at2(gate * Lp + i, d) = mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(gate * G + d)];
                    bih[static_cast<std::size_t>(gate * Lp + i)] =
                        mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(S * G + gate)];
                }
            return {std::move(wih), std::move(bih)};
        }
        case LayerKind::Embedding: {
            Tensor w({meta.in_groups, Lp});
            for (std::int64_t i = 0; i < Lp; ++i)
                for (std::int64_t v = 0; v < meta.in_groups; ++v)
                    w.at2(v, i) = mean[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)];
            return {std::move(w)};
        }
        default:
            throw MatchError("average_layer: unsupported layer kind");
    }
}

// Debug dump: one row per matched neuron with its cost against the final atoms.
inline void dump_assignments_csv(std::ostream& os, const GlobalAtoms& atoms,
                                 const std::vector<AssignmentMatrix>& assignments,
                                 const std::vector<NeuronBundle>& bundles, const MatchConfig& cfg) {
    os << "client,local_index,global_index,cost\n";
    for (std::size_t j = 0; j < bundles.size(); ++j) {
        const NeuronBundle& b = bundles[j];
        for (std::int64_t l = 0; l < b.rows; ++l) {
            const std::int64_t i = assignments[j].map[static_cast<std::size_t>(l)];
            const double* w = b.row(l);
            const double* t = atoms.theta_row(i);
            double sq = 0.0;
            for (std::int64_t d = 0; d < b.dim; ++d) sq += (w[d] - t[d]) * (w[d] - t[d]);
            double cost = sq;
            if (cfg.cost_mode == CostMode::BbpMap) {
                const double pv = detail::posterior_variance(atoms.counts[static_cast<std::size_t>(i)], cfg) + cfg.sigma_sq;
                cost = sq / (2.0 * pv) + 0.5 * static_cast<double>(b.dim) * std::log(pv) -
                       std::log(static_cast<double>(atoms.counts[static_cast<std::size_t>(i)]));
            }
            os << (b.client >= 0 ? b.client : static_cast<std::int64_t>(j)) << "," << l << "," << i
               << "," << cost << "\n";
        }
    }
}

}  // namespace fedma
