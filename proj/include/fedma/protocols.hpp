#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "fedma/dataset.hpp"
#include "fedma/matcher.hpp"
#include "fedma/nn.hpp"
#include "fedma/perm.hpp"

namespace fedma {

struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

struct ClientState {
    std::int64_t id = 0;
    NetworkModel model;
    Dataset data;
    std::vector<std::int64_t> class_counts;
    std::int64_t data_size = 0;
};

inline ClientState make_client(std::int64_t id, NetworkModel model, Dataset data) {
    ClientState c;
    c.id = id;
    c.model = std::move(model);
    c.data = std::move(data);
    c.class_counts = c.data.class_histogram();
    c.data_size = c.data.size();
    return c;
}

struct RoundReport {
    std::int64_t round = 0;
    std::string strategy;
    double accuracy = 0.0;
    std::int64_t bytes_up = 0;
    std::int64_t bytes_down = 0;
    std::int64_t global_params = 0;
    double growth_rate = 1.0;
};

inline void write_reports_csv(std::ostream& os, const std::vector<RoundReport>& reports) {
    os << "round,strategy,accuracy,bytes_up,bytes_down,global_params,growth_rate\n";
    char buf[64];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, "%.17g", r.accuracy);
        os << r.round << "," << r.strategy << "," << buf << "," << r.bytes_up << ","
           << r.bytes_down << "," << r.global_params << ",";
        std::snprintf(buf, sizeof buf, "%.17g", r.growth_rate);
        os << buf << "\n";
    }
}

// 8 bytes per 64-bit parameter, no framing overhead
inline std::int64_t account_message(const NetworkModel& m) { return 8 * m.param_count(); }
inline std::int64_t account_message(const std::vector<Tensor>& layer) {
    std::int64_t n = 0;
    for (const auto& t : layer) n += t.numel();
    return 8 * n;
}

// Runs fn(0..count) with at most `threads` workers; each call is independent,
// so the result does not depend on the thread count.
inline void for_each_client(std::size_t count, int threads,
                            const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t next = 0;
    while (next < count) {
        const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(threads), count - next);
        pool.clear();
        for (std::size_t k = 0; k < batch; ++k) pool.emplace_back(fn, next + k);
        for (auto& t : pool) t.join();
        next += batch;
    }
}

// ---- element-wise strategies -------------------------------------------

// element-wise mean with weights proportional to client dataset sizes
inline NetworkModel weighted_model_average(const std::vector<ClientState>& clients) {
    if (clients.empty()) throw ProtocolError("no clients to average");
    double total = 0.0;
    for (const auto& c : clients) total += static_cast<double>(c.data_size);
    if (total <= 0.0) throw ProtocolError("clients hold no data");
    NetworkModel g = clients[0].model;
    for (auto& lw : g.weights)
        for (auto& t : lw) std::fill(t.data.begin(), t.data.end(), 0.0);
    for (const auto& c : clients) {
        const double w = static_cast<double>(c.data_size) / total;
        for (std::size_t i = 0; i < g.weights.size(); ++i)
            for (std::size_t t = 0; t < g.weights[i].size(); ++t) {
                if (!c.model.weights[i][t].same_shape(g.weights[i][t]))
                    throw ProtocolError("weighted average requires equal layer widths");
                for (std::size_t k = 0; k < g.weights[i][t].data.size(); ++k)
                    g.weights[i][t].data[k] += w * c.model.weights[i][t].data[k];
            }
    }
    return g;
}

// One FedAvg round: clients resume from the received global model (when one
// exists), train E local epochs, and the center averages element-wise.
inline NetworkModel fedavg_round(std::vector<ClientState>& clients, const NetworkModel* global,
                                 const SgdConfig& cfg, int threads = 1) {
    for_each_client(clients.size(), threads, [&](std::size_t j) {
        SgdConfig local = cfg;
        local.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(clients[j].id));
        local.prox_mu = 0.0;
        const NetworkModel& start = global ? *global : clients[j].model;
        clients[j].model = train_local(start, clients[j].data, local, 0, nullptr);
    });
    return weighted_model_average(clients);
}

// FedProx round: identical except the local cost anchors to the global model.
inline NetworkModel fedprox_round(std::vector<ClientState>& clients, const NetworkModel* global,
                                  double mu, const SgdConfig& cfg, int threads = 1) {
    for_each_client(clients.size(), threads, [&](std::size_t j) {
        SgdConfig local = cfg;
        local.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(clients[j].id));
        const bool prox = mu > 0.0 && global != nullptr;
        local.prox_mu = prox ? mu : 0.0;
        const NetworkModel& start = global ? *global : clients[j].model;
        clients[j].model = train_local(start, clients[j].data, local, 0, prox ? global : nullptr);
    });
    return weighted_model_average(clients);
}

// Uniform average of per-client class probabilities, then argmax.
inline double ensemble_eval(const std::vector<ClientState>& clients, const Dataset& ds) {
    if (clients.empty()) throw ProtocolError("ensemble of zero clients");
    if (ds.size() == 0) throw DataError("ensemble_eval on empty dataset");
    Tensor mean;
    for (const auto& c : clients) {
        Tensor out = forward(c.model, ds.features);
        const std::int64_t classes = out.shape.back();
        if (c.model.layers.back().act != Activation::Softmax) {
            Tensor probs = out;
            detail::apply_activation(Activation::Softmax, probs);
            out = std::move(probs);
        }
        if (mean.numel() == 0) mean = Tensor({ds.size(), classes});
        for (std::size_t k = 0; k < out.data.size(); ++k)
            mean.data[k] += out.data[k] / static_cast<double>(clients.size());
    }
    const std::int64_t classes = mean.shape[1];
    std::int64_t correct = 0;
    for (std::int64_t r = 0; r < ds.size(); ++r)
        if (argmax_row(mean.data.data() + r * classes, classes) == ds.labels[static_cast<std::size_t>(r)])
            ++correct;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---- FedMA ----------------------------------------------------------------

// Last layer: per-class weighted averaging by the clients' class proportions.
// Classes nobody holds fall back to a uniform 1/J blend.
inline std::vector<Tensor> weighted_last_layer(const std::vector<ClientState>& clients,
                                               std::size_t weighted_idx) {
    const std::size_t li = clients[0].model.weighted_index(weighted_idx);
    const LayerSpec& s = clients[0].model.layers[li];
    if (s.kind != LayerKind::FullyConnected)
        throw ProtocolError("weighted_last_layer expects a fully connected output layer");
    const std::int64_t K = s.out, in = s.in;
    const std::size_t J = clients.size();
    for (const auto& c : clients)
        if (c.model.layers[c.model.weighted_index(weighted_idx)].in != in)
            throw ProtocolError("weighted_last_layer: input widths differ across clients");

    Tensor w({in, K}), b({K});
    for (std::int64_t k = 0; k < K; ++k) {
        double denom = 0.0;
        for (const auto& c : clients) denom += static_cast<double>(c.class_counts[static_cast<std::size_t>(k)]);
        for (std::size_t j = 0; j < J; ++j) {
            const double p = denom > 0.0
                                 ? static_cast<double>(clients[j].class_counts[static_cast<std::size_t>(k)]) / denom
                                 : 1.0 / static_cast<double>(J);
            const auto& cw = clients[j].model.weights[li];
            for (std::int64_t r = 0; r < in; ++r) w.at2(r, k) += p * cw[0].at2(r, k);
            b[static_cast<std::size_t>(k)] += p * cw[1][static_cast<std::size_t>(k)];
        }
    }
    return {std::move(w), std::move(b)};
}

struct FedmaPassResult {
    NetworkModel global;
    std::vector<RoundReport> reports;
    // per weighted layer, per client: local-to-global assignment
    std::vector<std::vector<AssignmentMatrix>> assignments;
    MatchStats stats;
};

// One FedMA pass (Algorithm 1): N communication rounds, one per weighted
// layer. Each round matches one layer across clients, broadcasts the averaged
// global layer, permutes the next layer's inputs into the global space and
// retrains the unfrozen suffix. The last layer uses class-weighted averaging.
// sgd.epochs == 0 skips the retraining steps (pure matching).
inline FedmaPassResult fedma_pass(std::vector<ClientState>& clients, const MatchConfig& match_cfg,
                                  const SgdConfig& sgd, const Dataset* test = nullptr,
                                  std::int64_t round_offset = 0, bool eval_rounds = true,
                                  int threads = 1) {
    if (clients.empty()) throw ProtocolError("fedma_pass: no clients");
    for (const auto& c : clients)
        if (!c.model.same_architecture(clients[0].model))
            throw ProtocolError("fedma_pass: clients disagree on architecture");
    const std::size_t N = clients[0].model.weighted_count();
    const std::size_t J = clients.size();

    FedmaPassResult res;
    res.assignments.assign(N, {});

    // original per-layer parameter counts, for the growth rate
    std::vector<std::int64_t> orig_layer_params(N, 0);
    for (std::size_t n = 0; n < N; ++n)
        orig_layer_params[n] = clients[0].model.layer_param_count(clients[0].model.weighted_index(n));

    std::int64_t cum_global = 0, cum_orig = 0;

    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t li = clients[0].model.weighted_index(n);
        const LayerKind kind = clients[0].model.layers[li].kind;

        std::int64_t bytes_up = 0;
        for (const auto& c : clients)
            bytes_up += 8 * c.model.layer_param_count(c.model.weighted_index(n));

        std::vector<Tensor> global_layer;
        if (n + 1 < N) {
            std::vector<NeuronBundle> bundles;
            bundles.reserve(J);
            for (std::size_t j = 0; j < J; ++j) {
                const NetworkModel& m = clients[j].model;
                NeuronBundle b = extract_neurons(
                    m, n, AssignmentMatrix::identity(detail::input_groups(m, n)));
                b.client = clients[j].id;
                bundles.push_back(std::move(b));
            }
            MatchResult mr = matched_average(bundles, match_cfg);
            res.stats.cost_build_ops += mr.stats.cost_build_ops;
            res.stats.hungarian_calls += mr.stats.hungarian_calls;
            res.assignments[n] = mr.assignments;

            global_layer = average_layer(mr.atoms, mr.assignments, bundles);
            if (kind == LayerKind::Lstm) {
                std::vector<const Tensor*> hs, bhs;
                for (const auto& c : clients) {
                    hs.push_back(&c.model.weights[c.model.weighted_index(n)][1]);
                    bhs.push_back(&c.model.weights[c.model.weighted_index(n)][3]);
                }
                const std::int64_t S = clients[0].model.layers[li].gates;
                Tensor whh = conjugate_average_hidden(hs, mr.assignments, S, mr.atoms.size);
                Tensor bhh = slotwise_average(bhs, mr.assignments, S, mr.atoms.size);
                global_layer = {std::move(global_layer[0]), std::move(whh),
                                std::move(global_layer[1]), std::move(bhh)};
            }

            // broadcast: reorder each client into the global slot space, install
            // the matched layer, permute next-layer inputs, retrain the suffix
            for (std::size_t j = 0; j < J; ++j) {
                clients[j].model = apply_perm_out(clients[j].model, n, mr.assignments[j]);
                clients[j].model.weights[clients[j].model.weighted_index(n)] = global_layer;
                clients[j].model = apply_perm_in(clients[j].model, n + 1, mr.assignments[j]);
            }
            if (sgd.epochs > 0) {
                for_each_client(J, threads, [&](std::size_t j) {
                    SgdConfig local = sgd;
                    local.seed = derive_seed(sgd.seed, 0x9100 + static_cast<std::uint64_t>(clients[j].id) * 31 +
                                                            static_cast<std::uint64_t>(n));
                    clients[j].model = train_local(clients[j].model, clients[j].data, local,
                                                   static_cast<int>(n) + 1, nullptr);
                });
            }
        } else {
            global_layer = weighted_last_layer(clients, n);
            for (std::size_t j = 0; j < J; ++j)
                clients[j].model.weights[clients[j].model.weighted_index(n)] = global_layer;
            // class outputs are never permuted
            const std::int64_t K = clients[0].model.layers[li].out;
            res.assignments[n].assign(J, AssignmentMatrix::identity(K));
        }

        std::int64_t layer_params = 0;
        for (const auto& t : global_layer) layer_params += t.numel();
        cum_global += layer_params;
        cum_orig += orig_layer_params[n];
        const std::int64_t bytes_down = static_cast<std::int64_t>(J) * 8 * layer_params;

        RoundReport rep;
        rep.round = round_offset + static_cast<std::int64_t>(n) + 1;
        rep.strategy = "fedma";
        rep.bytes_up = bytes_up;
        rep.bytes_down = bytes_down;
        rep.global_params = cum_global;
        rep.growth_rate = static_cast<double>(cum_global) / static_cast<double>(cum_orig);
        if (eval_rounds && test) {
            if (n + 1 < N) {
                double acc = 0.0;
                for (const auto& c : clients) acc += evaluate(c.model, *test);
                rep.accuracy = acc / static_cast<double>(J);
            } else {
                rep.accuracy = evaluate(clients[0].model, *test);
            }
        }
        res.reports.push_back(std::move(rep));
    }

    res.global = clients[0].model;  // all clients now hold the completed global model
    return res;
}

// Rebuilds a client-sized local model from the matched global: for every layer
// keep exactly the global atoms this client's last matching mapped to.
inline NetworkModel reconstruct_local(const NetworkModel& global,
                                      const std::vector<std::vector<AssignmentMatrix>>& assignments,
                                      std::size_t client_idx, const NetworkModel& original) {
    NetworkModel out = original;
    const std::size_t N = global.weighted_count();
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t gi = global.weighted_index(n);
        const std::size_t oi = out.weighted_index(n);
        const LayerSpec& gs = global.layers[gi];
        const LayerSpec& os = out.layers[oi];
        const AssignmentMatrix& aout = assignments[n][client_idx];
        const AssignmentMatrix* ain = n > 0 ? &assignments[n - 1][client_idx] : nullptr;
        const auto& gw = global.weights[gi];
        auto& ow = out.weights[oi];

        switch (gs.kind) {
            case LayerKind::FullyConnected: {
                const std::int64_t in_groups = ain ? ain->local_size : os.in;
                const std::int64_t block = os.in / in_groups;
                for (std::int64_t o = 0; o < os.out; ++o) {
                    const std::int64_t go = aout.map[static_cast<std::size_t>(o)];
                    for (std::int64_t l = 0; l < in_groups; ++l) {
                        const std::int64_t gl = ain ? ain->map[static_cast<std::size_t>(l)] : l;
                        for (std::int64_t k = 0; k < block; ++k)
                            ow[0].at2(l * block + k, o) = gw[0].at2(gl * block + k, go);
                    }
                    ow[1][static_cast<std::size_t>(o)] = gw[1][static_cast<std::size_t>(go)];
                }
                break;
            }
            case LayerKind::Conv2d: {
                const std::int64_t khw = os.kh * os.kw;
                for (std::int64_t o = 0; o < os.out; ++o) {
                    const std::int64_t go = aout.map[static_cast<std::size_t>(o)];
                    for (std::int64_t c = 0; c < os.in; ++c) {
                        const std::int64_t gc = ain ? ain->map[static_cast<std::size_t>(c)] : c;
                        for (std::int64_t k = 0; k < khw; ++k)
                            ow[0].data[(c * khw + k) * os.out + o] =
                                gw[0].data[(gc * khw + k) * gs.out + go];
                    }
                    ow[1][static_cast<std::size_t>(o)] = gw[1][static_cast<std::size_t>(go)];
                }
                break;
            }
            case LayerKind::Lstm: {
                const std::int64_t S = os.gates, L = os.out, GL = gs.out;
                for (std::int64_t gate = 0; gate < S; ++gate)
                    for (std::int64_t l = 0; l < L; ++l) {
                        const std::int64_t g = aout.map[static_cast<std::size_t>(l)];
                        for (std::int64_t d = 0; d < os.in; ++d) {
                            const std::int64_t gd = ain ? ain->map[static_cast<std::size_t>(d)] : d;
                            ow[0].at2(gate * L + l, d) = gw[0].at2(gate * GL + g, gd);
                        }
                        for (std::int64_t m2 = 0; m2 < L; ++m2)
                            ow[1].at2(gate * L + l, m2) =
                                gw[1].at2(gate * GL + g, aout.map[static_cast<std::size_t>(m2)]);
                        ow[2][static_cast<std::size_t>(gate * L + l)] = gw[2][static_cast<std::size_t>(gate * GL + g)];
                        ow[3][static_cast<std::size_t>(gate * L + l)] = gw[3][static_cast<std::size_t>(gate * GL + g)];
                    }
                break;
            }
            case LayerKind::Embedding: {
                for (std::int64_t o = 0; o < os.out; ++o) {
                    const std::int64_t go = aout.map[static_cast<std::size_t>(o)];
                    for (std::int64_t v = 0; v < os.in; ++v) ow[0].at2(v, o) = gw[0].at2(v, go);
                }
                break;
            }
            default:
                break;
        }
    }
    return out;
}

// FedMA with communication: each round runs a full pass; before the next one
// every client rebuilds an original-width local model from the global via its
// previous-round matching, then trains it end to end.
inline std::vector<RoundReport> fedma_with_comm(std::vector<ClientState>& clients, int rounds,
                                                const MatchConfig& match_cfg, const SgdConfig& sgd,
                                                const Dataset* test = nullptr, bool eval_rounds = true,
                                                int threads = 1, NetworkModel* final_global = nullptr) {
    if (rounds < 1) throw ProtocolError("fedma_with_comm: rounds must be >= 1");
    const std::size_t N = clients[0].model.weighted_count();
    std::vector<NetworkModel> originals;
    originals.reserve(clients.size());
    for (const auto& c : clients) originals.push_back(c.model);

    std::vector<RoundReport> reports;
    NetworkModel global;
    std::vector<std::vector<AssignmentMatrix>> last_assignments;

    for (int r = 0; r < rounds; ++r) {
        if (sgd.epochs > 0) {
            for_each_client(clients.size(), threads, [&](std::size_t j) {
                if (r > 0)
                    clients[j].model =
                        reconstruct_local(global, last_assignments, j, originals[j]);
                SgdConfig local = sgd;
                local.seed = derive_seed(sgd.seed, 0x77c0 + static_cast<std::uint64_t>(clients[j].id) * 131 +
                                                       static_cast<std::uint64_t>(r));
                clients[j].model = train_local(clients[j].model, clients[j].data, local, 0, nullptr);
            });
        } else if (r > 0) {
            for (std::size_t j = 0; j < clients.size(); ++j)
                clients[j].model = reconstruct_local(global, last_assignments, j, originals[j]);
        }
        FedmaPassResult pass =
            fedma_pass(clients, match_cfg, sgd, test,
                       static_cast<std::int64_t>(r) * static_cast<std::int64_t>(N), eval_rounds, threads);
        global = pass.global;
        last_assignments = pass.assignments;
        for (auto& rep : pass.reports) reports.push_back(std::move(rep));
    }
    if (final_global) *final_global = global;
    return reports;
}

}  // namespace fedma
