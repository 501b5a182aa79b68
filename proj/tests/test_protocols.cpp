#include <gtest/gtest.h>

#include <cstring>

#include "fedma/data.hpp"
#include "fedma/protocols.hpp"
#include "support/oracles.hpp"

using namespace fedma;

namespace {

bool models_byte_equal(const NetworkModel& a, const NetworkModel& b) {
    if (a.weights.size() != b.weights.size()) return false;
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
        if (a.weights[i].size() != b.weights[i].size()) return false;
        for (std::size_t t = 0; t < a.weights[i].size(); ++t) {
            if (a.weights[i][t].shape != b.weights[i][t].shape) return false;
            if (std::memcmp(a.weights[i][t].data.data(), b.weights[i][t].data.data(),
                            a.weights[i][t].data.size() * sizeof(double)) != 0)
                return false;
        }
    }
    return true;
}

double model_forward_gap(const NetworkModel& a, const NetworkModel& b, Rng& rng,
                         std::int64_t samples = 50) {
    std::vector<std::int64_t> shape = {samples};
    shape.insert(shape.end(), a.input_shape.begin(), a.input_shape.end());
    Tensor x(shape);
    for (auto& v : x.data) v = rng.normal();
    return max_abs_diff(forward(a, x), forward(b, x));
}

AssignmentMatrix shuffled_perm(std::int64_t n, Rng& rng) {
    AssignmentMatrix a = AssignmentMatrix::identity(n);
    rng.shuffle(a.map);
    return a;
}

// J permuted clones of one base model, each with its own data shard
std::vector<ClientState> clone_clients(const NetworkModel& base, std::size_t J, const Dataset& ds,
                                       std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ClientState> clients;
    PartitionPlan plan = partition_homogeneous(ds, static_cast<std::int64_t>(J), seed);
    for (std::size_t j = 0; j < J; ++j) {
        NetworkModel m = base;
        if (j > 0) {
            std::vector<AssignmentMatrix> perms;
            const auto wl = base.weighted_layers();
            for (std::size_t n = 0; n + 1 < wl.size(); ++n)
                perms.push_back(shuffled_perm(base.layers[wl[n]].out, rng));
            m = permute_network(base, perms);
        }
        clients.push_back(make_client(static_cast<std::int64_t>(j), std::move(m),
                                      ds.subset(plan.shards[j])));
    }
    return clients;
}

SgdConfig no_training() {
    SgdConfig cfg;
    cfg.epochs = 0;  // pure matching
    return cfg;
}

}  // namespace

TEST(WeightedModelAverage, IdenticalClientsUnchanged) {
    NetworkModel m = make_mlp(3, {4}, 2);
    init_weights(m, 5);
    Dataset ds = synth_classification(2, 8, 3, 1);
    auto plan = partition_homogeneous(ds, 2, 1);
    std::vector<ClientState> clients = {make_client(0, m, ds.subset(plan.shards[0])),
                                        make_client(1, m, ds.subset(plan.shards[1]))};
    EXPECT_TRUE(models_byte_equal(weighted_model_average(clients), m));
}

TEST(WeightedModelAverage, OppositeWeightsCancel) {
    NetworkModel m = make_mlp(3, {4}, 2);
    init_weights(m, 6);
    NetworkModel neg = m;
    for (auto& lw : neg.weights)
        for (auto& t : lw)
            for (auto& v : t.data) v = -v;
    Dataset ds = synth_classification(2, 8, 3, 2);
    auto plan = partition_homogeneous(ds, 2, 2);
    std::vector<ClientState> clients = {make_client(0, m, ds.subset(plan.shards[0])),
                                        make_client(1, neg, ds.subset(plan.shards[1]))};
    NetworkModel g = weighted_model_average(clients);
    for (const auto& lw : g.weights)
        for (const auto& t : lw)
            for (double v : t.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(WeightedModelAverage, SizeWeightedBlend) {
    NetworkModel a = make_mlp(2, {3}, 2);
    init_weights(a, 7);
    NetworkModel b = a;
    for (auto& lw : b.weights)
        for (auto& t : lw)
            for (auto& v : t.data) v += 1.0;
    Dataset ds = synth_classification(2, 40, 2, 3);
    std::vector<std::int64_t> i30(30), i10(10);
    for (int i = 0; i < 30; ++i) i30[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < 10; ++i) i10[static_cast<std::size_t>(i)] = 30 + i;
    std::vector<ClientState> clients = {make_client(0, a, ds.subset(i30)),
                                        make_client(1, b, ds.subset(i10))};
    NetworkModel g = weighted_model_average(clients);
    for (std::size_t i = 0; i < g.weights.size(); ++i)
        for (std::size_t t = 0; t < g.weights[i].size(); ++t)
            for (std::size_t k = 0; k < g.weights[i][t].data.size(); ++k)
                EXPECT_NEAR(g.weights[i][t].data[k],
                            0.75 * a.weights[i][t].data[k] + 0.25 * b.weights[i][t].data[k], 1e-12);
}

TEST(WeightedModelAverage, MismatchedWidthsRaise) {
    NetworkModel a = make_mlp(2, {3}, 2), b = make_mlp(2, {4}, 2);
    init_weights(a, 1);
    init_weights(b, 1);
    Dataset ds = synth_classification(2, 8, 2, 4);
    auto plan = partition_homogeneous(ds, 2, 4);
    std::vector<ClientState> clients = {make_client(0, a, ds.subset(plan.shards[0])),
                                        make_client(1, b, ds.subset(plan.shards[1]))};
    EXPECT_THROW(weighted_model_average(clients), ProtocolError);
}

TEST(StrategyIdentities, FedProxZeroMuEqualsFedAvgBitwise) {
    NetworkModel m = make_mlp(4, {5}, 3);
    init_weights(m, 9);
    Dataset ds = synth_classification(3, 60, 4, 5);
    auto plan = partition_dirichlet(ds, 3, 0.5, 5);
    auto mk = [&] {
        std::vector<ClientState> cs;
        for (int j = 0; j < 3; ++j) {
            NetworkModel mj = m;
            init_weights(mj, 100 + static_cast<std::uint64_t>(j));
            cs.push_back(make_client(j, mj, ds.subset(plan.shards[static_cast<std::size_t>(j)])));
        }
        return cs;
    };
    SgdConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 11;
    auto ca = mk();
    auto cb = mk();
    NetworkModel ga = fedavg_round(ca, nullptr, cfg);
    NetworkModel gb = fedprox_round(cb, nullptr, 0.0, cfg);
    EXPECT_TRUE(models_byte_equal(ga, gb));
    // second round with a global model present
    NetworkModel ga2 = fedavg_round(ca, &ga, cfg);
    NetworkModel gb2 = fedprox_round(cb, &gb, 0.0, cfg);
    EXPECT_TRUE(models_byte_equal(ga2, gb2));
}

TEST(StrategyIdentities, SingleClientFixedPoint) {
    NetworkModel m = make_mlp(3, {4}, 2);
    init_weights(m, 13);
    Dataset ds = synth_classification(2, 20, 3, 6);
    SgdConfig cfg;
    cfg.epochs = 1;
    cfg.seed = 17;
    std::vector<ClientState> clients = {make_client(0, m, ds)};
    NetworkModel g = fedavg_round(clients, nullptr, cfg);
    // the round reduces to that client's local training
    SgdConfig local = cfg;
    local.seed = derive_seed(cfg.seed, 0);
    EXPECT_TRUE(models_byte_equal(g, train_local(m, ds, local)));

    std::vector<ClientState> solo = {make_client(0, m, ds)};
    auto pass = fedma_pass(solo, MatchConfig{}, no_training());
    EXPECT_TRUE(models_byte_equal(pass.global, m));
}

TEST(StrategyIdentities, HugeMuKeepsGlobalFixed) {
    NetworkModel m = make_mlp(3, {4}, 2);
    init_weights(m, 19);
    Dataset ds = synth_classification(2, 24, 3, 7);
    auto plan = partition_homogeneous(ds, 2, 7);
    std::vector<ClientState> clients = {make_client(0, m, ds.subset(plan.shards[0])),
                                        make_client(1, m, ds.subset(plan.shards[1]))};
    SgdConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 8e-7;
    cfg.last_layer_lr = 8e-7;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 4;
    cfg.seed = 23;
    NetworkModel g = fedprox_round(clients, &m, 1e6, cfg);
    double dev = 0.0;
    for (std::size_t i = 0; i < g.weights.size(); ++i)
        for (std::size_t t = 0; t < g.weights[i].size(); ++t)
            dev = std::max(dev, max_abs_diff(g.weights[i][t], m.weights[i][t]));
    EXPECT_LT(dev, 1e-3);
}

TEST(WeightedLastLayer, EqualCountsGivePlainAverage) {
    NetworkModel a = make_mlp(2, {}, 3);
    NetworkModel b = a;
    init_weights(a, 25);
    init_weights(b, 26);
    Dataset dummy = synth_classification(3, 6, 2, 8);
    std::vector<ClientState> clients = {make_client(0, a, dummy), make_client(1, b, dummy)};
    clients[0].class_counts = {4, 4, 4};
    clients[1].class_counts = {4, 4, 4};
    auto out = weighted_last_layer(clients, 0);
    for (std::int64_t r = 0; r < 2; ++r)
        for (std::int64_t k = 0; k < 3; ++k)
            EXPECT_NEAR(out[0].at2(r, k),
                        0.5 * (a.weights[0][0].at2(r, k) + b.weights[0][0].at2(r, k)), 1e-12);
}

TEST(WeightedLastLayer, SoleHolderCopiesItsColumn) {
    NetworkModel a = make_mlp(2, {}, 4);
    NetworkModel b = a;
    init_weights(a, 27);
    init_weights(b, 28);
    Dataset dummy = synth_classification(4, 8, 2, 9);
    std::vector<ClientState> clients = {make_client(0, a, dummy), make_client(1, b, dummy)};
    clients[0].class_counts = {2, 3, 0, 5};
    clients[1].class_counts = {2, 3, 7, 0};  // class 3 lives only on client 0
    auto out = weighted_last_layer(clients, 0);
    for (std::int64_t r = 0; r < 2; ++r) {
        EXPECT_DOUBLE_EQ(out[0].at2(r, 3), a.weights[0][0].at2(r, 3));
        EXPECT_DOUBLE_EQ(out[0].at2(r, 2), b.weights[0][0].at2(r, 2));
    }
    EXPECT_DOUBLE_EQ(out[1][3], a.weights[0][1][3]);
}

TEST(WeightedLastLayer, ThreeToOneBlend) {
    NetworkModel a = make_mlp(2, {}, 2);
    NetworkModel b = a;
    init_weights(a, 29);
    init_weights(b, 30);
    Dataset dummy = synth_classification(2, 4, 2, 10);
    std::vector<ClientState> clients = {make_client(0, a, dummy), make_client(1, b, dummy)};
    clients[0].class_counts = {3, 1};
    clients[1].class_counts = {1, 3};
    auto out = weighted_last_layer(clients, 0);
    for (std::int64_t r = 0; r < 2; ++r) {
        EXPECT_NEAR(out[0].at2(r, 0), 0.75 * a.weights[0][0].at2(r, 0) + 0.25 * b.weights[0][0].at2(r, 0), 1e-12);
        EXPECT_NEAR(out[0].at2(r, 1), 0.25 * a.weights[0][0].at2(r, 1) + 0.75 * b.weights[0][0].at2(r, 1), 1e-12);
    }
    // a class nobody holds falls back to the uniform blend
    clients[0].class_counts = {3, 0};
    clients[1].class_counts = {1, 0};
    auto fallback = weighted_last_layer(clients, 0);
    for (std::int64_t r = 0; r < 2; ++r)
        EXPECT_NEAR(fallback[0].at2(r, 1),
                    0.5 * (a.weights[0][0].at2(r, 1) + b.weights[0][0].at2(r, 1)), 1e-12);
}

TEST(FedmaPass, LenetLogsExactlyFourRounds) {
    NetworkModel base = make_lenet(1, 16, 4);
    init_weights(base, 31);
    Dataset ds = synth_digits(40, 11);
    // center-crop to 16x16 for the small lenet
    Dataset small;
    small.classes = 10;
    small.features = Tensor({ds.size(), 1, 16, 16});
    small.labels = ds.labels;
    for (std::int64_t i = 0; i < ds.size(); ++i)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                small.features.data[(i * 16 + y) * 16 + x] =
                    ds.features.data[(i * 28 + y + 6) * 28 + x + 6];
    auto clients = clone_clients(base, 2, small, 33);
    auto pass = fedma_pass(clients, MatchConfig{}, no_training());
    ASSERT_EQ(pass.reports.size(), 4u);
    for (std::size_t n = 0; n < 4; ++n) EXPECT_EQ(pass.reports[n].round, static_cast<std::int64_t>(n) + 1);
    for (const auto& r : pass.reports) {
        EXPECT_GT(r.bytes_up, 0);
        EXPECT_GT(r.bytes_down, 0);
    }
}

TEST(FedmaPass, PermutedClonesRecoverBaseModel) {
    NetworkModel base = make_mlp(6, {10, 8}, 4);
    init_weights(base, 37);
    Dataset ds = synth_classification(4, 40, 6, 12);
    auto clients = clone_clients(base, 3, ds, 39);
    MatchConfig cfg;
    cfg.epsilon = 50.0;
    auto pass = fedma_pass(clients, cfg, no_training());
    Rng rng(41);
    EXPECT_LT(model_forward_gap(pass.global, base, rng), 1e-8);
    EXPECT_DOUBLE_EQ(pass.reports.back().growth_rate, 1.0);
    EXPECT_EQ(pass.global.param_count(), base.param_count());
}

TEST(FedmaPass, LstmClonesRecoverBaseModel) {
    NetworkModel base = make_char_lstm(20, 6, 5, 7);
    init_weights(base, 43);
    Rng drng(45);
    Dataset ds;
    ds.classes = 20;
    ds.features = Tensor({30, 6});
    for (auto& v : ds.features.data) v = static_cast<double>(drng.uniform_index(20));
    ds.labels.resize(30);
    for (auto& l : ds.labels) l = static_cast<std::int64_t>(drng.uniform_index(20));
    auto clients = clone_clients(base, 2, ds, 47);
    MatchConfig cfg;
    cfg.epsilon = 50.0;
    auto pass = fedma_pass(clients, cfg, no_training());
    Tensor x({12, 6});
    for (auto& v : x.data) v = static_cast<double>(drng.uniform_index(20));
    EXPECT_LT(max_abs_diff(forward(pass.global, x), forward(base, x)), 1e-8);
    EXPECT_DOUBLE_EQ(pass.reports.back().growth_rate, 1.0);
    EXPECT_EQ(pass.reports.size(), 3u);  // embedding, lstm, decoder
}

TEST(FedmaPass, ArchitectureMismatchRaises) {
    NetworkModel a = make_mlp(3, {4}, 2);
    NetworkModel b = make_mlp(3, {4, 4}, 2);
    init_weights(a, 1);
    init_weights(b, 2);
    Dataset ds = synth_classification(2, 10, 3, 13);
    auto plan = partition_homogeneous(ds, 2, 13);
    std::vector<ClientState> clients = {make_client(0, a, ds.subset(plan.shards[0])),
                                        make_client(1, b, ds.subset(plan.shards[1]))};
    EXPECT_THROW(fedma_pass(clients, MatchConfig{}, no_training()), ProtocolError);
}

TEST(FedmaPass, GrowthBoundedBySumOfClientWidths) {
    Dataset ds = synth_classification(3, 30, 5, 14);
    auto plan = partition_homogeneous(ds, 3, 14);
    std::vector<ClientState> clients;
    for (int j = 0; j < 3; ++j) {
        NetworkModel m = make_mlp(5, {6}, 3);
        init_weights(m, 200 + static_cast<std::uint64_t>(j));  // unrelated weights
        clients.push_back(make_client(j, m, ds.subset(plan.shards[static_cast<std::size_t>(j)])));
    }
    MatchConfig cfg;
    cfg.epsilon = 1e-9;  // force maximal growth
    cfg.size_penalty_slope = 1e-9;
    auto grown = fedma_pass(clients, cfg, no_training());
    EXPECT_EQ(grown.global.layers[0].out, 18);  // sum of the three widths

    std::vector<ClientState> clients2;
    for (int j = 0; j < 3; ++j) {
        NetworkModel m = make_mlp(5, {6}, 3);
        init_weights(m, 200 + static_cast<std::uint64_t>(j));
        clients2.push_back(make_client(j, m, ds.subset(plan.shards[static_cast<std::size_t>(j)])));
    }
    cfg.epsilon = 1e9;  // force maximal merging
    auto merged = fedma_pass(clients2, cfg, no_training());
    EXPECT_EQ(merged.global.layers[0].out, 6);
}

TEST(FedmaWithComm, OneRoundEqualsOnePass) {
    NetworkModel base = make_mlp(4, {6}, 3);
    init_weights(base, 51);
    Dataset ds = synth_classification(3, 30, 4, 15);
    auto ca = clone_clients(base, 2, ds, 53);
    auto cb = clone_clients(base, 2, ds, 53);
    MatchConfig cfg;
    cfg.epsilon = 50.0;
    NetworkModel g;
    auto reports = fedma_with_comm(ca, 1, cfg, no_training(), nullptr, true, 1, &g);
    auto pass = fedma_pass(cb, cfg, no_training());
    EXPECT_EQ(reports.size(), pass.reports.size());
    EXPECT_TRUE(models_byte_equal(g, pass.global));
}

TEST(FedmaWithComm, ClonesConvergeWithUnitGrowth) {
    NetworkModel base = make_mlp(5, {8}, 3);
    init_weights(base, 57);
    Dataset ds = synth_classification(3, 30, 5, 16);
    auto clients = clone_clients(base, 4, ds, 59);
    MatchConfig cfg;
    cfg.epsilon = 50.0;
    NetworkModel g;
    auto reports = fedma_with_comm(clients, 3, cfg, no_training(), nullptr, true, 1, &g);
    EXPECT_EQ(reports.size(), 6u);  // 3 rounds x 2 layers
    Rng rng(61);
    EXPECT_LT(model_forward_gap(g, base, rng), 1e-8);
    for (const auto& r : reports) EXPECT_DOUBLE_EQ(r.growth_rate, 1.0);
    // reconstruction preserved original local widths throughout
    for (const auto& c : clients) EXPECT_EQ(c.model.layers[0].out, 8);
}

TEST(FedmaWithComm, ElevenRoundScheduleReportsAllRounds) {
    NetworkModel base = make_mlp(3, {4}, 2);
    init_weights(base, 63);
    Dataset ds = synth_classification(2, 20, 3, 17);
    auto clients = clone_clients(base, 2, ds, 65);
    MatchConfig cfg;
    cfg.epsilon = 50.0;
    auto reports = fedma_with_comm(clients, 11, cfg, no_training());
    EXPECT_EQ(reports.size(), 22u);  // 11 passes x N=2 layers
    for (std::size_t i = 0; i < reports.size(); ++i)
        EXPECT_EQ(reports[i].round, static_cast<std::int64_t>(i) + 1);
}

TEST(Ensemble, IdenticalClientsEqualSingleModel) {
    NetworkModel m = make_mlp(4, {6}, 3);
    init_weights(m, 67);
    Dataset ds = synth_classification(3, 60, 4, 18);
    std::vector<ClientState> clients = {make_client(0, m, ds), make_client(1, m, ds)};
    EXPECT_DOUBLE_EQ(ensemble_eval(clients, ds), evaluate(m, ds));
}

TEST(Ensemble, OpposedOneHotModelsTieBreakLow) {
    // two bias-only models: one votes class 0, the other class 1
    auto fixed_model = [](double b0, double b1) {
        NetworkModel m;
        m.input_shape = {2};
        m.layers = {LayerSpec::fc(2, 2, Activation::Softmax, "fc")};
        m.weights = {{Tensor({2, 2}), Tensor({2}, {b0, b1})}};
        return m;
    };
    Dataset ds;
    ds.classes = 2;
    ds.features = Tensor({4, 2});
    ds.labels = {0, 0, 1, 1};
    std::vector<ClientState> clients = {make_client(0, fixed_model(30.0, 0.0), ds),
                                        make_client(1, fixed_model(0.0, 30.0), ds)};
    // mean probabilities are (0.5, 0.5): argmax resolves to class 0
    EXPECT_DOUBLE_EQ(ensemble_eval(clients, ds), 0.5);
}

TEST(Ensemble, ThreeModelAverageMatchesHandEnumeration) {
    auto fixed_model = [](std::vector<double> bias) {
        NetworkModel m;
        m.input_shape = {1};
        m.layers = {LayerSpec::fc(1, 3, Activation::Softmax, "fc")};
        m.weights = {{Tensor({1, 3}), Tensor({3}, std::move(bias))}};
        return m;
    };
    std::vector<std::vector<double>> biases = {{2.0, 0.0, 1.0}, {0.0, 1.5, 0.5}, {0.2, 0.1, 2.2}};
    Dataset ds;
    ds.classes = 3;
    ds.features = Tensor({3, 1});
    ds.labels = {2, 2, 0};
    std::vector<ClientState> clients;
    for (std::size_t j = 0; j < 3; ++j)
        clients.push_back(make_client(static_cast<std::int64_t>(j), fixed_model(biases[j]), ds));
    // brute-force probability averaging in the test itself
    std::vector<double> mean(3, 0.0);
    for (const auto& b : biases) {
        double mx = std::max({b[0], b[1], b[2]}), sum = 0.0;
        std::vector<double> p(3);
        for (int k = 0; k < 3; ++k) {
            p[static_cast<std::size_t>(k)] = std::exp(b[static_cast<std::size_t>(k)] - mx);
            sum += p[static_cast<std::size_t>(k)];
        }
        for (int k = 0; k < 3; ++k) mean[static_cast<std::size_t>(k)] += p[static_cast<std::size_t>(k)] / sum / 3.0;
    }
    std::int64_t vote = argmax_row(mean.data(), 3);
    double expect = 0.0;
    for (auto l : ds.labels) expect += (l == vote) ? 1.0 / 3.0 : 0.0;
    EXPECT_NEAR(ensemble_eval(clients, ds), expect, 1e-12);
}

TEST(Accounting, LenetMessageBytes) {
    NetworkModel m = make_lenet();
    EXPECT_EQ(m.param_count(), 431080);
    EXPECT_EQ(account_message(m), 8 * 431080);  // about 3.448 MB per direction
    NetworkModel empty;
    EXPECT_EQ(account_message(empty), 0);
    // per-layer additivity
    std::int64_t per_layer = 0;
    for (std::size_t i = 0; i < m.layers.size(); ++i) per_layer += 8 * m.layer_param_count(i);
    EXPECT_EQ(per_layer, account_message(m));
}

TEST(Accounting, PassBytesMatchLayerSizes) {
    NetworkModel base = make_mlp(4, {6}, 3);
    init_weights(base, 71);
    Dataset ds = synth_classification(3, 30, 4, 19);
    auto clients = clone_clients(base, 2, ds, 73);
    auto pass = fedma_pass(clients, MatchConfig{}, no_training());
    // layer 0: (4*6 + 6) params per client up, global (4*6+6) down to each
    EXPECT_EQ(pass.reports[0].bytes_up, 2 * 8 * (4 * 6 + 6));
    EXPECT_EQ(pass.reports[0].bytes_down, 2 * 8 * (4 * 6 + 6));
    EXPECT_EQ(pass.reports[1].bytes_up, 2 * 8 * (6 * 3 + 3));
    EXPECT_EQ(pass.reports[1].bytes_down, 2 * 8 * (6 * 3 + 3));
}
