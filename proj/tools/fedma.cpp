// Federated matched-averaging experiment runner.
//
// Verbs: run, sweep-epochs, match, filter-dump, partition. Exit codes:
// 0 ok, 2 configuration error, 3 training divergence.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fedma/experiment.hpp"

using namespace fedma;

namespace {

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = parse_config_file(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
        apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

// architecture family matching a checkpoint's tensor names; widths are
// adapted from the stored shapes afterwards
NetworkModel family_for(const std::string& model_name, const NamedTensors& tensors,
                        std::int64_t seq_len) {
    if (model_name == "lenet") {
        // recover the input geometry from conv1 / fc1 shapes
        std::int64_t c_in = 1, side = 4, conv2_out = 50;
        for (const auto& [name, t] : tensors) {
            if (name == "layer0.conv.weight") c_in = t.shape[0];
            if (name == "layer2.conv.weight") conv2_out = t.shape[3];
        }
        for (const auto& [name, t] : tensors)
            if (name == "layer4.fc.weight")
                side = static_cast<std::int64_t>(std::llround(std::sqrt(
                    static_cast<double>(t.shape[0] / conv2_out))));
        const std::int64_t hw = (side * 2 + 4) * 2 + 4;
        NetworkModel family = make_lenet(c_in, hw, 10);
        return model_from_tensors(family, tensors);
    }
    if (model_name == "mlp") {
        std::size_t fc_layers = 0;
        for (const auto& [name, t] : tensors)
            if (name.find(".fc.weight") != std::string::npos) ++fc_layers;
        if (fc_layers == 0) throw ConfigError("checkpoint holds no fc layers");
        std::int64_t in_dim = 1;
        for (const auto& [name, t] : tensors)
            if (name == "layer0.fc.weight") in_dim = t.shape[0];
        std::vector<std::int64_t> hidden(fc_layers - 1, 1);
        NetworkModel family = make_mlp(in_dim, hidden, 2);
        return model_from_tensors(family, tensors);
    }
    if (model_name == "char-lstm") {
        NetworkModel family = make_char_lstm(80, seq_len);
        return model_from_tensors(family, tensors);
    }
    throw ConfigError("invalid --model '" + model_name + "'");
}

// minimal client wrapper for offline matching: uniform class counts, no data
ClientState offline_client(std::int64_t id, NetworkModel model) {
    Dataset d;
    const auto wl = model.weighted_layers();
    d.classes = model.layers[wl.back()].out;
    d.features = Tensor({d.classes, 1});
    for (std::int64_t k = 0; k < d.classes; ++k) d.labels.push_back(k);
    return make_client(id, std::move(model), std::move(d));
}

int cmd_run(const std::string& config, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = load_config(config, overrides);
    return run_experiment(cfg, std::cout);
}

int cmd_sweep_epochs(const std::string& config, const std::vector<std::string>& overrides,
                     const std::string& epochs_list, const std::string& strategies_list) {
    ExperimentConfig base = load_config(config, overrides);
    std::vector<int> epoch_values;
    {
        std::stringstream ss(epochs_list);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) epoch_values.push_back(static_cast<int>(std::stoll(tok)));
    }
    if (epoch_values.empty()) throw ConfigError("--epochs-list is empty");
    std::vector<std::string> strategies;
    {
        std::stringstream ss(strategies_list.empty() ? base.strategy : strategies_list);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) strategies.push_back(tok);
    }
    std::filesystem::create_directories(base.out_dir);
    std::ofstream summary(base.out_dir + "/summary.csv");
    summary << "epochs,strategy,accuracy\n";
    for (const auto& strategy : strategies) {
        for (int e : epoch_values) {
            ExperimentConfig cfg = base;
            cfg.strategy = strategy;
            cfg.epochs = e;
            if (strategy == "fedma") cfg.rounds = 1;
            if (strategy != "fedprox") cfg.mu_set = false;
            cfg.out_dir = base.out_dir + "/" + strategy + "_E" + std::to_string(e);
            const int code = run_experiment(cfg, std::cout);
            if (code != 0) return code;
            // final accuracy is the last row of the run's rounds.csv
            std::ifstream rf(cfg.out_dir + "/rounds.csv");
            std::string line, last;
            std::getline(rf, line);  // header
            while (std::getline(rf, line))
                if (!line.empty()) last = line;
            std::stringstream ls(last);
            std::string field;
            std::getline(ls, field, ',');  // round
            std::getline(ls, field, ',');  // strategy
            std::getline(ls, field, ',');  // accuracy
            summary << e << "," << strategy << "," << field << "\n";
        }
    }
    std::cout << "sweep summary: " << base.out_dir << "/summary.csv\n";
    return 0;
}

int cmd_match(const std::vector<std::string>& checkpoints, const std::string& model_name,
              const std::string& out_dir, const std::string& cost_mode, double epsilon,
              double kappa, double gamma0, double sigma0_sq, double sigma_sq,
              std::uint64_t seed, std::int64_t seq_len) {
    if (checkpoints.empty()) throw ConfigError("match needs at least one checkpoint");
    std::vector<ClientState> clients;
    for (std::size_t j = 0; j < checkpoints.size(); ++j) {
        NetworkModel m = family_for(model_name, load_checkpoint(checkpoints[j]), seq_len);
        if (j > 0 && !m.same_architecture(clients[0].model))
            throw ConfigError("checkpoint architectures do not match: " + checkpoints[j]);
        clients.push_back(offline_client(static_cast<std::int64_t>(j), std::move(m)));
    }
    const std::int64_t original = clients[0].model.param_count();

    MatchConfig mcfg;
    mcfg.cost_mode = cost_mode == "euclidean" ? CostMode::Euclidean : CostMode::BbpMap;
    mcfg.epsilon = epsilon;
    mcfg.size_penalty_slope = kappa;
    mcfg.gamma0 = gamma0;
    mcfg.sigma0_sq = sigma0_sq;
    mcfg.sigma_sq = sigma_sq;
    mcfg.client_order_seed = seed;

    SgdConfig no_retrain;
    no_retrain.epochs = 0;
    FedmaPassResult pass = fedma_pass(clients, mcfg, no_retrain);

    std::filesystem::create_directories(out_dir);
    save_checkpoint(out_dir + "/global.fma", model_to_tensors(pass.global));
    std::ofstream asg(out_dir + "/assignments.csv");
    asg << "layer,client,local_index,global_index\n";
    for (std::size_t n = 0; n < pass.assignments.size(); ++n)
        for (std::size_t j = 0; j < pass.assignments[n].size(); ++j) {
            const AssignmentMatrix& a = pass.assignments[n][j];
            for (std::int64_t l = 0; l < a.local_size; ++l)
                asg << n << "," << j << "," << l << "," << a.map[static_cast<std::size_t>(l)] << "\n";
        }
    const double growth = static_cast<double>(pass.global.param_count()) / static_cast<double>(original);
    std::cout << "global parameters: " << pass.global.param_count() << " (growth rate " << growth
              << ")\n"
              << "wrote " << out_dir << "/global.fma and assignments.csv\n";
    return 0;
}

int cmd_filter_dump(const std::string& checkpoint, const std::string& model_name,
                    std::int64_t layer, const std::string& image, const std::string& out_path,
                    std::int64_t seq_len) {
    NetworkModel m = family_for(model_name, load_checkpoint(checkpoint), seq_len);
    const auto wl = m.weighted_layers();
    if (layer < 0 || static_cast<std::size_t>(layer) >= wl.size())
        throw ConfigError("--layer out of range (model has " + std::to_string(wl.size()) +
                          " weighted layers)");
    std::int64_t width = 1;
    for (auto e : m.input_shape) width *= e;
    std::vector<std::int64_t> shape = {1};
    shape.insert(shape.end(), m.input_shape.begin(), m.input_shape.end());
    Tensor x(shape);
    if (image != "zeros") {
        std::ifstream f(image);
        if (!f) throw ConfigError("cannot open image file: " + image);
        std::int64_t k = 0;
        std::string tok;
        while (f >> tok) {
            for (auto& ch : tok)
                if (ch == ',') ch = ' ';
            std::stringstream ts(tok);
            double v;
            while (ts >> v) {
                if (k >= width)
                    throw ConfigError("image has more than " + std::to_string(width) + " values");
                x.data[static_cast<std::size_t>(k++)] = v;
            }
        }
        if (k != width)
            throw ConfigError("image has " + std::to_string(k) + " values, model expects " +
                              std::to_string(width));
    }

    // forward through the prefix ending at the requested weighted layer
    NetworkModel prefix;
    prefix.input_shape = m.input_shape;
    const std::size_t end = wl[static_cast<std::size_t>(layer)] + 1;
    prefix.layers.assign(m.layers.begin(), m.layers.begin() + end);
    prefix.weights.assign(m.weights.begin(), m.weights.begin() + end);
    Tensor act = forward(prefix, x);

    std::ofstream out(out_path);
    if (!out) throw ConfigError("cannot open output file: " + out_path);
    out << "filter,row,col,value\n";
    char buf[64];
    if (act.rank() == 4) {
        const std::int64_t C = act.shape[1], H = act.shape[2], W = act.shape[3];
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t yy = 0; yy < H; ++yy)
                for (std::int64_t xx = 0; xx < W; ++xx) {
                    std::snprintf(buf, sizeof buf, "%.17g", act.data[(c * H + yy) * W + xx]);
                    out << c << "," << yy << "," << xx << "," << buf << "\n";
                }
    } else {
        for (std::int64_t u = 0; u < act.numel(); ++u) {
            std::snprintf(buf, sizeof buf, "%.17g", act.data[static_cast<std::size_t>(u)]);
            out << u << ",0,0," << buf << "\n";
        }
    }
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_partition(const std::string& config, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = load_config(config, overrides);
    validate_config(cfg);
    ExperimentData data = build_dataset(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    if (data.is_text) throw ConfigError("text datasets are partitioned by speaking role already");
    if (cfg.partition == "data-efficiency") {
        auto stages = data_efficiency_plan(data.train, 5, 5, 0.5, cfg.seed_data);
        for (std::size_t t = 0; t < stages.size(); ++t) {
            std::ofstream f(cfg.out_dir + "/partition_stage" + std::to_string(t + 1) + ".csv");
            write_partition_csv(f, stages[t]);
        }
        std::cout << "wrote " << stages.size() << " stage plans to " << cfg.out_dir << "\n";
        return 0;
    }
    PartitionPlan plan;
    if (cfg.partition == "homogeneous")
        plan = partition_homogeneous(data.train, cfg.clients, cfg.seed_data);
    else if (cfg.partition == "bias")
        plan = partition_by_tag(data.train);
    else
        plan = partition_dirichlet(data.train, cfg.clients, dirichlet_alpha_of(cfg.partition),
                                   cfg.seed_data);
    std::ofstream f(cfg.out_dir + "/partition.csv");
    write_partition_csv(f, plan);
    std::cout << "wrote " << cfg.out_dir << "/partition.csv"
              << (plan.has_empty_clients() ? " (some clients are empty)" : "") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated matched averaging simulator"};
    app.require_subcommand(1);

    std::string config;
    std::vector<std::string> overrides;
    auto* run = app.add_subcommand("run", "run one experiment from a config file");
    run->add_option("config", config, "key=value config file")->required();
    run->add_option("overrides", overrides, "key=value overrides");

    std::string sweep_config, epochs_list, strategies_list;
    std::vector<std::string> sweep_overrides;
    auto* sweep = app.add_subcommand("sweep-epochs", "sweep local epoch counts");
    sweep->add_option("config", sweep_config, "key=value config file")->required();
    sweep->add_option("--epochs-list", epochs_list, "comma-separated E values")->required();
    sweep->add_option("--strategies", strategies_list,
                      "comma-separated strategies (default: config strategy)");
    sweep->add_option("overrides", sweep_overrides, "key=value overrides");

    std::vector<std::string> ckpts;
    std::string match_model = "lenet", match_out = "match_out", match_cost = "bbpmap";
    double m_eps = 1.0, m_kappa = 0.1, m_gamma0 = 7.0, m_s0 = 1.0, m_s = 1.0;
    std::uint64_t m_seed = 0;
    std::int64_t m_seq = 20;
    auto* match = app.add_subcommand("match", "match externally trained checkpoints");
    match->add_option("checkpoints", ckpts, "FMA1 checkpoint files")->required();
    match->add_option("--model", match_model, "lenet|mlp|char-lstm");
    match->add_option("--out", match_out, "output directory");
    match->add_option("--cost-mode", match_cost, "euclidean|bbpmap");
    match->add_option("--epsilon", m_eps, "new-neuron threshold (euclidean)");
    match->add_option("--kappa", m_kappa, "size penalty slope (euclidean)");
    match->add_option("--gamma0", m_gamma0, "discovery rate (bbpmap)");
    match->add_option("--sigma0-sq", m_s0, "prior variance (bbpmap)");
    match->add_option("--sigma-sq", m_s, "local variance (bbpmap)");
    match->add_option("--seed", m_seed, "client order seed");
    match->add_option("--seq-len", m_seq, "sequence length (char-lstm)");

    std::string fd_ckpt, fd_model = "lenet", fd_image = "zeros", fd_out = "filters.csv";
    std::int64_t fd_layer = 0, fd_seq = 20;
    auto* fdump = app.add_subcommand("filter-dump", "dump activation maps of one layer");
    fdump->add_option("checkpoint", fd_ckpt, "FMA1 checkpoint")->required();
    fdump->add_option("--model", fd_model, "lenet|mlp|char-lstm");
    fdump->add_option("--layer", fd_layer, "weighted layer index");
    fdump->add_option("--image", fd_image, "text file of input values, or 'zeros'");
    fdump->add_option("--out", fd_out, "output CSV");
    fdump->add_option("--seq-len", fd_seq, "sequence length (char-lstm)");

    std::string part_config;
    std::vector<std::string> part_overrides;
    auto* part = app.add_subcommand("partition", "emit a partition plan as CSV");
    part->add_option("config", part_config, "key=value config file")->required();
    part->add_option("overrides", part_overrides, "key=value overrides");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config, overrides);
        if (sweep->parsed())
            return cmd_sweep_epochs(sweep_config, sweep_overrides, epochs_list, strategies_list);
        if (match->parsed())
            return cmd_match(ckpts, match_model, match_out, match_cost, m_eps, m_kappa, m_gamma0,
                             m_s0, m_s, m_seed, m_seq);
        if (fdump->parsed())
            return cmd_filter_dump(fd_ckpt, fd_model, fd_layer, fd_image, fd_out, fd_seq);
        if (part->parsed()) return cmd_partition(part_config, part_overrides);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
