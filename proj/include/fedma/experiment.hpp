#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedma/checkpoint.hpp"
#include "fedma/data.hpp"
#include "fedma/protocols.hpp"

namespace fedma {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Flat key=value experiment description. Every knob has a default; unknown
// keys are rejected with a diagnostic naming the key.
struct ExperimentConfig {
    std::string dataset = "digits";       // digits|mnist|cifar10|synth|synth-bias|text:<path>
    std::int64_t samples = 2000;
    std::int64_t test_samples = 500;
    std::int64_t dim = 10;                // synth feature dim
    std::int64_t classes = 10;            // synth class count

    std::string model = "lenet";          // lenet|mlp|char-lstm
    std::vector<std::int64_t> mlp_hidden = {32};
    std::int64_t embed_dim = 8;
    std::int64_t hidden = 32;
    std::int64_t seq_len = 20;

    std::string strategy = "fedavg";      // fedma|fedma-comm|fedavg|fedprox|ensemble|centralized
    std::int64_t clients = 5;
    std::string partition = "dirichlet:0.5";  // homogeneous|dirichlet:<a>|bias|data-efficiency
    std::int64_t rounds = 1;
    int epochs = 10;
    double mu = 0.001;
    bool mu_set = false;

    double lr = 0.01;
    double last_layer_lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 64;
    bool augment_train = false;

    std::string cost_mode = "bbpmap";     // euclidean|bbpmap
    double epsilon = 1.0;
    double kappa = 0.1;
    double gamma0 = 7.0;
    double sigma0_sq = 1.0;
    double sigma_sq = 1.0;
    int passes = 1;

    std::uint64_t seed_data = 1, seed_init = 2, seed_match = 3;
    bool shared_init = false;
    int threads = 1;
    std::int64_t min_points = 50;
    double bias_noise = 0.25;
    std::string out_dir = "run_out";

    MatchConfig match_config() const {
        MatchConfig m;
        m.cost_mode = cost_mode == "euclidean" ? CostMode::Euclidean : CostMode::BbpMap;
        m.epsilon = epsilon;
        m.size_penalty_slope = kappa;
        m.gamma0 = gamma0;
        m.sigma0_sq = sigma0_sq;
        m.sigma_sq = sigma_sq;
        m.passes = passes;
        m.client_order_seed = seed_match;
        return m;
    }

    SgdConfig sgd_config() const {
        SgdConfig s;
        s.learning_rate = lr;
        s.last_layer_lr = last_layer_lr;
        s.momentum = momentum;
        s.weight_decay = weight_decay;
        s.epochs = epochs;
        s.batch_size = batch_size;
        s.seed = seed_init;
        return s;
    }
};

namespace detail {

inline std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::int64_t r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "0" || v == "false") return false;
    if (v == "1" || v == "true") return true;
    throw ConfigError("config key '" + key + "': expected 0/1, got '" + v + "'");
}

}  // namespace detail

inline void apply_config_entry(ExperimentConfig& c, const std::string& key, const std::string& v) {
    using detail::to_bool;
    using detail::to_double;
    using detail::to_int;
    if (key == "dataset") c.dataset = v;
    else if (key == "samples") c.samples = to_int(key, v);
    else if (key == "test_samples") c.test_samples = to_int(key, v);
    else if (key == "dim") c.dim = to_int(key, v);
    else if (key == "classes") c.classes = to_int(key, v);
    else if (key == "model") c.model = v;
    else if (key == "mlp_hidden") {
        c.mlp_hidden.clear();
        std::stringstream ss(v);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) c.mlp_hidden.push_back(to_int(key, tok));
        if (c.mlp_hidden.empty()) throw ConfigError("config key 'mlp_hidden': empty list");
    } else if (key == "embed_dim") c.embed_dim = to_int(key, v);
    else if (key == "hidden") c.hidden = to_int(key, v);
    else if (key == "seq_len") c.seq_len = to_int(key, v);
    else if (key == "strategy") c.strategy = v;
    else if (key == "clients") c.clients = to_int(key, v);
    else if (key == "partition") c.partition = v;
    else if (key == "rounds") c.rounds = to_int(key, v);
    else if (key == "epochs") c.epochs = static_cast<int>(to_int(key, v));
    else if (key == "mu") {
        c.mu = to_double(key, v);
        c.mu_set = true;
    } else if (key == "lr") c.lr = to_double(key, v);
    else if (key == "last_layer_lr") c.last_layer_lr = to_double(key, v);
    else if (key == "momentum") c.momentum = to_double(key, v);
    else if (key == "weight_decay") c.weight_decay = to_double(key, v);
    else if (key == "batch_size") c.batch_size = static_cast<int>(to_int(key, v));
    else if (key == "augment") c.augment_train = to_bool(key, v);
    else if (key == "cost_mode") c.cost_mode = v;
    else if (key == "epsilon") c.epsilon = to_double(key, v);
    else if (key == "kappa") c.kappa = to_double(key, v);
    else if (key == "gamma0") c.gamma0 = to_double(key, v);
    else if (key == "sigma0_sq") c.sigma0_sq = to_double(key, v);
    else if (key == "sigma_sq") c.sigma_sq = to_double(key, v);
    else if (key == "passes") c.passes = static_cast<int>(to_int(key, v));
    else if (key == "seed_data") c.seed_data = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "seed_init") c.seed_init = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "seed_match") c.seed_match = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "shared_init") c.shared_init = to_bool(key, v);
    else if (key == "threads") c.threads = static_cast<int>(to_int(key, v));
    else if (key == "min_points") c.min_points = to_int(key, v);
    else if (key == "bias_noise") c.bias_noise = to_double(key, v);
    else if (key == "out_dir") c.out_dir = v;
    else throw ConfigError("unknown config key '" + key + "'");
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        const auto vfirst = val.find_first_not_of(" \t");
        val = vfirst == std::string::npos ? "" : val.substr(vfirst);
        apply_config_entry(cfg, key, val);
    }
    return cfg;
}

inline double dirichlet_alpha_of(const std::string& partition) {
    const auto colon = partition.find(':');
    if (colon == std::string::npos) return 0.5;
    return detail::to_double("partition", partition.substr(colon + 1));
}

inline void validate_config(const ExperimentConfig& c) {
    static const std::set<std::string> strategies = {"fedma",    "fedma-comm", "fedavg",
                                                     "fedprox",  "ensemble",   "centralized"};
    if (!strategies.count(c.strategy)) throw ConfigError("invalid strategy '" + c.strategy + "'");
    static const std::set<std::string> models = {"lenet", "mlp", "char-lstm"};
    if (!models.count(c.model)) throw ConfigError("invalid model '" + c.model + "'");
    if (c.cost_mode != "euclidean" && c.cost_mode != "bbpmap")
        throw ConfigError("invalid cost_mode '" + c.cost_mode + "'");
    const bool text = c.dataset.rfind("text:", 0) == 0;
    if (!text && c.dataset != "digits" && c.dataset != "mnist" && c.dataset != "cifar10" &&
        c.dataset != "synth" && c.dataset != "synth-bias")
        throw ConfigError("invalid dataset '" + c.dataset + "'");
    if (c.partition != "homogeneous" && c.partition != "bias" && c.partition != "data-efficiency" &&
        c.partition.rfind("dirichlet", 0) != 0)
        throw ConfigError("invalid partition '" + c.partition + "'");
    if (c.partition.rfind("dirichlet", 0) == 0 && dirichlet_alpha_of(c.partition) <= 0.0)
        throw ConfigError("dirichlet alpha must be positive");
    if (c.mu_set && c.strategy != "fedprox")
        throw ConfigError("config key 'mu' is only valid with strategy=fedprox");
    if (c.partition == "bias" && c.dataset != "synth-bias" && c.dataset != "cifar10")
        throw ConfigError("partition=bias needs a color image dataset (synth-bias or cifar10)");
    if (c.model == "char-lstm" && !text)
        throw ConfigError("model=char-lstm needs dataset=text:<path>");
    if (text && c.model != "char-lstm")
        throw ConfigError("dataset=text:... needs model=char-lstm");
    if (c.model == "lenet" && (c.dataset == "synth" || text))
        throw ConfigError("model=lenet needs an image dataset");
    if (c.rounds < 1) throw ConfigError("rounds must be >= 1");
    if (c.strategy == "fedma" && c.rounds != 1)
        throw ConfigError("strategy=fedma is a single pass; use strategy=fedma-comm for rounds > 1");
    if (c.clients < 1) throw ConfigError("clients must be >= 1");
    if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (c.threads < 1) throw ConfigError("threads must be >= 1");
    if (c.samples < 1 || c.test_samples < 1) throw ConfigError("samples must be positive");
}

inline void write_manifest(std::ostream& os, const ExperimentConfig& c) {
    char buf[64];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::map<std::string, std::string> kv;
    kv["dataset"] = c.dataset;
    kv["samples"] = std::to_string(c.samples);
    kv["test_samples"] = std::to_string(c.test_samples);
    kv["dim"] = std::to_string(c.dim);
    kv["classes"] = std::to_string(c.classes);
    kv["model"] = c.model;
    {
        std::string h;
        for (std::size_t i = 0; i < c.mlp_hidden.size(); ++i)
            h += (i ? "," : "") + std::to_string(c.mlp_hidden[i]);
        kv["mlp_hidden"] = h;
    }
    kv["embed_dim"] = std::to_string(c.embed_dim);
    kv["hidden"] = std::to_string(c.hidden);
    kv["seq_len"] = std::to_string(c.seq_len);
    kv["strategy"] = c.strategy;
    kv["clients"] = std::to_string(c.clients);
    kv["partition"] = c.partition;
    kv["rounds"] = std::to_string(c.rounds);
    kv["epochs"] = std::to_string(c.epochs);
    if (c.strategy == "fedprox") kv["mu"] = num(c.mu);
    kv["lr"] = num(c.lr);
    kv["last_layer_lr"] = num(c.last_layer_lr);
    kv["momentum"] = num(c.momentum);
    kv["weight_decay"] = num(c.weight_decay);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["augment"] = c.augment_train ? "1" : "0";
    kv["cost_mode"] = c.cost_mode;
    kv["epsilon"] = num(c.epsilon);
    kv["kappa"] = num(c.kappa);
    kv["gamma0"] = num(c.gamma0);
    kv["sigma0_sq"] = num(c.sigma0_sq);
    kv["sigma_sq"] = num(c.sigma_sq);
    kv["passes"] = std::to_string(c.passes);
    kv["seed_data"] = std::to_string(c.seed_data);
    kv["seed_init"] = std::to_string(c.seed_init);
    kv["seed_match"] = std::to_string(c.seed_match);
    kv["shared_init"] = c.shared_init ? "1" : "0";
    kv["threads"] = std::to_string(c.threads);
    kv["min_points"] = std::to_string(c.min_points);
    kv["bias_noise"] = num(c.bias_noise);
    kv["out_dir"] = c.out_dir;
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
}

// ---- dataset / model construction ------------------------------------------

struct ExperimentData {
    Dataset train;
    Dataset test;
    std::vector<Dataset> text_clients;  // natural per-role partition (text only)
    bool is_text = false;
};

inline Dataset split_range(const Dataset& ds, std::int64_t start, std::int64_t count) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    return ds.subset(idx);
}

inline ExperimentData build_dataset(const ExperimentConfig& c) {
    ExperimentData out;
    if (c.dataset == "digits") {
        Dataset all = synth_digits(c.samples + c.test_samples, c.seed_data);
        out.train = split_range(all, 0, c.samples);
        out.test = split_range(all, c.samples, c.test_samples);
    } else if (c.dataset == "synth") {
        Dataset all = synth_classification(c.classes, c.samples + c.test_samples, c.dim, c.seed_data);
        out.train = split_range(all, 0, c.samples);
        out.test = split_range(all, c.samples, c.test_samples);
    } else if (c.dataset == "synth-bias") {
        Dataset all = synth_color_shapes(c.samples + c.test_samples, c.seed_data, 8, c.bias_noise);
        out.train = apply_grayscale_bias(split_range(all, 0, c.samples), {0, 1}, 0.95, 0.05,
                                         derive_seed(c.seed_data, 1));
        // balanced test set: half grayscale, half color in every class
        out.test = apply_grayscale_bias(split_range(all, c.samples, c.test_samples), {0, 1, 2, 3},
                                        0.5, 0.5, derive_seed(c.seed_data, 2));
    } else if (c.dataset == "mnist") {
        const char* root = std::getenv("FEDMA_DATA_DIR");
        if (!root) throw ConfigError("dataset=mnist requires FEDMA_DATA_DIR");
        Dataset train_all = load_idx(std::string(root) + "/train-images-idx3-ubyte",
                                     std::string(root) + "/train-labels-idx1-ubyte");
        Dataset test_all = load_idx(std::string(root) + "/t10k-images-idx3-ubyte",
                                    std::string(root) + "/t10k-labels-idx1-ubyte");
        Rng rng(derive_seed(c.seed_data, 3));
        std::vector<std::int64_t> idx(static_cast<std::size_t>(train_all.size()));
        for (std::int64_t i = 0; i < train_all.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(std::min(c.samples, train_all.size())));
        out.train = train_all.subset(idx);
        std::vector<std::int64_t> tidx(static_cast<std::size_t>(std::min(c.test_samples, test_all.size())));
        for (std::size_t i = 0; i < tidx.size(); ++i) tidx[i] = static_cast<std::int64_t>(i);
        out.test = test_all.subset(tidx);
    } else if (c.dataset == "cifar10") {
        const char* root = std::getenv("FEDMA_DATA_DIR");
        if (!root) throw ConfigError("dataset=cifar10 requires FEDMA_DATA_DIR");
        std::vector<std::string> files;
        for (int b = 1; b <= 5; ++b)
            files.push_back(std::string(root) + "/data_batch_" + std::to_string(b) + ".bin");
        Dataset train_all = load_cifar_bin(files);
        Dataset test_all = load_cifar_bin({std::string(root) + "/test_batch.bin"});
        Rng rng(derive_seed(c.seed_data, 3));
        std::vector<std::int64_t> idx(static_cast<std::size_t>(train_all.size()));
        for (std::int64_t i = 0; i < train_all.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(std::min(c.samples, train_all.size())));
        out.train = train_all.subset(idx);
        std::vector<std::int64_t> tidx(static_cast<std::size_t>(std::min(c.test_samples, test_all.size())));
        for (std::size_t i = 0; i < tidx.size(); ++i) tidx[i] = static_cast<std::int64_t>(i);
        out.test = test_all.subset(tidx);
    } else if (c.dataset.rfind("text:", 0) == 0) {
        const std::string path = c.dataset.substr(5);
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open text corpus: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        auto roles = char_text_dataset(ss.str(), c.seq_len, c.clients, c.min_points, c.seed_data);
        out.is_text = true;
        // per-client 80/20 split; test pieces amalgamate into the global test set
        std::vector<Dataset> tests;
        for (auto& ds : roles) {
            const std::int64_t n_train = ds.size() * 8 / 10;
            out.text_clients.push_back(split_range(ds, 0, n_train));
            tests.push_back(split_range(ds, n_train, ds.size() - n_train));
        }
        out.test.classes = tests[0].classes;
        out.test.features = Tensor({0, c.seq_len});
        for (auto& t : tests) {
            out.test.features.shape[0] += t.size();
            out.test.features.data.insert(out.test.features.data.end(), t.features.data.begin(),
                                          t.features.data.end());
            out.test.labels.insert(out.test.labels.end(), t.labels.begin(), t.labels.end());
        }
    }
    return out;
}

inline NetworkModel build_model(const ExperimentConfig& c, const ExperimentData& data) {
    const Dataset& probe = data.is_text ? data.text_clients[0] : data.train;
    if (c.model == "lenet") {
        if (probe.features.rank() != 4) throw ConfigError("lenet needs (N,C,H,W) features");
        return make_lenet(probe.features.shape[1], probe.features.shape[2], probe.classes);
    }
    if (c.model == "mlp") return make_mlp(probe.example_width(), c.mlp_hidden, probe.classes);
    return make_char_lstm(probe.classes, c.seq_len, c.embed_dim, c.hidden);
}

// ---- strategy runners -------------------------------------------------------

// Clients with empty shards sit a round out (they hold nothing to train on);
// the plan still records them.
inline std::vector<ClientState> build_clients(const ExperimentConfig& c, const ExperimentData& data,
                                              const NetworkModel& family,
                                              const std::vector<std::vector<std::int64_t>>& shards) {
    std::vector<ClientState> clients;
    for (std::size_t j = 0; j < shards.size(); ++j) {
        if (shards[j].empty()) continue;
        NetworkModel m = family;
        init_weights(m, c.shared_init ? derive_seed(c.seed_init, 0)
                                      : derive_seed(c.seed_init, 1 + j));
        clients.push_back(make_client(static_cast<std::int64_t>(j), std::move(m),
                                      data.train.subset(shards[j])));
    }
    if (clients.empty()) throw ConfigError("partition left every client empty");
    return clients;
}

inline std::vector<ClientState> build_text_clients(const ExperimentConfig& c,
                                                   const ExperimentData& data,
                                                   const NetworkModel& family) {
    std::vector<ClientState> clients;
    for (std::size_t j = 0; j < data.text_clients.size(); ++j) {
        NetworkModel m = family;
        init_weights(m, c.shared_init ? derive_seed(c.seed_init, 0)
                                      : derive_seed(c.seed_init, 1 + j));
        clients.push_back(make_client(static_cast<std::int64_t>(j), std::move(m), data.text_clients[j]));
    }
    return clients;
}

inline std::vector<std::vector<std::int64_t>> partition_shards(const ExperimentConfig& c,
                                                               const Dataset& train) {
    if (c.partition == "homogeneous")
        return partition_homogeneous(train, c.clients, c.seed_data).shards;
    if (c.partition == "bias") return partition_by_tag(train).shards;
    if (c.partition.rfind("dirichlet", 0) == 0)
        return partition_dirichlet(train, c.clients, dirichlet_alpha_of(c.partition), c.seed_data).shards;
    throw ConfigError("partition '" + c.partition + "' is not a per-run partition");
}

struct RunResult {
    std::vector<RoundReport> reports;
    NetworkModel global;
    bool has_global = false;
};

namespace detail {

inline void run_strategy(const ExperimentConfig& c, std::vector<ClientState>& clients,
                         const Dataset& test, RunResult& out, std::int64_t round_offset) {
    const MatchConfig mcfg = c.match_config();
    const std::int64_t original_params = clients[0].model.param_count();

    if (c.strategy == "fedma" || c.strategy == "fedma-comm") {
        const std::int64_t rounds = c.strategy == "fedma" ? 1 : c.rounds;
        SgdConfig sgd = c.sgd_config();
        NetworkModel g;
        auto reports = fedma_with_comm(clients, static_cast<int>(rounds), mcfg, sgd, &test, true,
                                       c.threads, &g);
        for (auto& r : reports) {
            r.round += round_offset;
            out.reports.push_back(r);
        }
        out.global = g;
        out.has_global = true;
        return;
    }

    if (c.strategy == "ensemble") {
        for (std::int64_t r = 0; r < c.rounds; ++r) {
            SgdConfig sgd = c.sgd_config();
            sgd.seed = derive_seed(c.seed_init, 0xe0 + static_cast<std::uint64_t>(r));
            for_each_client(clients.size(), c.threads, [&](std::size_t j) {
                SgdConfig local = sgd;
                local.seed = derive_seed(sgd.seed, static_cast<std::uint64_t>(clients[j].id));
                clients[j].model = train_local(clients[j].model, clients[j].data, local);
            });
            RoundReport rep;
            rep.round = round_offset + r + 1;
            rep.strategy = "ensemble";
            rep.accuracy = ensemble_eval(clients, test);
            std::int64_t params = 0, up = 0;
            for (const auto& cl : clients) {
                params += cl.model.param_count();
                up += account_message(cl.model);
            }
            rep.bytes_up = up;
            rep.bytes_down = 0;
            rep.global_params = params;
            rep.growth_rate = static_cast<double>(params) / static_cast<double>(original_params);
            out.reports.push_back(std::move(rep));
        }
        return;
    }

    if (c.strategy == "centralized") {
        Dataset pool = clients[0].data;
        for (std::size_t j = 1; j < clients.size(); ++j) {
            pool.features.shape[0] += clients[j].data.size();
            pool.features.data.insert(pool.features.data.end(), clients[j].data.features.data.begin(),
                                      clients[j].data.features.data.end());
            pool.labels.insert(pool.labels.end(), clients[j].data.labels.begin(),
                               clients[j].data.labels.end());
        }
        NetworkModel m = clients[0].model;
        for (std::int64_t r = 0; r < c.rounds; ++r) {
            SgdConfig sgd = c.sgd_config();
            sgd.seed = derive_seed(c.seed_init, 0xce + static_cast<std::uint64_t>(r));
            m = train_local(m, pool, sgd);
            RoundReport rep;
            rep.round = round_offset + r + 1;
            rep.strategy = "centralized";
            rep.accuracy = evaluate(m, test);
            rep.global_params = m.param_count();
            rep.growth_rate = 1.0;
            out.reports.push_back(std::move(rep));
        }
        out.global = m;
        out.has_global = true;
        return;
    }

    // fedavg / fedprox
    NetworkModel global;
    bool have_global = false;
    for (std::int64_t r = 0; r < c.rounds; ++r) {
        SgdConfig sgd = c.sgd_config();
        sgd.seed = derive_seed(c.seed_init, 0xfa + static_cast<std::uint64_t>(r));
        std::int64_t down = 0;
        if (have_global)
            down = static_cast<std::int64_t>(clients.size()) * account_message(global);
        NetworkModel next =
            c.strategy == "fedprox"
                ? fedprox_round(clients, have_global ? &global : nullptr, c.mu, sgd, c.threads)
                : fedavg_round(clients, have_global ? &global : nullptr, sgd, c.threads);
        global = std::move(next);
        have_global = true;
        std::int64_t up = 0;
        for (const auto& cl : clients) up += account_message(cl.model);
        RoundReport rep;
        rep.round = round_offset + r + 1;
        rep.strategy = c.strategy;
        rep.accuracy = evaluate(global, test);
        rep.bytes_up = up;
        rep.bytes_down = down;
        rep.global_params = global.param_count();
        rep.growth_rate = static_cast<double>(global.param_count()) / static_cast<double>(original_params);
        out.reports.push_back(std::move(rep));
    }
    out.global = global;
    out.has_global = true;
}

}  // namespace detail

inline RunResult run_experiment_core(const ExperimentConfig& c) {
    validate_config(c);
    ExperimentData data = build_dataset(c);
    NetworkModel family = build_model(c, data);
    RunResult out;

    if (data.is_text) {
        auto clients = build_text_clients(c, data, family);
        detail::run_strategy(c, clients, data.test, out, 0);
        return out;
    }

    if (c.partition == "data-efficiency") {
        auto stages = data_efficiency_plan(data.train, 5, 5, 0.5, c.seed_data);
        std::int64_t offset = 0;
        for (const auto& stage : stages) {
            auto clients = build_clients(c, data, family, stage.shards);
            detail::run_strategy(c, clients, data.test, out, offset);
            offset = out.reports.back().round;
        }
        return out;
    }

    auto clients = build_clients(c, data, family, partition_shards(c, data.train));
    detail::run_strategy(c, clients, data.test, out, 0);
    return out;
}

// Runs the experiment and writes rounds.csv, the final checkpoint and the
// resolved-config manifest into out_dir. Returns the process exit code.
inline int run_experiment(const ExperimentConfig& c, std::ostream& log) {
    validate_config(c);
    std::filesystem::create_directories(c.out_dir);
    {
        std::ofstream mf(c.out_dir + "/manifest.txt");
        write_manifest(mf, c);
    }
    RunResult result;
    int code = 0;
    try {
        result = run_experiment_core(c);
    } catch (const DivergenceError& e) {
        log << "training diverged: " << e.what() << "\n";
        code = 3;
    }
    {
        std::ofstream rf(c.out_dir + "/rounds.csv");
        write_reports_csv(rf, result.reports);
    }
    if (result.has_global)
        save_checkpoint(c.out_dir + "/final.fma", model_to_tensors(result.global));
    if (!result.reports.empty()) {
        const auto& last = result.reports.back();
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4f", last.accuracy);
        log << "final: strategy=" << last.strategy << " rounds=" << last.round
            << " accuracy=" << buf << " growth=" << last.growth_rate << "\n";
    }
    return code;
}

}  // namespace fedma
