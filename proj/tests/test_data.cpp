#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fedma/data.hpp"
#include "fedma/nn.hpp"

using namespace fedma;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(Idx, TinyFixtureRoundTrips) {
    Dataset ds;
    ds.classes = 10;
    ds.features = Tensor({1, 1, 1, 1}, {0.5});
    ds.labels = {7};
    const std::string imgs = tmp_path("fedma_idx_img"), labs = tmp_path("fedma_idx_lab");
    save_idx(ds, imgs, labs);
    Dataset back = load_idx(imgs, labs);
    EXPECT_EQ(back.size(), 1);
    EXPECT_EQ(back.labels[0], 7);
    EXPECT_NEAR(back.features[0], 128.0 / 255.0, 1e-12);
    std::filesystem::remove(imgs);
    std::filesystem::remove(labs);
}

TEST(Idx, CountMismatchAndBadMagicRaise) {
    Dataset ds;
    ds.classes = 10;
    ds.features = Tensor({2, 1, 2, 2});
    ds.labels = {1, 2};
    const std::string imgs = tmp_path("fedma_idx_img2"), labs = tmp_path("fedma_idx_lab2");
    save_idx(ds, imgs, labs);
    Dataset one;
    one.classes = 10;
    one.features = Tensor({1, 1, 2, 2});
    one.labels = {3};
    const std::string labs1 = tmp_path("fedma_idx_lab3");
    save_idx(one, tmp_path("fedma_idx_img3"), labs1);
    EXPECT_THROW(load_idx(imgs, labs1), DataError);
    std::ofstream(tmp_path("fedma_idx_bad"), std::ios::binary) << "garbage here";
    EXPECT_THROW(load_idx(tmp_path("fedma_idx_bad"), labs), DataError);
    EXPECT_THROW(load_idx(imgs, tmp_path("fedma_idx_bad")), DataError);
    for (const char* f : {"fedma_idx_img2", "fedma_idx_lab2", "fedma_idx_img3", "fedma_idx_lab3",
                          "fedma_idx_bad"})
        std::filesystem::remove(tmp_path(f));
}

TEST(Idx, OfficialTestFileHasTenThousandExamples) {
    const char* root = std::getenv("FEDMA_DATA_DIR");
    if (!root) GTEST_SKIP() << "FEDMA_DATA_DIR not set";
    const std::string imgs = std::string(root) + "/t10k-images-idx3-ubyte";
    const std::string labs = std::string(root) + "/t10k-labels-idx1-ubyte";
    if (!std::filesystem::exists(imgs)) GTEST_SKIP() << "MNIST test files not present";
    Dataset ds = load_idx(imgs, labs);
    EXPECT_EQ(ds.size(), 10000);
}

TEST(Cifar, RecordCountFollowsFileSize) {
    const std::string path = tmp_path("fedma_cifar.bin");
    std::ofstream f(path, std::ios::binary);
    for (int rec = 0; rec < 3; ++rec) {
        unsigned char label = static_cast<unsigned char>(rec);
        f.write(reinterpret_cast<char*>(&label), 1);
        for (int k = 0; k < 3072; ++k) {
            unsigned char px = static_cast<unsigned char>((k + rec) % 256);
            f.write(reinterpret_cast<char*>(&px), 1);
        }
    }
    f.close();
    Dataset ds = load_cifar_bin({path}, false);
    EXPECT_EQ(ds.size(), 3);
    EXPECT_EQ(ds.labels[2], 2);
    EXPECT_NEAR(ds.features[0], 0.0, 1e-12);          // record 0, pixel k=0
    EXPECT_NEAR(ds.features[1], 1.0 / 255.0, 1e-12);  // record 0, pixel k=1
    std::ofstream(path, std::ios::binary) << "short";
    EXPECT_THROW(load_cifar_bin({path}), DataError);
    std::filesystem::remove(path);
}

TEST(Cifar, NormalizationMapsChannelMeanToZeroAndInverts) {
    const auto st = cifar_channel_stats();
    Tensor x({2, 3, 4, 4});
    Rng rng(3);
    for (auto& v : x.data) v = rng.uniform();
    x.data[0] = st.mean[0];           // first pixel of channel r
    x.data[16] = st.mean[1];          // first pixel of channel g
    Tensor norm = x;
    normalize_channels(norm, st);
    EXPECT_NEAR(norm.data[0], 0.0, 1e-12);
    EXPECT_NEAR(norm.data[16], 0.0, 1e-12);
    denormalize_channels(norm, st);
    EXPECT_LT(max_abs_diff(norm, x), 1e-12);
}

TEST(Synth, ClassBalanceExactAndDeterministic) {
    Dataset a = synth_classification(5, 100, 8, 42);
    Dataset b = synth_classification(5, 100, 8, 42);
    EXPECT_EQ(a.features.data, b.features.data);
    EXPECT_EQ(a.labels, b.labels);
    auto hist = a.class_histogram();
    for (auto h : hist) EXPECT_EQ(h, 20);
    Dataset c = synth_classification(5, 100, 8, 43);
    EXPECT_NE(a.features.data, c.features.data);
}

TEST(Synth, BlobsSeparableByCentroidOracle) {
    Dataset all = synth_classification(4, 800, 6, 7, 6.0);
    std::vector<std::int64_t> front(400), back(400);
    for (int i = 0; i < 400; ++i) {
        front[static_cast<std::size_t>(i)] = i;
        back[static_cast<std::size_t>(i)] = 400 + i;
    }
    Dataset train = all.subset(front);
    Dataset test = all.subset(back);
    // independent nearest-centroid classifier
    std::vector<std::vector<double>> centroid(4, std::vector<double>(6, 0.0));
    std::vector<double> count(4, 0.0);
    for (std::int64_t i = 0; i < train.size(); ++i) {
        const auto k = static_cast<std::size_t>(train.labels[static_cast<std::size_t>(i)]);
        count[k] += 1.0;
        for (int d = 0; d < 6; ++d) centroid[k][static_cast<std::size_t>(d)] += train.features[static_cast<std::size_t>(i * 6 + d)];
    }
    for (std::size_t k = 0; k < 4; ++k)
        for (auto& v : centroid[k]) v /= count[k];
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < test.size(); ++i) {
        double best = 1e18;
        std::size_t arg = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            double d2 = 0.0;
            for (int d = 0; d < 6; ++d) {
                const double diff = test.features[static_cast<std::size_t>(i * 6 + d)] - centroid[k][static_cast<std::size_t>(d)];
                d2 += diff * diff;
            }
            if (d2 < best) {
                best = d2;
                arg = k;
            }
        }
        if (static_cast<std::int64_t>(arg) == test.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(test.size()), 0.99);
}

TEST(SynthDigits, DeterministicBalancedAndInRange) {
    Dataset a = synth_digits(50, 9);
    Dataset b = synth_digits(50, 9);
    EXPECT_EQ(a.features.data, b.features.data);
    auto hist = a.class_histogram();
    for (auto h : hist) EXPECT_EQ(h, 5);
    for (double v : a.features.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(PartitionHomogeneous, DegenerateAndBalancedCases) {
    Dataset ds = synth_classification(4, 40, 3, 11);
    PartitionPlan full = partition_homogeneous(ds, 1, 1);
    EXPECT_EQ(full.shards[0].size(), 40u);
    PartitionPlan singles = partition_homogeneous(ds, 40, 1);
    for (const auto& s : singles.shards) EXPECT_EQ(s.size(), 1u);

    PartitionPlan plan = partition_homogeneous(ds, 3, 5);
    std::vector<char> seen(40, 0);
    for (std::size_t j = 0; j < 3; ++j) {
        auto shard = ds.subset(plan.shards[j]);
        auto hist = shard.class_histogram();
        for (auto h : hist) EXPECT_NEAR(static_cast<double>(h), 10.0 / 3.0, 1.0);
        for (auto i : plan.shards[j]) {
            EXPECT_FALSE(seen[static_cast<std::size_t>(i)]);
            seen[static_cast<std::size_t>(i)] = 1;
        }
    }
}

TEST(PartitionDirichlet, ConservesClassTotalsAndIsDeterministic) {
    Dataset ds = synth_classification(5, 200, 3, 13);
    PartitionPlan a = partition_dirichlet(ds, 4, 0.5, 21);
    PartitionPlan b = partition_dirichlet(ds, 4, 0.5, 21);
    EXPECT_EQ(a.shards, b.shards);
    // disjoint union preserving per-class totals
    std::vector<std::int64_t> hist(5, 0);
    std::vector<char> seen(200, 0);
    for (const auto& shard : a.shards)
        for (auto i : shard) {
            EXPECT_FALSE(seen[static_cast<std::size_t>(i)]);
            seen[static_cast<std::size_t>(i)] = 1;
            ++hist[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
        }
    for (auto h : hist) EXPECT_EQ(h, 40);
}

TEST(PartitionDirichlet, HugeAlphaApproachesHomogeneous) {
    Dataset ds = synth_classification(5, 1000, 3, 17);
    PartitionPlan plan = partition_dirichlet(ds, 4, 1e6, 23);
    // average total-variation distance from the uniform split, over classes
    double tv_sum = 0.0;
    auto by_class_hist = [&](std::size_t j) {
        auto shard = ds.subset(plan.shards[j]);
        return shard.class_histogram();
    };
    std::vector<std::vector<std::int64_t>> hists;
    for (std::size_t j = 0; j < 4; ++j) hists.push_back(by_class_hist(j));
    for (std::int64_t k = 0; k < 5; ++k) {
        double tv = 0.0;
        for (std::size_t j = 0; j < 4; ++j)
            tv += 0.5 * std::fabs(static_cast<double>(hists[j][static_cast<std::size_t>(k)]) / 200.0 - 0.25);
        tv_sum += tv;
    }
    EXPECT_LT(tv_sum / 5.0, 0.05);
}

TEST(GrayscaleBias, FractionZeroAndOneBehave) {
    Dataset ds = synth_color_shapes(40, 31);
    Dataset untouched = apply_grayscale_bias(ds, {0, 1}, 0.0, 0.0, 5);
    EXPECT_EQ(untouched.features.data, ds.features.data);
    for (auto t : untouched.tags) EXPECT_EQ(t, 0);

    Dataset gray = apply_grayscale_bias(ds, {0, 1, 2, 3}, 1.0, 1.0, 5);
    const std::int64_t hw = 64;
    for (std::int64_t i = 0; i < gray.size(); ++i) {
        EXPECT_EQ(gray.tags[static_cast<std::size_t>(i)], 1);
        for (std::int64_t p = 0; p < hw; ++p) {
            const double r = gray.features[static_cast<std::size_t>(i * 3 * hw + p)];
            const double g = gray.features[static_cast<std::size_t>(i * 3 * hw + hw + p)];
            const double b = gray.features[static_cast<std::size_t>(i * 3 * hw + 2 * hw + p)];
            EXPECT_DOUBLE_EQ(r, g);
            EXPECT_DOUBLE_EQ(g, b);
        }
    }
}

TEST(GrayscaleBias, TagCountsMatchFractions) {
    Dataset ds = synth_color_shapes(400, 37);
    Dataset biased = apply_grayscale_bias(ds, {0, 1}, 0.95, 0.05, 7);
    std::vector<std::int64_t> gray_count(4, 0), total(4, 0);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        ++total[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
        if (biased.tags[static_cast<std::size_t>(i)])
            ++gray_count[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
    }
    for (int k = 0; k < 4; ++k) {
        const double frac = k < 2 ? 0.95 : 0.05;
        EXPECT_EQ(gray_count[static_cast<std::size_t>(k)],
                  std::llround(frac * static_cast<double>(total[static_cast<std::size_t>(k)])));
    }
}

TEST(Augment, DeterministicShapePreservingAndFlipInvolutive) {
    Dataset ds = synth_color_shapes(10, 41);
    Tensor a = augment(ds.features, 51);
    Tensor b = augment(ds.features, 51);
    EXPECT_EQ(a.data, b.data);
    EXPECT_EQ(a.shape, ds.features.shape);
    Tensor c = augment(ds.features, 52);
    EXPECT_NE(c.data, a.data);

    // the horizontal flip used by augmentation is an involution
    auto flip = [](const Tensor& x) {
        Tensor y(x.shape);
        const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        for (std::int64_t i = 0; i < N * C; ++i)
            for (std::int64_t r = 0; r < H; ++r)
                for (std::int64_t cc = 0; cc < W; ++cc)
                    y.data[(i * H + r) * W + cc] = x.data[(i * H + r) * W + (W - 1 - cc)];
        return y;
    };
    EXPECT_EQ(flip(flip(ds.features)).data, ds.features.data);
}

TEST(CharText, RolesParsedFilteredAndPatterned) {
    EXPECT_EQ(char_vocab().size(), 80u);
    std::string ab;
    for (int i = 0; i < 60; ++i) ab += "ab";
    const std::string text = "HAMLET. " + ab + "\nOPHELIA. hi\n";
    // the short role is dropped by min_points
    auto clients = char_text_dataset(text, 4, 10, 50);
    ASSERT_EQ(clients.size(), 1u);
    const Dataset& ds = clients[0];
    EXPECT_EQ(ds.classes, 80);
    for (std::int64_t i = 0; i + 1 < ds.size(); ++i) {
        const auto last = static_cast<std::int64_t>(ds.features.data[static_cast<std::size_t>(i * 4 + 3)]);
        if (last == char_to_id('a')) EXPECT_EQ(ds.labels[static_cast<std::size_t>(i)], char_to_id('b'));
        if (last == char_to_id('b') && i + 2 < ds.size())
            EXPECT_EQ(ds.labels[static_cast<std::size_t>(i)], char_to_id('a'));
    }
    // out-of-vocabulary characters map to the reserved symbol
    EXPECT_EQ(char_to_id('~'), 79);
    EXPECT_EQ(char_to_id('}'), 79);
}

TEST(CharText, RoleSubsetIsSeededAndSized) {
    std::string text;
    for (char r = 'A'; r < 'A' + 6; ++r) {
        text += std::string(1, r) + std::string(1, r) + ". ";
        for (int i = 0; i < 80; ++i) text += "the quick brown fox ";
        text += "\n";
    }
    auto five = char_text_dataset(text, 5, 5, 10, 3);
    EXPECT_EQ(five.size(), 5u);
    auto again = char_text_dataset(text, 5, 5, 10, 3);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(five[j].labels, again[j].labels);
}

TEST(DataEfficiency, StagesGrowAndFinalStageCoversEverything) {
    Dataset ds = synth_classification(5, 500, 3, 19);
    auto stages = data_efficiency_plan(ds, 5, 5, 0.5, 29);
    ASSERT_EQ(stages.size(), 5u);
    EXPECT_EQ(stages[0].shards.size(), 5u);
    EXPECT_EQ(stages[4].shards.size(), 25u);
    std::vector<char> seen(500, 0);
    for (const auto& shard : stages[4].shards)
        for (auto i : shard) {
            EXPECT_FALSE(seen[static_cast<std::size_t>(i)]);
            seen[static_cast<std::size_t>(i)] = 1;
        }
    for (char s : seen) EXPECT_TRUE(s);
    // each stage's first shards coincide with the previous stage
    for (std::size_t t = 1; t < 5; ++t)
        for (std::size_t j = 0; j < stages[t - 1].shards.size(); ++j)
            EXPECT_EQ(stages[t].shards[j], stages[t - 1].shards[j]);
    // the five top groups are homogeneous within +-1 per class
    Rng probe_rng(1);
    for (std::size_t g = 0; g < 5; ++g) {
        std::vector<std::int64_t> members;
        for (std::size_t s = 0; s < 5; ++s)
            members.insert(members.end(), stages[4].shards[g * 5 + s].begin(),
                           stages[4].shards[g * 5 + s].end());
        auto hist = ds.subset(members).class_histogram();
        for (auto h : hist) EXPECT_NEAR(static_cast<double>(h), 20.0, 1.0);
    }
}

TEST(PartitionCsv, SchemaAndTagSplit) {
    Dataset ds = synth_color_shapes(20, 43);
    Dataset biased = apply_grayscale_bias(ds, {0, 1}, 1.0, 0.0, 9);
    PartitionPlan plan = partition_by_tag(biased);
    EXPECT_EQ(plan.client_count, 2);
    std::ostringstream os;
    write_partition_csv(os, plan);
    EXPECT_EQ(os.str().substr(0, 13), "client,index\n");
    std::int64_t rows = -1;  // header
    for (char c : os.str())
        if (c == '\n') ++rows;
    EXPECT_EQ(rows, 20);
}
