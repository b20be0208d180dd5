#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "cka/data.hpp"
#include "cka/rng.hpp"

using namespace cka;

namespace {

// test-side oracle: class centroids from the train split, nearest-centroid
// prediction on the test split
double nearest_centroid_accuracy(const Dataset& train, const Dataset& test) {
    const std::size_t c = train.class_count, d = train.dim;
    std::vector<double> centers(c * d, 0.0);
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const int y = train.labels[i];
        ++counts[y];
        for (std::size_t k = 0; k < d; ++k) centers[y * d + k] += train.samples[i * d + k];
    }
    for (std::size_t cls = 0; cls < c; ++cls)
        for (std::size_t k = 0; k < d; ++k) centers[cls * d + k] /= static_cast<double>(counts[cls]);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        double best = 1e300;
        int arg = -1;
        for (std::size_t cls = 0; cls < c; ++cls) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = test.samples[i * d + k] - centers[cls * d + k];
                s += diff * diff;
            }
            if (s < best) {
                best = s;
                arg = static_cast<int>(cls);
            }
        }
        if (arg == test.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

std::filesystem::path temp_dir(const char* tag) {
    auto dir = std::filesystem::temp_directory_path() / (std::string("cka_data_") + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx_image_fixture() {
    // 4 images of 2x2 pixels
    std::vector<unsigned char> b = {0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 2};
    for (int i = 0; i < 16; ++i) b.push_back(static_cast<unsigned char>(i * 16));
    return b;
}

std::vector<unsigned char> idx_label_fixture(std::vector<unsigned char> labels) {
    std::vector<unsigned char> b = {0, 0, 8, 1, 0, 0, 0, static_cast<unsigned char>(labels.size())};
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

}  // namespace

TEST_CASE("blob generation is seeded and separable") {
    auto [train, test] = gen_blobs(4, 8, 50, 10.0, 21);
    auto [train2, test2] = gen_blobs(4, 8, 50, 10.0, 21);
    CHECK(train.samples == train2.samples);
    CHECK(test.labels == test2.labels);

    auto [train3, _] = gen_blobs(4, 8, 50, 10.0, 22);
    CHECK(train.samples != train3.samples);

    // per-class train counts exactly equal: 40 each
    std::vector<int> counts(4, 0);
    for (int y : train.labels) ++counts[y];
    for (int c : counts) CHECK(c == 40);
    CHECK(train.size() == 160);
    CHECK(test.size() == 40);

    // 10-sigma separation: nearest-centroid oracle is essentially perfect
    CHECK(nearest_centroid_accuracy(train, test) >= 0.99);
}

TEST_CASE("blob center placement fails loudly when infeasible") {
    // 64 clusters on a line cannot keep 10-sigma spacing at this spread
    CHECK_THROWS_AS(gen_blobs(64, 1, 2, 10.0, 3), std::runtime_error);
}

TEST_CASE("idx ingestion") {
    auto dir = temp_dir("idx");
    write_bytes(dir / "images.idx", idx_image_fixture());
    write_bytes(dir / "labels.idx", idx_label_fixture({0, 1, 2, 1}));

    Dataset d = load_idx(dir / "images.idx", dir / "labels.idx", 3);
    CHECK(d.size() == 4);
    CHECK(d.dim == 4);
    CHECK(d.labels == std::vector<int>{0, 1, 2, 1});
    CHECK(d.samples[1] == Catch::Approx(16.0 / 255.0));
    for (double v : d.samples) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    // label value outside the declared class range
    write_bytes(dir / "badlabels.idx", idx_label_fixture({0, 255, 2, 1}));
    CHECK_THROWS(load_idx(dir / "images.idx", dir / "badlabels.idx", 10));

    // magic mismatch and truncation
    auto bad_magic = idx_image_fixture();
    bad_magic[2] = 9;
    write_bytes(dir / "badmagic.idx", bad_magic);
    CHECK_THROWS(load_idx_images(dir / "badmagic.idx"));
    auto truncated = idx_image_fixture();
    truncated.resize(truncated.size() - 3);
    write_bytes(dir / "trunc.idx", truncated);
    CHECK_THROWS(load_idx_images(dir / "trunc.idx"));

    std::filesystem::remove_all(dir);
}

TEST_CASE("task splitting") {
    TaskSplit split = split_tasks(8, 2, 5);
    REQUIRE(split.tasks.size() == 2);
    CHECK(split.tasks[0].class_ids.size() == 4);
    CHECK(split.tasks[1].class_ids.size() == 4);
    CHECK(split.tasks[0].slot_begin == 0);
    CHECK(split.tasks[1].slot_begin == 4);

    std::set<int> seen(split.tasks[0].class_ids.begin(), split.tasks[0].class_ids.end());
    for (int c : split.tasks[1].class_ids) CHECK(seen.insert(c).second);
    CHECK(seen.size() == 8);

    TaskSplit again = split_tasks(8, 2, 5);
    CHECK(again.tasks[0].class_ids == split.tasks[0].class_ids);

    CHECK_THROWS(split_tasks(7, 2, 5));
    CHECK_THROWS(split_tasks(8, 0, 5));

    // slot mapping round trip
    for (std::size_t slot = 0; slot < 8; ++slot) {
        const int cls = split.slot_class_ids[slot];
        CHECK(split.slot_of(cls) == static_cast<int>(slot));
    }
    CHECK_THROWS(split.slot_of(8));
    CHECK(split.task_of_slot(0) == 0);
    CHECK(split.task_of_slot(7) == 1);
}

TEST_CASE("task partitions are disjoint and covering for random shapes") {
    Rng rng(99);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t teachers = 1 + rng.index(5);
        const std::size_t classes = teachers * (1 + rng.index(6));
        TaskSplit split = split_tasks(classes, teachers, rng.index(1000));
        std::set<int> all;
        for (const TaskSpec& t : split.tasks) {
            CHECK(t.class_ids.size() == classes / teachers);
            for (int c : t.class_ids) CHECK(all.insert(c).second);
        }
        CHECK(all.size() == classes);
    }
}

TEST_CASE("explicit subsets validate coverage") {
    TaskSplit s = split_from_subsets({{2, 0}, {1, 3}}, 4);
    CHECK(s.tasks[1].slot_begin == 2);
    CHECK(s.slot_of(2) == 0);
    CHECK(s.slot_of(1) == 2);
    CHECK_THROWS(split_from_subsets({{0, 1}, {1, 2}}, 3));   // overlap
    CHECK_THROWS(split_from_subsets({{0, 1}}, 3));           // gap
}

TEST_CASE("two views") {
    Tensor batch({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});

    AugmentationPolicy identity;
    auto [i1, i2] = two_views(identity, batch, 0, 0);
    CHECK(i1.values() == batch.values());
    CHECK(i2.values() == batch.values());

    AugmentationPolicy noisy{0.3, 0.1, 0.05, 77};
    auto [v1, v2] = two_views(noisy, batch, 2, 5);
    CHECK(v1.values() != batch.values());
    CHECK(v1.values() != v2.values());
    CHECK(v1.shape() == batch.shape());

    auto [r1, r2] = two_views(noisy, batch, 2, 5);
    CHECK(r1.values() == v1.values());
    CHECK(r2.values() == v2.values());

    auto [o1, o2] = two_views(noisy, batch, 2, 6);
    CHECK(o1.values() != v1.values());
}

TEST_CASE("mini-batching") {
    auto batches = make_batches(130, 64, 4, 0);
    CHECK(batches.size() == 2);
    for (const auto& b : batches) CHECK(b.size() == 64);

    CHECK(make_batches(130, 64, 4, 0) == batches);
    CHECK(make_batches(130, 64, 4, 1) != batches);

    auto full = make_batches(130, 64, 4, 0, false);
    CHECK(full.size() == 3);
    std::set<std::size_t> seen;
    for (const auto& b : full)
        for (std::size_t i : b) CHECK(seen.insert(i).second);
    CHECK(seen.size() == 130);

    CHECK_THROWS(make_batches(10, 1, 4, 0));
}

TEST_CASE("dataset persistence round trip") {
    auto dir = temp_dir("persist");
    auto [train, test] = gen_blobs(3, 6, 10, 8.0, 13);
    save_dataset(dir, train, test, {{"kind", "blobs"}, {"seed", 13}});
    auto [ltrain, ltest] = load_dataset(dir);
    CHECK(ltrain.samples == train.samples);
    CHECK(ltrain.labels == train.labels);
    CHECK(ltest.samples == test.samples);
    CHECK(ltest.class_count == 3);

    // unlabeled pool drops annotations structurally
    CHECK_FALSE(train.unlabeled().labeled());
    CHECK(train.unlabeled().samples == train.samples);

    std::filesystem::remove_all(dir);
}
