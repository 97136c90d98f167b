#include <catch2/catch_amalgamated.hpp>

#include "tomoworld/volume.hpp"

using namespace tw;

TEST_CASE("empty ellipsoid list gives an all-zero volume") {
    PhantomSpec spec;
    Volume v = generate_phantom(spec, {16, 16, 16}, 1.0f);
    for (float x : v.data) REQUIRE(x == 0.0f);
}

TEST_CASE("single centered ellipsoid: center voxel inside, corners outside") {
    PhantomSpec spec;
    spec.ellipsoids.push_back({{0, 0, 0}, {0.5, 0.5, 0.5}, 0.0, 1.0, false});
    Volume v = generate_phantom(spec, {32, 32, 32}, 1.0f);
    REQUIRE(v.at(16, 16, 16) == 1.0f);
    REQUIRE(v.at(0, 0, 0) == 0.0f);
    REQUIRE(v.at(31, 31, 31) == 0.0f);
}

TEST_CASE("overlapping ellipsoids sum densities, checked against brute force") {
    PhantomSpec spec;
    spec.ellipsoids.push_back({{-0.1, 0.0, 0.0}, {0.4, 0.3, 0.5}, 20.0, 0.3, false});
    spec.ellipsoids.push_back({{0.15, 0.05, -0.1}, {0.35, 0.45, 0.3}, -35.0, 0.5, false});
    Volume v = generate_phantom(spec, {32, 32, 32}, 1.0f);

    bool saw_overlap = false;
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                double px = -1.0 + (x + 0.5) / 16.0;
                double py = -1.0 + (y + 0.5) / 16.0;
                double pz = -1.0 + (z + 0.5) / 16.0;
                double want = 0;
                for (const auto& e : spec.ellipsoids)
                    if (ellipsoid_contains(e, px, py, pz)) want += e.density;
                REQUIRE(v.at(x, y, z) == Catch::Approx(want).margin(1e-7));
                if (want > 0.75) saw_overlap = true;
            }
    REQUIRE(saw_overlap);  // 0.3 + 0.5 overlap region actually exercised
}

TEST_CASE("generate_phantom is deterministic and additive") {
    auto pop = sample_phantom_population(2, 77, 1.0);
    Volume a1 = generate_phantom(pop.specs[0], {24, 24, 24}, 0.5f);
    Volume a2 = generate_phantom(pop.specs[0], {24, 24, 24}, 0.5f);
    REQUIRE(a1.data == a2.data);

    // additivity: union spec == voxel-wise sum
    PhantomSpec uni = pop.specs[0];
    for (const auto& e : pop.specs[1].ellipsoids) uni.ellipsoids.push_back(e);
    Volume b = generate_phantom(pop.specs[1], {24, 24, 24}, 0.5f);
    Volume u = generate_phantom(uni, {24, 24, 24}, 0.5f);
    for (size_t i = 0; i < u.data.size(); ++i)
        REQUIRE(u.data[i] == Catch::Approx(a1.data[i] + b.data[i]).margin(1e-6));
}

TEST_CASE("invalid semi-axis is rejected") {
    PhantomSpec spec;
    spec.ellipsoids.push_back({{0, 0, 0}, {0.5, 0.0, 0.5}, 0.0, 1.0, false});
    REQUIRE_THROWS_AS(generate_phantom(spec, {16, 16, 16}, 1.0f), Error);
}

TEST_CASE("population labels follow the lesion rate") {
    auto all0 = sample_phantom_population(10, 5, 0.0);
    for (int l : all0.labels) REQUIRE(l == 0);

    auto all1 = sample_phantom_population(10, 5, 1.0);
    for (size_t i = 0; i < all1.labels.size(); ++i) {
        REQUIRE(all1.labels[i] == 1);
        bool has_lesion = false;
        for (const auto& e : all1.specs[i].ellipsoids) has_lesion |= e.lesion;
        REQUIRE(has_lesion);
    }

    auto half = sample_phantom_population(1000, 123, 0.5);
    double mean = 0;
    for (int l : half.labels) mean += l;
    mean /= 1000.0;
    REQUIRE(mean >= 0.45);
    REQUIRE(mean <= 0.55);

    auto half2 = sample_phantom_population(1000, 123, 0.5);
    REQUIRE(half.labels == half2.labels);
}

TEST_CASE("population phantoms are nonnegative and stay in the inscribed cylinder") {
    auto pop = sample_phantom_population(8, 42, 0.7);
    for (const auto& spec : pop.specs) {
        Volume v = generate_phantom(spec, {32, 32, 32}, 1.0f);
        REQUIRE_NOTHROW(v.validate());
        for (const auto& e : spec.ellipsoids) {
            double r = std::hypot(e.center[0], e.center[1]);
            double reach = r + std::max(e.semi_axes[0], e.semi_axes[1]);
            REQUIRE(reach <= 1.0);
        }
    }
}

TEST_CASE("volume save/load round trip is bit exact") {
    Rng rng(9);
    Volume v;
    v.nx = v.ny = v.nz = 16;
    v.spacing = 0.75f;
    v.id = "vol_rt";
    v.data.resize(v.numel());
    for (auto& x : v.data) x = float(rng.uniform());

    auto dir = fs::temp_directory_path() / "tw_vol_rt";
    fs::create_directories(dir);
    save_volume(v, dir / "v.vol");
    Volume w = load_volume(dir / "v.vol");
    REQUIRE(w.nx == v.nx);
    REQUIRE(w.spacing == v.spacing);
    REQUIRE(w.id == v.id);
    REQUIRE(std::memcmp(w.data.data(), v.data.data(), v.data.size() * 4) == 0);
}

TEST_CASE("asymmetric shape is preserved exactly") {
    Volume v;
    v.nx = 8;
    v.ny = 16;
    v.nz = 32;
    v.spacing = 1.0f;
    v.id = "aniso";
    v.data.assign(v.numel(), 0.5f);
    v.at(3, 11, 29) = 2.0f;

    auto dir = fs::temp_directory_path() / "tw_vol_shape";
    fs::create_directories(dir);
    save_volume(v, dir / "v.vol");
    Volume w = load_volume(dir / "v.vol");
    REQUIRE(w.nx == 8);
    REQUIRE(w.ny == 16);
    REQUIRE(w.nz == 32);
    REQUIRE(w.at(3, 11, 29) == 2.0f);
}

TEST_CASE("truncated payload is a size-mismatch error") {
    Volume v;
    v.nx = v.ny = v.nz = 8;
    v.spacing = 1.0f;
    v.data.assign(v.numel(), 1.0f);
    auto dir = fs::temp_directory_path() / "tw_vol_trunc";
    fs::create_directories(dir);
    save_volume(v, dir / "v.vol");
    fs::resize_file(dir / "v.raw", 100);
    REQUIRE_THROWS_WITH(load_volume(dir / "v.vol"), Catch::Matchers::ContainsSubstring("size mismatch"));
}

TEST_CASE("manifest round trip, split partition and duplicate detection") {
    DatasetManifest m;
    m.records.push_back({"a", "vols/a.vol", "train", {{"lesion", 1}}});
    m.records.push_back({"b", "vols/b.vol", "val", {{"lesion", 0}}});
    m.records.push_back({"c", "vols/c.vol", "test", {}});
    auto dir = fs::temp_directory_path() / "tw_manifest";
    fs::create_directories(dir);
    save_manifest(m, dir / "manifest.txt");
    DatasetManifest r = load_manifest(dir / "manifest.txt");
    REQUIRE(r.records.size() == 3);
    REQUIRE(r.records[0].labels.at("lesion") == 1);
    REQUIRE(r.records[2].labels.empty());

    r.records.push_back({"a", "x", "train", {}});
    REQUIRE_THROWS_AS(r.validate(), Error);

    auto splits = assign_splits(200, 11, 0.7, 0.1);
    int tr = 0, va = 0, te = 0;
    for (const auto& s : splits) (s == "train" ? tr : s == "val" ? va : te)++;
    REQUIRE(tr == 140);
    REQUIRE(va == 20);
    REQUIRE(te == 40);
}

TEST_CASE("rotate_spec_z rotates centers and angles consistently") {
    PhantomSpec spec;
    spec.ellipsoids.push_back({{0.5, 0.0, 0.1}, {0.2, 0.1, 0.15}, 10.0, 1.0, false});
    PhantomSpec rot = rotate_spec_z(spec, 90.0);
    REQUIRE(rot.ellipsoids[0].center[0] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(rot.ellipsoids[0].center[1] == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(rot.ellipsoids[0].rot_z_deg == Catch::Approx(100.0));

    // membership is preserved under rotation of both spec and query point
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        double px = rng.uniform(-1, 1), py = rng.uniform(-1, 1), pz = rng.uniform(-1, 1);
        double c = std::cos(M_PI / 2), s = std::sin(M_PI / 2);
        double qx = c * px - s * py, qy = s * px + c * py;
        REQUIRE(ellipsoid_contains(spec.ellipsoids[0], px, py, pz) ==
                ellipsoid_contains(rot.ellipsoids[0], qx, qy, pz));
    }
}
