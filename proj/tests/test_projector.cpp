#include <catch2/catch_amalgamated.hpp>

#include "tomoworld/metrics.hpp"
#include "tomoworld/projector.hpp"

using namespace tw;

TEST_CASE("make_trajectory canonical indexing") {
    Trajectory t5 = make_trajectory(5.0);
    REQUIRE(t5.positions() == 37);
    REQUIRE(t5.angles_deg[18] == Catch::Approx(0.0));
    REQUIRE(t5.angles_deg.front() == Catch::Approx(-90.0));
    REQUIRE(t5.angles_deg.back() == Catch::Approx(90.0));

    Trajectory t90 = make_trajectory(90.0);
    REQUIRE(t90.positions() == 3);

    Trajectory t30 = make_trajectory(30.0);
    REQUIRE(t30.positions() == 7);
    REQUIRE(t30.actions.size() == 6);
    for (Action a : t30.actions) REQUIRE(a == Action::CW);

    REQUIRE_THROWS_AS(make_trajectory(7.0), Error);

    // canonical index map k <-> -90 + k*step is a bijection
    for (int k = 0; k < t5.positions(); ++k) REQUIRE(t5.index_of(-90.0 + 5.0 * k) == k);
}

TEST_CASE("zero volume projects to zero at every angle") {
    Volume v;
    v.nx = v.ny = v.nz = 16;
    v.spacing = 1.0f;
    v.data.assign(v.numel(), 0.0f);
    Detector det{16, 16, 1.0f};
    for (double ang : {-90.0, -45.0, 0.0, 30.0, 90.0}) {
        ProjectionImage p = project(v, ang, det);
        for (float x : p.pixels) REQUIRE(x == 0.0f);
    }
}

TEST_CASE("axis-aligned unit box at 0 deg integrates its depth") {
    // box spanning half the volume in y: depth = 16 voxels * 1mm
    Volume v;
    v.nx = v.ny = v.nz = 32;
    v.spacing = 1.0f;
    v.data.assign(v.numel(), 0.0f);
    for (int z = 8; z < 24; ++z)
        for (int y = 8; y < 24; ++y)
            for (int x = 8; x < 24; ++x) v.at(x, y, z) = 1.0f;

    Detector det{32, 32, 1.0f};
    ProjectionImage p = project(v, 0.0, det);
    // interior pixel: full chord through the box
    REQUIRE(double(p.at(16, 16)) == Catch::Approx(16.0).margin(1.0));
    // outside the box footprint
    REQUIRE(double(p.at(2, 2)) == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("unit ellipsoid projection matches the chord-length oracle") {
    PhantomSpec spec;
    spec.ellipsoids.push_back({{0.1, -0.05, 0.0}, {0.6, 0.4, 0.5}, 25.0, 1.0, false});
    int n = 64;
    Volume v = generate_phantom(spec, {n, n, n}, 1.0f);
    Detector det{n, n, 1.0f};
    double norm_scale_mm = 0.5 * n * 1.0;  // [-1,1] spans the volume

    for (double ang : {0.0, 35.0, -60.0, 90.0}) {
        ProjectionImage p = project(v, ang, det);
        double t = ang * M_PI / 180.0;
        double ux = std::cos(t), uy = std::sin(t);
        double dx = -std::sin(t), dy = std::cos(t);
        double num = 0, den = 0;
        for (int r = 0; r < det.h; ++r) {
            double wz = (r - 0.5 * (det.h - 1)) * det.pixel_spacing;
            for (int c = 0; c < det.w; ++c) {
                double u = (c - 0.5 * (det.w - 1)) * det.pixel_spacing;
                double ref = phantom_line_integral(spec, norm_scale_mm, {u * ux, u * uy, wz}, {dx, dy, 0.0});
                double got = p.at(r, c);
                num += (got - ref) * (got - ref);
                den += ref * ref;
            }
        }
        double rel_rms = std::sqrt(num / den);
        REQUIRE(rel_rms < 0.02);  // 64^3; the acceptance suite pins 1% at 128^3
    }
}

TEST_CASE("mass conservation across angles") {
    auto pop = sample_phantom_population(1, 21, 1.0);
    int n = 64;
    Volume v = generate_phantom(pop.specs[0], {n, n, n}, 1.0f);
    double vox_sum = 0;
    for (float x : v.data) vox_sum += x;
    double expected = vox_sum * std::pow(double(v.spacing), 3);

    Trajectory t = make_trajectory(15.0);
    Detector det{n, n, 1.0f};
    auto views = render_trajectory(v, t, det);
    REQUIRE(int(views.size()) == t.positions());
    for (const auto& p : views) {
        double s = 0;
        for (float x : p.pixels) s += x;
        s *= det.pixel_spacing * det.pixel_spacing;
        REQUIRE(std::abs(s - expected) / expected < 0.01);
    }
}

TEST_CASE("projection is linear in the volume") {
    Rng rng(5);
    Volume a, b;
    a.nx = a.ny = a.nz = b.nx = b.ny = b.nz = 24;
    a.spacing = b.spacing = 1.0f;
    a.data.resize(a.numel());
    b.data.resize(b.numel());
    // keep mass inside the inscribed cylinder
    for (int z = 0; z < 24; ++z)
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                double r = std::hypot(x - 11.5, y - 11.5);
                float inside = r < 10.0 ? 1.0f : 0.0f;
                a.at(x, y, z) = inside * float(rng.uniform());
                b.at(x, y, z) = inside * float(rng.uniform());
            }
    Volume mix = a;
    for (size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = 2.0f * a.data[i] + 0.5f * b.data[i];

    Detector det{24, 24, 1.0f};
    ProjectionImage pa = project(a, 40.0, det), pb = project(b, 40.0, det), pm = project(mix, 40.0, det);
    double num = 0, den = 0;
    for (size_t i = 0; i < pm.pixels.size(); ++i) {
        double want = 2.0 * pa.pixels[i] + 0.5 * pb.pixels[i];
        num += (pm.pixels[i] - want) * (pm.pixels[i] - want);
        den += want * want;
    }
    REQUIRE(std::sqrt(num / std::max(den, 1e-30)) < 1e-5);
}

TEST_CASE("angle consistency: rotating the phantom shifts the view") {
    auto pop = sample_phantom_population(1, 33, 0.0);
    int n = 48;
    double phi = 25.0;
    Volume v = generate_phantom(pop.specs[0], {n, n, n}, 1.0f);
    Volume vrot = generate_phantom(rotate_spec_z(pop.specs[0], phi), {n, n, n}, 1.0f);
    Detector det{n, n, 1.0f};

    ProjectionImage rotated_at_theta = project(vrot, 10.0, det);
    ProjectionImage original_shifted = project(v, 10.0 - phi, det);
    double num = 0, den = 0;
    for (size_t i = 0; i < rotated_at_theta.pixels.size(); ++i) {
        double d = rotated_at_theta.pixels[i] - original_shifted.pixels[i];
        num += d * d;
        den += double(original_shifted.pixels[i]) * original_shifted.pixels[i];
    }
    REQUIRE(std::sqrt(num / den) < 0.02);
}

TEST_CASE("render_trajectory is deterministic and archives round trip") {
    auto pop = sample_phantom_population(1, 8, 1.0);
    int n = 32;
    Volume v = generate_phantom(pop.specs[0], {n, n, n}, 1.0f);
    Trajectory t = make_trajectory(45.0);
    Detector det{n, n, 1.0f};
    auto v1 = render_trajectory(v, t, det);
    auto v2 = render_trajectory(v, t, det);
    for (size_t k = 0; k < v1.size(); ++k) REQUIRE(v1[k].pixels == v2[k].pixels);

    ProjectionArchiveMeta meta;
    meta.volume_id = "p0";
    meta.trajectory = t;
    meta.detector = det;
    meta.norm_scale = 37.5f;
    auto dir = fs::temp_directory_path() / "tw_proj_archive";
    save_projection_stack(dir, meta, v1);
    auto [meta2, loaded] = load_projection_stack(dir);
    REQUIRE(meta2.volume_id == "p0");
    REQUIRE(meta2.norm_scale == 37.5f);
    REQUIRE(loaded.size() == v1.size());
    for (size_t k = 0; k < v1.size(); ++k) {
        REQUIRE(loaded[k].pixels == v1[k].pixels);
        REQUIRE(loaded[k].angle_deg == v1[k].angle_deg);
    }

    auto norm = normalized_pixels(loaded[0]);
    for (float x : norm) {
        REQUIRE(x >= 0.0f);
        REQUIRE(x <= 1.0f);
    }
}

TEST_CASE("detector too small is a coverage error") {
    Volume v;
    v.nx = v.ny = v.nz = 32;
    v.spacing = 1.0f;
    v.data.assign(v.numel(), 0.0f);
    REQUIRE_THROWS_WITH(project(v, 0.0, {32, 16, 1.0f}), Catch::Matchers::ContainsSubstring("coverage") ||
                                                             Catch::Matchers::ContainsSubstring("footprint"));
    REQUIRE_THROWS_AS(project(v, 0.0, {16, 32, 1.0f}), Error);
}
