#pragma once

// Procedural ellipsoid phantoms and the on-disk volume format. Voxel values
// are additive sums of ellipsoid densities evaluated at voxel centers, so
// overlap values are exactly checkable against a point-in-ellipsoid oracle.

#include <array>
#include <optional>

#include "tomoworld/common.hpp"

namespace tw {

struct Volume {
    std::vector<float> data;  // x fastest, then y, then z
    int nx = 0, ny = 0, nz = 0;
    float spacing = 1.0f;  // isotropic, mm
    std::string id;

    size_t numel() const { return size_t(nx) * size_t(ny) * size_t(nz); }
    float& at(int x, int y, int z) { return data[size_t(x) + size_t(nx) * (size_t(y) + size_t(ny) * z)]; }
    float at(int x, int y, int z) const { return data[size_t(x) + size_t(nx) * (size_t(y) + size_t(ny) * z)]; }

    void validate() const {
        check(nx >= 8 && ny >= 8 && nz >= 8, "volume shape must be >= 8 per axis");
        check(spacing > 0, "volume spacing must be positive");
        check(data.size() == numel(), "volume payload size mismatch");
        for (float v : data) check(std::isfinite(v) && v >= 0.0f, "volume values must be finite and >= 0");
    }
};

struct Ellipsoid {
    std::array<double, 3> center{};     // normalized [-1,1]^3 coordinates
    std::array<double, 3> semi_axes{};  // normalized units, > 0
    double rot_z_deg = 0.0;             // rotation about z through the ellipsoid center
    double density = 0.0;
    bool lesion = false;
};

struct PhantomSpec {
    std::vector<Ellipsoid> ellipsoids;
    uint64_t seed = 0;

    void validate() const {
        for (const auto& e : ellipsoids) {
            check(e.semi_axes[0] > 0 && e.semi_axes[1] > 0 && e.semi_axes[2] > 0,
                  "ellipsoid semi-axes must be strictly positive");
            check(std::isfinite(e.density), "ellipsoid density must be finite");
        }
    }
};

// Whole-volume rotation about the z axis, expressed on the spec itself so no
// resampling is involved: centers rotate, per-ellipsoid z angles shift.
inline PhantomSpec rotate_spec_z(const PhantomSpec& spec, double phi_deg) {
    double phi = phi_deg * M_PI / 180.0;
    double c = std::cos(phi), s = std::sin(phi);
    PhantomSpec out = spec;
    for (auto& e : out.ellipsoids) {
        double x = e.center[0], y = e.center[1];
        e.center[0] = c * x - s * y;
        e.center[1] = s * x + c * y;
        e.rot_z_deg += phi_deg;
    }
    return out;
}

inline bool ellipsoid_contains(const Ellipsoid& e, double px, double py, double pz) {
    double th = e.rot_z_deg * M_PI / 180.0;
    double c = std::cos(th), s = std::sin(th);
    double dx = px - e.center[0], dy = py - e.center[1], dz = pz - e.center[2];
    // into the ellipsoid frame: rotate by -rot_z
    double ex = c * dx + s * dy;
    double ey = -s * dx + c * dy;
    double u = ex / e.semi_axes[0], v = ey / e.semi_axes[1], w = dz / e.semi_axes[2];
    return u * u + v * v + w * w <= 1.0;
}

struct GridShape {
    int nx = 0, ny = 0, nz = 0;
};

inline Volume generate_phantom(const PhantomSpec& spec, GridShape shape, float spacing,
                               const std::string& id = "") {
    spec.validate();
    check(shape.nx >= 8 && shape.ny >= 8 && shape.nz >= 8, "phantom grid must be >= 8 per axis");
    check(spacing > 0, "spacing must be positive");

    Volume v;
    v.nx = shape.nx;
    v.ny = shape.ny;
    v.nz = shape.nz;
    v.spacing = spacing;
    v.id = id;
    v.data.assign(v.numel(), 0.0f);

    // Voxel centers in normalized coordinates: x_i = -1 + (i + 0.5) * 2/n.
    parallel_for(shape.nz, [&](int z) {
        double pz = -1.0 + (z + 0.5) * 2.0 / shape.nz;
        for (int y = 0; y < shape.ny; ++y) {
            double py = -1.0 + (y + 0.5) * 2.0 / shape.ny;
            for (int x = 0; x < shape.nx; ++x) {
                double px = -1.0 + (x + 0.5) * 2.0 / shape.nx;
                double acc = 0.0;
                for (const auto& e : spec.ellipsoids)
                    if (ellipsoid_contains(e, px, py, pz)) acc += e.density;
                v.at(x, y, z) = float(acc);
            }
        }
    });
    return v;
}

// ---------------------------------------------------------------------------
// Synthetic population. Thorax-like background (body ellipsoid, two lower
// density lung regions, a high-density spine rod, a couple of random soft
// structures) plus an optional small bright lesion that defines the binary
// label. Everything stays inside the inscribed xy cylinder so parallel-beam
// projections never clip mass at any angle.
// ---------------------------------------------------------------------------
struct PopulationSample {
    std::vector<PhantomSpec> specs;
    std::vector<int> labels;
};

inline PopulationSample sample_phantom_population(int n, uint64_t seed, double lesion_rate) {
    check(n >= 1, "population size must be >= 1");
    check(lesion_rate >= 0.0 && lesion_rate <= 1.0, "lesion_rate must be in [0,1]");

    PopulationSample out;
    out.specs.resize(n);
    out.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::derive(seed, uint64_t(i)));
        PhantomSpec spec;
        spec.seed = Rng::derive(seed, uint64_t(i));

        Ellipsoid body;
        body.center = {rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), 0.0};
        body.semi_axes = {rng.uniform(0.62, 0.72), rng.uniform(0.48, 0.58), rng.uniform(0.74, 0.84)};
        body.rot_z_deg = rng.uniform(-6.0, 6.0);
        body.density = rng.uniform(0.45, 0.55);
        spec.ellipsoids.push_back(body);

        double background_max = body.density;

        for (int side = -1; side <= 1; side += 2) {
            Ellipsoid lung;
            lung.center = {body.center[0] + side * rng.uniform(0.26, 0.34),
                           body.center[1] + rng.uniform(-0.06, 0.02), rng.uniform(-0.05, 0.05)};
            lung.semi_axes = {rng.uniform(0.16, 0.22), rng.uniform(0.22, 0.30), rng.uniform(0.42, 0.55)};
            lung.rot_z_deg = body.rot_z_deg + rng.uniform(-4.0, 4.0);
            lung.density = -rng.uniform(0.28, 0.36);  // sums stay positive inside the body
            spec.ellipsoids.push_back(lung);
        }

        Ellipsoid spine;
        spine.center = {body.center[0] + rng.uniform(-0.03, 0.03), body.center[1] + rng.uniform(0.28, 0.36), 0.0};
        spine.semi_axes = {rng.uniform(0.06, 0.09), rng.uniform(0.06, 0.09), rng.uniform(0.62, 0.74)};
        spine.rot_z_deg = 0.0;
        spine.density = rng.uniform(0.5, 0.7);
        spec.ellipsoids.push_back(spine);
        background_max = std::max(background_max, body.density + spine.density);

        int extras = 1 + rng.uniform_int(3);
        for (int k = 0; k < extras; ++k) {
            Ellipsoid soft;
            soft.center = {body.center[0] + rng.uniform(-0.25, 0.25), body.center[1] + rng.uniform(-0.2, 0.2),
                           rng.uniform(-0.35, 0.35)};
            soft.semi_axes = {rng.uniform(0.05, 0.12), rng.uniform(0.05, 0.12), rng.uniform(0.08, 0.2)};
            soft.rot_z_deg = rng.uniform(0.0, 180.0);
            soft.density = rng.uniform(0.08, 0.2);
            spec.ellipsoids.push_back(soft);
            background_max = std::max(background_max, body.density + soft.density);
        }

        int label = rng.uniform() < lesion_rate ? 1 : 0;
        if (label == 1) {
            // semi-axes 4-8% of the volume extent, density 1.5x background max,
            // placed uniformly inside the central background ellipsoid
            Ellipsoid lesion;
            lesion.lesion = true;
            double r = std::sqrt(rng.uniform());  // uniform over the ellipse section
            double ang = rng.uniform(0.0, 2.0 * M_PI);
            lesion.center = {body.center[0] + 0.7 * body.semi_axes[0] * r * std::cos(ang),
                             body.center[1] + 0.7 * body.semi_axes[1] * r * std::sin(ang),
                             rng.uniform(-0.5, 0.5) * body.semi_axes[2]};
            lesion.semi_axes = {rng.uniform(0.08, 0.16), rng.uniform(0.08, 0.16), rng.uniform(0.08, 0.16)};
            lesion.rot_z_deg = rng.uniform(0.0, 180.0);
            lesion.density = 1.5 * background_max;
            spec.ellipsoids.push_back(lesion);
        }
        out.specs[i] = std::move(spec);
        out.labels[i] = label;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Volume file format: "<stem>.vol" text header + raw float32 LE payload named
// by the header's `data` key. Round trips are bit-exact.
// ---------------------------------------------------------------------------
inline void save_volume(const Volume& v, const fs::path& header_path) {
    check(v.data.size() == v.numel(), "volume payload size mismatch");
    fs::path payload = header_path;
    payload.replace_extension(".raw");

    KvMap m;
    m["shape"] = std::to_string(v.nx) + " " + std::to_string(v.ny) + " " + std::to_string(v.nz);
    m["spacing"] = fmt_double(double(v.spacing));
    m["dtype"] = "float32";
    m["byte_order"] = "little-endian";
    m["order"] = "x-fastest";
    m["data"] = payload.filename().string();
    m["id"] = v.id;
    write_kv_file(header_path, m);
    write_binary(payload, v.data);
}

inline Volume load_volume(const fs::path& header_path) {
    KvMap m = parse_kv_file(header_path);
    check(kv_get(m, "dtype") == "float32", "unsupported dtype: " + kv_get(m, "dtype"));
    check(kv_get(m, "byte_order") == "little-endian", "unsupported byte order");

    Volume v;
    {
        std::istringstream ss(kv_get(m, "shape"));
        ss >> v.nx >> v.ny >> v.nz;
        check(bool(ss) && v.nx > 0 && v.ny > 0 && v.nz > 0, "malformed shape in " + header_path.string());
    }
    v.spacing = float(parse_double(kv_get(m, "spacing")));
    v.id = kv_get_or(m, "id", "");
    fs::path payload = header_path.parent_path() / kv_get(m, "data");
    v.data = read_binary<float>(payload, v.numel());
    return v;
}

// ---------------------------------------------------------------------------
// Dataset manifest: one record per line, tab-separated
//   id <TAB> volume_path <TAB> split <TAB> labels ("name=0;name=1" or "-")
// ---------------------------------------------------------------------------
struct ManifestRecord {
    std::string id;
    std::string volume_path;  // relative to the manifest directory
    std::string split;        // train | val | test
    std::map<std::string, int> labels;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;

    void validate() const {
        std::map<std::string, int> seen;
        for (const auto& r : records) {
            check(++seen[r.id] == 1, "duplicate manifest id: " + r.id);
            check(r.split == "train" || r.split == "val" || r.split == "test",
                  "bad split for " + r.id + ": " + r.split);
            for (const auto& [k, lv] : r.labels) check(lv == 0 || lv == 1, "non-binary label " + k);
        }
    }

    std::vector<const ManifestRecord*> split(const std::string& name) const {
        std::vector<const ManifestRecord*> out;
        for (const auto& r : records)
            if (r.split == name) out.push_back(&r);
        return out;
    }
};

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
    std::ofstream out(path);
    check(out.good(), "cannot write: " + path.string());
    for (const auto& r : m.records) {
        out << r.id << "\t" << r.volume_path << "\t" << r.split << "\t";
        if (r.labels.empty()) {
            out << "-";
        } else {
            bool first = true;
            for (const auto& [k, v] : r.labels) {
                if (!first) out << ";";
                out << k << "=" << v;
                first = false;
            }
        }
        out << "\n";
    }
}

inline DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open: " + path.string());
    DatasetManifest m;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        std::istringstream ss(line);
        ManifestRecord r;
        std::string labels;
        check(bool(std::getline(ss, r.id, '\t')) && bool(std::getline(ss, r.volume_path, '\t')) &&
                  bool(std::getline(ss, r.split, '\t')) && bool(std::getline(ss, labels)),
              "malformed manifest line: " + line);
        if (labels != "-") {
            std::istringstream ls(labels);
            std::string item;
            while (std::getline(ls, item, ';')) {
                size_t eq = item.find('=');
                check(eq != std::string::npos, "malformed label: " + item);
                r.labels[item.substr(0, eq)] = int(parse_long(item.substr(eq + 1)));
            }
        }
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

// Seeded 70:10:20-style split assignment over n items.
inline std::vector<std::string> assign_splits(int n, uint64_t seed, double train_frac, double val_frac) {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(Rng::derive(seed, 0xBEEF));
    rng.shuffle(order);
    int n_train = int(std::lround(train_frac * n));
    int n_val = int(std::lround(val_frac * n));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    std::vector<std::string> split(n);
    for (int rank = 0; rank < n; ++rank)
        split[order[rank]] = rank < n_train ? "train" : (rank < n_train + n_val ? "val" : "test");
    return split;
}

}  // namespace tw
