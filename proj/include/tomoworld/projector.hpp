#pragma once

// Parallel-beam projector. The source rotates about the z axis: 0 deg is the
// frontal (anterior-posterior) view, +/-90 deg lateral. Each detector row
// reads one axial slab, so a row across all angles is a sinogram row.
//
// Pixel values are raw attenuation line integrals sampled by ray marching
// with trilinear interpolation at half-voxel steps (midpoint rule).

#include "tomoworld/volume.hpp"

namespace tw {

enum class Action : int { CCW = 0, CW = 1 };  // CCW decreases angle, CW increases

struct Trajectory {
    std::vector<double> angles_deg;  // -90 + k*step, k = 0..K
    double step_deg = 0.0;
    std::vector<Action> actions;  // between adjacent canonical angles, all CW

    int positions() const { return int(angles_deg.size()); }
    int index_of(double angle_deg) const {
        for (int k = 0; k < positions(); ++k)
            if (std::abs(angles_deg[k] - angle_deg) < 1e-9) return k;
        throw Error("angle not on trajectory: " + std::to_string(angle_deg));
    }
};

inline Trajectory make_trajectory(double step_deg) {
    check(step_deg > 0, "trajectory step must be positive");
    double k = 90.0 / step_deg;
    check(std::abs(k - std::round(k)) < 1e-9, "trajectory step must divide 90 exactly");
    Trajectory t;
    t.step_deg = step_deg;
    int half = int(std::llround(k));
    for (int i = 0; i <= 2 * half; ++i) t.angles_deg.push_back(-90.0 + i * step_deg);
    t.actions.assign(size_t(2 * half), Action::CW);
    return t;
}

struct Detector {
    int h = 0, w = 0;
    float pixel_spacing = 1.0f;  // mm, square pixels
};

struct ProjectionImage {
    std::vector<float> pixels;  // h*w, row-major
    int h = 0, w = 0;
    double angle_deg = 0.0;
    float detector_spacing = 1.0f;
    float norm_scale = 1.0f;  // maps raw line integrals to [0,1]: normalized = raw/scale
    float norm_offset = 0.0f;

    float& at(int r, int c) { return pixels[size_t(r) * w + c]; }
    float at(int r, int c) const { return pixels[size_t(r) * w + c]; }
};

namespace detail {

// Trilinear sample of the volume at world point (wx,wy,wz); zero outside.
inline float sample_trilinear(const Volume& v, double wx, double wy, double wz) {
    double fx = wx / v.spacing + 0.5 * (v.nx - 1);
    double fy = wy / v.spacing + 0.5 * (v.ny - 1);
    double fz = wz / v.spacing + 0.5 * (v.nz - 1);
    if (fx <= -1.0 || fy <= -1.0 || fz <= -1.0 || fx >= v.nx || fy >= v.ny || fz >= v.nz) return 0.0f;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
    double ax = fx - x0, ay = fy - y0, az = fz - z0;
    auto fetch = [&](int x, int y, int z) -> double {
        if (x < 0 || y < 0 || z < 0 || x >= v.nx || y >= v.ny || z >= v.nz) return 0.0;
        return v.at(x, y, z);
    };
    double c00 = fetch(x0, y0, z0) * (1 - ax) + fetch(x0 + 1, y0, z0) * ax;
    double c10 = fetch(x0, y0 + 1, z0) * (1 - ax) + fetch(x0 + 1, y0 + 1, z0) * ax;
    double c01 = fetch(x0, y0, z0 + 1) * (1 - ax) + fetch(x0 + 1, y0, z0 + 1) * ax;
    double c11 = fetch(x0, y0 + 1, z0 + 1) * (1 - ax) + fetch(x0 + 1, y0 + 1, z0 + 1) * ax;
    double c0 = c00 * (1 - ay) + c10 * ay;
    double c1 = c01 * (1 - ay) + c11 * ay;
    return float(c0 * (1 - az) + c1 * az);
}

}  // namespace detail

// Rays at angle theta travel along (-sin t, cos t, 0); detector u axis is
// (cos t, sin t, 0) and the v axis is z. Rotating the volume by phi about z
// (rotate_spec_z) shifts the view: project(rot(phi) v, theta) == project(v, theta + phi).
inline ProjectionImage project(const Volume& v, double angle_deg, const Detector& det) {
    check(v.data.size() == v.numel() && v.numel() > 0, "empty volume");
    check(det.h > 0 && det.w > 0 && det.pixel_spacing > 0, "bad detector");
    // Footprint coverage: content is assumed inside the inscribed xy cylinder.
    double fov = double(det.w) * det.pixel_spacing;
    double need_xy = double(std::min(v.nx, v.ny)) * v.spacing;
    double need_z = double(v.nz) * v.spacing;
    check(fov >= need_xy - 1e-6 && double(det.h) * det.pixel_spacing >= need_z - 1e-6,
          "detector too small to cover the rotated volume footprint");

    double t = angle_deg * M_PI / 180.0;
    double ux = std::cos(t), uy = std::sin(t);    // detector u axis
    double dx = -std::sin(t), dy = std::cos(t);   // ray direction

    double half_diag = 0.5 * std::hypot(v.nx * double(v.spacing), v.ny * double(v.spacing));
    double step = 0.5 * v.spacing;
    int nsteps = int(std::ceil(2.0 * half_diag / step));

    ProjectionImage img;
    img.h = det.h;
    img.w = det.w;
    img.angle_deg = angle_deg;
    img.detector_spacing = det.pixel_spacing;
    img.pixels.assign(size_t(det.h) * det.w, 0.0f);

    parallel_for(det.h, [&](int r) {
        double wz = (r - 0.5 * (det.h - 1)) * det.pixel_spacing;
        for (int c = 0; c < det.w; ++c) {
            double u = (c - 0.5 * (det.w - 1)) * det.pixel_spacing;
            double ox = u * ux, oy = u * uy;
            double acc = 0.0;
            for (int s = 0; s < nsteps; ++s) {
                double tt = -half_diag + (s + 0.5) * step;
                acc += detail::sample_trilinear(v, ox + tt * dx, oy + tt * dy, wz);
            }
            img.at(r, c) = float(acc * step);
        }
    });
    return img;
}

inline std::vector<ProjectionImage> render_trajectory(const Volume& v, const Trajectory& t,
                                                      const Detector& det) {
    std::vector<ProjectionImage> views(t.positions());
    parallel_for(t.positions(), [&](int k) {
        Detector d = det;
        // project() parallelizes over rows; nested parallelism stays serial inside
        views[k] = project(v, t.angles_deg[k], d);
    });
    return views;
}

// Analytic line integral through one ellipsoid (chord length x density).
// Independent closed-form oracle for the ray-marched projector.
inline double ellipsoid_line_integral(const Ellipsoid& e, double norm_scale_mm,
                                      std::array<double, 3> origin_mm, std::array<double, 3> dir) {
    // normalized coords = mm / norm_scale_mm
    double th = e.rot_z_deg * M_PI / 180.0;
    double c = std::cos(th), s = std::sin(th);
    auto to_frame = [&](double x, double y, double z, bool translate) {
        x /= norm_scale_mm; y /= norm_scale_mm; z /= norm_scale_mm;
        if (translate) { x -= e.center[0]; y -= e.center[1]; z -= e.center[2]; }
        double ex = (c * x + s * y) / e.semi_axes[0];
        double ey = (-s * x + c * y) / e.semi_axes[1];
        double ez = z / e.semi_axes[2];
        return std::array<double, 3>{ex, ey, ez};
    };
    auto o = to_frame(origin_mm[0], origin_mm[1], origin_mm[2], true);
    auto d = to_frame(dir[0], dir[1], dir[2], false);
    double A = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    double B = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
    double C = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - 1.0;
    double disc = B * B - A * C;
    if (disc <= 0.0 || A <= 0.0) return 0.0;
    double chord = 2.0 * std::sqrt(disc) / A;  // in ray-parameter units; |dir| = 1 in mm
    return chord * e.density;
}

inline double phantom_line_integral(const PhantomSpec& spec, double norm_scale_mm,
                                    std::array<double, 3> origin_mm, std::array<double, 3> dir) {
    double acc = 0.0;
    for (const auto& e : spec.ellipsoids) acc += ellipsoid_line_integral(e, norm_scale_mm, origin_mm, dir);
    return acc;
}

// ---------------------------------------------------------------------------
// Projection archive: per-volume directory with meta.txt and a float32 stack
// of raw line integrals in canonical angle order.
// ---------------------------------------------------------------------------
struct ProjectionArchiveMeta {
    std::string volume_id;
    Trajectory trajectory;
    Detector detector;
    float norm_scale = 1.0f;
    float norm_offset = 0.0f;
};

inline void save_projection_stack(const fs::path& dir, const ProjectionArchiveMeta& meta,
                                  const std::vector<ProjectionImage>& views) {
    fs::create_directories(dir);
    check(int(views.size()) == meta.trajectory.positions(), "stack/trajectory size mismatch");
    KvMap m;
    m["volume_id"] = meta.volume_id;
    m["step_deg"] = fmt_double(meta.trajectory.step_deg);
    m["num_angles"] = std::to_string(meta.trajectory.positions());
    m["detector"] = std::to_string(meta.detector.h) + " " + std::to_string(meta.detector.w) + " " +
                    fmt_double(double(meta.detector.pixel_spacing));
    m["norm_scale"] = fmt_double(double(meta.norm_scale));
    m["norm_offset"] = fmt_double(double(meta.norm_offset));
    m["dtype"] = "float32";
    write_kv_file(dir / "meta.txt", m);

    std::vector<float> stack;
    stack.reserve(size_t(meta.trajectory.positions()) * meta.detector.h * meta.detector.w);
    for (const auto& img : views) stack.insert(stack.end(), img.pixels.begin(), img.pixels.end());
    write_binary(dir / "stack.raw", stack);
}

inline std::pair<ProjectionArchiveMeta, std::vector<ProjectionImage>> load_projection_stack(
    const fs::path& dir) {
    KvMap m = parse_kv_file(dir / "meta.txt");
    ProjectionArchiveMeta meta;
    meta.volume_id = kv_get(m, "volume_id");
    meta.trajectory = make_trajectory(parse_double(kv_get(m, "step_deg")));
    check(meta.trajectory.positions() == int(parse_long(kv_get(m, "num_angles"))),
          "angle count mismatch in " + dir.string());
    {
        std::istringstream ss(kv_get(m, "detector"));
        double sp = 0;
        ss >> meta.detector.h >> meta.detector.w >> sp;
        check(bool(ss), "malformed detector in " + dir.string());
        meta.detector.pixel_spacing = float(sp);
    }
    meta.norm_scale = float(parse_double(kv_get(m, "norm_scale")));
    meta.norm_offset = float(parse_double(kv_get(m, "norm_offset")));

    size_t per = size_t(meta.detector.h) * meta.detector.w;
    std::vector<float> stack = read_binary<float>(dir / "stack.raw", per * meta.trajectory.positions());
    std::vector<ProjectionImage> views(meta.trajectory.positions());
    for (int k = 0; k < meta.trajectory.positions(); ++k) {
        ProjectionImage& img = views[k];
        img.h = meta.detector.h;
        img.w = meta.detector.w;
        img.angle_deg = meta.trajectory.angles_deg[k];
        img.detector_spacing = meta.detector.pixel_spacing;
        img.norm_scale = meta.norm_scale;
        img.norm_offset = meta.norm_offset;
        img.pixels.assign(stack.begin() + long(k * per), stack.begin() + long((k + 1) * per));
    }
    return {meta, views};
}

// Normalized copy for the tokenizer: clamp(raw/scale, 0, 1).
inline std::vector<float> normalized_pixels(const ProjectionImage& img) {
    std::vector<float> out(img.pixels.size());
    float inv = img.norm_scale > 0 ? 1.0f / img.norm_scale : 1.0f;
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::clamp(img.pixels[i] * inv - img.norm_offset, 0.0f, 1.0f);
    return out;
}

}  // namespace tw
