#include "clda/data/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "clda/core/geometry.hpp"
#include "clda/core/rng.hpp"

namespace clda {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
    if (canvas < 16) throw InvalidArgument("SceneSpec: canvas too small");
    if (min_objects < 0 || max_objects < min_objects) throw InvalidArgument("SceneSpec: bad object count range");
    if (num_classes != kNumShapeClasses) throw InvalidArgument("SceneSpec: class set must be {circle, square, triangle}");
    if (!(min_size > 1.0) || max_size < min_size || max_size > canvas)
        throw InvalidArgument("SceneSpec: object sizes must fit the canvas");
    if (max_overlap < 0.0 || max_overlap > 1.0) throw InvalidArgument("SceneSpec: max_overlap outside [0,1]");
    if (placement_retries < 1) throw InvalidArgument("SceneSpec: placement_retries < 1");
    if (background_low < 0.0 || background_high > 1.0 || background_high < background_low)
        throw InvalidArgument("SceneSpec: bad background range");
    if (texture_cells < 1) throw InvalidArgument("SceneSpec: texture_cells < 1");
    if (clutter_strokes < 0) throw InvalidArgument("SceneSpec: clutter_strokes < 0");
}

void DomainShiftSpec::validate() const {
    if (!(fog_beta >= 0.0)) throw InvalidArgument("DomainShiftSpec: fog_beta < 0");
    if (atmospheric_light < 0.0 || atmospheric_light > 1.0) throw InvalidArgument("DomainShiftSpec: A outside [0,1]");
    if (depth_base < 0.0 || depth_gradient < 0.0 || depth_noise < 0.0)
        throw InvalidArgument("DomainShiftSpec: negative depth parameter");
    if (depth_cells < 1) throw InvalidArgument("DomainShiftSpec: depth_cells < 1");
    if (std::abs(color_temperature) >= 1.0) throw InvalidArgument("DomainShiftSpec: |color_temperature| >= 1");
    if (noise_sigma < 0.0) throw InvalidArgument("DomainShiftSpec: noise_sigma < 0");
}

DomainShiftSpec DatasetSpec::default_target_shift() {
    DomainShiftSpec s;
    s.fog_beta = 1.2;
    s.atmospheric_light = 0.8;
    s.color_temperature = 0.1;
    s.noise_sigma = 0.03;
    return s;
}

namespace {

// Smooth value noise in [0,1] on a (cells+1)^2 lattice.
class ValueNoise {
public:
    ValueNoise(std::mt19937_64& rng, int cells) : cells_(cells), lattice_((cells + 1) * (cells + 1)) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : lattice_) v = u(rng);
    }

    // u, v in [0,1]
    double operator()(double u, double v) const {
        double gx = std::clamp(u, 0.0, 1.0) * cells_;
        double gy = std::clamp(v, 0.0, 1.0) * cells_;
        int ix = std::min(static_cast<int>(gx), cells_ - 1);
        int iy = std::min(static_cast<int>(gy), cells_ - 1);
        double fx = smooth(gx - ix), fy = smooth(gy - iy);
        auto L = [&](int x, int y) { return lattice_[y * (cells_ + 1) + x]; };
        double top = L(ix, iy) * (1 - fx) + L(ix + 1, iy) * fx;
        double bot = L(ix, iy + 1) * (1 - fx) + L(ix + 1, iy + 1) * fx;
        return top * (1 - fy) + bot * fy;
    }

private:
    static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
    int cells_;
    std::vector<double> lattice_;
};

double luminance(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

bool inside_shape(int category, const BBox& b, double x, double y) {
    switch (category) {
        case 0: {
            double rx = 0.5 * b.width(), ry = 0.5 * b.height();
            double dx = (x - b.cx()) / rx, dy = (y - b.cy()) / ry;
            return dx * dx + dy * dy <= 1.0;
        }
        case 1:
            return x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2;
        case 2: {
            if (y < b.y1 || y > b.y2) return false;
            double half = 0.5 * b.width() * (y - b.y1) / b.height();
            return std::abs(x - b.cx()) <= half;
        }
        default:
            throw InvalidArgument("unknown shape class " + std::to_string(category));
    }
}

void draw_stroke(Image& img, double x0, double y0, double x1, double y1, double thickness,
                 const std::array<double, 3>& color) {
    double len = std::hypot(x1 - x0, y1 - y0);
    if (len < 1e-6) return;
    int xa = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - thickness)));
    int xb = std::min(img.width - 1, static_cast<int>(std::ceil(std::max(x0, x1) + thickness)));
    int ya = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - thickness)));
    int yb = std::min(img.height - 1, static_cast<int>(std::ceil(std::max(y0, y1) + thickness)));
    for (int y = ya; y <= yb; ++y)
        for (int x = xa; x <= xb; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double t = std::clamp(((px - x0) * (x1 - x0) + (py - y0) * (y1 - y0)) / (len * len), 0.0, 1.0);
            double d = std::hypot(px - (x0 + t * (x1 - x0)), py - (y0 + t * (y1 - y0)));
            double a = std::clamp(0.5 * thickness + 0.5 - d, 0.0, 1.0);
            if (a <= 0.0) continue;
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = static_cast<float>((1.0 - a) * img.at(y, x, c) + a * color[c]);
        }
}

}  // namespace

std::vector<float> shape_coverage(int category, const BBox& box, int height, int width) {
    constexpr int kSub = 4;
    std::vector<float> cov(static_cast<std::size_t>(height) * width, 0.0f);
    int xa = std::max(0, static_cast<int>(std::floor(box.x1)));
    int xb = std::min(width - 1, static_cast<int>(std::ceil(box.x2)));
    int ya = std::max(0, static_cast<int>(std::floor(box.y1)));
    int yb = std::min(height - 1, static_cast<int>(std::ceil(box.y2)));
    for (int y = ya; y <= yb; ++y)
        for (int x = xa; x <= xb; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSub; ++sy)
                for (int sx = 0; sx < kSub; ++sx)
                    hits += inside_shape(category, box, x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub);
            cov[static_cast<std::size_t>(y) * width + x] = static_cast<float>(hits) / (kSub * kSub);
        }
    return cov;
}

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
    const int S = spec.canvas;

    Scene scene;
    scene.image = Image(S, S);
    Image& img = scene.image;

    std::array<double, 3> c0, c1;
    for (int c = 0; c < 3; ++c) {
        c0[c] = uni(spec.background_low, spec.background_high);
        c1[c] = uni(spec.background_low, spec.background_high);
    }
    double angle = uni(0.0, 2.0 * M_PI);
    double gx = std::cos(angle), gy = std::sin(angle);
    ValueNoise texture(rng, spec.texture_cells);
    ValueNoise grain(rng, std::max(spec.texture_cells * 4, 8));
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            double u = (x + 0.5) / S, v = (y + 0.5) / S;
            double t = std::clamp(0.5 + 0.5 * ((u - 0.5) * gx + (v - 0.5) * gy) * 1.4142, 0.0, 1.0);
            double tex = spec.texture_amplitude * ((texture(u, v) - 0.5) + 0.5 * (grain(u, v) - 0.5));
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = static_cast<float>(std::clamp((1 - t) * c0[c] + t * c1[c] + tex, 0.0, 1.0));
        }
    for (int k = 0; k < spec.clutter_strokes; ++k) {
        std::array<double, 3> col;
        for (int c = 0; c < 3; ++c) col[c] = uni(0.0, 1.0);
        double x0 = uni(0, S), y0 = uni(0, S);
        double len = uni(0.1, 0.4) * S, a = uni(0.0, 2.0 * M_PI);
        draw_stroke(img, x0, y0, x0 + len * std::cos(a), y0 + len * std::sin(a), uni(1.0, 2.5), col);
    }

    int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
    for (int n = 0; n < count; ++n) {
        int category = std::uniform_int_distribution<int>(0, spec.num_classes - 1)(rng);
        bool placed = false;
        BBox box;
        for (int attempt = 0; attempt < spec.placement_retries && !placed; ++attempt) {
            double w = uni(spec.min_size, spec.max_size);
            double h = category == 2 ? w * 0.87 : w;
            double x1 = uni(0.0, S - w), y1 = uni(0.0, S - h);
            box = BBox{x1, y1, x1 + w, y1 + h};
            placed = std::all_of(scene.boxes.begin(), scene.boxes.end(),
                                 [&](const LabeledBox& o) { return iou(o.box, box) <= spec.max_overlap; });
        }
        if (!placed) {
            ++scene.placement_failures;
            continue;
        }
        std::array<double, 3> bg{};
        {
            int cy = std::clamp(static_cast<int>(box.cy()), 0, S - 1);
            int cx = std::clamp(static_cast<int>(box.cx()), 0, S - 1);
            for (int c = 0; c < 3; ++c) bg[c] = img.at(cy, cx, c);
        }
        std::array<double, 3> col{};
        for (int tries = 0; tries < 32; ++tries) {
            for (int c = 0; c < 3; ++c) col[c] = u01(rng);
            if (std::abs(luminance(col) - luminance(bg)) >= 0.3) break;
            if (tries == 31) col = luminance(bg) < 0.5 ? std::array<double, 3>{0.95, 0.95, 0.9}
                                                       : std::array<double, 3>{0.03, 0.03, 0.05};
        }
        double shade = uni(-0.08, 0.08);
        std::vector<float> cov = shape_coverage(category, box, S, S);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                float a = cov[static_cast<std::size_t>(y) * S + x];
                if (a <= 0.0f) continue;
                double s = shade * ((y + 0.5 - box.y1) / box.height() - 0.5);
                for (int c = 0; c < 3; ++c) {
                    double v = std::clamp(col[c] + s, 0.0, 1.0);
                    img.at(y, x, c) = static_cast<float>((1.0 - a) * img.at(y, x, c) + a * v);
                }
            }
        scene.boxes.push_back({box, category});
    }
    return scene;
}

std::vector<double> make_depth_field(std::uint64_t seed, int height, int width, const DomainShiftSpec& shift) {
    shift.validate();
    std::mt19937_64 rng(seed);
    ValueNoise noise(rng, shift.depth_cells);
    std::vector<double> depth(static_cast<std::size_t>(height) * width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double u = (x + 0.5) / width, v = (y + 0.5) / height;
            depth[static_cast<std::size_t>(y) * width + x] =
                shift.depth_base + shift.depth_gradient * (1.0 - v) + shift.depth_noise * noise(u, v);
        }
    return depth;
}

Image apply_domain_shift(const Image& image, const std::vector<double>& depth, const DomainShiftSpec& shift,
                         std::uint64_t noise_seed) {
    shift.validate();
    if (depth.size() != static_cast<std::size_t>(image.height) * image.width)
        throw InvalidArgument("apply_domain_shift: depth field size mismatch");
    Image out = image;
    const double A = shift.atmospheric_light;
    const double warm[3] = {1.0 + shift.color_temperature, 1.0, 1.0 - shift.color_temperature};
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> gauss(0.0, shift.noise_sigma > 0.0 ? shift.noise_sigma : 1.0);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            double t = std::exp(-shift.fog_beta * depth[static_cast<std::size_t>(y) * image.width + x]);
            for (int c = 0; c < 3; ++c) {
                double v = image.at(y, x, c) * t + A * (1.0 - t);
                v *= warm[c];
                if (shift.noise_sigma > 0.0) v += gauss(rng);
                out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return out;
}

// ------------------------------------------------------------------ dataset

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "eval") return Split::Eval;
    throw InvalidArgument("unknown split '" + s + "'");
}

std::vector<GeneratedSample> generate_dataset(const DatasetSpec& spec) {
    spec.scene.validate();
    spec.shift.validate();
    struct Part {
        DomainTag domain;
        Split split;
        int count;
    };
    const Part parts[] = {{DomainTag::Source, Split::Train, spec.source_train},
                          {DomainTag::Source, Split::Eval, spec.source_eval},
                          {DomainTag::Target, Split::Train, spec.target_train},
                          {DomainTag::Target, Split::Eval, spec.target_eval}};
    std::vector<GeneratedSample> out;
    for (const Part& p : parts) {
        if (p.count < 0) throw InvalidArgument("generate_dataset: negative split count");
        for (int i = 0; i < p.count; ++i) {
            std::uint64_t d = static_cast<std::uint64_t>(p.domain), s = static_cast<std::uint64_t>(p.split);
            std::uint64_t idx = static_cast<std::uint64_t>(i);
            Scene scene = generate_scene(derive_seed(spec.seed, {d, s, idx, 0}), spec.scene);
            GeneratedSample g;
            g.split = p.split;
            g.index = i;
            g.sample.domain = p.domain;
            char id[64];
            std::snprintf(id, sizeof id, "%s_%06d", to_string(p.split), i);
            g.sample.id = id;
            if (p.domain == DomainTag::Target) {
                auto depth = make_depth_field(derive_seed(spec.seed, {d, s, idx, 1}), scene.image.height,
                                              scene.image.width, spec.shift);
                g.sample.image =
                    apply_domain_shift(scene.image, depth, spec.shift, derive_seed(spec.seed, {d, s, idx, 2}));
            } else {
                g.sample.image = std::move(scene.image);
            }
            // labels are always kept in memory; hiding happens in the manifest
            g.sample.labels = std::move(scene.boxes);
            out.push_back(std::move(g));
        }
    }
    return out;
}

void write_ppm(const fs::path& file, const Image& image) {
    std::ofstream f(file, std::ios::binary);
    if (!f) throw DatasetError("cannot write " + file.string());
    f << "P6\n" << image.width << " " << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DatasetError("short write to " + file.string());
}

Image read_ppm(const fs::path& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw DatasetError("cannot open " + file.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw DatasetError(file.string() + ": not an 8-bit P6 image");
    f.get();
    Image img(h, w);
    std::vector<unsigned char> bytes(img.pixels.size());
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw DatasetError(file.string() + ": truncated");
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0f;
    return img;
}

void write_labels(const fs::path& file, const std::vector<LabeledBox>& boxes, int width, int height) {
    std::ofstream f(file);
    if (!f) throw DatasetError("cannot write " + file.string());
    char line[160];
    for (const LabeledBox& b : boxes) {
        std::snprintf(line, sizeof line, "%d %.8f %.8f %.8f %.8f\n", b.category, b.box.cx() / width,
                      b.box.cy() / height, b.box.width() / width, b.box.height() / height);
        f << line;
    }
}

std::vector<LabeledBox> read_labels(const fs::path& file, int width, int height) {
    std::ifstream f(file);
    if (!f) throw DatasetError("cannot open " + file.string());
    std::vector<LabeledBox> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto fail = [&](const std::string& why) {
            throw DatasetError(file.string() + ":" + std::to_string(lineno) + ": " + why);
        };
        std::istringstream is(line);
        int cls;
        double cx, cy, w, h;
        if (!(is >> cls >> cx >> cy >> w >> h)) fail("expected `class cx cy w h`");
        std::string extra;
        if (is >> extra) fail("trailing tokens");
        if (cls < 0) fail("negative class id");
        for (double v : {cx, cy, w, h})
            if (!std::isfinite(v) || v < 0.0 || v > 1.0) fail("coordinate outside [0,1]");
        if (w <= 0.0 || h <= 0.0) fail("non-positive box size");
        BBox b{(cx - 0.5 * w) * width, (cy - 0.5 * h) * height, (cx + 0.5 * w) * width, (cy + 0.5 * h) * height};
        out.push_back({b, cls});
    }
    return out;
}

void write_manifest(const fs::path& root, const std::vector<ManifestEntry>& entries) {
    fs::path tmp = root / "manifest.txt.tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw DatasetError("cannot write " + tmp.string());
        f << kManifestHeader << "\n";
        for (const ManifestEntry& e : entries)
            f << e.image << ' ' << (e.label.empty() ? "NONE" : e.label) << ' ' << to_string(e.domain) << ' '
              << to_string(e.split) << '\n';
    }
    fs::rename(tmp, root / "manifest.txt");
}

std::vector<ManifestEntry> read_manifest(const fs::path& root) {
    fs::path file = root / "manifest.txt";
    std::ifstream f(file);
    if (!f) throw DatasetError("cannot open " + file.string());
    std::string line;
    if (!std::getline(f, line) || line != kManifestHeader)
        throw DatasetError(file.string() + ":1: unsupported manifest header");
    std::vector<ManifestEntry> out;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string img, lab, dom, spl, extra;
        if (!(is >> img >> lab >> dom >> spl) || (is >> extra))
            throw DatasetError(file.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
        ManifestEntry e;
        e.image = img;
        e.label = lab == "NONE" ? "" : lab;
        try {
            e.domain = domain_from_string(dom);
            e.split = split_from_string(spl);
        } catch (const InvalidArgument& ex) {
            throw DatasetError(file.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        out.push_back(std::move(e));
    }
    return out;
}

void write_dataset(const fs::path& root, const std::vector<GeneratedSample>& samples) {
    for (const char* kind : {"images", "labels"})
        for (const char* dom : {"source", "target"}) fs::create_directories(root / kind / dom);
    std::vector<ManifestEntry> entries;
    entries.reserve(samples.size());
    for (const GeneratedSample& g : samples) {
        const Sample& s = g.sample;
        std::string dom = to_string(s.domain);
        ManifestEntry e;
        e.image = "images/" + dom + "/" + s.id + ".ppm";
        const std::string label = "labels/" + dom + "/" + s.id + ".txt";
        write_ppm(root / e.image, s.image);
        // Hidden target-train labels stay on disk for offline analysis only.
        write_labels(root / label, s.labels.value_or(std::vector<LabeledBox>{}), s.image.width, s.image.height);
        const bool hidden = s.domain == DomainTag::Target && g.split == Split::Train;
        e.label = hidden ? "" : label;
        e.domain = s.domain;
        e.split = g.split;
        entries.push_back(std::move(e));
    }
    write_manifest(root, entries);
}

Sample load_sample(const fs::path& root, const ManifestEntry& e) {
    Sample s;
    s.image = read_ppm(root / e.image);
    s.domain = e.domain;
    s.id = fs::path(e.image).stem().string();
    if (e.domain == DomainTag::Source) {
        if (e.label.empty()) throw DatasetError("source entry " + e.image + " has no label file");
        s.labels = read_labels(root / e.label, s.image.width, s.image.height);
    }
    return s;
}

std::vector<LabeledBox> load_eval_labels(const fs::path& root, const ManifestEntry& e) {
    if (e.label.empty()) throw DatasetError("labels of " + e.image + " are hidden");
    if (e.domain == DomainTag::Target && e.split == Split::Train)
        throw DatasetError("target training labels are not available");
    Image probe = read_ppm(root / e.image);
    return read_labels(root / e.label, probe.width, probe.height);
}

std::vector<ManifestEntry> select(const std::vector<ManifestEntry>& entries, DomainTag domain, Split split) {
    std::vector<ManifestEntry> out;
    for (const ManifestEntry& e : entries)
        if (e.domain == domain && e.split == split) out.push_back(e);
    return out;
}

}  // namespace clda
