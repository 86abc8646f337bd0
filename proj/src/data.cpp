#include "skd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace skd {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
    if (class_count < 2) throw std::invalid_argument("dataset needs at least 2 classes");
    if (input.size() <= 0 || stored.size() <= 0) throw std::invalid_argument("dataset shape unset");
    if (static_cast<int>(mean.size()) != input.channels ||
        static_cast<int>(std.size()) != input.channels)
        throw std::invalid_argument("normalization constants do not match channel count");
    for (double s : std)
        if (!(s > 0)) throw std::invalid_argument("normalization std must be positive");
    if (input.channels != stored.channels)
        throw std::invalid_argument("resize cannot change channel count");
}

namespace {

std::vector<double> parse_doubles(const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
}

Shape parse_shape(const std::string& v) {
    const auto d = parse_doubles(v);
    if (d.size() != 3) throw std::invalid_argument("shape needs 3 comma-separated values: " + v);
    return {static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2])};
}

std::string join(const std::vector<double>& v) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

}  // namespace

DatasetSpec load_dataset_spec(const fs::path& root) {
    const fs::path meta = root / "dataset.txt";
    std::ifstream in(meta);
    if (!in) throw std::runtime_error("dataset description missing: " + meta.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("malformed line in " + meta.string());
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw std::runtime_error(meta.string() + ": missing key " + k);
        return it->second;
    };
    DatasetSpec s;
    s.root = root;
    s.name = get("name");
    s.stored = parse_shape(get("stored_shape"));
    s.input = kv.count("input_shape") ? parse_shape(kv["input_shape"]) : s.stored;
    s.class_count = std::stoi(get("classes"));
    s.mean = parse_doubles(get("mean"));
    s.std = parse_doubles(get("std"));
    if (kv.count("class_names")) s.class_names = parse_list(kv["class_names"]);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Task sequence

const std::vector<int>& TaskSequence::task(int t) const {
    if (t < 0 || t > num_incremental())
        throw std::out_of_range("task " + std::to_string(t) + " outside [0, " +
                                std::to_string(num_incremental()) + "]");
    return t == 0 ? base_classes : incremental_tasks[static_cast<std::size_t>(t - 1)];
}

std::vector<int> TaskSequence::seen_classes(int t) const {
    std::vector<int> out;
    for (int i = 0; i <= t; ++i) {
        const auto& c = task(i);
        out.insert(out.end(), c.begin(), c.end());
    }
    return out;
}

std::vector<int> TaskSequence::class_counts(int t) const {
    std::vector<int> out;
    for (int i = 0; i <= t; ++i) out.push_back(static_cast<int>(task(i).size()));
    return out;
}

TaskSequence build_task_sequence(int class_count, int num_incremental, std::uint64_t seed) {
    if (class_count < 2) throw std::invalid_argument("need at least 2 classes");
    if (num_incremental < 0) throw std::invalid_argument("number of incremental tasks must be >= 0");
    const int base = (class_count + 1) / 2;
    const int rest = class_count - base;
    if (num_incremental > rest)
        throw std::invalid_argument(std::to_string(num_incremental) + " incremental tasks exceed the " +
                                    std::to_string(rest) + " non-base classes");
    TaskSequence ts;
    ts.seed = seed;
    ts.class_order.resize(static_cast<std::size_t>(class_count));
    std::iota(ts.class_order.begin(), ts.class_order.end(), 0);
    Rng rng = Rng::derive(seed, "class-order");
    rng.shuffle(ts.class_order.begin(), ts.class_order.end());
    ts.base_classes.assign(ts.class_order.begin(), ts.class_order.begin() + base);
    if (num_incremental > 0) {
        int pos = base;
        for (int t = 0; t < num_incremental; ++t) {
            const int size = rest / num_incremental + (t < rest % num_incremental ? 1 : 0);
            ts.incremental_tasks.emplace_back(ts.class_order.begin() + pos,
                                              ts.class_order.begin() + pos + size);
            pos += size;
        }
    }
    return ts;
}

TaskSequence build_task_sequence(const DatasetSpec& spec, int num_incremental, std::uint64_t seed) {
    return build_task_sequence(spec.class_count, num_incremental, seed);
}

const char* split_name(Split s) { return s == Split::Train ? "train" : "val"; }

// ---------------------------------------------------------------------------
// Audit

void AccessAudit::record(Split split, int class_id, const fs::path& file) {
    entries_.push_back({split, class_id, phase_, file.string()});
}

std::vector<AccessAudit::Entry> AccessAudit::reads_of(const std::vector<int>& classes, Split split,
                                                      const std::string& phase) const {
    std::vector<Entry> out;
    for (const auto& e : entries_)
        if (e.split == split && e.phase == phase &&
            std::find(classes.begin(), classes.end(), e.class_id) != classes.end())
            out.push_back(e);
    return out;
}

// ---------------------------------------------------------------------------
// Record files

namespace {

constexpr char kRecordMagic[8] = {'S', 'K', 'D', 'R', 'E', 'C', '0', '1'};

std::uint32_t record_checksum(std::uint32_t class_id, const std::uint8_t* px, std::size_t n) {
    Fnv1a h;
    h.update(&class_id, sizeof(class_id));
    h.update(px, n);
    return static_cast<std::uint32_t>(h.digest());
}

void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t get_u32(std::istream& in, const fs::path& file) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw std::runtime_error("truncated record file " + file.string());
    return v;
}

}  // namespace

fs::path record_file(const fs::path& root, Split split, int class_id) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%03d.rec", class_id);
    return root / split_name(split) / name;
}

void write_records(const fs::path& file, Shape shape, const std::vector<RawRecord>& recs) {
    fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out.write(kRecordMagic, sizeof(kRecordMagic));
    put_u32(out, static_cast<std::uint32_t>(shape.channels));
    put_u32(out, static_cast<std::uint32_t>(shape.height));
    put_u32(out, static_cast<std::uint32_t>(shape.width));
    put_u32(out, static_cast<std::uint32_t>(recs.size()));
    for (const auto& r : recs) {
        if (static_cast<int>(r.pixels.size()) != shape.size())
            throw std::invalid_argument("record size does not match " + shape.str());
        const auto id = static_cast<std::uint32_t>(r.class_id);
        put_u32(out, id);
        put_u32(out, record_checksum(id, r.pixels.data(), r.pixels.size()));
        out.write(reinterpret_cast<const char*>(r.pixels.data()),
                  static_cast<std::streamsize>(r.pixels.size()));
    }
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::vector<RawRecord> read_records(const fs::path& file, Shape expected) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("missing record file " + file.string());
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kRecordMagic, sizeof(magic)) != 0)
        throw std::runtime_error("not a record file: " + file.string());
    Shape s;
    s.channels = static_cast<int>(get_u32(in, file));
    s.height = static_cast<int>(get_u32(in, file));
    s.width = static_cast<int>(get_u32(in, file));
    if (s != expected)
        throw std::runtime_error(file.string() + " holds " + s.str() + ", expected " + expected.str());
    const auto count = get_u32(in, file);
    std::vector<RawRecord> out(count);
    const auto n = static_cast<std::size_t>(s.size());
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto id = get_u32(in, file);
        const auto sum = get_u32(in, file);
        out[i].class_id = static_cast<int>(id);
        out[i].pixels.resize(n);
        if (!in.read(reinterpret_cast<char*>(out[i].pixels.data()), static_cast<std::streamsize>(n)))
            throw std::runtime_error("truncated record file " + file.string());
        if (record_checksum(id, out[i].pixels.data(), n) != sum)
            throw std::runtime_error("corrupted record " + std::to_string(i) + " in " + file.string());
    }
    return out;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, Shape from, Shape to) {
    if (from.channels != to.channels) throw std::invalid_argument("resize cannot change channels");
    if (from == to) return src;
    std::vector<float> out(static_cast<std::size_t>(to.size()));
    const double sy = static_cast<double>(from.height) / to.height;
    const double sx = static_cast<double>(from.width) / to.width;
    for (int c = 0; c < to.channels; ++c)
        for (int y = 0; y < to.height; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, from.height - 1.0);
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, from.height - 1);
            const double wy = fy - y0;
            for (int x = 0; x < to.width; ++x) {
                const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, from.width - 1.0);
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, from.width - 1);
                const double wx = fx - x0;
                auto at = [&](int yy, int xx) {
                    return src[static_cast<std::size_t>((c * from.height + yy) * from.width + xx)];
                };
                const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                                 wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
                out[static_cast<std::size_t>((c * to.height + y) * to.width + x)] =
                    static_cast<float>(v);
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Streams

TaskStream::TaskStream(const DatasetSpec& spec, std::vector<int> classes, Split split,
                       std::uint64_t seed, AccessAudit* audit)
    : classes_(std::move(classes)), split_(split), seed_(seed), shape_(spec.input) {
    if (classes_.empty()) throw std::invalid_argument("task stream needs at least one class");
    std::vector<std::vector<RawRecord>> per_class;
    std::size_t total = 0;
    for (int c : classes_) {
        if (c < 0 || c >= spec.class_count)
            throw std::invalid_argument("class " + std::to_string(c) + " not in dataset " + spec.name);
        const fs::path file = record_file(spec.root, split, c);
        if (audit) audit->record(split, c, file);
        per_class.push_back(read_records(file, spec.stored));
        total += per_class.back().size();
    }
    if (total == 0) throw std::runtime_error("no records for the requested classes");
    images_.resize(static_cast<Eigen::Index>(total), shape_.size());
    std::size_t row = 0;
    std::vector<float> buf(static_cast<std::size_t>(spec.stored.size()));
    for (std::size_t k = 0; k < classes_.size(); ++k) {
        for (const auto& r : per_class[k]) {
            if (r.class_id != classes_[k])
                throw std::runtime_error("record labelled " + std::to_string(r.class_id) +
                                         " in file of class " + std::to_string(classes_[k]));
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = r.pixels[i] / 255.0f;
            const auto img = resize_bilinear(buf, spec.stored, shape_);
            const int plane = shape_.plane();
            for (int c = 0; c < shape_.channels; ++c) {
                const auto m = static_cast<float>(spec.mean[static_cast<std::size_t>(c)]);
                const auto s = static_cast<float>(spec.std[static_cast<std::size_t>(c)]);
                for (int i = 0; i < plane; ++i)
                    images_(static_cast<Eigen::Index>(row), c * plane + i) =
                        (img[static_cast<std::size_t>(c * plane + i)] - m) / s;
            }
            local_.push_back(static_cast<int>(k));
            global_.push_back(classes_[k]);
            ++row;
        }
    }
    order_.resize(total);
    std::iota(order_.begin(), order_.end(), 0);
    start_epoch(0);
}

void TaskStream::start_epoch(int epoch) {
    std::iota(order_.begin(), order_.end(), 0);
    if (split_ == Split::Train) {
        Rng rng = Rng::derive(seed_, "epoch-shuffle", static_cast<std::uint64_t>(epoch));
        rng.shuffle(order_.begin(), order_.end());
    }
    cursor_ = 0;
}

LabeledBatch TaskStream::slice(int first, int count) const {
    if (first < 0 || count < 0 || first + count > size())
        throw std::out_of_range("stream slice out of range");
    LabeledBatch b;
    b.images = Activation<Real>(Matrix<Real>(count, shape_.size()), shape_);
    b.labels = Matrix<Real>::Zero(count, static_cast<Eigen::Index>(classes_.size()));
    for (int i = 0; i < count; ++i) {
        const int src = order_[static_cast<std::size_t>(first + i)];
        b.images.values.row(i) = images_.row(src);
        b.labels(i, local_[static_cast<std::size_t>(src)]) = 1;
        b.local_ids.push_back(local_[static_cast<std::size_t>(src)]);
        b.global_ids.push_back(global_[static_cast<std::size_t>(src)]);
    }
    return b;
}

bool TaskStream::next(int batch_size, LabeledBatch& out) {
    if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
    if (cursor_ >= size()) return false;
    const int n = std::min(batch_size, size() - cursor_);
    out = slice(cursor_, n);
    cursor_ += n;
    return true;
}

LabeledBatch TaskStream::all() const { return slice(0, size()); }

LabeledBatch load_task_data(const DatasetSpec& spec, const std::vector<int>& classes, Split split,
                            std::uint64_t seed, AccessAudit* audit) {
    return TaskStream(spec, classes, split, seed, audit).all();
}

// ---------------------------------------------------------------------------
// Procedural desk dataset

namespace {

// Segment endpoints in a 1 x 2 box, y pointing down.
constexpr std::array<std::array<double, 4>, 7> kSegments{{
    {0, 0, 1, 0},  // a
    {1, 0, 1, 1},  // b
    {1, 1, 1, 2},  // c
    {0, 2, 1, 2},  // d
    {0, 1, 0, 2},  // e
    {0, 0, 0, 1},  // f
    {0, 1, 1, 1},  // g
}};

constexpr std::array<const char*, 10> kDigitSegments{
    "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"};

constexpr std::array<const char*, 10> kDigitNames{"zero", "one", "two",   "three", "four",
                                                   "five", "six", "seven", "eight", "nine"};

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

std::vector<float> render_desk_digit(int digit, int side, Rng& rng) {
    if (digit < 0 || digit > 9) throw std::invalid_argument("digit must be in [0, 9]");
    const double unit = side * 0.29 * rng.uniform(0.8, 1.1);
    const double aspect = rng.uniform(0.75, 1.15);
    const double angle = rng.uniform(-0.2, 0.2);
    const double shear = rng.uniform(-0.25, 0.25);
    const double cx = side / 2.0 + rng.uniform(-2.0, 2.0);
    const double cy = side / 2.0 + rng.uniform(-2.0, 2.0);
    const double thick = rng.uniform(0.9, 2.0);
    const double ink = rng.uniform(0.6, 1.0);
    const double background = rng.uniform(0.0, 0.12);
    const double ca = std::cos(angle), sa = std::sin(angle);

    auto to_pixel = [&](double bx, double by) {
        double x = (bx - 0.5) * unit * aspect;
        double y = (by - 1.0) * unit;
        x += shear * y;
        return std::array<double, 2>{cx + ca * x - sa * y, cy + sa * x + ca * y};
    };

    std::vector<std::array<double, 4>> strokes;
    for (const char* s = kDigitSegments[static_cast<std::size_t>(digit)]; *s; ++s) {
        const auto& seg = kSegments[static_cast<std::size_t>(*s - 'a')];
        const double j = 0.08;
        const auto a = to_pixel(seg[0] + rng.uniform(-j, j), seg[1] + rng.uniform(-j, j));
        const auto b = to_pixel(seg[2] + rng.uniform(-j, j), seg[3] + rng.uniform(-j, j));
        strokes.push_back({a[0], a[1], b[0], b[1]});
    }

    std::vector<float> img(static_cast<std::size_t>(side * side));
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            double d = 1e9;
            for (const auto& s : strokes)
                d = std::min(d, segment_distance(x + 0.5, y + 0.5, s[0], s[1], s[2], s[3]));
            const double cover = std::clamp(thick - d + 0.5, 0.0, 1.0);
            const double v = background + (ink - background) * cover + 0.05 * rng.normal();
            img[static_cast<std::size_t>(y * side + x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return img;
}

DatasetSpec make_desk_dataset(const fs::path& root, const DeskDatasetOptions& opt) {
    if (opt.train_per_class < 1 || opt.val_per_class < 1)
        throw std::invalid_argument("per-class counts must be positive");
    if (opt.side < 8) throw std::invalid_argument("image side must be >= 8");
    const Shape shape{1, opt.side, opt.side};
    double sum = 0, sumsq = 0;
    std::size_t n = 0;
    fs::create_directories(root);
    std::ofstream index(root / "index.txt");
    index << "# class split file count\n";
    for (Split split : {Split::Train, Split::Val}) {
        const int per_class = split == Split::Train ? opt.train_per_class : opt.val_per_class;
        for (int digit = 0; digit < 10; ++digit) {
            Rng rng = Rng::derive(opt.seed, std::string("desk-") + split_name(split),
                                  static_cast<std::uint64_t>(digit));
            std::vector<RawRecord> recs;
            recs.reserve(static_cast<std::size_t>(per_class));
            for (int i = 0; i < per_class; ++i) {
                const auto img = render_desk_digit(digit, opt.side, rng);
                RawRecord r;
                r.class_id = digit;
                r.pixels.resize(img.size());
                for (std::size_t p = 0; p < img.size(); ++p) {
                    r.pixels[p] = static_cast<std::uint8_t>(std::lround(img[p] * 255.0f));
                    if (split == Split::Train) {
                        const double v = r.pixels[p] / 255.0;
                        sum += v;
                        sumsq += v * v;
                        ++n;
                    }
                }
                recs.push_back(std::move(r));
            }
            const fs::path file = record_file(root, split, digit);
            write_records(file, shape, recs);
            index << digit << ' ' << split_name(split) << ' ' << fs::relative(file, root).string()
                  << ' ' << per_class << '\n';
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double stdev = std::sqrt(std::max(sumsq / static_cast<double>(n) - mean * mean, 1e-12));

    DatasetSpec spec;
    spec.name = "desk-digits";
    spec.input = shape;
    spec.stored = shape;
    spec.class_count = 10;
    spec.mean = {mean};
    spec.std = {stdev};
    spec.class_names.assign(kDigitNames.begin(), kDigitNames.end());
    spec.root = root;

    std::ofstream meta(root / "dataset.txt");
    meta << "name=" << spec.name << '\n'
         << "stored_shape=" << shape.channels << ',' << shape.height << ',' << shape.width << '\n'
         << "input_shape=" << shape.channels << ',' << shape.height << ',' << shape.width << '\n'
         << "classes=10\n"
         << "mean=" << join(spec.mean) << '\n'
         << "std=" << join(spec.std) << '\n'
         << "class_names=";
    for (std::size_t i = 0; i < spec.class_names.size(); ++i)
        meta << (i ? "," : "") << spec.class_names[i];
    meta << "\nseed=" << opt.seed << '\n'
         << "train_per_class=" << opt.train_per_class << '\n'
         << "val_per_class=" << opt.val_per_class << '\n';
    if (!meta) throw std::runtime_error("cannot write dataset description under " + root.string());
    return spec;
}

}  // namespace skd
