#include "skd/networks.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace skd {

// ---------------------------------------------------------------------------
// ClassifierModel

template <typename Scalar>
ClassifierModel<Scalar>::ClassifierModel(std::string arch_id, Shape input, int width,
                                         Sequential<Scalar> features, Linear<Scalar> head)
    : arch_(std::move(arch_id)), input_(input), width_(width), features_(std::move(features)),
      head_(std::move(head)) {
    const Shape f = features_.output_shape(input_);
    if (f.size() != head_.in_features())
        throw std::invalid_argument("head width does not match feature extractor output");
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ClassifierModel<Scalar>::parameters() {
    auto out = feature_parameters();
    head_.parameters(out);
    return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ClassifierModel<Scalar>::feature_parameters() {
    std::vector<Parameter<Scalar>*> out;
    features_.parameters(out);
    return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ClassifierModel<Scalar>::head_parameters() {
    std::vector<Parameter<Scalar>*> out;
    head_.parameters(out);
    return out;
}

template <typename Scalar>
std::vector<Buffer<Scalar>> ClassifierModel<Scalar>::buffers() {
    std::vector<Buffer<Scalar>> out;
    features_.buffers(out);
    return out;
}

template <typename Scalar>
std::vector<BatchNorm2d<Scalar>*> ClassifierModel<Scalar>::norm_layers() {
    std::vector<BatchNorm2d<Scalar>*> out;
    features_.norm_layers(out);
    return out;
}

template <typename Scalar>
std::vector<NormStats<Scalar>> ClassifierModel<Scalar>::bn_stats() const {
    std::vector<NormStats<Scalar>> out;
    for (auto* bn : const_cast<ClassifierModel*>(this)->norm_layers())
        out.emplace_back(bn->running_mean().row(0).transpose(), bn->running_var().row(0).transpose());
    return out;
}

template <typename Scalar>
void ClassifierModel<Scalar>::set_requires_grad(bool on) {
    features_.set_requires_grad(on);
    head_.set_requires_grad(on);
}

template <typename Scalar>
void ClassifierModel<Scalar>::set_observe_statistics(bool on) {
    for (auto* bn : norm_layers()) bn->set_observe(on);
}

template <typename Scalar>
void ClassifierModel<Scalar>::reset(Rng& rng) {
    features_.reset(rng);
    head_.reset(rng);
}

template <typename Scalar>
std::uint64_t ClassifierModel<Scalar>::digest() const {
    auto& self = const_cast<ClassifierModel&>(*this);
    Fnv1a h;
    h.update(arch_);
    for (auto* p : self.parameters()) h.update(p->value);
    for (const auto& b : self.buffers()) h.update(*b.value);
    return h.digest();
}

// ---------------------------------------------------------------------------
// Delegator

template <typename Scalar>
Delegator<Scalar>::Delegator(int latent_dim, Shape output, std::vector<int> widths,
                             Sequential<Scalar> generator, BatchNorm2d<Scalar> helper_bn)
    : latent_dim_(latent_dim), output_(output), widths_(std::move(widths)),
      generator_(std::move(generator)), helper_bn_(std::move(helper_bn)) {
    if (generator_.output_shape({latent_dim_, 1, 1}) != output_)
        throw std::invalid_argument("generator output does not match " + output_.str());
}

template <typename Scalar>
Activation<Scalar> Delegator<Scalar>::forward(const Matrix<Scalar>& z, Mode mode) {
    if (z.cols() != latent_dim_)
        throw std::invalid_argument("latent width " + std::to_string(z.cols()) + " != " +
                                    std::to_string(latent_dim_));
    raw_ = generator_.forward(Activation<Scalar>::flat(z), mode);
    if (!helper_enabled_) return raw_;
    return helper_bn_.forward(raw_, mode);
}

template <typename Scalar>
Activation<Scalar> Delegator<Scalar>::backward(const Activation<Scalar>& d_images) {
    if (!helper_enabled_) return generator_.backward(d_images);
    return generator_.backward(helper_bn_.backward(d_images));
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> Delegator<Scalar>::parameters() {
    std::vector<Parameter<Scalar>*> out;
    generator_.parameters(out);
    helper_bn_.parameters(out);
    return out;
}

template <typename Scalar>
std::vector<Buffer<Scalar>> Delegator<Scalar>::buffers() {
    std::vector<Buffer<Scalar>> out;
    generator_.buffers(out);
    helper_bn_.buffers(out);
    return out;
}

template <typename Scalar>
void Delegator<Scalar>::set_requires_grad(bool on) {
    generator_.set_requires_grad(on);
    helper_bn_.set_requires_grad(on);
}

template <typename Scalar>
void Delegator<Scalar>::reset(Rng& rng) {
    generator_.reset(rng);
    helper_bn_.reset(rng);
}

template <typename Scalar>
std::uint64_t Delegator<Scalar>::digest() const {
    auto& self = const_cast<Delegator&>(*this);
    Fnv1a h;
    for (auto* p : self.parameters()) h.update(p->value);
    for (const auto& b : self.buffers()) h.update(*b.value);
    return h.digest();
}

template <typename Scalar>
std::string Delegator<Scalar>::stack() const {
    return output_.height <= 64 ? "low-res" : "high-res";
}

template <typename Scalar>
std::string Delegator<Scalar>::describe() const {
    return generator_.describe() + " -> helper " + helper_bn_.describe();
}

// ---------------------------------------------------------------------------
// Builders

namespace {

template <typename Scalar>
Sequential<Scalar> basic_block_main(const std::string& name, int in, int out, int stride) {
    Sequential<Scalar> m;
    m.template emplace<Conv2d<Scalar>>(name + ".conv1", in, out, 3, stride, 1);
    m.template emplace<BatchNorm2d<Scalar>>(name + ".bn1", out);
    m.template emplace<ReLU<Scalar>>();
    m.template emplace<Conv2d<Scalar>>(name + ".conv2", out, out, 3, 1, 1);
    m.template emplace<BatchNorm2d<Scalar>>(name + ".bn2", out);
    return m;
}

template <typename Scalar>
LayerPtr<Scalar> basic_block(const std::string& name, int in, int out, int stride) {
    Sequential<Scalar> shortcut;
    if (stride != 1 || in != out) {
        shortcut.template emplace<Conv2d<Scalar>>(name + ".down", in, out, 1, stride, 0);
        shortcut.template emplace<BatchNorm2d<Scalar>>(name + ".down_bn", out);
    }
    return std::make_unique<ResidualBlock<Scalar>>(basic_block_main<Scalar>(name, in, out, stride),
                                                   std::move(shortcut));
}

void check_input(const Shape& input, const std::string& arch_id, int min_side, int max_side,
                 int divisor) {
    const bool ok = input.channels > 0 && input.height >= min_side && input.width >= min_side &&
                    input.height <= max_side && input.width <= max_side &&
                    input.height % divisor == 0 && input.width % divisor == 0;
    if (!ok)
        throw std::invalid_argument("input shape " + input.str() + " incompatible with " + arch_id);
}

}  // namespace

template <typename Scalar>
ClassifierModel<Scalar> build_classifier(const std::string& arch_id, int num_classes, Shape input,
                                         int width, std::uint64_t seed) {
    if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
    Sequential<Scalar> f;
    int feature_dim = 0;
    if (arch_id == arch::kDeskCnn) {
        check_input(input, arch_id, 8, 64, 4);
        const int w = width > 0 ? width : 16;
        int in = input.channels;
        for (int i = 0; i < 3; ++i) {
            const int out = w << i;
            const std::string n = "features.block" + std::to_string(i + 1);
            f.template emplace<Conv2d<Scalar>>(n + ".conv", in, out, 3, 1, 1);
            f.template emplace<BatchNorm2d<Scalar>>(n + ".bn", out);
            f.template emplace<ReLU<Scalar>>();
            if (i < 2) f.template emplace<MaxPool2d<Scalar>>(2, 2);
            in = out;
        }
        f.template emplace<GlobalAvgPool<Scalar>>();
        feature_dim = in;
        width = w;
    } else if (arch_id == arch::kResNet32) {
        check_input(input, arch_id, 8, 64, 4);
        const int w = width > 0 ? width : 16;
        f.template emplace<Conv2d<Scalar>>("features.conv1", input.channels, w, 3, 1, 1);
        f.template emplace<BatchNorm2d<Scalar>>("features.bn1", w);
        f.template emplace<ReLU<Scalar>>();
        int in = w;
        for (int stage = 0; stage < 3; ++stage) {
            const int out = w << stage;
            for (int b = 0; b < 5; ++b) {
                const int stride = (stage > 0 && b == 0) ? 2 : 1;
                f.add(basic_block<Scalar>("features.layer" + std::to_string(stage + 1) + "." +
                                              std::to_string(b),
                                          in, out, stride));
                in = out;
            }
        }
        f.template emplace<GlobalAvgPool<Scalar>>();
        feature_dim = in;
        width = w;
    } else if (arch_id == arch::kResNet18) {
        check_input(input, arch_id, 64, 1024, 32);
        const int w = width > 0 ? width : 64;
        f.template emplace<Conv2d<Scalar>>("features.conv1", input.channels, w, 7, 2, 3);
        f.template emplace<BatchNorm2d<Scalar>>("features.bn1", w);
        f.template emplace<ReLU<Scalar>>();
        f.template emplace<MaxPool2d<Scalar>>(3, 2, 1);
        int in = w;
        for (int stage = 0; stage < 4; ++stage) {
            const int out = w << stage;
            for (int b = 0; b < 2; ++b) {
                const int stride = (stage > 0 && b == 0) ? 2 : 1;
                f.add(basic_block<Scalar>("features.layer" + std::to_string(stage + 1) + "." +
                                              std::to_string(b),
                                          in, out, stride));
                in = out;
            }
        }
        f.template emplace<GlobalAvgPool<Scalar>>();
        feature_dim = in;
        width = w;
    } else {
        throw std::invalid_argument("unknown architecture '" + arch_id + "'");
    }
    ClassifierModel<Scalar> model(arch_id, input, width, std::move(f),
                                  Linear<Scalar>("head", feature_dim, num_classes));
    Rng rng = Rng::derive(seed, "classifier-init");
    model.reset(rng);
    return model;
}

std::vector<int> default_delegator_widths(Shape output) {
    if (output.height <= 64) return {128, 128, 64};
    return {512, 512, 256, 128, 64};
}

template <typename Scalar>
Delegator<Scalar> build_delegator(Shape output, int latent_dim, std::vector<int> widths,
                                  std::uint64_t seed) {
    if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
    if (output.channels < 1) throw std::invalid_argument("output channels must be >= 1");
    const bool low_res = output.height <= 64;
    const int factor = low_res ? 4 : 16;
    if (output.height % factor != 0 || output.width % factor != 0 || output.height < factor ||
        output.width < factor)
        throw std::invalid_argument("output shape " + output.str() + " not divisible by the " +
                                    std::to_string(factor) + "x upsampling factor");
    if (widths.empty()) widths = default_delegator_widths(output);
    const std::size_t expected = low_res ? 3 : 5;
    if (widths.size() != expected)
        throw std::invalid_argument("generator expects " + std::to_string(expected) + " widths");

    const Shape base{widths[0], output.height / factor, output.width / factor};
    Sequential<Scalar> g;
    g.template emplace<Linear<Scalar>>("gen.fc", latent_dim, base.size());
    g.template emplace<Reshape<Scalar>>(base);
    g.template emplace<BatchNorm2d<Scalar>>("gen.bn0", widths[0]);
    int in = widths[0];
    if (low_res) {
        for (int i = 1; i <= 2; ++i) {
            const std::string n = "gen.block" + std::to_string(i);
            g.template emplace<Upsample2x<Scalar>>();
            g.template emplace<Conv2d<Scalar>>(n + ".conv", in, widths[i], 3, 1, 1);
            g.template emplace<BatchNorm2d<Scalar>>(n + ".bn", widths[i]);
            g.template emplace<LeakyReLU<Scalar>>(Scalar(0.2));
            in = widths[i];
        }
    } else {
        for (int i = 1; i <= 4; ++i) {
            const std::string n = "gen.block" + std::to_string(i);
            g.template emplace<ConvTranspose2d<Scalar>>(n + ".deconv", in, widths[i], 3, 2, 1, 1);
            g.template emplace<BatchNorm2d<Scalar>>(n + ".bn", widths[i]);
            g.template emplace<LeakyReLU<Scalar>>(Scalar(0.2));
            in = widths[i];
        }
    }
    g.template emplace<Conv2d<Scalar>>("gen.out", in, output.channels, 3, 1, 1, true);
    g.template emplace<Tanh<Scalar>>();

    Delegator<Scalar> d(latent_dim, output, std::move(widths), std::move(g),
                        BatchNorm2d<Scalar>("helper_bn", output.channels));
    Rng rng = Rng::derive(seed, "delegator-init");
    d.reset(rng);
    return d;
}

template <typename Scalar>
ClassifierModel<Scalar> extend_head(const ClassifierModel<Scalar>& model, HeadExtension ext,
                                    std::uint64_t seed) {
    if (ext.old_class_count != model.num_classes())
        throw std::invalid_argument("head has " + std::to_string(model.num_classes()) +
                                    " outputs, extension expects " +
                                    std::to_string(ext.old_class_count));
    if (ext.new_class_count < 0) throw std::invalid_argument("negative class extension");
    ClassifierModel<Scalar> out = model;
    if (ext.new_class_count == 0) return out;

    const int d = model.feature_dim();
    const int old_k = ext.old_class_count;
    Linear<Scalar> head("head", d, old_k + ext.new_class_count);
    head.weight().value.topRows(old_k) = model.head().weight().value;
    head.bias().value.leftCols(old_k) = model.head().bias().value;
    Rng rng = Rng::derive(seed, "head-extension");
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (int r = old_k; r < old_k + ext.new_class_count; ++r) {
        for (int c = 0; c < d; ++c)
            head.weight().value(r, c) = static_cast<Scalar>(rng.uniform(-bound, bound));
        head.bias().value(0, r) = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    out.replace_head(std::move(head));
    return out;
}

template <typename Scalar>
ClassifierModel<Scalar> clone_reinit(const ClassifierModel<Scalar>& model, std::uint64_t seed) {
    ClassifierModel<Scalar> out = model;
    Rng rng = Rng::derive(seed, "clone-reinit");
    out.reset(rng);
    out.set_requires_grad(true);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};
enum class Kind : std::uint32_t { Classifier = 1, Delegator = 2 };

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    template <typename T>
    void pod(const T& v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    template <typename Scalar>
    void tensor(const std::string& name, const Matrix<Scalar>& m) {
        str(name);
        pod(static_cast<std::int64_t>(m.rows()));
        pod(static_cast<std::int64_t>(m.cols()));
        out_.write(reinterpret_cast<const char*>(m.data()),
                   static_cast<std::streamsize>(m.size() * sizeof(Scalar)));
    }
    void finish() {
        out_.flush();
        if (!out_) throw std::runtime_error("checkpoint write failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    template <typename T>
    T pod() {
        T v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in_) fail("truncated");
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        if (n > (1u << 20)) fail("implausible string length");
        std::string s(n, '\0');
        in_.read(s.data(), n);
        if (!in_) fail("truncated");
        return s;
    }
    template <typename Scalar>
    void tensor(const std::string& expected_name, Matrix<Scalar>& m) {
        const std::string name = str();
        if (name != expected_name) fail("expected tensor '" + expected_name + "', found '" + name + "'");
        const auto rows = pod<std::int64_t>();
        const auto cols = pod<std::int64_t>();
        if (rows != m.rows() || cols != m.cols()) fail("shape mismatch for " + name);
        in_.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(Scalar)));
        if (!in_) fail("truncated tensor " + name);
    }
    [[noreturn]] void fail(const std::string& why) {
        throw std::runtime_error("corrupt checkpoint " + path_.string() + ": " + why);
    }

private:
    std::ifstream in_;
    std::filesystem::path path_;
};

template <typename Scalar>
void write_header(Writer& w, Kind kind) {
    w.pod(kMagic);
    w.pod(kCheckpointVersion);
    w.pod(static_cast<std::uint32_t>(kind));
    w.pod(static_cast<std::uint32_t>(sizeof(Scalar)));
}

template <typename Scalar>
void read_header(Reader& r, Kind kind) {
    const auto magic = r.pod<std::array<char, 8>>();
    if (std::memcmp(magic.data(), kMagic, 8) != 0) r.fail("bad magic");
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
    if (r.pod<std::uint32_t>() != static_cast<std::uint32_t>(kind)) r.fail("wrong checkpoint kind");
    if (r.pod<std::uint32_t>() != sizeof(Scalar)) r.fail("scalar width mismatch");
}

void write_shape(Writer& w, const Shape& s) {
    w.pod(static_cast<std::int32_t>(s.channels));
    w.pod(static_cast<std::int32_t>(s.height));
    w.pod(static_cast<std::int32_t>(s.width));
}

Shape read_shape(Reader& r) {
    Shape s;
    s.channels = r.pod<std::int32_t>();
    s.height = r.pod<std::int32_t>();
    s.width = r.pod<std::int32_t>();
    return s;
}

template <typename Scalar, typename Model>
void write_tensors(Writer& w, Model& m) {
    const auto params = m.parameters();
    const auto bufs = m.buffers();
    w.pod(static_cast<std::uint32_t>(params.size() + bufs.size()));
    for (auto* p : params) w.tensor(p->name, p->value);
    for (const auto& b : bufs) w.tensor(b.name, *b.value);
}

template <typename Scalar, typename Model>
void read_tensors(Reader& r, Model& m) {
    auto params = m.parameters();
    auto bufs = m.buffers();
    if (r.pod<std::uint32_t>() != params.size() + bufs.size()) r.fail("tensor count mismatch");
    for (auto* p : params) r.tensor(p->name, p->value);
    for (auto& b : bufs) r.tensor(b.name, *b.value);
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, ClassifierModel<Scalar>& model) {
    Writer w(path);
    write_header<Scalar>(w, Kind::Classifier);
    w.str(model.arch());
    write_shape(w, model.input_shape());
    w.pod(static_cast<std::int32_t>(model.num_classes()));
    w.pod(static_cast<std::int32_t>(model.width()));
    write_tensors<Scalar>(w, model);
    w.finish();
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, Delegator<Scalar>& d) {
    Writer w(path);
    write_header<Scalar>(w, Kind::Delegator);
    write_shape(w, d.output_shape());
    w.pod(static_cast<std::int32_t>(d.latent_dim()));
    w.pod(static_cast<std::uint32_t>(d.widths().size()));
    for (int v : d.widths()) w.pod(static_cast<std::int32_t>(v));
    w.pod(static_cast<std::uint8_t>(d.helper_enabled() ? 1 : 0));
    write_tensors<Scalar>(w, d);
    w.finish();
}

template <typename Scalar>
ClassifierModel<Scalar> load_classifier(const std::filesystem::path& path) {
    Reader r(path);
    read_header<Scalar>(r, Kind::Classifier);
    const std::string arch_id = r.str();
    const Shape input = read_shape(r);
    const auto classes = r.pod<std::int32_t>();
    const auto width = r.pod<std::int32_t>();
    ClassifierModel<Scalar> model = build_classifier<Scalar>(arch_id, classes, input, width);
    read_tensors<Scalar>(r, model);
    return model;
}

template <typename Scalar>
Delegator<Scalar> load_delegator(const std::filesystem::path& path) {
    Reader r(path);
    read_header<Scalar>(r, Kind::Delegator);
    const Shape output = read_shape(r);
    const auto latent = r.pod<std::int32_t>();
    const auto n = r.pod<std::uint32_t>();
    if (n > 16) r.fail("implausible width count");
    std::vector<int> widths(n);
    for (auto& v : widths) v = r.pod<std::int32_t>();
    const bool helper = r.pod<std::uint8_t>() != 0;
    Delegator<Scalar> d = build_delegator<Scalar>(output, latent, widths);
    d.set_helper_enabled(helper);
    read_tensors<Scalar>(r, d);
    return d;
}

#define SKD_INSTANTIATE_NETWORKS(T)                                                              \
    template class ClassifierModel<T>;                                                           \
    template class Delegator<T>;                                                                 \
    template ClassifierModel<T> build_classifier<T>(const std::string&, int, Shape, int,          \
                                                    std::uint64_t);                              \
    template Delegator<T> build_delegator<T>(Shape, int, std::vector<int>, std::uint64_t);       \
    template ClassifierModel<T> extend_head<T>(const ClassifierModel<T>&, HeadExtension,         \
                                               std::uint64_t);                                   \
    template ClassifierModel<T> clone_reinit<T>(const ClassifierModel<T>&, std::uint64_t);       \
    template void save_checkpoint<T>(const std::filesystem::path&, ClassifierModel<T>&);         \
    template void save_checkpoint<T>(const std::filesystem::path&, Delegator<T>&);               \
    template ClassifierModel<T> load_classifier<T>(const std::filesystem::path&);                \
    template Delegator<T> load_delegator<T>(const std::filesystem::path&);

SKD_INSTANTIATE_NETWORKS(float)
SKD_INSTANTIATE_NETWORKS(double)

}  // namespace skd
