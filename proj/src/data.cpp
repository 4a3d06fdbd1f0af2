#include "xsep/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xsep/errors.hpp"
#include "xsep/io.hpp"
#include "xsep/rng.hpp"

namespace xsep {

namespace {

constexpr char kLabelMagic[4] = {'X', 'L', 'B', 'L'};
constexpr std::uint8_t kLabelVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16),
                               static_cast<std::uint8_t>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    std::uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("XLBL: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void Dataset::check() const {
    if (num_classes < 1) throw DataError("dataset: num_classes must be >= 1");
    if (task == TaskKind::SingleLabel) {
        if (labels.size() != static_cast<std::size_t>(images.n()))
            throw DataError("dataset: image count " + std::to_string(images.n()) +
                            " != label count " + std::to_string(labels.size()));
        for (int label : labels)
            if (label < 0 || label >= num_classes)
                throw DataError("dataset: label " + std::to_string(label) + " out of range");
    } else {
        if (multi_hot.size() != static_cast<std::size_t>(images.n()) * num_classes)
            throw DataError("dataset: multi-hot matrix size mismatch");
    }
    if (!class_weights.empty() &&
        class_weights.size() != static_cast<std::size_t>(num_classes))
        throw DataError("dataset: class weight count mismatch");
}

void write_labels(const std::string& path, const Dataset& dataset) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("XLBL: cannot open " + path + " for writing");
    out.write(kLabelMagic, 4);
    const std::uint8_t mode = dataset.task == TaskKind::SingleLabel ? 0 : 1;
    out.put(static_cast<char>(kLabelVersion));
    out.put(static_cast<char>(mode));
    const std::uint32_t count = mode == 0 ? static_cast<std::uint32_t>(dataset.labels.size())
                                          : static_cast<std::uint32_t>(
                                                dataset.multi_hot.size() / dataset.num_classes);
    put_u32(out, count);
    put_u32(out, static_cast<std::uint32_t>(dataset.num_classes));
    if (mode == 0) {
        for (int label : dataset.labels) put_u32(out, static_cast<std::uint32_t>(label));
    } else {
        out.write(reinterpret_cast<const char*>(dataset.multi_hot.data()),
                  static_cast<std::streamsize>(dataset.multi_hot.size()));
    }
    if (!out) throw FormatError("XLBL: write failed");
}

void read_labels(const std::string& path, Dataset& dataset) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("XLBL: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kLabelMagic, 4) != 0)
        throw FormatError("XLBL: bad magic bytes");
    const int version = in.get();
    const int mode = in.get();
    if (version != kLabelVersion)
        throw FormatError("XLBL: unsupported version " + std::to_string(version));
    if (mode != 0 && mode != 1) throw FormatError("XLBL: unknown mode");
    const std::uint32_t count = get_u32(in);
    const std::uint32_t num_classes = get_u32(in);
    dataset.num_classes = static_cast<int>(num_classes);
    dataset.labels.clear();
    dataset.multi_hot.clear();
    if (mode == 0) {
        dataset.task = TaskKind::SingleLabel;
        dataset.labels.resize(count);
        for (auto& label : dataset.labels) label = static_cast<int>(get_u32(in));
    } else {
        dataset.task = TaskKind::MultiLabel;
        dataset.multi_hot.resize(static_cast<std::size_t>(count) * num_classes);
        in.read(reinterpret_cast<char*>(dataset.multi_hot.data()),
                static_cast<std::streamsize>(dataset.multi_hot.size()));
        if (!in) throw FormatError("XLBL: truncated multi-hot payload");
    }
}

Dataset load_dataset(const std::string& image_path, const std::string& label_path) {
    Dataset dataset;
    dataset.images = load_tensor_f32(image_path);
    read_labels(label_path, dataset);
    dataset.check();
    return dataset;
}

void save_dataset(const std::string& image_path, const std::string& label_path,
                  const Dataset& dataset) {
    save_tensor(image_path, dataset.images);
    write_labels(label_path, dataset);
}

Dataset synth_dataset(int num_classes, int count, int hw, std::uint64_t seed) {
    if (num_classes < 1 || count < 1 || hw < 1)
        throw ParameterError("synth_dataset: all sizes must be >= 1");
    Dataset dataset;
    dataset.task = TaskKind::SingleLabel;
    dataset.num_classes = num_classes;
    dataset.images = Tensor4<float>(count, 3, hw, hw);
    dataset.labels.resize(static_cast<std::size_t>(count));

    Rng rng(seed);
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < count; ++i) {
        const int label = i % num_classes;
        dataset.labels[static_cast<std::size_t>(i)] = label;
        // Class-specific grating: frequency and orientation identify the
        // class, phase and noise vary per example.
        const double freq = 1.5 + 0.5 * label;
        const double theta = pi * static_cast<double>(label) / num_classes;
        const double phase = rng.uniform(0.0, 2.0 * pi);
        const double cos_t = std::cos(theta), sin_t = std::sin(theta);
        for (int ch = 0; ch < 3; ++ch) {
            float* plane = dataset.images.plane(i, ch);
            const double channel_shift = 0.7 * ch;
            for (int y = 0; y < hw; ++y) {
                for (int x = 0; x < hw; ++x) {
                    const double u = (x * cos_t + y * sin_t) / hw;
                    const double signal = std::sin(2.0 * pi * freq * u + phase + channel_shift);
                    plane[static_cast<std::size_t>(y) * hw + x] =
                        static_cast<float>(signal + 0.25 * rng.gaussian());
                }
            }
        }
    }
    return dataset;
}

std::vector<double> load_class_weights(const std::string& path, int num_classes) {
    std::ifstream in(path);
    if (!in) throw FormatError("class weights: cannot open " + path);
    std::vector<double> weights(static_cast<std::size_t>(num_classes), 0.0);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        int index;
        double weight;
        if (!(ls >> index)) continue;
        if (!(ls >> weight))
            throw FormatError("class weights: malformed line: " + line);
        if (index < 0 || index >= num_classes)
            throw DataError("class weights: index " + std::to_string(index) + " out of range");
        weights[static_cast<std::size_t>(index)] = weight;
    }
    return weights;
}

std::vector<int> epoch_order(int count, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<int> order(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(Rng::mix(seed, epoch));
    for (std::size_t k = order.size(); k > 1; --k)
        std::swap(order[k - 1], order[rng.next_below(k)]);
    return order;
}

Batch gather_batch(const Dataset& dataset, const std::vector<int>& order, int start, int size) {
    const int count = static_cast<int>(order.size());
    const int actual = std::min(size, count - start);
    if (actual < 1) throw ParameterError("gather_batch: empty batch");
    Batch batch;
    batch.images = Tensor4<float>(actual, dataset.images.c(), dataset.images.h(),
                                  dataset.images.w());
    const std::size_t example =
        static_cast<std::size_t>(dataset.images.c()) * dataset.images.h() * dataset.images.w();
    for (int b = 0; b < actual; ++b) {
        const int src = order[static_cast<std::size_t>(start + b)];
        std::copy_n(dataset.images.data() + static_cast<std::size_t>(src) * example, example,
                    batch.images.data() + static_cast<std::size_t>(b) * example);
        if (dataset.task == TaskKind::SingleLabel) {
            batch.labels.push_back(dataset.labels[static_cast<std::size_t>(src)]);
        } else {
            const auto* row =
                dataset.multi_hot.data() + static_cast<std::size_t>(src) * dataset.num_classes;
            batch.multi_hot.insert(batch.multi_hot.end(), row, row + dataset.num_classes);
        }
    }
    return batch;
}

}  // namespace xsep
