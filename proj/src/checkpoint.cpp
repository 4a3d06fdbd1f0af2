#include "xsep/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "xsep/errors.hpp"
#include "xsep/io.hpp"

namespace xsep {

namespace {

struct Entry {
    std::string name;
    std::string role;  // param | stat | vel | ms | shadow
    XtsrBlock block;
};

std::vector<Entry> collect_entries(const Model<float>& model, const OptimState<float>* optim) {
    std::vector<Entry> entries;
    for (const auto& p : model.params())
        entries.push_back({p.name, p.trainable ? "param" : "stat", to_xtsr(*p.value)});
    if (optim) {
        std::size_t slot = 0;
        for (const auto& p : model.params()) {
            if (!p.trainable) continue;
            entries.push_back({p.name, "vel", to_xtsr(optim->velocity[slot])});
            if (!optim->mean_square.empty())
                entries.push_back({p.name, "ms", to_xtsr(optim->mean_square[slot])});
            if (!optim->polyak_shadow.empty())
                entries.push_back({p.name, "shadow", to_xtsr(optim->polyak_shadow[slot])});
            ++slot;
        }
    }
    return entries;
}

std::string block_bytes(const XtsrBlock& block) {
    std::ostringstream out(std::ios::binary);
    write_xtsr(out, block);
    return out.str();
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const OptimState<float>* optim, const TrainCounters& counters) {
    const std::string arch_text = serialize(model.spec());
    const auto entries = collect_entries(model, optim);

    std::ostringstream head;
    head << "XCKP1\n";
    head << "arch " << arch_text.size() << '\n' << arch_text;
    head << "step " << counters.step << '\n';
    head << "samples " << counters.samples_seen << '\n';
    head << "epoch " << counters.epoch << '\n';
    head << "tensors " << entries.size() << '\n';

    std::string data;
    std::ostringstream index;
    for (const auto& entry : entries) {
        const std::string bytes = block_bytes(entry.block);
        index << entry.name << ' ' << entry.role << ' ' << data.size() << ' ' << bytes.size()
              << '\n';
        data += bytes;
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot open " + path + " for writing");
    out << head.str() << index.str() << "DATA\n" << data;
    if (!out) throw FormatError("checkpoint: write failed");
}

namespace {

struct ParsedCheckpoint {
    std::string arch_text;
    TrainCounters counters;
    std::vector<Entry> entries;
};

ParsedCheckpoint parse_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "XCKP1")
        throw FormatError("checkpoint: bad magic line");

    ParsedCheckpoint parsed;
    if (!std::getline(in, line) || line.rfind("arch ", 0) != 0)
        throw FormatError("checkpoint: missing arch section");
    const std::size_t arch_bytes = std::stoull(line.substr(5));
    parsed.arch_text.resize(arch_bytes);
    in.read(parsed.arch_text.data(), static_cast<std::streamsize>(arch_bytes));
    if (!in) throw FormatError("checkpoint: truncated arch text");

    auto read_counter = [&](const char* key) {
        if (!std::getline(in, line) || line.rfind(std::string(key) + " ", 0) != 0)
            throw FormatError(std::string("checkpoint: missing ") + key);
        return std::stoull(line.substr(std::string(key).size() + 1));
    };
    parsed.counters.step = read_counter("step");
    parsed.counters.samples_seen = read_counter("samples");
    parsed.counters.epoch = read_counter("epoch");

    if (!std::getline(in, line) || line.rfind("tensors ", 0) != 0)
        throw FormatError("checkpoint: missing tensor count");
    const std::size_t count = std::stoull(line.substr(8));

    struct IndexRow {
        std::string name, role;
        std::size_t offset = 0, bytes = 0;
    };
    std::vector<IndexRow> rows(count);
    for (auto& row : rows) {
        if (!std::getline(in, line)) throw FormatError("checkpoint: truncated index");
        std::istringstream ls(line);
        if (!(ls >> row.name >> row.role >> row.offset >> row.bytes))
            throw FormatError("checkpoint: malformed index row: " + line);
    }
    if (!std::getline(in, line) || line != "DATA")
        throw FormatError("checkpoint: missing DATA marker");

    std::ostringstream rest;
    rest << in.rdbuf();
    const std::string data = rest.str();
    for (const auto& row : rows) {
        if (row.offset + row.bytes > data.size())
            throw FormatError("checkpoint: tensor '" + row.name + "' out of bounds");
        std::istringstream block_in(data.substr(row.offset, row.bytes), std::ios::binary);
        parsed.entries.push_back({row.name, row.role, read_xtsr(block_in)});
    }
    return parsed;
}

}  // namespace

TrainCounters load_checkpoint(const std::string& path, Model<float>& model,
                              OptimState<float>* optim) {
    const ParsedCheckpoint parsed = parse_checkpoint(path);
    if (parsed.arch_text != serialize(model.spec()))
        throw FormatError("checkpoint: architecture does not match the model");

    std::map<std::pair<std::string, std::string>, const Entry*> by_key;
    for (const auto& entry : parsed.entries) by_key[{entry.role, entry.name}] = &entry;

    auto restore = [&](const std::string& role, const std::string& name, Tensor4<float>& dst) {
        const auto it = by_key.find({role, name});
        if (it == by_key.end())
            throw FormatError("checkpoint: missing tensor " + role + ":" + name);
        Tensor4<float> loaded = xtsr_to_f32(it->second->block);
        if (!(loaded.dims() == dst.dims()))
            throw FormatError("checkpoint: shape mismatch for " + name);
        dst = std::move(loaded);
    };

    for (auto& p : model.params())
        restore(p.trainable ? "param" : "stat", p.name, *p.value);
    if (optim) {
        std::size_t slot = 0;
        for (const auto& p : model.params()) {
            if (!p.trainable) continue;
            restore("vel", p.name, optim->velocity[slot]);
            if (!optim->mean_square.empty()) restore("ms", p.name, optim->mean_square[slot]);
            if (!optim->polyak_shadow.empty())
                restore("shadow", p.name, optim->polyak_shadow[slot]);
            ++slot;
        }
    }
    return parsed.counters;
}

std::string checkpoint_arch_text(const std::string& path) {
    return parse_checkpoint(path).arch_text;
}

}  // namespace xsep
