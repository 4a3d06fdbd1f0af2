#include "xsep/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "xsep/errors.hpp"

namespace xsep {

namespace {

Shape3 conv_out_shape(const Node& node, const Shape3& in, int out_channels) {
    const ConvGeometry geo = node.geometry();
    return Shape3{out_channels, geo.out_h(in.h), geo.out_w(in.w)};
}

Shape3 infer_shape(Node& node, const Shape3& in, const std::string& name);

Shape3 infer_chain(std::vector<Node>& nodes, Shape3 shape, const std::string& prefix) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%03zu", i);
        shape = infer_shape(nodes[i], shape, prefix + buf);
    }
    return shape;
}

Shape3 infer_shape(Node& node, const Shape3& in, const std::string& name) {
    node.in_shape = in;
    node.name = name;
    switch (node.kind) {
        case NodeKind::Conv:
            if (node.out_channels < 1) throw ParameterError(name + ": conv needs out channels");
            node.out_shape = conv_out_shape(node, in, node.out_channels);
            break;
        case NodeKind::DepthwiseConv:
            if (node.multiplier < 1)
                throw ParameterError(name + ": depthwise multiplier must be >= 1");
            node.out_shape = conv_out_shape(node, in, in.c * node.multiplier);
            break;
        case NodeKind::SepConv:
            if (node.out_channels < 1)
                throw ParameterError(name + ": sepconv needs out channels");
            if (node.multiplier < 1)
                throw ParameterError(name + ": depth multiplier must be >= 1");
            node.out_shape = conv_out_shape(node, in, node.out_channels);
            break;
        case NodeKind::SpectrumConv:
            if (node.out_channels < 1)
                throw ParameterError(name + ": spectrum conv needs channel count");
            check_segments(node.segments, node.out_channels);
            node.out_shape = conv_out_shape(node, in, node.out_channels);
            break;
        case NodeKind::GroupedConv: {
            const int total = std::accumulate(node.widths.begin(), node.widths.end(), 0);
            if (node.widths.empty() || total != in.c)
                throw ShapeError(name + ": grouped conv segments sum to " +
                                 std::to_string(total) + ", input has " + std::to_string(in.c));
            node.out_shape = conv_out_shape(node, in, total);
            break;
        }
        case NodeKind::InceptionTowers: {
            if (node.widths.empty())
                throw ParameterError(name + ": towers need at least one width");
            for (int t : node.widths)
                if (t < 1) throw ParameterError(name + ": tower widths must be >= 1");
            const int total = std::accumulate(node.widths.begin(), node.widths.end(), 0);
            node.out_shape = conv_out_shape(node, in, total);
            break;
        }
        case NodeKind::BatchNorm:
        case NodeKind::ReLU:
        case NodeKind::ELU:
        case NodeKind::Dropout:
            if (node.kind == NodeKind::Dropout && (node.rate < 0.0 || node.rate >= 1.0))
                throw ParameterError(name + ": dropout rate must be in [0, 1)");
            node.out_shape = in;
            break;
        case NodeKind::MaxPool:
            node.out_shape = conv_out_shape(node, in, in.c);
            break;
        case NodeKind::GlobalAvgPool:
            node.out_shape = Shape3{in.c, 1, 1};
            break;
        case NodeKind::Dense:
            if (node.units < 1) throw ParameterError(name + ": dense needs units >= 1");
            node.out_shape = Shape3{node.units, 1, 1};
            break;
        case NodeKind::Residual: {
            if (node.body.empty()) throw ParameterError(name + ": residual body is empty");
            const Shape3 body_out = infer_chain(node.body, in, name + ".b");
            const Shape3 short_out =
                node.shortcut.empty() ? in : infer_chain(node.shortcut, in, name + ".s");
            if (!(body_out == short_out))
                throw ShapeError(name + ": residual join mismatch, body " + body_out.str() +
                                 " vs shortcut " + short_out.str());
            node.out_shape = body_out;
            break;
        }
    }
    if (node.out_shape.c < 1 || node.out_shape.h < 1 || node.out_shape.w < 1)
        throw GeometryError(name + ": output shape " + node.out_shape.str() + " is empty");
    return node.out_shape;
}

void walk(const std::vector<Node>& nodes, const std::function<void(const Node&, bool)>& fn,
          bool in_shortcut = false) {
    for (const Node& node : nodes) {
        fn(node, in_shortcut);
        walk(node.body, fn, in_shortcut);
        walk(node.shortcut, fn, true);
    }
}

bool is_conv_kind(NodeKind kind) {
    switch (kind) {
        case NodeKind::Conv:
        case NodeKind::DepthwiseConv:
        case NodeKind::SepConv:
        case NodeKind::SpectrumConv:
        case NodeKind::GroupedConv:
        case NodeKind::InceptionTowers:
            return true;
        default:
            return false;
    }
}

}  // namespace

void validate(ArchSpec& spec) {
    if (spec.input.c < 1 || spec.input.h < 1 || spec.input.w < 1)
        throw ShapeError("arch: input shape " + spec.input.str() + " is invalid");
    if (spec.nodes.empty()) throw ParameterError("arch: no nodes");
    infer_chain(spec.nodes, spec.input, "n");
    spec.validated = true;
}

int conv_layer_count(const ArchSpec& spec) {
    int count = 0;
    walk(spec.nodes, [&](const Node& node, bool in_shortcut) {
        if (!in_shortcut && is_conv_kind(node.kind)) ++count;
    });
    return count;
}

int module_count(const ArchSpec& spec) {
    // Head nodes carry module_id -1: the classifier sits outside the
    // feature-extraction modules.
    std::set<int> ids;
    walk(spec.nodes, [&](const Node& node, bool) {
        if (node.module_id >= 0) ids.insert(node.module_id);
    });
    return static_cast<int>(ids.size());
}

int residual_connection_count(const ArchSpec& spec) {
    int count = 0;
    walk(spec.nodes, [&](const Node& node, bool) {
        if (node.kind == NodeKind::Residual) ++count;
    });
    return count;
}

const char* to_string(NodeKind kind) {
    switch (kind) {
        case NodeKind::Conv: return "conv";
        case NodeKind::DepthwiseConv: return "dwconv";
        case NodeKind::SepConv: return "sepconv";
        case NodeKind::SpectrumConv: return "spectrum";
        case NodeKind::GroupedConv: return "gconv";
        case NodeKind::InceptionTowers: return "towers";
        case NodeKind::BatchNorm: return "bn";
        case NodeKind::ReLU: return "relu";
        case NodeKind::ELU: return "elu";
        case NodeKind::MaxPool: return "maxpool";
        case NodeKind::GlobalAvgPool: return "gap";
        case NodeKind::Dropout: return "dropout";
        case NodeKind::Dense: return "dense";
        case NodeKind::Residual: return "res";
    }
    return "?";
}

const char* to_string(TaskKind task) {
    return task == TaskKind::SingleLabel ? "single" : "multi";
}

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // Trim to the shortest round-tripping form for stable output.
    for (int prec = 1; prec < 17; ++prec) {
        char s[40];
        std::snprintf(s, sizeof(s), "%.*g", prec, v);
        if (std::strtod(s, nullptr) == v) return s;
    }
    return buf;
}

void emit_node(std::ostringstream& out, const Node& node, int& index);

void emit_chain(std::ostringstream& out, const std::vector<Node>& nodes, int& index) {
    for (const Node& node : nodes) emit_node(out, node, index);
}

void emit_geometry(std::ostringstream& out, const Node& node) {
    out << " k=" << node.kh << ',' << node.kw << " s=" << node.sh << ',' << node.sw
        << " pad=" << to_string(node.pad);
}

void emit_node(std::ostringstream& out, const Node& node, int& index) {
    if (node.kind == NodeKind::Residual) {
        out << index++ << " res m=" << node.module_id << '\n';
        emit_chain(out, node.body, index);
        if (!node.shortcut.empty()) {
            out << index++ << " res_shortcut m=" << node.module_id << '\n';
            emit_chain(out, node.shortcut, index);
        }
        out << index++ << " res_end m=" << node.module_id << '\n';
        return;
    }
    out << index++ << ' ' << to_string(node.kind) << " m=" << node.module_id;
    switch (node.kind) {
        case NodeKind::Conv:
            out << " out=" << node.out_channels;
            emit_geometry(out, node);
            break;
        case NodeKind::DepthwiseConv:
            out << " mult=" << node.multiplier;
            emit_geometry(out, node);
            break;
        case NodeKind::SepConv:
            out << " out=" << node.out_channels << " mult=" << node.multiplier;
            emit_geometry(out, node);
            out << " ia=" << to_string(node.intermediate);
            break;
        case NodeKind::SpectrumConv:
            out << " out=" << node.out_channels << " g=" << node.segments;
            emit_geometry(out, node);
            break;
        case NodeKind::GroupedConv:
        case NodeKind::InceptionTowers:
            out << " widths=" << join_ints(node.widths);
            emit_geometry(out, node);
            break;
        case NodeKind::MaxPool:
            emit_geometry(out, node);
            break;
        case NodeKind::Dropout:
            out << " rate=" << format_double(node.rate);
            break;
        case NodeKind::Dense:
            out << " units=" << node.units;
            break;
        default:
            break;
    }
    out << '\n';
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    return parts;
}

int parse_int(const std::string& s, const std::string& what) {
    int v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw FormatError("arch: bad integer '" + s + "' for " + what);
    return v;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
    std::vector<int> out;
    for (const auto& part : split(s, ',')) out.push_back(parse_int(part, what));
    return out;
}

struct KeyValues {
    std::map<std::string, std::string> kv;
    std::set<std::string> used;

    std::string take(const std::string& key, const char* fallback = nullptr) {
        auto it = kv.find(key);
        if (it == kv.end()) {
            if (fallback) return fallback;
            throw FormatError("arch: missing key '" + key + "'");
        }
        used.insert(key);
        return it->second;
    }

    bool has(const std::string& key) const { return kv.count(key) != 0; }

    void finish(const std::string& line) const {
        for (const auto& [key, value] : kv)
            if (!used.count(key))
                throw FormatError("arch: unknown key '" + key + "' in line: " + line);
    }
};

void parse_geometry(KeyValues& kv, Node& node) {
    const auto k = parse_int_list(kv.take("k"), "k");
    const auto s = parse_int_list(kv.take("s"), "s");
    if (k.size() != 2 || s.size() != 2) throw FormatError("arch: k/s need two values");
    node.kh = k[0];
    node.kw = k[1];
    node.sh = s[0];
    node.sw = s[1];
    const std::string pad = kv.take("pad");
    if (pad == "same")
        node.pad = Padding::Same;
    else if (pad == "valid")
        node.pad = Padding::Valid;
    else
        throw FormatError("arch: bad padding '" + pad + "'");
}

}  // namespace

std::string serialize(const ArchSpec& spec) {
    std::ostringstream out;
    out << "arch input=" << spec.input.c << ',' << spec.input.h << ',' << spec.input.w
        << " classes=" << spec.num_classes << " task=" << to_string(spec.task) << '\n';
    int index = 0;
    emit_chain(out, spec.nodes, index);
    return out.str();
}

ArchSpec parse_arch(const std::string& text) {
    ArchSpec spec;
    bool have_header = false;

    // Stack of chains being filled: top-level, residual bodies, shortcuts.
    std::vector<std::vector<Node>*> stack = {&spec.nodes};
    std::vector<Node*> open_res;

    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
            line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        std::istringstream ls(line.substr(start));

        std::string first;
        ls >> first;
        std::string kind;
        KeyValues kv;
        if (!have_header) {
            if (first != "arch") throw FormatError("arch: expected 'arch' header line");
            kind = "arch";
        } else {
            // leading index is informational; validate it is numeric
            parse_int(first, "node index");
            ls >> kind;
            if (kind.empty()) throw FormatError("arch: node line lacks a kind: " + line);
        }
        std::string token;
        while (ls >> token) {
            const auto eq = token.find('=');
            if (eq == std::string::npos)
                throw FormatError("arch: expected key=value, got '" + token + "'");
            kv.kv[token.substr(0, eq)] = token.substr(eq + 1);
        }

        if (kind == "arch") {
            const auto dims = parse_int_list(kv.take("input"), "input");
            if (dims.size() != 3) throw FormatError("arch: input needs c,h,w");
            spec.input = Shape3{dims[0], dims[1], dims[2]};
            spec.num_classes = parse_int(kv.take("classes"), "classes");
            const std::string task = kv.take("task");
            if (task == "single")
                spec.task = TaskKind::SingleLabel;
            else if (task == "multi")
                spec.task = TaskKind::MultiLabel;
            else
                throw FormatError("arch: bad task '" + task + "'");
            kv.finish(line);
            have_header = true;
            continue;
        }

        Node node;
        node.module_id = parse_int(kv.take("m"), "m");
        if (kind == "res") {
            node.kind = NodeKind::Residual;
            kv.finish(line);
            stack.back()->push_back(std::move(node));
            open_res.push_back(&stack.back()->back());
            stack.push_back(&open_res.back()->body);
            continue;
        }
        if (kind == "res_shortcut") {
            if (open_res.empty() || stack.back() != &open_res.back()->body)
                throw FormatError("arch: res_shortcut outside a residual body");
            kv.finish(line);
            stack.pop_back();
            stack.push_back(&open_res.back()->shortcut);
            continue;
        }
        if (kind == "res_end") {
            if (open_res.empty()) throw FormatError("arch: res_end without res");
            kv.finish(line);
            stack.pop_back();
            open_res.pop_back();
            continue;
        }

        if (kind == "conv") {
            node.kind = NodeKind::Conv;
            node.out_channels = parse_int(kv.take("out"), "out");
            parse_geometry(kv, node);
        } else if (kind == "dwconv") {
            node.kind = NodeKind::DepthwiseConv;
            node.multiplier = parse_int(kv.take("mult"), "mult");
            parse_geometry(kv, node);
        } else if (kind == "sepconv") {
            node.kind = NodeKind::SepConv;
            node.out_channels = parse_int(kv.take("out"), "out");
            node.multiplier = parse_int(kv.take("mult"), "mult");
            parse_geometry(kv, node);
            const std::string ia = kv.take("ia");
            if (ia == "none")
                node.intermediate = Activation::None;
            else if (ia == "relu")
                node.intermediate = Activation::ReLU;
            else if (ia == "elu")
                node.intermediate = Activation::ELU;
            else
                throw FormatError("arch: bad intermediate activation '" + ia + "'");
        } else if (kind == "spectrum") {
            node.kind = NodeKind::SpectrumConv;
            node.out_channels = parse_int(kv.take("out"), "out");
            node.segments = parse_int(kv.take("g"), "g");
            parse_geometry(kv, node);
        } else if (kind == "gconv" || kind == "towers") {
            node.kind = kind == "gconv" ? NodeKind::GroupedConv : NodeKind::InceptionTowers;
            node.widths = parse_int_list(kv.take("widths"), "widths");
            parse_geometry(kv, node);
        } else if (kind == "bn") {
            node.kind = NodeKind::BatchNorm;
        } else if (kind == "relu") {
            node.kind = NodeKind::ReLU;
        } else if (kind == "elu") {
            node.kind = NodeKind::ELU;
        } else if (kind == "maxpool") {
            node.kind = NodeKind::MaxPool;
            parse_geometry(kv, node);
        } else if (kind == "gap") {
            node.kind = NodeKind::GlobalAvgPool;
        } else if (kind == "dropout") {
            node.kind = NodeKind::Dropout;
            node.rate = std::strtod(kv.take("rate").c_str(), nullptr);
        } else if (kind == "dense") {
            node.kind = NodeKind::Dense;
            node.units = parse_int(kv.take("units"), "units");
        } else {
            throw FormatError("arch: unknown node kind '" + kind + "'");
        }
        kv.finish(line);
        stack.back()->push_back(std::move(node));
    }
    if (!have_header) throw FormatError("arch: missing header");
    if (!open_res.empty()) throw FormatError("arch: unterminated residual group");
    validate(spec);
    return spec;
}

ArchSpec load_arch_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("arch: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_arch(buf.str());
}

}  // namespace xsep
