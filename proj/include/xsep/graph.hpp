#pragma once

#include <string>
#include <vector>

#include "xsep/conv.hpp"

namespace xsep {

struct Shape3 {
    int c = 0, h = 0, w = 0;

    bool operator==(const Shape3&) const = default;

    std::string str() const {
        return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

enum class NodeKind {
    Conv,
    DepthwiseConv,
    SepConv,
    SpectrumConv,
    GroupedConv,
    InceptionTowers,
    BatchNorm,
    ReLU,
    ELU,
    MaxPool,
    GlobalAvgPool,
    Dropout,
    Dense,
    Residual,
};

enum class TaskKind { SingleLabel, MultiLabel };

// One layer descriptor. Residual nodes group a body chain and an optional
// projection shortcut chain (empty shortcut = identity).
struct Node {
    NodeKind kind = NodeKind::Conv;
    int module_id = 0;

    int out_channels = 0;  // Conv / SepConv / SpectrumConv projection width
    int kh = 3, kw = 3;
    int sh = 1, sw = 1;
    Padding pad = Padding::Same;
    int multiplier = 1;                     // DepthwiseConv / SepConv
    Activation intermediate = Activation::None;  // SepConv
    int segments = 1;                       // SpectrumConv
    std::vector<int> widths;                // InceptionTowers / GroupedConv segments
    double rate = 0.0;                      // Dropout
    int units = 0;                          // Dense

    std::vector<Node> body, shortcut;       // Residual

    // Filled by validate().
    Shape3 in_shape, out_shape;
    std::string name;

    ConvGeometry geometry() const { return ConvGeometry{kh, kw, sh, sw, pad}; }
};

struct ArchSpec {
    Shape3 input;
    int num_classes = 0;
    TaskKind task = TaskKind::SingleLabel;
    std::vector<Node> nodes;
    bool validated = false;
};

// Propagates shapes through every node, assigns stable node names, and
// rejects inconsistent graphs (residual join mismatch, empty geometry,
// dense in a non-terminal position with spatial extent left, ...).
void validate(ArchSpec& spec);

// Structural counts. Convolutional layers are Conv/DepthwiseConv/SepConv/
// SpectrumConv/GroupedConv/InceptionTowers nodes on the main path; projection
// shortcuts are excluded, matching how the architecture's 36 layers are
// counted. Modules are distinct module_id values; every Residual node is one
// residual connection.
int conv_layer_count(const ArchSpec& spec);
int module_count(const ArchSpec& spec);
int residual_connection_count(const ArchSpec& spec);

// Line-oriented text form: `arch` header line, then one `<index> <kind>
// <key=value ...>` line per node, with res/res_shortcut/res_end marker lines
// delimiting residual groups. Round-trips byte-exactly. Grammar in
// docs/formats.md.
std::string serialize(const ArchSpec& spec);
ArchSpec parse_arch(const std::string& text);
ArchSpec load_arch_file(const std::string& path);

const char* to_string(NodeKind kind);
const char* to_string(TaskKind task);

}  // namespace xsep
