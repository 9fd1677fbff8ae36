#pragma once

#include <Eigen/Dense>
#include <string>
#include <variant>

namespace mitune {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Conditioning signal fed to a denoiser. Null is the distinguished value
// routing to the unconditional branch; it is never encoded as a valid label.
struct NullCond {
    bool operator==(const NullCond&) const = default;
};

struct LabelCond {
    int index = 0;  // 0..C-1
    bool operator==(const LabelCond&) const = default;
};

struct VectorCond {
    Vec values;
    bool operator==(const VectorCond& o) const { return values == o.values; }
};

using Condition = std::variant<NullCond, LabelCond, VectorCond>;

inline bool is_null(const Condition& c) {
    return std::holds_alternative<NullCond>(c);
}

inline std::string describe(const Condition& c) {
    if (std::holds_alternative<NullCond>(c)) return "null";
    if (const auto* l = std::get_if<LabelCond>(&c))
        return "label:" + std::to_string(l->index);
    return "vector[" +
           std::to_string(std::get<VectorCond>(c).values.size()) + "]";
}

}  // namespace mitune
