#include "ord2seq/codec.hpp"

#include <cmath>
#include <stdexcept>

namespace ord2seq {

namespace {

int depth_for(int categories) {
    int d = 0;
    int reach = 1;
    while (reach < categories) {
        reach *= 2;
        ++d;
    }
    return d;
}

}  // namespace

DichotomicTree::DichotomicTree(int categories) {
    if (categories < 2)
        throw std::invalid_argument("codec: invalid category count " + std::to_string(categories) +
                                    ", need at least 2");
    categories_ = categories;
    depth_ = depth_for(categories);
    build({0, categories - 1}, 0);
}

int DichotomicTree::build(CategoryRange range, int level) {
    const int index = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{range, -1, -1});
    if (level == depth_) return index;

    if (range.count() == 1) {
        // Equal-leaf-depth padding: single same-range child, edge bit 0.
        const int child = build(range, level + 1);
        nodes_[index].left = child;
        return index;
    }
    const int left_count = (range.count() + 1) / 2;  // left-heavy split
    const CategoryRange left_range{range.lo, range.lo + left_count - 1};
    const CategoryRange right_range{range.lo + left_count, range.hi};
    const int left = build(left_range, level + 1);
    const int right = build(right_range, level + 1);
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
}

void DichotomicTree::check_category(CategoryId c) const {
    if (c < 0 || c >= categories_)
        throw std::invalid_argument("codec: invalid category " + std::to_string(c) +
                                    ", expected [0," + std::to_string(categories_) + ")");
}

PathCode DichotomicTree::encode_path(CategoryId c) const {
    check_category(c);
    PathCode path;
    path.bits.reserve(static_cast<std::size_t>(depth_));
    int at = 0;
    for (int level = 0; level < depth_; ++level) {
        const Node& node = nodes_[static_cast<std::size_t>(at)];
        if (node.is_padded()) {
            path.bits.push_back(0);
            at = node.left;
        } else if (nodes_[static_cast<std::size_t>(node.left)].range.contains(c)) {
            path.bits.push_back(0);
            at = node.left;
        } else {
            path.bits.push_back(1);
            at = node.right;
        }
    }
    return path;
}

CategoryId DichotomicTree::decode_path(const PathCode& path) const {
    if (static_cast<int>(path.bits.size()) != depth_)
        throw std::invalid_argument("codec: invalid path of length " +
                                    std::to_string(path.bits.size()) + ", tree depth is " +
                                    std::to_string(depth_));
    const int at = walk(path.bits);
    return nodes_[static_cast<std::size_t>(at)].range.lo;
}

int DichotomicTree::walk(std::span<const int> prefix) const {
    int at = 0;
    for (int bit : prefix) {
        if (bit != 0 && bit != 1)
            throw std::invalid_argument("codec: invalid path bit " + std::to_string(bit));
        const Node& node = nodes_[static_cast<std::size_t>(at)];
        if (node.is_padded())
            at = node.left;  // padded edge absorbs either bit value
        else
            at = bit ? node.right : node.left;
    }
    return at;
}

MultiHotSequence DichotomicTree::encode_multihot(CategoryId c) const {
    check_category(c);
    const PathCode path = encode_path(c);
    MultiHotSequence seq;
    seq.steps.reserve(static_cast<std::size_t>(depth_));
    int at = 0;
    for (int bit : path.bits) {
        const Node& node = nodes_[static_cast<std::size_t>(at)];
        at = node.is_padded() ? node.left : (bit ? node.right : node.left);
        const CategoryRange r = nodes_[static_cast<std::size_t>(at)].range;
        std::vector<int> hot(static_cast<std::size_t>(categories_), 0);
        for (int i = r.lo; i <= r.hi; ++i) hot[static_cast<std::size_t>(i)] = 1;
        seq.steps.push_back(std::move(hot));
    }
    return seq;
}

std::pair<CategoryRange, CategoryRange> DichotomicTree::node_ranges_at(
    std::span<const int> prefix) const {
    if (static_cast<int>(prefix.size()) > depth_ - 1)
        throw std::invalid_argument("codec: invalid prefix of length " +
                                    std::to_string(prefix.size()) + ", tree depth is " +
                                    std::to_string(depth_));
    const Node& node = nodes_[static_cast<std::size_t>(walk(prefix))];
    if (node.is_padded()) return {node.range, node.range};
    return {nodes_[static_cast<std::size_t>(node.left)].range,
            nodes_[static_cast<std::size_t>(node.right)].range};
}

CategoryRange DichotomicTree::range_at(std::span<const int> prefix) const {
    if (static_cast<int>(prefix.size()) > depth_)
        throw std::invalid_argument("codec: invalid prefix of length " +
                                    std::to_string(prefix.size()) + ", tree depth is " +
                                    std::to_string(depth_));
    return nodes_[static_cast<std::size_t>(walk(prefix))].range;
}

nlohmann::json DichotomicTree::to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    for (const Node& node : nodes_) {
        nlohmann::json n;
        n["lo"] = node.range.lo;
        n["hi"] = node.range.hi;
        n["left"] = node.left < 0 ? nlohmann::json() : nlohmann::json(node.left);
        n["right"] = node.right < 0 ? nlohmann::json() : nlohmann::json(node.right);
        nodes.push_back(std::move(n));
    }
    return nlohmann::json{{"n", categories_}, {"depth", depth_}, {"nodes", std::move(nodes)}};
}

DichotomicTree DichotomicTree::from_json(const nlohmann::json& doc) {
    DichotomicTree tree;
    tree.categories_ = doc.at("n").get<int>();
    tree.depth_ = doc.at("depth").get<int>();
    for (const auto& n : doc.at("nodes")) {
        Node node;
        node.range.lo = n.at("lo").get<int>();
        node.range.hi = n.at("hi").get<int>();
        node.left = n.at("left").is_null() ? -1 : n.at("left").get<int>();
        node.right = n.at("right").is_null() ? -1 : n.at("right").get<int>();
        tree.nodes_.push_back(node);
    }
    return tree;
}

ShiftedTarget shift_right(const PathCode& path) {
    ShiftedTarget target;
    target.tokens.reserve(path.bits.size());
    target.tokens.push_back(ShiftedTarget::kStartMarker);
    for (std::size_t i = 0; i + 1 < path.bits.size(); ++i) target.tokens.push_back(path.bits[i]);
    return target;
}

}  // namespace ord2seq
