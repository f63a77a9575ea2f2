#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ord2seq {

// Categories are 0-indexed internally; external I/O converts via an index base.
using CategoryId = int;

// Contiguous category interval [lo, hi], inclusive.
struct CategoryRange {
    CategoryId lo = 0;
    CategoryId hi = 0;
    int count() const { return hi - lo + 1; }
    bool contains(CategoryId c) const { return c >= lo && c <= hi; }
    friend bool operator==(const CategoryRange&, const CategoryRange&) = default;
};

// Root-to-leaf option path: 0 = left subtree, 1 = right subtree.
struct PathCode {
    std::vector<int> bits;
    friend bool operator==(const PathCode&, const PathCode&) = default;
};

// Decoder input sequence [s, c_1, ..., c_{d-1}]: the path code shifted right
// behind a distinguished start marker.
struct ShiftedTarget {
    static constexpr int kStartMarker = -1;
    std::vector<int> tokens;
    friend bool operator==(const ShiftedTarget&, const ShiftedTarget&) = default;
};

// One indicator vector over all n categories per decoding step; step t marks
// the categories still alive at the depth-t node of the path.
struct MultiHotSequence {
    std::vector<std::vector<int>> steps;
    friend bool operator==(const MultiHotSequence&, const MultiHotSequence&) = default;
};

// Balanced binary tree over an ordered category range. Every internal node
// splits its interval into two contiguous halves whose sizes differ by at
// most one (left child takes the larger half). All leaves sit at depth
// ceil(log2 n); a node that reaches a single category early is padded with a
// chain of single same-range children down to that depth.
class DichotomicTree {
public:
    struct Node {
        CategoryRange range;
        int left = -1;   // node index, -1 = none
        int right = -1;
        bool is_leaf() const { return left < 0 && right < 0; }
        bool is_padded() const { return left >= 0 && right < 0; }
    };

    // Throws std::invalid_argument for category counts < 2.
    explicit DichotomicTree(int categories);

    int categories() const { return categories_; }
    int depth() const { return depth_; }
    const std::vector<Node>& nodes() const { return nodes_; }

    // Path code of category c: d decisions from the root, padded edges emit 0.
    PathCode encode_path(CategoryId c) const;

    // Inverse map. Total on padded nodes: either bit value stays in the
    // singleton range. Throws on wrong-length paths.
    CategoryId decode_path(const PathCode& path) const;

    // Indicator of the depth-t node range on c's path, for t = 1..d.
    MultiHotSequence encode_multihot(CategoryId c) const;

    // Child ranges of the node reached by a partial path; used by the
    // subtree-average decision rule. On a padded node both ranges equal the
    // singleton. The prefix must leave at least one decision to make.
    std::pair<CategoryRange, CategoryRange> node_ranges_at(std::span<const int> prefix) const;

    // Range of the node reached by a partial path (root for empty prefix).
    CategoryRange range_at(std::span<const int> prefix) const;

    nlohmann::json to_json() const;
    static DichotomicTree from_json(const nlohmann::json& doc);

private:
    DichotomicTree() = default;
    int build(CategoryRange range, int level);
    int walk(std::span<const int> prefix) const;
    void check_category(CategoryId c) const;

    int categories_ = 0;
    int depth_ = 0;
    std::vector<Node> nodes_;  // preorder, root at index 0
};

// [s, p_1, ..., p_{d-1}]: drops the last decision and prepends the start marker.
ShiftedTarget shift_right(const PathCode& path);

}  // namespace ord2seq
