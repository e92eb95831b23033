// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "umm/error.hpp"
#include "umm/rng.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Synthetic compositional world: objects with shape, color, count and grid
// position. Scenes render to discrete token grids and are scored against an
// exact brute-force oracle.
// ---------------------------------------------------------------------------

struct WorldConfig {
    std::vector<std::string> shapes = {"square", "circle", "triangle", "star"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow", "purple", "orange"};
    int grid_size = 8;
    int max_count = 4; // per (shape, color, region) group; grammar stops at "four"

    int n_shapes() const { return static_cast<int>(shapes.size()); }
    int n_colors() const { return static_cast<int>(colors.size()); }
    int n_cells() const { return grid_size * grid_size; }
    // CellValue: 0 = empty, then 1 + shape * n_colors + color.
    int n_cell_values() const { return 1 + n_shapes() * n_colors(); }

    void validate() const {
        require(grid_size >= 1, "config", "grid_size must be >= 1");
        require(!shapes.empty() && !colors.empty(), "config", "shapes and colors must be non-empty");
        require(max_count >= 1 && max_count <= 4, "config", "max_count must be in [1, 4]");
    }
};

inline constexpr std::array<const char*, 4> kCountWords = {"one", "two", "three", "four"};
inline constexpr std::array<const char*, 9> kRegionNames = {
    "top left",    "top center",    "top right",
    "middle left", "center",        "middle right",
    "bottom left", "bottom center", "bottom right"};

struct ObjectSpec {
    int shape = 0;
    int color = 0;
    int row = 0;
    int col = 0;
};

struct Scene {
    std::vector<ObjectSpec> objects;
    int grid_size = 0;
};

/// Row-major grid of CellValue. The "image" before tokenization.
struct SceneGrid {
    int grid_size = 0;
    std::vector<int> cells;

    int at(int row, int col) const { return cells[static_cast<size_t>(row) * grid_size + col]; }
    int& at(int row, int col) { return cells[static_cast<size_t>(row) * grid_size + col]; }
};

enum class Difficulty { single, two_obj, counting, positional, mixed };

inline constexpr std::array<Difficulty, 5> kAllDifficulties = {
    Difficulty::single, Difficulty::two_obj, Difficulty::counting,
    Difficulty::positional, Difficulty::mixed};

inline const char* difficulty_name(Difficulty d) {
    switch (d) {
        case Difficulty::single: return "single";
        case Difficulty::two_obj: return "two_obj";
        case Difficulty::counting: return "counting";
        case Difficulty::positional: return "positional";
        case Difficulty::mixed: return "mixed";
    }
    return "?";
}

inline Difficulty difficulty_from_name(const std::string& name) {
    for (Difficulty d : kAllDifficulties) {
        if (name == difficulty_name(d)) {
            return d;
        }
    }
    fail("config", "unknown difficulty: " + name);
}

// ----------------------------------------------------------------- regions

/// 3x3 quantization of the grid: region index in [0, 9).
inline int region_of(int row, int col, int grid_size) {
    const int r = row * 3 / grid_size;
    const int c = col * 3 / grid_size;
    return r * 3 + c;
}

inline int region_of(const ObjectSpec& o, int grid_size) { return region_of(o.row, o.col, grid_size); }

/// All cells of a region in row-major order.
inline std::vector<std::pair<int, int>> region_cells(int region, int grid_size) {
    std::vector<std::pair<int, int>> cells;
    for (int row = 0; row < grid_size; ++row) {
        for (int col = 0; col < grid_size; ++col) {
            if (region_of(row, col, grid_size) == region) {
                cells.emplace_back(row, col);
            }
        }
    }
    return cells;
}

// --------------------------------------------------------------- validation

inline int cell_value_of(int shape, int color, const WorldConfig& world) {
    return 1 + shape * world.n_colors() + color;
}

inline void validate_scene(const Scene& scene, const WorldConfig& world) {
    require(scene.grid_size == world.grid_size, "format", "scene grid_size does not match the world");
    require(!scene.objects.empty(), "format", "scene must contain at least one object");
    std::map<std::pair<int, int>, int> occupied;
    std::map<std::tuple<int, int, int>, int> group_count;
    for (const ObjectSpec& o : scene.objects) {
        require(o.shape >= 0 && o.shape < world.n_shapes(), "format", "shape index out of range");
        require(o.color >= 0 && o.color < world.n_colors(), "format", "color index out of range");
        require(o.row >= 0 && o.row < world.grid_size && o.col >= 0 && o.col < world.grid_size,
                "format", "object position out of grid bounds");
        require(occupied.emplace(std::make_pair(o.row, o.col), 1).second, "format",
                "two objects occupy the same cell");
        const int n = ++group_count[{o.shape, o.color, region_of(o, world.grid_size)}];
        require(n <= world.max_count, "format", "object group exceeds max_count");
    }
}

// ------------------------------------------------------------------- render

inline SceneGrid render_scene(const Scene& scene, const WorldConfig& world) {
    validate_scene(scene, world);
    SceneGrid grid;
    grid.grid_size = world.grid_size;
    grid.cells.assign(static_cast<size_t>(world.n_cells()), 0);
    for (const ObjectSpec& o : scene.objects) {
        grid.at(o.row, o.col) = cell_value_of(o.shape, o.color, world);
    }
    return grid;
}

// ----------------------------------------------------------------- describe

namespace detail {

/// Scene summarized as (region, shape, color) -> count, in canonical order.
inline std::map<std::tuple<int, int, int>, int> scene_groups(const Scene& scene) {
    std::map<std::tuple<int, int, int>, int> groups;
    for (const ObjectSpec& o : scene.objects) {
        ++groups[{region_of(o, scene.grid_size), o.shape, o.color}];
    }
    return groups;
}

inline std::string plural(const std::string& shape) { return shape + "s"; }

} // namespace detail

/// Canonical prompt: "<count> <color> <shape[s]> in the <region>" clauses in
/// (region, shape, color) order, joined by "and".
inline std::string describe_scene(const Scene& scene, const WorldConfig& world) {
    validate_scene(scene, world);
    std::ostringstream out;
    bool first = true;
    for (const auto& [key, count] : detail::scene_groups(scene)) {
        const auto [region, shape, color] = key;
        if (!first) {
            out << " and ";
        }
        first = false;
        out << kCountWords[count - 1] << ' ' << world.colors[color] << ' '
            << (count > 1 ? detail::plural(world.shapes[shape]) : world.shapes[shape]) << " in the "
            << kRegionNames[region];
    }
    return out.str();
}

// ------------------------------------------------------------------ scoring

/// Exact per-criterion evaluation of a grid against a scene.
/// presence is judged per shape class of the scene; count and color per shape
/// class over the union of scene and grid (extra content fails); position per
/// scene object via greedy in-region matching. overall is the unweighted mean
/// of all pass indicators.
struct OracleScore {
    double presence = 0.0;
    std::vector<std::pair<int, bool>> presence_ok; // per scene shape class
    std::vector<std::pair<int, bool>> count_ok;    // per union shape class
    std::vector<std::pair<int, bool>> color_ok;    // per union shape class
    std::vector<bool> position_ok;                 // per scene object
    double overall = 0.0;
};

inline OracleScore score_alignment(const SceneGrid& grid, const Scene& scene, const WorldConfig& world) {
    validate_scene(scene, world);
    require(grid.grid_size == scene.grid_size, "format", "grid/scene dimension mismatch");
    require(grid.cells.size() == static_cast<size_t>(world.n_cells()), "format", "grid cell count mismatch");

    const int n_colors = world.n_colors();
    // Tallies per shape: totals, per-color counts, per-(region, color) counts.
    std::map<int, int> scene_total, grid_total;
    std::map<std::pair<int, int>, int> scene_sc, grid_sc;                 // (shape, color)
    std::map<std::tuple<int, int, int>, int> grid_rsc;                    // (region, shape, color)
    for (const ObjectSpec& o : scene.objects) {
        ++scene_total[o.shape];
        ++scene_sc[{o.shape, o.color}];
    }
    for (int row = 0; row < grid.grid_size; ++row) {
        for (int col = 0; col < grid.grid_size; ++col) {
            const int v = grid.at(row, col);
            if (v == 0) {
                continue;
            }
            require(v >= 1 && v < world.n_cell_values(), "format", "grid holds an invalid cell value");
            const int shape = (v - 1) / n_colors;
            const int color = (v - 1) % n_colors;
            ++grid_total[shape];
            ++grid_sc[{shape, color}];
            ++grid_rsc[{region_of(row, col, grid.grid_size), shape, color}];
        }
    }

    OracleScore score;
    for (const auto& [shape, n] : scene_total) {
        (void)n;
        score.presence_ok.emplace_back(shape, grid_total.count(shape) > 0);
    }

    std::vector<int> union_shapes;
    for (const auto& [shape, n] : scene_total) {
        (void)n;
        union_shapes.push_back(shape);
    }
    for (const auto& [shape, n] : grid_total) {
        (void)n;
        if (!scene_total.count(shape)) {
            union_shapes.push_back(shape);
        }
    }
    std::sort(union_shapes.begin(), union_shapes.end());

    for (int shape : union_shapes) {
        const int want = scene_total.count(shape) ? scene_total.at(shape) : 0;
        const int got = grid_total.count(shape) ? grid_total.at(shape) : 0;
        score.count_ok.emplace_back(shape, want == got);
        bool colors_match = true;
        for (int color = 0; color < n_colors; ++color) {
            const auto key = std::make_pair(shape, color);
            const int w = scene_sc.count(key) ? scene_sc.at(key) : 0;
            const int g = grid_sc.count(key) ? grid_sc.at(key) : 0;
            if (w != g) {
                colors_match = false;
                break;
            }
        }
        score.color_ok.emplace_back(shape, colors_match);
    }

    // Greedy matching inside each (region, shape, color) group: the first
    // min(wanted, found) objects of the group pass.
    std::map<std::tuple<int, int, int>, int> remaining = grid_rsc;
    for (const ObjectSpec& o : scene.objects) {
        const auto key = std::make_tuple(region_of(o, scene.grid_size), o.shape, o.color);
        auto it = remaining.find(key);
        if (it != remaining.end() && it->second > 0) {
            --it->second;
            score.position_ok.push_back(true);
        } else {
            score.position_ok.push_back(false);
        }
    }

    int passed = 0;
    int total = 0;
    int presence_passed = 0;
    for (const auto& [shape, ok] : score.presence_ok) {
        (void)shape;
        presence_passed += ok ? 1 : 0;
        passed += ok ? 1 : 0;
        ++total;
    }
    score.presence = static_cast<double>(presence_passed) / static_cast<double>(score.presence_ok.size());
    for (const auto& [shape, ok] : score.count_ok) {
        (void)shape;
        passed += ok ? 1 : 0;
        ++total;
    }
    for (const auto& [shape, ok] : score.color_ok) {
        (void)shape;
        passed += ok ? 1 : 0;
        ++total;
    }
    for (bool ok : score.position_ok) {
        passed += ok ? 1 : 0;
        ++total;
    }
    score.overall = static_cast<double>(passed) / static_cast<double>(total);
    return score;
}

// ----------------------------------------------------------------- sampling

namespace detail {

/// Tracks free cells per region while placing groups.
class PlacementState {
public:
    explicit PlacementState(int grid_size) : grid_size_(grid_size) {
        for (int region = 0; region < 9; ++region) {
            free_.push_back(region_cells(region, grid_size));
        }
    }

    int free_in(int region) const { return static_cast<int>(free_[region].size()); }

    /// Regions with at least `need` free cells.
    std::vector<int> regions_with_capacity(int need) const {
        std::vector<int> out;
        for (int region = 0; region < 9; ++region) {
            if (free_in(region) >= need) {
                out.push_back(region);
            }
        }
        return out;
    }

    /// Removes and returns `count` distinct random cells of the region.
    std::vector<std::pair<int, int>> take(int region, int count, Rng& rng) {
        std::vector<std::pair<int, int>> cells;
        for (int i = 0; i < count; ++i) {
            auto& pool = free_[region];
            const size_t pick = rng.below(pool.size());
            cells.push_back(pool[pick]);
            pool.erase(pool.begin() + static_cast<long>(pick));
        }
        return cells;
    }

private:
    int grid_size_;
    std::vector<std::vector<std::pair<int, int>>> free_;
};

struct GroupSpec {
    int shape;
    int color;
    int region;
    int count;
};

inline void place_group(Scene& scene, PlacementState& state, const GroupSpec& g, Rng& rng) {
    for (const auto& [row, col] : state.take(g.region, g.count, rng)) {
        scene.objects.push_back({g.shape, g.color, row, col});
    }
}

} // namespace detail

/// Deterministic scene sampler per difficulty class. Groups always use
/// distinct (shape, color) pairs so every sampled scene has a unique
/// canonical description.
inline Scene sample_scene(Rng& rng, Difficulty difficulty, const WorldConfig& world) {
    world.validate();
    Scene scene;
    scene.grid_size = world.grid_size;
    detail::PlacementState state(world.grid_size);

    auto pick_region = [&](int need) {
        const auto candidates = state.regions_with_capacity(need);
        require(!candidates.empty(), "format", "no region has capacity for the requested group");
        return candidates[rng.below(candidates.size())];
    };
    auto random_group = [&](int shape, int color, int count) {
        detail::GroupSpec g{shape, color, pick_region(count), count};
        detail::place_group(scene, state, g, rng);
        return g;
    };

    const int n_shapes = world.n_shapes();
    const int n_colors = world.n_colors();
    switch (difficulty) {
        case Difficulty::single: {
            random_group(rng.below_int(n_shapes), rng.below_int(n_colors), 1);
            break;
        }
        case Difficulty::two_obj: {
            const int first = rng.below_int(n_shapes);
            int second = rng.below_int(n_shapes - 1);
            if (second >= first) {
                ++second;
            }
            random_group(first, rng.below_int(n_colors), 1);
            random_group(second, rng.below_int(n_colors), 1);
            break;
        }
        case Difficulty::counting: {
            const int cap = std::min(world.max_count, state.regions_with_capacity(2).empty() ? 1 : world.max_count);
            const int count = cap >= 2 ? 2 + rng.below_int(cap - 1) : 1;
            random_group(rng.below_int(n_shapes), rng.below_int(n_colors), count);
            break;
        }
        case Difficulty::positional: {
            const int first = rng.below_int(n_shapes);
            int second = rng.below_int(n_shapes - 1);
            if (second >= first) {
                ++second;
            }
            const int region_a = pick_region(1);
            detail::place_group(scene, state, {first, rng.below_int(n_colors), region_a, 1}, rng);
            auto candidates = state.regions_with_capacity(1);
            std::erase(candidates, region_a);
            require(!candidates.empty(), "format", "world too small for positional scenes");
            const int region_b = candidates[rng.below(candidates.size())];
            detail::place_group(scene, state, {second, rng.below_int(n_colors), region_b, 1}, rng);
            break;
        }
        case Difficulty::mixed: {
            const int n_groups = 1 + rng.below_int(3);
            std::vector<std::pair<int, int>> used;
            for (int i = 0; i < n_groups; ++i) {
                int shape = 0;
                int color = 0;
                do {
                    shape = rng.below_int(n_shapes);
                    color = rng.below_int(n_colors);
                } while (std::find(used.begin(), used.end(), std::make_pair(shape, color)) != used.end());
                used.emplace_back(shape, color);
                const int region = pick_region(1);
                const int cap = std::min(world.max_count, state.free_in(region));
                const int count = 1 + rng.below_int(cap);
                detail::place_group(scene, state, {shape, color, region, count}, rng);
            }
            break;
        }
    }
    validate_scene(scene, world);
    return scene;
}

// ----------------------------------------------------------------- ablation

enum class PromptCategory { color, count, position };

inline constexpr std::array<PromptCategory, 3> kAllPromptCategories = {
    PromptCategory::color, PromptCategory::count, PromptCategory::position};

inline const char* prompt_category_name(PromptCategory c) {
    switch (c) {
        case PromptCategory::color: return "color";
        case PromptCategory::count: return "count";
        case PromptCategory::position: return "position";
    }
    return "?";
}

namespace detail {

struct Clause {
    std::optional<int> count;  // index into kCountWords
    std::optional<int> color;
    int shape = 0;
    bool plural = false;
    std::optional<int> region;
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        words.push_back(word);
    }
    return words;
}

inline int find_index(const std::vector<std::string>& list, const std::string& word) {
    for (size_t i = 0; i < list.size(); ++i) {
        if (list[i] == word) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

/// Parses the canonical grammar with every component optional except the
/// shape word, so already-ablated prompts remain parseable.
inline std::vector<Clause> parse_prompt(const std::string& prompt, const WorldConfig& world) {
    const auto words = split_words(prompt);
    require(!words.empty(), "format", "empty prompt");
    std::vector<Clause> clauses;
    size_t i = 0;
    while (i < words.size()) {
        Clause clause;
        for (size_t c = 0; c < kCountWords.size(); ++c) {
            if (words[i] == kCountWords[c]) {
                clause.count = static_cast<int>(c);
                ++i;
                break;
            }
        }
        if (i < words.size()) {
            const int color = find_index(world.colors, words[i]);
            if (color >= 0) {
                clause.color = color;
                ++i;
            }
        }
        require(i < words.size(), "format", "clause missing a shape word: " + prompt);
        int shape = find_index(world.shapes, words[i]);
        if (shape >= 0) {
            clause.plural = false;
        } else {
            for (size_t s = 0; s < world.shapes.size(); ++s) {
                if (words[i] == plural(world.shapes[s])) {
                    shape = static_cast<int>(s);
                    clause.plural = true;
                    break;
                }
            }
        }
        require(shape >= 0, "format", "expected a shape word, got: " + words[i]);
        clause.shape = shape;
        ++i;
        if (i + 1 < words.size() && words[i] == "in" && words[i + 1] == "the") {
            i += 2;
            require(i < words.size(), "format", "dangling 'in the': " + prompt);
            int region = -1;
            if (i + 1 < words.size()) {
                const std::string two = words[i] + " " + words[i + 1];
                for (size_t r = 0; r < kRegionNames.size(); ++r) {
                    if (two == kRegionNames[r]) {
                        region = static_cast<int>(r);
                        i += 2;
                        break;
                    }
                }
            }
            if (region < 0) {
                for (size_t r = 0; r < kRegionNames.size(); ++r) {
                    if (words[i] == kRegionNames[r]) {
                        region = static_cast<int>(r);
                        ++i;
                        break;
                    }
                }
            }
            require(region >= 0, "format", "expected a region name: " + prompt);
            clause.region = region;
        }
        if (i < words.size()) {
            require(words[i] == "and", "format", "expected 'and' between clauses: " + prompt);
            ++i;
            require(i < words.size(), "format", "dangling 'and': " + prompt);
        }
        clauses.push_back(clause);
    }
    return clauses;
}

inline std::string emit_prompt(const std::vector<Clause>& clauses, const WorldConfig& world) {
    std::ostringstream out;
    bool first = true;
    for (const Clause& clause : clauses) {
        if (!first) {
            out << " and ";
        }
        first = false;
        bool lead = true;
        auto append = [&](const std::string& word) {
            if (!lead) {
                out << ' ';
            }
            lead = false;
            out << word;
        };
        if (clause.count) {
            append(kCountWords[*clause.count]);
        }
        if (clause.color) {
            append(world.colors[*clause.color]);
        }
        append(clause.plural ? plural(world.shapes[clause.shape]) : world.shapes[clause.shape]);
        if (clause.region) {
            append("in");
            out << " the " << kRegionNames[*clause.region];
        }
    }
    return out.str();
}

} // namespace detail

/// Deletes all terms of one category from a canonical prompt. A category
/// absent from the prompt leaves it unchanged.
inline std::string ablate_prompt(const std::string& prompt, PromptCategory category,
                                 const WorldConfig& world) {
    auto clauses = detail::parse_prompt(prompt, world);
    for (auto& clause : clauses) {
        switch (category) {
            case PromptCategory::color: clause.color.reset(); break;
            case PromptCategory::count: clause.count.reset(); break;
            case PromptCategory::position: clause.region.reset(); break;
        }
    }
    return detail::emit_prompt(clauses, world);
}

// ------------------------------------------------------------ serialization

inline nlohmann::ordered_json scene_to_json(const Scene& scene, const WorldConfig& world) {
    validate_scene(scene, world);
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["grid_size"] = scene.grid_size;
    j["objects"] = nlohmann::ordered_json::array();
    for (const ObjectSpec& o : scene.objects) {
        nlohmann::ordered_json obj;
        obj["shape"] = world.shapes[o.shape];
        obj["color"] = world.colors[o.color];
        obj["row"] = o.row;
        obj["col"] = o.col;
        j["objects"].push_back(obj);
    }
    return j;
}

inline Scene scene_from_json(const nlohmann::json& j, const WorldConfig& world) {
    require(j.contains("version") && j["version"].get<int>() == 1, "format",
            "unsupported scene record version");
    Scene scene;
    scene.grid_size = j.at("grid_size").get<int>();
    for (const auto& obj : j.at("objects")) {
        const int shape = detail::find_index(world.shapes, obj.at("shape").get<std::string>());
        const int color = detail::find_index(world.colors, obj.at("color").get<std::string>());
        require(shape >= 0 && color >= 0, "format", "scene record uses an unknown shape or color");
        scene.objects.push_back({shape, color, obj.at("row").get<int>(), obj.at("col").get<int>()});
    }
    validate_scene(scene, world);
    return scene;
}

/// Canonical identity key used for train/heldout split disjointness.
inline std::string scene_key(const Scene& scene, const WorldConfig& world) {
    return scene_to_json(scene, world).dump();
}

} // namespace umm
