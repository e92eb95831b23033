// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "umm/scene.hpp"
#include "umm/vocab.hpp"

using namespace umm;

namespace {

Scene one_object_scene(int shape, int color, int row, int col, int grid_size = 8) {
    Scene s;
    s.grid_size = grid_size;
    s.objects.push_back({shape, color, row, col});
    return s;
}

/// Enumerates every scene with up to `max_objects` objects on a small world.
/// Objects are placed in strictly increasing cell order so each object
/// multiset appears exactly once.
void enumerate_scenes(const WorldConfig& world, int max_objects,
                      std::vector<Scene>& out) {
    const int n_cells = world.n_cells();
    const int n_kinds = world.n_shapes() * world.n_colors();
    std::vector<Scene> frontier{Scene{{}, world.grid_size}};
    for (int depth = 0; depth < max_objects; ++depth) {
        std::vector<Scene> next;
        for (const Scene& base : frontier) {
            const int start = base.objects.empty()
                                  ? 0
                                  : base.objects.back().row * world.grid_size + base.objects.back().col + 1;
            for (int cell = start; cell < n_cells; ++cell) {
                for (int kind = 0; kind < n_kinds; ++kind) {
                    Scene s = base;
                    s.objects.push_back({kind / world.n_colors(), kind % world.n_colors(),
                                         cell / world.grid_size, cell % world.grid_size});
                    next.push_back(s);
                }
            }
        }
        for (const Scene& s : next) {
            out.push_back(s);
        }
        frontier = std::move(next);
    }
}

} // namespace

TEST_CASE("render places objects exactly and leaves the rest empty") {
    WorldConfig world;
    const Scene s = one_object_scene(0, 0, 0, 0); // red square at (0,0)
    const SceneGrid grid = render_scene(s, world);
    REQUIRE(grid.at(0, 0) == cell_value_of(0, 0, world));
    int empty = 0;
    for (int v : grid.cells) {
        empty += v == 0 ? 1 : 0;
    }
    REQUIRE(empty == world.n_cells() - 1);
}

TEST_CASE("render rejects invalid scenes") {
    WorldConfig world;
    Scene out_of_bounds = one_object_scene(0, 0, 8, 0);
    REQUIRE_THROWS_AS(render_scene(out_of_bounds, world), Error);

    Scene colliding = one_object_scene(0, 0, 1, 1);
    colliding.objects.push_back({1, 1, 1, 1});
    REQUIRE_THROWS_AS(render_scene(colliding, world), Error);
}

TEST_CASE("sample_scene respects difficulty classes and is deterministic") {
    WorldConfig world;
    {
        Rng rng(0);
        const Scene s = sample_scene(rng, Difficulty::single, world);
        REQUIRE(s.objects.size() == 1);
    }
    {
        Rng rng(0);
        const Scene s = sample_scene(rng, Difficulty::two_obj, world);
        REQUIRE(s.objects.size() == 2);
        REQUIRE(s.objects[0].shape != s.objects[1].shape);
    }
    {
        Rng a(7);
        Rng b(7);
        const Scene sa = sample_scene(a, Difficulty::mixed, world);
        const Scene sb = sample_scene(b, Difficulty::mixed, world);
        REQUIRE(scene_key(sa, world) == scene_key(sb, world));
    }
    {
        Rng rng(3);
        const Scene s = sample_scene(rng, Difficulty::positional, world);
        REQUIRE(s.objects.size() == 2);
        REQUIRE(region_of(s.objects[0], world.grid_size) != region_of(s.objects[1], world.grid_size));
    }
    {
        Rng rng(5);
        const Scene s = sample_scene(rng, Difficulty::counting, world);
        REQUIRE(s.objects.size() >= 2);
        const auto groups = detail::scene_groups(s);
        REQUIRE(groups.size() == 1);
    }
}

TEST_CASE("describe_scene emits the canonical grammar") {
    WorldConfig world;
    // blue circle in the exact center of the 8x8 grid (region 4).
    const Scene center = one_object_scene(1, 2, 4, 4);
    REQUIRE(describe_scene(center, world) == "one blue circle in the center");

    Scene squares;
    squares.grid_size = 8;
    squares.objects.push_back({0, 0, 0, 0});
    squares.objects.push_back({0, 0, 1, 1});
    const std::string text = describe_scene(squares, world);
    REQUIRE(text == "two red squares in the top left");
}

TEST_CASE("identity score is perfect for random scenes") {
    WorldConfig world;
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const auto difficulty = kAllDifficulties[trial % kAllDifficulties.size()];
        const Scene s = sample_scene(rng, difficulty, world);
        const OracleScore score = score_alignment(render_scene(s, world), s, world);
        REQUIRE(score.overall == 1.0);
        REQUIRE(score.presence == 1.0);
    }
}

TEST_CASE("oracle criteria fail as specified on corrupted inputs") {
    WorldConfig world;
    const Scene want_two = [&] {
        Scene s;
        s.grid_size = 8;
        s.objects.push_back({0, 0, 0, 0});
        s.objects.push_back({0, 0, 0, 1});
        return s;
    }();

    SceneGrid empty;
    empty.grid_size = 8;
    empty.cells.assign(64, 0);
    REQUIRE(score_alignment(empty, want_two, world).presence == 0.0);

    SceneGrid one_square = empty;
    one_square.at(0, 0) = cell_value_of(0, 0, world);
    const OracleScore score = score_alignment(one_square, want_two, world);
    REQUIRE(score.presence == 1.0);
    REQUIRE(score.count_ok.size() == 1);
    REQUIRE_FALSE(score.count_ok[0].second);
}

TEST_CASE("dimension mismatch is rejected") {
    WorldConfig world;
    const Scene s = one_object_scene(0, 0, 0, 0);
    SceneGrid grid;
    grid.grid_size = 4;
    grid.cells.assign(16, 0);
    REQUIRE_THROWS_AS(score_alignment(grid, s, world), Error);
}

TEST_CASE("emptying correct cells never improves any criterion") {
    WorldConfig world;
    Rng rng(23);
    for (int trial = 0; trial < 60; ++trial) {
        const Scene s = sample_scene(rng, Difficulty::mixed, world);
        SceneGrid grid = render_scene(s, world);
        OracleScore prev = score_alignment(grid, s, world);
        std::vector<int> filled;
        for (int i = 0; i < world.n_cells(); ++i) {
            if (grid.cells[i] != 0) {
                filled.push_back(i);
            }
        }
        rng.shuffle(filled);
        for (int cell : filled) {
            grid.cells[cell] = 0;
            if (grid.cells == std::vector<int>(static_cast<size_t>(world.n_cells()), 0)) {
                break; // all-empty grids cannot be compared criterion-by-criterion
            }
            const OracleScore cur = score_alignment(grid, s, world);
            REQUIRE(cur.presence <= prev.presence);
            REQUIRE(cur.overall <= prev.overall);
            for (size_t i = 0; i < cur.position_ok.size(); ++i) {
                REQUIRE((prev.position_ok[i] || !cur.position_ok[i]));
            }
            prev = cur;
        }
    }
}

TEST_CASE("equal descriptions coincide with perfect oracle scores") {
    // Brute force over every scene with <= 2 objects on a 3x3 world with
    // 2 shapes and 2 colors.
    WorldConfig world;
    world.shapes = {"square", "circle"};
    world.colors = {"red", "blue"};
    world.grid_size = 3;

    std::vector<Scene> scenes;
    enumerate_scenes(world, 2, scenes);
    REQUIRE(scenes.size() > 100);

    std::vector<std::string> descriptions;
    std::vector<SceneGrid> grids;
    descriptions.reserve(scenes.size());
    for (const Scene& s : scenes) {
        descriptions.push_back(describe_scene(s, world));
        grids.push_back(render_scene(s, world));
    }

    for (size_t a = 0; a < scenes.size(); ++a) {
        for (size_t b = 0; b < scenes.size(); ++b) {
            const bool same_text = descriptions[a] == descriptions[b];
            const bool perfect = score_alignment(grids[a], scenes[b], world).overall == 1.0;
            if (same_text != perfect) {
                CAPTURE(descriptions[a], descriptions[b]);
            }
            REQUIRE(same_text == perfect);
        }
    }
}

TEST_CASE("ablate_prompt deletes exactly the named category") {
    WorldConfig world;
    REQUIRE(ablate_prompt("two red squares in the top left", PromptCategory::color, world) ==
            "two squares in the top left");
    REQUIRE(ablate_prompt("two red squares in the top left", PromptCategory::position, world) ==
            "two red squares");
    REQUIRE(ablate_prompt("one circle", PromptCategory::count, world) == "circle");
    REQUIRE(ablate_prompt("one blue circle in the center", PromptCategory::count, world) ==
            "blue circle in the center");
    // Absent category: unchanged.
    REQUIRE(ablate_prompt("two squares in the top left", PromptCategory::color, world) ==
            "two squares in the top left");
    REQUIRE(ablate_prompt("two red squares and one blue circle in the bottom right",
                          PromptCategory::count, world) ==
            "red squares and blue circle in the bottom right");
    REQUIRE_THROWS_AS(ablate_prompt("red red red", PromptCategory::color, world), Error);
}

TEST_CASE("described and ablated prompts always tokenize") {
    WorldConfig world;
    const Vocab vocab = build_vocab(world);
    Rng rng(31);
    for (int trial = 0; trial < 150; ++trial) {
        const auto difficulty = kAllDifficulties[trial % kAllDifficulties.size()];
        const Scene s = sample_scene(rng, difficulty, world);
        const std::string prompt = describe_scene(s, world);
        REQUIRE_NOTHROW(encode_text(prompt, vocab));
        for (PromptCategory c : kAllPromptCategories) {
            REQUIRE_NOTHROW(encode_text(ablate_prompt(prompt, c, world), vocab));
        }
    }
}

TEST_CASE("scene json round trip is stable") {
    WorldConfig world;
    Rng rng(41);
    const Scene s = sample_scene(rng, Difficulty::mixed, world);
    const auto j = scene_to_json(s, world);
    const Scene back = scene_from_json(j, world);
    REQUIRE(scene_key(back, world) == scene_key(s, world));
    REQUIRE(j.dump() == scene_to_json(back, world).dump());

    auto bad = j;
    bad["version"] = 999;
    REQUIRE_THROWS_AS(scene_from_json(bad, world), Error);
}
