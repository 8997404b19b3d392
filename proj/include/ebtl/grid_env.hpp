#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ebtl/layout.hpp"
#include "ebtl/rng.hpp"
#include "ebtl/tensor.hpp"

namespace ebtl::envs {

// Four-room gridworld with Minigrid-style action semantics.
//
// Rooms are numbered clockwise from the upper-left: 1 upper-left, 2
// upper-right, 3 lower-right, 4 lower-left. The generated layout has three
// passages: room 1 <-> 2, room 4 <-> 3, and a single cell between the upper
// and lower halves that hosts the door in the Locked scenarios.

enum class GridScenario {
  AlternatingGoalSource,
  AlternatingGoalTarget,
  LockedSource,
  LockedTarget,
};

inline const char* to_string(GridScenario s) {
  switch (s) {
    case GridScenario::AlternatingGoalSource: return "AlternatingGoalSource";
    case GridScenario::AlternatingGoalTarget: return "AlternatingGoalTarget";
    case GridScenario::LockedSource: return "LockedSource";
    case GridScenario::LockedTarget: return "LockedTarget";
  }
  return "?";
}

struct GridConfig {
  int width = 13;
  int height = 13;
  GridScenario scenario = GridScenario::AlternatingGoalSource;
  int max_steps = 400;
  std::uint64_t seed = 0;
  // OOD-set collection resets the agent anywhere rather than in room 1.
  bool random_start_all_rooms = false;
  std::string layout_text;  // optional custom map ('#', '.', '+')
};

struct GridState {
  int x = 0, y = 0;
  Dir dir = Dir::N;
  int goal_x = 0, goal_y = 0;
  std::optional<std::pair<int, int>> key_pos;
  bool carrying_key = false;
  bool has_door = false;
  bool door_locked = false;
  int step = 0;
};

// Actions: 0 turn-left, 1 turn-right, 2 forward, 3 pickup, 4 drop, 5 toggle, 6 done.
inline constexpr int kGridActions = 7;
inline constexpr int kGridActTurnLeft = 0;
inline constexpr int kGridActTurnRight = 1;
inline constexpr int kGridActForward = 2;
inline constexpr int kGridActPickup = 3;
inline constexpr int kGridActToggle = 5;

// Observation channels: wall, goal, key, door-locked, door-open, then one
// agent-position channel per facing direction.
inline constexpr int kGridChannels = 9;

class GridEnv {
 public:
  struct StepResult {
    double reward = 0.0;
    bool done = false;
  };

  GridEnv(GridConfig config, std::uint64_t rng_seed)
      : cfg_(std::move(config)), rng_(rng_seed) {
    if (!cfg_.layout_text.empty()) {
      layout_ = parse_layout(cfg_.layout_text);
      EBTL_REQUIRE(layout_.width == cfg_.width && layout_.height == cfg_.height,
                   "GridEnv: layout map is ", layout_.width, "x", layout_.height,
                   " but config says ", cfg_.width, "x", cfg_.height);
    } else {
      layout_ = four_rooms(cfg_.width, cfg_.height);
    }
    door_cell_ = find_door(layout_);
    EBTL_REQUIRE(cfg_.max_steps > 0, "GridEnv: max_steps must be positive");
    validate_rooms();
    reset();
  }

  explicit GridEnv(GridConfig config) : GridEnv(config, splitmix64(config.seed)) {}

  const GridConfig& config() const { return cfg_; }
  const GridState& state() const { return st_; }
  int width() const { return layout_.width; }
  int height() const { return layout_.height; }
  int action_count() const { return kGridActions; }
  std::size_t obs_dim() const {
    return static_cast<std::size_t>(kGridChannels) * layout_.width * layout_.height;
  }
  std::array<std::size_t, 3> obs_chw() const {
    return {kGridChannels, static_cast<std::size_t>(layout_.height),
            static_cast<std::size_t>(layout_.width)};
  }
  int max_steps() const { return cfg_.max_steps; }

  void reset() {
    st_ = GridState{};
    const bool locked = cfg_.scenario == GridScenario::LockedSource ||
                        cfg_.scenario == GridScenario::LockedTarget;
    st_.has_door = locked && door_cell_.has_value();
    st_.door_locked = cfg_.scenario == GridScenario::LockedTarget;

    switch (cfg_.scenario) {
      case GridScenario::AlternatingGoalSource: {
        place_goal(room_cells(1));
        break;
      }
      case GridScenario::AlternatingGoalTarget: {
        const bool room1 = rng_.bernoulli(0.5);
        place_goal(room_cells(room1 ? 1 : 3));
        break;
      }
      case GridScenario::LockedSource: {
        place_goal(all_room_cells());
        break;
      }
      case GridScenario::LockedTarget: {
        place_goal(merge(room_cells(3), room_cells(4)));
        auto uppers = merge(room_cells(1), room_cells(2));
        remove_cell(uppers, {st_.goal_x, st_.goal_y});
        auto key = uppers[rng_.uniform_int(uppers.size())];
        st_.key_pos = key;
        break;
      }
    }

    auto starts = cfg_.random_start_all_rooms ? all_room_cells() : room_cells(1);
    remove_cell(starts, {st_.goal_x, st_.goal_y});
    if (st_.key_pos) remove_cell(starts, *st_.key_pos);
    EBTL_REQUIRE(!starts.empty(), "GridEnv: no free start cell");
    auto start = starts[rng_.uniform_int(starts.size())];
    st_.x = start.first;
    st_.y = start.second;
    st_.dir = static_cast<Dir>(rng_.uniform_int(4));
    st_.step = 0;
  }

  // Restores an explicit state, e.g. when re-materializing serialized
  // observation sets.
  void set_state(const GridState& s) {
    EBTL_REQUIRE(layout_.in_bounds(s.x, s.y) && layout_.at(s.x, s.y) != '#',
                 "GridEnv::set_state: agent cell (", s.x, ",", s.y, ") is not walkable");
    EBTL_REQUIRE(layout_.in_bounds(s.goal_x, s.goal_y) && layout_.at(s.goal_x, s.goal_y) != '#',
                 "GridEnv::set_state: goal cell is not walkable");
    EBTL_REQUIRE(!(s.carrying_key && s.key_pos.has_value()),
                 "GridEnv::set_state: carrying_key and key_pos are mutually exclusive");
    EBTL_REQUIRE(s.step <= cfg_.max_steps, "GridEnv::set_state: step exceeds max_steps");
    st_ = s;
  }

  std::vector<std::uint8_t> action_mask() const {
    std::vector<std::uint8_t> mask(kGridActions, 0);
    mask[kGridActTurnLeft] = 1;
    mask[kGridActTurnRight] = 1;
    auto [fx, fy] = front_cell();
    mask[kGridActForward] = walkable(fx, fy) ? 1 : 0;
    mask[kGridActPickup] = (st_.key_pos && st_.key_pos->first == fx && st_.key_pos->second == fy)
                               ? 1
                               : 0;
    mask[kGridActToggle] = (st_.has_door && door_cell_ && door_cell_->first == fx &&
                            door_cell_->second == fy)
                               ? 1
                               : 0;
    // drop (4) and done (6) are permanently disabled
    return mask;
  }

  StepResult step(int action) {
    EBTL_REQUIRE(action >= 0 && action < kGridActions, "GridEnv::step: action ", action,
                 " out of range");
    EBTL_REQUIRE(action_mask()[action] == 1, "GridEnv::step: masked action ", action,
                 " submitted");
    StepResult res;
    switch (action) {
      case kGridActTurnLeft:
        st_.dir = static_cast<Dir>((static_cast<int>(st_.dir) + 3) % 4);
        break;
      case kGridActTurnRight:
        st_.dir = static_cast<Dir>((static_cast<int>(st_.dir) + 1) % 4);
        break;
      case kGridActForward: {
        auto [fx, fy] = front_cell();
        st_.x = fx;
        st_.y = fy;
        if (fx == st_.goal_x && fy == st_.goal_y) {
          res.reward = 1.0;
          res.done = true;
        }
        break;
      }
      case kGridActPickup:
        st_.carrying_key = true;
        st_.key_pos.reset();
        break;
      case kGridActToggle:
        if (st_.door_locked && st_.carrying_key) st_.door_locked = false;
        break;
      default:
        break;
    }
    st_.step += 1;
    if (!res.done && st_.step >= cfg_.max_steps) res.done = true;
    return res;
  }

  // Full-grid multi-channel one-hot encoding, flattened channel-major.
  std::vector<double> observe() const {
    const std::size_t hw = static_cast<std::size_t>(layout_.width) * layout_.height;
    std::vector<double> obs(kGridChannels * hw, 0.0);
    auto put = [&](int ch, int x, int y) {
      obs[static_cast<std::size_t>(ch) * hw + static_cast<std::size_t>(y) * layout_.width + x] =
          1.0;
    };
    for (int y = 0; y < layout_.height; ++y)
      for (int x = 0; x < layout_.width; ++x) {
        const char c = layout_.at(x, y);
        if (c == '#') put(0, x, y);
      }
    put(1, st_.goal_x, st_.goal_y);
    if (st_.key_pos) put(2, st_.key_pos->first, st_.key_pos->second);
    if (st_.has_door && door_cell_) put(st_.door_locked ? 3 : 4, door_cell_->first,
                                        door_cell_->second);
    put(5 + static_cast<int>(st_.dir), st_.x, st_.y);
    return obs;
  }

  // Guidance-correctness label. Source scenarios are always in-distribution.
  bool ground_truth_id() const {
    switch (cfg_.scenario) {
      case GridScenario::AlternatingGoalTarget:
        return room_of(st_.goal_x, st_.goal_y) == 1;
      case GridScenario::LockedTarget:
        return st_.carrying_key || !st_.door_locked;
      default:
        return true;
    }
  }

  std::pair<int, int> agent_cell() const { return {st_.x, st_.y}; }

  std::string state_key() const {
    std::string k;
    k += std::to_string(st_.x) + "," + std::to_string(st_.y) + ",";
    k += std::to_string(static_cast<int>(st_.dir)) + ",";
    k += std::to_string(st_.goal_x) + "," + std::to_string(st_.goal_y) + ",";
    k += st_.carrying_key ? "1," : "0,";
    k += st_.door_locked ? "1" : "0";
    if (st_.key_pos)
      k += "," + std::to_string(st_.key_pos->first) + "," + std::to_string(st_.key_pos->second);
    return k;
  }

  std::string render() const {
    std::string out;
    for (int y = 0; y < layout_.height; ++y) {
      for (int x = 0; x < layout_.width; ++x) {
        char c = layout_.at(x, y) == '#' ? '#' : '.';
        if (layout_.at(x, y) == '+') c = st_.has_door ? (st_.door_locked ? 'L' : '_') : '.';
        if (x == st_.goal_x && y == st_.goal_y) c = 'G';
        if (st_.key_pos && st_.key_pos->first == x && st_.key_pos->second == y) c = 'K';
        if (x == st_.x && y == st_.y) c = "^>v<"[static_cast<int>(st_.dir)];
        out += c;
      }
      out += '\n';
    }
    return out;
  }

  // Room index 1..4, or 0 for wall/corridor cells.
  int room_of(int x, int y) const {
    const int cx = layout_.width / 2, cy = layout_.height / 2;
    if (x == cx || y == cy || layout_.at(x, y) == '#') return 0;
    if (x < cx && y < cy) return 1;
    if (x > cx && y < cy) return 2;
    if (x > cx && y > cy) return 3;
    return 4;
  }

  static TextLayout four_rooms(int w, int h) {
    EBTL_REQUIRE(w >= 7 && h >= 7 && w % 2 == 1 && h % 2 == 1,
                 "four_rooms: width/height must be odd and at least 7, got ", w, "x", h);
    const int cx = w / 2, cy = h / 2;
    std::string text;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        bool wall = x == 0 || y == 0 || x == w - 1 || y == h - 1 || x == cx || y == cy;
        char c = wall ? '#' : '.';
        if (x == cx && (y == cy / 2 || y == cy + (h - cy) / 2)) c = '.';  // room1<->2, room4<->3
        if (y == cy && x == cx / 2) c = '+';  // single passage between halves
        text += c;
      }
      text += '\n';
    }
    return parse_layout(text);
  }

 private:
  using Cell = std::pair<int, int>;

  static std::optional<Cell> find_door(const TextLayout& l) {
    for (int y = 0; y < l.height; ++y)
      for (int x = 0; x < l.width; ++x)
        if (l.at(x, y) == '+') return Cell{x, y};
    return std::nullopt;
  }

  bool walkable(int x, int y) const {
    if (!layout_.in_bounds(x, y)) return false;
    const char c = layout_.at(x, y);
    if (c == '#') return false;
    if (c == '+' && st_.has_door && st_.door_locked) return false;
    if (st_.key_pos && st_.key_pos->first == x && st_.key_pos->second == y) return false;
    return true;
  }

  Cell front_cell() const {
    static constexpr int dx[4] = {0, 1, 0, -1};
    static constexpr int dy[4] = {-1, 0, 1, 0};
    return {st_.x + dx[static_cast<int>(st_.dir)], st_.y + dy[static_cast<int>(st_.dir)]};
  }

  std::vector<Cell> room_cells(int room) const {
    std::vector<Cell> cells;
    for (int y = 0; y < layout_.height; ++y)
      for (int x = 0; x < layout_.width; ++x)
        if (room_of(x, y) == room && layout_.at(x, y) == '.') cells.emplace_back(x, y);
    return cells;
  }

  std::vector<Cell> all_room_cells() const {
    std::vector<Cell> cells;
    for (int r = 1; r <= 4; ++r) {
      auto rc = room_cells(r);
      cells.insert(cells.end(), rc.begin(), rc.end());
    }
    return cells;
  }

  static std::vector<Cell> merge(std::vector<Cell> a, const std::vector<Cell>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  static void remove_cell(std::vector<Cell>& cells, Cell c) {
    std::erase(cells, c);
  }

  void place_goal(const std::vector<Cell>& candidates) {
    EBTL_REQUIRE(!candidates.empty(), "GridEnv: no candidate goal cells");
    auto g = candidates[rng_.uniform_int(candidates.size())];
    st_.goal_x = g.first;
    st_.goal_y = g.second;
  }

  void validate_rooms() const {
    for (int r = 1; r <= 4; ++r)
      EBTL_REQUIRE(!room_cells(r).empty(), "GridEnv: layout has an empty room ", r);
  }

  GridConfig cfg_;
  TextLayout layout_;
  std::optional<Cell> door_cell_;
  GridState st_;
  Rng rng_;
};

}  // namespace ebtl::envs
