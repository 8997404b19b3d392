#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ebtl/layout.hpp"
#include "ebtl/rng.hpp"

namespace ebtl::envs {

// Single-agent Overcooked-lite. One pot; exactly one recipe active at a
// time; stations are assigned to counter cells at reset.

enum class Ingredient : int { Onion = 0, Tomato = 1, Fish = 2 };
inline constexpr int kIngredientKinds = 3;

inline const char* to_string(Ingredient k) {
  switch (k) {
    case Ingredient::Onion: return "Onion";
    case Ingredient::Tomato: return "Tomato";
    case Ingredient::Fish: return "Fish";
  }
  return "?";
}

enum class OcLayout { SimpleRoom, RingRoom };

inline const char* to_string(OcLayout l) {
  return l == OcLayout::SimpleRoom ? "SimpleRoom" : "RingRoom";
}

struct OvercookedConfig {
  OcLayout layout = OcLayout::SimpleRoom;
  std::set<Ingredient> ingredient_types = {Ingredient::Onion, Ingredient::Tomato,
                                           Ingredient::Fish};
  std::set<Ingredient> allowed_recipes = {Ingredient::Onion};
  int cook_time = 20;
  long shaping_horizon = 1;  // steps over which shaped rewards decay to zero
  int max_steps = 400;
  std::uint64_t seed = 0;
  std::string layout_text;  // optional custom map
};

enum class StationType : int {
  None = -1,  // floor
  Counter = 0,
  OnionDispenser = 1,
  TomatoDispenser = 2,
  FishDispenser = 3,
  DishDispenser = 4,
  Pot = 5,
  Serving = 6,
};
inline constexpr int kStationChannels = 7;  // Counter..Serving

struct HeldItem {
  enum class Kind : int { None = 0, Ingredient = 1, Dish = 2, Soup = 3 };
  Kind kind = Kind::None;
  int ingredient = -1;  // Ingredient index for Kind::Ingredient
  int soup_kind = -1;   // Ingredient index, or -1 for a mixed (invalid) soup

  bool none() const { return kind == Kind::None; }
};

struct PotState {
  std::array<int, kIngredientKinds> contents{0, 0, 0};
  int cook_timer = -1;  // countdown while cooking, -1 otherwise
  bool ready = false;

  int total() const { return contents[0] + contents[1] + contents[2]; }
  bool cooking() const { return cook_timer > 0; }
  // All-same contents cook into that soup; anything mixed is invalid (-1).
  int soup_kind() const {
    for (int k = 0; k < kIngredientKinds; ++k)
      if (contents[k] == total() && total() > 0) return k;
    return -1;
  }
};

struct OvercookedState {
  int x = 0, y = 0;
  Dir dir = Dir::N;
  HeldItem held;
  PotState pot;
  Ingredient active_recipe = Ingredient::Onion;
  int step = 0;
  std::vector<std::int8_t> station;  // per cell StationType (None for floor)
};

// Actions: 0 up, 1 down, 2 left, 3 right, 4 stay, 5 interact.
inline constexpr int kOcActions = 6;
inline constexpr int kOcActInteract = 5;

inline double shaping_coeff(long t, long horizon) {
  EBTL_REQUIRE(horizon > 0, "shaping_coeff: horizon must be positive");
  const double v = 1.0 - static_cast<double>(t) / static_cast<double>(horizon);
  return v > 0.0 ? v : 0.0;
}

class OvercookedEnv {
 public:
  struct StepResult {
    double reward = 0.0;
    bool done = false;
  };

  OvercookedEnv(OvercookedConfig config, std::uint64_t rng_seed)
      : cfg_(std::move(config)), rng_(rng_seed) {
    EBTL_REQUIRE(!cfg_.allowed_recipes.empty(), "OvercookedEnv: allowed_recipes must be non-empty");
    EBTL_REQUIRE(cfg_.cook_time > 0, "OvercookedEnv: cook_time must be positive");
    EBTL_REQUIRE(cfg_.max_steps > 0, "OvercookedEnv: max_steps must be positive");
    for (Ingredient r : cfg_.allowed_recipes)
      EBTL_REQUIRE(cfg_.ingredient_types.count(r), "OvercookedEnv: recipe ", to_string(r),
                   " has no matching ingredient dispenser");
    layout_ = cfg_.layout_text.empty() ? builtin_layout(cfg_.layout)
                                       : parse_layout(cfg_.layout_text);
    reset();
  }

  explicit OvercookedEnv(OvercookedConfig config)
      : OvercookedEnv(config, splitmix64(config.seed ^ 0x0c0ffee)) {}

  const OvercookedConfig& config() const { return cfg_; }
  const OvercookedState& state() const { return st_; }
  int width() const { return layout_.width; }
  int height() const { return layout_.height; }
  int action_count() const { return kOcActions; }
  int max_steps() const { return cfg_.max_steps; }

  std::size_t obs_dim() const {
    const std::size_t cells = static_cast<std::size_t>(layout_.width) * layout_.height;
    return cells            // agent position one-hot
           + 4               // direction
           + kHeldSlots      // held item one-hot
           + cells * kStationChannels
           + kIngredientKinds  // pot contents counts
           + 1                 // normalized cook timer
           + 1                 // ready flag
           + kIngredientKinds; // active recipe one-hot
  }

  void reset() {
    st_ = OvercookedState{};
    st_.station.assign(static_cast<std::size_t>(layout_.width) * layout_.height,
                       static_cast<std::int8_t>(StationType::None));
    std::vector<std::size_t> free_counters;
    for (int y = 0; y < layout_.height; ++y)
      for (int x = 0; x < layout_.width; ++x) {
        const std::size_t i = cell_index(x, y);
        const char c = layout_.at(x, y);
        if (c == '.') continue;
        st_.station[i] = static_cast<std::int8_t>(StationType::Counter);
        switch (c) {
          case 'O': st_.station[i] = static_cast<std::int8_t>(StationType::OnionDispenser); break;
          case 'T': st_.station[i] = static_cast<std::int8_t>(StationType::TomatoDispenser); break;
          case 'F': st_.station[i] = static_cast<std::int8_t>(StationType::FishDispenser); break;
          case 'D': st_.station[i] = static_cast<std::int8_t>(StationType::DishDispenser); break;
          case 'P': st_.station[i] = static_cast<std::int8_t>(StationType::Pot); break;
          case 'S': st_.station[i] = static_cast<std::int8_t>(StationType::Serving); break;
          default:
            if (adjacent_to_floor(x, y)) free_counters.push_back(i);
            break;
        }
      }

    // Required stations without a fixed map position, placed uniformly
    // without collision over reachable counter cells.
    std::vector<StationType> needed;
    for (Ingredient k : cfg_.ingredient_types) {
      StationType t = static_cast<StationType>(static_cast<int>(StationType::OnionDispenser) +
                                               static_cast<int>(k));
      if (!station_fixed(t)) needed.push_back(t);
    }
    for (StationType t : {StationType::DishDispenser, StationType::Pot, StationType::Serving})
      if (!station_fixed(t)) needed.push_back(t);
    EBTL_REQUIRE(needed.size() <= free_counters.size(),
                 "OvercookedEnv: layout too small; need ", needed.size(),
                 " station cells but only ", free_counters.size(), " are available");
    auto chosen = rng_.sample_without_replacement(free_counters, needed.size());
    for (std::size_t i = 0; i < needed.size(); ++i)
      st_.station[chosen[i]] = static_cast<std::int8_t>(needed[i]);

    st_.active_recipe = draw_recipe();

    std::vector<std::size_t> floors;
    for (int y = 0; y < layout_.height; ++y)
      for (int x = 0; x < layout_.width; ++x)
        if (layout_.at(x, y) == '.') floors.push_back(cell_index(x, y));
    EBTL_REQUIRE(!floors.empty(), "OvercookedEnv: layout has no floor cells");
    const std::size_t start = floors[rng_.uniform_int(floors.size())];
    st_.x = static_cast<int>(start % layout_.width);
    st_.y = static_cast<int>(start / layout_.width);
    st_.dir = static_cast<Dir>(rng_.uniform_int(4));
  }

  // All actions are always legal (no masking in this domain).
  std::vector<std::uint8_t> action_mask() const { return std::vector<std::uint8_t>(kOcActions, 1); }

  void set_state(const OvercookedState& s) {
    EBTL_REQUIRE(s.station.size() ==
                     static_cast<std::size_t>(layout_.width) * layout_.height,
                 "OvercookedEnv::set_state: station map size mismatch");
    EBTL_REQUIRE(layout_.in_bounds(s.x, s.y) && layout_.at(s.x, s.y) == '.',
                 "OvercookedEnv::set_state: agent cell is not floor");
    EBTL_REQUIRE(s.pot.total() <= 3, "OvercookedEnv::set_state: pot holds more than 3 ingredients");
    st_ = s;
  }

  StepResult step(int action, double shaping) {
    EBTL_REQUIRE(action >= 0 && action < kOcActions, "OvercookedEnv::step: action ", action,
                 " out of range");
    EBTL_REQUIRE(shaping >= 0.0 && shaping <= 1.0, "OvercookedEnv::step: shaping coefficient ",
                 shaping, " outside [0,1]");
    StepResult res;

    // Time passes before the action resolves.
    if (st_.pot.cooking()) {
      st_.pot.cook_timer -= 1;
      if (st_.pot.cook_timer == 0) st_.pot.ready = true;
    }

    static constexpr int dx[4] = {0, 0, -1, 1};
    static constexpr int dy[4] = {-1, 1, 0, 0};
    static constexpr Dir face[4] = {Dir::N, Dir::S, Dir::W, Dir::E};
    if (action < 4) {
      st_.dir = face[action];
      const int nx = st_.x + dx[action], ny = st_.y + dy[action];
      if (layout_.in_bounds(nx, ny) && layout_.at(nx, ny) == '.') {
        st_.x = nx;
        st_.y = ny;
      }
    } else if (action == kOcActInteract) {
      res.reward += interact(shaping);
    }

    st_.step += 1;
    if (st_.step >= cfg_.max_steps) res.done = true;
    return res;
  }

  std::vector<double> observe() const {
    const std::size_t cells = static_cast<std::size_t>(layout_.width) * layout_.height;
    std::vector<double> obs(obs_dim(), 0.0);
    std::size_t off = 0;
    obs[off + cell_index(st_.x, st_.y)] = 1.0;
    off += cells;
    obs[off + static_cast<int>(st_.dir)] = 1.0;
    off += 4;
    obs[off + held_slot()] = 1.0;
    off += kHeldSlots;
    for (std::size_t i = 0; i < cells; ++i) {
      const int s = st_.station[i];
      if (s >= 0) obs[off + static_cast<std::size_t>(s) * cells + i] = 1.0;
    }
    off += cells * kStationChannels;
    for (int k = 0; k < kIngredientKinds; ++k)
      obs[off + k] = st_.pot.contents[k] / 3.0;
    off += kIngredientKinds;
    obs[off] = st_.pot.cooking()
                   ? static_cast<double>(st_.pot.cook_timer) / static_cast<double>(cfg_.cook_time)
                   : 0.0;
    off += 1;
    obs[off] = st_.pot.ready ? 1.0 : 0.0;
    off += 1;
    obs[off + static_cast<int>(st_.active_recipe)] = 1.0;
    return obs;
  }

  // A state is in-distribution for a teacher iff the active recipe was in
  // the teacher's allowed set.
  bool ground_truth_id(const OvercookedConfig& source) const {
    return source.allowed_recipes.count(st_.active_recipe) > 0;
  }

  std::pair<int, int> agent_cell() const { return {st_.x, st_.y}; }

  std::string state_key() const {
    std::string k = std::to_string(st_.x) + "," + std::to_string(st_.y) + "," +
                    std::to_string(static_cast<int>(st_.dir)) + "," +
                    std::to_string(static_cast<int>(st_.held.kind)) + "," +
                    std::to_string(st_.held.ingredient) + "," +
                    std::to_string(st_.held.soup_kind) + ",";
    for (int c : st_.pot.contents) k += std::to_string(c) + ":";
    k += std::to_string(st_.pot.cook_timer) + "," + (st_.pot.ready ? "1" : "0") + "," +
         std::to_string(static_cast<int>(st_.active_recipe));
    return k;
  }

  std::string render() const {
    static const char* codes = "#OTFDPS";
    std::string out;
    for (int y = 0; y < layout_.height; ++y) {
      for (int x = 0; x < layout_.width; ++x) {
        const int s = st_.station[cell_index(x, y)];
        char c = s < 0 ? '.' : codes[s];
        if (x == st_.x && y == st_.y) c = "^v<>"[0];  // agent marker
        out += c;
      }
      out += '\n';
    }
    return out;
  }

  static TextLayout builtin_layout(OcLayout l) {
    if (l == OcLayout::SimpleRoom)
      return parse_layout(
          "#######\n"
          "#.....#\n"
          "#.....#\n"
          "#.....#\n"
          "#.....#\n"
          "#.....#\n"
          "#######\n");
    return parse_layout(
        "#########\n"
        "#.......#\n"
        "#.......#\n"
        "#..###..#\n"
        "#..###..#\n"
        "#..###..#\n"
        "#.......#\n"
        "#.......#\n"
        "#########\n");
  }

 private:
  static constexpr std::size_t kHeldSlots = 9;  // none, 3 ingredients, dish, 3 soups, invalid soup

  std::size_t cell_index(int x, int y) const {
    return static_cast<std::size_t>(y) * layout_.width + x;
  }

  bool adjacent_to_floor(int x, int y) const {
    static constexpr int dx[4] = {0, 0, -1, 1};
    static constexpr int dy[4] = {-1, 1, 0, 0};
    for (int d = 0; d < 4; ++d) {
      const int nx = x + dx[d], ny = y + dy[d];
      if (layout_.in_bounds(nx, ny) && layout_.at(nx, ny) == '.') return true;
    }
    return false;
  }

  bool station_fixed(StationType t) const {
    for (auto s : st_.station)
      if (s == static_cast<std::int8_t>(t)) return true;
    return false;
  }

  std::size_t held_slot() const {
    switch (st_.held.kind) {
      case HeldItem::Kind::None: return 0;
      case HeldItem::Kind::Ingredient: return 1 + st_.held.ingredient;
      case HeldItem::Kind::Dish: return 4;
      case HeldItem::Kind::Soup: return st_.held.soup_kind < 0 ? 8 : 5 + st_.held.soup_kind;
    }
    return 0;
  }

  Ingredient draw_recipe() {
    std::vector<Ingredient> recipes(cfg_.allowed_recipes.begin(), cfg_.allowed_recipes.end());
    return recipes[rng_.uniform_int(recipes.size())];
  }

  double interact(double shaping) {
    static constexpr int dx[4] = {0, 1, 0, -1};
    static constexpr int dy[4] = {-1, 0, 1, 0};
    const int fx = st_.x + dx[static_cast<int>(st_.dir)];
    const int fy = st_.y + dy[static_cast<int>(st_.dir)];
    if (!layout_.in_bounds(fx, fy)) return 0.0;
    const auto t = static_cast<StationType>(st_.station[cell_index(fx, fy)]);
    double reward = 0.0;
    switch (t) {
      case StationType::OnionDispenser:
      case StationType::TomatoDispenser:
      case StationType::FishDispenser: {
        if (st_.held.none()) {
          st_.held.kind = HeldItem::Kind::Ingredient;
          st_.held.ingredient =
              static_cast<int>(t) - static_cast<int>(StationType::OnionDispenser);
        }
        break;
      }
      case StationType::DishDispenser: {
        if (st_.held.none()) {
          st_.held = HeldItem{HeldItem::Kind::Dish, -1, -1};
          // Dish pickup is only rewarded while a soup is under way and no
          // other dish is in play (the agent's hands were just empty).
          if (st_.pot.cooking() || st_.pot.ready) reward += 3.0 * shaping;
        }
        break;
      }
      case StationType::Pot: {
        if (st_.held.kind == HeldItem::Kind::Ingredient && st_.pot.total() < 3 &&
            !st_.pot.cooking() && !st_.pot.ready) {
          const int kind = st_.held.ingredient;
          st_.pot.contents[kind] += 1;
          st_.held = HeldItem{};
          if (kind == static_cast<int>(st_.active_recipe)) reward += 3.0 * shaping;
          if (st_.pot.total() == 3) st_.pot.cook_timer = cfg_.cook_time;
        } else if (st_.pot.ready && st_.held.kind == HeldItem::Kind::Dish) {
          st_.held = HeldItem{HeldItem::Kind::Soup, -1, st_.pot.soup_kind()};
          st_.pot = PotState{};
          reward += 5.0 * shaping;
        }
        break;
      }
      case StationType::Serving: {
        if (st_.held.kind == HeldItem::Kind::Soup) {
          reward += 3.0 * shaping;
          if (st_.held.soup_kind == static_cast<int>(st_.active_recipe)) reward += 20.0;
          st_.held = HeldItem{};
          // New recipe after every delivery, matching or not.
          st_.active_recipe = draw_recipe();
        }
        break;
      }
      default:
        break;
    }
    return reward;
  }

  OvercookedConfig cfg_;
  TextLayout layout_;
  OvercookedState st_;
  Rng rng_;
};

}  // namespace ebtl::envs
