"""Procedural grid mazes, A* expert paths and a step environment."""
from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, replace

import numpy as np

from .dataset import MAX_STEPS, Trajectory, make_trajectory

WALL, CORRIDOR = 1, 0
STEP_PENALTY = -0.1
GOAL_BONUS = 1.0

# index order: left, right, up, down; "up" decreases y
ACTIONS = ("left", "right", "up", "down")
DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MazeError(ValueError):
    pass


class UnreachableGoal(MazeError):
    pass


class PathTooLong(MazeError):
    """Expert path needs more than MAX_STEPS moves; resample the seed."""


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MazeGrid:
    cells: np.ndarray  # [H, W], WALL or CORRIDOR, indexed cells[y, x]
    start: tuple[int, int]
    goal: tuple[int, int]
    seed: int = 0

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def is_open(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.cells[y, x] == CORRIDOR

    def neighbors(self, pos):
        x, y = pos
        for dx, dy in DELTAS:
            if self.is_open(x + dx, y + dy):
                yield (x + dx, y + dy)

    def __eq__(self, other):
        return (
            isinstance(other, MazeGrid)
            and np.array_equal(self.cells, other.cells)
            and self.start == other.start
            and self.goal == other.goal
        )

    def render(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if (x, y) == self.start:
                    row.append("S")
                elif (x, y) == self.goal:
                    row.append("G")
                else:
                    row.append("#" if self.cells[y, x] == WALL else ".")
            rows.append("".join(row))
        return "\n".join(rows)


def carve_lattice(seed: int, W: int, H: int) -> np.ndarray:
    """Recursive-backtracker carve of the odd-coordinate room lattice, no openings."""
    if W % 2 == 0 or H % 2 == 0 or W < 5 or H < 5:
        raise MazeError(f"maze dimensions must be odd and >= 5, got {W}x{H}")
    rng = random.Random(seed)
    cells = np.full((H, W), WALL, dtype=np.uint8)
    cells[1, 1] = CORRIDOR
    stack = [(1, 1)]
    while stack:
        x, y = stack[-1]
        options = []
        for dx, dy in DELTAS:
            nx, ny = x + 2 * dx, y + 2 * dy
            if 1 <= nx <= W - 2 and 1 <= ny <= H - 2 and cells[ny, nx] == WALL:
                options.append((nx, ny))
        if not options:
            stack.pop()
            continue
        nx, ny = rng.choice(options)
        cells[(y + ny) // 2, (x + nx) // 2] = CORRIDOR
        cells[ny, nx] = CORRIDOR
        stack.append((nx, ny))
    return cells


def generate_maze(seed: int, W: int = 21, H: int = 21) -> MazeGrid:
    cells = carve_lattice(seed, W, H)
    start, goal = (0, 1), (W - 1, H - 2)
    cells[start[1], start[0]] = CORRIDOR
    cells[goal[1], goal[0]] = CORRIDOR
    return MazeGrid(cells, start, goal, seed)


def astar_solve(grid: MazeGrid) -> list[tuple[int, int]]:
    """Shortest start->goal path (inclusive) with a Manhattan heuristic.

    Ties are broken by lower f, then lower h, then insertion order.
    """
    gx, gy = grid.goal

    def h(p):
        return abs(p[0] - gx) + abs(p[1] - gy)

    counter = itertools.count()
    start = grid.start
    if not grid.is_open(*start) or not grid.is_open(*grid.goal):
        raise UnreachableGoal("start or goal is a wall")
    frontier = [(h(start), h(start), next(counter), start)]
    g_cost = {start: 0}
    parent: dict = {start: None}
    closed = set()
    while frontier:
        _, _, _, node = heapq.heappop(frontier)
        if node in closed:
            continue
        if node == grid.goal:
            path = [node]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        closed.add(node)
        for nb in grid.neighbors(node):
            ng = g_cost[node] + 1
            if ng < g_cost.get(nb, 1 << 30):
                g_cost[nb] = ng
                parent[nb] = node
                hn = h(nb)
                heapq.heappush(frontier, (ng + hn, hn, next(counter), nb))
    raise UnreachableGoal(f"goal {grid.goal} unreachable from {grid.start}")


def move_action(a: tuple[int, int], b: tuple[int, int]) -> int:
    return DELTAS.index((b[0] - a[0], b[1] - a[1]))


# ---------------------------------------------------------------- environment


@dataclass(frozen=True)
class EnvState:
    position: tuple[int, int]
    step_count: int = 0
    done: bool = False


def reset(grid: MazeGrid) -> EnvState:
    return EnvState(grid.start, 0, grid.start == grid.goal)


def env_step(grid: MazeGrid, state: EnvState, action: int) -> tuple[EnvState, float]:
    if state.done:
        raise EpisodeFinished("step called on a finished episode")
    dx, dy = DELTAS[action]
    x, y = state.position
    pos = (x + dx, y + dy) if grid.is_open(x + dx, y + dy) else (x, y)
    reward = STEP_PENALTY
    at_goal = pos == grid.goal
    if at_goal:
        reward += GOAL_BONUS
    steps = state.step_count + 1
    return replace(state, position=pos, step_count=steps, done=at_goal or steps >= MAX_STEPS), reward


def expert_trajectory(grid: MazeGrid) -> Trajectory:
    path = astar_solve(grid)
    moves = len(path) - 1
    if moves > MAX_STEPS:
        raise PathTooLong(f"A* path has {moves} moves (> {MAX_STEPS})")
    actions = [move_action(a, b) for a, b in zip(path, path[1:])]
    state = reset(grid)
    rewards = []
    for a in actions:
        state, r = env_step(grid, state, a)
        rewards.append(r)
    return make_trajectory(
        path[:-1], actions, rewards, seed=grid.seed, width=grid.width, height=grid.height
    )


def sample_expert(seed: int, W: int, H: int, max_tries: int = 1000) -> tuple[MazeGrid, Trajectory]:
    """Generate a maze and its expert path, resampling derived seeds if too long."""
    for k in range(max_tries):
        s = seed if k == 0 else int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0])
        grid = generate_maze(s, W, H)
        try:
            return grid, expert_trajectory(grid)
        except PathTooLong:
            continue
    raise PathTooLong(f"no maze with a <= {MAX_STEPS}-move solution after {max_tries} tries")
