# -*- coding: utf-8 -*-
"""
Multi-task gridworlds.

Cells are ``(x, y)`` with ``x`` the column and ``y`` the row; wall grids are
indexed ``[y, x]``.  Observations are stacked channels ``(C, H, W)``:
agent one-hot, layout (1 = wall), and for goal-encoded tasks a goal one-hot.
Option networks always read the first two channels only.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from modac.utils import get_logger

logger = get_logger("modac.envs")

Cell = Tuple[int, int]

NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
ACTION_NAMES = ("N", "E", "S", "W")
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
NUM_ACTIONS = len(MOVES)
OPTION_CHANNELS = 2

FOUR_ROOMS = """\
#############
#     #     #
#     #     #
#           #
#     #     #
#     #     #
## ####     #
#     ### ###
#     #     #
#     #     #
#           #
#     #     #
#############"""

DEFAULT_TRAIN_GOALS: Tuple[Cell, ...] = (
    (1, 1), (2, 1), (1, 2), (2, 2),          # upper-left
    (10, 1), (11, 1), (10, 2), (11, 2),      # upper-right
    (10, 10), (11, 10), (10, 11), (11, 11),  # lower-right
)
DEFAULT_TEST_GOALS: Tuple[Cell, ...] = (
    (1, 10), (2, 10), (1, 11), (2, 11), (4, 8),  # lower-left
    (4, 4), (8, 4), (8, 9),                      # held out from the other rooms
)


class LayoutError(ValueError):
    """Invalid layout or goal configuration."""


class EnvError(RuntimeError):
    """Environment used outside its protocol (e.g. stepping after done)."""


class UnreachableGoalError(RuntimeError):
    """A generated goal is not reachable from the spawn region."""


def _neighbours(cell: Cell) -> Iterable[Cell]:
    x, y = cell
    for dx, dy in MOVES:
        yield x + dx, y + dy


@dataclass(frozen=True, eq=False)
class GridLayout:
    walls: np.ndarray
    name: str = "grid"

    def __post_init__(self) -> None:
        walls = np.asarray(self.walls, dtype=bool)
        object.__setattr__(self, "walls", walls)
        walls.flags.writeable = False
        if walls.ndim != 2 or min(walls.shape) < 3:
            raise LayoutError(f"{self.name}: layout must be a 2-D grid of at least 3x3")
        if not (walls[0].all() and walls[-1].all() and walls[:, 0].all() and walls[:, -1].all()):
            raise LayoutError(f"{self.name}: border cells must be walls")
        cells = self.open_cells
        if not cells:
            raise LayoutError(f"{self.name}: layout has no open cells")
        if len(self.reachable_from(cells[0])) != len(cells):
            raise LayoutError(f"{self.name}: open cells are not all connected")

    @property
    def width(self) -> int:
        return int(self.walls.shape[1])

    @property
    def height(self) -> int:
        return int(self.walls.shape[0])

    def is_open(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    @cached_property
    def open_cells(self) -> List[Cell]:
        ys, xs = np.nonzero(~self.walls)
        return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))

    def reachable_from(self, start: Cell) -> Set[Cell]:
        seen = {start}
        queue = deque([start])
        while queue:
            cell = queue.popleft()
            for nxt in _neighbours(cell):
                if nxt not in seen and self.is_open(nxt):
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    @cached_property
    def doorways(self) -> List[Cell]:
        """Open cells squeezed between two walls with open cells on the other axis."""
        out = []
        for x, y in self.open_cells:
            n, e, s, w = (self.is_open(c) for c in _neighbours((x, y)))
            if (not e and not w and n and s) or (not n and not s and e and w):
                out.append((x, y))
        return out

    @cached_property
    def rooms(self) -> List[Set[Cell]]:
        """Connected components of open cells once doorways are removed."""
        blocked = set(self.doorways)
        remaining = set(self.open_cells) - blocked
        rooms = []
        for cell in self.open_cells:
            if cell not in remaining:
                continue
            room = {cell}
            queue = deque([cell])
            remaining.discard(cell)
            while queue:
                for nxt in _neighbours(queue.popleft()):
                    if nxt in remaining:
                        remaining.discard(nxt)
                        room.add(nxt)
                        queue.append(nxt)
            rooms.append(room)
        return rooms

    def room_of(self, cell: Cell) -> Optional[int]:
        for i, room in enumerate(self.rooms):
            if cell in room:
                return i
        return None

    def layout_channel(self) -> np.ndarray:
        return self.walls.astype(np.float64)

    def to_text(self) -> str:
        return "\n".join("".join("#" if w else "." for w in row) for row in self.walls)

    @classmethod
    def from_text(cls, text: str, name: str = "grid") -> "GridLayout":
        rows = [r for r in text.splitlines() if r.strip()]
        width = max(len(r) for r in rows)
        walls = np.array([[ch == "#" for ch in r.ljust(width, "#")] for r in rows], dtype=bool)
        return cls(walls, name)


@dataclass(frozen=True)
class TaskSpec:
    goal_cell: Cell
    phase: str = "train"
    task_id: int = 0
    encoding: str = "goal"

    def __post_init__(self) -> None:
        if self.phase not in ("train", "test"):
            raise LayoutError(f"task phase must be train or test, got '{self.phase}'")
        if self.encoding not in ("goal", "task_id"):
            raise LayoutError(f"task encoding must be goal or task_id, got '{self.encoding}'")


def make_tasks(layout: GridLayout, train: Sequence[Cell], test: Sequence[Cell],
               encoding: str = "goal") -> Tuple[List[TaskSpec], List[TaskSpec]]:
    train = [tuple(int(v) for v in c) for c in train]
    test = [tuple(int(v) for v in c) for c in test]
    for cell in train + test:
        if not layout.is_open(cell):
            raise LayoutError(f"goal {cell} is not an open cell of {layout.name}")
    overlap = set(train) & set(test)
    if overlap:
        raise LayoutError(f"train and test goals overlap at {sorted(overlap)}")
    if not train or not test:
        raise LayoutError("both train and test goal sets must be non-empty")
    return ([TaskSpec(c, "train", i, encoding) for i, c in enumerate(train)],
            [TaskSpec(c, "test", i, encoding) for i, c in enumerate(test)])


def four_rooms(goal_config: Mapping[str, Sequence[Sequence[int]]] | None = None,
               encoding: str = "goal") -> Tuple[GridLayout, List[TaskSpec], List[TaskSpec]]:
    """The 13x13 four-rooms layout with disjoint train and test goal sets."""
    goal_config = goal_config or {}
    layout = GridLayout.from_text(FOUR_ROOMS, "four_rooms")
    train = goal_config.get("train") or DEFAULT_TRAIN_GOALS
    test = goal_config.get("test") or DEFAULT_TEST_GOALS
    train_tasks, test_tasks = make_tasks(layout, train, test, encoding)
    return layout, train_tasks, test_tasks


def load_layout_file(path: str | Path, encoding: str = "goal") -> Tuple[GridLayout, List[TaskSpec], List[TaskSpec]]:
    """Reads a text grid: '#' wall, '.' or ' ' open, 'T' train goal, 'E' test goal."""
    path = Path(path)
    rows = [r.rstrip("\n") for r in path.read_text(encoding="utf-8").splitlines() if r.strip()]
    if not rows:
        raise LayoutError(f"{path}: empty layout file")
    width = max(len(r) for r in rows)
    train, test = [], []
    walls = np.ones((len(rows), width), dtype=bool)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch not in "#. TE":
                raise LayoutError(f"{path}: unknown symbol '{ch}' at ({x}, {y})")
            walls[y, x] = ch == "#"
            if ch == "T":
                train.append((x, y))
            elif ch == "E":
                test.append((x, y))
    layout = GridLayout(walls, path.stem)
    train_tasks, test_tasks = make_tasks(layout, train, test, encoding)
    return layout, train_tasks, test_tasks


def option_view(obs: np.ndarray) -> np.ndarray:
    """Drops everything past the agent and layout channels."""
    return obs[..., :OPTION_CHANNELS, :, :]


@dataclass
class EnvState:
    layout: GridLayout
    agent_cell: Cell
    task: TaskSpec
    step_count: int = 0
    done: bool = False


class GridWorld:
    """Single goal-reaching gridworld over a fixed layout."""

    def __init__(self, layout: GridLayout, tasks: Sequence[TaskSpec], max_steps: int = 100):
        if max_steps < 1:
            raise LayoutError("max_steps must be positive")
        if not tasks:
            raise LayoutError("a gridworld needs at least one task")
        for t in tasks:
            if not layout.is_open(t.goal_cell):
                raise LayoutError(f"goal {t.goal_cell} is not open")
        self.layout = layout
        self.tasks = list(tasks)
        self.max_steps = max_steps
        self.state: Optional[EnvState] = None

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def encoding(self) -> str:
        return self.tasks[0].encoding

    @property
    def obs_channels(self) -> int:
        return 3 if self.encoding == "goal" else 2

    @property
    def obs_grid(self) -> Tuple[int, int]:
        return self.layout.height, self.layout.width

    @property
    def done(self) -> bool:
        return self.state is None or self.state.done

    def _spawn(self, layout: GridLayout, goal: Cell, rng: np.random.Generator) -> Cell:
        candidates = [c for c in layout.open_cells if c != goal]
        return candidates[int(rng.integers(len(candidates)))]

    def reset(self, task_index: int, rng: np.random.Generator) -> np.ndarray:
        task = self.tasks[task_index]
        start = self._spawn(self.layout, task.goal_cell, rng)
        self.state = EnvState(self.layout, start, task)
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.state is None:
            raise EnvError("reset() must be called before observing")
        layout = self.state.layout
        obs = np.zeros((self.obs_channels, layout.height, layout.width))
        x, y = self.state.agent_cell
        obs[0, y, x] = 1.0
        obs[1] = layout.layout_channel()
        if self.obs_channels == 3:
            gx, gy = self.state.task.goal_cell
            obs[2, gy, gx] = 1.0
        return obs

    def step(self, action: int) -> Tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise EnvError("reset() must be called before step()")
        if self.state.done:
            raise EnvError("step() called on a finished episode")
        if not 0 <= int(action) < NUM_ACTIONS:
            raise EnvError(f"invalid action {action}")
        dx, dy = MOVES[int(action)]
        x, y = self.state.agent_cell
        target = (x + dx, y + dy)
        if self.state.layout.is_open(target):
            self.state.agent_cell = target
        self.state.step_count += 1
        reward = 0.0
        if self.state.agent_cell == self.state.task.goal_cell:
            reward = 1.0
            self.state.done = True
        elif self.state.step_count >= self.max_steps:
            self.state.done = True
        return self.observe(), reward, self.state.done


# --- procedural rooms -------------------------------------------------------

PROCEDURAL_SIZES = {"simple": 13, "hard": 21}
QUADRANTS = 4


def _quadrant(cell: Cell, size: int) -> int:
    x, y = cell
    half = size // 2
    return (1 if x > half else 0) + (2 if y > half else 0)


def _simple_walls(rng: np.random.Generator, size: int) -> np.ndarray:
    walls = np.zeros((size, size), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    row = int(rng.integers(4, size - 4))
    col = int(rng.integers(4, size - 4))
    if rng.random() < 0.85:
        walls[row, :] = True
    if rng.random() < 0.85:
        walls[:, col] = True
    # one doorway in each wall segment on either side of the crossing
    for lo, hi in ((1, col), (col + 1, size - 1)):
        if walls[row, lo:hi].all():
            walls[row, int(rng.integers(lo, hi))] = False
    for lo, hi in ((1, row), (row + 1, size - 1)):
        if walls[lo:hi, col].all():
            walls[int(rng.integers(lo, hi)), col] = False
    return walls


def _maze_walls(rng: np.random.Generator, size: int, extra_openings: float = 0.1) -> np.ndarray:
    walls = np.ones((size, size), dtype=bool)
    cells = (size - 1) // 2
    visited = np.zeros((cells, cells), dtype=bool)
    start = (int(rng.integers(cells)), int(rng.integers(cells)))
    stack = [start]
    visited[start[1], start[0]] = True
    walls[2 * start[1] + 1, 2 * start[0] + 1] = False
    while stack:
        cx, cy = stack[-1]
        options = [(cx + dx, cy + dy) for dx, dy in MOVES
                   if 0 <= cx + dx < cells and 0 <= cy + dy < cells and not visited[cy + dy, cx + dx]]
        if not options:
            stack.pop()
            continue
        nx, ny = options[int(rng.integers(len(options)))]
        visited[ny, nx] = True
        walls[2 * ny + 1, 2 * nx + 1] = False
        walls[cy + ny + 1, cx + nx + 1] = False
        stack.append((nx, ny))
    interior = [(x, y) for y in range(1, size - 1) for x in range(1, size - 1)
                if walls[y, x] and (x % 2) != (y % 2)]
    for i in rng.permutation(len(interior))[:int(extra_openings * len(interior))]:
        x, y = interior[int(i)]
        walls[y, x] = False
    return walls


def procedural_rooms(difficulty: str, seed: int, encoding: str = "task_id") -> Tuple[GridLayout, List[TaskSpec]]:
    """One generated layout plus a goal per quadrant task.

    ``simple`` gives a 13x13 grid of at most four rooms; ``hard`` a 21x21
    maze with a few loops.  Task ``q`` places its goal in quadrant ``q``.
    """
    if difficulty not in PROCEDURAL_SIZES:
        raise LayoutError(f"difficulty must be one of {sorted(PROCEDURAL_SIZES)}, got '{difficulty}'")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    size = PROCEDURAL_SIZES[difficulty]
    walls = _simple_walls(rng, size) if difficulty == "simple" else _maze_walls(rng, size)
    layout = GridLayout(walls, f"procedural_{difficulty}")
    phase = "train" if difficulty == "simple" else "test"
    tasks = []
    anchor = layout.open_cells[0]
    reachable = layout.reachable_from(anchor)
    for q in range(QUADRANTS):
        cells = [c for c in layout.open_cells if _quadrant(c, size) == q]
        if not cells:
            cells = layout.open_cells
        goal = cells[int(rng.integers(len(cells)))]
        if goal not in reachable:
            raise UnreachableGoalError(f"goal {goal} unreachable in {layout.name} (seed {seed})")
        tasks.append(TaskSpec(goal, phase, q, encoding))
    return layout, tasks


class ProceduralGridWorld(GridWorld):
    """Regenerates the layout at every reset; observations padded to ``obs_size``."""

    def __init__(self, difficulty: str, obs_size: int = 21, max_steps: int = 200, encoding: str = "task_id"):
        if obs_size < PROCEDURAL_SIZES.get(difficulty, 0):
            raise LayoutError(f"obs_size {obs_size} smaller than the {difficulty} grid")
        layout, tasks = procedural_rooms(difficulty, 0, encoding)
        super().__init__(layout, tasks, max_steps)
        self.difficulty = difficulty
        self.obs_size = obs_size

    @property
    def obs_grid(self) -> Tuple[int, int]:
        return self.obs_size, self.obs_size

    def reset(self, task_index: int, rng: np.random.Generator) -> np.ndarray:
        layout, tasks = procedural_rooms(self.difficulty, int(rng.integers(2 ** 31 - 1)), self.encoding)
        self.layout, self.tasks = layout, tasks
        task = tasks[task_index]
        self.state = EnvState(layout, self._spawn(layout, task.goal_cell, rng), task)
        return self.observe()

    def observe(self) -> np.ndarray:
        inner = super().observe()
        obs = np.zeros((inner.shape[0], self.obs_size, self.obs_size))
        obs[1] = 1.0
        h, w = inner.shape[1:]
        obs[:, :h, :w] = inner
        return obs


class BatchedGridWorld:
    """Steps B independent environments in lockstep."""

    def __init__(self, envs: Sequence[GridWorld]):
        if not envs:
            raise LayoutError("BatchedGridWorld needs at least one environment")
        self.envs = list(envs)

    def __len__(self) -> int:
        return len(self.envs)

    def reset(self, task_indices: Sequence[int], rngs: Sequence[np.random.Generator]) -> np.ndarray:
        return np.stack([env.reset(int(t), rng) for env, t, rng in zip(self.envs, task_indices, rngs)])

    def step(self, actions: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        results = [env.step(int(a)) for env, a in zip(self.envs, actions)]
        obs = np.stack([r[0] for r in results])
        rewards = np.array([r[1] for r in results])
        dones = np.array([r[2] for r in results], dtype=bool)
        return obs, rewards, dones


def build_env(env_config: Mapping[str, object], phase: str = "train") -> GridWorld:
    """Builds an environment from the ``env`` section of a run config."""
    kind = env_config.get("kind", "four_rooms")
    encoding = str(env_config.get("task_encoding", "goal"))
    max_steps = int(env_config.get("max_steps", 100))
    if kind == "four_rooms":
        layout_file = env_config.get("layout_file")
        if layout_file:
            layout, train, test = load_layout_file(str(layout_file), encoding)
        else:
            goals = {"train": env_config.get("train_goals"), "test": env_config.get("test_goals")}
            layout, train, test = four_rooms(goals, encoding)
        return GridWorld(layout, train if phase == "train" else test, max_steps)
    if kind == "procedural":
        difficulty = str(env_config.get("train_difficulty" if phase == "train" else "test_difficulty",
                                        "simple" if phase == "train" else "hard"))
        return ProceduralGridWorld(difficulty, int(env_config.get("obs_size", 21)), max_steps, encoding)
    raise LayoutError(f"unknown env kind '{kind}'")
