"""Discrete encoder description: per-edge operations and the per-layer resolution path."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

OPS = ("skip", "conv3x3", "conv5x5")
NODES = 3
MAX_LEVELS = 4


class GenotypeError(ValueError):
    pass


@dataclass
class Genotype:
    """``cells[layer][node][tap]`` is an op name; taps 0 and 1 are the two previous
    layers, tap ``2 + i`` is node ``i`` of the same cell. ``levels[layer]`` is the
    trellis level (0 = stem resolution, each level halves)."""

    cells: list[list[list[str]]]
    levels: list[int]
    plan: tuple[int, ...] = (4, 2, 2, 2)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.levels)

    @property
    def nodes(self) -> int:
        return len(self.cells[0]) if self.cells else 0

    def factor(self, level: int) -> int:
        """Downsampling factor of a trellis level relative to the input."""
        f = 1
        for s in self.plan[:level + 1]:
            f *= s
        return f

    def validate(self) -> None:
        if not self.levels:
            raise GenotypeError("genotype has no layers")
        if len(self.cells) != len(self.levels):
            raise GenotypeError(f"{len(self.cells)} cells for {len(self.levels)} path entries")
        if len(self.plan) < 1 or any(s < 1 for s in self.plan):
            raise GenotypeError(f"bad downsampling plan {self.plan}")
        if self.plan[0] & (self.plan[0] - 1) or any(s != 2 for s in self.plan[1:]):
            raise GenotypeError("plan must be a power-of-two stem factor followed by factors of 2")
        prev = 0
        for i, lv in enumerate(self.levels):
            if not 0 <= lv < len(self.plan):
                raise GenotypeError(f"layer {i}: level {lv} outside the {len(self.plan)}-level trellis")
            if abs(lv - prev) > 1:
                raise GenotypeError(f"layer {i}: level jumps from {prev} to {lv}")
            prev = lv
        if self.levels[0] != 0:
            raise GenotypeError("the path must start at the stem resolution (level 0)")
        for li, cell in enumerate(self.cells):
            if not cell:
                raise GenotypeError(f"layer {li}: cell has no nodes")
            for j, node in enumerate(cell):
                if len(node) != 2 + j:
                    raise GenotypeError(f"layer {li} node {j}: expected {2 + j} input edges, got {len(node)}")
                for op in node:
                    if op not in OPS:
                        raise GenotypeError(f"layer {li} node {j}: unknown op {op!r}")

    def to_text(self) -> str:
        lines = []
        for li, cell in enumerate(self.cells):
            for j, node in enumerate(cell):
                for tap, op in enumerate(node):
                    lines.append(f"cell/{li}/{j}/{tap}: {op}")
        lines.append("path: " + ",".join(str(self.factor(lv)) for lv in self.levels))
        lines.append("plan: " + ",".join(str(s) for s in self.plan))
        for k, v in self.meta.items():
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        edges: dict[tuple[int, int, int], str] = {}
        factors: list[int] | None = None
        plan: tuple[int, ...] = (4, 2, 2, 2)
        meta: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                if line.startswith("cell/"):
                    key, op = line.split(":", 1)
                    _, li, j, tap = key.strip().split("/")
                    edges[(int(li), int(j), int(tap))] = op.strip()
                elif line.startswith("path:"):
                    factors = [int(v) for v in line[5:].split(",")]
                elif line.startswith("plan:"):
                    plan = tuple(int(v) for v in line[5:].split(","))
                elif "=" in line:
                    k, v = line.split("=", 1)
                    meta[k.strip()] = v.strip()
                else:
                    raise ValueError("unrecognised line")
            except ValueError as exc:
                raise GenotypeError(f"line {lineno}: cannot parse {raw!r} ({exc})") from None
        if factors is None:
            raise GenotypeError("missing 'path:' line")
        level_of = {}
        f = 1
        for lv, s in enumerate(plan):
            f *= s
            level_of[f] = lv
        try:
            levels = [level_of[v] for v in factors]
        except KeyError as exc:
            raise GenotypeError(f"path factor {exc.args[0]} is not a level of plan {plan}") from None
        n_layers = len(levels)
        n_nodes = 1 + max((j for (_, j, _) in edges), default=-1)
        cells = []
        for li in range(n_layers):
            cell = []
            for j in range(n_nodes):
                node = []
                for tap in range(2 + j):
                    if (li, j, tap) not in edges:
                        raise GenotypeError(f"missing edge cell/{li}/{j}/{tap}")
                    node.append(edges[(li, j, tap)])
                cell.append(node)
            cells.append(cell)
        extra = [k for k in edges if k[0] >= n_layers]
        if extra:
            raise GenotypeError(f"edges for layers beyond the path: {sorted(extra)[:3]}")
        g = cls(cells, levels, plan, meta)
        g.validate()
        return g

    def digest(self) -> str:
        body = "".join(line + "\n" for line in self.to_text().splitlines() if "=" not in line)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def uniform_genotype(levels: list[int], op: str = "conv3x3", nodes: int = NODES,
                     plan: tuple[int, ...] = (4, 2, 2, 2)) -> Genotype:
    cells = [[[op] * (2 + j) for j in range(nodes)] for _ in levels]
    return Genotype(cells, list(levels), plan)


def default_genotype() -> Genotype:
    """Six-layer toy encoder: down to level 2 and back up, mixing all three ops."""
    cell = [["conv3x3", "skip"], ["conv3x3", "conv5x5", "skip"], ["skip", "conv3x3", "conv3x3", "skip"]]
    levels = [0, 1, 2, 2, 1, 0]
    return Genotype([[list(n) for n in cell] for _ in levels], levels, (4, 2, 2, 2))
