"""Snake-ordered acquisition grid geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class GridLayout:
    """Bijection between acquisition index and (row, col) grid cell."""

    rows: int
    cols: int
    snake: bool
    order: tuple[tuple[int, int], ...] = field(repr=False)

    def cell_at(self, index: int) -> tuple[int, int]:
        return self.order[index]

    def index_of(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise InvalidArgumentError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        if self.snake and row % 2 == 1:
            return row * self.cols + (self.cols - 1 - col)
        return row * self.cols + col

    def cells(self) -> tuple[tuple[int, int], ...]:
        return self.order

    def __len__(self) -> int:
        return self.rows * self.cols


def make_grid_layout(rows: int, cols: int, snake: bool = True) -> GridLayout:
    """Enumerate grid cells row 0 left-to-right, alternating direction per row when snake."""
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"grid must have at least one row and column, got {rows}x{cols}")
    order = []
    for r in range(rows):
        cs = range(cols)
        if snake and r % 2 == 1:
            cs = reversed(cs)
        order.extend((r, c) for c in cs)
    return GridLayout(rows=rows, cols=cols, snake=snake, order=tuple(order))
